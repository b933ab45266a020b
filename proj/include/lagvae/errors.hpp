#pragma once

#include <stdexcept>
#include <string>

namespace lagvae {

// Base of every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or extent mismatch between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Value outside the domain of an operation (log of a non-positive value,
// non-finite intermediate, grid coverage failure).
class DomainError : public Error {
 public:
  using Error::Error;
};

// API misuse: non-scalar loss, double backward, etc.
class ContractError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class InputError : public Error {
 public:
  using Error::Error;
};

// Malformed file content; message carries the line or record index.
class ParseError : public Error {
 public:
  using Error::Error;
};

// Well-formed content that violates a semantic constraint.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Checkpoint written by an incompatible format version.
class MigrationError : public Error {
 public:
  using Error::Error;
};

// Requested operation is not defined for this model configuration.
class CapabilityError : public Error {
 public:
  using Error::Error;
};

// Training hit a non-finite loss or gradient.
class TrainingAborted : public Error {
 public:
  using Error::Error;
};

}  // namespace lagvae
