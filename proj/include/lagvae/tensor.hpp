#pragma once

// Dense float64 tensors with tape-based reverse-mode differentiation.
//
// A Tape records operations while it is the active tape of the calling thread
// (see TapeScope). With no active tape, operations only compute values, which
// is how evaluation code runs. Only rank-1 and rank-2 shapes are used by the
// library; broadcasting is limited to scalar-with-tensor.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "lagvae/errors.hpp"

namespace lagvae {

using Shape = std::vector<std::size_t>;

inline std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "x" : "") << shape[i];
  out << ']';
  return out.str();
}

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

// Storage is allocated at Eigen's maximum alignment so vectorized kernels split
// every buffer the same way, keeping results independent of heap addresses.
using Buffer = std::vector<double, Eigen::aligned_allocator<double>>;

struct TensorData {
  Shape shape;
  Buffer value;
  Buffer grad;  // empty until something accumulates into it
  bool requires_grad = false;

  Buffer& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

class Tape;

// Shared handle to a TensorData. Copies alias the same storage.
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, const std::vector<double>& values) : Tensor(std::move(shape), Buffer(values.begin(), values.end())) {}
  Tensor(Shape shape, std::initializer_list<double> values) : Tensor(std::move(shape), Buffer(values)) {}

  Tensor(Shape shape, Buffer values) : data_(std::make_shared<TensorData>()) {
    if (shape.empty()) throw DimensionError("Tensor: empty shape");
    for (std::size_t extent : shape)
      if (extent == 0) throw DimensionError("Tensor: zero extent in shape " + to_string(shape));
    if (numel(shape) != values.size())
      throw DimensionError("Tensor: shape " + to_string(shape) + " needs " + std::to_string(numel(shape)) +
                           " values, got " + std::to_string(values.size()));
    data_->shape = std::move(shape);
    data_->value = std::move(values);
  }

  static Tensor zeros(Shape shape) { return filled(std::move(shape), 0.0); }
  static Tensor filled(Shape shape, double v) {
    const std::size_t n = numel(shape);
    return Tensor(std::move(shape), Buffer(n, v));
  }
  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor vector(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor({n}, std::move(v));
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
    return Tensor({rows, cols}, std::move(v));
  }

  bool defined() const { return static_cast<bool>(data_); }
  const Shape& shape() const { return data_->shape; }
  std::size_t rank() const { return data_->shape.size(); }
  std::size_t size() const { return data_->value.size(); }
  bool is_scalar() const { return size() == 1; }
  std::size_t rows() const { return rank() == 2 ? data_->shape[0] : 1; }
  std::size_t cols() const { return data_->shape.back(); }

  std::span<const double> values() const { return data_->value; }
  // Writable view for parameter updates between passes.
  std::span<double> mutable_values() { return data_->value; }
  double operator[](std::size_t i) const { return data_->value[i]; }
  double at(std::size_t r, std::size_t c) const { return data_->value[r * cols() + c]; }
  double item() const {
    if (!is_scalar()) throw ContractError("Tensor::item on shape " + to_string(shape()));
    return data_->value[0];
  }

  bool requires_grad() const { return data_ && data_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    data_->requires_grad = on;
    return *this;
  }
  bool has_grad() const { return !data_->grad.empty(); }
  // Accumulated gradient; empty span if nothing has reached this tensor.
  std::span<const double> grad() const { return data_->grad; }
  std::vector<double> grad_or_zero() const {
    return has_grad() ? std::vector<double>(data_->grad.begin(), data_->grad.end()) : std::vector<double>(size(), 0.0);
  }
  void zero_grad() { std::fill(data_->grad.begin(), data_->grad.end(), 0.0); }

  Tensor detach() const { return Tensor(shape(), data_->value); }

  const TensorData* id() const { return data_.get(); }
  const std::shared_ptr<TensorData>& data() const { return data_; }

 private:
  friend class Tape;
  std::shared_ptr<TensorData> data_;
};

namespace detail {
inline Tape*& active_tape() {
  thread_local Tape* tape = nullptr;
  return tape;
}
}  // namespace detail

// Ordered record of differentiable operations for one forward/backward episode.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const { return nodes_.size(); }

  // Accumulates d(loss)/d(t) into every requires-grad tensor reachable from
  // loss. A second call needs zero_grad() first.
  void backward(const Tensor& loss) {
    if (!loss.defined() || !loss.is_scalar())
      throw ContractError("backward: loss must be a scalar, got shape " +
                          (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
    if (consumed_) throw ContractError("backward: tape already replayed; call zero_grad() first");
    if (!loss.requires_grad()) throw ContractError("backward: loss is not connected to any requires-grad tensor");
    consumed_ = true;
    loss.data_->grad_buffer()[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (it->output->grad.empty()) continue;
      it->backward();
    }
  }

  // Clears the gradient of every tensor the tape touched and re-arms backward.
  void zero_grad() {
    for (auto& node : nodes_) {
      std::fill(node.output->grad.begin(), node.output->grad.end(), 0.0);
      for (auto& in : node.inputs) std::fill(in->grad.begin(), in->grad.end(), 0.0);
    }
    consumed_ = false;
  }

  void clear() {
    nodes_.clear();
    consumed_ = false;
  }

  // Used by operations: record out = op(inputs) with its backward rule.
  void record(const Tensor& out, std::initializer_list<const Tensor*> inputs, std::function<void()> backward) {
    Node node;
    node.output = out.data_;
    for (const Tensor* in : inputs)
      if (in->defined()) node.inputs.push_back(in->data_);
    node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
  }

 private:
  struct Node {
    std::vector<std::shared_ptr<TensorData>> inputs;
    std::shared_ptr<TensorData> output;
    std::function<void()> backward;
  };
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

// Makes `tape` the recording tape of this thread for the scope's lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape) : previous_(detail::active_tape()) { detail::active_tape() = &tape; }
  ~TapeScope() { detail::active_tape() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Suspends recording for the scope's lifetime.
class NoGradScope {
 public:
  NoGradScope() : previous_(detail::active_tape()) { detail::active_tape() = nullptr; }
  ~NoGradScope() { detail::active_tape() = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;
using ConstVecMap = Eigen::Map<const Eigen::RowVectorXd>;
using MutVecMap = Eigen::Map<Eigen::RowVectorXd>;

inline ConstMap as_matrix(const Buffer& v, std::size_t r, std::size_t c) {
  return ConstMap(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
inline MutMap as_matrix(Buffer& v, std::size_t r, std::size_t c) {
  return MutMap(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

// Returns the tape to record on, or nullptr when the result needs no gradient.
inline Tape* recording(std::initializer_list<const Tensor*> inputs) {
  Tape* tape = active_tape();
  if (!tape) return nullptr;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return tape;
  return nullptr;
}

inline void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got shape " + to_string(t.shape()));
}

inline Tensor make_output(Shape shape, Buffer values, Tape* tape) {
  Tensor out(std::move(shape), std::move(values));
  if (tape) out.set_requires_grad(true);
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Matrix products

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k)
    throw DimensionError("matmul: inner extents differ, " + to_string(a.shape()) + " x " + to_string(b.shape()));
  Tape* tape = detail::recording({&a, &b});
  Buffer out(m * n);
  detail::as_matrix(out, m, n).noalias() =
      detail::as_matrix(a.data()->value, m, k) * detail::as_matrix(b.data()->value, k, n);
  Tensor result = detail::make_output({m, n}, std::move(out), tape);
  if (tape) {
    auto A = a.data(), B = b.data(), C = result.data();
    tape->record(result, {&a, &b}, [A, B, C, m, k, n] {
      auto dC = detail::as_matrix(C->grad, m, n);
      if (A->requires_grad)
        detail::as_matrix(A->grad_buffer(), m, k).noalias() += dC * detail::as_matrix(B->value, k, n).transpose();
      if (B->requires_grad)
        detail::as_matrix(B->grad_buffer(), k, n).noalias() += detail::as_matrix(A->value, m, k).transpose() * dC;
    });
  }
  return result;
}

// x[m×k] · w[n×k]ᵀ + bias[n]. `bias` may be undefined.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = Tensor()) {
  detail::require_rank2(x, "linear");
  detail::require_rank2(w, "linear");
  const std::size_t m = x.rows(), k = x.cols(), n = w.rows();
  if (w.cols() != k)
    throw DimensionError("linear: input " + to_string(x.shape()) + " does not match weight " + to_string(w.shape()));
  if (bias.defined() && bias.size() != n)
    throw DimensionError("linear: bias " + to_string(bias.shape()) + " does not match weight " + to_string(w.shape()));
  Tape* tape = bias.defined() ? detail::recording({&x, &w, &bias}) : detail::recording({&x, &w});
  Buffer out(m * n);
  auto Y = detail::as_matrix(out, m, n);
  Y.noalias() = detail::as_matrix(x.data()->value, m, k) * detail::as_matrix(w.data()->value, n, k).transpose();
  if (bias.defined()) Y.rowwise() += detail::ConstVecMap(bias.data()->value.data(), static_cast<Eigen::Index>(n));
  Tensor result = detail::make_output({m, n}, std::move(out), tape);
  if (tape) {
    auto X = x.data(), W = w.data(), C = result.data();
    auto Bp = bias.defined() ? bias.data() : nullptr;
    tape->record(result, {&x, &w, &bias}, [X, W, Bp, C, m, k, n] {
      auto dY = detail::as_matrix(C->grad, m, n);
      if (X->requires_grad)
        detail::as_matrix(X->grad_buffer(), m, k).noalias() += dY * detail::as_matrix(W->value, n, k);
      if (W->requires_grad)
        detail::as_matrix(W->grad_buffer(), n, k).noalias() += dY.transpose() * detail::as_matrix(X->value, m, k);
      if (Bp && Bp->requires_grad)
        detail::MutVecMap(Bp->grad_buffer().data(), static_cast<Eigen::Index>(n)) += dY.colwise().sum();
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Elementwise

enum class UnaryOp { Neg, Sigmoid, Tanh, Exp, Log, Square };
enum class BinaryOp { Add, Sub, Mul };

inline Tensor elementwise(UnaryOp op, const Tensor& x) {
  Tape* tape = detail::recording({&x});
  const auto& in = x.data()->value;
  Buffer out(in.size());
  switch (op) {
    case UnaryOp::Neg:
      for (std::size_t i = 0; i < in.size(); ++i) out[i] = -in[i];
      break;
    case UnaryOp::Sigmoid:
      for (std::size_t i = 0; i < in.size(); ++i)
        out[i] = in[i] >= 0 ? 1.0 / (1.0 + std::exp(-in[i])) : std::exp(in[i]) / (1.0 + std::exp(in[i]));
      break;
    case UnaryOp::Tanh:
      for (std::size_t i = 0; i < in.size(); ++i) out[i] = std::tanh(in[i]);
      break;
    case UnaryOp::Exp:
      for (std::size_t i = 0; i < in.size(); ++i) out[i] = std::exp(in[i]);
      break;
    case UnaryOp::Log:
      for (std::size_t i = 0; i < in.size(); ++i) {
        if (!(in[i] > 0.0)) throw DomainError("log: non-positive argument " + std::to_string(in[i]));
        out[i] = std::log(in[i]);
      }
      break;
    case UnaryOp::Square:
      for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] * in[i];
      break;
  }
  Tensor result = detail::make_output(x.shape(), std::move(out), tape);
  if (tape) {
    auto X = x.data(), Y = result.data();
    tape->record(result, {&x}, [X, Y, op] {
      auto& gx = X->grad_buffer();
      const auto& gy = Y->grad;
      const auto& xv = X->value;
      const auto& yv = Y->value;
      const std::size_t n = gx.size();
      switch (op) {
        case UnaryOp::Neg:
          for (std::size_t i = 0; i < n; ++i) gx[i] -= gy[i];
          break;
        case UnaryOp::Sigmoid:
          for (std::size_t i = 0; i < n; ++i) gx[i] += gy[i] * yv[i] * (1.0 - yv[i]);
          break;
        case UnaryOp::Tanh:
          for (std::size_t i = 0; i < n; ++i) gx[i] += gy[i] * (1.0 - yv[i] * yv[i]);
          break;
        case UnaryOp::Exp:
          for (std::size_t i = 0; i < n; ++i) gx[i] += gy[i] * yv[i];
          break;
        case UnaryOp::Log:
          for (std::size_t i = 0; i < n; ++i) gx[i] += gy[i] / xv[i];
          break;
        case UnaryOp::Square:
          for (std::size_t i = 0; i < n; ++i) gx[i] += 2.0 * gy[i] * xv[i];
          break;
      }
    });
  }
  return result;
}

inline Tensor elementwise(BinaryOp op, const Tensor& a, const Tensor& b) {
  const bool same = a.shape() == b.shape();
  if (!same && !a.is_scalar() && !b.is_scalar())
    throw DimensionError("elementwise: incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
  Tape* tape = detail::recording({&a, &b});
  const auto& av = a.data()->value;
  const auto& bv = b.data()->value;
  const Shape shape = (same || b.is_scalar()) ? a.shape() : b.shape();
  const std::size_t n = numel(shape);
  const std::size_t sa = av.size() == n ? 1 : 0;  // stride 0 broadcasts a scalar
  const std::size_t sb = bv.size() == n ? 1 : 0;
  Buffer out(n);
  switch (op) {
    case BinaryOp::Add:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i * sa] + bv[i * sb];
      break;
    case BinaryOp::Sub:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i * sa] - bv[i * sb];
      break;
    case BinaryOp::Mul:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i * sa] * bv[i * sb];
      break;
  }
  Tensor result = detail::make_output(shape, std::move(out), tape);
  if (tape) {
    auto A = a.data(), B = b.data(), C = result.data();
    tape->record(result, {&a, &b}, [A, B, C, op, n, sa, sb] {
      const auto& gc = C->grad;
      if (A->requires_grad) {
        auto& ga = A->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) ga[i * sa] += op == BinaryOp::Mul ? gc[i] * B->value[i * sb] : gc[i];
      }
      if (B->requires_grad) {
        auto& gb = B->grad_buffer();
        const double sign = op == BinaryOp::Sub ? -1.0 : 1.0;
        for (std::size_t i = 0; i < n; ++i)
          gb[i * sb] += op == BinaryOp::Mul ? gc[i] * A->value[i * sa] : sign * gc[i];
      }
    });
  }
  return result;
}

inline Tensor neg(const Tensor& x) { return elementwise(UnaryOp::Neg, x); }
inline Tensor sigmoid(const Tensor& x) { return elementwise(UnaryOp::Sigmoid, x); }
inline Tensor tanh(const Tensor& x) { return elementwise(UnaryOp::Tanh, x); }
inline Tensor exp(const Tensor& x) { return elementwise(UnaryOp::Exp, x); }
inline Tensor log(const Tensor& x) { return elementwise(UnaryOp::Log, x); }
inline Tensor square(const Tensor& x) { return elementwise(UnaryOp::Square, x); }
inline Tensor add(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::Add, a, b); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::Sub, a, b); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::Mul, a, b); }

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// a * s + shift for constants s and shift.
inline Tensor affine(const Tensor& a, double s, double shift = 0.0) {
  Tape* tape = detail::recording({&a});
  Buffer out(a.values().begin(), a.values().end());
  for (double& v : out) v = v * s + shift;
  Tensor result = detail::make_output(a.shape(), std::move(out), tape);
  if (tape) {
    auto A = a.data(), C = result.data();
    tape->record(result, {&a}, [A, C, s] {
      auto& ga = A->grad_buffer();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += s * C->grad[i];
    });
  }
  return result;
}
inline Tensor scale(const Tensor& a, double s) { return affine(a, s, 0.0); }

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x) {
  Tape* tape = detail::recording({&x});
  double total = 0.0;
  for (double v : x.values()) total += v;
  Tensor result = detail::make_output({1}, {total}, tape);
  if (tape) {
    auto X = x.data(), C = result.data();
    tape->record(result, {&x}, [X, C] {
      const double g = C->grad[0];
      for (double& gx : X->grad_buffer()) gx += g;
    });
  }
  return result;
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

// Per-row sum of a matrix: [m×n] -> [m].
inline Tensor row_sum(const Tensor& x) {
  detail::require_rank2(x, "row_sum");
  const std::size_t m = x.rows(), n = x.cols();
  Tape* tape = detail::recording({&x});
  Buffer out(m, 0.0);
  const auto& xv = x.data()->value;
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r] += xv[r * n + c];
  Tensor result = detail::make_output({m}, std::move(out), tape);
  if (tape) {
    auto X = x.data(), C = result.data();
    tape->record(result, {&x}, [X, C, m, n] {
      auto& gx = X->grad_buffer();
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) gx[r * n + c] += C->grad[r];
    });
  }
  return result;
}

// log Σ exp(x) over all entries, stabilised by max subtraction.
inline Tensor logsumexp(const Tensor& x) {
  Tape* tape = detail::recording({&x});
  const auto& xv = x.data()->value;
  const double peak = *std::max_element(xv.begin(), xv.end());
  double acc = 0.0;
  for (double v : xv) acc += std::exp(v - peak);
  const double lse = peak + std::log(acc);
  Tensor result = detail::make_output({1}, {lse}, tape);
  if (tape) {
    auto X = x.data(), C = result.data();
    tape->record(result, {&x}, [X, C, lse] {
      auto& gx = X->grad_buffer();
      const double g = C->grad[0];
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g * std::exp(X->value[i] - lse);
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Structural

inline Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count) {
  detail::require_rank2(x, "slice_cols");
  const std::size_t m = x.rows(), n = x.cols();
  if (count == 0 || begin + count > n)
    throw DimensionError("slice_cols: columns [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") outside " + to_string(x.shape()));
  Tape* tape = detail::recording({&x});
  Buffer out(m * count);
  const auto& xv = x.data()->value;
  for (std::size_t r = 0; r < m; ++r)
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(r * n + begin), count,
                out.begin() + static_cast<std::ptrdiff_t>(r * count));
  Tensor result = detail::make_output({m, count}, std::move(out), tape);
  if (tape) {
    auto X = x.data(), C = result.data();
    tape->record(result, {&x}, [X, C, m, n, begin, count] {
      auto& gx = X->grad_buffer();
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < count; ++c) gx[r * n + begin + c] += C->grad[r * count + c];
    });
  }
  return result;
}

inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
  detail::require_rank2(a, "concat_cols");
  detail::require_rank2(b, "concat_cols");
  if (a.rows() != b.rows())
    throw DimensionError("concat_cols: row counts differ, " + to_string(a.shape()) + " and " + to_string(b.shape()));
  const std::size_t m = a.rows(), p = a.cols(), q = b.cols(), n = p + q;
  Tape* tape = detail::recording({&a, &b});
  Buffer out(m * n);
  for (std::size_t r = 0; r < m; ++r) {
    std::copy_n(a.values().begin() + static_cast<std::ptrdiff_t>(r * p), p,
                out.begin() + static_cast<std::ptrdiff_t>(r * n));
    std::copy_n(b.values().begin() + static_cast<std::ptrdiff_t>(r * q), q,
                out.begin() + static_cast<std::ptrdiff_t>(r * n + p));
  }
  Tensor result = detail::make_output({m, n}, std::move(out), tape);
  if (tape) {
    auto A = a.data(), B = b.data(), C = result.data();
    tape->record(result, {&a, &b}, [A, B, C, m, p, q, n] {
      if (A->requires_grad) {
        auto& ga = A->grad_buffer();
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t c = 0; c < p; ++c) ga[r * p + c] += C->grad[r * n + c];
      }
      if (B->requires_grad) {
        auto& gb = B->grad_buffer();
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t c = 0; c < q; ++c) gb[r * q + c] += C->grad[r * n + p + c];
      }
    });
  }
  return result;
}

// Rows of table[V×E] selected by ids -> [ids.size()×E].
inline Tensor gather_rows(const Tensor& table, std::span<const int> ids) {
  detail::require_rank2(table, "gather_rows");
  const std::size_t vocab = table.rows(), dim = table.cols(), m = ids.size();
  if (m == 0) throw DimensionError("gather_rows: no ids");
  for (std::size_t i = 0; i < m; ++i)
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab)
      throw IndexError("gather_rows: id " + std::to_string(ids[i]) + " at position " + std::to_string(i) +
                       " outside [0, " + std::to_string(vocab) + ")");
  Tape* tape = detail::recording({&table});
  Buffer out(m * dim);
  const auto& tv = table.data()->value;
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(ids[i]) * dim), dim,
                out.begin() + static_cast<std::ptrdiff_t>(i * dim));
  Tensor result = detail::make_output({m, dim}, std::move(out), tape);
  if (tape) {
    auto T = table.data(), C = result.data();
    std::vector<int> idx(ids.begin(), ids.end());
    tape->record(result, {&table}, [T, C, idx = std::move(idx), dim] {
      auto& gt = T->grad_buffer();
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t c = 0; c < dim; ++c) gt[static_cast<std::size_t>(idx[i]) * dim + c] += C->grad[i * dim + c];
    });
  }
  return result;
}

// Row r of the result is a's row where keep[r] is set, b's row otherwise.
inline Tensor select_rows(std::span<const char> keep, const Tensor& a, const Tensor& b) {
  detail::require_rank2(a, "select_rows");
  if (a.shape() != b.shape())
    throw DimensionError("select_rows: shapes differ, " + to_string(a.shape()) + " and " + to_string(b.shape()));
  const std::size_t m = a.rows(), n = a.cols();
  if (keep.size() != m) throw DimensionError("select_rows: mask length does not match row count");
  Tape* tape = detail::recording({&a, &b});
  Buffer out(m * n);
  for (std::size_t r = 0; r < m; ++r) {
    const auto& src = keep[r] ? a.data()->value : b.data()->value;
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(r * n), n, out.begin() + static_cast<std::ptrdiff_t>(r * n));
  }
  Tensor result = detail::make_output({m, n}, std::move(out), tape);
  if (tape) {
    auto A = a.data(), B = b.data(), C = result.data();
    std::vector<char> mask(keep.begin(), keep.end());
    tape->record(result, {&a, &b}, [A, B, C, mask = std::move(mask), m, n] {
      for (std::size_t r = 0; r < m; ++r) {
        auto& target = mask[r] ? A : B;
        if (!target->requires_grad) continue;
        auto& g = target->grad_buffer();
        for (std::size_t c = 0; c < n; ++c) g[r * n + c] += C->grad[r * n + c];
      }
    });
  }
  return result;
}

// weight[r] * log softmax(logits[r])[target[r]] for each row -> [m].
// Rows with zero weight contribute nothing, including to gradients.
inline Tensor log_softmax_pick(const Tensor& logits, std::span<const int> targets, std::span<const double> weights) {
  detail::require_rank2(logits, "log_softmax_pick");
  const std::size_t m = logits.rows(), v = logits.cols();
  if (targets.size() != m || weights.size() != m)
    throw DimensionError("log_softmax_pick: targets/weights length does not match " + to_string(logits.shape()));
  for (std::size_t r = 0; r < m; ++r)
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= v)
      throw IndexError("log_softmax_pick: target " + std::to_string(targets[r]) + " outside [0, " +
                       std::to_string(v) + ")");
  Tape* tape = detail::recording({&logits});
  const auto& lv = logits.data()->value;
  std::vector<double> lse(m);
  Buffer out(m);
  for (std::size_t r = 0; r < m; ++r) {
    const double* row = lv.data() + r * v;
    const double peak = *std::max_element(row, row + v);
    double acc = 0.0;
    for (std::size_t c = 0; c < v; ++c) acc += std::exp(row[c] - peak);
    lse[r] = peak + std::log(acc);
    out[r] = weights[r] == 0.0 ? 0.0 : weights[r] * (row[targets[r]] - lse[r]);
  }
  Tensor result = detail::make_output({m}, std::move(out), tape);
  if (tape) {
    auto L = logits.data(), C = result.data();
    std::vector<int> tg(targets.begin(), targets.end());
    std::vector<double> wt(weights.begin(), weights.end());
    tape->record(result, {&logits}, [L, C, tg = std::move(tg), wt = std::move(wt), lse = std::move(lse), m, v] {
      auto& gl = L->grad_buffer();
      for (std::size_t r = 0; r < m; ++r) {
        const double g = C->grad[r] * wt[r];
        if (g == 0.0) continue;
        const double* row = L->value.data() + r * v;
        double* grow = gl.data() + r * v;
        for (std::size_t c = 0; c < v; ++c) grow[c] -= g * std::exp(row[c] - lse[r]);
        grow[tg[r]] += g;
      }
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Gradient checking

// Max over coordinates of |analytic - numeric| / max(floor, |analytic|, |numeric|),
// with central differences of the given step. `f` is evaluated once on a tape
// and 2·N times without one; `params` are perturbed in place and restored.
inline double grad_check(const std::function<Tensor()>& f, std::span<Tensor> params, double step,
                         double floor = 1.0) {
  if (!(step > 0.0)) throw ContractError("grad_check: step must be positive");
  if (!(floor > 0.0)) throw ContractError("grad_check: floor must be positive");
  for (Tensor& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  Tape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = f();
  }
  if (!std::isfinite(loss.item())) throw DomainError("grad_check: non-finite function value");
  tape.backward(loss);
  auto eval = [&f] {
    NoGradScope off;
    const double v = f().item();
    if (!std::isfinite(v)) throw DomainError("grad_check: non-finite function value under perturbation");
    return v;
  };
  double worst = 0.0;
  for (Tensor& p : params) {
    const std::vector<double> analytic = p.grad_or_zero();
    auto values = p.mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + step;
      const double up = eval();
      values[i] = saved - step;
      const double down = eval();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double denom = std::max({floor, std::abs(analytic[i]), std::abs(numeric)});
      worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
  }
  return worst;
}

inline double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point, double step,
                         double floor = 1.0) {
  Tensor x = point.detach();
  std::vector<Tensor> params{x};
  return grad_check([&] { return f(x); }, params, step, floor);
}

}  // namespace lagvae
