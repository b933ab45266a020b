#pragma once

// Versioned binary checkpoints: parameters, optimizer moments, random-stream
// states, trainer state and metrics history. Doubles are stored as raw IEEE
// bits in the writer's byte order, recorded by a marker word.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "lagvae/config.hpp"
#include "lagvae/errors.hpp"
#include "lagvae/eval.hpp"
#include "lagvae/train.hpp"
#include "lagvae/vae.hpp"

namespace lagvae {

inline constexpr char kCheckpointMagic[8] = {'L', 'A', 'G', 'V', 'A', 'E', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint32_t kEndianMarker = 0x01020304;

struct SavedParam {
  std::string name;
  ParamRole role = ParamRole::Generator;
  Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::uint64_t config_digest = 0;
  std::string config_text;  // serialized RunConfig
  std::vector<SavedParam> params;
  OptimizerKind optimizer = OptimizerKind::Sgd;
  OptimizerState encoder_optimizer;
  OptimizerState decoder_optimizer;
  std::string shuffle_stream;
  std::string dropout_stream;
  std::string reparam_stream;
  TrainState state;
  std::vector<MetricsRecord> history;

  RunConfig config() const { return parse_config(config_text, RunConfig{}, "checkpoint"); }
};

inline std::vector<SavedParam> capture_params(const VaeModel& model) {
  std::vector<SavedParam> out;
  for (const auto& p : model.parameters())
    out.push_back({p.name, p.role, p.tensor.shape(), {p.tensor.values().begin(), p.tensor.values().end()}});
  return out;
}

inline void load_params(VaeModel& model, std::span<const SavedParam> saved) {
  const auto params = model.parameters();
  if (params.size() != saved.size())
    throw ValidationError("checkpoint holds " + std::to_string(saved.size()) + " parameters, model has " +
                          std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].name != saved[i].name || params[i].role != saved[i].role)
      throw ValidationError("checkpoint parameter " + saved[i].name + " does not match model parameter " + params[i].name);
    if (params[i].tensor.shape() != saved[i].shape)
      throw ValidationError("checkpoint parameter " + saved[i].name + " has shape " + to_string(saved[i].shape) +
                            ", model expects " + to_string(params[i].tensor.shape()));
    Tensor t = params[i].tensor;
    std::copy(saved[i].values.begin(), saved[i].values.end(), t.mutable_values().begin());
  }
}

inline Checkpoint capture(Trainer& trainer, const RunConfig& cfg) {
  Checkpoint ck;
  ck.config_digest = config_digest(cfg);
  ck.config_text = serialize_config(cfg);
  ck.params = capture_params(trainer.model());
  ck.optimizer = trainer.config().optimizer;
  ck.encoder_optimizer = trainer.encoder_optimizer().state();
  ck.decoder_optimizer = trainer.decoder_optimizer().state();
  ck.shuffle_stream = trainer.streams().shuffle.state();
  ck.dropout_stream = trainer.streams().dropout.state();
  ck.reparam_stream = trainer.streams().reparam.state();
  ck.state = trainer.state();
  ck.history = trainer.history();
  return ck;
}

// Restores everything needed to continue training bitwise.
inline void restore(Trainer& trainer, const Checkpoint& ck) {
  if (ck.optimizer != trainer.config().optimizer) throw ValidationError("checkpoint optimizer kind differs from config");
  load_params(trainer.model(), ck.params);
  trainer.encoder_optimizer().restore(ck.encoder_optimizer);
  trainer.decoder_optimizer().restore(ck.decoder_optimizer);
  trainer.streams().shuffle.restore(ck.shuffle_stream);
  trainer.streams().dropout.restore(ck.dropout_stream);
  trainer.streams().reparam.restore(ck.reparam_stream);
  trainer.mutable_state() = ck.state;
  trainer.mutable_history() = ck.history;
}

// ---------------------------------------------------------------------------
// Binary encoding

namespace detail {

class Writer {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) { raw(&v, sizeof v); }
  void u64(std::uint64_t v) { raw(&v, sizeof v); }
  void f64(double v) { raw(&v, sizeof v); }
  void str(const std::string& s) {
    u64(s.size());
    buf_.append(s);
  }
  void f64s(const std::vector<double>& v) {
    u64(v.size());
    raw(v.data(), v.size() * sizeof(double));
  }
  void raw(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
  const std::string& bytes() const { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(std::string bytes, std::string origin) : buf_(std::move(bytes)), origin_(std::move(origin)) {}

  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(buf_[pos_++]);
  }
  std::uint32_t u32() { return pod<std::uint32_t>(); }
  std::uint64_t u64() { return pod<std::uint64_t>(); }
  double f64() { return pod<double>(); }
  std::string str() {
    const std::uint64_t n = u64();
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::vector<double> f64s() {
    const std::uint64_t n = u64();
    need(n * sizeof(double));
    std::vector<double> v(n);
    std::memcpy(v.data(), buf_.data() + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
    return v;
  }
  void expect_end() const {
    if (pos_ != buf_.size()) throw ParseError(origin_ + ": trailing bytes after checkpoint payload");
  }

 private:
  template <class T>
  T pod() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  void need(std::uint64_t n) const {
    if (n > buf_.size() - pos_) throw ParseError(origin_ + ": truncated checkpoint");
  }
  std::string buf_;
  std::string origin_;
  std::size_t pos_ = 0;
};

inline void write_optimizer(Writer& w, const OptimizerState& s) {
  w.u64(s.steps);
  w.u64(s.first_moment.size());
  for (std::size_t i = 0; i < s.first_moment.size(); ++i) {
    w.f64s(s.first_moment[i]);
    w.f64s(s.second_moment[i]);
  }
}

inline OptimizerState read_optimizer(Reader& r) {
  OptimizerState s;
  s.steps = r.u64();
  const std::uint64_t n = r.u64();
  for (std::uint64_t i = 0; i < n; ++i) {
    s.first_moment.push_back(r.f64s());
    s.second_moment.push_back(r.f64s());
  }
  return s;
}

inline void write_state(Writer& w, const TrainState& s) {
  w.u64(s.epoch);
  w.u64(s.cursor);
  w.u64(s.order.size());
  for (const auto& batch : s.order) {
    w.u64(batch.size());
    for (std::size_t i : batch) w.u64(i);
  }
  w.u64(s.generator_updates);
  w.u64(s.inference_updates);
  w.u64(s.epoch_generator_updates);
  w.u64(s.epoch_inference_updates);
  w.u8(s.aggressive);
  w.f64(s.best_val_loss);
  w.u64(s.stale_epochs);
  w.u64(s.decay_count);
  w.f64s(s.mi_history);
  w.f64(s.kl_weight);
  w.f64(s.enc_lr);
  w.f64(s.dec_lr);
  w.u8(s.finished);
}

inline TrainState read_state(Reader& r) {
  TrainState s;
  s.epoch = r.u64();
  s.cursor = r.u64();
  s.order.resize(r.u64());
  for (auto& batch : s.order) {
    batch.resize(r.u64());
    for (auto& i : batch) i = r.u64();
  }
  s.generator_updates = r.u64();
  s.inference_updates = r.u64();
  s.epoch_generator_updates = r.u64();
  s.epoch_inference_updates = r.u64();
  s.aggressive = r.u8() != 0;
  s.best_val_loss = r.f64();
  s.stale_epochs = r.u64();
  s.decay_count = r.u64();
  s.mi_history = r.f64s();
  s.kl_weight = r.f64();
  s.enc_lr = r.f64();
  s.dec_lr = r.f64();
  s.finished = r.u8() != 0;
  return s;
}

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ck) {
  detail::Writer w;
  w.raw(kCheckpointMagic, sizeof kCheckpointMagic);
  w.u32(kEndianMarker);
  w.u32(ck.version);
  w.u64(ck.config_digest);
  w.str(ck.config_text);
  w.u64(ck.params.size());
  for (const auto& p : ck.params) {
    w.str(p.name);
    w.u8(p.role == ParamRole::Inference ? 1 : 0);
    w.u64(p.shape.size());
    for (std::size_t e : p.shape) w.u64(e);
    w.f64s(p.values);
  }
  w.u8(ck.optimizer == OptimizerKind::Adam ? 1 : 0);
  detail::write_optimizer(w, ck.encoder_optimizer);
  detail::write_optimizer(w, ck.decoder_optimizer);
  w.str(ck.shuffle_stream);
  w.str(ck.dropout_stream);
  w.str(ck.reparam_stream);
  detail::write_state(w, ck.state);
  w.u64(ck.history.size());
  for (const auto& m : ck.history) {
    w.u64(m.epoch);
    w.f64(m.neg_elbo);
    w.f64(m.kl);
    w.f64(m.iw_nll);
    w.f64(m.mi);
    w.u64(m.au);
    w.f64(m.lr);
    w.f64(m.kl_weight);
    w.u8(m.aggressive);
  }
  return w.bytes();
}

inline Checkpoint decode_checkpoint(std::string bytes, const std::string& origin = "<checkpoint>") {
  if (bytes.size() < sizeof kCheckpointMagic + 8 || std::memcmp(bytes.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0)
    throw ParseError(origin + ": not a checkpoint (bad magic)");
  detail::Reader r(bytes.substr(sizeof kCheckpointMagic), origin);
  const std::uint32_t marker = r.u32();
  if (marker != kEndianMarker)
    throw MigrationError(origin + ": checkpoint written with the opposite byte order; no conversion available");
  Checkpoint ck;
  ck.version = r.u32();
  if (ck.version != kCheckpointVersion)
    throw MigrationError(origin + ": checkpoint format version " + std::to_string(ck.version) +
                         ", this build reads version " + std::to_string(kCheckpointVersion) +
                         "; no migration path exists");
  ck.config_digest = r.u64();
  ck.config_text = r.str();
  const std::uint64_t n = r.u64();
  for (std::uint64_t i = 0; i < n; ++i) {
    SavedParam p;
    p.name = r.str();
    p.role = r.u8() ? ParamRole::Inference : ParamRole::Generator;
    p.shape.resize(r.u64());
    for (auto& e : p.shape) e = r.u64();
    p.values = r.f64s();
    if (numel(p.shape) != p.values.size()) throw ParseError(origin + ": parameter " + p.name + " size mismatch");
    ck.params.push_back(std::move(p));
  }
  ck.optimizer = r.u8() ? OptimizerKind::Adam : OptimizerKind::Sgd;
  ck.encoder_optimizer = detail::read_optimizer(r);
  ck.decoder_optimizer = detail::read_optimizer(r);
  ck.shuffle_stream = r.str();
  ck.dropout_stream = r.str();
  ck.reparam_stream = r.str();
  ck.state = detail::read_state(r);
  const std::uint64_t h = r.u64();
  for (std::uint64_t i = 0; i < h; ++i) {
    MetricsRecord m;
    m.epoch = r.u64();
    m.neg_elbo = r.f64();
    m.kl = r.f64();
    m.iw_nll = r.f64();
    m.mi = r.f64();
    m.au = r.u64();
    m.lr = r.f64();
    m.kl_weight = r.f64();
    m.aggressive = r.u8() != 0;
    ck.history.push_back(m);
  }
  r.expect_end();
  return ck;
}

// Written to a temporary sibling and renamed, so a crash never leaves a torn file.
inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    auto out = open_for_write(tmp);
    const std::string bytes = encode_checkpoint(ck);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(std::move(bytes), path.string());
}

}  // namespace lagvae
