#pragma once

// Evaluation metrics and the posterior-mean-space diagnostic.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "lagvae/data.hpp"
#include "lagvae/errors.hpp"
#include "lagvae/random.hpp"
#include "lagvae/vae.hpp"

namespace lagvae {

// log Σ exp(v), stabilised by the maximum.
inline double log_sum_exp(std::span<const double> v) {
  if (v.empty()) return -std::numeric_limits<double>::infinity();
  const double peak = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(peak)) return peak;
  double acc = 0.0;
  for (double x : v) acc += std::exp(x - peak);
  return peak + std::log(acc);
}

// log((1/n) Σ exp(v)). The mean is formed before the log so identical inputs
// return that value exactly.
inline double log_mean_exp(std::span<const double> v) {
  if (v.empty()) return -std::numeric_limits<double>::infinity();
  const double peak = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(peak)) return peak;
  double acc = 0.0;
  for (double x : v) acc += std::exp(x - peak);
  return peak + std::log(acc / static_cast<double>(v.size()));
}

// Posterior parameters of every sequence, encoded in batches without dropout.
inline std::vector<GaussianParams> encode_all(const VaeModel& model, std::span<const Sequence> sequences,
                                              std::size_t batch_size = 256) {
  NoGradScope no_grad;
  std::vector<GaussianParams> out;
  out.reserve(sequences.size());
  for (const auto& group : batch_indices(sequences.size(), batch_size, nullptr)) {
    const Posterior q = encode(model, make_batch(sequences, group));
    for (std::size_t b = 0; b < group.size(); ++b) out.push_back(q.row(b));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Importance-weighted NLL

// -log (1/K) Σ_k p(x|z_k) p(z_k) / q(z_k|x), z_k ~ q(z|x).
inline double iw_nll(const VaeModel& model, const Sequence& x, std::size_t samples, RandomStream& stream) {
  if (samples == 0) throw ConfigError("iw_nll: need at least one sample");
  const GaussianParams q = encode(model, x);
  const std::size_t D = q.dim();
  std::vector<double> z(samples * D), eps(D);
  std::vector<double> log_w(samples);
  for (std::size_t k = 0; k < samples; ++k) {
    for (double& e : eps) e = stream.normal();
    const auto zk = reparam_sample(q, eps);
    std::copy(zk.begin(), zk.end(), z.begin() + static_cast<std::ptrdiff_t>(k * D));
  }
  const std::vector<double> log_px_z = decode_logprob_many(model, x, z);
  for (std::size_t k = 0; k < samples; ++k) {
    const std::span<const double> zk(z.data() + k * D, D);
    log_w[k] = log_px_z[k] + log_standard_normal(zk) - log_normal_diag(zk, q.mean, q.logvar);
  }
  return -log_mean_exp(log_w);
}

inline double iw_nll(const VaeModel& model, const Sequence& x, std::size_t samples, std::uint64_t seed) {
  RandomStream stream(seed);
  return iw_nll(model, x, samples, stream);
}

// ---------------------------------------------------------------------------
// Mutual information

struct MutualInfo {
  double mi = 0.0;             // I_q estimate
  double mean_kl = 0.0;        // mean over x of KL(q(z|x) || p(z)), closed form
  double aggregated_kl = 0.0;  // KL(q(z) || p(z)) estimate; mean_kl = mi + aggregated_kl
};

// I_q = E_x KL(q(z|x)||p) - KL(q(z)||p). Samples (x, z ~ q(z|x)) ancestrally and
// evaluates log q(z) as a log-mean over every posterior in the split. The
// aggregated term is estimated as mean_kl + E[log q(z) - log q(z|x)], so the
// decomposition holds exactly on the same samples.
inline MutualInfo mutual_info(std::span<const GaussianParams> posteriors, std::size_t z_per_x, RandomStream& stream) {
  if (posteriors.empty()) throw InputError("mutual_info: empty split");
  if (z_per_x == 0) throw ConfigError("mutual_info: need at least one z per x");
  const std::size_t N = posteriors.size(), D = posteriors.front().dim();
  MutualInfo out;
  for (const auto& q : posteriors) out.mean_kl += kl_to_prior(q);
  out.mean_kl /= static_cast<double>(N);

  std::vector<double> eps(D), log_components(N);
  double gap = 0.0;  // Σ log q(z|x) - log q(z)
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t s = 0; s < z_per_x; ++s) {
      for (double& e : eps) e = stream.normal();
      const auto z = reparam_sample(posteriors[i], eps);
      for (std::size_t j = 0; j < N; ++j)
        log_components[j] = log_normal_diag(z, posteriors[j].mean, posteriors[j].logvar);
      gap += log_components[i] - log_mean_exp(log_components);
    }
  }
  out.mi = gap / static_cast<double>(N * z_per_x);
  out.aggregated_kl = out.mean_kl - out.mi;
  return out;
}

inline MutualInfo mutual_info(const VaeModel& model, std::span<const Sequence> split, std::size_t z_per_x,
                              RandomStream& stream) {
  const auto posteriors = encode_all(model, split);
  return mutual_info(posteriors, z_per_x, stream);
}

// ---------------------------------------------------------------------------
// Active units

struct ActiveUnits {
  std::size_t count = 0;
  std::vector<double> activity;  // A_z per dimension: variance over x of the posterior mean
};

inline ActiveUnits active_units(std::span<const GaussianParams> posteriors, double threshold = 0.01) {
  if (posteriors.size() < 2) throw InputError("active_units: need at least two examples");
  const std::size_t N = posteriors.size(), D = posteriors.front().dim();
  ActiveUnits out;
  out.activity.assign(D, 0.0);
  for (std::size_t d = 0; d < D; ++d) {
    double m = 0.0;
    for (const auto& q : posteriors) m += q.mean[d];
    m /= static_cast<double>(N);
    double var = 0.0;
    for (const auto& q : posteriors) var += (q.mean[d] - m) * (q.mean[d] - m);
    out.activity[d] = var / static_cast<double>(N);
    if (out.activity[d] > threshold) ++out.count;
  }
  return out;
}

inline ActiveUnits active_units(const VaeModel& model, std::span<const Sequence> split, double threshold = 0.01) {
  const auto posteriors = encode_all(model, split);
  return active_units(posteriors, threshold);
}

// ---------------------------------------------------------------------------
// Model posterior mean on a grid

// Midpoint partition of [low, high] with ceil((high - low) / stride) cells.
struct RiemannGrid {
  double low = -20.0;
  double high = 20.0;
  double stride = 0.01;
  std::vector<double> abscissae;

  static RiemannGrid make(double low = -20.0, double high = 20.0, double stride = 0.01) {
    if (!(low < high)) throw ConfigError("RiemannGrid: low must be below high");
    if (!(stride > 0.0)) throw ConfigError("RiemannGrid: stride must be positive");
    RiemannGrid grid{low, high, stride, {}};
    const auto count = static_cast<std::size_t>(std::ceil((high - low) / stride - 1e-9));
    grid.abscissae.resize(count);
    for (std::size_t i = 0; i < count; ++i) grid.abscissae[i] = low + (static_cast<double>(i) + 0.5) * stride;
    return grid;
  }
};

// Normalized posterior over the grid from log p(z) + log p(x|z).
struct GridPosterior {
  std::vector<double> weights;  // sum to one
  double log_evidence = 0.0;    // log ∫ p(x|z) p(z) dz
  double mean = 0.0;
};

// `log_likelihood` maps the grid abscissae to log p(x|z_i). The two outermost
// cells holding more than `coverage_tolerance` of the mass is a coverage failure.
template <class LogLikelihood>
GridPosterior grid_posterior(LogLikelihood&& log_likelihood, const RiemannGrid& grid,
                             double coverage_tolerance = 1e-3) {
  const std::vector<double> ll = log_likelihood(std::span<const double>(grid.abscissae));
  if (ll.size() != grid.abscissae.size()) throw DimensionError("grid_posterior: likelihood size mismatch");
  std::vector<double> lp(ll.size());
  for (std::size_t i = 0; i < lp.size(); ++i) {
    const double z = grid.abscissae[i];
    lp[i] = -0.5 * (z * z + kLog2Pi) + ll[i];
  }
  const double lse = log_sum_exp(lp);
  if (!std::isfinite(lse)) throw DomainError("grid_posterior: non-finite log evidence");
  GridPosterior post;
  post.weights.resize(lp.size());
  for (std::size_t i = 0; i < lp.size(); ++i) {
    post.weights[i] = std::exp(lp[i] - lse);
    post.mean += grid.abscissae[i] * post.weights[i];
  }
  post.log_evidence = lse + std::log(grid.stride);
  const double edge = post.weights.front() + post.weights.back();
  if (edge > coverage_tolerance)
    throw DomainError("grid_posterior: " + std::to_string(edge) + " of the posterior mass sits on the boundary of [" +
                      std::to_string(grid.low) + ", " + std::to_string(grid.high) + "]; widen the grid");
  return post;
}

inline double model_posterior_mean(const VaeModel& model, const Sequence& x, const RiemannGrid& grid) {
  if (model.latent_dim() != 1)
    throw CapabilityError("model_posterior_mean: defined only for a scalar latent, model has " +
                          std::to_string(model.latent_dim()) + " dimensions");
  return grid_posterior([&](std::span<const double> z) { return decode_logprob_many(model, x, z); }, grid).mean;
}

struct PosteriorMeanPoint {
  std::size_t example_id = 0;
  double mu_model = 0.0;      // mean of p(z|x), from the grid
  double mu_inference = 0.0;  // mean of q(z|x)
};

// One point per example for the first `count` examples of the split.
inline std::vector<PosteriorMeanPoint> mean_space_snapshot(const VaeModel& model, std::span<const Sequence> split,
                                                           std::size_t count, const RiemannGrid& grid) {
  if (model.latent_dim() != 1)
    throw CapabilityError("mean_space_snapshot: posterior mean space needs a scalar latent");
  const std::size_t n = std::min(count, split.size());
  const auto posteriors = encode_all(model, split.first(n));
  std::vector<PosteriorMeanPoint> points(n);
  for (std::size_t i = 0; i < n; ++i) {
    points[i].example_id = i;
    points[i].mu_inference = posteriors[i].mean[0];
    try {
      points[i].mu_model = model_posterior_mean(model, split[i], grid);
    } catch (const DomainError& e) {
      throw DomainError("example " + std::to_string(i) + ": " + e.what());
    }
  }
  return points;
}

// ---------------------------------------------------------------------------
// Split-level evaluation

struct MetricsRecord {
  std::size_t epoch = 0;
  double neg_elbo = 0.0;
  double kl = 0.0;
  double iw_nll = std::numeric_limits<double>::quiet_NaN();
  double mi = 0.0;
  std::size_t au = 0;
  double lr = 0.0;
  double kl_weight = 1.0;
  bool aggressive = false;
};

struct EvalOptions {
  std::size_t iw_samples = 500;  // 0 skips the IW estimate
  std::size_t mi_z_per_x = 1;
  double au_threshold = 0.01;
  std::size_t batch_size = 256;
  std::size_t max_examples = 0;  // 0 uses the whole split
};

struct EvalReport {
  double neg_elbo = 0.0;
  double reconstruction = 0.0;
  double kl = 0.0;
  double iw_nll = std::numeric_limits<double>::quiet_NaN();
  MutualInfo mi;
  ActiveUnits au;
  std::size_t examples = 0;
};

// Dropout off; every draw comes from `stream`.
inline EvalReport evaluate(const VaeModel& model, std::span<const Sequence> split, const EvalOptions& opt,
                           RandomStream& stream) {
  if (split.empty()) throw InputError("evaluate: empty split");
  if (opt.max_examples) split = split.first(std::min(opt.max_examples, split.size()));
  NoGradScope no_grad;
  EvalReport report;
  report.examples = split.size();
  const double n = static_cast<double>(split.size());
  std::vector<GaussianParams> posteriors;
  posteriors.reserve(split.size());
  for (const auto& group : batch_indices(split.size(), opt.batch_size, nullptr)) {
    const Batch batch = make_batch(split, group);
    const ElboTerms terms = elbo_terms(model, batch, 1.0, stream);
    for (std::size_t b = 0; b < group.size(); ++b) {
      report.reconstruction += terms.reconstruction[b] / n;
      report.kl += terms.kl[b] / n;
      posteriors.push_back(terms.q.row(b));
    }
  }
  report.neg_elbo = report.kl - report.reconstruction;
  report.mi = mutual_info(posteriors, opt.mi_z_per_x, stream);
  report.au = split.size() >= 2 ? active_units(posteriors, opt.au_threshold) : ActiveUnits{0, {}};
  if (opt.iw_samples > 0) {
    double total = 0.0;
    for (const auto& x : split) total += iw_nll(model, x, opt.iw_samples, stream);
    report.iw_nll = total / n;
  }
  return report;
}

// ---------------------------------------------------------------------------
// Reports

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline constexpr const char* kMetricsHeader = "epoch,neg_elbo,kl,iw_nll,mi,au,lr,kl_weight,aggressive";
inline constexpr const char* kSnapshotHeader = "example_id,mu_model,mu_inference";

inline std::ofstream open_for_write(const std::filesystem::path& path) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  if (ec) throw IoError("cannot create " + path.parent_path().string() + ": " + ec.message());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  return out;
}

inline void write_metrics_csv(std::span<const MetricsRecord> history, const std::filesystem::path& path) {
  auto out = open_for_write(path);
  out << kMetricsHeader << '\n';
  for (const auto& r : history)
    out << r.epoch << ',' << format_double(r.neg_elbo) << ',' << format_double(r.kl) << ','
        << format_double(r.iw_nll) << ',' << format_double(r.mi) << ',' << r.au << ',' << format_double(r.lr) << ','
        << format_double(r.kl_weight) << ',' << (r.aggressive ? 1 : 0) << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

namespace detail {
inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) fields.push_back(field);
  return fields;
}

inline std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path, const char* header) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != header)
    throw ParseError(path.string() + ":1: expected header '" + header + "'");
  std::vector<std::vector<std::string>> rows;
  std::size_t line_no = 1;
  const std::size_t width = split_csv_line(header).size();
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto fields = split_csv_line(line);
    if (fields.size() != width)
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": expected " + std::to_string(width) +
                       " fields");
    rows.push_back(std::move(fields));
  }
  return rows;
}

inline double parse_double(const std::string& s) {
  if (s == "nan" || s == "-nan") return std::numeric_limits<double>::quiet_NaN();
  std::size_t used = 0;
  const double v = std::stod(s, &used);
  if (used != s.size()) throw ParseError("bad number '" + s + "'");
  return v;
}
}  // namespace detail

inline std::vector<MetricsRecord> read_metrics_csv(const std::filesystem::path& path) {
  std::vector<MetricsRecord> out;
  for (const auto& f : detail::read_csv(path, kMetricsHeader)) {
    MetricsRecord r;
    r.epoch = std::stoul(f[0]);
    r.neg_elbo = detail::parse_double(f[1]);
    r.kl = detail::parse_double(f[2]);
    r.iw_nll = detail::parse_double(f[3]);
    r.mi = detail::parse_double(f[4]);
    r.au = std::stoul(f[5]);
    r.lr = detail::parse_double(f[6]);
    r.kl_weight = detail::parse_double(f[7]);
    r.aggressive = f[8] == "1";
    out.push_back(r);
  }
  return out;
}

inline void write_snapshot_csv(std::span<const PosteriorMeanPoint> points, const std::filesystem::path& path) {
  auto out = open_for_write(path);
  out << kSnapshotHeader << '\n';
  for (const auto& p : points)
    out << p.example_id << ',' << format_double(p.mu_model) << ',' << format_double(p.mu_inference) << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

inline std::vector<PosteriorMeanPoint> read_snapshot_csv(const std::filesystem::path& path) {
  std::vector<PosteriorMeanPoint> out;
  for (const auto& f : detail::read_csv(path, kSnapshotHeader))
    out.push_back({std::stoul(f[0]), detail::parse_double(f[1]), detail::parse_double(f[2])});
  return out;
}

struct ScatterPoint {
  double x = 0.0;
  double y = 0.0;
};

struct ScatterStyle {
  std::string title;
  std::string x_label;
  std::string y_label;
  bool diagonal = false;   // dashed y = x reference line
  bool symmetric = false;  // same range on both axes, centred on zero
};

// Minimal SVG scatter plot.
inline void write_scatter_svg(std::span<const ScatterPoint> points, const ScatterStyle& style,
                              const std::filesystem::path& path) {
  constexpr double W = 480, H = 480, M = 60;
  double x0 = -1, x1 = 1, y0 = -1, y1 = 1;
  if (!points.empty()) {
    x0 = y0 = std::numeric_limits<double>::infinity();
    x1 = y1 = -std::numeric_limits<double>::infinity();
    for (const auto& p : points) {
      x0 = std::min(x0, p.x), x1 = std::max(x1, p.x);
      y0 = std::min(y0, p.y), y1 = std::max(y1, p.y);
    }
  }
  if (style.symmetric) {
    const double r = std::max({std::abs(x0), std::abs(x1), std::abs(y0), std::abs(y1), 0.5}) * 1.1;
    x0 = y0 = -r;
    x1 = y1 = r;
  } else {
    const double px = std::max(0.05 * (x1 - x0), 1e-3), py = std::max(0.05 * (y1 - y0), 1e-3);
    x0 -= px, x1 += px, y0 -= py, y1 += py;
  }
  auto sx = [&](double x) { return M + (x - x0) / (x1 - x0) * (W - 2 * M); };
  auto sy = [&](double y) { return H - M - (y - y0) / (y1 - y0) * (H - 2 * M); };

  auto out = open_for_write(path);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
      << ' ' << H << "\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<rect x=\"" << M << "\" y=\"" << M << "\" width=\"" << W - 2 * M << "\" height=\"" << H - 2 * M
      << "\" fill=\"none\" stroke=\"black\"/>\n";
  if (x0 < 0 && x1 > 0)
    out << "<line x1=\"" << sx(0) << "\" y1=\"" << M << "\" x2=\"" << sx(0) << "\" y2=\"" << H - M
        << "\" stroke=\"#bbb\"/>\n";
  if (y0 < 0 && y1 > 0)
    out << "<line x1=\"" << M << "\" y1=\"" << sy(0) << "\" x2=\"" << W - M << "\" y2=\"" << sy(0)
        << "\" stroke=\"#bbb\"/>\n";
  if (style.diagonal) {
    const double lo = std::max(x0, y0), hi = std::min(x1, y1);
    if (lo < hi)
      out << "<line x1=\"" << sx(lo) << "\" y1=\"" << sy(lo) << "\" x2=\"" << sx(hi) << "\" y2=\"" << sy(hi)
          << "\" stroke=\"black\" stroke-dasharray=\"6,4\"/>\n";
  }
  for (const auto& p : points)
    out << "<circle cx=\"" << sx(p.x) << "\" cy=\"" << sy(p.y) << "\" r=\"2\" fill=\"#1f77b4\" fill-opacity=\"0.6\"/>\n";
  out << "<text x=\"" << W / 2 << "\" y=\"" << M / 2 << "\" text-anchor=\"middle\" font-size=\"14\">" << style.title
      << "</text>\n";
  out << "<text x=\"" << W / 2 << "\" y=\"" << H - M / 4 << "\" text-anchor=\"middle\" font-size=\"12\">"
      << style.x_label << "</text>\n";
  out << "<text x=\"" << M / 4 << "\" y=\"" << H / 2 << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 "
      << M / 4 << ' ' << H / 2 << ")\">" << style.y_label << "</text>\n";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3g", x0);
  out << "<text x=\"" << M << "\" y=\"" << H - M + 14 << "\" font-size=\"10\">" << buf << "</text>\n";
  std::snprintf(buf, sizeof buf, "%.3g", x1);
  out << "<text x=\"" << W - M << "\" y=\"" << H - M + 14 << "\" font-size=\"10\" text-anchor=\"end\">" << buf
      << "</text>\n";
  std::snprintf(buf, sizeof buf, "%.3g", y0);
  out << "<text x=\"" << M - 4 << "\" y=\"" << H - M << "\" font-size=\"10\" text-anchor=\"end\">" << buf << "</text>\n";
  std::snprintf(buf, sizeof buf, "%.3g", y1);
  out << "<text x=\"" << M - 4 << "\" y=\"" << M + 8 << "\" font-size=\"10\" text-anchor=\"end\">" << buf << "</text>\n";
  out << "</svg>\n";
  if (!out) throw IoError("write failed for " + path.string());
}

inline void write_snapshot_svg(std::span<const PosteriorMeanPoint> points, const std::string& title,
                               const std::filesystem::path& path) {
  std::vector<ScatterPoint> xy;
  xy.reserve(points.size());
  for (const auto& p : points) xy.push_back({p.mu_model, p.mu_inference});
  write_scatter_svg(xy, {title, "mean of p(z|x)", "mean of q(z|x)", true, true}, path);
}

// Metrics CSV, plus per-snapshot CSV and SVG files named snapshot_<label>.*.
inline void emit_reports(std::span<const MetricsRecord> history,
                         std::span<const std::pair<std::string, std::vector<PosteriorMeanPoint>>> snapshots,
                         const std::filesystem::path& out_dir) {
  write_metrics_csv(history, out_dir / "metrics.csv");
  for (const auto& [label, points] : snapshots) {
    write_snapshot_csv(points, out_dir / ("snapshot_" + label + ".csv"));
    write_snapshot_svg(points, label, out_dir / ("snapshot_" + label + ".svg"));
  }
}

}  // namespace lagvae
