#include "revtrain/snr.hpp"

#include <cmath>
#include <algorithm>
#include <limits>
#include <map>
#include <memory>
#include <sstream>

#include "revtrain/errors.hpp"
#include "revtrain/layers.hpp"
#include "revtrain/model.hpp"
#include "revtrain/ops.hpp"
#include "revtrain/rng.hpp"

namespace revtrain {

double alpha_bn_toy(double rho) {
  if (!(rho > 0.0)) throw DomainError("alpha_bn_toy: rho must be > 0, got " + std::to_string(rho));
  return 4.0 / ((1.0 + 1.0 / (rho * rho)) * (1.0 + rho * rho));
}

BnConfig random_bn_config(std::uint64_t seed, std::int64_t channels) {
  if (channels < 1) throw DomainError("random_bn_config: channels must be >= 1");
  Pcg32 rng(seed, 0);
  BnConfig cfg;
  for (std::int64_t i = 0; i < channels; ++i) {
    cfg.gamma.push_back(0.2 + 1.8 * rng.uniform());
    cfg.beta.push_back(-1.0 + 2.0 * rng.uniform());
    cfg.mean.push_back(-1.0 + 2.0 * rng.uniform());
    cfg.var.push_back(0.25 + 3.75 * rng.uniform());
  }
  cfg.eps = 1e-5;
  return cfg;
}

double alpha_bn_general(const BnConfig& cfg) {
  const std::size_t c = cfg.gamma.size();
  if (c == 0) throw DomainError("alpha_bn_general: no channels");
  if (cfg.beta.size() != c || cfg.mean.size() != c || cfg.var.size() != c) {
    throw DomainError("alpha_bn_general: gamma, beta, mean and var must have the same length");
  }
  double signal_in = 0.0;
  double signal_out = 0.0;
  double amplification = 0.0;
  for (std::size_t i = 0; i < c; ++i) {
    if (cfg.gamma[i] == 0.0) throw DomainError("alpha_bn_general: gamma[" + std::to_string(i) + "] is 0");
    if (cfg.var[i] < 0.0) throw DomainError("alpha_bn_general: negative variance");
    signal_in += cfg.mean[i] * cfg.mean[i] + cfg.var[i];
    signal_out += cfg.gamma[i] * cfg.gamma[i] + cfg.beta[i] * cfg.beta[i];
    const double a = (std::sqrt(cfg.var[i]) + cfg.eps) / cfg.gamma[i];
    amplification += a * a;
  }
  return signal_in / signal_out * (static_cast<double>(c) / amplification);
}

double alpha_lrelu(double n) {
  if (!(n >= 1.0)) throw DomainError("alpha_lrelu: n must be >= 1, got " + std::to_string(n));
  return 4.0 / ((1.0 + 1.0 / (n * n)) * (1.0 + n * n));
}

InputDist InputDist::standard(std::int64_t c, std::int64_t h, std::int64_t w) {
  return InputDist{std::vector<double>(c, 0.0), std::vector<double>(c, 1.0), h, w};
}

namespace {

TensorD sample(const InputDist& d, std::int64_t n, Pcg32& rng) {
  TensorD x(Shape{n, d.channels(), d.h, d.w});
  for (std::int64_t b = 0; b < n; ++b) {
    for (std::int64_t c = 0; c < d.channels(); ++c) {
      const double sd = std::sqrt(d.var[c]);
      double* p = x.view().plane(b, c);
      for (std::int64_t i = 0; i < d.h * d.w; ++i) p[i] = d.mean[c] + sd * rng.normal();
    }
  }
  return x;
}

}  // namespace

InvertibleProbe identity_probe() {
  return InvertibleProbe{"identity", [](TensorD&) {}, [](TensorD&) {}, 1.0};
}

InvertibleProbe bn_probe(const BnConfig& cfg) {
  const auto c = static_cast<std::int64_t>(cfg.gamma.size());
  typename InvBatchNorm<double>::Options o;
  o.eps = cfg.eps;
  o.eps_i = 1e-12;
  auto bn = std::make_shared<InvBatchNorm<double>>(c, o);
  TensorD mean(Shape{1, c, 1, 1});
  TensorD var(Shape{1, c, 1, 1});
  for (std::int64_t i = 0; i < c; ++i) {
    if (!(cfg.gamma[i] > o.eps_i)) throw DomainError("bn probe: gamma must be > 0");
    bn->gamma().value.data()[i] = cfg.gamma[i] - o.eps_i;
    bn->beta().value.data()[i] = cfg.beta[i];
    mean.data()[i] = cfg.mean[i];
    var.data()[i] = cfg.var[i];
  }
  bn->set_cached_stats(std::move(mean), std::move(var));
  return InvertibleProbe{"bn", [bn](TensorD& x) { bn->forward_(x, Phase::replay); },
                         [bn](TensorD& y) { bn->inverse_(y); }, alpha_bn_general(cfg)};
}

InvertibleProbe lrelu_probe(double n) {
  if (n == 1.0) {
    InvertibleProbe p = identity_probe();
    p.name = "lrelu";
    return p;
  }
  auto l = std::make_shared<InvLeakyReLU<double>>(n);
  return InvertibleProbe{"lrelu", [l](TensorD& x) { l->forward_(x); }, [l](TensorD& y) { l->inverse_(y); },
                         alpha_lrelu(n)};
}

InvertibleProbe coupling_probe(std::int64_t channels, std::int64_t k, std::uint64_t seed) {
  Pcg32 rng(seed, 1);
  auto l = std::make_shared<InvConv<double>>(channels, k, rng);
  return InvertibleProbe{"invconv", [l](TensorD& x) { l->forward_(x); }, [l](TensorD& y) { l->inverse_(y); },
                         std::numeric_limits<double>::quiet_NaN()};
}

InvertibleProbe reversible_block_probe(std::int64_t channels, std::uint64_t seed, const InputDist& dist) {
  std::ostringstream text;
  text << "[model]\ninput_channels = " << channels << "\nheight = " << dist.h << "\nwidth = " << dist.w
       << "\n[block]\nkind = reversible\nmodule = conv:3, bn, lrelu\n[layer]\nkind = head\n";
  auto model = std::make_shared<SequentialModel<double>>(parse_arch(text.str(), "block probe"), seed);
  auto& block = std::get<Block<double>>(model->segments().at(0));
  Pcg32 rng(seed, 7);
  TensorD warm = sample(dist, 16, rng);
  block_forward_(block, warm, Phase::train);
  return InvertibleProbe{"reversible_block",
                         [model, &block](TensorD& x) { block_forward_(block, x, Phase::replay); },
                         [model, &block](TensorD& y) { block_inverse_(block, y); },
                         std::numeric_limits<double>::quiet_NaN()};
}

AlphaEstimate measure_alpha(const InvertibleProbe& probe, const InputDist& dist, double noise_std,
                            std::int64_t n_samples, std::uint64_t seed, int batches) {
  if (!(noise_std > 0.0)) throw DomainError("measure_alpha: noise_std must be > 0");
  if (batches < 2 || n_samples < batches) throw DomainError("measure_alpha: need at least 2 samples per batch");
  Pcg32 rng(seed, 3);
  const std::int64_t per = n_samples / batches;
  std::vector<double> alphas;
  for (int b = 0; b < batches; ++b) {
    const TensorD x = sample(dist, per, rng);
    TensorD y = x;
    probe.forward(y);
    const double yy = sum_sq_norm(y);
    if (yy == 0.0) throw MeasurementError("measure_alpha: layer output is all zero");
    double ee = 0.0;
    for (double& v : y.values()) {
      const double e = noise_std * rng.normal();
      v += e;
      ee += e * e;
    }
    probe.inverse(y);
    const double err = sum_sq_diff(y, x);
    if (err == 0.0) throw MeasurementError("measure_alpha: reconstruction error is exactly zero");
    alphas.push_back(sum_sq_norm(x) / err * (ee / yy));
  }
  double mean = 0.0;
  for (double a : alphas) mean += a;
  mean /= static_cast<double>(alphas.size());
  double var = 0.0;
  for (double a : alphas) var += (a - mean) * (a - mean);
  var /= static_cast<double>(alphas.size() - 1);

  AlphaEstimate out;
  out.config = probe.name;
  out.noise_std = noise_std;
  out.theoretical = probe.theoretical;
  out.empirical = mean;
  out.stderr_ = std::sqrt(var / static_cast<double>(alphas.size()));
  out.n_samples = per * batches;
  return out;
}

double reconstruction_snr(const InvertibleProbe& probe, const InputDist& dist, std::int64_t n_samples,
                          std::uint64_t seed) {
  Pcg32 rng(seed, 3);
  const TensorD x = sample(dist, n_samples, rng);
  TensorD y = x;
  probe.forward(y);
  probe.inverse(y);
  return snr(y, x);
}

// ---- depth sweep -----------------------------------------------------------------

const char* family_name(SnrFamily f) { return f == SnrFamily::layer_wise ? "layer_wise" : "hybrid"; }

SnrFamily parse_family(const std::string& s) {
  if (s == "layer_wise" || s == "layerwise") return SnrFamily::layer_wise;
  if (s == "hybrid") return SnrFamily::hybrid;
  throw ConfigError("unknown SNR family '" + s + "' (expected layer_wise or hybrid)");
}

namespace {

std::string family_spec(SnrFamily family, int depth, double n, std::int64_t channels, std::int64_t extent) {
  std::ostringstream t;
  t << "[model]\ninput_channels = " << channels << "\nheight = " << extent << "\nwidth = " << extent
    << "\nnum_classes = 10\n";
  for (int d = 0; d < depth; ++d) {
    if (family == SnrFamily::layer_wise) {
      t << "[layer]\nkind = invconv\n[layer]\nkind = bn\n[layer]\nkind = lrelu\nn = " << n << "\n";
    } else {
      t << "[block]\nkind = reversible\nmodule = invconv:3, bn, lrelu:" << n << "\n";
    }
  }
  t << "[layer]\nkind = head\n";
  return t.str();
}

}  // namespace

std::vector<DepthSweepRow> snr_depth_sweep(SnrFamily family, const std::vector<int>& depths,
                                           const std::vector<double>& n_values, std::uint64_t seed,
                                           std::int64_t channels, std::int64_t extent, std::int64_t batch) {
  const BackpropMode mode = family == SnrFamily::layer_wise ? BackpropMode::layer_wise : BackpropMode::hybrid;
  std::vector<DepthSweepRow> rows;
  for (const int depth : depths) {
    if (depth < 1) throw ConfigError("snr sweep: depth must be >= 1");
    for (const double n : n_values) {
      const ArchSpec spec = parse_arch(family_spec(family, depth, n, channels, extent), "snr sweep");
      const SnrTrace trace = snr_profile(spec, mode, seed, batch);
      DepthSweepRow row{family, depth, n, std::numeric_limits<double>::quiet_NaN()};
      for (const auto& e : trace.entries) {
        if (e.name == "s0") row.lowest_snr = e.snr;
      }
      rows.push_back(row);
    }
  }
  return rows;
}

SnrTrace snr_profile(const ArchSpec& spec, BackpropMode mode, std::uint64_t seed, std::int64_t batch) {
  ArchSpec s = spec;
  check_mode(s, mode);
  SequentialModel<float> model(s, seed);
  const Tensor x = gaussian<float>(checked_shape(batch, s.input_channels, s.height, s.width), 0.0, 1.0, seed + 1);
  SavedState<float> saved;
  Tensor logits = model_forward(model, x, mode, saved, true);
  std::vector<int> labels;
  for (std::int64_t i = 0; i < batch; ++i) labels.push_back(static_cast<int>(i % s.num_classes));
  Tensor g;
  softmax_cross_entropy<float>(logits, labels, &g);
  return model_backward(model, saved, g, mode);
}

std::string trace_csv(const SnrTrace& trace) {
  std::ostringstream out;
  out.precision(8);
  out << "name,segment,module,layer,depth,block_input,snr,snr_db\n";
  for (const auto& e : trace.entries)
    out << e.name << ',' << e.segment << ',' << e.module << ',' << e.layer << ',' << e.depth << ','
        << (e.block_input ? 1 : 0) << ',' << e.snr << ',' << to_db(e.snr) << '\n';
  return out.str();
}

std::vector<BlockSnr> block_snr_summary(const SnrTrace& trace) {
  std::map<int, BlockSnr> rows;
  std::map<int, bool> has_input;
  std::map<int, bool> has_inner;
  for (const auto& e : trace.entries) {
    BlockSnr& r = rows[e.segment];
    r.segment = e.segment;
    if (e.block_input) {
      r.input_snr = e.snr;
      has_input[e.segment] = true;
    } else if (e.module == 'F' || e.module == 'G') {
      r.inner_min = has_inner[e.segment] ? std::min(r.inner_min, e.snr) : e.snr;
      has_inner[e.segment] = true;
    }
  }
  std::vector<BlockSnr> out;
  for (const auto& [seg, r] : rows)
    if (has_input[seg] && has_inner[seg]) out.push_back(r);
  return out;
}

LineFit fit_line(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw DomainError("fit_line: need at least two points");
  const auto n = static_cast<double>(x.size());
  double mx = 0.0;
  double my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0;
  double sxy = 0.0;
  double syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0) throw DomainError("fit_line: x values are all equal");
  LineFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  f.r2 = syy == 0.0 ? 1.0 : (sxy * sxy) / (sxx * syy);
  return f;
}

double to_db(double ratio) { return 10.0 * std::log10(ratio); }

std::string alpha_csv(const std::string& x_name, const std::vector<double>& xs,
                      const std::vector<AlphaEstimate>& rows) {
  if (xs.size() != rows.size()) throw DomainError("alpha_csv: size mismatch");
  std::ostringstream out;
  out.precision(8);
  out << x_name << ",theoretical_alpha,empirical_alpha,stderr\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out << xs[i] << ',' << rows[i].theoretical << ',' << rows[i].empirical << ',' << rows[i].stderr_ << '\n';
  }
  return out.str();
}

std::string sweep_csv(const std::vector<DepthSweepRow>& rows) {
  std::ostringstream out;
  out.precision(8);
  out << "family,depth,n,snr,snr_db\n";
  for (const auto& r : rows) {
    out << family_name(r.family) << ',' << r.depth << ',' << r.n << ',' << r.lowest_snr << ','
        << to_db(r.lowest_snr) << '\n';
  }
  return out.str();
}

}  // namespace revtrain
