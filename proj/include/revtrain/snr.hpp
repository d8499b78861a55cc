#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "revtrain/arch.hpp"
#include "revtrain/model.hpp"
#include "revtrain/tensor.hpp"

namespace revtrain {

// SNR reduction of a two-channel batch norm with gamma = [1, rho].
double alpha_bn_toy(double rho);

struct BnConfig {
  std::vector<double> gamma;
  std::vector<double> beta;
  std::vector<double> mean;  // input channel means
  std::vector<double> var;   // input channel variances
  double eps = 0.0;
};

// Random per-channel gamma in [0.2, 2], beta in [-1, 1], input mean in
// [-1, 1] and variance in [0.25, 4], eps 1e-5.
BnConfig random_bn_config(std::uint64_t seed, std::int64_t channels);

// General batch-norm SNR reduction. The noise term sums squared per-channel
// amplifications ((sqrt(var_i) + eps) / gamma_i)^2.
double alpha_bn_general(const BnConfig& cfg);

// SNR reduction of an invertible leaky ReLU with negative-side divisor n,
// small-noise regime.
double alpha_lrelu(double n);

// Independent Gaussian input per channel, laid out (n, c, h, w).
struct InputDist {
  std::vector<double> mean;
  std::vector<double> var;
  std::int64_t h = 1;
  std::int64_t w = 1;

  std::int64_t channels() const { return static_cast<std::int64_t>(mean.size()); }
  static InputDist standard(std::int64_t c, std::int64_t h = 1, std::int64_t w = 1);
};

// An invertible map run in double precision.
struct InvertibleProbe {
  std::string name;
  std::function<void(TensorD&)> forward;
  std::function<void(TensorD&)> inverse;
  double theoretical = 1.0;  // NaN when no closed form applies
};

InvertibleProbe identity_probe();
InvertibleProbe bn_probe(const BnConfig& cfg);
InvertibleProbe lrelu_probe(double n);
// Additive coupling conv (k x k) on `channels` channels, Kaiming init from `seed`.
InvertibleProbe coupling_probe(std::int64_t channels, std::int64_t k, std::uint64_t seed);
// Reversible block whose modules are conv-bn-lrelu, cached stats from one
// training forward on the probe input.
InvertibleProbe reversible_block_probe(std::int64_t channels, std::uint64_t seed, const InputDist& dist);

struct AlphaEstimate {
  std::string config;
  double noise_std = 0.0;
  double theoretical = 1.0;
  double empirical = 0.0;
  double stderr_ = 0.0;  // across batches
  std::int64_t n_samples = 0;
};

// y = f(x), y~ = y + N(0, noise_std), x~ = f^-1(y~);
// alpha = (|x|^2 / |x~ - x|^2) * (|e^y|^2 / |y|^2), with norms aggregated over
// each of `batches` equal batches and averaged across them.
AlphaEstimate measure_alpha(const InvertibleProbe& probe, const InputDist& dist, double noise_std,
                            std::int64_t n_samples, std::uint64_t seed, int batches = 20);

// |x|^2 / |f^-1(f(x)) - x|^2 with no injected noise (round-off only).
double reconstruction_snr(const InvertibleProbe& probe, const InputDist& dist, std::int64_t n_samples,
                          std::uint64_t seed);

enum class SnrFamily { layer_wise, hybrid };

const char* family_name(SnrFamily f);
SnrFamily parse_family(const std::string& s);

struct DepthSweepRow {
  SnrFamily family = SnrFamily::layer_wise;
  int depth = 0;
  double n = 0.0;
  double lowest_snr = 0.0;  // SNR of the reconstructed model input
};

// For each (depth, n): a float model of `depth` units (layer-wise: invconv,
// bn, lrelu:n; hybrid: one reversible block with that module), a traced
// backward on random input, and the SNR of the reconstructed first input.
std::vector<DepthSweepRow> snr_depth_sweep(SnrFamily family, const std::vector<int>& depths,
                                           const std::vector<double>& n_values, std::uint64_t seed,
                                           std::int64_t channels = 16, std::int64_t extent = 8,
                                           std::int64_t batch = 8);

// Traced backward of a float model built from `spec` on N(0, 1) input of the
// spec's extents, cross-entropy against labels i % classes.
SnrTrace snr_profile(const ArchSpec& spec, BackpropMode mode, std::uint64_t seed, std::int64_t batch = 8);
// CSV: name,segment,module,layer,depth,block_input,snr,snr_db
std::string trace_csv(const SnrTrace& trace);

struct BlockSnr {
  int segment = 0;
  double input_snr = 0.0;  // reconstructed block input
  double inner_min = 0.0;  // lowest SNR among layer inputs inside F and G
};
// One row per block that has both a block-input entry and inner entries.
std::vector<BlockSnr> block_snr_summary(const SnrTrace& trace);

struct LineFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
};
LineFit fit_line(const std::vector<double>& x, const std::vector<double>& y);

double to_db(double ratio);

// CSV: x,theoretical_alpha,empirical_alpha,stderr
std::string alpha_csv(const std::string& x_name, const std::vector<double>& xs,
                      const std::vector<AlphaEstimate>& rows);
// CSV: family,depth,n,snr,snr_db
std::string sweep_csv(const std::vector<DepthSweepRow>& rows);

}  // namespace revtrain
