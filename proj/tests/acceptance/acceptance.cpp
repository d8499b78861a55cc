// Acceptance suite: one PASS / FAIL / SKIP line per criterion.
// Usage: acceptance [criterion numbers...]   (default: all)

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>

#include "revtrain/allocator.hpp"
#include "revtrain/conv.hpp"
#include "revtrain/errors.hpp"
#include "revtrain/gradcheck.hpp"
#include "revtrain/memory.hpp"
#include "revtrain/ops.hpp"
#include "revtrain/snr.hpp"
#include "revtrain/train.hpp"

using namespace revtrain;

namespace {

enum class Verdict { pass, fail, skip };

struct Outcome {
  Verdict verdict = Verdict::fail;
  std::string detail;
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream o;
  o << std::setprecision(prec) << v;
  return o.str();
}

Outcome verdict(bool ok, const std::string& detail) { return {ok ? Verdict::pass : Verdict::fail, detail}; }

std::string zoo(const std::string& name) { return std::string(REVTRAIN_ZOO_DIR) + "/" + name + ".arch"; }

// Monte-Carlo alpha against theory at every point of a sweep.
Outcome alpha_sweep(const std::vector<double>& xs, const std::function<InvertibleProbe(double)>& make,
                    std::int64_t channels, const char* label) {
  double worst = 0.0;
  std::string at;
  for (double x : xs) {
    const AlphaEstimate a = measure_alpha(make(x), InputDist::standard(channels), 1e-5, 100000, 7);
    const double rel = std::abs(a.empirical / a.theoretical - 1.0);
    if (rel >= worst) {
      worst = rel;
      at = fmt(x);
    }
  }
  return verdict(worst <= 0.05, "worst relative error " + fmt(100 * worst, 3) + "% at " + label + "=" + at +
                                    " (limit 5%)");
}

Outcome criterion1() {
  return alpha_sweep(
      {1, 2, 5, 10, 100},
      [](double rho) { return bn_probe(BnConfig{{1.0, rho}, {0.0, 0.0}, {0.0, 0.0}, {1.0, 1.0}, 0.0}); }, 2, "rho");
}

Outcome criterion2() { return alpha_sweep({1.25, 2, 5, 10}, lrelu_probe, 4, "n"); }

Outcome criterion3() {
  double worst = 0.0;
  int failures = 0;
  for (int i = 0; i < 20; ++i) {
    const BnConfig cfg = random_bn_config(1000 + static_cast<std::uint64_t>(i), 16);
    const AlphaEstimate a =
        measure_alpha(bn_probe(cfg), InputDist{cfg.mean, cfg.var, 1, 1}, 1e-5, 100000, 100 + static_cast<std::uint64_t>(i));
    const double rel = std::abs(a.empirical / alpha_bn_general(cfg) - 1.0);
    worst = std::max(worst, rel);
    failures += rel > 0.10;
  }
  return verdict(failures == 0, std::to_string(20 - failures) + "/20 configurations within 10%, worst " +
                                    fmt(100 * worst, 3) + "%");
}

const char* kTwoBlockHybrid = R"(
[model]
height = 8
width = 8
num_classes = 4
[layer]
kind = conv
c_out = 8
[block]
kind = reversible
module = invconv:3, bn, lrelu
[layer]
kind = pool_c
[block]
kind = reversible
module = invconv:3, bn, lrelu
[layer]
kind = head
)";

Outcome criterion4() {
  const ArchSpec spec = parse_arch(kTwoBlockHybrid, "two-block hybrid");
  GradcheckOptions opt;
  opt.fd_coords = 8;
  const GradcheckReport rev = gradcheck<double>(spec, BackpropMode::block_reversible, opt);
  opt.fd_coords = 0;
  const GradcheckReport hyb = gradcheck<double>(spec, BackpropMode::hybrid, opt);
  const bool ok = rev.worst_vs_stored < 1e-8 && hyb.worst_vs_stored < 1e-6 && rev.worst_vs_numeric < 1e-5;
  return verdict(ok, "block vs stored " + fmt(rev.worst_vs_stored, 3) + " (<1e-8), hybrid vs stored " +
                         fmt(hyb.worst_vs_stored, 3) + " (<1e-6), stored vs finite differences " +
                         fmt(rev.worst_vs_numeric, 3) + " (<1e-5)");
}

}  // namespace

namespace {

// Stem conv to 16 channels, then `depth` invertible units (layer-wise) or
// `depth` reversible blocks whose module is one such unit (hybrid).
std::string family_train_spec(SnrFamily family, int depth, double n) {
  std::ostringstream t;
  t << "[model]\nname = " << family_name(family) << depth << "\n[layer]\nkind = conv\nc_out = 16\n";
  for (int d = 0; d < depth; ++d) {
    if (family == SnrFamily::layer_wise)
      t << "[layer]\nkind = invconv\n[layer]\nkind = bn\n[layer]\nkind = lrelu\nn = " << n << "\n";
    else
      t << "[block]\nkind = reversible\nmodule = invconv:3, bn, lrelu:" << n << "\n";
  }
  t << "[layer]\nkind = head\n";
  return t.str();
}

const DatasetSource& synthetic_source() {
  static const DatasetSource src = [] {
    DatasetSource s;
    s.train = synthetic_cifar(2000, 101);
    s.test = synthetic_cifar(1000, 202);
    s.norm = Normalization::of(s.train);
    return s;
  }();
  return src;
}

struct RunResult {
  double acc = 0.0;
  bool diverged = false;
  std::string note;
};

// One epoch on the 2000-record synthetic subset; a diverged run scores chance.
RunResult subset_run(const std::string& spec_text, BackpropMode mode) {
  TrainConfig cfg;
  cfg.spec = parse_arch(spec_text, "acceptance");
  cfg.has_spec = true;
  cfg.mode = mode;
  cfg.epochs = 1;
  cfg.batch_size = 32;
  cfg.lr_max = 0.05;
  cfg.seed = 3;
  cfg.timing = false;
  try {
    return {train_run(cfg, synthetic_source()).history.back().test_acc, false, ""};
  } catch (const DivergenceError& e) {
    return {100.0 / kCifarClasses, true, e.what()};
  }
}

std::string acc_str(const RunResult& r) { return fmt(r.acc, 4) + "%" + (r.diverged ? " (diverged)" : ""); }

Outcome criterion5() {
  std::vector<int> depths;
  for (int d = 2; d <= 16; d += 2) depths.push_back(d);
  const double n_sweep = 4.0;
  const auto rows = snr_depth_sweep(SnrFamily::layer_wise, depths, {n_sweep}, 5);
  std::vector<double> x;
  std::vector<double> y;
  bool finite = true;
  for (const auto& r : rows) {
    finite = finite && std::isfinite(r.lowest_snr) && r.lowest_snr > 0.0;
    x.push_back(r.depth);
    y.push_back(to_db(r.lowest_snr));
  }
  const LineFit fit = finite ? fit_line(x, y) : LineFit{};
  const bool linear = finite && fit.slope < 0.0 && fit.r2 > 0.9;

  const RunResult past_lw = subset_run(family_train_spec(SnrFamily::layer_wise, 8, 10.0), BackpropMode::layer_wise);
  const RunResult past_st = subset_run(family_train_spec(SnrFamily::layer_wise, 8, 10.0), BackpropMode::stored);
  const RunResult pre_lw = subset_run(family_train_spec(SnrFamily::layer_wise, 2, 2.0), BackpropMode::layer_wise);
  const RunResult pre_st = subset_run(family_train_spec(SnrFamily::layer_wise, 2, 2.0), BackpropMode::stored);
  const bool collapse = past_st.acc - past_lw.acc >= 5.0;
  const bool agree = std::abs(pre_st.acc - pre_lw.acc) <= 2.0;
  return verdict(linear && collapse && agree,
                 "log-SNR fit over depths 2-16 (n=4): " + fmt(fit.slope, 3) + " dB/unit, R^2 " + fmt(fit.r2, 4) +
                     "; past knee (8 units, n=10) layer-wise " + acc_str(past_lw) + " vs stored " +
                     acc_str(past_st) + " (need >= 5 below); pre knee (2 units, n=2) " + acc_str(pre_lw) +
                     " vs " + acc_str(pre_st) + " (need within 2)");
}

Outcome criterion6() {
  const std::string spec_text = family_train_spec(SnrFamily::hybrid, 8, 10.0);
  const ArchSpec spec = parse_arch(spec_text, "acceptance");
  const auto blocks = block_snr_summary(snr_profile(spec, BackpropMode::hybrid, 9));
  int sawtooth = 0;
  double min_margin = INFINITY;
  for (const auto& b : blocks) {
    sawtooth += b.input_snr > b.inner_min;
    min_margin = std::min(min_margin, to_db(b.input_snr) - to_db(b.inner_min));
  }
  const bool trace_ok = !blocks.empty() && sawtooth == static_cast<int>(blocks.size());
  const RunResult hyb = subset_run(spec_text, BackpropMode::hybrid);
  const RunResult st = subset_run(spec_text, BackpropMode::stored);
  const bool gap_ok = std::abs(st.acc - hyb.acc) <= 2.0 && !hyb.diverged;
  return verdict(trace_ok && gap_ok,
                 "8 blocks, n=10: block input above inner minimum at " + std::to_string(sawtooth) + "/" +
                     std::to_string(blocks.size()) + " blocks (smallest margin " + fmt(min_margin, 3) +
                     " dB); hybrid " + acc_str(hyb) + " vs stored " + acc_str(st) + " (need within 2)");
}

}  // namespace

namespace {

Outcome criterion7() {
  struct Target {
    const char* spec;
    std::optional<double> bpp;
    std::optional<double> total;
  };
  const Target targets[] = {{"resnet", 1928.0, 3.81e9}, {"layerwise", {}, 590e6}, {"hybrid", 352.0, 648e6}};
  bool ok = true;
  std::string detail;
  for (const auto& t : targets) {
    ArchSpec spec = load_arch(zoo(t.spec));
    const MemoryReport r = memory_report(spec, spec.mode, 240, 240, 32);
    detail += std::string(detail.empty() ? "" : "; ") + t.spec + ":";
    if (t.bpp) {
      const bool hit = std::abs(r.bytes_per_pixel() - *t.bpp) <= 0.05;
      ok = ok && hit;
      detail += " " + fmt(r.bytes_per_pixel(), 7) + " B/px (want " + fmt(*t.bpp, 6) + (hit ? ", ok)" : ", miss)");
    }
    if (t.total) {
      const double rel = r.total() / *t.total - 1.0;
      const bool hit = std::abs(rel) <= 0.02;
      ok = ok && hit;
      detail += " total " + fmt(r.total() / 1e6, 5) + " MB (want " + fmt(*t.total / 1e6, 5) + ", " +
                (rel >= 0 ? "+" : "") + fmt(100 * rel, 3) + "%" + (hit ? ", ok)" : ", miss)");
    }
  }
  return verdict(ok, detail);
}

const char* kSmallMemorySpec = R"(
[model]
name = small
[layer]
kind = conv
c_out = 16
[block]
kind = reversible
module = invconv:3, bn, lrelu
repeat = 2
[layer]
kind = pool_c
[block]
kind = reversible
module = invconv:3, bn, lrelu
repeat = 2
[layer]
kind = head
)";

// Absolute allocator peak over one full training step (forward, loss,
// backward, SGD update), after a warm-up step has created the velocity.
std::int64_t measured_step_peak(const ArchSpec& spec, BackpropMode mode, std::int64_t bs) {
  SequentialModel<float> model(spec, 1);
  std::vector<Tensor> velocity;
  const auto params = model.params();
  std::vector<int> labels;
  for (std::int64_t i = 0; i < bs; ++i) labels.push_back(static_cast<int>(i % spec.num_classes));
  auto step = [&] {
    model.zero_grad();
    SavedState<float> saved;
    Tensor logits = model_forward(model, gaussian<float>(checked_shape(bs, 3, spec.height, spec.width), 0, 1, 4),
                                  mode, saved);
    Tensor g(logits.shape());
    softmax_cross_entropy<float>(logits, labels, &g);
    logits.release();
    model_backward(model, saved, g, mode);
    g.release();
    sgd_step(params, velocity, 0.01, 0.9, 5e-4);
  };
  step();
  MemoryScope scope;
  step();
  return scope.stats().peak_bytes;
}

Outcome criterion8() {
  const ArchSpec spec = parse_arch(kSmallMemorySpec, "small");
  const std::int64_t s = measured_step_peak(spec, BackpropMode::stored, 8);
  const std::int64_t b = measured_step_peak(spec, BackpropMode::block_reversible, 8);
  const std::int64_t h = measured_step_peak(spec, BackpropMode::hybrid, 8);
  const auto predicted = static_cast<double>(memory_report(spec, BackpropMode::hybrid, 32, 32, 8).peak_all_bytes);
  const double overhead = 64.0 * 1024.0;
  const double diff = std::abs(static_cast<double>(h) - predicted);
  const bool order = h < b && b < s;
  const bool close = diff <= 0.10 * predicted + overhead;
  return verdict(order && close, "peak bytes stored " + std::to_string(s) + ", block " + std::to_string(b) +
                                     ", hybrid " + std::to_string(h) + "; hybrid predicted " +
                                     fmt(predicted, 10) + " (off by " + fmt(100 * diff / predicted, 3) +
                                     "%, allowed 10% + 64 KiB)");
}

const char* kStemFreeSpec = R"(
[model]
height = 16
width = 16
num_classes = 10
[layer]
kind = pool_c
[block]
kind = reversible
module = invconv:3, bn, lrelu
repeat = 2
[layer]
kind = pool_c
[block]
kind = reversible
module = invconv:3, bn, lrelu
repeat = 2
[layer]
kind = head
)";

Outcome criterion9() {
  SequentialModel<float> model(parse_arch(kStemFreeSpec, "stem-free"), 1);
  const Tensor x = gaussian<float>(checked_shape(4, 3, 16, 16), 0, 1, 2);
  const std::vector<int> labels{0, 1, 2, 3};
  std::map<BackpropMode, ConvCounts> fwd;
  std::map<BackpropMode, ConvCounts> bwd;
  for (BackpropMode m : {BackpropMode::stored, BackpropMode::block_reversible, BackpropMode::hybrid}) {
    model.zero_grad();
    SavedState<float> saved;
    ConvCounter::reset();
    Tensor logits = model_forward(model, x, m, saved);
    fwd[m] = ConvCounter::snapshot();
    Tensor g(logits.shape());
    softmax_cross_entropy<float>(logits, labels, &g);
    ConvCounter::reset();
    model_backward(model, saved, g, m);
    bwd[m] = ConvCounter::snapshot();
  }
  auto step_total = [&](BackpropMode m) {
    return fwd[m].forward + bwd[m].forward + bwd[m].backward_total();
  };
  const std::int64_t f = fwd[BackpropMode::stored].forward;
  const std::int64_t rev_bwd = bwd[BackpropMode::block_reversible].forward + bwd[BackpropMode::block_reversible].backward_total();
  const std::int64_t extra = step_total(BackpropMode::hybrid) - step_total(BackpropMode::stored);
  const bool ok = f > 0 && std::abs(rev_bwd - 3 * f) <= 1 && std::abs(extra - 2 * f) <= 1;
  return verdict(ok, "forward " + std::to_string(f) + " applications; block-reversible backward " +
                         std::to_string(rev_bwd) + " (" + fmt(static_cast<double>(rev_bwd) / f, 3) +
                         "x forward); hybrid step " + std::to_string(step_total(BackpropMode::hybrid)) + " vs stored " +
                         std::to_string(step_total(BackpropMode::stored)) + " (" +
                         fmt(static_cast<double>(extra) / f, 3) + " extra forward passes)");
}

Outcome criterion10() {
  const char* root = std::getenv("REVTRAIN_DATA");
  if (root == nullptr || *root == '\0') return {Verdict::skip, "REVTRAIN_DATA not set; no CIFAR-10 available"};
  const DatasetSource data = load_cifar10(root);
  std::map<BackpropMode, double> acc;
  for (BackpropMode m : {BackpropMode::hybrid, BackpropMode::stored}) {
    TrainConfig cfg;
    cfg.spec = load_arch(zoo("hybrid"));
    cfg.has_spec = true;
    cfg.mode = m;
    cfg.epochs = 3;
    cfg.subset = 5000;
    cfg.batch_size = 64;
    cfg.lr_max = 0.02;
    cfg.seed = 1;
    cfg.eval_initial = false;
    cfg.eval_every = cfg.epochs;
    acc[m] = train_run(cfg, data).history.back().test_acc;
  }
  const double h = acc[BackpropMode::hybrid];
  const double s = acc[BackpropMode::stored];
  return verdict(std::abs(h - s) <= 1.5 && h >= 35.0,
                 "hybrid " + fmt(h, 4) + "% vs stored " + fmt(s, 4) + "% (need within 1.5 and >= 35%)");
}

struct Criterion {
  int id;
  const char* title;
  double budget_seconds;  // 0: none
  Outcome (*run)();
};

const Criterion kCriteria[] = {
    {1, "batch-norm toy alpha", 30, criterion1},
    {2, "leaky ReLU alpha", 30, criterion2},
    {3, "general batch-norm alpha", 120, criterion3},
    {4, "gradient oracles", 300, criterion4},
    {5, "layer-wise depth instability", 0, criterion5},
    {6, "hybrid stabilization", 0, criterion6},
    {7, "memory golden values", 0, criterion7},
    {8, "measured memory ordering", 0, criterion8},
    {9, "convolution accounting", 0, criterion9},
    {10, "desk-scale training", 3600, criterion10},
};

}  // namespace

int main(int argc, char** argv) {
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
  int failures = 0;
  for (const Criterion& c : kCriteria) {
    if (!wanted.empty() && wanted.count(c.id) == 0) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {Verdict::fail, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.budget_seconds > 0 && secs > c.budget_seconds && o.verdict == Verdict::pass) {
      o.verdict = Verdict::fail;
      o.detail += "; over the " + fmt(c.budget_seconds, 4) + " s budget";
    }
    const char* tag = o.verdict == Verdict::pass ? "PASS" : o.verdict == Verdict::fail ? "FAIL" : "SKIP";
    failures += o.verdict == Verdict::fail;
    std::cout << "criterion " << std::setw(2) << c.id << " " << tag << " [" << c.title << ", " << std::fixed
              << std::setprecision(1) << secs << " s] " << std::defaultfloat << o.detail << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
