#include <cmath>
#include <iomanip>
#include <iostream>
#include <memory>

#include "commands.hpp"
#include "revtrain/errors.hpp"
#include "revtrain/snr.hpp"

namespace revtrain::cli {

namespace {

struct AlphaFlags {
  std::string layer;
  std::string sweep;
  std::int64_t samples = 100000;
  std::int64_t seed = 1;
  double noise = 1e-5;
  int configs = 20;
  std::int64_t channels = 16;
  bool check = false;
  std::string out;
};

int run_alpha(const AlphaFlags& f) {
  std::vector<double> xs;
  std::vector<AlphaEstimate> rows;
  std::string x_name;
  double tol = 0.05;
  const auto seed = static_cast<std::uint64_t>(f.seed);
  if (f.layer == "bn-toy") {
    x_name = "rho";
    xs = parse_list(f.sweep.empty() ? "1,2,5,10,100" : f.sweep);
    for (double rho : xs) {
      const BnConfig cfg{{1.0, rho}, {0.0, 0.0}, {0.0, 0.0}, {1.0, 1.0}, 0.0};
      rows.push_back(measure_alpha(bn_probe(cfg), InputDist::standard(2), f.noise, f.samples, seed));
    }
  } else if (f.layer == "lrelu") {
    x_name = "n";
    xs = parse_list(f.sweep.empty() ? "1.25,2,5,10" : f.sweep);
    for (double n : xs) rows.push_back(measure_alpha(lrelu_probe(n), InputDist::standard(4), f.noise, f.samples, seed));
  } else if (f.layer == "bn") {
    x_name = "config";
    tol = 0.10;
    if (f.configs < 1) throw ConfigError("--configs must be >= 1");
    for (int i = 0; i < f.configs; ++i) {
      const BnConfig cfg = random_bn_config(seed * 1000 + static_cast<std::uint64_t>(i), f.channels);
      xs.push_back(i);
      rows.push_back(measure_alpha(bn_probe(cfg), InputDist{cfg.mean, cfg.var, 1, 1}, f.noise, f.samples,
                                   seed + static_cast<std::uint64_t>(i)));
    }
  } else {
    throw ConfigError("--layer must be bn-toy, bn or lrelu");
  }
  write_output(f.out, alpha_csv(x_name, xs, rows));
  if (!f.check) return kOk;
  bool ok = true;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const double rel = std::abs(rows[i].empirical / rows[i].theoretical - 1.0);
    if (rel > tol) {
      std::cerr << "check failed at " << x_name << '=' << xs[i] << ": relative error " << rel << " > " << tol << '\n';
      ok = false;
    }
  }
  std::cerr << (ok ? "check passed" : "check failed") << " (tolerance " << tol * 100 << "%)\n";
  return ok ? kOk : kRuntime;
}

struct ProfileFlags {
  std::string config;
  std::string mode;
  std::string depths;
  std::string slopes = "10";
  std::int64_t seed = 1;
  std::int64_t batch = 8;
  std::int64_t channels = 16;
  std::int64_t extent = 8;
  std::string out;
};

int run_profile(const ProfileFlags& f) {
  const auto seed = static_cast<std::uint64_t>(f.seed);
  if (!f.depths.empty()) {
    const SnrFamily family = parse_family(f.mode.empty() ? "layer_wise" : f.mode);
    const std::vector<int> depths = parse_int_list(f.depths);
    const std::vector<double> slopes = parse_list(f.slopes);
    const auto rows = snr_depth_sweep(family, depths, slopes, seed, f.channels, f.extent, f.batch);
    write_output(f.out, sweep_csv(rows));
    if (depths.size() >= 2) {
      for (double n : slopes) {
        std::vector<double> x;
        std::vector<double> y;
        for (const auto& r : rows)
          if (r.n == n && std::isfinite(r.lowest_snr) && r.lowest_snr > 0.0) {
            x.push_back(r.depth);
            y.push_back(to_db(r.lowest_snr));
          }
        if (x.size() < 2) continue;
        const LineFit fit = fit_line(x, y);
        std::cerr << "n=" << n << ": " << std::setprecision(4) << fit.slope << " dB per unit, R^2 " << fit.r2 << '\n';
      }
    }
    return kOk;
  }
  if (f.config.empty()) throw ConfigError("snr-profile needs --config or --depths");
  const ArchSpec spec = load_arch(f.config);
  const BackpropMode mode = f.mode.empty() ? spec.mode : parse_mode(f.mode);
  const SnrTrace trace = snr_profile(spec, mode, seed, f.batch);
  write_output(f.out, trace_csv(trace));
  for (const auto& b : block_snr_summary(trace))
    std::cerr << "block s" << b.segment << ": input " << std::setprecision(4) << to_db(b.input_snr)
              << " dB, lowest inside " << to_db(b.inner_min) << " dB\n";
  return kOk;
}

}  // namespace

void add_snr_alpha(CLI::App& app, int& code) {
  auto f = std::make_shared<AlphaFlags>();
  CLI::App* sub = app.add_subcommand("snr-alpha", "Monte-Carlo SNR reduction of one invertible layer");
  sub->add_option("--layer", f->layer, "bn-toy | bn | lrelu")->required();
  sub->add_option("--sweep", f->sweep, "comma list of rho (bn-toy) or n (lrelu)");
  sub->add_option("--samples", f->samples, "samples per point")->capture_default_str();
  sub->add_option("--seed", f->seed, "seed")->capture_default_str();
  sub->add_option("--noise", f->noise, "output noise standard deviation")->capture_default_str();
  sub->add_option("--configs", f->configs, "random configurations (bn)")->capture_default_str();
  sub->add_option("--channels", f->channels, "channels per random configuration (bn)")->capture_default_str();
  sub->add_flag("--check", f->check, "exit 3 unless empirical is within 5% (10% for bn) of theory");
  sub->add_option("--out", f->out, "CSV path (default: stdout)");
  sub->callback([f, &code] { code = run_alpha(*f); });
}

void add_snr_profile(CLI::App& app, int& code) {
  auto f = std::make_shared<ProfileFlags>();
  CLI::App* sub = app.add_subcommand("snr-profile", "Reconstruction SNR through a model, or across depths");
  sub->add_option("--config", f->config, "architecture file (per-layer trace)");
  sub->add_option("--mode", f->mode, "trace: backprop mode; sweep: layerwise | hybrid family");
  sub->add_option("--depths", f->depths, "comma list of depths: run a synthetic depth sweep instead");
  sub->add_option("--slopes", f->slopes, "comma list of leaky-ReLU divisors n (sweep)")->capture_default_str();
  sub->add_option("--seed", f->seed, "seed")->capture_default_str();
  sub->add_option("--batch", f->batch, "batch size")->capture_default_str();
  sub->add_option("--channels", f->channels, "sweep width")->capture_default_str();
  sub->add_option("--extent", f->extent, "sweep spatial size")->capture_default_str();
  sub->add_option("--out", f->out, "CSV path (default: stdout)");
  sub->callback([f, &code] { code = run_profile(*f); });
}

}  // namespace revtrain::cli
