#include <iomanip>
#include <iostream>
#include <memory>

#include "commands.hpp"
#include "revtrain/errors.hpp"
#include "revtrain/gradcheck.hpp"
#include "revtrain/memory.hpp"

namespace revtrain::cli {

namespace {

struct MemFlags {
  std::string config;
  std::string mode;
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::int64_t batch = 0;
  bool golden = false;
  bool csv = false;
};

void print_report(const MemoryReport& r) {
  const double mb = 1e6;
  std::cout << std::fixed << std::setprecision(3);
  std::cout << r.name << "  mode " << mode_name(r.mode) << "  " << r.h << "x" << r.w << "  batch " << r.bs << '\n'
            << "  weights (M_theta)          " << std::setw(14) << r.weight_bytes / mb << " MB\n"
            << "  activations (M_z')         " << std::setw(14) << r.activation_bytes_per_pixel << " B/px\n"
            << "  gradients (M_g')           " << std::setw(14) << r.gradient_bytes_per_pixel << " B/px\n"
            << "  bytes per pixel            " << std::setw(14) << r.bytes_per_pixel() << " B/px\n"
            << "  total                      " << std::setw(14) << r.total() / mb << " MB\n"
            << "  peak step                  " << r.peak_step << '\n'
            << "  weight gradients           " << std::setw(14) << r.weight_grad_bytes / mb << " MB\n"
            << "  optimizer momentum         " << std::setw(14) << r.optimizer_bytes / mb << " MB\n"
            << "  input batch                " << std::setw(14) << r.input_bytes / mb << " MB\n"
            << "  batch-norm statistics      " << std::setw(14) << r.stats_bytes / mb << " MB\n"
            << "  saved state                " << std::setw(14) << r.saved_state_bytes / mb << " MB\n"
            << "  peak, everything           " << std::setw(14) << r.peak_all_bytes / mb << " MB\n";
}

int run_memcost(const MemFlags& f) {
  ArchSpec spec = load_arch(f.config);
  const BackpropMode mode = f.mode.empty() ? spec.mode : parse_mode(f.mode);
  const std::int64_t h = f.height > 0 ? f.height : spec.golden.h;
  const std::int64_t w = f.width > 0 ? f.width : spec.golden.w;
  const std::int64_t bs = f.batch > 0 ? f.batch : spec.golden.bs;
  const MemoryReport r = memory_report(spec, mode, h, w, bs);
  if (f.csv)
    std::cout << report_csv(r);
  else
    print_report(r);
  if (!f.golden) return kOk;
  const auto checks = golden_checks(spec, r);
  if (checks.empty()) throw ConfigError(f.config + ": no [golden] targets");
  bool ok = true;
  for (const auto& c : checks) {
    std::cout << (c.pass ? "PASS " : "FAIL ") << c.quantity << "  expected " << std::setprecision(3) << c.expected
              << "  got " << c.actual << '\n';
    ok = ok && c.pass;
  }
  return ok ? kOk : kRuntime;
}

struct GradFlags {
  std::string config;
  std::string mode;
  std::string dtype = "f64";
  double tol = 1e-6;
  std::int64_t seed = 1;
  std::int64_t batch = 2;
  std::int64_t fd_coords = 6;
};

int run_gradcheck(const GradFlags& f) {
  const ArchSpec spec = load_arch(f.config);
  const BackpropMode mode = f.mode.empty() ? spec.mode : parse_mode(f.mode);
  GradcheckOptions opt;
  opt.seed = static_cast<std::uint64_t>(f.seed);
  opt.batch = f.batch;
  opt.fd_coords = f.fd_coords;
  GradcheckReport r;
  if (f.dtype == "f64")
    r = gradcheck<double>(spec, mode, opt);
  else if (f.dtype == "f32")
    r = gradcheck<float>(spec, mode, opt);
  else
    throw ConfigError("--dtype must be f32 or f64");
  std::cout << gradcheck_csv(r);
  std::cout << std::scientific << std::setprecision(3) << "worst vs stored " << r.worst_vs_stored;
  if (!r.vs_numeric.empty()) std::cout << ", stored vs finite differences " << r.worst_vs_numeric;
  std::cout << ", tolerance " << f.tol << '\n';
  const bool ok = r.worst() <= f.tol;
  std::cout << (ok ? "PASS" : "FAIL") << '\n';
  return ok ? kOk : kRuntime;
}

}  // namespace

void add_memcost(CLI::App& app, int& code) {
  auto f = std::make_shared<MemFlags>();
  CLI::App* sub = app.add_subcommand("memcost", "Memory cost of training an architecture");
  sub->add_option("--config", f->config, "architecture file")->required();
  sub->add_option("--mode", f->mode, "stored | block | layerwise | hybrid (default: spec)");
  sub->add_option("--height", f->height, "input height (default: golden reference 240)");
  sub->add_option("--width", f->width, "input width (default: golden reference 240)");
  sub->add_option("--batch", f->batch, "batch size (default: golden reference 32)");
  sub->add_flag("--golden", f->golden, "check against the spec's reference figures; exit 3 on mismatch");
  sub->add_flag("--csv", f->csv, "emit component,bytes,bytes_per_pixel CSV");
  sub->callback([f, &code] { code = run_memcost(*f); });
}

void add_gradcheck(CLI::App& app, int& code) {
  auto f = std::make_shared<GradFlags>();
  CLI::App* sub = app.add_subcommand("gradcheck", "Compare mode gradients with stored mode and finite differences");
  sub->add_option("--config", f->config, "architecture file")->required();
  sub->add_option("--mode", f->mode, "mode under test (default: spec)");
  sub->add_option("--dtype", f->dtype, "f32 | f64")->capture_default_str();
  sub->add_option("--tol", f->tol, "largest acceptable relative error")->capture_default_str();
  sub->add_option("--seed", f->seed, "init and input seed")->capture_default_str();
  sub->add_option("--batch", f->batch, "batch size")->capture_default_str();
  sub->add_option("--fd-coords", f->fd_coords, "finite-difference probes per tensor (0: skip)")->capture_default_str();
  sub->callback([f, &code] { code = run_gradcheck(*f); });
}

}  // namespace revtrain::cli
