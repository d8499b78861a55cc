#include "revtrain/memory.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <variant>

#include "revtrain/errors.hpp"

namespace revtrain {

namespace {

struct Dims {
  std::int64_t nb = 0;
  std::int64_t c = 0;
  std::int64_t h = 0;
  std::int64_t w = 0;

  std::int64_t numel() const { return nb * c * h * w; }
  Dims half() const { return Dims{nb, c / 2, h, w}; }
};

Dims step(const LayerSpec& l, Dims d) {
  switch (l.kind) {
    case LayerKind::conv: d.c = l.c_out; break;
    case LayerKind::pool_c: d.c *= 4; d.h /= 2; d.w /= 2; break;
    case LayerKind::pool_b: d.nb *= 4; d.h /= 2; d.w /= 2; break;
    case LayerKind::maxpool: d.h /= 2; d.w /= 2; break;
    default: break;
  }
  return d;
}

bool is_pool(LayerKind k) { return k == LayerKind::pool_c || k == LayerKind::pool_b; }

// Same rule as the model: which standalone layers keep their input.
bool stores_input(LayerKind k, BackpropMode mode) {
  switch (mode) {
    case BackpropMode::stored: return true;
    case BackpropMode::block_reversible: return !is_pool(k) && k != LayerKind::invconv;
    case BackpropMode::layer_wise:
    case BackpropMode::hybrid: return k == LayerKind::conv;
  }
  return true;
}

enum class Cat { activation, gradient, other };

class Replay {
 public:
  explicit Replay(int bpe) : bpe_(bpe) {}

  using Id = int;

  Id alloc(Cat cat, std::int64_t elems, const std::string& label) {
    const Id id = next_++;
    const std::int64_t bytes = elems * bpe_;
    live_[id] = {cat, bytes};
    bump(cat, bytes);
    note(label);
    return id;
  }

  void free(Id id, const std::string& label) {
    const auto it = live_.find(id);
    if (it == live_.end()) throw StateError("memory replay: double free");
    bump(it->second.first, -it->second.second);
    live_.erase(it);
    note(label);
  }

  std::int64_t bytes(Id id) const { return live_.at(id).second; }
  void begin_backward() { backward_ = true; }
  Schedule& schedule() { return sched_; }
  bool empty() const { return live_.empty(); }

 private:
  void bump(Cat cat, std::int64_t b) {
    switch (cat) {
      case Cat::activation: cur_.activation += b; break;
      case Cat::gradient: cur_.gradient += b; break;
      case Cat::other: cur_.input += b; break;
    }
  }

  void note(const std::string& label) {
    cur_.label = label;
    sched_.events.push_back(cur_);
    const std::size_t i = sched_.events.size() - 1;
    const auto& p = sched_.events[sched_.peak_event];
    const auto& q = sched_.events[sched_.peak_all_event];
    const std::int64_t now = cur_.activation + cur_.gradient;
    const std::int64_t best = p.activation + p.gradient;
    // Ties go to the first backward event that reaches the peak.
    if (now > best || (now == best && backward_ && !peak_in_backward_)) {
      sched_.peak_event = i;
      peak_in_backward_ = backward_;
    }
    if (cur_.activation + cur_.gradient + cur_.input > q.activation + q.gradient + q.input) {
      sched_.peak_all_event = i;
    }
  }

  int bpe_;
  bool backward_ = false;
  bool peak_in_backward_ = false;
  Id next_ = 0;
  std::map<Id, std::pair<Cat, std::int64_t>> live_;
  ScheduleEvent cur_;
  Schedule sched_;
};

using Id = Replay::Id;

struct Step {
  Replay& r;
  BackpropMode mode;
  std::vector<Id> stash;

  // ---- forward -------------------------------------------------------------

  void forward_plain(const LayerSpec& l, Id& a, Dims& d, const std::string& at) {
    const Dims o = step(l, d);
    switch (l.kind) {
      case LayerKind::conv:
      case LayerKind::maxpool: {
        const Id out = r.alloc(Cat::activation, o.numel(), at + " output");
        r.free(a, at + " input released");
        a = out;
        break;
      }
      case LayerKind::invconv: {
        const Id tmp = r.alloc(Cat::activation, d.half().numel(), at + " coupling tmp");
        r.free(tmp, at + " coupling tmp released");
        break;
      }
      default: break;
    }
    d = o;
  }

  void forward_stored(const LayerSpec& l, Id& a, Dims& d, std::vector<Id>& st, const std::string& at) {
    const Dims o = step(l, d);
    switch (l.kind) {
      case LayerKind::conv:
      case LayerKind::maxpool:
        st.push_back(a);
        a = r.alloc(Cat::activation, o.numel(), at + " output");
        break;
      case LayerKind::bn:
      case LayerKind::lrelu: st.push_back(r.alloc(Cat::activation, d.numel(), at + " stored input")); break;
      case LayerKind::invconv: {
        st.push_back(r.alloc(Cat::activation, d.half().numel(), at + " stored x2"));
        const Id tmp = r.alloc(Cat::activation, d.half().numel(), at + " coupling tmp");
        st.push_back(r.alloc(Cat::activation, d.half().numel(), at + " stored y1"));
        r.free(tmp, at + " coupling tmp released");
        break;
      }
      default: break;
    }
    d = o;
  }

  void module_forward(const std::vector<LayerSpec>& m, Id& t, Dims d, std::vector<Id>* st,
                      const std::string& at) {
    for (std::size_t j = 0; j < m.size(); ++j) {
      const std::string name = at + std::to_string(j) + " " + kind_name(m[j].kind);
      if (st != nullptr) forward_stored(m[j], t, d, *st, "forward " + name);
      else forward_plain(m[j], t, d, "forward " + name);
    }
  }

  void block_forward(const BlockSpec& b, const Dims& d, const std::string& at) {
    std::vector<Id>* st = mode == BackpropMode::stored ? &stash : nullptr;
    if (b.kind == BlockKind::residual) {
      Id t = r.alloc(Cat::activation, d.numel(), "forward " + at + " branch copy");
      module_forward(b.module, t, d, st, at + ".F");
      r.free(t, "forward " + at + " branch released");
      return;
    }
    Id t = r.alloc(Cat::activation, d.half().numel(), "forward " + at + ".F branch copy");
    module_forward(b.module, t, d.half(), st, at + ".F");
    r.free(t, "forward " + at + ".F branch released");
    t = r.alloc(Cat::activation, d.half().numel(), "forward " + at + ".G branch copy");
    module_forward(b.module, t, d.half(), st, at + ".G");
    r.free(t, "forward " + at + ".G branch released");
  }

  // ---- backward ------------------------------------------------------------

  // Input dims of each module layer.
  static std::vector<Dims> module_dims(const std::vector<LayerSpec>& m, Dims d) {
    std::vector<Dims> out;
    for (const auto& l : m) {
      out.push_back(d);
      d = step(l, d);
    }
    return out;
  }

  Id pop(std::vector<Id>& st) {
    if (st.empty()) throw StateError("memory replay: stash underflow");
    const Id x = st.back();
    st.pop_back();
    return x;
  }

  void backward_stored(const LayerSpec& l, const Dims& d, std::vector<Id>& st, Id& g, const std::string& at) {
    switch (l.kind) {
      case LayerKind::invconv: {
        const Id y1 = pop(st);
        const Id x2 = pop(st);
        const Id tmp = r.alloc(Cat::gradient, d.half().numel(), at + " gradient tmp");
        r.free(tmp, at + " gradient tmp released");
        r.free(y1, at + " stored y1 released");
        r.free(x2, at + " stored x2 released");
        break;
      }
      case LayerKind::conv: {
        const Id x = pop(st);
        const Id gx = r.alloc(Cat::gradient, d.numel(), at + " input gradient");
        r.free(x, at + " stored input released");
        r.free(g, at + " output gradient released");
        g = gx;
        break;
      }
      case LayerKind::maxpool: {
        const Id x = pop(st);
        const Id gx = r.alloc(Cat::gradient, d.numel(), at + " input gradient");
        r.free(g, at + " output gradient released");
        r.free(x, at + " stored input released");
        g = gx;
        break;
      }
      case LayerKind::bn:
      case LayerKind::lrelu: r.free(pop(st), at + " stored input released"); break;
      default: break;
    }
  }

  void backward_with_input(const LayerSpec& l, const Dims& d, Id& g, const std::string& at) {
    if (l.kind == LayerKind::conv || l.kind == LayerKind::maxpool) {
      const Id gx = r.alloc(Cat::gradient, d.numel(), at + " input gradient");
      r.free(g, at + " output gradient released");
      g = gx;
    }
  }

  void invert_backward(const LayerSpec& l, const Dims& d, const std::string& at) {
    if (l.kind != LayerKind::invconv) return;
    const std::int64_t h = d.half().numel();
    Id tmp = r.alloc(Cat::activation, h, at + " inverse tmp (G)");
    r.free(tmp, at + " inverse tmp released");
    tmp = r.alloc(Cat::gradient, h, at + " gradient tmp");
    r.free(tmp, at + " gradient tmp released");
    tmp = r.alloc(Cat::activation, h, at + " inverse tmp (F)");
    r.free(tmp, at + " inverse tmp released");
  }

  void module_backward_stored(const std::vector<LayerSpec>& m, const Dims& d, std::vector<Id>& st, Id& gt,
                              const std::string& at) {
    const auto dims = module_dims(m, d);
    for (std::size_t j = m.size(); j-- > 0;) {
      backward_stored(m[j], dims[j], st, gt, "backward " + at + std::to_string(j) + " " + kind_name(m[j].kind));
    }
  }

  void module_invert_backward(const std::vector<LayerSpec>& m, const Dims& d, const std::string& at) {
    const auto dims = module_dims(m, d);
    for (std::size_t j = m.size(); j-- > 0;) {
      invert_backward(m[j], dims[j], "backward " + at + std::to_string(j) + " " + kind_name(m[j].kind));
    }
  }

  void block_backward(const BlockSpec& b, const Dims& d, const std::string& at) {
    const Dims hd = d.half();
    if (mode == BackpropMode::stored) {
      if (b.kind == BlockKind::residual) {
        Id gt = r.alloc(Cat::gradient, d.numel(), "backward " + at + " branch gradient");
        module_backward_stored(b.module, d, stash, gt, at + ".F");
        r.free(gt, "backward " + at + " branch gradient released");
        return;
      }
      Id gt = r.alloc(Cat::gradient, hd.numel(), "backward " + at + ".G branch gradient");
      module_backward_stored(b.module, hd, stash, gt, at + ".G");
      r.free(gt, "backward " + at + ".G branch gradient released");
      gt = r.alloc(Cat::gradient, hd.numel(), "backward " + at + ".F branch gradient");
      module_backward_stored(b.module, hd, stash, gt, at + ".F");
      r.free(gt, "backward " + at + ".F branch gradient released");
      return;
    }
    for (const char which : {'G', 'F'}) {
      const std::string m = at + "." + which;
      if (mode == BackpropMode::block_reversible) {
        std::vector<Id> local;
        Id t = r.alloc(Cat::activation, hd.numel(), "backward " + m + " recompute input");
        module_forward(b.module, t, hd, &local, "recompute " + m);
        r.free(t, "backward " + m + " recompute output released");
        Id gt = r.alloc(Cat::gradient, hd.numel(), "backward " + m + " branch gradient");
        module_backward_stored(b.module, hd, local, gt, m);
        r.free(gt, "backward " + m + " branch gradient released");
      } else {
        Id t = r.alloc(Cat::activation, hd.numel(), "backward " + m + " replay input");
        module_forward(b.module, t, hd, nullptr, "replay " + m);
        Id gt = r.alloc(Cat::gradient, hd.numel(), "backward " + m + " branch gradient");
        module_invert_backward(b.module, hd, m);
        r.free(t, "backward " + m + " reconstructed input released");
        r.free(gt, "backward " + m + " branch gradient released");
      }
    }
  }
};

}  // namespace

Schedule simulate_schedule(const ArchSpec& spec_in, BackpropMode mode, std::int64_t h, std::int64_t w,
                           std::int64_t bs) {
  ArchSpec spec = spec_in;
  resolve(spec, h, w);
  check_mode(spec, mode);
  if (bs < 1) throw ConfigError("batch size must be >= 1");

  Replay r(spec.bpe);
  Step s{r, mode, {}};
  const auto& segs = spec.segments;
  std::vector<Dims> dims;

  Dims d{bs, spec.input_channels, h, w};
  Id a = r.alloc(Cat::other, d.numel(), "input batch");
  r.schedule().input_bytes = r.bytes(a);
  for (std::size_t i = 0; i < segs.size(); ++i) {
    dims.push_back(d);
    const std::string name = "s" + std::to_string(i);
    if (const auto* l = std::get_if<LayerSpec>(&segs[i])) {
      const std::string at = "forward " + name + " " + kind_name(l->kind);
      if (stores_input(l->kind, mode)) s.forward_stored(*l, a, d, s.stash, at);
      else s.forward_plain(*l, a, d, at);
      continue;
    }
    s.block_forward(std::get<BlockSpec>(segs[i]), d, name);
  }
  const Dims head_in = d;
  std::int64_t saved = r.bytes(a);
  for (const Id id : s.stash) saved += r.bytes(id);
  r.schedule().saved_state_bytes = saved;

  const Id logits = r.alloc(Cat::other, bs * spec.num_classes, "logits");
  const Id glogits = r.alloc(Cat::other, bs * spec.num_classes, "loss gradient");
  r.free(logits, "logits released");

  r.begin_backward();
  Id g = r.alloc(Cat::gradient, head_in.numel(), "backward head input gradient");
  if (mode == BackpropMode::stored) r.free(a, "backward head input released");

  for (std::size_t i = segs.size(); i-- > 0;) {
    const std::string name = "s" + std::to_string(i);
    const Dims& di = dims[i];
    if (const auto* l = std::get_if<LayerSpec>(&segs[i])) {
      const std::string at = "backward " + name + " " + kind_name(l->kind);
      if (mode == BackpropMode::stored) {
        s.backward_stored(*l, di, s.stash, g, at);
      } else if (stores_input(l->kind, mode)) {
        const Id x = s.pop(s.stash);
        r.free(a, at + " output released");
        s.backward_with_input(*l, di, g, at);
        a = x;
      } else {
        s.invert_backward(*l, di, at);
      }
      continue;
    }
    s.block_backward(std::get<BlockSpec>(segs[i]), di, name);
  }
  if (!s.stash.empty()) throw StateError("memory replay: stash not consumed");
  if (mode != BackpropMode::stored) r.free(a, "reconstructed input released");
  r.free(g, "input gradient released");
  r.free(glogits, "loss gradient released");
  if (!r.empty()) throw StateError("memory replay: buffers leaked");
  return std::move(r.schedule());
}

std::int64_t parameter_count(const ArchSpec& spec_in) {
  ArchSpec spec = spec_in;
  resolve(spec);
  auto layer = [](const LayerSpec& l) -> std::int64_t {
    switch (l.kind) {
      case LayerKind::conv: return l.c_in * l.c_out * l.k * l.k + l.c_out;
      case LayerKind::invconv: {
        const std::int64_t hc = l.c_in / 2;
        return 2 * (hc * hc * l.k * l.k + hc);
      }
      case LayerKind::bn: return 2 * l.c_in;
      default: return 0;
    }
  };
  std::int64_t n = spec.head.c_in * spec.num_classes + spec.num_classes;
  for (const auto& seg : spec.segments) {
    if (const auto* l = std::get_if<LayerSpec>(&seg)) {
      n += layer(*l);
      continue;
    }
    const auto& b = std::get<BlockSpec>(seg);
    const std::int64_t copies = b.kind == BlockKind::reversible ? 2 : 1;
    for (const auto& l : b.module) n += copies * layer(l);
  }
  return n;
}

std::int64_t weight_bytes(const ArchSpec& spec) { return parameter_count(spec) * spec.bpe; }

std::int64_t stats_bytes(const ArchSpec& spec_in) {
  ArchSpec spec = spec_in;
  resolve(spec);
  std::int64_t n = 0;
  for (const auto& seg : spec.segments) {
    if (const auto* l = std::get_if<LayerSpec>(&seg)) {
      if (l->kind == LayerKind::bn) n += 2 * l->c_in;
      continue;
    }
    const auto& b = std::get<BlockSpec>(seg);
    const std::int64_t copies = b.kind == BlockKind::reversible ? 2 : 1;
    for (const auto& l : b.module) {
      if (l.kind == LayerKind::bn) n += copies * 2 * l.c_in;
    }
  }
  return n * spec.bpe;
}

MemoryReport memory_report(const ArchSpec& spec, BackpropMode mode, std::int64_t h, std::int64_t w,
                           std::int64_t bs) {
  const Schedule sched = simulate_schedule(spec, mode, h, w, bs);
  MemoryReport r;
  r.name = spec.name;
  r.mode = mode;
  r.h = h;
  r.w = w;
  r.bs = bs;
  r.bpe = spec.bpe;
  r.weight_bytes = weight_bytes(spec);
  r.stats_bytes = stats_bytes(spec);
  r.weight_grad_bytes = r.weight_bytes;
  r.optimizer_bytes = r.weight_bytes;
  r.input_bytes = sched.input_bytes;
  r.saved_state_bytes = sched.saved_state_bytes;

  const ScheduleEvent& p = sched.peak();
  const double px = r.pixels();
  const std::int64_t amortized = mode == BackpropMode::stored ? 0 : r.stats_bytes;
  r.activation_bytes_per_pixel = static_cast<double>(p.activation + amortized) / px;
  r.gradient_bytes_per_pixel = static_cast<double>(p.gradient) / px;
  r.peak_step = p.label;
  r.peak_schedule_bytes = r.weight_bytes + p.activation + p.gradient + amortized;

  const ScheduleEvent& q = sched.events.at(sched.peak_all_event);
  // Cached and running statistics are the same size.
  r.peak_all_bytes = r.weight_bytes + r.weight_grad_bytes + r.optimizer_bytes + 2 * r.stats_bytes +
                     q.activation + q.gradient + q.input;
  return r;
}

double activation_bytes_per_pixel(const ArchSpec& spec, BackpropMode mode) {
  return memory_report(spec, mode, spec.golden.h, spec.golden.w, spec.golden.bs).activation_bytes_per_pixel;
}

double gradient_bytes_per_pixel(const ArchSpec& spec, BackpropMode mode) {
  return memory_report(spec, mode, spec.golden.h, spec.golden.w, spec.golden.bs).gradient_bytes_per_pixel;
}

double closed_form_bytes_per_pixel(const ArchSpec& spec_in, BackpropMode mode) {
  ArchSpec spec = spec_in;
  const std::int64_t h = spec.golden.h;
  const std::int64_t w = spec.golden.w;
  const ResolvedSpec res = resolve(spec, h, w);
  check_mode(spec, mode);
  const double bpe = spec.bpe;
  auto v = [&](std::size_t i) { return res.inputs[i].per_pixel(h, w) * bpe; };
  const std::size_t n = spec.segments.size();
  const double stats =
      mode == BackpropMode::stored
          ? 0.0
          : static_cast<double>(stats_bytes(spec)) / (static_cast<double>(h * w) * spec.golden.bs);

  if (mode == BackpropMode::stored) {
    // Everything stored, plus the first gradient.
    double stored = v(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double vi = v(i);
      if (const auto* l = std::get_if<LayerSpec>(&spec.segments[i])) {
        if (!is_pool(l->kind) && i > 0) stored += vi;
        continue;
      }
      const auto& b = std::get<BlockSpec>(spec.segments[i]);
      const double width = b.kind == BlockKind::reversible ? vi / 2 : vi;
      const double copies = b.kind == BlockKind::reversible ? 2 : 1;
      stored += copies * width * static_cast<double>(b.module.size());
    }
    return stored + v(n);
  }

  double prefix = 0.0;  // stored standalone inputs upstream of segment i
  double worst = 2.0 * v(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double vi = v(i);
    double need = 0.0;
    if (const auto* l = std::get_if<LayerSpec>(&spec.segments[i])) {
      if (stores_input(l->kind, mode)) {
        // stored input + output + output gradient + input gradient
        const double kept = i == 0 ? 0.0 : vi;  // the input batch is a line item
        need = kept + v(i + 1) + v(i + 1) + (l->kind == LayerKind::conv || l->kind == LayerKind::maxpool ? vi : 0.0);
      } else {
        need = 2.0 * vi + (l->kind == LayerKind::invconv ? vi / 2 : 0.0);
      }
      worst = std::max(worst, prefix + need);
      if (stores_input(l->kind, mode) && i > 0) prefix += vi;
      continue;
    }
    const auto& b = std::get<BlockSpec>(spec.segments[i]);
    bool coupling = false;
    for (const auto& l : b.module) coupling = coupling || l.kind == LayerKind::invconv;
    if (mode == BackpropMode::hybrid) {
      // a, g, reconstructed branch, branch gradient, coupling tmp
      need = 2.0 * vi + vi / 2 + vi / 2 + (coupling ? vi / 4 : 0.0);
    } else {
      // a, g, recomputed stash, branch output
      const double stash = static_cast<double>(b.module.size()) * vi / 2;
      need = 2.0 * vi + stash + vi / 2;
    }
    worst = std::max(worst, prefix + need);
  }
  return worst + stats;
}

std::string report_csv(const MemoryReport& r) {
  std::ostringstream out;
  const double px = r.pixels();
  auto row = [&](const std::string& name, double bytes) {
    out << name << ',' << static_cast<std::int64_t>(bytes + 0.5) << ',' << bytes / px << '\n';
  };
  out << "component,bytes,bytes_per_pixel\n";
  row("weights", static_cast<double>(r.weight_bytes));
  row("activations", r.activation_bytes_per_pixel * px);
  row("gradients", r.gradient_bytes_per_pixel * px);
  row("total", r.total());
  row("weight_grads", static_cast<double>(r.weight_grad_bytes));
  row("optimizer_momentum", static_cast<double>(r.optimizer_bytes));
  row("input_batch", static_cast<double>(r.input_bytes));
  row("bn_statistics", static_cast<double>(r.stats_bytes));
  row("saved_state", static_cast<double>(r.saved_state_bytes));
  row("peak_schedule", static_cast<double>(r.peak_schedule_bytes));
  row("peak_all", static_cast<double>(r.peak_all_bytes));
  return out.str();
}

std::vector<GoldenCheck> golden_checks(const ArchSpec& spec, const MemoryReport& r) {
  std::vector<GoldenCheck> out;
  const GoldenTargets& g = spec.golden;
  if (g.bytes_per_pixel) {
    const double a = r.bytes_per_pixel();
    out.push_back({"bytes_per_pixel", *g.bytes_per_pixel, a, 0.05, std::abs(a - *g.bytes_per_pixel) <= 0.05});
  }
  auto relative = [&](const char* name, double expected, double actual) {
    out.push_back({name, expected, actual, 0.02, std::abs(actual - expected) <= 0.02 * std::abs(expected)});
  };
  if (g.weight_bytes) relative("weight_bytes", *g.weight_bytes, static_cast<double>(r.weight_bytes));
  if (g.total_bytes) relative("total_bytes", *g.total_bytes, r.total());
  return out;
}

}  // namespace revtrain
