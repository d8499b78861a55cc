#include "revtrain/model.hpp"

#include <type_traits>

#include "revtrain/errors.hpp"
#include "revtrain/ops.hpp"

namespace revtrain {

template <typename T>
std::int64_t SavedState<T>::bytes() const {
  std::int64_t total = output.bytes();
  for (const auto& t : stash) total += t.bytes();
  return total;
}

namespace {

template <typename L, typename T>
constexpr bool is_a = std::is_same_v<std::decay_t<L>, T>;

template <typename T>
Layer<T> make_layer(const LayerSpec& s, Pcg32& rng) {
  switch (s.kind) {
    case LayerKind::conv: return Conv<T>(s.c_in, s.c_out, s.k, rng);
    case LayerKind::bn: {
      typename InvBatchNorm<T>::Options o;
      o.eps_i = s.eps_i;
      return InvBatchNorm<T>(s.c_in, o);
    }
    case LayerKind::lrelu: return InvLeakyReLU<T>(s.n);
    case LayerKind::invconv: return InvConv<T>(s.c_in, s.k, rng);
    case LayerKind::pool_c: return InvPool<T>(PoolKind::channel);
    case LayerKind::pool_b: return InvPool<T>(PoolKind::batch);
    case LayerKind::maxpool: return MaxPool<T>();
    case LayerKind::head: break;
  }
  throw ConfigError("head cannot appear as a layer");
}

template <typename T>
const char* layer_kind(const Layer<T>& layer) {
  return std::visit(
      [](const auto& l) -> const char* {
        using L = std::decay_t<decltype(l)>;
        if constexpr (is_a<L, Conv<T>>) return "conv";
        else if constexpr (is_a<L, InvConv<T>>) return "invconv";
        else if constexpr (is_a<L, InvBatchNorm<T>>) return "bn";
        else if constexpr (is_a<L, InvLeakyReLU<T>>) return "lrelu";
        else if constexpr (is_a<L, InvPool<T>>) return l.kind() == PoolKind::channel ? "pool_c" : "pool_b";
        else return "maxpool";
      },
      layer);
}

template <typename T>
bool is_pool(const Layer<T>& layer) {
  return std::holds_alternative<InvPool<T>>(layer);
}

// Whether a standalone layer keeps its input on the stash in `mode`.
template <typename T>
bool stores_input(const Layer<T>& layer, BackpropMode mode) {
  switch (mode) {
    case BackpropMode::stored: return true;
    case BackpropMode::block_reversible:
      return !is_pool(layer) && !std::holds_alternative<InvConv<T>>(layer);
    case BackpropMode::layer_wise:
    case BackpropMode::hybrid:
      return std::holds_alternative<Conv<T>>(layer);
  }
  return true;
}

template <typename T>
void forward_plain(Layer<T>& layer, BasicTensor<T>& a, Phase phase) {
  std::visit(
      [&](auto& l) {
        using L = std::decay_t<decltype(l)>;
        if constexpr (is_a<L, Conv<T>> || is_a<L, MaxPool<T>>) a = l.forward(a);
        else if constexpr (is_a<L, InvBatchNorm<T>>) l.forward_(a, phase);
        else l.forward_(a);
      },
      layer);
}

template <typename T>
void forward_stored(Layer<T>& layer, BasicTensor<T>& a, Stash<T>& stash, Phase phase) {
  std::visit(
      [&](auto& l) {
        using L = std::decay_t<decltype(l)>;
        if constexpr (is_a<L, InvBatchNorm<T>>) l.forward_stored(a, stash, phase);
        else if constexpr (is_a<L, InvPool<T>>) l.forward_(a);
        else l.forward_stored(a, stash);
      },
      layer);
}

template <typename T>
void backward_with_input(Layer<T>& layer, const BasicTensor<T>& x, BasicTensor<T>& g) {
  std::visit(
      [&](auto& l) {
        using L = std::decay_t<decltype(l)>;
        if constexpr (is_a<L, Conv<T>> || is_a<L, MaxPool<T>>) g = l.backward(x, g);
        else if constexpr (is_a<L, InvBatchNorm<T>> || is_a<L, InvLeakyReLU<T>>) l.backward_(x, g);
        else throw StateError("layer does not take a stored-input backward");
      },
      layer);
}

template <typename T>
void backward_stored(Layer<T>& layer, Stash<T>& stash, BasicTensor<T>& g) {
  if (auto* c = std::get_if<InvConv<T>>(&layer)) {
    c->backward_stored(stash, g);
  } else if (auto* p = std::get_if<InvPool<T>>(&layer)) {
    p->backward_(g);
  } else {
    BasicTensor<T> x = pop(stash);
    backward_with_input(layer, x, g);
  }
}

template <typename T>
void invert_backward(Layer<T>& layer, BasicTensor<T>& a, BasicTensor<T>& g) {
  std::visit(
      [&](auto& l) {
        using L = std::decay_t<decltype(l)>;
        if constexpr (is_a<L, Conv<T>> || is_a<L, MaxPool<T>>) {
          throw ConfigError("layer is not invertible");
        } else {
          l.invert_backward_(a, g);
        }
      },
      layer);
}

template <typename T>
struct Tracer {
  SavedState<T>* saved = nullptr;
  int counter = 0;

  void record(const std::string& name, const BasicTensor<T>& t) {
    saved->shadow[name] = t;
    saved->shadow_depth[name] = counter++;
  }
};

template <typename T>
void trace_point(const SavedState<T>& saved, SnrTrace& trace, const std::string& name, int segment,
                 char module, int layer, bool block_input, const BasicTensor<T>& reconstructed) {
  const auto it = saved.shadow.find(name);
  if (it == saved.shadow.end()) return;
  SnrEntry e;
  e.name = name;
  e.segment = segment;
  e.module = module;
  e.layer = layer;
  e.depth = saved.shadow_depth.at(name);
  e.block_input = block_input;
  e.snr = snr(reconstructed, it->second);
  trace.entries.push_back(std::move(e));
}

template <typename T>
void module_forward(Module<T>& m, BasicTensor<T>& t, Phase phase, Tracer<T>* tr, const std::string& prefix) {
  for (std::size_t j = 0; j < m.layers.size(); ++j) {
    if (tr != nullptr) tr->record(prefix + std::to_string(j), t);
    forward_plain(m.layers[j], t, phase);
  }
}

template <typename T>
void module_forward_stored(Module<T>& m, BasicTensor<T>& t, Stash<T>& stash, Phase phase,
                           Tracer<T>* tr, const std::string& prefix) {
  for (std::size_t j = 0; j < m.layers.size(); ++j) {
    if (tr != nullptr) tr->record(prefix + std::to_string(j), t);
    forward_stored(m.layers[j], t, stash, phase);
  }
}

template <typename T>
void module_backward_stored(Module<T>& m, Stash<T>& stash, BasicTensor<T>& gt) {
  for (std::size_t j = m.layers.size(); j-- > 0;) backward_stored(m.layers[j], stash, gt);
}

// Layer-wise reconstruction interleaved with the gradient: each layer is first
// inverted to recover its input, then backpropagated.
template <typename T>
void module_invert_backward(Module<T>& m, BasicTensor<T>& t, BasicTensor<T>& gt, const SavedState<T>& saved,
                            SnrTrace& trace, int segment, char which, const std::string& prefix) {
  for (std::size_t j = m.layers.size(); j-- > 0;) {
    invert_backward(m.layers[j], t, gt);
    trace_point(saved, trace, prefix + std::to_string(j), segment, which, static_cast<int>(j), false, t);
  }
}

template <typename T>
void block_forward_impl(Block<T>& b, BasicTensor<T>& a, Phase phase, Stash<T>* stash, Tracer<T>* tr,
                        const std::string& prefix) {
  auto run = [&](Module<T>& m, BasicTensor<T>& t, const std::string& p) {
    if (stash != nullptr) module_forward_stored(m, t, *stash, phase, tr, p);
    else module_forward(m, t, phase, tr, p);
  };
  if (b.kind == BlockKind::residual) {
    BasicTensor<T> t = a;
    run(b.f, t, prefix + ".F");
    add_into<T>(a.view(), std::as_const(t).view());
    return;
  }
  BasicTensor<T> t = materialize<T>(std::as_const(a).upper_half());
  run(b.f, t, prefix + ".F");
  add_into<T>(a.lower_half(), std::as_const(t).view());
  t.release();
  t = materialize<T>(std::as_const(a).lower_half());
  run(b.g, t, prefix + ".G");
  add_into<T>(a.upper_half(), std::as_const(t).view());
}

template <typename T>
void block_backward_stored(Block<T>& b, Stash<T>& stash, BasicTensor<T>& g) {
  if (b.kind == BlockKind::residual) {
    BasicTensor<T> gt = g;
    module_backward_stored(b.f, stash, gt);
    add_into<T>(g.view(), std::as_const(gt).view());
    return;
  }
  BasicTensor<T> gt = materialize<T>(std::as_const(g).upper_half());
  module_backward_stored(b.g, stash, gt);
  add_into<T>(g.lower_half(), std::as_const(gt).view());
  gt.release();
  gt = materialize<T>(std::as_const(g).lower_half());
  module_backward_stored(b.f, stash, gt);
  add_into<T>(g.upper_half(), std::as_const(gt).view());
}

// Reversible-block backward: analytic inverse for the block input, with each
// module's hidden activations recomputed in full before its gradient flows.
template <typename T>
void block_backward_recompute(Block<T>& b, BasicTensor<T>& a, BasicTensor<T>& g) {
  Stash<T> local;
  BasicTensor<T> t = materialize<T>(std::as_const(a).lower_half());
  module_forward_stored<T>(b.g, t, local, Phase::replay, nullptr, "");
  sub_into<T>(a.upper_half(), std::as_const(t).view());
  t.release();
  BasicTensor<T> gt = materialize<T>(std::as_const(g).upper_half());
  module_backward_stored(b.g, local, gt);
  add_into<T>(g.lower_half(), std::as_const(gt).view());
  gt.release();

  t = materialize<T>(std::as_const(a).upper_half());
  module_forward_stored<T>(b.f, t, local, Phase::replay, nullptr, "");
  sub_into<T>(a.lower_half(), std::as_const(t).view());
  t.release();
  gt = materialize<T>(std::as_const(g).lower_half());
  module_backward_stored(b.f, local, gt);
  add_into<T>(g.upper_half(), std::as_const(gt).view());
}

// Hybrid-block backward: analytic block inverse for the block input, layer-wise
// inverses for the hidden activations, interleaved with the gradient.
template <typename T>
void block_backward_hybrid(Block<T>& b, BasicTensor<T>& a, BasicTensor<T>& g, const SavedState<T>& saved,
                           SnrTrace& trace, int segment, const std::string& prefix) {
  BasicTensor<T> t = materialize<T>(std::as_const(a).lower_half());
  module_forward<T>(b.g, t, Phase::replay, nullptr, "");
  sub_into<T>(a.upper_half(), std::as_const(t).view());
  BasicTensor<T> gt = materialize<T>(std::as_const(g).upper_half());
  module_invert_backward(b.g, t, gt, saved, trace, segment, 'G', prefix + ".G");
  t.release();
  add_into<T>(g.lower_half(), std::as_const(gt).view());
  gt.release();

  t = materialize<T>(std::as_const(a).upper_half());
  module_forward<T>(b.f, t, Phase::replay, nullptr, "");
  sub_into<T>(a.lower_half(), std::as_const(t).view());
  gt = materialize<T>(std::as_const(g).lower_half());
  module_invert_backward(b.f, t, gt, saved, trace, segment, 'F', prefix + ".F");
  t.release();
  add_into<T>(g.upper_half(), std::as_const(gt).view());
}

template <typename T>
void append_params(Layer<T>& layer, const std::string& prefix,
                   std::vector<std::pair<std::string, Param<T>*>>& out) {
  std::visit(
      [&](auto& l) {
        using L = std::decay_t<decltype(l)>;
        if constexpr (is_a<L, Conv<T>> || is_a<L, InvConv<T>> || is_a<L, InvBatchNorm<T>>) {
          for (Param<T>* p : l.params()) out.emplace_back(prefix + "." + p->name, p);
        }
      },
      layer);
}

}  // namespace

// ---- SequentialModel ---------------------------------------------------------------

namespace {

ArchSpec resolved(ArchSpec s) {
  resolve(s);
  return s;
}

template <typename T>
ClassifierHead<T> make_head(ArchSpec s, std::uint64_t seed) {
  const ResolvedSpec r = resolve(s);
  Pcg32 rng(seed, 2);
  return ClassifierHead<T>(s.head.c_in, s.num_classes, r.inputs.back().batch_mult, rng);
}

}  // namespace

template <typename T>
SequentialModel<T>::SequentialModel(ArchSpec spec, std::uint64_t seed)
    : spec_(resolved(std::move(spec))), head_(make_head<T>(spec_, seed)) {
  Pcg32 rng(seed, 1);
  for (const auto& seg : spec_.segments) {
    if (const auto* l = std::get_if<LayerSpec>(&seg)) {
      segments_.emplace_back(make_layer<T>(*l, rng));
      continue;
    }
    const auto& bs = std::get<BlockSpec>(seg);
    Block<T> b;
    b.kind = bs.kind;
    for (const auto& l : bs.module) b.f.layers.push_back(make_layer<T>(l, rng));
    if (bs.kind == BlockKind::reversible) {
      for (const auto& l : bs.module) b.g.layers.push_back(make_layer<T>(l, rng));
    }
    segments_.emplace_back(std::move(b));
  }
}

template <typename T>
std::vector<std::pair<std::string, Param<T>*>> SequentialModel<T>::named_params() {
  std::vector<std::pair<std::string, Param<T>*>> out;
  for (std::size_t i = 0; i < segments_.size(); ++i) {
    const std::string s = "s" + std::to_string(i);
    if (auto* l = std::get_if<Layer<T>>(&segments_[i])) {
      append_params(*l, s + "." + layer_kind(*l), out);
      continue;
    }
    auto& b = std::get<Block<T>>(segments_[i]);
    for (std::size_t j = 0; j < b.f.layers.size(); ++j) {
      append_params(b.f.layers[j], s + ".F" + std::to_string(j) + "." + layer_kind(b.f.layers[j]), out);
    }
    for (std::size_t j = 0; j < b.g.layers.size(); ++j) {
      append_params(b.g.layers[j], s + ".G" + std::to_string(j) + "." + layer_kind(b.g.layers[j]), out);
    }
  }
  for (Param<T>* p : head_.params()) out.emplace_back("head." + p->name, p);
  return out;
}

template <typename T>
std::vector<Param<T>*> SequentialModel<T>::params() {
  std::vector<Param<T>*> out;
  for (auto& [name, p] : named_params()) out.push_back(p);
  return out;
}

template <typename T>
std::vector<std::pair<std::string, BasicTensor<T>*>> SequentialModel<T>::named_buffers() {
  std::vector<std::pair<std::string, BasicTensor<T>*>> out;
  auto visit_layer = [&](Layer<T>& l, const std::string& name) {
    if (auto* bn = std::get_if<InvBatchNorm<T>>(&l)) {
      out.emplace_back(name + ".running_mean", &bn->running_mean());
      out.emplace_back(name + ".running_var", &bn->running_var());
    }
  };
  for (std::size_t i = 0; i < segments_.size(); ++i) {
    const std::string s = "s" + std::to_string(i);
    if (auto* l = std::get_if<Layer<T>>(&segments_[i])) {
      visit_layer(*l, s + ".bn");
      continue;
    }
    auto& b = std::get<Block<T>>(segments_[i]);
    for (std::size_t j = 0; j < b.f.layers.size(); ++j) visit_layer(b.f.layers[j], s + ".F" + std::to_string(j) + ".bn");
    for (std::size_t j = 0; j < b.g.layers.size(); ++j) visit_layer(b.g.layers[j], s + ".G" + std::to_string(j) + ".bn");
  }
  return out;
}

template <typename T>
void SequentialModel<T>::zero_grad() {
  for (Param<T>* p : params()) fill<T>(p->grad.view(), T(0));
}

template <typename T>
std::int64_t SequentialModel<T>::parameter_count() {
  std::int64_t n = 0;
  for (Param<T>* p : params()) n += p->value.numel();
  return n;
}

template <typename T>
std::int64_t SequentialModel<T>::stats_bytes() const {
  std::int64_t total = 0;
  auto count = [&](const Layer<T>& l) {
    if (const auto* bn = std::get_if<InvBatchNorm<T>>(&l)) {
      total += bn->cached_mean().bytes() + bn->cached_var().bytes();
    }
  };
  for (const auto& seg : segments_) {
    if (const auto* l = std::get_if<Layer<T>>(&seg)) {
      count(*l);
      continue;
    }
    const auto& b = std::get<Block<T>>(seg);
    for (const auto& l : b.f.layers) count(l);
    for (const auto& l : b.g.layers) count(l);
  }
  return total;
}

// ---- forward / backward ----------------------------------------------------------------

template <typename T>
BasicTensor<T> model_forward(SequentialModel<T>& model, BasicTensor<T> x, BackpropMode mode,
                             SavedState<T>& saved, bool trace) {
  check_mode(model.spec(), mode);
  if (x.shape().c != model.spec().input_channels) {
    throw ShapeError("model input " + x.shape().str() + " does not have " +
                     std::to_string(model.spec().input_channels) + " channels");
  }
  saved = SavedState<T>{};
  saved.mode = mode;
  Tracer<T> tracer{&saved};
  Tracer<T>* tr = trace ? &tracer : nullptr;
  BasicTensor<T>& a = x;
  auto& segs = model.segments();
  for (std::size_t i = 0; i < segs.size(); ++i) {
    const std::string name = "s" + std::to_string(i);
    if (tr != nullptr) tr->record(name, a);
    if (auto* l = std::get_if<Layer<T>>(&segs[i])) {
      if (stores_input(*l, mode)) forward_stored(*l, a, saved.stash, Phase::train);
      else forward_plain(*l, a, Phase::train);
      continue;
    }
    auto& b = std::get<Block<T>>(segs[i]);
    block_forward_impl(b, a, Phase::train, mode == BackpropMode::stored ? &saved.stash : nullptr, tr, name);
  }
  BasicTensor<T> logits = model.head().forward(a);
  saved.output = std::move(a);
  saved.valid = true;
  return logits;
}

template <typename T>
SnrTrace model_backward(SequentialModel<T>& model, SavedState<T>& saved, const BasicTensor<T>& grad_logits,
                        BackpropMode mode) {
  if (!saved.valid) throw StateError("backward: no saved state (forward not run, or already consumed)");
  if (saved.mode != mode) {
    throw StateError(std::string("backward: saved state comes from a ") + mode_name(saved.mode) +
                     " forward, not " + mode_name(mode));
  }
  saved.valid = false;
  SnrTrace trace;
  BasicTensor<T> g = model.head().backward(saved.output, grad_logits);
  BasicTensor<T> a;
  if (mode == BackpropMode::stored) saved.output.release();
  else a = std::move(saved.output);

  auto& segs = model.segments();
  for (std::size_t i = segs.size(); i-- > 0;) {
    const std::string name = "s" + std::to_string(i);
    const int seg = static_cast<int>(i);
    if (auto* l = std::get_if<Layer<T>>(&segs[i])) {
      if (mode == BackpropMode::stored) {
        backward_stored(*l, saved.stash, g);
      } else if (stores_input(*l, mode)) {
        BasicTensor<T> x = pop(saved.stash);
        a.release();
        backward_with_input(*l, x, g);
        a = std::move(x);
      } else {
        invert_backward(*l, a, g);
        if (!is_pool(*l)) trace_point(saved, trace, name, seg, '-', -1, false, a);
      }
      continue;
    }
    auto& b = std::get<Block<T>>(segs[i]);
    switch (mode) {
      case BackpropMode::stored: block_backward_stored(b, saved.stash, g); break;
      case BackpropMode::block_reversible: block_backward_recompute(b, a, g); break;
      case BackpropMode::hybrid: block_backward_hybrid(b, a, g, saved, trace, seg, name); break;
      case BackpropMode::layer_wise: throw ConfigError("layer_wise mode takes no blocks");
    }
    if (mode != BackpropMode::stored) trace_point(saved, trace, name, seg, '-', -1, true, a);
  }
  if (!saved.stash.empty()) throw StateError("backward: saved state was not fully consumed");
  saved.shadow.clear();
  saved.shadow_depth.clear();
  return trace;
}

template <typename T>
BasicTensor<T> model_predict(SequentialModel<T>& model, BasicTensor<T> x) {
  for (auto& seg : model.segments()) {
    if (auto* l = std::get_if<Layer<T>>(&seg)) forward_plain(*l, x, Phase::eval);
    else block_forward_(std::get<Block<T>>(seg), x, Phase::eval);
  }
  return model.head().forward(x);
}

template <typename T>
void block_forward_(Block<T>& block, BasicTensor<T>& x, Phase phase) {
  block_forward_impl<T>(block, x, phase, nullptr, nullptr, "");
}

template <typename T>
void block_inverse_(Block<T>& block, BasicTensor<T>& y) {
  if (block.kind != BlockKind::reversible) throw ConfigError("residual blocks have no analytic inverse");
  if (y.shape().c % 2 != 0) throw ShapeError("block inverse: odd channel count " + y.shape().str());
  BasicTensor<T> t = materialize<T>(std::as_const(y).lower_half());
  module_forward<T>(block.g, t, Phase::replay, nullptr, "");
  sub_into<T>(y.upper_half(), std::as_const(t).view());
  t.release();
  t = materialize<T>(std::as_const(y).upper_half());
  module_forward<T>(block.f, t, Phase::replay, nullptr, "");
  sub_into<T>(y.lower_half(), std::as_const(t).view());
}

template <typename T>
BasicTensor<T> block_inverse(Block<T>& block, const BasicTensor<T>& y) {
  BasicTensor<T> x = y;
  block_inverse_(block, x);
  return x;
}

#define REVTRAIN_INSTANTIATE_MODEL(T)                                                                   \
  template struct SavedState<T>;                                                                        \
  template class SequentialModel<T>;                                                                    \
  template BasicTensor<T> model_forward(SequentialModel<T>&, BasicTensor<T>, BackpropMode, SavedState<T>&, \
                                        bool);                                                          \
  template SnrTrace model_backward(SequentialModel<T>&, SavedState<T>&, const BasicTensor<T>&,         \
                                   BackpropMode);                                                       \
  template BasicTensor<T> model_predict(SequentialModel<T>&, BasicTensor<T>);                          \
  template void block_forward_(Block<T>&, BasicTensor<T>&, Phase);                                     \
  template void block_inverse_(Block<T>&, BasicTensor<T>&);                                            \
  template BasicTensor<T> block_inverse(Block<T>&, const BasicTensor<T>&);

REVTRAIN_INSTANTIATE_MODEL(float)
REVTRAIN_INSTANTIATE_MODEL(double)

}  // namespace revtrain
