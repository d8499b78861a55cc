#include "revtrain/train.hpp"

#include <bit>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include "revtrain/allocator.hpp"
#include "revtrain/conv.hpp"
#include "revtrain/errors.hpp"
#include "revtrain/ops.hpp"

namespace revtrain {

namespace fs = std::filesystem;

template <typename T>
void sgd_step(const std::vector<Param<T>*>& params, std::vector<BasicTensor<T>>& velocity, double lr,
              double momentum, double weight_decay) {
  if (velocity.empty())
    for (const Param<T>* p : params) velocity.emplace_back(p->value.shape(), T(0));
  if (velocity.size() != params.size()) throw StateError("sgd_step: velocity does not match parameters");
  const T m = static_cast<T>(momentum);
  const T wd = static_cast<T>(weight_decay);
  const T rate = static_cast<T>(lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Param<T>& p = *params[i];
    BasicTensor<T>& v = velocity[i];
    if (v.shape() != p.value.shape()) throw ShapeError("sgd_step: velocity shape mismatch for " + p.name);
    T* theta = p.value.data();
    const T* g = p.grad.data();
    T* vel = v.data();
    for (std::int64_t k = 0; k < v.numel(); ++k) {
      vel[k] = m * vel[k] + g[k] + wd * theta[k];
      theta[k] -= rate * vel[k];
    }
  }
}

template void sgd_step<float>(const std::vector<Param<float>*>&, std::vector<Tensor>&, double, double, double);
template void sgd_step<double>(const std::vector<Param<double>*>&, std::vector<TensorD>&, double, double,
                               double);

namespace {

double lerp(double a, double b, double t) { return a + (b - a) * t; }

}  // namespace

double OneCycleSchedule::lr(std::int64_t step) const {
  const double lo = lr_max / div;
  const double t = total_steps <= 1 ? 0.0 : static_cast<double>(step) / static_cast<double>(total_steps - 1);
  if (t <= warmup) return lerp(lo, lr_max, warmup > 0.0 ? t / warmup : 1.0);
  if (t <= warmup + cooldown) return lerp(lr_max, lo, (t - warmup) / cooldown);
  const double tail = 1.0 - warmup - cooldown;
  return lerp(lo, lr_max / final_div, tail > 0.0 ? std::min(1.0, (t - warmup - cooldown) / tail) : 1.0);
}

double OneCycleSchedule::momentum(std::int64_t step) const {
  const double t = total_steps <= 1 ? 0.0 : static_cast<double>(step) / static_cast<double>(total_steps - 1);
  if (t <= warmup) return lerp(momentum_high, momentum_low, warmup > 0.0 ? t / warmup : 1.0);
  if (t <= warmup + cooldown) return lerp(momentum_low, momentum_high, (t - warmup) / cooldown);
  return momentum_high;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

bool parse_bool(const std::string& v, const std::string& where) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(where + ": expected a boolean, got '" + v + "'");
}

template <typename N>
N parse_number(const std::string& v, const std::string& where) {
  std::istringstream in(v);
  N out{};
  in >> out;
  if (!in || !in.eof()) throw ConfigError(where + ": expected a number, got '" + v + "'");
  return out;
}

std::string resolve_path(const std::string& p, const std::string& base) {
  if (p.empty() || base.empty() || fs::path(p).is_absolute()) return p;
  return (fs::path(base) / p).string();
}

}  // namespace

TrainConfig parse_train_config(const std::string& text, const std::string& origin, const std::string& base_dir) {
  TrainConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = origin + ":" + std::to_string(lineno);
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    if (key == "arch") {
      cfg.arch = resolve_path(val, base_dir);
    } else if (key == "mode") {
      cfg.mode = parse_mode(val);
    } else if (key == "data") {
      cfg.data_dir = resolve_path(val, base_dir);
    } else if (key == "epochs") {
      cfg.epochs = parse_number<int>(val, where);
    } else if (key == "batch_size") {
      cfg.batch_size = parse_number<std::int64_t>(val, where);
    } else if (key == "lr_max") {
      cfg.lr_max = parse_number<double>(val, where);
    } else if (key == "momentum_high") {
      cfg.momentum_high = parse_number<double>(val, where);
    } else if (key == "momentum_low") {
      cfg.momentum_low = parse_number<double>(val, where);
    } else if (key == "weight_decay") {
      cfg.weight_decay = parse_number<double>(val, where);
    } else if (key == "seed") {
      cfg.seed = parse_number<std::uint64_t>(val, where);
    } else if (key == "augment") {
      cfg.augment = parse_bool(val, where);
    } else if (key == "subset") {
      cfg.subset = parse_number<std::int64_t>(val, where);
    } else if (key == "test_subset") {
      cfg.test_subset = parse_number<std::int64_t>(val, where);
    } else if (key == "eval_batch") {
      cfg.eval_batch = parse_number<std::int64_t>(val, where);
    } else if (key == "timing") {
      cfg.timing = parse_bool(val, where);
    } else if (key == "eval_initial") {
      cfg.eval_initial = parse_bool(val, where);
    } else if (key == "eval_every") {
      cfg.eval_every = parse_number<int>(val, where);
    } else {
      throw ConfigError(where + ": unknown key '" + key + "'");
    }
  }
  if (cfg.epochs < 1) throw ConfigError(origin + ": epochs must be >= 1");
  if (cfg.batch_size < 2) throw ConfigError(origin + ": batch_size must be >= 2");
  if (cfg.eval_batch < 1) throw ConfigError(origin + ": eval_batch must be >= 1");
  if (cfg.eval_every < 1) throw ConfigError(origin + ": eval_every must be >= 1");
  if (!(cfg.lr_max >= 0.0)) throw ConfigError(origin + ": lr_max must be >= 0");
  if (cfg.subset < 0 || cfg.test_subset < 0) throw ConfigError(origin + ": subsets must be >= 0");
  if (!cfg.arch.empty()) {
    cfg.spec = load_arch(cfg.arch);
    cfg.has_spec = true;
  }
  return cfg;
}

TrainConfig load_train_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path + ": cannot open");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_train_config(ss.str(), path, fs::path(path).parent_path().string());
}

double evaluate(SequentialModel<float>& model, const Dataset& d, const Normalization& norm, std::int64_t batch,
                std::int64_t limit) {
  const std::int64_t n = limit > 0 ? std::min(limit, d.size()) : d.size();
  if (n == 0) return 0.0;
  std::int64_t correct = 0;
  std::vector<std::int64_t> idx;
  for (std::int64_t start = 0; start < n; start += batch) {
    idx.clear();
    for (std::int64_t i = start; i < std::min(n, start + batch); ++i) idx.push_back(i);
    Batch b = make_batch(d, idx, norm);
    const Tensor logits = model_predict(model, std::move(b.x));
    correct += softmax_cross_entropy<float>(logits, b.labels, nullptr).correct;
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(n);
}

namespace {

// Fisher-Yates on Pcg32::below, identical on every platform.
void shuffle(std::vector<std::int64_t>& v, Pcg32& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = rng.below(static_cast<std::uint32_t>(i));
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace

TrainResult train_run(const TrainConfig& cfg, const DatasetSource& data, const EpochCallback& on_epoch) {
  if (!cfg.has_spec) throw ConfigError("train: no architecture given");
  ArchSpec spec = cfg.spec;
  const BackpropMode mode = cfg.effective_mode();
  spec.mode = mode;
  check_mode(spec, mode);
  if (spec.input_channels != 3 || spec.height != kCifarSide || spec.width != kCifarSide)
    throw ConfigError("train: architecture input must be 3x32x32, got " + std::to_string(spec.input_channels) +
                      "x" + std::to_string(spec.height) + "x" + std::to_string(spec.width));

  const Dataset train = data.train.head(cfg.subset);
  if (train.size() < 2) throw ConfigError("train: fewer than two training records");

  TrainResult result;
  result.model = std::make_unique<SequentialModel<float>>(spec, cfg.seed);
  SequentialModel<float>& model = *result.model;
  if (cfg.eval_initial)
    result.initial_test_acc = evaluate(model, data.test, data.norm, cfg.eval_batch, cfg.test_subset);

  const std::int64_t steps_per_epoch = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
  OneCycleSchedule sched;
  sched.total_steps = steps_per_epoch * cfg.epochs;
  sched.lr_max = cfg.lr_max;
  sched.momentum_high = cfg.momentum_high;
  sched.momentum_low = cfg.momentum_low;

  Pcg32 order_rng(cfg.seed, 1);
  Pcg32 aug_rng(cfg.seed, 2);
  AugmentOptions aug;
  aug.enabled = cfg.augment;
  std::vector<Tensor> velocity;
  const std::vector<Param<float>*> params = model.params();

  std::vector<std::int64_t> order(static_cast<std::size_t>(train.size()));
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<std::int64_t>(i);

  std::int64_t step = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    shuffle(order, order_rng);
    MemoryCounter::instance().begin_measurement();
    ConvCounter::reset();
    double loss_sum = 0.0;
    std::int64_t correct = 0;
    std::int64_t seen = 0;
    std::vector<std::int64_t> idx;
    for (std::int64_t start = 0; start < train.size(); start += cfg.batch_size) {
      const std::int64_t end = std::min(train.size(), start + cfg.batch_size);
      if (end - start < 2) break;
      idx.assign(order.begin() + start, order.begin() + end);
      Batch b = make_batch(train, idx, data.norm, &aug, &aug_rng);
      model.zero_grad();
      SavedState<float> saved;
      Tensor logits = model_forward(model, std::move(b.x), mode, saved);
      Tensor glogits(logits.shape());
      const LossResult lr = softmax_cross_entropy<float>(logits, b.labels, &glogits);
      logits.release();
      const double rate = sched.lr(step);
      if (!std::isfinite(lr.loss)) {
        std::ostringstream msg;
        msg << "non-finite loss at step " << step << " (epoch " << epoch << ", lr " << rate << ")";
        throw DivergenceError(msg.str());
      }
      model_backward(model, saved, glogits, mode);
      glogits.release();
      sgd_step(params, velocity, rate, sched.momentum(step), cfg.weight_decay);
      const auto n = static_cast<std::int64_t>(idx.size());
      loss_sum += lr.loss * static_cast<double>(n);
      correct += lr.correct;
      seen += n;
      ++step;
    }
    EpochMetrics m;
    m.epoch = epoch;
    m.peak_bytes = MemoryCounter::instance().snapshot().peak_bytes;
    const ConvCounts counts = ConvCounter::snapshot();
    m.conv_applies = counts.forward + counts.backward_total();
    m.train_loss = loss_sum / static_cast<double>(seen);
    m.train_acc = 100.0 * static_cast<double>(correct) / static_cast<double>(seen);
    m.test_acc = epoch == cfg.epochs || epoch % cfg.eval_every == 0
                     ? evaluate(model, data.test, data.norm, cfg.eval_batch, cfg.test_subset)
                     : std::numeric_limits<double>::quiet_NaN();
    if (cfg.timing)
      m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.history.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  return result;
}

std::string metrics_csv_header() { return "epoch,train_loss,train_acc,test_acc,peak_bytes,conv_applies,seconds"; }

std::string metrics_csv_row(const EpochMetrics& m) {
  std::ostringstream out;
  out << m.epoch << ',' << std::setprecision(9) << m.train_loss << ',' << m.train_acc << ',';
  if (!std::isnan(m.test_acc)) out << m.test_acc;
  out << ','
      << m.peak_bytes << ',' << m.conv_applies << ',' << std::setprecision(4) << std::fixed << m.seconds;
  return out.str();
}

std::string metrics_csv(const std::vector<EpochMetrics>& rows) {
  std::string out = metrics_csv_header() + "\n";
  for (const auto& r : rows) out += metrics_csv_row(r) + "\n";
  return out;
}

namespace {

constexpr char kMagic[4] = {'R', 'V', 'T', 'C'};
constexpr std::uint32_t kVersion = 1;

template <typename U>
void put(std::ostream& out, U v) {
  static_assert(std::is_unsigned_v<U>);
  for (std::size_t i = 0; i < sizeof(U); ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <typename U>
U get(std::istream& in, const std::string& path) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    const int c = in.get();
    if (c == std::char_traits<char>::eof()) throw FormatError(path + ": truncated checkpoint");
    v |= static_cast<U>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return v;
}

using Bits32 = std::uint32_t;
using Bits64 = std::uint64_t;

template <typename T>
using BitsOf = std::conditional_t<sizeof(T) == 4, Bits32, Bits64>;

template <typename T>
std::vector<std::pair<std::string, BasicTensor<T>*>> checkpoint_tensors(SequentialModel<T>& model) {
  std::vector<std::pair<std::string, BasicTensor<T>*>> out;
  for (auto& [name, p] : model.named_params()) out.emplace_back(name, &p->value);
  for (auto& nb : model.named_buffers()) out.push_back(nb);
  return out;
}

}  // namespace

template <typename T>
void save_checkpoint(const std::string& path, SequentialModel<T>& model) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError(path + ": cannot write");
  const auto tensors = checkpoint_tensors(model);
  out.write(kMagic, 4);
  put<Bits32>(out, kVersion);
  put<Bits32>(out, static_cast<Bits32>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    put<Bits32>(out, static_cast<Bits32>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint8_t>(out, static_cast<std::uint8_t>(sizeof(T) == 4 ? 0 : 1));
    const Shape& s = t->shape();
    for (std::int64_t e : {s.bs, s.c, s.h, s.w}) put<Bits64>(out, static_cast<Bits64>(e));
    for (std::int64_t i = 0; i < t->numel(); ++i) put<BitsOf<T>>(out, std::bit_cast<BitsOf<T>>(t->data()[i]));
  }
  if (!out) throw FormatError(path + ": write failed");
}

template <typename T>
void load_checkpoint(const std::string& path, SequentialModel<T>& model) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path + ": cannot open");
  char magic[4] = {};
  in.read(magic, 4);
  if (!in || !std::equal(magic, magic + 4, kMagic)) throw FormatError(path + ": not a checkpoint");
  const auto version = get<Bits32>(in, path);
  if (version != kVersion) throw FormatError(path + ": unsupported version " + std::to_string(version));
  const auto tensors = checkpoint_tensors(model);
  const auto count = get<Bits32>(in, path);
  if (count != tensors.size())
    throw FormatError(path + ": holds " + std::to_string(count) + " tensors, model has " +
                      std::to_string(tensors.size()));
  // Read everything before touching the model so a bad file leaves it intact.
  std::vector<BasicTensor<T>> loaded;
  for (const auto& [name, t] : tensors) {
    const auto len = get<Bits32>(in, path);
    if (len > 4096) throw FormatError(path + ": implausible name length");
    std::string got(len, '\0');
    in.read(got.data(), len);
    if (!in) throw FormatError(path + ": truncated checkpoint");
    if (got != name) throw FormatError(path + ": expected tensor '" + name + "', found '" + got + "'");
    const auto dtype = get<std::uint8_t>(in, path);
    if (dtype != (sizeof(T) == 4 ? 0 : 1)) throw FormatError(path + ": dtype mismatch for " + name);
    Shape s;
    s.bs = static_cast<std::int64_t>(get<Bits64>(in, path));
    s.c = static_cast<std::int64_t>(get<Bits64>(in, path));
    s.h = static_cast<std::int64_t>(get<Bits64>(in, path));
    s.w = static_cast<std::int64_t>(get<Bits64>(in, path));
    if (s != t->shape())
      throw FormatError(path + ": shape " + s.str() + " for " + name + ", model expects " + t->shape().str());
    BasicTensor<T> v(s);
    for (std::int64_t i = 0; i < v.numel(); ++i) v.data()[i] = std::bit_cast<T>(get<BitsOf<T>>(in, path));
    loaded.push_back(std::move(v));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError(path + ": trailing bytes");
  for (std::size_t i = 0; i < tensors.size(); ++i) *tensors[i].second = std::move(loaded[i]);
}

template void save_checkpoint<float>(const std::string&, SequentialModel<float>&);
template void save_checkpoint<double>(const std::string&, SequentialModel<double>&);
template void load_checkpoint<float>(const std::string&, SequentialModel<float>&);
template void load_checkpoint<double>(const std::string&, SequentialModel<double>&);

}  // namespace revtrain
