#include "revtrain/arch.hpp"

#include <fstream>
#include <sstream>

#include "revtrain/errors.hpp"

namespace revtrain {

const char* mode_name(BackpropMode m) {
  switch (m) {
    case BackpropMode::stored: return "stored";
    case BackpropMode::block_reversible: return "block_reversible";
    case BackpropMode::layer_wise: return "layer_wise";
    case BackpropMode::hybrid: return "hybrid";
  }
  return "?";
}

BackpropMode parse_mode(const std::string& s) {
  if (s == "stored") return BackpropMode::stored;
  if (s == "block_reversible" || s == "blockrev" || s == "block") return BackpropMode::block_reversible;
  if (s == "layer_wise" || s == "layerwise") return BackpropMode::layer_wise;
  if (s == "hybrid") return BackpropMode::hybrid;
  throw ConfigError("unknown backprop mode '" + s + "'");
}

const char* kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::conv: return "conv";
    case LayerKind::bn: return "bn";
    case LayerKind::lrelu: return "lrelu";
    case LayerKind::invconv: return "invconv";
    case LayerKind::pool_c: return "pool_c";
    case LayerKind::pool_b: return "pool_b";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::head: return "head";
  }
  return "?";
}

LayerKind parse_kind(const std::string& s) {
  for (LayerKind k : {LayerKind::conv, LayerKind::bn, LayerKind::lrelu, LayerKind::invconv,
                      LayerKind::pool_c, LayerKind::pool_b, LayerKind::maxpool, LayerKind::head}) {
    if (s == kind_name(k)) return k;
  }
  throw ConfigError("unknown layer kind '" + s + "'");
}

bool is_invertible(LayerKind k) {
  return k == LayerKind::bn || k == LayerKind::lrelu || k == LayerKind::invconv ||
         k == LayerKind::pool_c || k == LayerKind::pool_b;
}

bool is_parameterized(LayerKind k) {
  return k == LayerKind::conv || k == LayerKind::bn || k == LayerKind::invconv || k == LayerKind::head;
}

namespace {

[[noreturn]] void fail_at(int line, const std::string& msg) {
  throw ConfigError("line " + std::to_string(line) + ": " + msg);
}

// Applies one layer to the running extent.
void step_layer(LayerSpec& l, Extent& e, bool in_module) {
  if (l.c_in == 0) l.c_in = e.c;
  if (l.c_in != e.c) {
    fail_at(l.line, std::string(kind_name(l.kind)) + " expects " + std::to_string(l.c_in) +
                        " input channels but receives " + std::to_string(e.c));
  }
  switch (l.kind) {
    case LayerKind::conv:
      if (l.c_out == 0) l.c_out = l.c_in;
      if (l.k < 1 || l.k % 2 == 0) fail_at(l.line, "conv kernel size must be odd");
      e.c = l.c_out;
      break;
    case LayerKind::bn:
      if (!(l.eps_i > 0)) fail_at(l.line, "bn eps_i must be > 0");
      l.c_out = l.c_in;
      break;
    case LayerKind::lrelu:
      if (!(l.n > 1.0)) fail_at(l.line, "lrelu n must be > 1");
      l.c_out = l.c_in;
      break;
    case LayerKind::invconv:
      if (l.c_in % 2 != 0) fail_at(l.line, "invconv needs an even channel count");
      if (l.k < 1 || l.k % 2 == 0) fail_at(l.line, "invconv kernel size must be odd");
      l.c_out = l.c_in;
      break;
    case LayerKind::pool_c:
    case LayerKind::pool_b:
    case LayerKind::maxpool:
      if (in_module) fail_at(l.line, "pooling is not allowed inside block modules");
      if (l.pool != 2) fail_at(l.line, "only pooling factor 2 is supported");
      if (e.h % 2 != 0 || e.w % 2 != 0) {
        fail_at(l.line, "pooling needs even extents, got " + std::to_string(e.h) + "x" +
                            std::to_string(e.w));
      }
      e.h /= 2;
      e.w /= 2;
      if (l.kind == LayerKind::pool_c) e.c *= 4;
      if (l.kind == LayerKind::pool_b) e.batch_mult *= 4;
      l.c_out = e.c;
      break;
    case LayerKind::head:
      fail_at(l.line, "head must be the last layer");
  }
}

}  // namespace

ResolvedSpec resolve(ArchSpec& spec, std::int64_t h, std::int64_t w) {
  if (spec.input_channels < 1 || h < 1 || w < 1) throw ConfigError("input extents must be >= 1");
  if (spec.bpe != 4 && spec.bpe != 8) throw ConfigError("bpe must be 4 or 8");
  ResolvedSpec r;
  Extent e{spec.input_channels, h, w, 1};
  for (auto& seg : spec.segments) {
    r.inputs.push_back(e);
    if (auto* l = std::get_if<LayerSpec>(&seg)) {
      step_layer(*l, e, false);
      continue;
    }
    auto& b = std::get<BlockSpec>(seg);
    if (b.channels == 0) b.channels = e.c;
    if (b.channels != e.c) {
      fail_at(b.line, "block expects " + std::to_string(b.channels) + " channels but receives " +
                          std::to_string(e.c));
    }
    if (b.module.empty()) fail_at(b.line, "block module is empty");
    Extent m = e;
    if (b.kind == BlockKind::reversible) {
      if (e.c % 2 != 0) fail_at(b.line, "reversible block needs an even channel count");
      m.c = e.c / 2;
    }
    const std::int64_t width = m.c;
    for (auto& l : b.module) {
      if (l.kind == LayerKind::head) fail_at(l.line, "head inside a block module");
      step_layer(l, m, true);
    }
    if (m.c != width) {
      fail_at(b.line, "block module must preserve its " + std::to_string(width) + " channels");
    }
  }
  r.inputs.push_back(e);
  auto& head = spec.head;
  if (head.c_in == 0) head.c_in = e.c;
  if (head.c_in != e.c) {
    fail_at(head.line, "head expects " + std::to_string(head.c_in) + " channels but receives " +
                           std::to_string(e.c));
  }
  if (head.c_out == 0) head.c_out = spec.num_classes;
  if (head.c_out != spec.num_classes) fail_at(head.line, "head c_out must equal num_classes");
  if (spec.num_classes < 2) throw ConfigError("num_classes must be >= 2");
  return r;
}

void check_mode(const ArchSpec& spec, BackpropMode mode) {
  if (mode == BackpropMode::stored) return;
  const std::string m = mode_name(mode);
  int reversible_blocks = 0;
  for (std::size_t i = 0; i < spec.segments.size(); ++i) {
    const auto& seg = spec.segments[i];
    if (const auto* b = std::get_if<BlockSpec>(&seg)) {
      if (b->kind == BlockKind::residual) {
        fail_at(b->line, m + " mode cannot run residual blocks (not invertible)");
      }
      if (mode == BackpropMode::layer_wise) fail_at(b->line, "layer_wise mode takes no blocks");
      ++reversible_blocks;
      if (mode == BackpropMode::hybrid) {
        for (const auto& l : b->module) {
          if (!is_invertible(l.kind)) {
            fail_at(l.line, std::string("hybrid block modules must be layer-wise invertible; '") +
                                kind_name(l.kind) + "' is not");
          }
        }
      }
      continue;
    }
    const auto& l = std::get<LayerSpec>(seg);
    if (mode == BackpropMode::block_reversible) continue;
    const bool stem = i == 0 && l.kind == LayerKind::conv;
    if (!is_invertible(l.kind) && !stem) {
      fail_at(l.line, m + " mode needs invertible layers; '" + kind_name(l.kind) +
                          "' is only allowed as the first layer (conv)");
    }
  }
  if ((mode == BackpropMode::block_reversible || mode == BackpropMode::hybrid) && reversible_blocks == 0) {
    throw ConfigError(m + " mode needs at least one reversible block");
  }
}

// ---- parser ---------------------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::int64_t to_int(const std::string& v, int line) {
  try {
    std::size_t used = 0;
    const long long x = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    fail_at(line, "expected an integer, got '" + v + "'");
  }
}

double to_double(const std::string& v, int line) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    fail_at(line, "expected a number, got '" + v + "'");
  }
}

struct Defaults {
  double n = 2.0;
  double eps_i = 0.1;
};

// Module items: kind[:param], e.g. "invconv:3", "lrelu:10", "bn:0.05".
LayerSpec parse_item(const std::string& raw, int line, const Defaults& d) {
  const std::string item = trim(raw);
  const auto colon = item.find(':');
  LayerSpec l;
  l.line = line;
  l.n = d.n;
  l.eps_i = d.eps_i;
  try {
    l.kind = parse_kind(trim(item.substr(0, colon)));
  } catch (const ConfigError& e) {
    fail_at(line, e.what());
  }
  if (colon != std::string::npos) {
    const std::string p = trim(item.substr(colon + 1));
    switch (l.kind) {
      case LayerKind::conv:
      case LayerKind::invconv: l.k = static_cast<int>(to_int(p, line)); break;
      case LayerKind::lrelu: l.n = to_double(p, line); break;
      case LayerKind::bn: l.eps_i = to_double(p, line); break;
      default: fail_at(line, "'" + item + "' takes no parameter");
    }
  }
  return l;
}

}  // namespace

ArchSpec parse_arch(const std::string& text, const std::string& origin) {
  ArchSpec spec;
  Defaults defaults;
  enum class Section { none, model, layer, block, golden } section = Section::none;
  LayerSpec layer;
  BlockSpec block;
  int repeat = 1;
  bool have_head = false;

  auto flush = [&]() {
    if (section == Section::layer) {
      if (layer.kind == LayerKind::head) {
        if (have_head) fail_at(layer.line, "duplicate head");
        spec.head = layer;
        have_head = true;
      } else {
        if (have_head) fail_at(layer.line, "layers after the head");
        for (int i = 0; i < repeat; ++i) spec.segments.emplace_back(layer);
      }
    } else if (section == Section::block) {
      if (have_head) fail_at(block.line, "blocks after the head");
      for (int i = 0; i < repeat; ++i) spec.segments.emplace_back(block);
    }
    repeat = 1;
  };

  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  bool kind_seen = false;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') fail_at(line_no, "unterminated section header");
      if (section == Section::layer || section == Section::block) {
        if (!kind_seen) fail_at(section == Section::layer ? layer.line : block.line, "section lacks 'kind'");
      }
      flush();
      const std::string name = trim(line.substr(1, line.size() - 2));
      kind_seen = false;
      if (name == "model") {
        section = Section::model;
      } else if (name == "layer") {
        section = Section::layer;
        layer = LayerSpec{};
        layer.line = line_no;
        layer.n = defaults.n;
        layer.eps_i = defaults.eps_i;
      } else if (name == "block") {
        section = Section::block;
        block = BlockSpec{};
        block.line = line_no;
      } else if (name == "golden") {
        section = Section::golden;
      } else {
        fail_at(line_no, "unknown section [" + name + "]");
      }
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail_at(line_no, "expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    auto unknown = [&]() { fail_at(line_no, "unknown key '" + key + "'"); };
    switch (section) {
      case Section::none: fail_at(line_no, "key outside of a section");
      case Section::model:
        if (key == "name") spec.name = val;
        else if (key == "input_channels") spec.input_channels = to_int(val, line_no);
        else if (key == "height") spec.height = to_int(val, line_no);
        else if (key == "width") spec.width = to_int(val, line_no);
        else if (key == "num_classes") spec.num_classes = to_int(val, line_no);
        else if (key == "bpe") spec.bpe = static_cast<int>(to_int(val, line_no));
        else if (key == "mode") {
          try {
            spec.mode = parse_mode(val);
          } catch (const ConfigError& e) {
            fail_at(line_no, e.what());
          }
        } else if (key == "lrelu_n") defaults.n = to_double(val, line_no);
        else if (key == "bn_eps_i") defaults.eps_i = to_double(val, line_no);
        else unknown();
        break;
      case Section::layer:
        if (key == "kind") {
          try {
            layer.kind = parse_kind(val);
          } catch (const ConfigError& e) {
            fail_at(line_no, e.what());
          }
          kind_seen = true;
        } else if (key == "c_in") layer.c_in = to_int(val, line_no);
        else if (key == "c_out") layer.c_out = to_int(val, line_no);
        else if (key == "k") layer.k = static_cast<int>(to_int(val, line_no));
        else if (key == "pool") layer.pool = static_cast<int>(to_int(val, line_no));
        else if (key == "n") layer.n = to_double(val, line_no);
        else if (key == "eps_i") layer.eps_i = to_double(val, line_no);
        else if (key == "repeat") repeat = static_cast<int>(to_int(val, line_no));
        else unknown();
        break;
      case Section::block:
        if (key == "kind") {
          if (val == "reversible") block.kind = BlockKind::reversible;
          else if (val == "residual") block.kind = BlockKind::residual;
          else fail_at(line_no, "block kind must be reversible or residual, got '" + val + "'");
          kind_seen = true;
        } else if (key == "channels") block.channels = to_int(val, line_no);
        else if (key == "module") {
          block.module.clear();
          std::istringstream items(val);
          std::string item;
          while (std::getline(items, item, ',')) block.module.push_back(parse_item(item, line_no, defaults));
        } else if (key == "repeat") repeat = static_cast<int>(to_int(val, line_no));
        else unknown();
        break;
      case Section::golden:
        if (key == "bytes_per_pixel") spec.golden.bytes_per_pixel = to_double(val, line_no);
        else if (key == "weight_bytes") spec.golden.weight_bytes = to_double(val, line_no);
        else if (key == "total_bytes") spec.golden.total_bytes = to_double(val, line_no);
        else if (key == "bs") spec.golden.bs = to_int(val, line_no);
        else if (key == "h") spec.golden.h = to_int(val, line_no);
        else if (key == "w") spec.golden.w = to_int(val, line_no);
        else unknown();
        break;
    }
    if (repeat < 1) fail_at(line_no, "repeat must be >= 1");
  }
  if ((section == Section::layer || section == Section::block) && !kind_seen) {
    fail_at(section == Section::layer ? layer.line : block.line, "section lacks 'kind'");
  }
  flush();
  if (!have_head) throw ConfigError(origin + ": architecture has no head layer");
  try {
    resolve(spec);
  } catch (const ConfigError& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  return spec;
}

ArchSpec load_arch(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open architecture file '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_arch(ss.str(), path);
}

}  // namespace revtrain
