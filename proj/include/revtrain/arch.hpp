#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace revtrain {

enum class BackpropMode { stored, block_reversible, layer_wise, hybrid };

const char* mode_name(BackpropMode m);
// Accepts stored | block_reversible | blockrev | block | layer_wise | layerwise | hybrid.
BackpropMode parse_mode(const std::string& s);

enum class LayerKind { conv, bn, lrelu, invconv, pool_c, pool_b, maxpool, head };

const char* kind_name(LayerKind k);
LayerKind parse_kind(const std::string& s);
bool is_invertible(LayerKind k);
bool is_parameterized(LayerKind k);

struct LayerSpec {
  LayerKind kind = LayerKind::conv;
  std::int64_t c_in = 0;   // 0: inherit from the preceding layer
  std::int64_t c_out = 0;  // conv / head only
  int k = 3;
  int pool = 2;          // pooling factor; only 2 is supported
  double n = 2.0;        // leaky relu divisor
  double eps_i = 0.1;    // batch norm scale floor
  int line = 0;
};

enum class BlockKind { reversible, residual };

// Reversible blocks apply `module` as both F and G on half the channels;
// residual blocks apply it once on all channels: y = x + F(x).
struct BlockSpec {
  BlockKind kind = BlockKind::reversible;
  std::int64_t channels = 0;
  std::vector<LayerSpec> module;
  int line = 0;
};

using SegmentSpec = std::variant<LayerSpec, BlockSpec>;

// Published reference figures attached to a zoo spec.
struct GoldenTargets {
  std::optional<double> bytes_per_pixel;
  std::optional<double> weight_bytes;
  std::optional<double> total_bytes;
  std::int64_t bs = 32;
  std::int64_t h = 240;
  std::int64_t w = 240;
};

struct ArchSpec {
  std::string name = "model";
  std::int64_t input_channels = 3;
  std::int64_t height = 32;
  std::int64_t width = 32;
  std::int64_t num_classes = 10;
  int bpe = 4;
  BackpropMode mode = BackpropMode::stored;
  std::vector<SegmentSpec> segments;
  LayerSpec head{LayerKind::head};
  GoldenTargets golden;
};

// Extents of the activation entering a segment, per real input image.
struct Extent {
  std::int64_t c = 0;
  std::int64_t h = 0;
  std::int64_t w = 0;
  std::int64_t batch_mult = 1;  // 4^k after k batch poolings

  // Elements per input pixel relative to the input resolution (p_i * c_i * mult).
  double per_pixel(std::int64_t in_h, std::int64_t in_w) const {
    return static_cast<double>(batch_mult * c * h * w) / static_cast<double>(in_h * in_w);
  }
};

struct ResolvedSpec {
  std::vector<Extent> inputs;  // one per segment, plus the head input last
};

// Fills inherited channel counts and checks the shape chain for the given
// input resolution. Throws ConfigError naming the offending line.
ResolvedSpec resolve(ArchSpec& spec, std::int64_t h, std::int64_t w);
inline ResolvedSpec resolve(ArchSpec& spec) { return resolve(spec, spec.height, spec.width); }

// Checks that `mode` can run on the architecture; throws ConfigError otherwise.
void check_mode(const ArchSpec& spec, BackpropMode mode);

ArchSpec parse_arch(const std::string& text, const std::string& origin = "<string>");
ArchSpec load_arch(const std::string& path);

}  // namespace revtrain
