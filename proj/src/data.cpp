#include "revtrain/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include "revtrain/errors.hpp"

namespace revtrain {

namespace fs = std::filesystem;

void Dataset::append(const Dataset& other) {
  pixels.insert(pixels.end(), other.pixels.begin(), other.pixels.end());
  labels.insert(labels.end(), other.labels.begin(), other.labels.end());
}

Dataset Dataset::head(std::int64_t n) const {
  if (n <= 0 || n >= size()) return *this;
  Dataset out;
  out.labels.assign(labels.begin(), labels.begin() + n);
  out.pixels.assign(pixels.begin(), pixels.begin() + n * kCifarPixels);
  return out;
}

Normalization Normalization::of(const Dataset& d) {
  Normalization out;
  if (d.size() == 0) return out;
  const std::int64_t plane = kCifarSide * kCifarSide;
  for (int c = 0; c < 3; ++c) {
    double s = 0.0;
    double s2 = 0.0;
    for (std::int64_t i = 0; i < d.size(); ++i) {
      const std::uint8_t* p = d.image(i) + c * plane;
      for (std::int64_t k = 0; k < plane; ++k) {
        const double v = p[k] / 255.0;
        s += v;
        s2 += v * v;
      }
    }
    const double n = static_cast<double>(d.size() * plane);
    out.mean[c] = s / n;
    out.std[c] = std::sqrt(std::max(s2 / n - out.mean[c] * out.mean[c], 1e-12));
  }
  return out;
}

Dataset read_cifar_batch(const std::string& path, std::int64_t expected_records) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path + ": cannot open");
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto bytes = static_cast<std::int64_t>(raw.size());
  const std::int64_t expected = expected_records > 0 ? expected_records * kCifarRecord : -1;
  if (bytes == 0 || bytes % kCifarRecord != 0 || (expected > 0 && bytes != expected)) {
    std::ostringstream msg;
    msg << path << ": expected ";
    if (expected > 0)
      msg << expected << " bytes (" << expected_records << " records of " << kCifarRecord << ")";
    else
      msg << "a non-zero multiple of " << kCifarRecord << " bytes";
    msg << ", got " << bytes;
    throw FormatError(msg.str());
  }
  const std::int64_t n = bytes / kCifarRecord;
  Dataset d;
  d.labels.resize(static_cast<std::size_t>(n));
  d.pixels.resize(static_cast<std::size_t>(n * kCifarPixels));
  for (std::int64_t i = 0; i < n; ++i) {
    const char* rec = raw.data() + i * kCifarRecord;
    const auto label = static_cast<std::uint8_t>(rec[0]);
    if (label >= kCifarClasses)
      throw FormatError(path + ": record " + std::to_string(i) + " has label " + std::to_string(label));
    d.labels[static_cast<std::size_t>(i)] = label;
    std::copy(rec + 1, rec + kCifarRecord, reinterpret_cast<char*>(d.image(i)));
  }
  return d;
}

void write_cifar_batch(const std::string& path, const Dataset& d) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError(path + ": cannot write");
  for (std::int64_t i = 0; i < d.size(); ++i) {
    out.put(static_cast<char>(d.labels[static_cast<std::size_t>(i)]));
    out.write(reinterpret_cast<const char*>(d.image(i)), kCifarPixels);
  }
  if (!out) throw FormatError(path + ": write failed");
}

DatasetSource load_cifar10(const std::string& dir) {
  fs::path root(dir);
  if (!fs::exists(root / "test_batch.bin") && fs::exists(root / "cifar-10-batches-bin"))
    root /= "cifar-10-batches-bin";
  DatasetSource src;
  for (int i = 1; i <= 5; ++i) {
    const fs::path p = root / ("data_batch_" + std::to_string(i) + ".bin");
    if (!fs::exists(p)) throw FormatError(p.string() + ": missing");
    src.train.append(read_cifar_batch(p.string(), 0));
  }
  const fs::path t = root / "test_batch.bin";
  if (!fs::exists(t)) throw FormatError(t.string() + ": missing");
  src.test = read_cifar_batch(t.string(), 0);
  src.norm = Normalization::of(src.train);
  return src;
}

void flip_horizontal(std::uint8_t* image) {
  for (std::int64_t c = 0; c < 3; ++c)
    for (std::int64_t y = 0; y < kCifarSide; ++y) {
      std::uint8_t* row = image + (c * kCifarSide + y) * kCifarSide;
      std::reverse(row, row + kCifarSide);
    }
}

namespace {

// Shift by (dy, dx) with zero fill: out(y, x) = in(y + dy, x + dx).
void shift(std::uint8_t* image, int dy, int dx, std::vector<std::uint8_t>& scratch) {
  if (dy == 0 && dx == 0) return;
  scratch.assign(image, image + kCifarPixels);
  const auto s = static_cast<int>(kCifarSide);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x) {
        const int sy = y + dy;
        const int sx = x + dx;
        const bool inside = sy >= 0 && sy < s && sx >= 0 && sx < s;
        image[(c * s + y) * s + x] = inside ? scratch[static_cast<std::size_t>((c * s + sy) * s + sx)] : 0;
      }
}

}  // namespace

void augment(std::vector<std::uint8_t>& images, std::int64_t count, const AugmentOptions& opt, Pcg32& rng) {
  if (!opt.enabled) return;
  if (static_cast<std::int64_t>(images.size()) < count * kCifarPixels)
    throw ShapeError("augment: buffer holds fewer than " + std::to_string(count) + " images");
  std::vector<std::uint8_t> scratch;
  const auto span = static_cast<std::uint32_t>(2 * opt.pad + 1);
  for (std::int64_t i = 0; i < count; ++i) {
    std::uint8_t* img = images.data() + i * kCifarPixels;
    const bool flip = rng.below(2) == 1;
    const int dy = static_cast<int>(rng.below(span)) - opt.pad;
    const int dx = static_cast<int>(rng.below(span)) - opt.pad;
    if (opt.flip && flip) flip_horizontal(img);
    shift(img, dy, dx, scratch);
  }
}

Batch make_batch(const Dataset& d, const std::vector<std::int64_t>& idx, const Normalization& norm,
                 const AugmentOptions* augment_opt, Pcg32* rng) {
  const auto n = static_cast<std::int64_t>(idx.size());
  if (n == 0) throw ShapeError("make_batch: empty index list");
  std::vector<std::uint8_t> raw(static_cast<std::size_t>(n * kCifarPixels));
  Batch b;
  b.labels.resize(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    const std::int64_t r = idx[static_cast<std::size_t>(i)];
    if (r < 0 || r >= d.size()) throw ShapeError("make_batch: record " + std::to_string(r) + " out of range");
    std::copy(d.image(r), d.image(r) + kCifarPixels, raw.begin() + i * kCifarPixels);
    b.labels[static_cast<std::size_t>(i)] = d.labels[static_cast<std::size_t>(r)];
  }
  if (augment_opt != nullptr && augment_opt->enabled) {
    if (rng == nullptr) throw StateError("make_batch: augmentation needs a generator");
    augment(raw, n, *augment_opt, *rng);
  }
  b.x = Tensor(checked_shape(n, 3, kCifarSide, kCifarSide));
  const std::int64_t plane = kCifarSide * kCifarSide;
  float* out = b.x.data();
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t c = 0; c < 3; ++c) {
      const double m = norm.mean[static_cast<std::size_t>(c)];
      const double s = norm.std[static_cast<std::size_t>(c)];
      const std::uint8_t* p = raw.data() + i * kCifarPixels + c * plane;
      float* o = out + (i * 3 + c) * plane;
      for (std::int64_t k = 0; k < plane; ++k) o[k] = static_cast<float>((p[k] / 255.0 - m) / s);
    }
  return b;
}

Dataset synthetic_cifar(std::int64_t n, std::uint64_t seed, double noise) {
  if (n <= 0) throw DomainError("synthetic_cifar: record count must be positive");
  // Class prototypes come from a fixed stream so train and test files agree.
  Pcg32 proto(0x5eed, 7);
  std::array<std::array<double, 3>, kCifarClasses> colour{};
  std::array<double, kCifarClasses> angle{};
  std::array<double, kCifarClasses> freq{};
  for (int k = 0; k < kCifarClasses; ++k) {
    for (auto& v : colour[static_cast<std::size_t>(k)]) v = proto.uniform() * 2.0 - 1.0;
    angle[static_cast<std::size_t>(k)] = std::numbers::pi * k / kCifarClasses;
    freq[static_cast<std::size_t>(k)] = 2.0 + (k % 3);
  }
  Pcg32 rng(seed, 11);
  Dataset d;
  d.labels.resize(static_cast<std::size_t>(n));
  d.pixels.resize(static_cast<std::size_t>(n * kCifarPixels));
  const auto s = static_cast<int>(kCifarSide);
  for (std::int64_t i = 0; i < n; ++i) {
    const auto k = static_cast<std::size_t>(rng.below(kCifarClasses));
    d.labels[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(k);
    const double phase = 2.0 * std::numbers::pi * rng.uniform();
    const double a = angle[k] + 0.15 * rng.normal();
    const double cx = std::cos(a) * freq[k] * 2.0 * std::numbers::pi / s;
    const double cy = std::sin(a) * freq[k] * 2.0 * std::numbers::pi / s;
    const double bright = 0.15 * rng.normal();
    std::uint8_t* img = d.image(static_cast<std::int64_t>(i));
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
          const double stripe = std::sin(cx * x + cy * y + phase);
          const double v = 0.5 + bright + 0.12 * colour[k][static_cast<std::size_t>(c)] + 0.22 * stripe +
                           noise * 0.25 * rng.normal();
          img[(c * s + y) * s + x] = static_cast<std::uint8_t>(std::clamp(std::lround(v * 255.0), 0L, 255L));
        }
  }
  return d;
}

void write_synthetic_cifar(const std::string& dir, std::int64_t train_per_file, std::int64_t test_records,
                           std::uint64_t seed) {
  fs::create_directories(dir);
  for (int i = 1; i <= 5; ++i)
    write_cifar_batch((fs::path(dir) / ("data_batch_" + std::to_string(i) + ".bin")).string(),
                      synthetic_cifar(train_per_file, seed * 16 + static_cast<std::uint64_t>(i)));
  write_cifar_batch((fs::path(dir) / "test_batch.bin").string(), synthetic_cifar(test_records, seed * 16 + 15));
}

}  // namespace revtrain
