#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "revtrain/rng.hpp"
#include "revtrain/tensor.hpp"

namespace revtrain {

inline constexpr std::int64_t kCifarSide = 32;
inline constexpr std::int64_t kCifarPixels = 3 * kCifarSide * kCifarSide;  // 3072
inline constexpr std::int64_t kCifarRecord = 1 + kCifarPixels;              // 3073
inline constexpr std::int64_t kCifarBatchRecords = 10000;
inline constexpr int kCifarClasses = 10;

// Raw records: one label byte, then 1024 R, 1024 G, 1024 B bytes, row-major.
struct Dataset {
  std::vector<std::uint8_t> pixels;  // size() * 3072
  std::vector<std::uint8_t> labels;

  std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }
  const std::uint8_t* image(std::int64_t i) const { return pixels.data() + i * kCifarPixels; }
  std::uint8_t* image(std::int64_t i) { return pixels.data() + i * kCifarPixels; }
  void append(const Dataset& other);
  // First n records (all when n <= 0 or n >= size()).
  Dataset head(std::int64_t n) const;
};

struct Normalization {
  std::array<double, 3> mean{0.0, 0.0, 0.0};  // in [0, 1] pixel units
  std::array<double, 3> std{1.0, 1.0, 1.0};

  // Per-channel statistics of a dataset.
  static Normalization of(const Dataset& d);
};

struct DatasetSource {
  Dataset train;
  Dataset test;
  Normalization norm;  // from the training split
};

// One binary batch file. Throws FormatError naming the file when its size is
// not a whole multiple of 3073 bytes (or not `expected_records` records when
// that is > 0), DomainError on labels >= 10.
Dataset read_cifar_batch(const std::string& path, std::int64_t expected_records = kCifarBatchRecords);
void write_cifar_batch(const std::string& path, const Dataset& d);

// data_batch_1..5.bin and test_batch.bin under `dir` (or dir/cifar-10-batches-bin).
DatasetSource load_cifar10(const std::string& dir);

struct AugmentOptions {
  bool enabled = true;
  bool flip = true;
  int pad = 4;
};

void flip_horizontal(std::uint8_t* image);
// Random horizontal flip (p = 0.5) and a random 32x32 crop of the image
// zero-padded by `pad` pixels, each image drawn from `rng`.
void augment(std::vector<std::uint8_t>& images, std::int64_t count, const AugmentOptions& opt, Pcg32& rng);

// Gathers records `idx` into a normalized (n, 3, 32, 32) tensor.
struct Batch {
  Tensor x;
  std::vector<int> labels;
};
Batch make_batch(const Dataset& d, const std::vector<std::int64_t>& idx, const Normalization& norm,
                 const AugmentOptions* augment_opt = nullptr, Pcg32* rng = nullptr);

// Learnable synthetic records in the CIFAR layout: each class has its own
// colour bias and oriented stripe pattern, with random phase, shift and noise.
Dataset synthetic_cifar(std::int64_t n, std::uint64_t seed, double noise = 0.35);
// Writes data_batch_1..5.bin (train_per_file records each) and test_batch.bin.
void write_synthetic_cifar(const std::string& dir, std::int64_t train_per_file, std::int64_t test_records,
                           std::uint64_t seed);

}  // namespace revtrain
