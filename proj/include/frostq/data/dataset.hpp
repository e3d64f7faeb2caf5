// Copyright 2026 The FrostQ Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Image classification data: CIFAR-10 binary reader, a seeded synthetic
// stand-in with the same layout, and a deterministic batch loader.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "frostq/core/error.hpp"
#include "frostq/core/random.hpp"
#include "frostq/core/tensor.hpp"

namespace frostq::data {

/// Images kept as 8-bit CHW records; normalized on batch assembly.
struct Dataset {
  std::int64_t channels = 3, height = 32, width = 32;
  std::vector<std::uint8_t> pixels;
  std::vector<int> labels;
  int num_classes = 10;

  std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }
  std::int64_t record() const { return channels * height * width; }
  const std::uint8_t* image(std::int64_t i) const {
    return pixels.data() + i * record();
  }

  /// Records [begin, end).
  Dataset slice(std::int64_t begin, std::int64_t end) const {
    if (begin < 0 || end > size() || begin > end) {
      throw ContractError("Dataset::slice: [" + std::to_string(begin) + ", " +
                          std::to_string(end) + ") outside " + std::to_string(size()));
    }
    Dataset d = *this;
    d.pixels.assign(pixels.begin() + begin * record(), pixels.begin() + end * record());
    d.labels.assign(labels.begin() + begin, labels.begin() + end);
    return d;
  }
};

struct Splits {
  Dataset train, test;
};

struct Normalization {
  std::array<float, 3> mean{0.4914f, 0.4822f, 0.4465f};
  std::array<float, 3> std{0.2470f, 0.2435f, 0.2616f};
};

inline constexpr std::int64_t kCifarRecord = 1 + 3 * 32 * 32;
inline constexpr std::int64_t kCifarFileBytes = 10000 * kCifarRecord;  // 30730000

inline const char* kCifarHelp =
    "download https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz, extract it and "
    "point --data (or FROSTQ_CIFAR10_DIR) at the cifar-10-batches-bin directory";

/// Reads one binary batch file of 10000 records.
inline void read_cifar_file(const std::filesystem::path& path, Dataset& into) {
  std::error_code ec;
  if (!std::filesystem::exists(path, ec)) {
    throw IoError("CIFAR-10 file '" + path.string() + "' not found; " + kCifarHelp);
  }
  const auto bytes = std::filesystem::file_size(path, ec);
  if (ec || static_cast<std::int64_t>(bytes) != kCifarFileBytes) {
    throw IoError("CIFAR-10 file '" + path.string() + "' has " +
                  (ec ? std::string("unknown") : std::to_string(bytes)) + " bytes, expected " +
                  std::to_string(kCifarFileBytes));
  }
  std::ifstream f(path, std::ios::binary);
  std::vector<std::uint8_t> buf(static_cast<std::size_t>(kCifarFileBytes));
  if (!f.read(reinterpret_cast<char*>(buf.data()), kCifarFileBytes)) {
    throw IoError("CIFAR-10 file '" + path.string() + "': short read");
  }
  const std::size_t old = into.pixels.size();
  into.pixels.resize(old + 10000 * 3072);
  for (std::int64_t r = 0; r < 10000; ++r) {
    const std::uint8_t* rec = buf.data() + r * kCifarRecord;
    if (rec[0] > 9) {
      throw IoError("CIFAR-10 file '" + path.string() + "': record " + std::to_string(r) +
                    " has label " + std::to_string(rec[0]));
    }
    into.labels.push_back(rec[0]);
    std::copy(rec + 1, rec + kCifarRecord, into.pixels.begin() + old + r * 3072);
  }
}

/// data_batch_1..5.bin and test_batch.bin from `dir`.
inline Splits load_cifar10(const std::filesystem::path& dir) {
  std::error_code ec;
  if (!std::filesystem::is_directory(dir, ec)) {
    throw IoError("CIFAR-10 directory '" + dir.string() + "' does not exist; " + kCifarHelp);
  }
  Splits s;
  for (int i = 1; i <= 5; ++i) {
    read_cifar_file(dir / ("data_batch_" + std::to_string(i) + ".bin"), s.train);
  }
  read_cifar_file(dir / "test_batch.bin", s.test);
  return s;
}

/// Ten classes, each a colour scheme paired with a grating orientation, drawn
/// with random phase, offset, contrast and pixel noise. Learnable by a small
/// conv net but not separable from colour statistics alone.
inline Dataset synthetic_cifar(std::int64_t n, std::uint64_t seed, double noise = 56.0) {
  if (n < 0) throw ContractError("synthetic_cifar: n must be >= 0");
  Dataset d;
  d.pixels.resize(static_cast<std::size_t>(n * d.record()));
  d.labels.resize(static_cast<std::size_t>(n));
  // Class prototypes are fixed (independent of seed) so train and test
  // splits drawn with different seeds share a task.
  Rng proto(0x5eed'c1fa'0001ULL);
  std::array<std::array<double, 3>, 2> palette{};
  for (auto& p : palette)
    for (auto& v : p) v = proto.uniform(-1.0, 1.0);
  constexpr double kPi = 3.14159265358979323846;
  for (std::int64_t i = 0; i < n; ++i) {
    Rng r = Rng::derive(seed, static_cast<std::uint64_t>(i));
    const int label = static_cast<int>(r.below(10));
    d.labels[static_cast<std::size_t>(i)] = label;
    const double theta = kPi * (label % 5) / 5.0 + r.normal() * 0.12;
    const auto& col = palette[label / 5];
    const double freq = 2.0 * kPi / r.uniform(5.0, 8.0);
    const double phase = r.uniform(0.0, 2.0 * kPi);
    const double amp = r.uniform(20.0, 45.0);
    const double bright = r.uniform(-30.0, 30.0);
    const double tint = r.uniform(10.0, 25.0);
    const double ct = std::cos(theta), st = std::sin(theta);
    std::uint8_t* img = d.pixels.data() + i * d.record();
    for (int c = 0; c < 3; ++c) {
      for (int y = 0; y < 32; ++y) {
        for (int x = 0; x < 32; ++x) {
          const double g = std::sin(freq * (ct * x + st * y) + phase);
          double v = 128.0 + bright + tint * col[c] + amp * g * (0.6 + 0.4 * col[c]) +
                     noise * r.normal();
          v = std::clamp(v, 0.0, 255.0);
          img[(c * 32 + y) * 32 + x] = static_cast<std::uint8_t>(std::lround(v));
        }
      }
    }
  }
  return d;
}

/// Synthetic train/test pair.
inline Splits synthetic_splits(std::int64_t train, std::int64_t test, std::uint64_t seed) {
  return {synthetic_cifar(train, seed * 2 + 1), synthetic_cifar(test, seed * 2 + 2)};
}

struct Batch {
  Tensor<float> images;
  std::vector<int> labels;
};

struct LoaderOptions {
  std::int64_t batch_size = 64;
  bool shuffle = true;
  bool augment = false;  // 4-pixel padded random crop + horizontal flip
  bool drop_last = true;
  std::uint64_t seed = 0;
  Normalization norm{};
};

/// Random-access batches: batch(epoch, i) depends only on (seed, epoch, i),
/// so runs replay bit-for-bit.
class BatchLoader {
 public:
  BatchLoader(const Dataset& data, LoaderOptions opt) : data_(&data), opt_(opt) {
    if (opt_.batch_size < 1) throw ContractError("BatchLoader: batch_size must be >= 1");
    if (data.channels != 3) throw ContractError("BatchLoader: expects 3-channel images");
  }

  std::int64_t num_batches() const {
    const std::int64_t n = data_->size(), b = opt_.batch_size;
    return opt_.drop_last ? n / b : (n + b - 1) / b;
  }

  const Dataset& dataset() const { return *data_; }
  const LoaderOptions& options() const { return opt_; }

  /// Sample order for an epoch.
  std::vector<std::int64_t> order(std::int64_t epoch) const {
    std::vector<std::int64_t> idx(static_cast<std::size_t>(data_->size()));
    std::iota(idx.begin(), idx.end(), 0);
    if (opt_.shuffle) {
      Rng r = Rng::derive(opt_.seed, static_cast<std::uint64_t>(epoch));
      for (std::size_t i = idx.size(); i > 1; --i) {
        std::swap(idx[i - 1], idx[static_cast<std::size_t>(r.below(i))]);
      }
    }
    return idx;
  }

  Batch batch(std::int64_t epoch, std::int64_t i) const {
    if (i < 0 || i >= num_batches()) {
      throw ContractError("BatchLoader: batch " + std::to_string(i) + " outside epoch of " +
                          std::to_string(num_batches()));
    }
    if (cached_epoch_ != epoch) {
      order_ = order(epoch);
      cached_epoch_ = epoch;
    }
    const std::int64_t b0 = i * opt_.batch_size;
    const std::int64_t bn = std::min(opt_.batch_size, data_->size() - b0);
    const std::int64_t h = data_->height, w = data_->width, plane = h * w;
    Batch out;
    out.images = Tensor<float>({bn, 3, h, w});
    out.labels.resize(static_cast<std::size_t>(bn));
    Rng aug = Rng::derive(opt_.seed ^ 0xa5a5'5a5a'1234'4321ULL,
                          static_cast<std::uint64_t>(epoch) * 1000003ULL +
                              static_cast<std::uint64_t>(i));
    for (std::int64_t k = 0; k < bn; ++k) {
      const std::int64_t src = order_[static_cast<std::size_t>(b0 + k)];
      out.labels[static_cast<std::size_t>(k)] = data_->labels[static_cast<std::size_t>(src)];
      const std::uint8_t* img = data_->image(src);
      std::int64_t dy = 0, dx = 0;
      bool flip = false;
      if (opt_.augment) {
        dy = static_cast<std::int64_t>(aug.below(9)) - 4;
        dx = static_cast<std::int64_t>(aug.below(9)) - 4;
        flip = aug.bernoulli(0.5);
      }
      float* dst = out.images.data() + k * 3 * plane;
      for (int c = 0; c < 3; ++c) {
        const float m = opt_.norm.mean[c] * 255.f, s = 1.f / (opt_.norm.std[c] * 255.f);
        const float zero = (0.f - m) * s;  // padding value after normalization
        for (std::int64_t y = 0; y < h; ++y) {
          const std::int64_t sy = y + dy;
          for (std::int64_t x = 0; x < w; ++x) {
            const std::int64_t sx = (flip ? w - 1 - x : x) + dx;
            float v = zero;
            if (sy >= 0 && sy < h && sx >= 0 && sx < w) {
              v = (static_cast<float>(img[c * plane + sy * w + sx]) - m) * s;
            }
            dst[c * plane + y * w + x] = v;
          }
        }
      }
    }
    return out;
  }

 private:
  const Dataset* data_;
  LoaderOptions opt_;
  mutable std::int64_t cached_epoch_ = -1;
  mutable std::vector<std::int64_t> order_;
};

}  // namespace frostq::data
