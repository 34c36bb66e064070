// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dmnn/rng.hpp"
#include "dmnn/tensor.hpp"

namespace dmnn {

class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Image classification dataset: channel-planar RGB u8 images with fine and
/// coarse labels.
struct Dataset {
  int width = 32;
  int height = 32;
  int channels = 3;
  std::vector<std::uint8_t> images;  // size() * channels*height*width
  std::vector<std::uint8_t> fine;
  std::vector<std::uint8_t> coarse;
  std::string split;

  std::size_t size() const { return fine.size(); }
  std::size_t image_bytes() const {
    return static_cast<std::size_t>(channels) * height * width;
  }
  const std::uint8_t* image(std::size_t i) const { return images.data() + i * image_bytes(); }
};

// CIFAR-100 binary layout: records of 3074 bytes, one coarse-label byte,
// one fine-label byte, then 3072 image bytes (R,G,B planes, row-major 32x32).
constexpr std::size_t kCifarRecordBytes = 3074;
constexpr std::size_t kCifarTrainRecords = 50000;
constexpr std::size_t kCifarTestRecords = 10000;

/// Parses a CIFAR-100-format binary file. expected_records > 0 pins the
/// exact file size; 0 accepts any whole number of records.
inline Dataset parse_cifar_file(const std::string& path, std::size_t expected_records,
                                const std::string& split) {
  std::ifstream is(path, std::ios::binary | std::ios::ate);
  if (!is) throw DataError("cannot open dataset file '" + path + "'");
  const auto actual = static_cast<std::size_t>(is.tellg());
  if (expected_records > 0) {
    const std::size_t expected = expected_records * kCifarRecordBytes;
    if (actual != expected) {
      throw DataError("'" + path + "' has wrong size: expected " + std::to_string(expected) +
                      " bytes (" + std::to_string(expected_records) + " records of " +
                      std::to_string(kCifarRecordBytes) + "), got " + std::to_string(actual));
    }
  } else if (actual % kCifarRecordBytes != 0) {
    throw DataError("'" + path + "' has wrong size: expected a multiple of " +
                    std::to_string(kCifarRecordBytes) + " bytes, got " + std::to_string(actual));
  }
  const std::size_t records = actual / kCifarRecordBytes;
  is.seekg(0);

  Dataset ds;
  ds.split = split;
  ds.images.resize(records * 3072);
  ds.fine.resize(records);
  ds.coarse.resize(records);
  std::vector<char> buf(kCifarRecordBytes);
  for (std::size_t i = 0; i < records; ++i) {
    is.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!is) throw DataError("'" + path + "' truncated at record " + std::to_string(i));
    ds.coarse[i] = static_cast<std::uint8_t>(buf[0]);
    ds.fine[i] = static_cast<std::uint8_t>(buf[1]);
    if (ds.coarse[i] >= 20 || ds.fine[i] >= 100) {
      throw DataError("'" + path + "' record " + std::to_string(i) + " has out-of-range labels (coarse " +
                      std::to_string(ds.coarse[i]) + ", fine " + std::to_string(ds.fine[i]) + ")");
    }
    std::copy(buf.begin() + 2, buf.end(),
              reinterpret_cast<char*>(ds.images.data() + i * 3072));
  }
  return ds;
}

/// Loads the standard train.bin / test.bin pair (50,000 / 10,000 records).
inline std::pair<Dataset, Dataset> load_cifar100(const std::string& dir) {
  namespace fs = std::filesystem;
  const std::string train_path = (fs::path(dir) / "train.bin").string();
  const std::string test_path = (fs::path(dir) / "test.bin").string();
  Dataset train = parse_cifar_file(train_path, kCifarTrainRecords, "train");
  Dataset test = parse_cifar_file(test_path, kCifarTestRecords, "test");
  return {std::move(train), std::move(test)};
}

/// Re-serialises record i to the original 3074-byte layout.
inline std::vector<std::uint8_t> serialize_cifar_record(const Dataset& ds, std::size_t i) {
  std::vector<std::uint8_t> rec(kCifarRecordBytes);
  rec[0] = ds.coarse[i];
  rec[1] = ds.fine[i];
  std::copy(ds.image(i), ds.image(i) + 3072, rec.begin() + 2);
  return rec;
}

/// Deterministic class-conditional Gaussian-blob images. Class k fixes the
/// blob centre (on a circle) and colour (k-indexed hue); pixel noise has
/// sigma 0.1 in the [0,1] intensity domain. Coarse labels equal fine labels.
inline Dataset synth_dataset(std::uint64_t seed, int classes = 10, int n_per_class = 64) {
  Rng rng(mix_seed(seed, 0x73796e7468ull));
  Dataset ds;
  ds.split = "synthetic";
  const int n = classes * n_per_class;
  ds.images.resize(static_cast<std::size_t>(n) * 3072);
  ds.fine.resize(static_cast<std::size_t>(n));
  ds.coarse.resize(static_cast<std::size_t>(n));

  auto class_color = [classes](int k, int c) {
    const double h = 2.0 * 3.14159265358979 * k / classes;
    const double v = c == 0 ? 0.5 + 0.5 * std::cos(h)
                            : c == 1 ? 0.5 + 0.5 * std::cos(h - 2.0943951)
                                     : 0.5 + 0.5 * std::cos(h - 4.1887902);
    return 0.25 + 0.75 * v;  // keep every channel visibly lit
  };

  int idx = 0;
  for (int k = 0; k < classes; ++k) {
    const double angle = 2.0 * 3.14159265358979 * k / classes;
    const double cx = 16.0 + 8.0 * std::cos(angle);
    const double cy = 16.0 + 8.0 * std::sin(angle);
    for (int s = 0; s < n_per_class; ++s, ++idx) {
      ds.fine[static_cast<std::size_t>(idx)] = static_cast<std::uint8_t>(k);
      ds.coarse[static_cast<std::size_t>(idx)] = static_cast<std::uint8_t>(k);
      std::uint8_t* img = ds.images.data() + static_cast<std::size_t>(idx) * 3072;
      for (int c = 0; c < 3; ++c) {
        const double col = class_color(k, c);
        for (int y = 0; y < 32; ++y) {
          for (int x = 0; x < 32; ++x) {
            const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
            double v = col * std::exp(-d2 / (2.0 * 4.0 * 4.0)) + 0.1 * rng.normal();
            v = std::clamp(v, 0.0, 1.0);
            img[(c * 32 + y) * 32 + x] = static_cast<std::uint8_t>(std::lround(v * 255.0));
          }
        }
      }
    }
  }
  return ds;
}

struct NormStats {
  std::array<float, 3> mean{0.f, 0.f, 0.f};
  std::array<float, 3> stddev{1.f, 1.f, 1.f};
};

/// Per-channel mean and standard deviation over the whole split, in the
/// [0,1] intensity domain.
inline NormStats compute_norm_stats(const Dataset& ds) {
  NormStats out;
  const std::size_t plane = static_cast<std::size_t>(ds.width) * ds.height;
  for (int c = 0; c < 3; ++c) {
    double sum = 0.0, sumsq = 0.0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const std::uint8_t* img = ds.image(i) + static_cast<std::size_t>(c) * plane;
      for (std::size_t p = 0; p < plane; ++p) {
        const double v = img[p] / 255.0;
        sum += v;
        sumsq += v * v;
      }
    }
    const double n = static_cast<double>(ds.size() * plane);
    const double mean = sum / n;
    out.mean[static_cast<std::size_t>(c)] = static_cast<float>(mean);
    out.stddev[static_cast<std::size_t>(c)] =
        static_cast<float>(std::sqrt(std::max(sumsq / n - mean * mean, 1e-8)));
  }
  return out;
}

/// Assembles a normalised float batch. Augmentation (zero-pad 4, random
/// 32x32 crop, horizontal flip with p=0.5) draws from the provided stream;
/// with augment=false the image passes through unchanged.
inline TensorF make_batch(const Dataset& ds, std::span<const int> indices, const NormStats& norm,
                          bool augment, Rng& rng) {
  const int B = static_cast<int>(indices.size());
  const int H = ds.height, W = ds.width;
  TensorF x = TensorF::zeros({B, 3, H, W});
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  constexpr int kPad = 4;

  for (int b = 0; b < B; ++b) {
    int dy = 0, dx = 0;
    bool flip = false;
    if (augment) {
      dy = static_cast<int>(rng.below(2 * kPad + 1)) - kPad;
      dx = static_cast<int>(rng.below(2 * kPad + 1)) - kPad;
      flip = rng.uniform() < 0.5;
    }
    const std::uint8_t* img = ds.image(static_cast<std::size_t>(indices[static_cast<std::size_t>(b)]));
    for (int c = 0; c < 3; ++c) {
      const float mean = norm.mean[static_cast<std::size_t>(c)];
      const float inv_std = 1.f / norm.stddev[static_cast<std::size_t>(c)];
      float* dst = x.data() + ((static_cast<std::size_t>(b) * 3 + c) * plane);
      const std::uint8_t* src = img + static_cast<std::size_t>(c) * plane;
      for (int y = 0; y < H; ++y) {
        const int sy = y + dy;
        for (int xx = 0; xx < W; ++xx) {
          const int sx0 = xx + dx;
          const int sx = flip ? W - 1 - sx0 : sx0;
          float v = 0.f;  // zero padding outside the source image
          if (sy >= 0 && sy < H && sx >= 0 && sx < W)
            v = static_cast<float>(src[static_cast<std::size_t>(sy) * W + sx]) / 255.f;
          dst[static_cast<std::size_t>(y) * W + xx] = (v - mean) * inv_std;
        }
      }
    }
  }
  return x;
}

inline std::vector<int> gather_labels(const Dataset& ds, std::span<const int> indices, bool coarse) {
  std::vector<int> out;
  out.reserve(indices.size());
  for (int i : indices)
    out.push_back(coarse ? ds.coarse[static_cast<std::size_t>(i)] : ds.fine[static_cast<std::size_t>(i)]);
  return out;
}

}  // namespace dmnn
