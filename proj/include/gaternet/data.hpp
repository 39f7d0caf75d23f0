#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "gaternet/rng.hpp"
#include "gaternet/tensor.hpp"

namespace gaternet {

// Images stored contiguously as N x C x H x W floats.
struct Dataset {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> images;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t image_size() const { return channels * height * width; }
  std::span<const float> image(std::size_t i) const {
    return {images.data() + i * image_size(), image_size()};
  }
  void append(const Dataset& other);
  // Batch tensor from the listed sample indices.
  Tensor batch(std::span<const std::size_t> indices) const;
  std::vector<int> batch_labels(std::span<const std::size_t> indices) const;
};

struct Normalization {
  std::vector<float> mean;  // per channel
  std::vector<float> std;   // per channel, > 0

  void validate(std::size_t channels) const;
};

// In place: (x - mean[c]) / std[c].
void normalize(Dataset& data, const Normalization& norm);

constexpr std::size_t kCifarImageBytes = 3 * 32 * 32;
constexpr std::size_t kCifarRecordBytes = 1 + kCifarImageBytes;  // 3073

// Records of 1 label byte + 3072 pixel bytes (R plane, G plane, B plane,
// each row-major). Pixels are scaled to [0, 1]; normalization is separate.
// An empty file yields an empty dataset and a warning on stderr.
Dataset decode_cifar10_binary(std::string_view bytes, const std::string& source);
Dataset load_cifar10_binary(const std::filesystem::path& path);

struct SyntheticOptions {
  std::size_t num_classes = 10;
  std::size_t channels = 3;
  std::size_t image_size = 16;
  double noise = 1.5;
};

// Class-conditional oriented gratings with a class-specific colour mix,
// random phase and contrast, plus pixel noise. Labels cycle through the
// classes before shuffling, so counts are balanced within one.
Dataset synthetic_dataset(std::uint64_t seed, std::size_t n, const SyntheticOptions& options);

struct SyntheticSplit {
  Dataset train;
  Dataset eval;
};

// Independent train and eval draws from one seed.
SyntheticSplit synthetic_split(std::uint64_t seed, std::size_t train_size, std::size_t eval_size,
                               const SyntheticOptions& options);

struct AugmentFlags {
  bool random_crop = false;  // zero-pad by `pad`, crop back to the input size
  bool mirror = false;       // horizontal flip with probability 0.5
  std::size_t pad = 4;
};

struct AugmentDraw {
  std::size_t offset_y = 0;  // in [0, 2 * pad]
  std::size_t offset_x = 0;
  bool flip = false;
};

AugmentDraw draw_augment(Rng& rng, const AugmentFlags& flags);
std::vector<float> apply_augment(std::span<const float> image, std::size_t channels,
                                 std::size_t height, std::size_t width, const AugmentDraw& draw,
                                 const AugmentFlags& flags);
std::vector<float> augment(std::span<const float> image, std::size_t channels, std::size_t height,
                           std::size_t width, Rng& rng, const AugmentFlags& flags);

}  // namespace gaternet
