#include "gaternet/data.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numbers>
#include <numeric>

#include "gaternet/errors.hpp"
#include "gaternet/io.hpp"

namespace gaternet {

void Dataset::append(const Dataset& other) {
  if (other.size() == 0) return;
  if (size() == 0 && images.empty()) {
    channels = other.channels;
    height = other.height;
    width = other.width;
  } else if (channels != other.channels || height != other.height || width != other.width) {
    throw ShapeError("cannot append datasets with different image shapes");
  }
  images.insert(images.end(), other.images.begin(), other.images.end());
  labels.insert(labels.end(), other.labels.begin(), other.labels.end());
}

Tensor Dataset::batch(std::span<const std::size_t> indices) const {
  std::vector<float> out(indices.size() * image_size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto img = image(indices[i]);
    std::copy(img.begin(), img.end(), out.begin() + i * image_size());
  }
  return Tensor({indices.size(), channels, height, width}, std::move(out));
}

std::vector<int> Dataset::batch_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) out[i] = labels[indices[i]];
  return out;
}

void Normalization::validate(std::size_t channels) const {
  if (mean.size() != channels || std.size() != channels) {
    throw ConfigError("normalization needs one mean and std per channel (" +
                      std::to_string(channels) + ")");
  }
  for (float s : std)
    if (!(s > 0.0f)) throw ConfigError("normalization std must be positive");
}

void normalize(Dataset& data, const Normalization& norm) {
  norm.validate(data.channels);
  const std::size_t plane = data.height * data.width;
  for (std::size_t i = 0; i < data.size(); ++i)
    for (std::size_t c = 0; c < data.channels; ++c) {
      float* p = data.images.data() + (i * data.channels + c) * plane;
      for (std::size_t k = 0; k < plane; ++k) p[k] = (p[k] - norm.mean[c]) / norm.std[c];
    }
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary

Dataset decode_cifar10_binary(std::string_view bytes, const std::string& source) {
  Dataset data;
  data.channels = 3;
  data.height = 32;
  data.width = 32;
  if (bytes.empty()) {
    std::cerr << "warning: " << source << " is empty; no CIFAR-10 records loaded\n";
    return data;
  }
  if (bytes.size() % kCifarRecordBytes != 0) {
    const std::size_t offset = bytes.size() - bytes.size() % kCifarRecordBytes;
    throw FormatError(source + ": truncated record at byte offset " + std::to_string(offset) + " (" +
                      std::to_string(bytes.size() % kCifarRecordBytes) + " of " +
                      std::to_string(kCifarRecordBytes) + " bytes)");
  }
  const std::size_t n = bytes.size() / kCifarRecordBytes;
  data.labels.resize(n);
  data.images.resize(n * kCifarImageBytes);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t offset = i * kCifarRecordBytes;
    const auto label = static_cast<unsigned char>(bytes[offset]);
    if (label >= 10) {
      throw FormatError(source + ": label " + std::to_string(label) + " at byte offset " +
                        std::to_string(offset) + " is not in [0, 10)");
    }
    data.labels[i] = label;
    for (std::size_t k = 0; k < kCifarImageBytes; ++k) {
      data.images[i * kCifarImageBytes + k] =
          static_cast<float>(static_cast<unsigned char>(bytes[offset + 1 + k])) / 255.0f;
    }
  }
  return data;
}

Dataset load_cifar10_binary(const std::filesystem::path& path) {
  return decode_cifar10_binary(read_file(path), path.string());
}

// ---------------------------------------------------------------------------
// Synthetic data

namespace {

void render(const SyntheticOptions& opt, int label, Rng& rng, float* out) {
  const double k = label;
  const double classes = static_cast<double>(opt.num_classes);
  const double theta = std::numbers::pi * k / classes;
  const double freq = 2.0 + 1.5 * static_cast<double>(label % 2);
  const double phase = rng.uniform() * 2.0 * std::numbers::pi;
  const double contrast = 0.7 + 0.6 * rng.uniform();
  const double s = static_cast<double>(opt.image_size);
  const double ct = std::cos(theta), st = std::sin(theta);
  for (std::size_t c = 0; c < opt.channels; ++c) {
    const double tint =
        0.55 + 0.45 * std::cos(2.0 * std::numbers::pi * (k / classes + double(c) / double(opt.channels)));
    for (std::size_t y = 0; y < opt.image_size; ++y)
      for (std::size_t x = 0; x < opt.image_size; ++x) {
        const double u = (double(x) * ct + double(y) * st) / s;
        const double v = contrast * tint * std::sin(2.0 * std::numbers::pi * freq * u + phase);
        out[(c * opt.image_size + y) * opt.image_size + x] =
            static_cast<float>(v + opt.noise * rng.normal());
      }
  }
}

}  // namespace

Dataset synthetic_dataset(std::uint64_t seed, std::size_t n, const SyntheticOptions& options) {
  if (options.num_classes == 0 || n < options.num_classes) {
    throw ConfigError("synthetic dataset needs n >= num_classes >= 1");
  }
  if (options.channels == 0 || options.image_size == 0) {
    throw ConfigError("synthetic dataset needs positive channels and image size");
  }
  Rng rng(seed);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % options.num_classes);
  std::shuffle(labels.begin(), labels.end(), rng.engine());

  Dataset data;
  data.channels = options.channels;
  data.height = options.image_size;
  data.width = options.image_size;
  data.labels = labels;
  data.images.resize(n * data.image_size());
  for (std::size_t i = 0; i < n; ++i) render(options, labels[i], rng, data.images.data() + i * data.image_size());
  return data;
}

SyntheticSplit synthetic_split(std::uint64_t seed, std::size_t train_size, std::size_t eval_size,
                               const SyntheticOptions& options) {
  Rng root(seed);
  const std::uint64_t train_seed = root.engine()();
  const std::uint64_t eval_seed = root.engine()();
  return {synthetic_dataset(train_seed, train_size, options),
          synthetic_dataset(eval_seed, eval_size, options)};
}

// ---------------------------------------------------------------------------
// Augmentation

AugmentDraw draw_augment(Rng& rng, const AugmentFlags& flags) {
  AugmentDraw draw;
  if (flags.random_crop) {
    draw.offset_y = rng.index(2 * flags.pad + 1);
    draw.offset_x = rng.index(2 * flags.pad + 1);
  } else {
    draw.offset_y = draw.offset_x = flags.pad;
  }
  if (flags.mirror) draw.flip = rng.bernoulli(0.5);
  return draw;
}

std::vector<float> apply_augment(std::span<const float> image, std::size_t channels,
                                 std::size_t height, std::size_t width, const AugmentDraw& draw,
                                 const AugmentFlags& flags) {
  std::vector<float> out(channels * height * width, 0.0f);
  const long pad = flags.random_crop ? static_cast<long>(flags.pad) : 0;
  const long oy = flags.random_crop ? static_cast<long>(draw.offset_y) : 0;
  const long ox = flags.random_crop ? static_cast<long>(draw.offset_x) : 0;
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x) {
        // Position in the padded image is (y + oy, x + ox); subtract the pad
        // to get back to source coordinates.
        const long sy = static_cast<long>(y) + oy - pad;
        const long sx0 = static_cast<long>(x) + ox - pad;
        if (sy < 0 || sy >= static_cast<long>(height) || sx0 < 0 || sx0 >= static_cast<long>(width)) continue;
        const std::size_t dx = draw.flip ? width - 1 - x : x;
        out[(c * height + y) * width + dx] = image[(c * height + sy) * width + sx0];
      }
  return out;
}

std::vector<float> augment(std::span<const float> image, std::size_t channels, std::size_t height,
                           std::size_t width, Rng& rng, const AugmentFlags& flags) {
  return apply_augment(image, channels, height, width, draw_augment(rng, flags), flags);
}

}  // namespace gaternet
