#pragma once

#include <cstddef>
#include <span>

#include "gaternet/rng.hpp"
#include "gaternet/tensor.hpp"

namespace gaternet {

// Convolution filters F[out_ch x in_ch x kh x kw]. Symmetric zero padding.
// The forward pass is cross-correlation (no kernel flip).
template <typename T>
struct Conv2dParams {
  BasicTensor<T> filters;
  BasicTensor<T> bias;  // optional, [out_ch]
  std::size_t stride = 1;
  std::size_t padding = 0;

  std::size_t out_channels() const { return filters.size(0); }
  std::size_t in_channels() const { return filters.size(1); }
  std::size_t kernel_h() const { return filters.size(2); }
  std::size_t kernel_w() const { return filters.size(3); }

  // He-normal filters, zero bias when requested.
  static Conv2dParams init(std::size_t in_ch, std::size_t out_ch, std::size_t kernel,
                           std::size_t stride, std::size_t padding, bool with_bias, Rng& rng);
};

template <typename T>
struct BatchNormParams {
  BasicTensor<T> gamma;
  BasicTensor<T> beta;
  BasicTensor<T> running_mean;
  BasicTensor<T> running_var;
  T momentum = T(0.9);
  T epsilon = T(1e-5);

  std::size_t channels() const { return gamma.numel(); }
  static BatchNormParams init(std::size_t channels);
};

std::size_t conv_output_size(std::size_t in, std::size_t kernel, std::size_t stride,
                             std::size_t padding);

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const Conv2dParams<T>& p);

// Input [N x C] or [N x C x H x W]. Train mode normalizes with the batch
// statistics (biased variance) and folds them into the running statistics:
// running = momentum * running + (1 - momentum) * batch.
template <typename T>
BasicTensor<T> batchnorm(const BasicTensor<T>& input, const BatchNormParams<T>& p, Mode mode);

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x);

// [N x C x H x W] -> [N x C]
template <typename T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& x);

// Non-overlapping-capable max pooling without padding.
template <typename T>
BasicTensor<T> max_pool2d(const BasicTensor<T>& x, std::size_t window, std::size_t stride);

// x[N x h] * W[h x c] + b[c]
template <typename T>
BasicTensor<T> fully_connected(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                               const BasicTensor<T>& bias);

// Mean over the batch of -log softmax(logits)[label].
template <typename T>
BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const int> labels);

}  // namespace gaternet
