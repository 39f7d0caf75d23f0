#include "gaternet/layers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "gaternet/errors.hpp"

namespace gaternet {

template <typename T>
Conv2dParams<T> Conv2dParams<T>::init(std::size_t in_ch, std::size_t out_ch, std::size_t kernel,
                                      std::size_t stride, std::size_t padding, bool with_bias,
                                      Rng& rng) {
  if (in_ch == 0 || out_ch == 0 || kernel == 0 || stride == 0) {
    throw ShapeError("conv2d parameters need positive channels, kernel and stride");
  }
  Conv2dParams p;
  const double fan_in = static_cast<double>(in_ch * kernel * kernel);
  const double stddev = std::sqrt(2.0 / fan_in);
  std::vector<T> w(out_ch * in_ch * kernel * kernel);
  for (auto& v : w) v = static_cast<T>(rng.normal() * stddev);
  p.filters = BasicTensor<T>({out_ch, in_ch, kernel, kernel}, std::move(w), true);
  if (with_bias) p.bias = BasicTensor<T>({out_ch}, T(0), true);
  p.stride = stride;
  p.padding = padding;
  return p;
}

template <typename T>
BatchNormParams<T> BatchNormParams<T>::init(std::size_t channels) {
  BatchNormParams p;
  p.gamma = BasicTensor<T>({channels}, T(1), true);
  p.beta = BasicTensor<T>({channels}, T(0), true);
  p.running_mean = BasicTensor<T>({channels}, T(0));
  p.running_var = BasicTensor<T>({channels}, T(1));
  return p;
}

std::size_t conv_output_size(std::size_t in, std::size_t kernel, std::size_t stride,
                             std::size_t padding) {
  if (in + 2 * padding < kernel || stride == 0) return 0;
  return (in + 2 * padding - kernel) / stride + 1;
}

// ---------------------------------------------------------------------------
// conv2d

namespace {

struct ConvGeometry {
  std::size_t n, c, h, w;
  std::size_t out_ch, kh, kw, stride, pad;
  std::size_t oh, ow;
  std::size_t cols() const { return c * kh * kw; }
  std::size_t pixels() const { return oh * ow; }
};

template <typename T>
void im2col(const ConvGeometry& g, const T* image, T* col) {
  const std::size_t p_total = g.pixels();
  for (std::size_t ch = 0; ch < g.c; ++ch) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        T* row = col + ((ch * g.kh + ki) * g.kw + kj) * p_total;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          T* dst = row + oy * g.ow;
          if (iy < 0 || iy >= static_cast<long>(g.h)) {
            std::fill(dst, dst + g.ow, T(0));
            continue;
          }
          const T* src = image + (ch * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(g.w)) ? T(0)
                                                                 : src[static_cast<std::size_t>(ix)];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const ConvGeometry& g, const T* col, T* image) {
  const std::size_t p_total = g.pixels();
  for (std::size_t ch = 0; ch < g.c; ++ch) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* row = col + ((ch * g.kh + ki) * g.kw + kj) * p_total;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          T* dst = image + (ch * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            if (ix >= 0 && ix < static_cast<long>(g.w)) dst[ix] += row[oy * g.ow + ox];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const Conv2dParams<T>& p) {
  if (input.rank() != 4) throw ShapeError("conv2d: input must be NxCxHxW, got " + shape_str(input.shape()));
  if (p.filters.rank() != 4) throw ShapeError("conv2d: filters must be 4-D");
  ConvGeometry g{input.size(0), input.size(1), input.size(2), input.size(3),
                 p.out_channels(), p.kernel_h(), p.kernel_w(), p.stride, p.padding, 0, 0};
  if (g.c != p.in_channels()) {
    throw ShapeError("conv2d: input has " + std::to_string(g.c) + " channels, filters expect " +
                     std::to_string(p.in_channels()));
  }
  if (g.stride == 0) throw ShapeError("conv2d: stride must be positive");
  g.oh = conv_output_size(g.h, g.kh, g.stride, g.pad);
  g.ow = conv_output_size(g.w, g.kw, g.stride, g.pad);
  if (g.oh == 0 || g.ow == 0) {
    throw ShapeError("conv2d: non-positive output size for input " + shape_str(input.shape()));
  }
  const bool has_bias = p.bias.defined();
  if (has_bias && p.bias.numel() != g.out_ch) throw ShapeError("conv2d: bias length mismatch");

  const std::size_t k = g.cols(), pix = g.pixels();
  const bool keep_cols = p.filters.requires_grad();
  auto cols = std::make_shared<std::vector<T>>(keep_cols ? g.n * k * pix : k * pix);
  std::vector<T> out(g.n * g.out_ch * pix);
  const T* in = input.data().data();
  const T* w = p.filters.data().data();
  for (std::size_t n = 0; n < g.n; ++n) {
    T* col = cols->data() + (keep_cols ? n * k * pix : 0);
    im2col(g, in + n * g.c * g.h * g.w, col);
    T* o = out.data() + n * g.out_ch * pix;
    kernels::gemm(g.out_ch, k, pix, w, col, o, false);
    if (has_bias) {
      const auto b = p.bias.data();
      for (std::size_t oc = 0; oc < g.out_ch; ++oc)
        for (std::size_t q = 0; q < pix; ++q) o[oc * pix + q] += b[oc];
    }
  }

  std::vector<BasicTensor<T>> inputs{input, p.filters};
  if (has_bias) inputs.push_back(p.bias);
  return make_result<T>(
      "conv2d", {g.n, g.out_ch, g.oh, g.ow}, std::move(out), inputs,
      [g, cols, keep_cols, has_bias](Node<T>& self) {
        Node<T>& nin = *self.inputs[0];
        Node<T>& nw = *self.inputs[1];
        const std::size_t k = g.cols(), pix = g.pixels();
        std::vector<T> wt;
        std::vector<T> dcol;
        if (nin.requires_grad) {
          wt.resize(k * g.out_ch);
          kernels::transpose(g.out_ch, k, nw.data.data(), wt.data());
          dcol.resize(k * pix);
        }
        std::vector<T> colt(pix * k);
        std::vector<T> scratch;
        for (std::size_t n = 0; n < g.n; ++n) {
          const T* dout = self.grad.data() + n * g.out_ch * pix;
          if (nw.requires_grad) {
            const T* col = nullptr;
            if (keep_cols) {
              col = cols->data() + n * k * pix;
            } else {
              scratch.resize(k * pix);
              im2col(g, nin.data.data() + n * g.c * g.h * g.w, scratch.data());
              col = scratch.data();
            }
            kernels::transpose(k, pix, col, colt.data());
            kernels::gemm(g.out_ch, pix, k, dout, colt.data(), nw.ensure_grad().data(), true);
          }
          if (has_bias && self.inputs[2]->requires_grad) {
            auto& gb = self.inputs[2]->ensure_grad();
            for (std::size_t oc = 0; oc < g.out_ch; ++oc)
              for (std::size_t q = 0; q < pix; ++q) gb[oc] += dout[oc * pix + q];
          }
          if (nin.requires_grad) {
            kernels::gemm(k, g.out_ch, pix, wt.data(), dout, dcol.data(), false);
            col2im_add(g, dcol.data(), nin.ensure_grad().data() + n * g.c * g.h * g.w);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// batchnorm

template <typename T>
BasicTensor<T> batchnorm(const BasicTensor<T>& input, const BatchNormParams<T>& p, Mode mode) {
  if (input.rank() != 2 && input.rank() != 4) {
    throw ShapeError("batchnorm: input must be NxC or NxCxHxW, got " + shape_str(input.shape()));
  }
  const std::size_t n = input.size(0), c = input.size(1);
  const std::size_t spatial = input.rank() == 4 ? input.size(2) * input.size(3) : 1;
  if (c != p.channels()) {
    throw ShapeError("batchnorm: input has " + std::to_string(c) + " channels, parameters have " +
                     std::to_string(p.channels()));
  }
  if (!(p.epsilon > T(0))) throw ShapeError("batchnorm: epsilon must be positive");
  const std::size_t count = n * spatial;
  if (count == 0) throw ShapeError("batchnorm: empty batch");

  const T* x = input.data().data();
  const auto gamma = p.gamma.data();
  const auto beta = p.beta.data();
  auto xhat = std::make_shared<std::vector<T>>(input.numel());
  auto inv_std = std::make_shared<std::vector<T>>(c);
  std::vector<T> out(input.numel());

  for (std::size_t ch = 0; ch < c; ++ch) {
    T mu, var;
    if (mode == Mode::train) {
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t s = 0; s < spatial; ++s) acc += x[(i * c + ch) * spatial + s];
      const double m = acc / static_cast<double>(count);
      double sq = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t s = 0; s < spatial; ++s) {
          const double d = x[(i * c + ch) * spatial + s] - m;
          sq += d * d;
        }
      mu = static_cast<T>(m);
      var = static_cast<T>(sq / static_cast<double>(count));
      auto rm = p.running_mean.mutable_data();
      auto rv = p.running_var.mutable_data();
      rm[ch] = p.momentum * rm[ch] + (T(1) - p.momentum) * mu;
      rv[ch] = p.momentum * rv[ch] + (T(1) - p.momentum) * var;
    } else {
      mu = p.running_mean.data()[ch];
      var = p.running_var.data()[ch];
    }
    const T inv = T(1) / std::sqrt(var + p.epsilon);
    (*inv_std)[ch] = inv;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t s = 0; s < spatial; ++s) {
        const std::size_t idx = (i * c + ch) * spatial + s;
        const T xh = (x[idx] - mu) * inv;
        (*xhat)[idx] = xh;
        out[idx] = xh * gamma[ch] + beta[ch];
      }
    }
  }

  return make_result<T>(
      "batchnorm", input.shape(), std::move(out), {input, p.gamma, p.beta},
      [n, c, spatial, count, mode, xhat, inv_std](Node<T>& self) {
        Node<T>& nin = *self.inputs[0];
        Node<T>& ngamma = *self.inputs[1];
        Node<T>& nbeta = *self.inputs[2];
        const auto& dy = self.grad;
        for (std::size_t ch = 0; ch < c; ++ch) {
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t s = 0; s < spatial; ++s) {
              const std::size_t idx = (i * c + ch) * spatial + s;
              sum_dy += dy[idx];
              sum_dy_xhat += static_cast<double>(dy[idx]) * (*xhat)[idx];
            }
          if (ngamma.requires_grad) ngamma.ensure_grad()[ch] += static_cast<T>(sum_dy_xhat);
          if (nbeta.requires_grad) nbeta.ensure_grad()[ch] += static_cast<T>(sum_dy);
          if (!nin.requires_grad) continue;
          auto& dx = nin.ensure_grad();
          const T scale_g = ngamma.data[ch] * (*inv_std)[ch];
          if (mode == Mode::eval) {
            for (std::size_t i = 0; i < n; ++i)
              for (std::size_t s = 0; s < spatial; ++s) {
                const std::size_t idx = (i * c + ch) * spatial + s;
                dx[idx] += dy[idx] * scale_g;
              }
          } else {
            const T mean_dy = static_cast<T>(sum_dy / static_cast<double>(count));
            const T mean_dy_xhat = static_cast<T>(sum_dy_xhat / static_cast<double>(count));
            for (std::size_t i = 0; i < n; ++i)
              for (std::size_t s = 0; s < spatial; ++s) {
                const std::size_t idx = (i * c + ch) * spatial + s;
                dx[idx] += scale_g * (dy[idx] - mean_dy - (*xhat)[idx] * mean_dy_xhat);
              }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Activations, pooling, heads

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  std::vector<T> out(x.data().begin(), x.data().end());
  for (auto& v : out) v = v > T(0) ? v : T(0);
  return make_result<T>("relu", x.shape(), std::move(out), {x}, [](Node<T>& self) {
    auto& g = self.inputs[0]->ensure_grad();
    const auto& in = self.inputs[0]->data;
    for (std::size_t i = 0; i < g.size(); ++i)
      if (in[i] > T(0)) g[i] += self.grad[i];
  });
}

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x) {
  std::vector<T> out(x.numel());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = T(1) / (T(1) + std::exp(-in[i]));
  return make_result<T>("sigmoid", x.shape(), std::move(out), {x}, [](Node<T>& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T y = self.data[i];
      g[i] += self.grad[i] * y * (T(1) - y);
    }
  });
}

template <typename T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("global_avg_pool: input must be NxCxHxW, got " + shape_str(x.shape()));
  const std::size_t n = x.size(0), c = x.size(1), spatial = x.size(2) * x.size(3);
  std::vector<T> out(n * c);
  const auto in = x.data();
  for (std::size_t i = 0; i < n * c; ++i) {
    double acc = 0.0;
    for (std::size_t s = 0; s < spatial; ++s) acc += in[i * spatial + s];
    out[i] = static_cast<T>(acc / static_cast<double>(spatial));
  }
  return make_result<T>("global_avg_pool", {n, c}, std::move(out), {x},
                        [n, c, spatial](Node<T>& self) {
                          auto& g = self.inputs[0]->ensure_grad();
                          const T inv = T(1) / static_cast<T>(spatial);
                          for (std::size_t i = 0; i < n * c; ++i) {
                            const T up = self.grad[i] * inv;
                            for (std::size_t s = 0; s < spatial; ++s) g[i * spatial + s] += up;
                          }
                        });
}

template <typename T>
BasicTensor<T> max_pool2d(const BasicTensor<T>& x, std::size_t window, std::size_t stride) {
  if (x.rank() != 4) throw ShapeError("max_pool2d: input must be NxCxHxW, got " + shape_str(x.shape()));
  const std::size_t n = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
  const std::size_t oh = conv_output_size(h, window, stride, 0);
  const std::size_t ow = conv_output_size(w, window, stride, 0);
  if (window == 0 || oh == 0 || ow == 0) {
    throw ShapeError("max_pool2d: window does not fit input " + shape_str(x.shape()));
  }
  std::vector<T> out(n * c * oh * ow);
  auto arg = std::make_shared<std::vector<std::size_t>>(out.size());
  const auto in = x.data();
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const std::size_t base = plane * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = base + oy * stride * w + ox * stride;
        for (std::size_t ky = 0; ky < window; ++ky)
          for (std::size_t kx = 0; kx < window; ++kx) {
            const std::size_t idx = base + (oy * stride + ky) * w + ox * stride + kx;
            if (in[idx] > in[best]) best = idx;
          }
        const std::size_t o = (plane * oh + oy) * ow + ox;
        out[o] = in[best];
        (*arg)[o] = best;
      }
  }
  return make_result<T>("max_pool2d", {n, c, oh, ow}, std::move(out), {x}, [arg](Node<T>& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t o = 0; o < self.grad.size(); ++o) g[(*arg)[o]] += self.grad[o];
  });
}

template <typename T>
BasicTensor<T> fully_connected(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                               const BasicTensor<T>& bias) {
  if (x.rank() != 2 || weight.rank() != 2 || x.size(1) != weight.size(0)) {
    throw ShapeError("fully_connected: input " + shape_str(x.shape()) + " does not match weight " +
                     shape_str(weight.shape()));
  }
  if (!bias.defined()) return matmul(x, weight);
  if (bias.rank() != 1 || bias.numel() != weight.size(1)) {
    throw ShapeError("fully_connected: bias " + shape_str(bias.shape()) + " does not match weight " +
                     shape_str(weight.shape()));
  }
  return add(matmul(x, weight), bias);
}

template <typename T>
BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const int> labels) {
  if (logits.rank() != 2) throw ShapeError("softmax_cross_entropy: logits must be NxK");
  const std::size_t n = logits.size(0), k = logits.size(1);
  if (labels.size() != n) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(n) + " rows");
  }
  if (n == 0) throw ShapeError("softmax_cross_entropy: empty batch");
  auto probs = std::make_shared<std::vector<T>>(n * k);
  auto label_copy = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
  const auto z = logits.data();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= k) {
      throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(y) + " at row " +
                              std::to_string(i) + " outside [0, " + std::to_string(k) + ")");
    }
    const T* row = z.data() + i * k;
    const double mx = *std::max_element(row, row + k);
    double denom = 0.0;
    for (std::size_t j = 0; j < k; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
    const double lse = mx + std::log(denom);
    total += lse - row[y];
    for (std::size_t j = 0; j < k; ++j)
      (*probs)[i * k + j] = static_cast<T>(std::exp(static_cast<double>(row[j]) - lse));
  }
  const T loss = static_cast<T>(total / static_cast<double>(n));
  return make_result<T>("softmax_cross_entropy", {}, {loss}, {logits},
                        [n, k, probs, label_copy](Node<T>& self) {
                          auto& g = self.inputs[0]->ensure_grad();
                          const T up = self.grad[0] / static_cast<T>(n);
                          for (std::size_t i = 0; i < n; ++i)
                            for (std::size_t j = 0; j < k; ++j) {
                              const T target = static_cast<std::size_t>((*label_copy)[i]) == j ? T(1) : T(0);
                              g[i * k + j] += up * ((*probs)[i * k + j] - target);
                            }
                        });
}

#define GATERNET_INSTANTIATE(T)                                                             \
  template struct Conv2dParams<T>;                                                          \
  template struct BatchNormParams<T>;                                                       \
  template BasicTensor<T> conv2d<T>(const BasicTensor<T>&, const Conv2dParams<T>&);         \
  template BasicTensor<T> batchnorm<T>(const BasicTensor<T>&, const BatchNormParams<T>&, Mode); \
  template BasicTensor<T> relu<T>(const BasicTensor<T>&);                                   \
  template BasicTensor<T> sigmoid<T>(const BasicTensor<T>&);                                \
  template BasicTensor<T> global_avg_pool<T>(const BasicTensor<T>&);                        \
  template BasicTensor<T> max_pool2d<T>(const BasicTensor<T>&, std::size_t, std::size_t);   \
  template BasicTensor<T> fully_connected<T>(const BasicTensor<T>&, const BasicTensor<T>&,  \
                                             const BasicTensor<T>&);                        \
  template BasicTensor<T> softmax_cross_entropy<T>(const BasicTensor<T>&, std::span<const int>);

GATERNET_INSTANTIATE(float)
GATERNET_INSTANTIATE(double)

#undef GATERNET_INSTANTIATE

}  // namespace gaternet
