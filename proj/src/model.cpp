#include "gaternet/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <stdexcept>

#include "gaternet/errors.hpp"
#include "gaternet/io.hpp"

namespace gaternet {

const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv: return "conv";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::global_avg_pool: return "global_avg_pool";
    case LayerKind::fc: return "fc";
  }
  return "?";
}

LayerKind layer_kind_from_string(const std::string& name) {
  if (name == "conv") return LayerKind::conv;
  if (name == "maxpool") return LayerKind::maxpool;
  if (name == "global_avg_pool") return LayerKind::global_avg_pool;
  if (name == "fc") return LayerKind::fc;
  throw ConfigError("unknown layer type '" + name + "'");
}

const char* to_string(ParamGroup group) {
  switch (group) {
    case ParamGroup::backbone: return "backbone";
    case ParamGroup::gater: return "gater";
    case ParamGroup::head: return "head";
    case ParamGroup::gater_classifier: return "gater_classifier";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Shape inference

namespace {

struct LayerIo {
  Shape in;   // without batch: {C, H, W} or {features}
  Shape out;
};

std::vector<LayerIo> infer_shapes(const std::vector<LayerDesc>& descs, const std::string& which,
                                  Shape shape) {
  std::vector<LayerIo> io;
  for (std::size_t i = 0; i < descs.size(); ++i) {
    const LayerDesc& d = descs[i];
    const std::string where = which + " layer " + std::to_string(i) + " (" + to_string(d.kind) + ")";
    LayerIo step{shape, {}};
    if (d.gated && d.kind != LayerKind::conv) throw ConfigError(where + ": only conv layers can be gated");
    switch (d.kind) {
      case LayerKind::conv: {
        if (shape.size() != 3) throw ConfigError(where + ": needs a C x H x W input");
        if (d.filters == 0 || d.kernel == 0 || d.stride == 0) {
          throw ConfigError(where + ": filters, kernel and stride must be positive");
        }
        const std::size_t oh = conv_output_size(shape[1], d.kernel, d.stride, d.padding);
        const std::size_t ow = conv_output_size(shape[2], d.kernel, d.stride, d.padding);
        if (oh == 0 || ow == 0) throw ConfigError(where + ": non-positive output size");
        step.out = {d.filters, oh, ow};
        break;
      }
      case LayerKind::maxpool: {
        if (shape.size() != 3) throw ConfigError(where + ": needs a C x H x W input");
        if (d.kernel == 0 || d.stride == 0) throw ConfigError(where + ": window and stride must be positive");
        const std::size_t oh = conv_output_size(shape[1], d.kernel, d.stride, 0);
        const std::size_t ow = conv_output_size(shape[2], d.kernel, d.stride, 0);
        if (oh == 0 || ow == 0) throw ConfigError(where + ": window larger than input");
        step.out = {shape[0], oh, ow};
        break;
      }
      case LayerKind::global_avg_pool:
        if (shape.size() != 3) throw ConfigError(where + ": needs a C x H x W input");
        step.out = {shape[0]};
        break;
      case LayerKind::fc:
        if (d.filters == 0) throw ConfigError(where + ": units must be positive");
        step.out = {d.filters};
        break;
    }
    shape = step.out;
    io.push_back(std::move(step));
  }
  return io;
}

std::size_t flat(const Shape& s) { return shape_numel(s); }

std::size_t layer_param_count(const LayerDesc& d, const Shape& in) {
  switch (d.kind) {
    case LayerKind::conv: {
      std::size_t n = d.filters * in[0] * d.kernel * d.kernel;
      if (d.batchnorm) n += 2 * d.filters;
      else n += d.filters;  // bias
      return n;
    }
    case LayerKind::fc:
      return flat(in) * d.filters + d.filters;
    default:
      return 0;
  }
}

}  // namespace

std::size_t ModelSpec::gated_filter_total() const {
  std::size_t c = 0;
  for (const auto& d : backbone)
    if (d.gated && d.kind == LayerKind::conv) c += d.filters;
  return c;
}

std::size_t ModelSpec::feature_size() const {
  if (gater.empty()) return 0;
  const auto io = infer_shapes(gater, "gater", {input_channels, input_height, input_width});
  return flat(io.back().out);
}

void ModelSpec::validate() const {
  if (input_channels == 0 || input_height == 0 || input_width == 0) {
    throw ConfigError("model: input dimensions must be positive");
  }
  if (num_classes == 0) throw ConfigError("model: num_classes must be positive");
  if (bottleneck == 0) throw ConfigError("model: bottleneck size b must be >= 1");
  if (backbone.empty()) throw ConfigError("model: backbone is empty");
  const Shape input{input_channels, input_height, input_width};
  const auto bio = infer_shapes(backbone, "backbone", input);
  if (bio.back().out.size() != 1 || bio.back().out[0] != num_classes) {
    throw ConfigError("model: backbone must end in " + std::to_string(num_classes) +
                      " class scores, got " + shape_str(bio.back().out));
  }
  if (backbone.back().kind == LayerKind::fc && backbone.back().relu) {
    throw ConfigError("model: the backbone's output layer must not apply relu");
  }
  if (gater.empty()) {
    if (gated_filter_total() > 0) throw ConfigError("model: gated layers need a gater network");
    return;
  }
  const auto gio = infer_shapes(gater, "gater", input);
  if (gio.back().out.size() != 1) {
    throw ConfigError("model: gater must end in a feature vector (global_avg_pool or fc), got " +
                      shape_str(gio.back().out));
  }
  for (const auto& d : gater)
    if (d.gated) throw ConfigError("model: gater layers cannot be gated");
}

std::string ModelSpec::canonical() const {
  std::ostringstream out;
  auto list = [&out](const std::vector<LayerDesc>& descs) {
    for (const auto& d : descs) {
      out << to_string(d.kind) << "(f=" << d.filters << ",k=" << d.kernel << ",s=" << d.stride
          << ",p=" << d.padding << ",bn=" << d.batchnorm << ",relu=" << d.relu
          << ",g=" << d.gated << ");";
    }
  };
  out << "input=" << input_channels << 'x' << input_height << 'x' << input_width << '\n';
  out << "backbone=";
  list(backbone);
  out << "\ngater=";
  list(gater);
  out << "\nbottleneck=" << bottleneck << "\nnum_classes=" << num_classes << '\n';
  return out.str();
}

std::uint64_t ModelSpec::hash() const { return fnv1a64(canonical()); }

// ---------------------------------------------------------------------------
// GateIndexMap

GateIndexMap::GateIndexMap(const std::vector<LayerDesc>& backbone) {
  offsets_.assign(backbone.size(), std::nullopt);
  for (std::size_t l = 0; l < backbone.size(); ++l) {
    if (!backbone[l].gated || backbone[l].kind != LayerKind::conv) continue;
    offsets_[l] = slots_.size();
    for (std::size_t f = 0; f < backbone[l].filters; ++f) slots_.push_back({l, f});
  }
}

std::size_t GateIndexMap::index(std::size_t layer, std::size_t filter) const {
  if (layer >= offsets_.size() || !offsets_[layer]) {
    throw std::out_of_range("layer " + std::to_string(layer) + " is not gated");
  }
  const std::size_t idx = *offsets_[layer] + filter;
  if (idx >= slots_.size() || slots_[idx].layer != layer) {
    throw std::out_of_range("filter " + std::to_string(filter) + " out of range for layer " +
                            std::to_string(layer));
  }
  return idx;
}

std::size_t GateIndexMap::offset(std::size_t layer) const {
  if (layer >= offsets_.size() || !offsets_[layer]) {
    throw std::out_of_range("layer " + std::to_string(layer) + " is not gated");
  }
  return *offsets_[layer];
}

// ---------------------------------------------------------------------------
// Network

namespace {

template <typename T>
BasicTensor<T> uniform_tensor(Shape shape, double bound, Rng& rng) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>((rng.uniform() * 2.0 - 1.0) * bound);
  return BasicTensor<T>(std::move(shape), std::move(v), true);
}

template <typename T>
BasicTensor<T> conv_block(const BasicTensor<T>& input, const Conv2dParams<T>& conv,
                          const BatchNormParams<T>* bn, Mode mode, bool apply_relu) {
  BasicTensor<T> y = conv2d(input, conv);
  if (bn) y = batchnorm(y, *bn, mode);
  if (apply_relu) y = relu(y);
  return y;
}

}  // namespace

template <typename T>
Network<T>::Network(const std::vector<LayerDesc>& descs, std::size_t channels,
                    std::size_t height, std::size_t width, Rng& rng) {
  const auto io = infer_shapes(descs, "network", {channels, height, width});
  std::size_t gate_offset = 0;
  for (std::size_t i = 0; i < descs.size(); ++i) {
    LayerState<T> layer;
    layer.desc = descs[i];
    const LayerDesc& d = descs[i];
    if (d.kind == LayerKind::conv) {
      layer.conv = Conv2dParams<T>::init(io[i].in[0], d.filters, d.kernel, d.stride, d.padding,
                                         !d.batchnorm, rng);
      if (d.batchnorm) layer.bn = BatchNormParams<T>::init(d.filters);
      if (d.gated) {
        layer.gate_offset = gate_offset;
        gate_offset += d.filters;
      }
    } else if (d.kind == LayerKind::fc) {
      const std::size_t fan_in = flat(io[i].in);
      layer.fc_weight = uniform_tensor<T>({fan_in, d.filters}, 1.0 / std::sqrt(double(fan_in)), rng);
      layer.fc_bias = BasicTensor<T>({d.filters}, T(0), true);
    }
    layers_.push_back(std::move(layer));
  }
  output_width_ = io.empty() ? channels * height * width : flat(io.back().out);
}

template <typename T>
BasicTensor<T> Network<T>::forward(const BasicTensor<T>& x, Mode mode,
                                   const BasicTensor<T>* gates) const {
  BasicTensor<T> y = x;
  for (const auto& layer : layers_) {
    const LayerDesc& d = layer.desc;
    switch (d.kind) {
      case LayerKind::conv: {
        const BatchNormParams<T>* bn = layer.bn ? &*layer.bn : nullptr;
        if (d.gated && gates) {
          y = gated_conv_forward(y, layer.conv, bn, mode,
                                 slice_columns(*gates, layer.gate_offset, d.filters), d.relu);
        } else {
          y = conv_block(y, layer.conv, bn, mode, d.relu);
        }
        break;
      }
      case LayerKind::maxpool:
        y = max_pool2d(y, d.kernel, d.stride);
        break;
      case LayerKind::global_avg_pool:
        y = global_avg_pool(y);
        break;
      case LayerKind::fc:
        if (y.rank() != 2) y = reshape(y, {y.size(0), y.numel() / y.size(0)});
        y = fully_connected(y, layer.fc_weight, layer.fc_bias);
        if (d.relu) y = relu(y);
        break;
    }
  }
  return y;
}

template <typename T>
void Network<T>::collect(const std::string& prefix, ParamGroup group,
                         std::vector<NamedTensor<T>>& params,
                         std::vector<NamedTensor<T>>& buffers) const {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& layer = layers_[i];
    const std::string base = prefix + "." + std::to_string(i) + ".";
    if (layer.desc.kind == LayerKind::conv) {
      params.push_back({base + "conv.weight", layer.conv.filters, group, true});
      if (layer.conv.bias.defined()) params.push_back({base + "conv.bias", layer.conv.bias, group, false});
      if (layer.bn) {
        params.push_back({base + "bn.gamma", layer.bn->gamma, group, false});
        params.push_back({base + "bn.beta", layer.bn->beta, group, false});
        buffers.push_back({base + "bn.running_mean", layer.bn->running_mean, group, false});
        buffers.push_back({base + "bn.running_var", layer.bn->running_var, group, false});
      }
    } else if (layer.desc.kind == LayerKind::fc) {
      params.push_back({base + "fc.weight", layer.fc_weight, group, true});
      params.push_back({base + "fc.bias", layer.fc_bias, group, false});
    }
  }
}

// ---------------------------------------------------------------------------
// Gated convolution and its selective reference

template <typename T>
BasicTensor<T> gated_conv_forward(const BasicTensor<T>& input, const Conv2dParams<T>& conv,
                                  const BatchNormParams<T>* bn, Mode mode,
                                  const BasicTensor<T>& gates, bool apply_relu) {
  const std::size_t n = input.rank() == 4 ? input.size(0) : 0;
  if (gates.rank() != 2 || gates.size(0) != n || gates.size(1) != conv.out_channels()) {
    throw ShapeError("gated conv: gates " + shape_str(gates.shape()) + " do not match " +
                     std::to_string(n) + " samples x " + std::to_string(conv.out_channels()) +
                     " filters");
  }
  for (T g : gates.data()) {
    if (!(g >= T(0) && g <= T(1))) throw std::invalid_argument("gated conv: gate value outside [0, 1]");
  }
  const BasicTensor<T> y = conv_block(input, conv, bn, mode, apply_relu);
  // A closed gate writes +0 rather than y * 0, which would leave -0 behind
  // negative pre-activations and break bit equality with selective evaluation.
  const std::size_t c = conv.out_channels(), plane = y.numel() / std::max<std::size_t>(n * c, 1);
  std::vector<T> out(y.numel());
  const auto yd = y.data();
  const auto gd = gates.data();
  for (std::size_t m = 0; m < n * c; ++m) {
    const T g = gd[m];
    for (std::size_t k = 0; k < plane; ++k) out[m * plane + k] = g == T(0) ? T(0) : yd[m * plane + k] * g;
  }
  return make_result<T>("channel_gate", y.shape(), std::move(out), {y, gates}, [plane](Node<T>& self) {
    const auto& yv = self.inputs[0]->data;
    const auto& gv = self.inputs[1]->data;
    if (self.inputs[0]->requires_grad) {
      auto& dy = self.inputs[0]->ensure_grad();
      for (std::size_t m = 0; m < gv.size(); ++m)
        for (std::size_t k = 0; k < plane; ++k) dy[m * plane + k] += self.grad[m * plane + k] * gv[m];
    }
    if (self.inputs[1]->requires_grad) {
      auto& dg = self.inputs[1]->ensure_grad();
      for (std::size_t m = 0; m < gv.size(); ++m) {
        T acc = T(0);
        for (std::size_t k = 0; k < plane; ++k) acc += self.grad[m * plane + k] * yv[m * plane + k];
        dg[m] += acc;
      }
    }
  });
}

template <typename T>
BasicTensor<T> selective_conv_reference(const BasicTensor<T>& input, const Conv2dParams<T>& conv,
                                        const BatchNormParams<T>* bn, const BasicTensor<T>& gates,
                                        bool apply_relu) {
  if (input.rank() != 4) throw ShapeError("selective conv: input must be NxCxHxW");
  const std::size_t n = input.size(0), c = input.size(1), h = input.size(2), w = input.size(3);
  const std::size_t out_ch = conv.out_channels();
  if (gates.rank() != 2 || gates.size(0) != n || gates.size(1) != out_ch) {
    throw ShapeError("selective conv: gates " + shape_str(gates.shape()) + " do not match layer");
  }
  for (T g : gates.data()) {
    if (g != T(0) && g != T(1)) throw std::invalid_argument("selective conv: gates must be binary");
  }
  const std::size_t oh = conv_output_size(h, conv.kernel_h(), conv.stride, conv.padding);
  const std::size_t ow = conv_output_size(w, conv.kernel_w(), conv.stride, conv.padding);
  const std::size_t filter_size = c * conv.kernel_h() * conv.kernel_w();
  std::vector<T> out(n * out_ch * oh * ow, T(0));
  const auto gd = gates.data();

  for (std::size_t s = 0; s < n; ++s) {
    std::vector<std::size_t> active;
    for (std::size_t f = 0; f < out_ch; ++f)
      if (gd[s * out_ch + f] == T(1)) active.push_back(f);
    if (active.empty()) continue;

    const std::size_t a = active.size();
    Conv2dParams<T> sub;
    sub.stride = conv.stride;
    sub.padding = conv.padding;
    std::vector<T> filters(a * filter_size);
    for (std::size_t j = 0; j < a; ++j)
      std::copy_n(conv.filters.data().begin() + active[j] * filter_size, filter_size,
                  filters.begin() + j * filter_size);
    sub.filters = BasicTensor<T>({a, c, conv.kernel_h(), conv.kernel_w()}, std::move(filters));
    if (conv.bias.defined()) {
      std::vector<T> bias(a);
      for (std::size_t j = 0; j < a; ++j) bias[j] = conv.bias.data()[active[j]];
      sub.bias = BasicTensor<T>({a}, std::move(bias));
    }
    std::vector<T> image(input.data().begin() + s * c * h * w,
                         input.data().begin() + (s + 1) * c * h * w);
    BasicTensor<T> y = conv2d(BasicTensor<T>({1, c, h, w}, std::move(image)), sub);
    if (bn) {
      BatchNormParams<T> sub_bn;
      sub_bn.momentum = bn->momentum;
      sub_bn.epsilon = bn->epsilon;
      auto pick = [&](const BasicTensor<T>& t) {
        std::vector<T> v(a);
        for (std::size_t j = 0; j < a; ++j) v[j] = t.data()[active[j]];
        return BasicTensor<T>({a}, std::move(v));
      };
      sub_bn.gamma = pick(bn->gamma);
      sub_bn.beta = pick(bn->beta);
      sub_bn.running_mean = pick(bn->running_mean);
      sub_bn.running_var = pick(bn->running_var);
      y = batchnorm(y, sub_bn, Mode::eval);
    }
    if (apply_relu) y = relu(y);
    const auto yd = y.data();
    for (std::size_t j = 0; j < a; ++j)
      std::copy_n(yd.begin() + j * oh * ow, oh * ow,
                  out.begin() + (s * out_ch + active[j]) * oh * ow);
  }
  return BasicTensor<T>({n, out_ch, oh, ow}, std::move(out));
}

// ---------------------------------------------------------------------------
// Gater head

template <typename T>
GaterHeadParams<T> GaterHeadParams<T>::init(std::size_t h, std::size_t b, std::size_t c, Rng& rng,
                                            T gate_bias) {
  GaterHeadParams p;
  p.w1 = uniform_tensor<T>({h, b}, 1.0 / std::sqrt(double(std::max<std::size_t>(h, 1))), rng);
  p.b1 = BasicTensor<T>({b}, T(0), true);
  p.bn = BatchNormParams<T>::init(b);
  p.w2 = uniform_tensor<T>({b, c}, 1.0 / std::sqrt(double(b)), rng);
  p.b2 = BasicTensor<T>({c}, gate_bias, true);
  return p;
}

template <typename T>
BasicTensor<T> gater_head(const BasicTensor<T>& features, const GaterHeadParams<T>& p, Mode mode) {
  if (features.rank() != 2 || features.size(1) != p.w1.size(0)) {
    throw ShapeError("gater head: features " + shape_str(features.shape()) +
                     " do not match feature size " + std::to_string(p.w1.size(0)));
  }
  BasicTensor<T> f1 = fully_connected(features, p.w1, p.b1);
  return fully_connected(relu(batchnorm(f1, p.bn, mode)), p.w2, p.b2);
}

// ---------------------------------------------------------------------------
// GaterNet

template <typename T>
GaterNet<T>::GaterNet(ModelSpec spec, Rng& rng) : spec_(std::move(spec)) {
  spec_.validate();
  gate_map_ = GateIndexMap(spec_.backbone);
  backbone_ = Network<T>(spec_.backbone, spec_.input_channels, spec_.input_height,
                         spec_.input_width, rng);
  if (!spec_.gater.empty()) {
    gater_ = Network<T>(spec_.gater, spec_.input_channels, spec_.input_height, spec_.input_width,
                        rng);
    const std::size_t h = spec_.feature_size();
    head_ = GaterHeadParams<T>::init(h, spec_.bottleneck, spec_.gated_filter_total(), rng);
    classifier_w_ = uniform_tensor<T>({h, spec_.num_classes}, 1.0 / std::sqrt(double(h)), rng);
    classifier_b_ = BasicTensor<T>({spec_.num_classes}, T(0), true);
  }
}

template <typename T>
void GaterNet<T>::check_input(const BasicTensor<T>& x) const {
  if (x.rank() != 4 || x.size(1) != spec_.input_channels || x.size(2) != spec_.input_height ||
      x.size(3) != spec_.input_width) {
    throw ShapeError("model input " + shape_str(x.shape()) + " does not match N x " +
                     shape_str({spec_.input_channels, spec_.input_height, spec_.input_width}));
  }
}

template <typename T>
BasicTensor<T> GaterNet<T>::gater_features(const BasicTensor<T>& x, Mode mode) const {
  check_input(x);
  if (spec_.gater.empty()) throw std::logic_error("model has no gater network");
  BasicTensor<T> f = gater_.forward(x, mode);
  return f.rank() == 2 ? f : reshape(f, {f.size(0), f.numel() / f.size(0)});
}

template <typename T>
BasicTensor<T> GaterNet<T>::gate_logits(const BasicTensor<T>& x, Mode mode) const {
  if (spec_.gater.empty()) {
    check_input(x);
    return BasicTensor<T>({x.size(0), 0});
  }
  return gater_head(gater_features(x, mode), head_, mode);
}

template <typename T>
GaterNetOutput<T> GaterNet<T>::forward(const BasicTensor<T>& x, Mode mode, Rng& rng,
                                       const ForwardOptions& options) const {
  GaterNetOutput<T> out;
  out.bundle = semhash_forward(gate_logits(x, mode), mode, rng, options.policy);
  out.gates = out.bundle.selected;
  if (mode == Mode::train && options.dropout_rate > 0.0) {
    out.gates = gate_dropout(out.gates, options.dropout_rate, rng);
  }
  out.logits = backbone_.forward(x, mode, &out.gates);
  return out;
}

template <typename T>
BasicTensor<T> GaterNet<T>::forward_ungated(const BasicTensor<T>& x, Mode mode) const {
  check_input(x);
  return backbone_.forward(x, mode, nullptr);
}

template <typename T>
BasicTensor<T> GaterNet<T>::forward_with_gates(const BasicTensor<T>& x, Mode mode,
                                               const BasicTensor<T>& gates) const {
  check_input(x);
  if (gates.rank() != 2 || gates.size(0) != x.size(0) || gates.size(1) != gate_map_.size()) {
    throw ShapeError("gates " + shape_str(gates.shape()) + " do not match " +
                     std::to_string(x.size(0)) + " x " + std::to_string(gate_map_.size()));
  }
  return backbone_.forward(x, mode, &gates);
}

template <typename T>
BasicTensor<T> GaterNet<T>::gater_classifier_logits(const BasicTensor<T>& x, Mode mode) const {
  return fully_connected(gater_features(x, mode), classifier_w_, classifier_b_);
}

template <typename T>
void GaterNet<T>::reset_head(Rng& rng, T gate_bias) {
  if (spec_.gater.empty()) return;
  head_ = GaterHeadParams<T>::init(spec_.feature_size(), spec_.bottleneck,
                                   spec_.gated_filter_total(), rng, gate_bias);
}

template <typename T>
std::vector<NamedTensor<T>> GaterNet<T>::parameters() const {
  std::vector<NamedTensor<T>> params, buffers;
  backbone_.collect("backbone", ParamGroup::backbone, params, buffers);
  if (!spec_.gater.empty()) {
    gater_.collect("gater", ParamGroup::gater, params, buffers);
    params.push_back({"head.fc1.weight", head_.w1, ParamGroup::head, true});
    params.push_back({"head.fc1.bias", head_.b1, ParamGroup::head, false});
    params.push_back({"head.bn.gamma", head_.bn.gamma, ParamGroup::head, false});
    params.push_back({"head.bn.beta", head_.bn.beta, ParamGroup::head, false});
    params.push_back({"head.fc2.weight", head_.w2, ParamGroup::head, true});
    params.push_back({"head.fc2.bias", head_.b2, ParamGroup::head, false});
    params.push_back({"gater_classifier.weight", classifier_w_, ParamGroup::gater_classifier, true});
    params.push_back({"gater_classifier.bias", classifier_b_, ParamGroup::gater_classifier, false});
  }
  return params;
}

template <typename T>
std::vector<NamedTensor<T>> GaterNet<T>::buffers() const {
  std::vector<NamedTensor<T>> params, buffers;
  backbone_.collect("backbone", ParamGroup::backbone, params, buffers);
  if (!spec_.gater.empty()) {
    gater_.collect("gater", ParamGroup::gater, params, buffers);
    buffers.push_back({"head.bn.running_mean", head_.bn.running_mean, ParamGroup::head, false});
    buffers.push_back({"head.bn.running_var", head_.bn.running_var, ParamGroup::head, false});
  }
  return buffers;
}

template <typename Dst, typename Src>
void copy_state(const GaterNet<Src>& src, GaterNet<Dst>& dst) {
  if (src.spec().hash() != dst.spec().hash()) throw ShapeError("copy_state: model specs differ");
  auto copy_all = [](const std::vector<NamedTensor<Src>>& from,
                     const std::vector<NamedTensor<Dst>>& to) {
    for (std::size_t i = 0; i < from.size(); ++i) {
      const auto s = from[i].tensor.data();
      auto d = to[i].tensor.mutable_data();
      for (std::size_t k = 0; k < s.size(); ++k) d[k] = static_cast<Dst>(s[k]);
    }
  };
  copy_all(src.parameters(), dst.parameters());
  copy_all(src.buffers(), dst.buffers());
}

// ---------------------------------------------------------------------------
// Parameter counts

ParamCounts param_count(const ModelSpec& spec) {
  ParamCounts counts;
  const Shape input{spec.input_channels, spec.input_height, spec.input_width};
  const auto bio = infer_shapes(spec.backbone, "backbone", input);
  for (std::size_t i = 0; i < bio.size(); ++i) counts.backbone += layer_param_count(spec.backbone[i], bio[i].in);
  if (!spec.gater.empty()) {
    const auto gio = infer_shapes(spec.gater, "gater", input);
    for (std::size_t i = 0; i < gio.size(); ++i) counts.gater += layer_param_count(spec.gater[i], gio[i].in);
    const std::size_t h = flat(gio.back().out);
    const std::size_t c = spec.gated_filter_total();
    const std::size_t b = spec.bottleneck;
    counts.head_weights = (h + c) * b;
    counts.single_layer_head_weights = h * c;
    counts.head = counts.head_weights + b /*b1*/ + 2 * b /*bn*/ + c /*b2*/;
  }
  counts.total = counts.backbone + counts.gater + counts.head;
  return counts;
}

template <typename T>
ParamCounts param_count(const GaterNet<T>& model) {
  ParamCounts counts;
  for (const auto& p : model.parameters()) {
    switch (p.group) {
      case ParamGroup::backbone: counts.backbone += p.tensor.numel(); break;
      case ParamGroup::gater: counts.gater += p.tensor.numel(); break;
      case ParamGroup::head: counts.head += p.tensor.numel(); break;
      case ParamGroup::gater_classifier: break;
    }
  }
  if (!model.spec().gater.empty()) {
    counts.head_weights = model.head().weight_count();
    counts.single_layer_head_weights = model.head().w1.size(0) * model.head().w2.size(1);
  }
  counts.total = counts.backbone + counts.gater + counts.head;
  return counts;
}

#define GATERNET_INSTANTIATE(T)                                                                  \
  template class Network<T>;                                                                     \
  template struct GaterHeadParams<T>;                                                            \
  template class GaterNet<T>;                                                                    \
  template BasicTensor<T> gated_conv_forward<T>(const BasicTensor<T>&, const Conv2dParams<T>&,   \
                                                const BatchNormParams<T>*, Mode,                 \
                                                const BasicTensor<T>&, bool);                    \
  template BasicTensor<T> selective_conv_reference<T>(                                           \
      const BasicTensor<T>&, const Conv2dParams<T>&, const BatchNormParams<T>*,                  \
      const BasicTensor<T>&, bool);                                                              \
  template BasicTensor<T> gater_head<T>(const BasicTensor<T>&, const GaterHeadParams<T>&, Mode); \
  template ParamCounts param_count<T>(const GaterNet<T>&);

GATERNET_INSTANTIATE(float)
GATERNET_INSTANTIATE(double)

#undef GATERNET_INSTANTIATE

template void copy_state<double, float>(const GaterNet<float>&, GaterNet<double>&);
template void copy_state<float, double>(const GaterNet<double>&, GaterNet<float>&);
template void copy_state<float, float>(const GaterNet<float>&, GaterNet<float>&);

}  // namespace gaternet
