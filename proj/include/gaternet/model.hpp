#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "gaternet/layers.hpp"
#include "gaternet/rng.hpp"
#include "gaternet/semhash.hpp"
#include "gaternet/tensor.hpp"

namespace gaternet {

enum class LayerKind { conv, maxpool, global_avg_pool, fc };

const char* to_string(LayerKind kind);
LayerKind layer_kind_from_string(const std::string& name);

// One entry of a network description. A conv entry is a block
// conv -> [batchnorm] -> [relu]; when `gated`, its output channels are
// multiplied by the matching slice of the gate vector after the block.
// The conv carries a bias only when batchnorm is off. For maxpool, `kernel`
// and `stride` describe the window. For fc, `filters` is the unit count and
// a 4-D input is flattened.
struct LayerDesc {
  LayerKind kind = LayerKind::conv;
  std::size_t filters = 0;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 1;
  bool batchnorm = true;
  bool relu = true;
  bool gated = false;

  bool operator==(const LayerDesc&) const = default;
};

struct ModelSpec {
  std::size_t input_channels = 3;
  std::size_t input_height = 32;
  std::size_t input_width = 32;
  std::vector<LayerDesc> backbone;
  std::vector<LayerDesc> gater;  // feature extractor E(x)
  std::size_t bottleneck = 8;    // b
  std::size_t num_classes = 10;  // K

  // c: number of filters across gated backbone layers.
  std::size_t gated_filter_total() const;
  // h: width of the gater's pooled feature vector.
  std::size_t feature_size() const;
  // Throws ConfigError on an inconsistent description.
  void validate() const;
  // Stable textual form; the checkpoint compatibility hash is taken over it.
  std::string canonical() const;
  std::uint64_t hash() const;

  bool operator==(const ModelSpec&) const = default;
};

struct GateSlot {
  std::size_t layer;   // index into ModelSpec::backbone
  std::size_t filter;  // output channel within that layer

  bool operator==(const GateSlot&) const = default;
};

// Gate index <-> (layer, filter). Gates are ordered by layer, then filter.
class GateIndexMap {
 public:
  GateIndexMap() = default;
  explicit GateIndexMap(const std::vector<LayerDesc>& backbone);

  std::size_t size() const { return slots_.size(); }
  const GateSlot& slot(std::size_t index) const { return slots_.at(index); }
  std::size_t index(std::size_t layer, std::size_t filter) const;
  // First gate index of a gated layer.
  std::size_t offset(std::size_t layer) const;
  const std::vector<GateSlot>& slots() const { return slots_; }

 private:
  std::vector<GateSlot> slots_;
  std::vector<std::optional<std::size_t>> offsets_;  // per backbone layer
};

enum class ParamGroup { backbone, gater, head, gater_classifier };
const char* to_string(ParamGroup group);

template <typename T>
struct NamedTensor {
  std::string name;
  BasicTensor<T> tensor;
  ParamGroup group;
  bool decay = true;  // weight decay applies (conv/fc weights only)
};

template <typename T>
struct LayerState {
  LayerDesc desc;
  Conv2dParams<T> conv;
  std::optional<BatchNormParams<T>> bn;
  BasicTensor<T> fc_weight;
  BasicTensor<T> fc_bias;
  std::size_t gate_offset = 0;
};

// A feed-forward stack built from LayerDesc entries.
template <typename T>
class Network {
 public:
  Network() = default;
  Network(const std::vector<LayerDesc>& descs, std::size_t channels, std::size_t height,
          std::size_t width, Rng& rng);

  // `gates` is the full N x c gate matrix, or null for the ungated network.
  BasicTensor<T> forward(const BasicTensor<T>& x, Mode mode,
                         const BasicTensor<T>* gates = nullptr) const;

  const std::vector<LayerState<T>>& layers() const { return layers_; }
  std::vector<LayerState<T>>& layers() { return layers_; }
  std::size_t output_width() const { return output_width_; }

  void collect(const std::string& prefix, ParamGroup group, std::vector<NamedTensor<T>>& params,
               std::vector<NamedTensor<T>>& buffers) const;

 private:
  std::vector<LayerState<T>> layers_;
  std::size_t output_width_ = 0;
};

// conv -> [bn] -> relu -> multiply channel i of sample n by gates[n, i].
template <typename T>
BasicTensor<T> gated_conv_forward(const BasicTensor<T>& input, const Conv2dParams<T>& conv,
                                  const BatchNormParams<T>* bn, Mode mode,
                                  const BasicTensor<T>& gates, bool apply_relu = true);

// Selective evaluation: for every sample only filters with gate 1 are
// convolved; filters with gate 0 produce an all-zero map. Batchnorm, when
// present, uses running statistics. Reference path only; never trained.
template <typename T>
BasicTensor<T> selective_conv_reference(const BasicTensor<T>& input, const Conv2dParams<T>& conv,
                                        const BatchNormParams<T>* bn, const BasicTensor<T>& gates,
                                        bool apply_relu = true);

// D(f): FC2(relu(batchnorm(FC1(f)))) with an h -> b -> c bottleneck.
template <typename T>
struct GaterHeadParams {
  BasicTensor<T> w1;  // h x b
  BasicTensor<T> b1;  // b
  BatchNormParams<T> bn;
  BasicTensor<T> w2;  // b x c
  BasicTensor<T> b2;  // c

  // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero b1, b2 = gate_bias.
  static GaterHeadParams init(std::size_t h, std::size_t b, std::size_t c, Rng& rng,
                              T gate_bias = T(1));
  std::size_t weight_count() const { return w1.numel() + w2.numel(); }
};

template <typename T>
BasicTensor<T> gater_head(const BasicTensor<T>& features, const GaterHeadParams<T>& p, Mode mode);

struct ForwardOptions {
  BranchPolicy policy = BranchPolicy::random;
  double dropout_rate = 0.0;  // gate dropout, training only
};

template <typename T>
struct GaterNetOutput {
  BasicTensor<T> logits;
  GateBundle<T> bundle;
  BasicTensor<T> gates;  // gates fed to the backbone (after dropout)
};

template <typename T>
class GaterNet {
 public:
  GaterNet(ModelSpec spec, Rng& rng);
  // Parameter handles share storage, so copies would alias; use copy_state.
  GaterNet(const GaterNet&) = delete;
  GaterNet& operator=(const GaterNet&) = delete;
  GaterNet(GaterNet&&) noexcept = default;
  GaterNet& operator=(GaterNet&&) noexcept = default;

  const ModelSpec& spec() const { return spec_; }
  const GateIndexMap& gate_map() const { return gate_map_; }
  Network<T>& backbone() { return backbone_; }
  const Network<T>& backbone() const { return backbone_; }
  Network<T>& gater() { return gater_; }
  const Network<T>& gater() const { return gater_; }
  GaterHeadParams<T>& head() { return head_; }
  const GaterHeadParams<T>& head() const { return head_; }

  // E(x): [N x h]
  BasicTensor<T> gater_features(const BasicTensor<T>& x, Mode mode) const;
  // g' = D(E(x)): [N x c]
  BasicTensor<T> gate_logits(const BasicTensor<T>& x, Mode mode) const;

  GaterNetOutput<T> forward(const BasicTensor<T>& x, Mode mode, Rng& rng,
                            const ForwardOptions& options = {}) const;
  // Backbone with every gate on (no masking at all).
  BasicTensor<T> forward_ungated(const BasicTensor<T>& x, Mode mode) const;
  BasicTensor<T> forward_with_gates(const BasicTensor<T>& x, Mode mode,
                                    const BasicTensor<T>& gates) const;
  // Gater as a standalone classifier: temporary linear layer on E(x).
  BasicTensor<T> gater_classifier_logits(const BasicTensor<T>& x, Mode mode) const;

  // Fresh bottleneck head, as at the start of joint training.
  void reset_head(Rng& rng, T gate_bias = T(1));

  std::vector<NamedTensor<T>> parameters() const;
  std::vector<NamedTensor<T>> buffers() const;

 private:
  void check_input(const BasicTensor<T>& x) const;

  ModelSpec spec_;
  GateIndexMap gate_map_;
  Network<T> backbone_;
  Network<T> gater_;
  GaterHeadParams<T> head_;
  BasicTensor<T> classifier_w_;  // h x K, pretraining only
  BasicTensor<T> classifier_b_;
};

// Copies parameter and buffer values between models with the same spec.
template <typename Dst, typename Src>
void copy_state(const GaterNet<Src>& src, GaterNet<Dst>& dst);

struct ParamCounts {
  std::size_t backbone = 0;
  std::size_t gater = 0;            // feature extractor E
  std::size_t head = 0;             // D including biases and batchnorm affine
  std::size_t head_weights = 0;     // (h + c) * b
  std::size_t single_layer_head_weights = 0;  // h * c, for comparison
  std::size_t total = 0;            // backbone + gater + head
};

// Analytic tallies from the spec alone.
ParamCounts param_count(const ModelSpec& spec);

// Tallies of the tensors a built model actually holds.
template <typename T>
ParamCounts param_count(const GaterNet<T>& model);

}  // namespace gaternet
