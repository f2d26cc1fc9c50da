#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "tensor.hpp"

namespace advcheck::netcore {

enum class LayerKind { conv2d, maxpool2d, dense, relu, flatten, softmax };

std::string_view to_string(LayerKind kind);
LayerKind layer_kind_from_string(std::string_view name);

/// One layer of a Network. Hyperparameters that do not apply to `kind` stay zero;
/// `weight`/`bias` are empty for parameter-free layers. Shapes are resolved by Network.
struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::size_t out_channels = 0;  // conv2d
  std::size_t kernel = 0;        // conv2d, maxpool2d
  std::size_t stride = 1;        // conv2d, maxpool2d
  std::size_t padding = 0;       // conv2d
  std::size_t units = 0;         // dense
  Tensor weight;
  Tensor bias;
  Shape input_shape;
  Shape output_shape;

  static LayerSpec conv2d(std::size_t out_channels, std::size_t kernel, std::size_t stride = 1,
                          std::size_t padding = 0);
  static LayerSpec maxpool2d(std::size_t kernel, std::size_t stride = 0);
  static LayerSpec dense(std::size_t units);
  static LayerSpec relu();
  static LayerSpec flatten();
  static LayerSpec softmax();

  bool has_parameters() const noexcept { return kind == LayerKind::conv2d || kind == LayerKind::dense; }
  std::string name(std::size_t index) const;

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct ForwardTrace {
  std::vector<Tensor> outputs;  // outputs[i] is layer i's output
  std::vector<float> logits;    // pre-softmax class scores
  std::size_t predicted = 0;
};

/// Cross-entropy of the softmax over logits against `label`.
struct CrossEntropyLoss {
  std::size_t label;
};
/// The raw logit of `class_index`.
struct LogitLoss {
  std::size_t class_index;
};
using InputLoss = std::variant<CrossEntropyLoss, LogitLoss>;

/// Which scalar the layer gradient differentiates: the class logit or its softmax probability.
enum class GradientTarget { logit, probability };

std::string_view to_string(GradientTarget target);
GradientTarget gradient_target_from_string(std::string_view name);

/// Parameter gradients laid out like the network's layers; empty tensors for parameter-free layers.
struct ParameterGradients {
  std::vector<Tensor> weight;
  std::vector<Tensor> bias;
};

class Network {
 public:
  static constexpr std::size_t input_layer = std::numeric_limits<std::size_t>::max();

  Network() = default;

  /// Validates the layer stack and resolves shapes. Layers with parameters must either carry
  /// correctly shaped tensors or none at all (then they are zero-filled).
  Network(Shape input_shape, std::vector<LayerSpec> layers);

  /// Builds the network and draws weights uniformly in [-s, s], s = sqrt(6 / (fan_in + fan_out));
  /// biases start at zero.
  static Network initialized(Shape input_shape, std::vector<LayerSpec> layers, std::uint64_t seed);

  const Shape& input_shape() const noexcept { return input_shape_; }
  const std::vector<LayerSpec>& layers() const noexcept { return layers_; }
  std::vector<LayerSpec>& mutable_layers() noexcept { return layers_; }
  std::size_t layer_count() const noexcept { return layers_.size(); }
  std::size_t class_count() const noexcept { return class_count_; }
  /// Index of the layer whose output is the logit vector (the last layer unless a softmax follows).
  std::size_t logit_layer() const noexcept { return logit_layer_; }
  std::size_t parameter_count() const noexcept;

  ForwardTrace forward(const Tensor& x) const;
  std::vector<float> logits(const Tensor& x) const;
  std::size_t predict(const Tensor& x) const;

  Tensor grad_wrt_input(const Tensor& x, const InputLoss& loss) const;

  /// Derivative of the class score of `class_index` with respect to the output of `layer_index`.
  Tensor grad_wrt_layer(const Tensor& x, std::size_t layer_index, std::size_t class_index,
                        GradientTarget target = GradientTarget::logit) const;
  Tensor grad_wrt_layer(const ForwardTrace& trace, const Tensor& x, std::size_t layer_index,
                        std::size_t class_index, GradientTarget target = GradientTarget::logit) const;

  /// Adds `weight` times the cross-entropy gradient for (x, label) into `grads` and returns the
  /// unweighted loss.
  double accumulate_cross_entropy(const Tensor& x, std::size_t label, float weight,
                                  ParameterGradients& grads) const;

  ParameterGradients zero_gradients() const;

  friend bool operator==(const Network&, const Network&) = default;

 private:
  void check_input(const Tensor& x) const;
  // Propagates `grad` (w.r.t. the output of layer `top`) down to the output of layer `bottom`, or to
  // the network input when bottom == input_layer.
  Tensor backward(const Tensor& x, const ForwardTrace& trace, std::size_t top, Tensor grad,
                  std::size_t bottom, ParameterGradients* param_grads) const;

  Shape input_shape_;
  std::vector<LayerSpec> layers_;
  std::size_t class_count_ = 0;
  std::size_t logit_layer_ = 0;
};

}  // namespace advcheck::netcore
