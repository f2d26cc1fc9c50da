#include "network.hpp"

#include <cmath>
#include <random>

#include "errors.hpp"

namespace advcheck::netcore {

namespace {

bool is_spatial(LayerKind k) { return k == LayerKind::conv2d || k == LayerKind::maxpool2d; }

void conv2d_forward(const LayerSpec& l, const Tensor& in, Tensor& out) {
  const auto C = l.input_shape[0], H = l.input_shape[1], W = l.input_shape[2];
  const auto K = l.output_shape[0], Ho = l.output_shape[1], Wo = l.output_shape[2];
  const auto k = l.kernel, s = l.stride;
  const auto p = static_cast<std::ptrdiff_t>(l.padding);
  for (std::size_t oc = 0; oc < K; ++oc) {
    for (std::size_t oy = 0; oy < Ho; ++oy) {
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        float acc = l.bias[oc];
        for (std::size_t ic = 0; ic < C; ++ic) {
          for (std::size_t ky = 0; ky < k; ++ky) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * s + ky) - p;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
            for (std::size_t kx = 0; kx < k; ++kx) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * s + kx) - p;
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
              acc += l.weight[((oc * C + ic) * k + ky) * k + kx] * in[(ic * H + iy) * W + ix];
            }
          }
        }
        out[(oc * Ho + oy) * Wo + ox] = acc;
      }
    }
  }
}

void conv2d_backward(const LayerSpec& l, const Tensor& in, const Tensor& grad_out, Tensor& grad_in,
                     Tensor* grad_w, Tensor* grad_b, float scale) {
  const auto C = l.input_shape[0], H = l.input_shape[1], W = l.input_shape[2];
  const auto K = l.output_shape[0], Ho = l.output_shape[1], Wo = l.output_shape[2];
  const auto k = l.kernel, s = l.stride;
  const auto p = static_cast<std::ptrdiff_t>(l.padding);
  for (std::size_t oc = 0; oc < K; ++oc) {
    for (std::size_t oy = 0; oy < Ho; ++oy) {
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        const float g = grad_out[(oc * Ho + oy) * Wo + ox];
        if (g == 0.0f) continue;
        if (grad_b) (*grad_b)[oc] += scale * g;
        for (std::size_t ic = 0; ic < C; ++ic) {
          for (std::size_t ky = 0; ky < k; ++ky) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * s + ky) - p;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
            for (std::size_t kx = 0; kx < k; ++kx) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * s + kx) - p;
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
              const auto wi = ((oc * C + ic) * k + ky) * k + kx;
              const auto xi = (ic * H + iy) * W + ix;
              grad_in[xi] += l.weight[wi] * g;
              if (grad_w) (*grad_w)[wi] += scale * g * in[xi];
            }
          }
        }
      }
    }
  }
}

// Window scan is row-major; the first maximal element wins.
std::size_t pool_argmax(const LayerSpec& l, const Tensor& in, std::size_t c, std::size_t oy, std::size_t ox) {
  const auto H = l.input_shape[1], W = l.input_shape[2];
  std::size_t best = (c * H + oy * l.stride) * W + ox * l.stride;
  for (std::size_t ky = 0; ky < l.kernel; ++ky)
    for (std::size_t kx = 0; kx < l.kernel; ++kx) {
      const auto idx = (c * H + oy * l.stride + ky) * W + ox * l.stride + kx;
      if (in[idx] > in[best]) best = idx;
    }
  return best;
}

void maxpool_forward(const LayerSpec& l, const Tensor& in, Tensor& out) {
  const auto C = l.output_shape[0], Ho = l.output_shape[1], Wo = l.output_shape[2];
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox) out[(c * Ho + oy) * Wo + ox] = in[pool_argmax(l, in, c, oy, ox)];
}

void maxpool_backward(const LayerSpec& l, const Tensor& in, const Tensor& grad_out, Tensor& grad_in) {
  const auto C = l.output_shape[0], Ho = l.output_shape[1], Wo = l.output_shape[2];
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox)
        grad_in[pool_argmax(l, in, c, oy, ox)] += grad_out[(c * Ho + oy) * Wo + ox];
}

void dense_forward(const LayerSpec& l, const Tensor& in, Tensor& out) {
  const auto N = l.input_shape[0], U = l.units;
  for (std::size_t u = 0; u < U; ++u) {
    float acc = l.bias[u];
    const float* w = &l.weight.data[u * N];
    for (std::size_t i = 0; i < N; ++i) acc += w[i] * in[i];
    out[u] = acc;
  }
}

void dense_backward(const LayerSpec& l, const Tensor& in, const Tensor& grad_out, Tensor& grad_in, Tensor* grad_w,
                    Tensor* grad_b, float scale) {
  const auto N = l.input_shape[0], U = l.units;
  for (std::size_t u = 0; u < U; ++u) {
    const float g = grad_out[u];
    if (g == 0.0f) continue;
    const float* w = &l.weight.data[u * N];
    for (std::size_t i = 0; i < N; ++i) grad_in[i] += w[i] * g;
    if (grad_w) {
      float* gw = &grad_w->data[u * N];
      for (std::size_t i = 0; i < N; ++i) gw[i] += scale * g * in[i];
    }
    if (grad_b) (*grad_b)[u] += scale * g;
  }
}

void layer_forward(const LayerSpec& l, const Tensor& in, Tensor& out) {
  switch (l.kind) {
    case LayerKind::conv2d: conv2d_forward(l, in, out); break;
    case LayerKind::maxpool2d: maxpool_forward(l, in, out); break;
    case LayerKind::dense: dense_forward(l, in, out); break;
    case LayerKind::relu:
      for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] > 0.0f ? in[i] : 0.0f;
      break;
    case LayerKind::flatten: out.data = in.data; break;
    case LayerKind::softmax: out.data = softmax(in.span()); break;
  }
}

// grad_in must be zero-filled on entry. Parameter gradients are accumulated scaled by `scale`.
void layer_backward(const LayerSpec& l, const Tensor& in, const Tensor& out, const Tensor& grad_out, Tensor& grad_in,
                    Tensor* grad_w, Tensor* grad_b, float scale) {
  switch (l.kind) {
    case LayerKind::conv2d: conv2d_backward(l, in, grad_out, grad_in, grad_w, grad_b, scale); break;
    case LayerKind::maxpool2d: maxpool_backward(l, in, grad_out, grad_in); break;
    case LayerKind::dense: dense_backward(l, in, grad_out, grad_in, grad_w, grad_b, scale); break;
    case LayerKind::relu:
      // subgradient at exactly 0 is 0
      for (std::size_t i = 0; i < in.size(); ++i) grad_in[i] = in[i] > 0.0f ? grad_out[i] : 0.0f;
      break;
    case LayerKind::flatten: grad_in.data = grad_out.data; break;
    case LayerKind::softmax: {
      double dot = 0.0;
      for (std::size_t i = 0; i < out.size(); ++i) dot += double(grad_out[i]) * out[i];
      for (std::size_t i = 0; i < out.size(); ++i) grad_in[i] = float(out[i] * (grad_out[i] - dot));
      break;
    }
  }
}

Shape resolve_output(LayerSpec& l, const Shape& in, std::size_t index) {
  const auto where = "layer " + std::to_string(index) + " (" + std::string(to_string(l.kind)) + ")";
  switch (l.kind) {
    case LayerKind::conv2d: {
      if (in.size() != 3) throw StructureError(where + " expects a (C,H,W) input, got " + shape_to_string(in));
      if (l.out_channels == 0 || l.kernel == 0 || l.stride == 0)
        throw StructureError(where + ": out_channels, kernel and stride must be positive");
      const auto H = in[1] + 2 * l.padding, W = in[2] + 2 * l.padding;
      if (H < l.kernel || W < l.kernel) throw StructureError(where + ": kernel larger than padded input");
      return {l.out_channels, (H - l.kernel) / l.stride + 1, (W - l.kernel) / l.stride + 1};
    }
    case LayerKind::maxpool2d: {
      if (in.size() != 3) throw StructureError(where + " expects a (C,H,W) input, got " + shape_to_string(in));
      if (l.kernel == 0 || l.stride == 0) throw StructureError(where + ": kernel and stride must be positive");
      if (in[1] < l.kernel || in[2] < l.kernel) throw StructureError(where + ": kernel larger than input");
      return {in[0], (in[1] - l.kernel) / l.stride + 1, (in[2] - l.kernel) / l.stride + 1};
    }
    case LayerKind::dense:
      if (in.size() != 1) throw StructureError(where + " expects a flat input, got " + shape_to_string(in));
      if (l.units == 0) throw StructureError(where + ": units must be positive");
      return {l.units};
    case LayerKind::flatten: return {shape_size(in)};
    case LayerKind::relu:
    case LayerKind::softmax: return in;
  }
  return in;
}

void check_parameter(Tensor& t, const Shape& expected, const std::string& what) {
  if (t.data.empty()) {
    t = Tensor(expected);
    return;
  }
  if (t.shape != expected)
    throw ShapeMismatch(what + " has shape " + shape_to_string(t.shape) + ", expected " + shape_to_string(expected));
}

void check_finite(const Tensor& t, std::size_t layer) {
  if (!t.all_finite()) throw NumericError("non-finite value in output of layer " + std::to_string(layer));
}

}  // namespace

std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::maxpool2d: return "maxpool2d";
    case LayerKind::dense: return "dense";
    case LayerKind::relu: return "relu";
    case LayerKind::flatten: return "flatten";
    case LayerKind::softmax: return "softmax";
  }
  return "unknown";
}

LayerKind layer_kind_from_string(std::string_view name) {
  for (auto k : {LayerKind::conv2d, LayerKind::maxpool2d, LayerKind::dense, LayerKind::relu, LayerKind::flatten,
                 LayerKind::softmax})
    if (to_string(k) == name) return k;
  throw InvalidArgument("unknown layer kind '" + std::string(name) + "'");
}

std::string_view to_string(GradientTarget target) {
  return target == GradientTarget::logit ? "logit" : "probability";
}

GradientTarget gradient_target_from_string(std::string_view name) {
  if (name == "logit") return GradientTarget::logit;
  if (name == "probability") return GradientTarget::probability;
  throw InvalidArgument("unknown gradient target '" + std::string(name) + "'");
}

LayerSpec LayerSpec::conv2d(std::size_t out_channels, std::size_t kernel, std::size_t stride, std::size_t padding) {
  LayerSpec l;
  l.kind = LayerKind::conv2d;
  l.out_channels = out_channels;
  l.kernel = kernel;
  l.stride = stride;
  l.padding = padding;
  return l;
}

LayerSpec LayerSpec::maxpool2d(std::size_t kernel, std::size_t stride) {
  LayerSpec l;
  l.kind = LayerKind::maxpool2d;
  l.kernel = kernel;
  l.stride = stride == 0 ? kernel : stride;
  return l;
}

LayerSpec LayerSpec::dense(std::size_t units) {
  LayerSpec l;
  l.kind = LayerKind::dense;
  l.units = units;
  return l;
}

LayerSpec LayerSpec::relu() { return LayerSpec{}; }

LayerSpec LayerSpec::flatten() {
  LayerSpec l;
  l.kind = LayerKind::flatten;
  return l;
}

LayerSpec LayerSpec::softmax() {
  LayerSpec l;
  l.kind = LayerKind::softmax;
  return l;
}

std::string LayerSpec::name(std::size_t index) const { return std::string(to_string(kind)) + "_" + std::to_string(index); }

Network::Network(Shape input_shape, std::vector<LayerSpec> layers)
    : input_shape_(std::move(input_shape)), layers_(std::move(layers)) {
  if (shape_size(input_shape_) == 0) throw StructureError("network input shape must have positive size");
  if (layers_.empty()) throw StructureError("network has no layers");

  std::size_t flatten_count = 0;
  bool seen_dense = false;
  Shape shape = input_shape_;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    auto& l = layers_[i];
    if (l.kind == LayerKind::flatten) {
      if (seen_dense) throw StructureError("flatten layer " + std::to_string(i) + " follows a dense layer");
      ++flatten_count;
    }
    if (is_spatial(l.kind) && (flatten_count > 0 || seen_dense))
      throw StructureError("spatial layer " + std::to_string(i) + " after flatten/dense");
    if (l.kind == LayerKind::dense) {
      if (input_shape_.size() > 1 && flatten_count == 0)
        throw StructureError("dense layer " + std::to_string(i) + " before the flatten layer");
      seen_dense = true;
    }
    if (l.kind == LayerKind::softmax && i + 1 != layers_.size())
      throw StructureError("softmax is only allowed as the final layer");
    l.input_shape = shape;
    l.output_shape = resolve_output(l, shape, i);
    const auto where = "layer " + std::to_string(i);
    if (l.kind == LayerKind::conv2d) {
      check_parameter(l.weight, {l.out_channels, shape[0], l.kernel, l.kernel}, where + " weight");
      check_parameter(l.bias, {l.out_channels}, where + " bias");
    } else if (l.kind == LayerKind::dense) {
      check_parameter(l.weight, {l.units, shape[0]}, where + " weight");
      check_parameter(l.bias, {l.units}, where + " bias");
    } else if (!l.weight.data.empty() || !l.bias.data.empty()) {
      throw StructureError(where + " (" + std::string(to_string(l.kind)) + ") cannot carry parameters");
    }
    shape = l.output_shape;
  }
  if (flatten_count > 1) throw StructureError("network contains more than one flatten layer");
  if (input_shape_.size() > 1 && flatten_count == 0) throw StructureError("network with spatial input needs a flatten layer");

  logit_layer_ = layers_.back().kind == LayerKind::softmax ? layers_.size() - 2 : layers_.size() - 1;
  if (layers_.size() == 1 && layers_.back().kind == LayerKind::softmax)
    throw StructureError("network has no layer producing logits");
  const auto& logit_shape = layers_[logit_layer_].output_shape;
  if (logit_shape.size() != 1) throw StructureError("final layer must produce a flat logit vector");
  class_count_ = logit_shape[0];
}

Network Network::initialized(Shape input_shape, std::vector<LayerSpec> layers, std::uint64_t seed) {
  Network net(std::move(input_shape), std::move(layers));
  std::mt19937_64 rng(seed);
  for (auto& l : net.layers_) {
    if (!l.has_parameters()) continue;
    double fan_in = 0, fan_out = 0;
    if (l.kind == LayerKind::conv2d) {
      fan_in = double(l.input_shape[0] * l.kernel * l.kernel);
      fan_out = double(l.out_channels * l.kernel * l.kernel);
    } else {
      fan_in = double(l.input_shape[0]);
      fan_out = double(l.units);
    }
    const float limit = float(std::sqrt(6.0 / (fan_in + fan_out)));
    std::uniform_real_distribution<float> dist(-limit, limit);
    for (auto& w : l.weight.data) w = dist(rng);
    std::fill(l.bias.data.begin(), l.bias.data.end(), 0.0f);
  }
  return net;
}

std::size_t Network::parameter_count() const noexcept {
  std::size_t n = 0;
  for (const auto& l : layers_) n += l.weight.size() + l.bias.size();
  return n;
}

void Network::check_input(const Tensor& x) const {
  if (x.shape != input_shape_)
    throw ShapeMismatch("input shape " + shape_to_string(x.shape) + " does not match network input " +
                        shape_to_string(input_shape_));
}

ForwardTrace Network::forward(const Tensor& x) const {
  check_input(x);
  ForwardTrace trace;
  trace.outputs.reserve(layers_.size());
  const Tensor* in = &x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    Tensor out(layers_[i].output_shape);
    layer_forward(layers_[i], *in, out);
    check_finite(out, i);
    trace.outputs.push_back(std::move(out));
    in = &trace.outputs.back();
  }
  trace.logits = trace.outputs[logit_layer_].data;
  trace.predicted = argmax(trace.logits);
  return trace;
}

std::vector<float> Network::logits(const Tensor& x) const { return forward(x).logits; }

std::size_t Network::predict(const Tensor& x) const { return forward(x).predicted; }

Tensor Network::backward(const Tensor& x, const ForwardTrace& trace, std::size_t top, Tensor grad, std::size_t bottom,
                         ParameterGradients* param_grads) const {
  // Walk layers top, top-1, ..., bottom+1 (or down to 0 for the input).
  std::size_t i = top + 1;
  const std::size_t stop = bottom == input_layer ? 0 : bottom + 1;
  while (i > stop) {
    --i;
    const auto& l = layers_[i];
    const Tensor& in = i == 0 ? x : trace.outputs[i - 1];
    Tensor grad_in(l.input_shape);
    Tensor* gw = param_grads && l.has_parameters() ? &param_grads->weight[i] : nullptr;
    Tensor* gb = param_grads && l.has_parameters() ? &param_grads->bias[i] : nullptr;
    layer_backward(l, in, trace.outputs[i], grad, grad_in, gw, gb, 1.0f);
    grad = std::move(grad_in);
  }
  if (!grad.all_finite()) throw NumericError("non-finite gradient");
  return grad;
}

namespace {

// d loss / d logits for the supported input losses.
Tensor loss_gradient(const ForwardTrace& trace, const InputLoss& loss, std::size_t classes) {
  Tensor g({classes});
  if (const auto* ce = std::get_if<CrossEntropyLoss>(&loss)) {
    if (ce->label >= classes) throw InvalidArgument("label out of range");
    const auto p = softmax(trace.logits);
    for (std::size_t k = 0; k < classes; ++k) g[k] = p[k];
    g[ce->label] -= 1.0f;
  } else {
    const auto& lg = std::get<LogitLoss>(loss);
    if (lg.class_index >= classes) throw InvalidArgument("class index out of range");
    g[lg.class_index] = 1.0f;
  }
  return g;
}

}  // namespace

Tensor Network::grad_wrt_input(const Tensor& x, const InputLoss& loss) const {
  const auto trace = forward(x);
  return backward(x, trace, logit_layer_, loss_gradient(trace, loss, class_count_), input_layer, nullptr);
}

Tensor Network::grad_wrt_layer(const Tensor& x, std::size_t layer_index, std::size_t class_index,
                               GradientTarget target) const {
  return grad_wrt_layer(forward(x), x, layer_index, class_index, target);
}

Tensor Network::grad_wrt_layer(const ForwardTrace& trace, const Tensor& x, std::size_t layer_index,
                               std::size_t class_index, GradientTarget target) const {
  if (layer_index >= layers_.size())
    throw InvalidArgument("layer index " + std::to_string(layer_index) + " out of range [0, " +
                          std::to_string(layers_.size()) + ")");
  if (class_index >= class_count_)
    throw InvalidArgument("class index " + std::to_string(class_index) + " out of range [0, " +
                          std::to_string(class_count_) + ")");
  if (layer_index > logit_layer_) {
    // Only a trailing softmax sits above the logits.
    if (target == GradientTarget::logit)
      throw InvalidArgument("the logit does not depend on the softmax layer's output");
    Tensor g(layers_[layer_index].output_shape);
    g[class_index] = 1.0f;
    return g;
  }
  Tensor g({class_count_});
  if (target == GradientTarget::logit) {
    g[class_index] = 1.0f;
  } else {
    // d p_c / d z_k = p_c (delta_ck - p_k)
    const auto p = softmax(trace.logits);
    for (std::size_t k = 0; k < class_count_; ++k) g[k] = -p[class_index] * p[k];
    g[class_index] += p[class_index];
  }
  return backward(x, trace, logit_layer_, std::move(g), layer_index, nullptr);
}

double Network::accumulate_cross_entropy(const Tensor& x, std::size_t label, float weight,
                                         ParameterGradients& grads) const {
  const auto trace = forward(x);
  if (label >= class_count_) throw InvalidArgument("label out of range");
  const auto p = softmax(trace.logits);
  Tensor g({class_count_});
  for (std::size_t k = 0; k < class_count_; ++k) g[k] = weight * p[k];
  g[label] -= weight;
  backward(x, trace, logit_layer_, std::move(g), input_layer, &grads);
  return -std::log(std::max(double(p[label]), 1e-30));
}

ParameterGradients Network::zero_gradients() const {
  ParameterGradients g;
  g.weight.resize(layers_.size());
  g.bias.resize(layers_.size());
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (!layers_[i].has_parameters()) continue;
    g.weight[i] = Tensor(layers_[i].weight.shape);
    g.bias[i] = Tensor(layers_[i].bias.shape);
  }
  return g;
}

}  // namespace advcheck::netcore
