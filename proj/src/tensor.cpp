#include "tensor.hpp"

#include <algorithm>
#include <cmath>

#include "errors.hpp"

namespace advcheck {

std::size_t shape_size(const Shape& shape) {
  if (shape.empty()) return 0;
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

Tensor::Tensor(Shape s, float fill) : shape(std::move(s)) {
  const auto n = shape_size(shape);
  if (n == 0) throw InvalidArgument("tensor shape must have positive size: " + shape_to_string(shape));
  data.assign(n, fill);
}

Tensor::Tensor(Shape s, std::vector<float> values) : shape(std::move(s)), data(std::move(values)) {
  const auto n = shape_size(shape);
  if (n == 0) throw InvalidArgument("tensor shape must have positive size: " + shape_to_string(shape));
  if (data.size() != n)
    throw ShapeMismatch("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                        shape_to_string(shape));
}

bool Tensor::all_finite() const noexcept {
  return std::all_of(data.begin(), data.end(), [](float v) { return std::isfinite(v); });
}

Tensor Tensor::flattened() const { return Tensor({data.size()}, data); }

float l2_norm(std::span<const float> v) {
  double acc = 0.0;
  for (float x : v) acc += double(x) * double(x);
  return float(std::sqrt(acc));
}

float linf_norm(std::span<const float> v) {
  float m = 0.0f;
  for (float x : v) m = std::max(m, std::fabs(x));
  return m;
}

float l2_distance(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw ShapeMismatch("l2_distance: length mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = double(a[i]) - double(b[i]);
    acc += d * d;
  }
  return float(std::sqrt(acc));
}

float linf_distance(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw ShapeMismatch("linf_distance: length mismatch");
  float m = 0.0f;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

std::size_t argmax(std::span<const float> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

std::vector<float> softmax(std::span<const float> logits) {
  std::vector<float> out(logits.size());
  if (logits.empty()) return out;
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  std::vector<double> e(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    e[i] = std::exp(double(logits[i]) - mx);
    sum += e[i];
  }
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = float(e[i] / sum);
  return out;
}

}  // namespace advcheck
