#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace advcheck {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/// Dense row-major float32 array. Images are stored channel-major (C, H, W).
struct Tensor {
  Shape shape;
  std::vector<float> data;

  Tensor() = default;
  explicit Tensor(Shape s, float fill = 0.0f);
  Tensor(Shape s, std::vector<float> values);

  std::size_t size() const noexcept { return data.size(); }
  std::span<float> span() noexcept { return data; }
  std::span<const float> span() const noexcept { return data; }
  float& operator[](std::size_t i) noexcept { return data[i]; }
  float operator[](std::size_t i) const noexcept { return data[i]; }

  bool all_finite() const noexcept;
  Tensor flattened() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

float l2_norm(std::span<const float> v);
float linf_norm(std::span<const float> v);
float l2_distance(std::span<const float> a, std::span<const float> b);
float linf_distance(std::span<const float> a, std::span<const float> b);

/// Index of the largest value; ties resolve to the lowest index.
std::size_t argmax(std::span<const float> v);

/// Numerically stable softmax in float64, rounded to float.
std::vector<float> softmax(std::span<const float> logits);

}  // namespace advcheck
