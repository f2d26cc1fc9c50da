#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "tensor.hpp"

namespace advcheck::dataio {

enum class Split { train, validation };

struct LabeledDataset {
  std::vector<Tensor> images;
  std::vector<std::size_t> labels;
  std::size_t class_count = 0;
  Split split = Split::train;

  std::size_t size() const noexcept { return images.size(); }
  bool empty() const noexcept { return images.empty(); }
  const Shape& image_shape() const;

  /// Throws DataError unless images/labels agree, labels are < class_count, shapes are common and
  /// every pixel lies in [0, 1].
  void validate() const;
};

/// Reads an IDX3 image file (magic 0x00000803) and an IDX1 label file (magic 0x00000801).
/// Pixels are scaled by 1/255; images become (1, rows, cols) tensors.
LabeledDataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                        std::size_t class_count = 10);

/// Writes images (quantized to bytes, round-to-nearest) and labels as IDX files.
void save_idx(const LabeledDataset& data, const std::filesystem::path& images_path,
              const std::filesystem::path& labels_path);

/// Reads a bare IDX3 image file without labels (used for single-image inference).
std::vector<Tensor> load_idx_images(const std::filesystem::path& images_path);

enum class SynthKind { gaussian_blobs, striped_patterns };

std::string_view to_string(SynthKind kind);
SynthKind synth_kind_from_string(std::string_view name);

/// Deterministic synthetic image classification data: label i % classes for item i, class-dependent
/// structure plus per-pixel Gaussian noise (sigma 0.05), clipped to [0, 1]. Images are (1, side, side).
LabeledDataset synth_dataset(SynthKind kind, std::size_t n, std::size_t classes, std::size_t image_side,
                             std::uint64_t seed);

}  // namespace advcheck::dataio
