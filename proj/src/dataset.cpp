#include "dataset.hpp"

#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>
#include <random>

#include "errors.hpp"

namespace advcheck::dataio {

namespace {

constexpr std::uint32_t kImageMagic = 0x00000803;
constexpr std::uint32_t kLabelMagic = 0x00000801;
constexpr float kPixelNoiseSigma = 0.05f;

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// IDX header integers are big-endian.
std::uint32_t read_be32(const std::vector<unsigned char>& buf, std::size_t offset, const std::string& field) {
  if (buf.size() < offset + 4) throw FormatError(field, "file truncated in header");
  return (std::uint32_t(buf[offset]) << 24) | (std::uint32_t(buf[offset + 1]) << 16) |
         (std::uint32_t(buf[offset + 2]) << 8) | std::uint32_t(buf[offset + 3]);
}

void write_be32(std::ofstream& out, std::uint32_t v) {
  const char bytes[4] = {char(v >> 24), char(v >> 16), char(v >> 8), char(v)};
  out.write(bytes, 4);
}

struct IdxImages {
  std::uint32_t count = 0, rows = 0, cols = 0;
  std::vector<Tensor> images;
};

IdxImages parse_images(const std::filesystem::path& path) {
  const auto buf = read_file(path);
  if (read_be32(buf, 0, "images.magic") != kImageMagic)
    throw FormatError("images.magic", "expected 0x00000803 in " + path.string());
  IdxImages out;
  out.count = read_be32(buf, 4, "images.count");
  out.rows = read_be32(buf, 8, "images.rows");
  out.cols = read_be32(buf, 12, "images.cols");
  if (out.rows == 0 || out.cols == 0) throw FormatError("images.rows", "zero image dimension");
  const std::size_t pixels = std::size_t(out.rows) * out.cols;
  if (buf.size() < 16 + pixels * out.count)
    throw FormatError("images.data", "file truncated: expected " + std::to_string(pixels * out.count) +
                                         " pixel bytes, found " + std::to_string(buf.size() - 16));
  out.images.reserve(out.count);
  for (std::size_t i = 0; i < out.count; ++i) {
    Tensor t({1, out.rows, out.cols});
    for (std::size_t p = 0; p < pixels; ++p) t[p] = float(buf[16 + i * pixels + p]) / 255.0f;
    out.images.push_back(std::move(t));
  }
  return out;
}

}  // namespace

const Shape& LabeledDataset::image_shape() const {
  if (images.empty()) throw DataError("dataset is empty");
  return images.front().shape;
}

void LabeledDataset::validate() const {
  if (images.size() != labels.size())
    throw DataError("image count " + std::to_string(images.size()) + " != label count " +
                    std::to_string(labels.size()));
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (labels[i] >= class_count)
      throw DataError("label " + std::to_string(labels[i]) + " at index " + std::to_string(i) + " >= class count " +
                      std::to_string(class_count));
    if (images[i].shape != images.front().shape) throw DataError("image " + std::to_string(i) + " has a different shape");
    for (float v : images[i].data)
      if (!(v >= 0.0f && v <= 1.0f)) throw DataError("pixel outside [0,1] in image " + std::to_string(i));
  }
}

LabeledDataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                        std::size_t class_count) {
  auto imgs = parse_images(images_path);
  const auto lbuf = read_file(labels_path);
  if (read_be32(lbuf, 0, "labels.magic") != kLabelMagic)
    throw FormatError("labels.magic", "expected 0x00000801 in " + labels_path.string());
  const auto label_count = read_be32(lbuf, 4, "labels.count");
  if (label_count != imgs.count)
    throw FormatError("count", "image file holds " + std::to_string(imgs.count) + " items but label file holds " +
                                   std::to_string(label_count));
  if (lbuf.size() < 8 + std::size_t(label_count))
    throw FormatError("labels.data", "file truncated: expected " + std::to_string(label_count) + " label bytes");

  LabeledDataset ds;
  ds.class_count = class_count;
  ds.images = std::move(imgs.images);
  ds.labels.reserve(label_count);
  for (std::size_t i = 0; i < label_count; ++i) {
    const std::size_t label = lbuf[8 + i];
    if (label >= class_count)
      throw FormatError("labels.data", "label " + std::to_string(label) + " at index " + std::to_string(i) +
                                           " exceeds class count " + std::to_string(class_count));
    ds.labels.push_back(label);
  }
  return ds;
}

std::vector<Tensor> load_idx_images(const std::filesystem::path& images_path) {
  return parse_images(images_path).images;
}

void save_idx(const LabeledDataset& data, const std::filesystem::path& images_path,
              const std::filesystem::path& labels_path) {
  std::size_t rows = 1, cols = 1;
  if (!data.empty()) {
    const auto& s = data.image_shape();
    if (s.size() != 3 || s[0] != 1) throw DataError("IDX export supports single-channel (1,H,W) images only");
    rows = s[1];
    cols = s[2];
  }
  std::ofstream img(images_path, std::ios::binary);
  std::ofstream lbl(labels_path, std::ios::binary);
  if (!img || !lbl) throw IoError("cannot open IDX output files");
  write_be32(img, kImageMagic);
  write_be32(img, std::uint32_t(data.size()));
  write_be32(img, std::uint32_t(rows));
  write_be32(img, std::uint32_t(cols));
  for (const auto& t : data.images)
    for (float v : t.data) img.put(char(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f))));
  write_be32(lbl, kLabelMagic);
  write_be32(lbl, std::uint32_t(data.size()));
  for (auto l : data.labels) lbl.put(char(static_cast<unsigned char>(l)));
  if (!img || !lbl) throw IoError("failed writing IDX output");
}

std::string_view to_string(SynthKind kind) {
  return kind == SynthKind::gaussian_blobs ? "gaussian_blobs" : "striped_patterns";
}

SynthKind synth_kind_from_string(std::string_view name) {
  if (name == "gaussian_blobs") return SynthKind::gaussian_blobs;
  if (name == "striped_patterns") return SynthKind::striped_patterns;
  throw InvalidArgument("unknown synthetic dataset kind '" + std::string(name) + "'");
}

LabeledDataset synth_dataset(SynthKind kind, std::size_t n, std::size_t classes, std::size_t image_side,
                             std::uint64_t seed) {
  if (classes < 2) throw InvalidArgument("synth_dataset: classes must be >= 2");
  if (n < classes) throw InvalidArgument("synth_dataset: n must be >= classes");
  if (image_side < 4) throw InvalidArgument("synth_dataset: image_side must be >= 4");

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<float> noise(0.0f, kPixelNoiseSigma);
  const double side = double(image_side);
  const double pi = std::numbers::pi;

  LabeledDataset ds;
  ds.class_count = classes;
  ds.images.reserve(n);
  ds.labels.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = i % classes;
    Tensor img({1, image_side, image_side});
    const double amplitude = 0.6 + 0.4 * unit(rng);
    if (kind == SynthKind::striped_patterns) {
      // One sinusoidal cycle across the image; orientation encodes the class, phase is random.
      const double angle = pi * double(k) / double(classes);
      const double freq = 2.0 * pi / side;
      const double phase = 2.0 * pi * unit(rng);
      for (std::size_t y = 0; y < image_side; ++y)
        for (std::size_t x = 0; x < image_side; ++x)
          img[y * image_side + x] =
              float(0.5 + 0.4 * amplitude * std::sin(freq * (std::cos(angle) * x + std::sin(angle) * y) + phase));
    } else {
      // A bump on a ring around the centre; its angular position encodes the class.
      const double angle = 2.0 * pi * double(k) / double(classes);
      const double cy = (side - 1) / 2 + 0.3 * side * std::sin(angle) + (2 * unit(rng) - 1);
      const double cx = (side - 1) / 2 + 0.3 * side * std::cos(angle) + (2 * unit(rng) - 1);
      const double width = side / 6.0;
      for (std::size_t y = 0; y < image_side; ++y)
        for (std::size_t x = 0; x < image_side; ++x) {
          const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
          img[y * image_side + x] = float(amplitude * std::exp(-d2 / (2 * width * width)));
        }
    }
    for (auto& v : img.data) v = std::clamp(v + noise(rng), 0.0f, 1.0f);
    ds.images.push_back(std::move(img));
    ds.labels.push_back(k);
  }
  return ds;
}

}  // namespace advcheck::dataio
