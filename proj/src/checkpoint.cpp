#include "checkpoint.hpp"

#include <openssl/evp.h>

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <iterator>
#include <memory>
#include <sstream>
#include <vector>

#include "errors.hpp"

namespace advcheck::netcore {

namespace {

constexpr std::string_view kMagic = "ADVCHECK-CHECKPOINT";
constexpr std::string_view kEndHeader = "end_header";

std::string join_shape(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(s[i]);
  }
  return out;
}

std::size_t parse_size(std::string_view text, const std::string& field) {
  std::size_t v = 0;
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) throw FormatError(field, "expected a non-negative integer, got '" + std::string(text) + "'");
  return v;
}

Shape parse_shape(std::string_view text, const std::string& field) {
  Shape s;
  while (!text.empty()) {
    const auto comma = text.find(',');
    s.push_back(parse_size(text.substr(0, comma), field));
    if (comma == std::string_view::npos) break;
    text.remove_prefix(comma + 1);
  }
  if (s.empty()) throw FormatError(field, "empty shape");
  return s;
}

// Splits "word k1=v1 k2=v2" into the leading word and a key/value map.
std::pair<std::string, std::map<std::string, std::string>> parse_record(const std::string& line) {
  std::istringstream in(line);
  std::string head, tok;
  in >> head;
  std::map<std::string, std::string> kv;
  while (in >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos) throw FormatError(head, "malformed token '" + tok + "'");
    kv[tok.substr(0, eq)] = tok.substr(eq + 1);
  }
  return {head, kv};
}

const std::string& require(const std::map<std::string, std::string>& kv, const std::string& key,
                           const std::string& record) {
  const auto it = kv.find(key);
  if (it == kv.end()) throw FormatError(record + "." + key, "missing");
  return it->second;
}

void check_token(const std::string& s, const std::string& what) {
  if (s.empty() || s.find_first_of(" \t\r\n=") != std::string::npos)
    throw InvalidArgument("checkpoint metadata " + what + " '" + s + "' must be non-empty without spaces or '='");
}

void append_le(std::string& out, const Tensor& t) {
  for (float f : t.data) {
    const auto bits = std::bit_cast<std::uint32_t>(f);
    for (int b = 0; b < 4; ++b) out.push_back(char((bits >> (8 * b)) & 0xFF));
  }
}

std::string header_and_blobs(const Network& net, const Metadata& metadata) {
  std::ostringstream h;
  h << kMagic << '\n';
  h << "format_version=" << kCheckpointFormatVersion << '\n';
  h << "input_shape=" << join_shape(net.input_shape()) << '\n';
  h << "class_count=" << net.class_count() << '\n';
  h << "layer_count=" << net.layer_count() << '\n';
  const auto& layers = net.layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    h << "layer index=" << i << " kind=" << to_string(l.kind);
    switch (l.kind) {
      case LayerKind::conv2d:
        h << " out_channels=" << l.out_channels << " kernel=" << l.kernel << " stride=" << l.stride
          << " padding=" << l.padding;
        break;
      case LayerKind::maxpool2d: h << " kernel=" << l.kernel << " stride=" << l.stride; break;
      case LayerKind::dense: h << " units=" << l.units; break;
      default: break;
    }
    h << '\n';
  }
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (!layers[i].has_parameters()) continue;
    h << "tensor layer=" << i << " name=weight shape=" << join_shape(layers[i].weight.shape) << '\n';
    h << "tensor layer=" << i << " name=bias shape=" << join_shape(layers[i].bias.shape) << '\n';
  }
  for (const auto& [k, v] : metadata) {
    check_token(k, "key");
    check_token(v, "value");
    h << "meta key=" << k << " value=" << v << '\n';
  }
  h << kEndHeader << '\n';
  std::string out = h.str();
  for (const auto& l : layers) {
    if (!l.has_parameters()) continue;
    append_le(out, l.weight);
    append_le(out, l.bias);
  }
  return out;
}

}  // namespace

std::string serialize_checkpoint(const Network& net, const Metadata& metadata) {
  return header_and_blobs(net, metadata);
}

Checkpoint parse_checkpoint(std::string_view bytes) {
  std::size_t pos = 0;
  auto next_line = [&](const std::string& field) {
    const auto nl = bytes.find('\n', pos);
    if (nl == std::string_view::npos) throw FormatError(field, "header truncated");
    std::string line(bytes.substr(pos, nl - pos));
    pos = nl + 1;
    return line;
  };
  auto keyed = [&](const std::string& key) {
    const auto line = next_line(key);
    const auto prefix = key + "=";
    if (line.rfind(prefix, 0) != 0) throw FormatError(key, "expected '" + prefix + "...', got '" + line + "'");
    return line.substr(prefix.size());
  };

  if (next_line("magic") != kMagic) throw FormatError("magic", "not an advcheck checkpoint");
  const auto version = parse_size(keyed("format_version"), "format_version");
  if (version != std::size_t(kCheckpointFormatVersion))
    throw FormatError("format_version", "unsupported version " + std::to_string(version));
  const auto input_shape = parse_shape(keyed("input_shape"), "input_shape");
  const auto class_count = parse_size(keyed("class_count"), "class_count");
  const auto layer_count = parse_size(keyed("layer_count"), "layer_count");

  std::vector<LayerSpec> layers;
  for (std::size_t i = 0; i < layer_count; ++i) {
    const auto [head, kv] = parse_record(next_line("layer"));
    const auto field = "layer[" + std::to_string(i) + "]";
    if (head != "layer") throw FormatError(field, "expected a layer record");
    if (parse_size(require(kv, "index", field), field + ".index") != i) throw FormatError(field + ".index", "out of order");
    LayerSpec l;
    l.kind = layer_kind_from_string(require(kv, "kind", field));
    auto get = [&](const char* key) { return parse_size(require(kv, key, field), field + "." + key); };
    switch (l.kind) {
      case LayerKind::conv2d:
        l.out_channels = get("out_channels");
        l.kernel = get("kernel");
        l.stride = get("stride");
        l.padding = get("padding");
        break;
      case LayerKind::maxpool2d:
        l.kernel = get("kernel");
        l.stride = get("stride");
        break;
      case LayerKind::dense: l.units = get("units"); break;
      default: break;
    }
    layers.push_back(std::move(l));
  }

  struct TensorRecord {
    std::size_t layer;
    std::string name;
    Shape shape;
  };
  std::vector<TensorRecord> tensors;
  Metadata metadata;
  for (;;) {
    const auto line = next_line("end_header");
    if (line == kEndHeader) break;
    const auto [head, kv] = parse_record(line);
    if (head == "tensor") {
      TensorRecord rec{parse_size(require(kv, "layer", "tensor"), "tensor.layer"), require(kv, "name", "tensor"),
                       parse_shape(require(kv, "shape", "tensor"), "tensor.shape")};
      if (rec.layer >= layers.size()) throw FormatError("tensor.layer", "refers to a missing layer");
      if (rec.name != "weight" && rec.name != "bias") throw FormatError("tensor.name", "unknown tensor '" + rec.name + "'");
      tensors.push_back(std::move(rec));
    } else if (head == "meta") {
      metadata[require(kv, "key", "meta")] = require(kv, "value", "meta");
    } else {
      throw FormatError("header", "unexpected record '" + head + "'");
    }
  }

  for (const auto& rec : tensors) {
    const auto n = shape_size(rec.shape);
    if (bytes.size() < pos + 4 * n)
      throw FormatError("tensor[layer=" + std::to_string(rec.layer) + "," + rec.name + "]", "parameter blob truncated");
    std::vector<float> values(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= std::uint32_t(static_cast<unsigned char>(bytes[pos + 4 * i + b])) << (8 * b);
      values[i] = std::bit_cast<float>(bits);
    }
    pos += 4 * n;
    auto& slot = rec.name == "weight" ? layers[rec.layer].weight : layers[rec.layer].bias;
    slot = Tensor(rec.shape, std::move(values));
  }
  if (pos != bytes.size()) throw FormatError("blobs", "trailing bytes after parameter blobs");
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (layers[i].has_parameters() && (layers[i].weight.data.empty() || layers[i].bias.data.empty()))
      throw FormatError("tensor[layer=" + std::to_string(i) + "]", "missing parameter tensor");

  Network net(input_shape, std::move(layers));
  if (net.class_count() != class_count)
    throw FormatError("class_count", "header says " + std::to_string(class_count) + " but layers produce " +
                                         std::to_string(net.class_count()));
  for (const auto& l : net.layers())
    if (l.has_parameters() && !l.weight.all_finite()) throw FormatError("blobs", "non-finite parameter");
  return {std::move(net), std::move(metadata)};
}

void save_checkpoint(const std::filesystem::path& path, const Network& net, const Metadata& metadata) {
  const auto bytes = serialize_checkpoint(net, metadata);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), std::streamsize(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  const std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return parse_checkpoint(bytes);
}

std::string fingerprint(const Network& net) { return sha256_hex(serialize_checkpoint(net)); }

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), &EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 || EVP_DigestFinal_ex(ctx.get(), digest, &len) != 1)
    throw Error(ErrorCode::io, "sha256 computation failed");
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xF]);
  }
  return out;
}

}  // namespace advcheck::netcore
