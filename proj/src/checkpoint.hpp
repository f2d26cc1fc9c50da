#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>

#include "network.hpp"

namespace advcheck::netcore {

using Metadata = std::map<std::string, std::string>;

struct Checkpoint {
  Network network;
  Metadata metadata;
};

// Layout: a text header of "key=value" records, one per line, terminated by "end_header\n", followed by
// the parameter tensors as little-endian float32 blobs in declaration order.
//
//   ADVCHECK-CHECKPOINT
//   format_version=1
//   input_shape=1,10,10
//   class_count=5
//   layer_count=7
//   layer index=0 kind=conv2d out_channels=8 kernel=3 stride=1 padding=0
//   tensor layer=0 name=weight shape=8,1,3,3
//   meta key=layer_index value=3
//   end_header
inline constexpr int kCheckpointFormatVersion = 1;

std::string serialize_checkpoint(const Network& net, const Metadata& metadata = {});
Checkpoint parse_checkpoint(std::string_view bytes);

void save_checkpoint(const std::filesystem::path& path, const Network& net, const Metadata& metadata = {});
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// SHA-256 (hex) of the metadata-free serialization: identifies architecture and exact parameters.
std::string fingerprint(const Network& net);

std::string sha256_hex(std::string_view bytes);

}  // namespace advcheck::netcore
