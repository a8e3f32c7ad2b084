#pragma once

// On-disk formats: parameter checkpoints (named tensors, little-endian f64),
// channel datasets (JSON lines) and key=value manifests.

#include "papp/channel.hpp"
#include "papp/model.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace papp::io {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void save_checkpoint(const model::BackboneParams& params, const std::filesystem::path& path);
model::BackboneParams load_checkpoint(const std::filesystem::path& path);

struct DatasetRecord {
  channel::ChannelRealization sample;        // perfect CSI
  std::optional<CMatrix> h_estimate;         // estimated CSI when beta > 0
  std::optional<double> wmmse_rate;  // precomputed R_WMMSE at the record's power
};

/// Little-endian f64 (re, im) pairs, row-major, as lowercase hex.
std::string encode_matrix_hex(const CMatrix& m);
CMatrix decode_matrix_hex(const std::string& hex, Eigen::Index rows, Eigen::Index cols);

void write_dataset(const std::filesystem::path& path, const std::vector<DatasetRecord>& records);
std::vector<DatasetRecord> read_dataset(const std::filesystem::path& path);

using Manifest = std::map<std::string, std::string>;
void write_manifest(const std::filesystem::path& path, const Manifest& manifest);
Manifest read_manifest(const std::filesystem::path& path);

/// FNV-1a 64 of a file's bytes, as 16 hex digits.
std::string file_hash(const std::filesystem::path& path);

}  // namespace papp::io
