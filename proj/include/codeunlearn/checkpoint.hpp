#pragma once

// Binary model checkpoints ("CULB" v1).
//
//   "CULB"  u32 version  u32 section_count  u64 manifest_bytes
//   section table: u16 name_len, name, u8 dtype (0 = f64, 1 = u8),
//                  u8 ndim, u64 dims[ndim], u64 byte_length
//   manifest (JSON, UTF-8)
//   section blobs in table order, little-endian
//
// Every named parameter is one f64 section; the codebook deletion mask is
// the u8 section "codebook.deleted", so a loaded model keeps its deletions.

#include <cstdint>
#include <string>
#include <vector>

#include "codeunlearn/model.hpp"

namespace cu {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// `manifest_extra` must be a JSON object (or empty); its keys are merged
// into the manifest next to "model_config" and "deleted_codes".
std::vector<std::uint8_t> serialize_checkpoint(Seq2SeqModel& model, const std::string& manifest_extra = "");
void save_checkpoint(const std::string& path, Seq2SeqModel& model, const std::string& manifest_extra = "");

struct LoadedCheckpoint {
  Seq2SeqModel model;
  std::string manifest;  // JSON object
};

LoadedCheckpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);
LoadedCheckpoint load_checkpoint(const std::string& path);

std::string model_config_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& json);

}  // namespace cu
