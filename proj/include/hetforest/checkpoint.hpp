// Copyright (c) 2026, hetforest contributors
// SPDX-License-Identifier: Apache-2.0

// Checkpoint file format
//
//   offset 0   8 bytes   magic "HFCKPT01"
//   offset 8   8 bytes   header length N, unsigned little-endian
//   offset 16  N bytes   UTF-8 JSON header:
//                          {"format", "config", "step", "lineage", "tensors", "dtype", "id"}
//   offset 16+N          parameter blob: little-endian IEEE-754 float32, tensors
//                        concatenated in ParamLayout order, each row-major
//
// The id is the lowercase hex SHA-256 of the header serialized WITHOUT the
// "id" key, followed by the blob. Identical parameters, config, step and
// lineage therefore always produce the same id and the same file bytes.

#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "hetforest/tinylm.hpp"

namespace hetforest {

nlohmann::json config_to_json(const ExpertConfig& config);
ExpertConfig config_from_json(const nlohmann::json& j);

nlohmann::json schedule_to_json(const TrainSchedule& schedule);
TrainSchedule schedule_from_json(const nlohmann::json& j);

std::string compute_checkpoint_id(const ExpertCheckpoint& checkpoint);

std::string serialize_checkpoint(const ExpertCheckpoint& checkpoint);
/// Parses and verifies the id; throws CorruptCheckpoint on any mismatch.
ExpertCheckpoint deserialize_checkpoint(const std::string& bytes);

/// Writes <dir>/<id>.ckpt (skipped when an identical file already exists) and returns the path.
std::filesystem::path save_checkpoint(const ExpertCheckpoint& checkpoint, const std::filesystem::path& dir);
ExpertCheckpoint load_checkpoint(const std::filesystem::path& path);

std::string sha256_hex(std::string_view bytes);

}  // namespace hetforest
