/*
 * Copyright 2026 The gbmdebug Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <filesystem>
#include <string>

#include "gbm/kernels.hpp"
#include "gbm/model.hpp"
#include "json.hpp"

namespace gbm {

inline constexpr const char* kCheckpointFormat = "gbmdebug-checkpoint";
inline constexpr int kCheckpointVersion = 1;
inline constexpr const char* kMemoryFormat = "gbmdebug-memory";
inline constexpr int kMemoryVersion = 1;

/// SHA-256 over geometry, owners and the raw little-endian parameter bytes.
std::string checkpoint_hash(const PrototypeModel& model);

nlohmann::json checkpoint_json(const PrototypeModel& model);
PrototypeModel checkpoint_from_json(const nlohmann::json& j);

/// Bit-exact round trip. Throws FormatError on unknown versions, malformed
/// files and hash mismatches.
void save_checkpoint(const PrototypeModel& model, const std::filesystem::path& path);
PrototypeModel load_checkpoint(const std::filesystem::path& path);

/// Writes `memory.json` into `dir` plus one 16-bit PGM atlas of cached
/// attribution maps per entry (row x = reference image x, field flattened).
void save_memory(const Memory& memory, const std::filesystem::path& dir);

/// Activations and locations are restored exactly; attribution maps are
/// recomputed from the frozen prototype and checked against the atlas.
Memory load_memory(const std::filesystem::path& dir, const ReferenceSet& ref);

}  // namespace gbm
