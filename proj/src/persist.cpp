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

#include "gbm/persist.hpp"

#include <cmath>
#include <cstdio>

#include "gbm/codec.hpp"
#include "gbm/error.hpp"
#include "gbm/image.hpp"

namespace gbm {

namespace {

std::string row_major_bytes(const Eigen::MatrixXd& m) {
  const RowMatrix r = m;
  return f64_bytes(std::span<const double>(r.data(), static_cast<size_t>(r.size())));
}

nlohmann::json matrix_json(const RowMatrix& m) {
  return {{"rows", m.rows()},
          {"cols", m.cols()},
          {"data", encode_f64(std::span<const double>(m.data(), static_cast<size_t>(m.size())))}};
}

RowMatrix matrix_from_json(const nlohmann::json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const auto data = decode_f64(j.at("data").get<std::string>());
  if (rows < 0 || cols < 0 || static_cast<Eigen::Index>(data.size()) != rows * cols)
    throw FormatError("corrupt checkpoint: matrix payload does not match its shape");
  RowMatrix m(rows, cols);
  std::copy(data.begin(), data.end(), m.data());
  return m;
}

void require_format(const nlohmann::json& j, const char* format, int version, const char* what) {
  if (!j.is_object() || j.value("format", std::string()) != format)
    throw FormatError(std::string("not a ") + what + " file");
  const int v = j.value("version", -1);
  if (v != version)
    throw FormatError(std::string("unsupported ") + what + " version " + std::to_string(v) +
                      " (supported: " + std::to_string(version) + ")");
}

nlohmann::json parse_file(const std::filesystem::path& path, const char* what) {
  const std::string text = read_file(path);
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("corrupt ") + what + " " + path.string() + ": " + e.what());
  }
}

std::string entry_atlas_name(size_t e) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "entry-%03zu.pgm", e);
  return std::string("memory/") + buf;
}

}  // namespace

std::string checkpoint_hash(const PrototypeModel& model) {
  std::string bytes = "gbm-checkpoint-v1|";
  bytes += std::to_string(model.num_classes) + "|" + std::to_string(model.slots_per_class) + "|" +
           std::to_string(model.patch_h) + "x" + std::to_string(model.patch_w) + "|" + std::to_string(model.stride) + "|";
  bytes += f64_bytes(std::span<const double>(&model.tau, 1));
  for (int o : model.owner) bytes += std::to_string(o) + ",";
  bytes += "|";
  bytes += f64_bytes(std::span<const double>(model.prototypes.data(), static_cast<size_t>(model.prototypes.size())));
  bytes += row_major_bytes(model.weights);
  return sha256_hex(bytes);
}

nlohmann::json checkpoint_json(const PrototypeModel& model) {
  return {{"format", kCheckpointFormat},
          {"version", kCheckpointVersion},
          {"hyperparameters",
           {{"num_classes", model.num_classes},
            {"slots_per_class", model.slots_per_class},
            {"patch_h", model.patch_h},
            {"patch_w", model.patch_w},
            {"stride", model.stride},
            {"tau", encode_f64(std::span<const double>(&model.tau, 1))}}},
          {"owner", model.owner},
          {"prototypes", matrix_json(model.prototypes)},
          {"weights", matrix_json(RowMatrix(model.weights))},
          {"hash", checkpoint_hash(model)}};
}

PrototypeModel checkpoint_from_json(const nlohmann::json& j) {
  require_format(j, kCheckpointFormat, kCheckpointVersion, "checkpoint");
  try {
    PrototypeModel m;
    const auto& h = j.at("hyperparameters");
    m.num_classes = h.at("num_classes").get<int>();
    m.slots_per_class = h.at("slots_per_class").get<int>();
    m.patch_h = h.at("patch_h").get<int>();
    m.patch_w = h.at("patch_w").get<int>();
    m.stride = h.at("stride").get<int>();
    const auto tau = decode_f64(h.at("tau").get<std::string>());
    if (tau.size() != 1) throw FormatError("corrupt checkpoint: tau");
    m.tau = tau[0];
    m.owner = j.at("owner").get<std::vector<int>>();
    m.prototypes = matrix_from_json(j.at("prototypes"));
    m.weights = matrix_from_json(j.at("weights"));
    if (m.prototypes.rows() != static_cast<Eigen::Index>(m.owner.size()) || m.prototypes.cols() != m.patch_dim() ||
        m.weights.rows() != m.num_classes || m.weights.cols() != m.prototypes.rows())
      throw FormatError("corrupt checkpoint: inconsistent shapes");
    if (checkpoint_hash(m) != j.at("hash").get<std::string>()) throw FormatError("corrupt checkpoint: hash mismatch");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("corrupt checkpoint: ") + e.what());
  }
}

void save_checkpoint(const PrototypeModel& model, const std::filesystem::path& path) {
  write_file(path, checkpoint_json(model).dump(1) + "\n");
}

PrototypeModel load_checkpoint(const std::filesystem::path& path) {
  return checkpoint_from_json(parse_file(path, "checkpoint"));
}

void save_memory(const Memory& memory, const std::filesystem::path& dir) {
  nlohmann::json entries = nlohmann::json::array();
  for (size_t e = 0; e < memory.size(); ++e) {
    const auto& entry = memory.entries()[e];
    const auto& snap = entry.snapshot;
    nlohmann::json locations = nlohmann::json::array();
    for (const auto& l : snap.cache.locations) locations.push_back({l.row, l.col});
    nlohmann::json j = {{"source_concept", snap.source_concept},
                        {"created_round", snap.created_round},
                        {"patch_h", snap.patch_h},
                        {"patch_w", snap.patch_w},
                        {"stride", snap.stride},
                        {"tau", encode_f64(std::span<const double>(&snap.tau, 1))},
                        {"frozen_p", encode_f64(snap.frozen_p)},
                        {"scope", entry.scope.to_json()},
                        {"activations", encode_f64(snap.cache.activations)},
                        {"locations", locations}};
    if (!snap.cache.maps.empty()) {
      const int field = snap.patch_h * snap.patch_w;
      Plane atlas(static_cast<int>(snap.cache.maps.size()), field);
      double scale = 0.0;
      for (size_t x = 0; x < snap.cache.maps.size(); ++x)
        for (int i = 0; i < field; ++i) {
          const double v = snap.cache.maps[x].values[static_cast<size_t>(i)];
          atlas.at(static_cast<int>(x), i) = v;
          scale = std::max(scale, v);
        }
      if (scale <= 0.0) scale = 1.0;
      const std::string name = entry_atlas_name(e);
      write_file(dir / name, encode_pgm16(atlas, scale));
      j["maps"] = {{"path", name}, {"scale", scale}};
    }
    entries.push_back(std::move(j));
  }
  const nlohmann::json doc = {{"format", kMemoryFormat},
                              {"version", kMemoryVersion},
                              {"reference_set_id", memory.reference_set_id()},
                              {"entries", entries}};
  write_file(dir / "memory.json", doc.dump(1) + "\n");
}

Memory load_memory(const std::filesystem::path& dir, const ReferenceSet& ref) {
  const auto doc = parse_file(dir / "memory.json", "memory");
  require_format(doc, kMemoryFormat, kMemoryVersion, "memory");
  const auto ref_id = doc.at("reference_set_id").get<std::string>();
  Memory memory(ref_id);
  if (doc.at("entries").empty()) return memory;
  if (ref_id != ref.id) throw ProfileError("memory was built on a different reference set");
  try {
    for (const auto& j : doc.at("entries")) {
      MemoryEntry entry;
      auto& snap = entry.snapshot;
      snap.source_concept = j.at("source_concept").get<int>();
      snap.created_round = j.at("created_round").get<int>();
      snap.patch_h = j.at("patch_h").get<int>();
      snap.patch_w = j.at("patch_w").get<int>();
      snap.stride = j.at("stride").get<int>();
      snap.tau = decode_f64(j.at("tau").get<std::string>()).at(0);
      snap.frozen_p = decode_f64(j.at("frozen_p").get<std::string>());
      if (snap.frozen_p.size() != static_cast<size_t>(snap.patch_h * snap.patch_w * 3))
        throw FormatError("corrupt memory: frozen prototype length");
      entry.scope = FeedbackScope::from_json(j.at("scope"));
      const bool with_maps = j.contains("maps");
      snap.cache = concept_profile(snap.view(), ref, with_maps);
      if (encode_f64(snap.cache.activations) != j.at("activations").get<std::string>())
        throw FormatError("corrupt memory: cached activations do not match the frozen prototype");
      if (with_maps) {
        const double scale = j.at("maps").at("scale").get<double>();
        const Plane atlas = decode_pgm16(read_file(dir / j.at("maps").at("path").get<std::string>()), scale);
        const int field = snap.patch_h * snap.patch_w;
        if (atlas.height != static_cast<int>(ref.size()) || atlas.width != field)
          throw FormatError("corrupt memory: attribution atlas shape");
        const double quantum = scale / 65535.0;
        for (size_t x = 0; x < snap.cache.maps.size(); ++x)
          for (int i = 0; i < field; ++i)
            if (std::abs(atlas.at(static_cast<int>(x), i) - snap.cache.maps[x].values[static_cast<size_t>(i)]) >
                quantum)
              throw FormatError("corrupt memory: attribution atlas does not match the frozen prototype");
      }
      memory.restore(std::move(entry));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("corrupt memory: ") + e.what());
  }
  return memory;
}

}  // namespace gbm
