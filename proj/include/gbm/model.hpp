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

#include <Eigen/Dense>

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "gbm/image.hpp"
#include "json.hpp"

namespace gbm {

struct SplitData;

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Top-left pixel of a receptive field.
struct PatchPos {
  int row = 0;
  int col = 0;
  bool operator==(const PatchPos&) const = default;
};

enum class PrototypeInit { uniform, patch };
std::string to_string(PrototypeInit i);
PrototypeInit parse_init(const std::string& s);

struct ModelConfig {
  int num_classes = 5;
  int slots_per_class = 2;
  int patch_size = 16;  // a = b
  int stride = 8;
  double tau = 0.0;  // <= 0 selects q / 8
  PrototypeInit init = PrototypeInit::uniform;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

/// Gray-box model: k prototype concepts c_j(x) = max_z exp(-|z - p_j|^2 / tau)
/// aggregated by a constant per-class weight matrix, s_y = sum_j w_yj c_j.
struct PrototypeModel {
  int num_classes = 0;
  int slots_per_class = 0;
  int patch_h = 0;
  int patch_w = 0;
  int stride = 1;
  double tau = 1.0;
  RowMatrix prototypes;        // k x q, row j is p_j flattened (row, col, channel)
  Eigen::MatrixXd weights;     // v x k
  std::vector<int> owner;      // owner class of each concept

  int num_concepts() const { return static_cast<int>(prototypes.rows()); }
  int patch_dim() const { return patch_h * patch_w * 3; }
  ModelConfig config() const;
};

/// Zero prototypes, PPNet-style +0.5 / -0.1 weights.
PrototypeModel make_model(const ModelConfig& config);

/// uniform: i.i.d. entries in [0, 1). patch: the stride-grid patch covering
/// most of a random shape in a random image of the owner class.
void initialize_prototypes(PrototypeModel& model, const SplitData& train, std::uint64_t seed,
                           PrototypeInit init = PrototypeInit::uniform);

/// Read-only view of a single concept, live or frozen.
struct ConceptView {
  std::span<const double> p;
  int patch_h = 0;
  int patch_w = 0;
  int stride = 1;
  double tau = 1.0;

  static ConceptView of(const PrototypeModel& model, int j);
};

struct PatchGrid {
  int rows = 0;
  int cols = 0;
  int count() const { return rows * cols; }
};

PatchGrid patch_grid(int image_h, int image_w, int patch_h, int patch_w, int stride);

/// Flattened patch at `pos`, same layout as a prototype row.
Eigen::VectorXd extract_patch(const Raster& image, PatchPos pos, int patch_h, int patch_w);

/// All patches of the stride grid, one per row, row-major over positions.
RowMatrix extract_patches(const Raster& image, int patch_h, int patch_w, int stride);

struct ConceptActivations {
  Eigen::VectorXd c;                // k activations in (0, 1]
  std::vector<PatchPos> locations;  // argmax receptive field per concept
  Eigen::VectorXd sq_distance;      // |z* - p_j|^2 at the argmax
};

ConceptActivations activations(const PrototypeModel& model, const Raster& image);

struct SingleActivation {
  double c = 0.0;
  PatchPos location;
  double sq_distance = 0.0;
};

/// Exhaustive scan for one concept; ties go to the smallest row-major index.
SingleActivation activation(const ConceptView& cv, const Raster& image);

/// Similarity of `concept` to the patch at a fixed location.
double activation_at(const ConceptView& cv, const Raster& image, PatchPos pos);

Eigen::VectorXd scores(const PrototypeModel& model, const ConceptActivations& acts);
Eigen::VectorXd scores(const PrototypeModel& model, const Eigen::VectorXd& c);
Eigen::VectorXd predict_proba(const Eigen::VectorXd& scores);

struct Explanation {
  int label = 0;
  std::vector<std::pair<double, double>> pairs;  // (w_j^(y), c_j(x))
  std::vector<PatchPos> locations;

  /// Sum of weight * activation in concept order; equals the class score.
  double score() const;
};

Explanation explain(const PrototypeModel& model, const Raster& image, int label);
Explanation explain(const PrototypeModel& model, const ConceptActivations& acts, int label);

int predict(const PrototypeModel& model, const Raster& image);

struct GradientSet {
  RowMatrix d_prototypes;
  Eigen::MatrixXd d_weights;

  static GradientSet zeros_like(const PrototypeModel& model);
  double squared_norm() const { return d_prototypes.squaredNorm() + d_weights.squaredNorm(); }
};

}  // namespace gbm
