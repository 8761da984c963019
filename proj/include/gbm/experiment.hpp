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

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "gbm/session.hpp"
#include "json.hpp"

namespace gbm {

enum class Condition { none, attr, aggr };
std::string to_string(Condition c);
Condition parse_condition(const std::string& s);

struct ExperimentConfig {
  SessionConfig session;
  Condition condition = Condition::aggr;
  double oracle_threshold = 0.5;
  ScopeKind oracle_scope = ScopeKind::klass;
  double lambda = 1.0;  // weight of the active corrective term

  /// Loss of the refinement round: only the term of the condition is active.
  LossSpec refine_loss() const;
  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
};

struct PrototypeSummary {
  int concept_index = 0;
  int owner = 0;
  double iou = 0.0;               // best overlap of the top-1 region with a causal shape
  double confound_similarity = 0.0;
  std::string matched_atom;       // shape covering most of the top-1 receptive field, or "background"

  nlohmann::json to_json() const;
  static PrototypeSummary from_json(const nlohmann::json& j);
};

struct ExperimentResult {
  Condition condition = Condition::none;
  std::uint64_t seed = 0;
  int confounded_class = 0;
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  std::vector<double> train_class_accuracy;
  std::vector<double> test_class_accuracy;  // deconfounded test split
  double reliance_before = 0.0;             // after initial training
  double confound_reliance = 0.0;           // final
  std::vector<int> marked;                  // concepts the oracle marked irrelevant
  std::vector<PrototypeSummary> prototypes;
  std::string checkpoint_hash;
  std::string dataset_hash;
  double seconds = 0.0;

  double confounded_train_accuracy() const { return train_class_accuracy.at(static_cast<size_t>(confounded_class)); }
  double confounded_test_accuracy() const { return test_class_accuracy.at(static_cast<size_t>(confounded_class)); }
  /// Best IoU over the prototypes owned by the confounded class.
  double best_confounded_iou() const;

  nlohmann::json to_json() const;
  static ExperimentResult from_json(const nlohmann::json& j);
};

/// Overlap of concept j's top-1 training representative region with the
/// masks of the shapes of that image that are not the confounder.
double causal_iou(const PrototypeModel& model, int j, const Dataset& data);

/// Atom whose mask covers most of the top-1 receptive field.
std::string matched_atom(const PrototypeModel& model, int j, const Dataset& data);

/// Nearest training patch, prototype image and attribution overlay side by
/// side, each upscaled by `zoom`.
Raster prototype_panel(const PrototypeModel& model, int j, const SplitData& train, int zoom = 4);

/// Initial round, scripted feedback (skipped for `none`), refinement round.
/// With `out` set the session is persisted there together with summary.json
/// and panels for the confounded class.
ExperimentResult run_experiment(const ExperimentConfig& config, std::shared_ptr<const Dataset> data = nullptr,
                                const std::optional<std::filesystem::path>& out = std::nullopt,
                                const EpochObserver& progress = {});

ExperimentResult summarize(const DebugSession& session, Condition condition, double reliance_before,
                           std::vector<int> marked, double seconds);

/// Writes one panel per concept as concept-JJ.ppm; returns the paths.
std::vector<std::filesystem::path> render_prototypes(const PrototypeModel& model, const SplitData& train,
                                                     const std::filesystem::path& dir,
                                                     const std::vector<int>& concepts = {});

struct ReportInput {
  std::filesystem::path dir;  // run directory holding summary.json
  ExperimentResult result;
};

/// Loads summary.json from every directory; missing or corrupt ones are
/// listed in FormatError's message.
std::vector<ReportInput> load_summaries(const std::vector<std::filesystem::path>& dirs);

/// Markdown comparison: one row per run, then mean and range per condition.
/// Panels are linked relative to `report_dir`.
std::string report_markdown(const std::vector<ReportInput>& runs, const std::filesystem::path& report_dir);

}  // namespace gbm
