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
#include <functional>
#include <string>
#include <vector>

#include "gbm/kernels.hpp"
#include "gbm/losses.hpp"
#include "gbm/model.hpp"
#include "gbm/shapes.hpp"
#include "json.hpp"

namespace gbm {

enum class Phase { joint, concepts, weights };
std::string to_string(Phase p);
Phase parse_phase(const std::string& s);

struct Schedule {
  int initial_epochs = 20;
  int refine_epochs = 25;
  int phase_length = 5;
  double learning_rate = 0.5;
  double momentum = 0.9;
  int batch_size = 16;
  std::uint64_t seed = 0;
  int stability_window = 5;
  double stability_delta = 0.01;

  void validate() const;
  /// Phase of every refinement epoch, concepts first.
  std::vector<Phase> refine_phases() const;
  nlohmann::json to_json() const;
  static Schedule from_json(const nlohmann::json& j);
};

/// Canonical confounder concept and the probe set it is compared on.
struct RelianceProbe {
  ReferenceSet reference;
  ConceptProfile template_profile;
  int confounded_class = 0;

  /// The template is the confounder patch evaluated with the model's geometry.
  static RelianceProbe from(const Dataset& ds, const PrototypeModel& model);
  /// kappa_act(template, c_j) for every concept.
  std::vector<double> similarity(const PrototypeModel& model) const;
};

/// max_j kappa_act(template, c_j) |w_j^(y)| / max_j' |w_j'^(y)| for the
/// confounded class y; 0 when that weight row is zero.
double confound_reliance(const PrototypeModel& model, const RelianceProbe& probe);
double confound_reliance(const PrototypeModel& model, std::span<const double> similarity, int confounded_class);

struct EpochRecord {
  int epoch = 0;  // global, 1-based, across rounds
  int round = 0;
  Phase phase = Phase::joint;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  std::vector<double> train_class_accuracy;
  std::vector<double> test_class_accuracy;
  LossBreakdown terms;
  double confound_reliance = 0.0;

  nlohmann::json to_json() const;
  static EpochRecord from_json(const nlohmann::json& j);
};

struct MetricsHistory {
  std::vector<EpochRecord> records;

  void append(const MetricsHistory& other);
  int last_epoch() const { return records.empty() ? 0 : records.back().epoch; }
};

/// True iff the deconfounded-test accuracy over the last `window` epochs
/// varies by at most `delta`.
bool is_stable(const MetricsHistory& history, int window, double delta);

struct Accuracy {
  double overall = 0.0;
  std::vector<double> per_class;
};
Accuracy accuracy(const PrototypeModel& model, const SplitData& split, int num_classes);

using EpochObserver = std::function<void(const EpochRecord&, const PrototypeModel&)>;

struct TrainContext {
  const Dataset* data = nullptr;
  const RelianceProbe* probe = nullptr;  // optional; reliance stays 0 without it
  int round = 0;
  int first_epoch = 1;
  EpochObserver observer;
};

/// Joint cross-entropy training for schedule.initial_epochs epochs.
MetricsHistory train_initial(PrototypeModel& model, const Schedule& schedule, const TrainContext& ctx);

/// Alternating concept / weight phases under the full corrective loss.
MetricsHistory train_refine(PrototypeModel& model, const Schedule& schedule, const TrainContext& ctx,
                            const LossSpec& spec, const Memory& memory, const ReferenceSet& ref,
                            const Supervision& supervision);

/// Runs the given phases; the building block of both entry points. On a
/// non-finite loss the model is restored to the start of the failing epoch
/// and NumericError is rethrown.
MetricsHistory run_epochs(PrototypeModel& model, const Schedule& schedule, const TrainContext& ctx,
                          const std::vector<Phase>& phases, const Objective& objective);

}  // namespace gbm
