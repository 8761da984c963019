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
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "gbm/attribution.hpp"
#include "gbm/kernels.hpp"
#include "gbm/losses.hpp"
#include "gbm/model.hpp"
#include "gbm/shapes.hpp"
#include "gbm/trainer.hpp"
#include "json.hpp"

namespace gbm {

enum class SessionState { idle, training, awaiting_feedback, stable };
std::string to_string(SessionState s);
SessionState parse_state(const std::string& s);

enum class FeedbackKind { mark_irrelevant, concept_label, concept_region, mark_relevant };
std::string to_string(FeedbackKind k);
FeedbackKind parse_feedback_kind(const std::string& s);

enum class Author { human, scripted_oracle };

struct Feedback {
  FeedbackKind kind = FeedbackKind::mark_irrelevant;
  Author author = Author::human;
  int round = 0;  // completed rounds at submission; set by the session
  int concept_index = 0;
  FeedbackScope scope;  // mark_irrelevant
  size_t image = 0;     // concept_label, concept_region: training split index
  int desired = 1;      // concept_label
  Mask region;          // concept_region
  int label = 0;        // mark_relevant

  static Feedback mark_irrelevant(int j, FeedbackScope scope, Author author = Author::human);
  static Feedback concept_label(size_t image, int j, int desired);
  static Feedback concept_region(size_t image, int j, Mask region);
  static Feedback mark_relevant(int j, int label);

  nlohmann::json to_json() const;
  /// Throws ValidationError naming the offending field.
  static Feedback from_json(const nlohmann::json& j);
};

/// Where kernel Monte Carlo estimates are taken.
enum class ReferenceKind { train, probe };

struct SessionConfig {
  DataConfig data;
  std::string data_dir;  // load instead of generating when set
  ModelConfig model;
  Schedule schedule;
  LossSpec loss;
  ReferenceKind reference = ReferenceKind::train;
  int representatives = 3;

  nlohmann::json to_json() const;
  static SessionConfig from_json(const nlohmann::json& j);
};

struct ConceptPacket {
  int concept_index = 0;
  int owner = 0;
  double relevance = 0.0;  // max_y |w_j^(y)|
  std::vector<Representative> representatives;
  std::vector<FieldMap> overlays;  // one per representative
  std::vector<double> weights;     // w_j^(y) for every class
  std::vector<double> kappa;       // kappa_act against every concept

  nlohmann::json to_json(const SplitData& train, bool with_images) const;
};

/// The three-step debugging loop over one model. Not thread-safe; callers
/// serialize access (the service holds a per-session lock).
class DebugSession {
public:
  DebugSession(std::string id, SessionConfig config, std::shared_ptr<const Dataset> data = nullptr);

  const std::string& id() const { return id_; }
  const SessionConfig& config() const { return config_; }
  SessionState state() const { return state_; }
  int round() const { return round_; }
  const PrototypeModel& model() const { return model_; }
  PrototypeModel& mutable_model() { return model_; }
  const Memory& memory() const { return memory_; }
  const Supervision& supervision() const { return supervision_; }
  const std::vector<Feedback>& feedback_log() const { return feedback_; }
  const MetricsHistory& history() const { return history_; }
  const std::vector<LossSpec>& round_losses() const { return round_losses_; }
  const Dataset& data() const { return *data_; }
  const ReferenceSet& reference() const { return reference_; }
  const RelianceProbe& probe() const { return probe_; }

  void set_loss(const LossSpec& spec);
  /// Called after every training epoch, from the training thread.
  void set_listener(EpochObserver listener) { listener_ = std::move(listener); }

  /// Step 1: one packet per concept, sorted by decreasing relevance, ties by
  /// index. n = 0 selects config().representatives; fewer than 3 is rejected.
  std::vector<ConceptPacket> assess(size_t n = 0) const;

  /// Steps 2 and 3. Accepted while awaiting feedback or stable; the session
  /// is unchanged when validation fails.
  void submit_feedback(Feedback feedback);

  /// Initial training from idle, otherwise a refinement round with the
  /// current memory and supervision. Rejected while a round is running.
  void run_round();
  /// Split form of run_round for background execution: begin_round moves to
  /// `training`, execute_round does the work, both under the caller's lock
  /// discipline. execute_round restores the previous state on failure.
  void begin_round();
  void execute_round();

  std::string checkpoint_hash() const;

  /// Attaches a directory; every later change is persisted there.
  void attach(const std::filesystem::path& dir);
  const std::optional<std::filesystem::path>& directory() const { return dir_; }
  /// Rejected while training.
  void save() const;
  static DebugSession load(const std::filesystem::path& dir);

  /// Re-runs every round of a persisted session from its config and
  /// feedback log, in memory.
  static DebugSession replay(const std::filesystem::path& dir);

private:
  void apply(const Feedback& f);
  void apply_supervision(const Feedback& f);
  void validate(const Feedback& f) const;
  void append_line(const char* name, const nlohmann::json& j) const;
  void persist_epoch(const EpochRecord& rec, const PrototypeModel& model, bool phase_end);

  std::string id_;
  SessionConfig config_;
  std::shared_ptr<const Dataset> data_;
  ReferenceSet reference_;
  RelianceProbe probe_;
  PrototypeModel model_;
  Memory memory_;
  Supervision supervision_;
  std::vector<Feedback> feedback_;
  MetricsHistory history_;
  std::vector<LossSpec> round_losses_;  // objective of every completed round
  SessionState state_ = SessionState::idle;
  SessionState resume_state_ = SessionState::idle;
  int round_ = 0;
  std::optional<std::filesystem::path> dir_;
  EpochObserver listener_;
};

/// Marks every concept owned by the confounded class whose template
/// similarity kappa_act(confounder, c_j) on the probe exceeds theta.
std::vector<Feedback> scripted_oracle(const DebugSession& session, double theta = 0.5,
                                      ScopeKind scope = ScopeKind::klass);

}  // namespace gbm
