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
#include <map>
#include <optional>
#include <set>
#include <span>
#include <vector>

#include "gbm/kernels.hpp"
#include "gbm/model.hpp"
#include "json.hpp"

namespace gbm {

/// Coefficients of the corrective terms added to the cross-entropy.
struct LossSpec {
  double lambda_attr = 1.0;
  double lambda_aggr = 1.0;
  double lambda_relevance = 0.1;
  double lambda_concept_label = 0.1;
  double lambda_concept_region = 0.1;
  double epsilon_rel = 0.1;
  KernelSpec kernel;

  static LossSpec cross_entropy_only();
  void validate() const;
  nlohmann::json to_json() const;
  static LossSpec from_json(const nlohmann::json& j);
};

struct ConceptTarget {
  int concept_index = 0;
  int desired = 1;  // 0 or 1
};

struct RegionTarget {
  int concept_index = 0;
  Mask region;  // 1 = relevant pixels
};

/// Per-example and per-class corrective supervision, keyed by training image
/// index.
struct Supervision {
  std::map<size_t, std::vector<std::uint8_t>> concept_masks;  // 1 = relevant concept
  std::map<size_t, std::vector<ConceptTarget>> concept_labels;
  std::map<size_t, std::vector<RegionTarget>> regions;
  std::map<int, std::set<int>> relevant;  // class -> concepts that must keep weight

  bool empty() const {
    return concept_masks.empty() && concept_labels.empty() && regions.empty() && relevant.empty();
  }
};

struct Example {
  const Raster* image = nullptr;
  int label = 0;
  size_t id = 0;  // training split index, used for instance-scoped feedback
};

double cross_entropy(const Eigen::VectorXd& probs, int y);

/// sum_j (1 - m_j) (w_j^(y))^2, attribution taken as the aggregation weight.
double attr_index_loss(const PrototypeModel& model, int y, std::span<const std::uint8_t> mask);

/// sum over memory entries covering (x, y) and live concepts j of
/// kappa(entry, c_j) (w_j^(y))^2.
double aggr_loss(const PrototypeModel& model, size_t image_id, int y, const Memory& memory, const ReferenceSet& ref,
                 const KernelSpec& kernel);

/// Factored form of aggr_loss under the raw parameter kernel:
/// < sum_{p in M(x,y)} p, sum_j (w_j^(y))^2 p_j >.
double aggr_loss_factored(const PrototypeModel& model, size_t image_id, int y, const Memory& memory);

double relevance_penalty(const PrototypeModel& model, int y, const std::set<int>& relevant, double epsilon_rel);

double concept_label_loss(const PrototypeModel& model, const Raster& x, std::span<const ConceptTarget> targets);

double concept_region_loss(const PrototypeModel& model, const Raster& x, int j, const Mask& region);

/// Batch means of each term; `total` includes the lambda weights.
struct LossBreakdown {
  double total = 0.0;
  double cross_entropy = 0.0;
  double attr = 0.0;
  double aggr = 0.0;
  double relevance = 0.0;
  double concept_label = 0.0;
  double concept_region = 0.0;

  nlohmann::json to_json() const;
};

/// Loss and analytic gradients for a batch. Holds a cache of the kernel table,
/// keyed by the prototype values, so repeated calls with frozen prototypes do
/// not re-profile the reference set. Not thread-safe.
class Objective {
public:
  explicit Objective(LossSpec spec, const Memory* memory = nullptr, const ReferenceSet* ref = nullptr,
                     const Supervision* supervision = nullptr);

  const LossSpec& spec() const { return spec_; }

  /// Mean loss over the batch. When `grads` is given it receives exact
  /// gradients, treating every max-pooled location as fixed. Prototype
  /// gradients of the kernel term are skipped when `prototype_grads` is false.
  LossBreakdown evaluate(const PrototypeModel& model, std::span<const Example> batch, GradientSet* grads = nullptr,
                         bool prototype_grads = true) const;

private:
  const KernelTable* table_for(const PrototypeModel& model, bool with_gradient) const;

  LossSpec spec_;
  const Memory* memory_;
  const ReferenceSet* ref_;
  const Supervision* supervision_;
  mutable std::optional<KernelTable> cached_;
  mutable RowMatrix cached_prototypes_;
  mutable size_t cached_entries_ = 0;
  mutable bool cached_gradient_ = false;
};

std::pair<LossBreakdown, GradientSet> forward_backward(const PrototypeModel& model, std::span<const Example> batch,
                                                       const LossSpec& spec, const Memory& memory,
                                                       const ReferenceSet& ref, const Supervision& supervision = {});

double total_loss(const PrototypeModel& model, std::span<const Example> batch, const LossSpec& spec,
                  const Memory& memory, const ReferenceSet& ref, const Supervision& supervision = {});

}  // namespace gbm
