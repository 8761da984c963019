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

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "gbm/attribution.hpp"
#include "gbm/model.hpp"
#include "json.hpp"

namespace gbm {

struct SplitData;

/// Fixed, content-addressed sample standing in for the data distribution in
/// Monte Carlo kernel estimates.
struct ReferenceSet {
  std::shared_ptr<const std::vector<Raster>> images;
  std::string id;

  static ReferenceSet from(const SplitData& split);
  static ReferenceSet from(std::vector<Raster> images);
  size_t size() const { return images ? images->size() : 0; }
  const Raster& image(size_t i) const { return (*images)[i]; }
};

/// Activation (and optionally attribution) profile of one concept over a
/// reference set.
struct ConceptProfile {
  std::vector<double> activations;
  std::vector<PatchPos> locations;
  std::vector<FieldMap> maps;  // empty unless requested

  bool has_maps() const { return !maps.empty() || activations.empty(); }
};

ConceptProfile concept_profile(const ConceptView& cv, const ReferenceSet& ref, bool with_maps);
/// Profiles of every concept of the model (batched activation path).
std::vector<ConceptProfile> concept_profiles(const PrototypeModel& model, const ReferenceSet& ref, bool with_maps);

/// (1/N) sum_x (c(x) c'(x))^rho
double kappa_act(const ConceptProfile& a, const ConceptProfile& b, double rho = 1.0);
/// (1/N) sum_x <attr(c, x), attr(c', x)>^rho
double kappa_attr(const ConceptProfile& a, const ConceptProfile& b, double rho = 1.0);
/// exp(-|p - p'|^2 / sigma^2)
double kappa_param(std::span<const double> p1, std::span<const double> p2, double sigma);
/// <p, p'>; unbounded, kept for the factored-loss identity.
double kappa_param_raw(std::span<const double> p1, std::span<const double> p2);

enum class KernelKind { act, attr, param, param_raw };
std::string to_string(KernelKind k);
KernelKind parse_kernel(const std::string& s);

struct KernelSpec {
  KernelKind kind = KernelKind::act;
  double rho = 1.0;
  double sigma = 0.0;  // <= 0 selects sqrt(q) / 4

  double resolved_sigma(int patch_dim) const;
  nlohmann::json to_json() const;
  static KernelSpec from_json(const nlohmann::json& j);
};

enum class ScopeKind { instance, klass, global };

struct FeedbackScope {
  ScopeKind kind = ScopeKind::global;
  size_t image = 0;  // instance scope only
  int label = 0;     // instance and class scope

  static FeedbackScope instance(size_t image, int label) { return {ScopeKind::instance, image, label}; }
  static FeedbackScope of_class(int label) { return {ScopeKind::klass, 0, label}; }
  static FeedbackScope global() { return {ScopeKind::global, 0, 0}; }

  bool covers(size_t image_id, int y) const;
  nlohmann::json to_json() const;
  static FeedbackScope from_json(const nlohmann::json& j);
  bool operator==(const FeedbackScope&) const = default;
};

/// Frozen copy of a concept with caches computed once at insertion.
struct ConceptSnapshot {
  std::vector<double> frozen_p;
  int patch_h = 0;
  int patch_w = 0;
  int stride = 1;
  double tau = 1.0;
  ConceptProfile cache;
  int created_round = 0;
  int source_concept = -1;

  ConceptView view() const { return {frozen_p, patch_h, patch_w, stride, tau}; }
};

struct MemoryEntry {
  ConceptSnapshot snapshot;
  FeedbackScope scope;
};

/// Append-only store of concepts marked irrelevant. Single writer.
class Memory {
public:
  Memory() = default;
  explicit Memory(std::string reference_set_id) : reference_set_id_(std::move(reference_set_id)) {}

  const std::string& reference_set_id() const { return reference_set_id_; }
  const std::vector<MemoryEntry>& entries() const { return entries_; }
  size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  /// Freezes concept j of `model`; the model is not touched.
  void insert(const PrototypeModel& model, int j, const FeedbackScope& scope, const ReferenceSet& ref, int round = 0);
  /// Restores an entry read from disk.
  void restore(MemoryEntry entry) { entries_.push_back(std::move(entry)); }

  /// Indices of the entries whose scope covers (x, y).
  std::vector<size_t> query(size_t image_id, int y) const;
  std::vector<const ConceptSnapshot*> query_snapshots(size_t image_id, int y) const;

private:
  std::string reference_set_id_;
  std::vector<MemoryEntry> entries_;
};

/// kappa(memory entry e, live concept j) for every pair, plus d kappa / d p_j
/// when requested.
struct KernelTable {
  Eigen::MatrixXd kappa;            // entries x k
  std::vector<RowMatrix> gradient;  // per entry: k x q, empty unless requested
};

KernelTable kernel_table(const PrototypeModel& model, const Memory& memory, const ReferenceSet& ref,
                         const KernelSpec& spec, bool with_gradient);

}  // namespace gbm
