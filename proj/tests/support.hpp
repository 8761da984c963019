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

// Shared fixtures for the test binaries.

#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "gbm/kernels.hpp"
#include "gbm/losses.hpp"
#include "gbm/model.hpp"
#include "gbm/rng.hpp"
#include "gbm/session.hpp"
#include "gbm/shapes.hpp"

namespace gbm::testing {

inline Raster random_image(Rng& rng, int h, int w) {
  Raster img(h, w);
  for (auto& v : img.data) v = uniform01(rng);
  return img;
}

/// Small model with random prototypes in [0,1) and weights in [-1,1).
inline PrototypeModel random_model(Rng& rng, int v, int slots, int patch, int stride, double tau) {
  ModelConfig c;
  c.num_classes = v;
  c.slots_per_class = slots;
  c.patch_size = patch;
  c.stride = stride;
  c.tau = tau;
  PrototypeModel m = make_model(c);
  for (Eigen::Index i = 0; i < m.prototypes.size(); ++i) m.prototypes.data()[i] = uniform01(rng);
  for (Eigen::Index i = 0; i < m.weights.size(); ++i) m.weights.data()[i] = 2.0 * uniform01(rng) - 1.0;
  return m;
}

/// Concepts reordered so that concept j of the result is concept perm[j].
inline PrototypeModel permuted(const PrototypeModel& m, const std::vector<int>& perm) {
  PrototypeModel out = m;
  for (int j = 0; j < m.num_concepts(); ++j) {
    const auto from = perm[static_cast<size_t>(j)];
    out.prototypes.row(j) = m.prototypes.row(from);
    out.weights.col(j) = m.weights.col(from);
    out.owner[static_cast<size_t>(j)] = m.owner[static_cast<size_t>(from)];
  }
  return out;
}

/// A few training images per class, everything else at the defaults.
inline DataConfig tiny_data(std::uint64_t seed = 0, int per_class = 6, int test_per_class = 3) {
  DataConfig c;
  c.seed = seed;
  c.n_train = per_class;
  c.n_test = test_per_class;
  return c;
}

/// Session over a tiny dataset with two-epoch rounds.
inline SessionConfig small_session_config(std::uint64_t seed = 0) {
  SessionConfig c;
  c.data = tiny_data(seed, 4, 2);
  c.schedule.initial_epochs = 2;
  c.schedule.refine_epochs = 2;
  c.schedule.phase_length = 1;
  c.schedule.batch_size = 8;
  c.schedule.seed = seed;
  return c;
}

/// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    const auto stamp = std::chrono::steady_clock::now().time_since_epoch().count();
    path_ = std::filesystem::temp_directory_path() /
            ("gbm-" + tag + "-" + std::to_string(stamp) + "-" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

private:
  std::filesystem::path path_;
};

/// Everything needed to evaluate the full corrective objective on a small
/// random problem: images, labels, memory with entries of every scope and
/// per-example supervision for all terms.
struct GradientProblem {
  PrototypeModel model;
  std::vector<Raster> images;
  std::vector<Example> batch;
  ReferenceSet ref;
  Memory memory;
  Supervision supervision;
  LossSpec spec;
};

inline GradientProblem gradient_problem(std::uint64_t seed, KernelKind kernel) {
  Rng rng(derive_seed(seed, {0x6AD}));
  GradientProblem g;
  const int v = 3, slots = 2, patch = 4, stride = 4, size = 12;
  g.model = random_model(rng, v, slots, patch, stride, 6.0);
  const int k = g.model.num_concepts();
  std::vector<Raster> refs;
  for (int i = 0; i < 5; ++i) refs.push_back(random_image(rng, size, size));
  g.ref = ReferenceSet::from(refs);
  for (int i = 0; i < 4; ++i) g.images.push_back(random_image(rng, size, size));
  for (size_t i = 0; i < g.images.size(); ++i)
    g.batch.push_back({&g.images[i], static_cast<int>(i) % v, i});

  // Frozen copies of perturbed concepts, one per scope kind.
  PrototypeModel donor = g.model;
  for (Eigen::Index i = 0; i < donor.prototypes.size(); ++i)
    donor.prototypes.data()[i] = std::clamp(donor.prototypes.data()[i] + 0.3 * (uniform01(rng) - 0.5), 0.0, 1.0);
  g.memory = Memory(g.ref.id);
  g.memory.insert(donor, 0, FeedbackScope::global(), g.ref);
  g.memory.insert(donor, 3, FeedbackScope::of_class(1), g.ref);
  g.memory.insert(donor, 5, FeedbackScope::instance(0, 0), g.ref);

  for (const auto& ex : g.batch) {
    std::vector<std::uint8_t> mask(static_cast<size_t>(k), 1);
    mask[static_cast<size_t>(ex.id % static_cast<size_t>(k))] = 0;
    mask[static_cast<size_t>((ex.id + 2) % static_cast<size_t>(k))] = 0;
    g.supervision.concept_masks[ex.id] = mask;
    g.supervision.concept_labels[ex.id] = {{static_cast<int>(ex.id % static_cast<size_t>(k)), 1},
                                           {static_cast<int>((ex.id + 1) % static_cast<size_t>(k)), 0}};
    Mask region(size, size);
    for (int r = 0; r < size; ++r)
      for (int c = 0; c < size / 2; ++c) region.at(r, c) = 1;
    g.supervision.regions[ex.id] = {{static_cast<int>((ex.id + 3) % static_cast<size_t>(k)), region}};
  }
  // Relevant concepts with weights pushed inside the hinge margin.
  g.supervision.relevant[0] = {1, 4};
  g.supervision.relevant[2] = {2};
  g.model.weights(0, 1) = 0.03;
  g.model.weights(0, 4) = -0.05;
  g.model.weights(2, 2) = 0.07;

  g.spec.lambda_attr = 0.7;
  g.spec.lambda_aggr = 1.3;
  g.spec.lambda_relevance = 0.9;
  g.spec.lambda_concept_label = 0.4;
  g.spec.lambda_concept_region = 0.6;
  g.spec.epsilon_rel = 0.1;
  g.spec.kernel.kind = kernel;
  g.spec.kernel.sigma = 2.0;
  return g;
}

struct GradientCheck {
  size_t parameters = 0;
  size_t failures = 0;
  double worst_relative = 0.0;  // among entries above the floor
  double worst_absolute = 0.0;
  LossBreakdown terms;
};

/// Central differences with step h on every prototype entry and weight;
/// an entry passes when |a - n| <= rel_tol * max(|a|, |n|) or |a - n| <= abs_floor.
inline GradientCheck check_gradients(const GradientProblem& g, double h = 1e-4, double rel_tol = 1e-4,
                                     double abs_floor = 1e-6) {
  const Objective objective(g.spec, &g.memory, &g.ref, &g.supervision);
  GradientSet grads;
  GradientCheck out;
  out.terms = objective.evaluate(g.model, g.batch, &grads);
  PrototypeModel m = g.model;
  auto loss = [&]() {
    const Objective fresh(g.spec, &g.memory, &g.ref, &g.supervision);
    return fresh.evaluate(m, g.batch).total;
  };
  auto probe = [&](double& param, double analytic) {
    const double saved = param;
    param = saved + h;
    const double up = loss();
    param = saved - h;
    const double down = loss();
    param = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double diff = std::abs(analytic - numeric);
    const double scale = std::max(std::abs(analytic), std::abs(numeric));
    ++out.parameters;
    out.worst_absolute = std::max(out.worst_absolute, diff);
    if (diff > abs_floor) out.worst_relative = std::max(out.worst_relative, diff / scale);
    if (!(diff <= abs_floor || diff <= rel_tol * scale)) ++out.failures;
  };
  for (Eigen::Index i = 0; i < m.prototypes.size(); ++i) probe(m.prototypes.data()[i], grads.d_prototypes.data()[i]);
  for (Eigen::Index r = 0; r < m.weights.rows(); ++r)
    for (Eigen::Index c = 0; c < m.weights.cols(); ++c) probe(m.weights(r, c), grads.d_weights(r, c));
  return out;
}

}  // namespace gbm::testing
