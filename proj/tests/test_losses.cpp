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

#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "gbm/error.hpp"
#include "gbm/losses.hpp"
#include "support.hpp"

using namespace gbm;

TEST_CASE("cross-entropy closed forms and clamp") {
  Eigen::VectorXd onehot = Eigen::VectorXd::Zero(3);
  onehot[1] = 1.0;
  CHECK(cross_entropy(onehot, 1) == 0.0);
  const Eigen::VectorXd uniform = Eigen::VectorXd::Constant(5, 0.2);
  CHECK(cross_entropy(uniform, 3) == doctest::Approx(std::log(5.0)).epsilon(1e-12));
  Eigen::VectorXd tiny(2);
  tiny << 1.0 - 1e-20, 1e-20;
  CHECK(cross_entropy(tiny, 1) == doctest::Approx(-std::log(1e-12)));
  CHECK_THROWS_AS(cross_entropy(uniform, 5), DimensionError);
}

TEST_CASE("attribution index loss") {
  ModelConfig c;
  c.num_classes = 2;
  c.slots_per_class = 1;
  PrototypeModel m = make_model(c);
  m.weights(0, 0) = 1.0;
  m.weights(0, 1) = -2.0;
  const std::vector<std::uint8_t> ones = {1, 1}, zeros = {0, 0}, second = {1, 0};
  CHECK(attr_index_loss(m, 0, ones) == 0.0);
  CHECK(attr_index_loss(m, 0, zeros) == 5.0);
  CHECK(attr_index_loss(m, 0, second) == 4.0);
  CHECK_THROWS_AS(attr_index_loss(m, 0, std::vector<std::uint8_t>{1}), DimensionError);
}

TEST_CASE("relevance penalty is a squared hinge") {
  ModelConfig c;
  c.num_classes = 2;
  c.slots_per_class = 1;
  PrototypeModel m = make_model(c);
  m.weights.setZero();
  CHECK(relevance_penalty(m, 0, {0}, 0.5) == 0.25);
  m.weights(0, 0) = -0.5;
  CHECK(relevance_penalty(m, 0, {0}, 0.5) == 0.0);
  double last = 1.0;
  for (double w = 0.0; w <= 0.6; w += 0.05) {
    m.weights(0, 0) = w;
    const double p = relevance_penalty(m, 0, {0}, 0.5);
    CHECK(p <= last);
    last = p;
  }
}

TEST_CASE("concept label loss is a clamped binary cross-entropy") {
  // One 4x4 concept on a black 4x4 image: c = exp(-|p|^2 / tau).
  ModelConfig c;
  c.num_classes = 2;
  c.slots_per_class = 1;
  c.patch_size = 4;
  c.stride = 4;
  c.tau = 1.0;
  PrototypeModel m = make_model(c);
  const Raster black(4, 4);
  const std::vector<ConceptTarget> on = {{0, 1}}, off = {{0, 0}};
  CHECK(concept_label_loss(m, black, on) == doctest::Approx(-std::log(1.0 - 1e-6)));
  CHECK(concept_label_loss(m, black, off) == doctest::Approx(-std::log(1e-6)));
  m.prototypes(1, 0) = std::sqrt(std::log(2.0));  // c_1 = 0.5
  const std::vector<ConceptTarget> half_on = {{1, 1}}, half_off = {{1, 0}};
  CHECK(concept_label_loss(m, black, half_on) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(concept_label_loss(m, black, half_off) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  const std::vector<ConceptTarget> both = {{0, 1}, {1, 1}};
  CHECK(concept_label_loss(m, black, both) ==
        doctest::Approx(0.5 * (std::log(2.0) - std::log(1.0 - 1e-6))).epsilon(1e-12));
}

TEST_CASE("concept region loss penalises attribution outside the region") {
  Rng rng(3);
  const PrototypeModel m = testing::random_model(rng, 2, 1, 4, 2, 6.0);
  const Raster img = testing::random_image(rng, 10, 10);
  Mask all(10, 10), none(10, 10);
  std::fill(all.bits.begin(), all.bits.end(), 1);
  CHECK(concept_region_loss(m, img, 0, all) == 0.0);
  const FieldMap fm = field_attribution(ConceptView::of(m, 0), img);
  double sq = 0.0;
  for (double v : fm.values) sq += v * v;
  CHECK(sq > 0.0);
  CHECK(concept_region_loss(m, img, 0, none) == doctest::Approx(sq).epsilon(1e-12));
  Mask field(10, 10);
  for (int r = 0; r < 4; ++r)
    for (int col = 0; col < 4; ++col) field.at(fm.location.row + r, fm.location.col + col) = 1;
  CHECK(concept_region_loss(m, img, 0, field) == 0.0);
  CHECK_THROWS_AS(concept_region_loss(m, img, 0, Mask(9, 10)), DimensionError);
}

TEST_CASE("aggregation loss with an exact frozen copy") {
  Rng rng(5);
  PrototypeModel m = testing::random_model(rng, 2, 2, 4, 4, 6.0);
  std::vector<Raster> refs = {testing::random_image(rng, 8, 8)};
  const auto ref = ReferenceSet::from(refs);
  Memory memory(ref.id);
  KernelSpec k;
  k.kind = KernelKind::param;
  k.sigma = 0.5;
  CHECK(aggr_loss(m, 0, 0, memory, ref, k) == 0.0);
  memory.insert(m, 2, FeedbackScope::global(), ref);
  m.weights.row(0).setZero();
  m.weights(0, 2) = 2.0;
  CHECK(aggr_loss(m, 0, 0, memory, ref, k) == doctest::Approx(4.0).epsilon(1e-9));
  m.weights.row(0).setConstant(1.0);
  CHECK(aggr_loss(m, 0, 0, memory, ref, k) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("aggregation loss ignores concept order, the index loss does not") {
  const testing::GradientProblem g = testing::gradient_problem(4, KernelKind::act);
  const std::vector<std::uint8_t> mask = {1, 0, 1, 1, 0, 1};
  const int y = 1;
  const double aggr0 = aggr_loss(g.model, 2, y, g.memory, g.ref, g.spec.kernel);
  const double attr0 = attr_index_loss(g.model, y, mask);
  CHECK(aggr0 > 0.0);
  Rng rng(77);
  bool attr_changed = false;
  std::vector<int> perm(6);
  for (int t = 0; t < 10; ++t) {
    std::iota(perm.begin(), perm.end(), 0);
    shuffle(perm.begin(), perm.end(), rng);
    const PrototypeModel p = testing::permuted(g.model, perm);
    CHECK(std::abs(aggr_loss(p, 2, y, g.memory, g.ref, g.spec.kernel) - aggr0) <= 1e-12);
    attr_changed = attr_changed || attr_index_loss(p, y, mask) != attr0;
  }
  CHECK(attr_changed);
}

TEST_CASE("the raw parameter kernel factors through the memory sum") {
  Rng rng(31);
  for (int t = 0; t < 5; ++t) {
    PrototypeModel m = testing::random_model(rng, 3, 2, 4, 4, 6.0);
    const auto ref = ReferenceSet::from(std::vector<Raster>{testing::random_image(rng, 8, 8)});
    Memory memory(ref.id);
    const PrototypeModel donor = testing::random_model(rng, 3, 2, 4, 4, 6.0);
    memory.insert(donor, 1, FeedbackScope::global(), ref);
    memory.insert(donor, 4, FeedbackScope::of_class(2), ref);
    KernelSpec k;
    k.kind = KernelKind::param_raw;
    for (int y = 0; y < 3; ++y) {
      // Direct double sum over covered entries and live concepts.
      double direct = 0.0;
      for (size_t e : memory.query(0, y))
        for (int j = 0; j < m.num_concepts(); ++j) {
          double dot = 0.0;
          for (int i = 0; i < m.patch_dim(); ++i)
            dot += memory.entries()[e].snapshot.frozen_p[static_cast<size_t>(i)] * m.prototypes(j, i);
          direct += dot * m.weights(y, j) * m.weights(y, j);
        }
      CHECK(std::abs(aggr_loss(m, 0, y, memory, ref, k) - direct) <= 1e-9);
      CHECK(std::abs(aggr_loss_factored(m, 0, y, memory) - direct) <= 1e-9);
    }
  }
}

TEST_CASE("the total is the weighted sum of its terms") {
  const testing::GradientProblem g = testing::gradient_problem(2, KernelKind::attr);
  const auto b = total_loss(g.model, g.batch, g.spec, g.memory, g.ref, g.supervision);
  const Objective obj(g.spec, &g.memory, &g.ref, &g.supervision);
  const auto t = obj.evaluate(g.model, g.batch);
  CHECK(b == t.total);
  const double sum = t.cross_entropy + g.spec.lambda_attr * t.attr + g.spec.lambda_aggr * t.aggr +
                     g.spec.lambda_relevance * t.relevance + g.spec.lambda_concept_label * t.concept_label +
                     g.spec.lambda_concept_region * t.concept_region;
  CHECK(std::abs(sum - t.total) <= 1e-12);
  for (double term : {t.attr, t.aggr, t.relevance, t.concept_label, t.concept_region}) CHECK(term > 0.0);

  // Direct recomputation of the batch means from the per-example functions.
  double ce = 0.0, attr = 0.0, aggr = 0.0;
  for (const auto& ex : g.batch) {
    ce += cross_entropy(predict_proba(scores(g.model, activations(g.model, *ex.image))), ex.label);
    attr += attr_index_loss(g.model, ex.label, g.supervision.concept_masks.at(ex.id));
    aggr += aggr_loss(g.model, ex.id, ex.label, g.memory, g.ref, g.spec.kernel);
  }
  const double n = static_cast<double>(g.batch.size());
  CHECK(t.cross_entropy == doctest::Approx(ce / n).epsilon(1e-12));
  CHECK(t.attr == doctest::Approx(attr / n).epsilon(1e-12));
  CHECK(t.aggr == doctest::Approx(aggr / n).epsilon(1e-12));

  LossSpec zero = LossSpec::cross_entropy_only();
  CHECK(total_loss(g.model, g.batch, zero, g.memory, g.ref, g.supervision) == doctest::Approx(ce / n).epsilon(1e-12));
  LossSpec aggr_only = zero;
  aggr_only.lambda_aggr = 3.0;
  CHECK(total_loss(g.model, g.batch, aggr_only, Memory(g.ref.id), g.ref) == doctest::Approx(ce / n).epsilon(1e-12));
}

TEST_CASE("invalid loss specs are rejected") {
  LossSpec s;
  s.lambda_aggr = -1.0;
  CHECK_THROWS_AS(s.validate(), ValidationError);
  s = LossSpec{};
  s.epsilon_rel = 0.0;
  CHECK_THROWS_AS(s.validate(), ValidationError);
  CHECK(LossSpec::from_json(LossSpec{}.to_json()).to_json() == LossSpec{}.to_json());
}

TEST_CASE("full objective gradients match finite differences for every kernel") {
  for (KernelKind kind : {KernelKind::act, KernelKind::attr, KernelKind::param, KernelKind::param_raw}) {
    CAPTURE(to_string(kind));
    const auto r = testing::check_gradients(testing::gradient_problem(7, kind));
    CHECK(r.failures == 0);
  }
}
