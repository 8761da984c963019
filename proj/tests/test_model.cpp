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

#include <cmath>

#include "doctest.h"
#include "gbm/error.hpp"
#include "gbm/losses.hpp"
#include "gbm/model.hpp"
#include "support.hpp"

using namespace gbm;

namespace {

// Independent scan over every stride position, straight from pixel indices.
struct Scan {
  double best = -1.0;
  PatchPos at;
};

Scan brute_force(const PrototypeModel& m, int j, const Raster& img) {
  Scan s;
  for (int r = 0; r + m.patch_h <= img.height; r += m.stride)
    for (int c = 0; c + m.patch_w <= img.width; c += m.stride) {
      double d2 = 0.0;
      for (int dr = 0; dr < m.patch_h; ++dr)
        for (int dc = 0; dc < m.patch_w; ++dc)
          for (int ch = 0; ch < 3; ++ch) {
            const double z = img.at(r + dr, c + dc, ch);
            const double p = m.prototypes(j, (dr * m.patch_w + dc) * 3 + ch);
            d2 += (z - p) * (z - p);
          }
      const double a = std::exp(-d2 / m.tau);
      if (a > s.best) s = {a, {r, c}};
    }
  return s;
}

}  // namespace

TEST_CASE("activations match an exhaustive scan over all 49 positions") {
  Rng rng(17);
  for (int trial = 0; trial < 3; ++trial) {
    PrototypeModel m = testing::random_model(rng, 3, 2, 16, 8, 96.0);
    const Raster img = testing::random_image(rng, 64, 64);
    // Pull one prototype near a real patch so the maximum is informative.
    const auto patch = extract_patch(img, {24, 40}, 16, 16);
    for (Eigen::Index i = 0; i < patch.size(); ++i) m.prototypes(1, i) = patch[i] + 0.05 * (uniform01(rng) - 0.5);
    CHECK(patch_grid(64, 64, 16, 16, 8).count() == 49);
    const auto acts = activations(m, img);
    for (int j = 0; j < m.num_concepts(); ++j) {
      const Scan s = brute_force(m, j, img);
      CHECK(acts.c[j] == doctest::Approx(s.best).epsilon(1e-12));
      CHECK(acts.locations[static_cast<size_t>(j)] == s.at);
    }
    CHECK(acts.locations[1] == (PatchPos{24, 40}));
  }
}

TEST_CASE("an exact patch gives activation one") {
  Rng rng(2);
  PrototypeModel m = testing::random_model(rng, 2, 1, 16, 8, 96.0);
  const Raster img = testing::random_image(rng, 64, 64);
  const auto patch = extract_patch(img, {8, 16}, 16, 16);
  for (Eigen::Index i = 0; i < patch.size(); ++i) m.prototypes(0, i) = patch[i];
  const auto a = activation(ConceptView::of(m, 0), img);
  CHECK(a.c == 1.0);
  CHECK(a.location == (PatchPos{8, 16}));
  CHECK(a.sq_distance == 0.0);
}

TEST_CASE("ties go to the first row-major position") {
  ModelConfig c;
  c.num_classes = 2;
  PrototypeModel m = make_model(c);
  const Raster black(64, 64);
  const auto acts = activations(m, black);
  for (int j = 0; j < m.num_concepts(); ++j) {
    CHECK(acts.c[j] == 1.0);
    CHECK(acts.locations[static_cast<size_t>(j)] == (PatchPos{0, 0}));
  }
  CHECK_THROWS_AS(activations(m, Raster(8, 8)), DimensionError);
}

TEST_CASE("scores are the weighted sum of activations") {
  ModelConfig c;
  c.num_classes = 2;
  c.slots_per_class = 1;
  PrototypeModel m = make_model(c);
  m.weights.setZero();
  Eigen::VectorXd act(2);
  act << 0.5, 0.25;
  CHECK(scores(m, act).isZero());
  m.weights(0, 0) = 1.0;
  m.weights(0, 1) = -2.0;
  m.weights(1, 0) = 0.3;
  const auto s = scores(m, act);
  CHECK(s[0] == 0.0);
  CHECK(s[1] == doctest::Approx(0.15));
}

TEST_CASE("default weights are +0.5 for the owner and -0.1 elsewhere") {
  ModelConfig c;
  const PrototypeModel m = make_model(c);
  CHECK(m.num_concepts() == 10);
  CHECK(m.patch_dim() == 768);
  CHECK(m.tau == 96.0);
  for (int y = 0; y < 5; ++y)
    for (int j = 0; j < 10; ++j) CHECK(m.weights(y, j) == (m.owner[static_cast<size_t>(j)] == y ? 0.5 : -0.1));
}

TEST_CASE("softmax is stable, normalized and shift invariant") {
  Eigen::VectorXd s(3);
  s << 2.0, 2.0, 2.0;
  auto p = predict_proba(s);
  for (int i = 0; i < 3; ++i) CHECK(p[i] == doctest::Approx(1.0 / 3.0).epsilon(1e-14));
  Eigen::VectorXd big(2);
  big << 1000.0, 0.0;
  p = predict_proba(big);
  CHECK(std::isfinite(p[0]));
  CHECK(p[0] == doctest::Approx(1.0));
  CHECK(p[1] < 1e-300);
  Rng rng(4);
  Eigen::VectorXd r(5);
  for (int i = 0; i < 5; ++i) r[i] = 4.0 * uniform01(rng) - 2.0;
  const auto a = predict_proba(r);
  const auto b = predict_proba((r.array() + 37.5).matrix());
  CHECK(std::abs(a.sum() - 1.0) <= 1e-12);
  CHECK((a - b).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("explanations reconstruct the score exactly") {
  Rng rng(8);
  PrototypeModel m = testing::random_model(rng, 4, 2, 8, 4, 48.0);
  const Raster img = testing::random_image(rng, 24, 24);
  const auto acts = activations(m, img);
  const auto s = scores(m, acts);
  for (int y = 0; y < 4; ++y) {
    const auto e = explain(m, img, y);
    CHECK(e.label == y);
    REQUIRE(e.pairs.size() == 8u);
    CHECK(e.score() == s[y]);
    for (int j = 0; j < 8; ++j) {
      CHECK(e.pairs[static_cast<size_t>(j)].first == m.weights(y, j));
      CHECK(e.pairs[static_cast<size_t>(j)].second == acts.c[j]);
    }
  }
  // Other rows do not matter; a zeroed row zeroes every pair weight.
  const auto before = explain(m, img, 2);
  m.weights.row(1).setConstant(9.0);
  m.weights.row(2).setZero();
  const auto after = explain(m, img, 2);
  for (const auto& [w, c] : after.pairs) CHECK(w == 0.0);
  CHECK_THROWS_AS(explain(m, img, 4), DimensionError);
  CHECK(before.locations == after.locations);
}

TEST_CASE("cross-entropy gradients match finite differences") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    testing::GradientProblem g = testing::gradient_problem(seed, KernelKind::act);
    g.spec = LossSpec::cross_entropy_only();
    g.memory = Memory(g.ref.id);
    g.supervision = {};
    const auto r = testing::check_gradients(g);
    CHECK(r.failures == 0);
    CHECK(r.parameters == static_cast<size_t>(g.model.prototypes.size() + g.model.weights.size()));
  }
}

TEST_CASE("a duplicated batch leaves loss and gradients unchanged") {
  testing::GradientProblem g = testing::gradient_problem(1, KernelKind::act);
  const Objective obj(g.spec, &g.memory, &g.ref, &g.supervision);
  GradientSet ga, gb;
  const auto a = obj.evaluate(g.model, g.batch, &ga);
  std::vector<Example> twice = g.batch;
  twice.insert(twice.end(), g.batch.begin(), g.batch.end());
  const auto b = obj.evaluate(g.model, twice, &gb);
  CHECK(a.total == doctest::Approx(b.total).epsilon(1e-12));
  CHECK((ga.d_prototypes - gb.d_prototypes).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK((ga.d_weights - gb.d_weights).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("a confident correct prediction has near-zero loss and gradient") {
  ModelConfig c;
  c.num_classes = 2;
  c.slots_per_class = 1;
  c.patch_size = 4;
  c.stride = 4;
  PrototypeModel m = make_model(c);
  m.weights << 60.0, -60.0, -60.0, 60.0;
  Raster img(8, 8);  // black: concept 0 matches exactly, concept 1 barely fires
  m.prototypes.row(1).setConstant(1.0);
  const std::vector<Example> batch = {{&img, 0, 0}};
  const Memory memory;
  const ReferenceSet ref;
  const auto [loss, grads] = forward_backward(m, batch, LossSpec::cross_entropy_only(), memory, ref);
  CHECK(loss.total < 1e-20);
  CHECK(grads.squared_norm() < 1e-20);
}
