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
#include <numbers>
#include <set>

#include "doctest.h"
#include "gbm/codec.hpp"
#include "gbm/error.hpp"
#include "gbm/shapes.hpp"
#include "support.hpp"

using namespace gbm;

namespace {

size_t count_pixels(const Raster& img, Color color) {
  const auto rgb = palette(color);
  size_t n = 0;
  for (int r = 0; r < img.height; ++r)
    for (int c = 0; c < img.width; ++c) {
      bool same = true;
      for (int ch = 0; ch < 3; ++ch) same = same && img.at(r, c, ch) == rgb[static_cast<size_t>(ch)] / 255.0;
      n += same;
    }
  return n;
}

size_t count(const Mask& m) { return static_cast<size_t>(std::count(m.bits.begin(), m.bits.end(), 1)); }

}  // namespace

TEST_CASE("five formulas use ten distinct atoms and never the confounder") {
  const auto formulas = sample_formulas(0, 5, full_atom_pool());
  REQUIRE(formulas.size() == 5);
  std::set<std::string> atoms;
  for (const auto& f : formulas) {
    CHECK(f.atoms.size() == 2);
    for (const auto& a : f.atoms) {
      CHECK_FALSE(a == (Atom{Color::yellow, ShapeKind::square}));
      atoms.insert(a.to_string());
    }
  }
  CHECK(atoms.size() == 10);
  CHECK(sample_formulas(0, 5, full_atom_pool()) == formulas);
}

TEST_CASE("a two-atom pool gives a single disjunction in pool order") {
  const std::vector<Atom> pool = {{Color::pink, ShapeKind::triangle}, {Color::green, ShapeKind::circle}};
  const auto f = sample_formulas(3, 1, pool);
  REQUIRE(f.size() == 1);
  CHECK(f[0].to_string() == "pink triangle or green circle");
}

TEST_CASE("an undersized pool reports the shortfall") {
  const auto full = full_atom_pool();
  const std::vector<Atom> pool(full.begin(), full.begin() + 4);
  try {
    sample_formulas(0, 10, pool);
    FAIL("expected GenerationError");
  } catch (const GenerationError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("pool exhausted") != std::string::npos);
    CHECK(msg.find("20") != std::string::npos);
  }
}

TEST_CASE("formula evaluation is a disjunction over scene atoms") {
  const Formula f{{{Color::red, ShapeKind::circle}, {Color::blue, ShapeKind::square}}};
  Scene s;
  CHECK_FALSE(eval_formula(f, s));
  s.shapes.push_back({ShapeKind::circle, Color::blue, 0, 0, 16});
  CHECK_FALSE(eval_formula(f, s));
  s.shapes.push_back({ShapeKind::square, Color::blue, 1, 1, 16});
  CHECK(eval_formula(f, s));
}

TEST_CASE("rendered areas match the shape geometry") {
  Scene s;
  s.shapes.push_back({ShapeKind::square, Color::yellow, 0, 0, 16});
  s.shapes.push_back({ShapeKind::circle, Color::red, 1, 2, 16});
  s.shapes.push_back({ShapeKind::triangle, Color::cyan, 3, 3, 16});
  const Raster img = render(s, 64);
  CHECK(count_pixels(img, Color::yellow) == 256);
  const double circle = static_cast<double>(count_pixels(img, Color::red));
  CHECK(circle == doctest::Approx(std::numbers::pi * 64.0).epsilon(0.08));
  const double triangle = static_cast<double>(count_pixels(img, Color::cyan));
  CHECK(triangle == doctest::Approx(128.0).epsilon(0.1));
  // Everything else stays black.
  size_t lit = 0;
  for (int r = 0; r < 64; ++r)
    for (int c = 0; c < 64; ++c) lit += img.at(r, c, 0) + img.at(r, c, 1) + img.at(r, c, 2) > 0;
  CHECK(lit == 256 + static_cast<size_t>(circle) + static_cast<size_t>(triangle));
  // Square at the top-left cell covers rows/cols 0..15 exactly.
  CHECK(img.at(0, 0, 0) == 1.0);
  CHECK(img.at(15, 15, 1) == 1.0);
  CHECK(img.at(16, 16, 0) == 0.0);
}

TEST_CASE("masks are disjoint and agree with the raster") {
  const auto ds = generate(testing::tiny_data(11, 4, 2));
  for (size_t i = 0; i < ds.train.size(); ++i) {
    const auto& scene = ds.train.scenes[i];
    const Raster& img = ds.train.image(i);
    Mask all(64, 64);
    size_t total = 0;
    for (size_t k = 0; k < scene.shapes.size(); ++k) {
      const Mask m = shape_mask(scene, static_cast<int>(k), 64);
      total += count(m);
      for (size_t p = 0; p < m.bits.size(); ++p) {
        CHECK_FALSE((m.bits[p] && all.bits[p]));
        all.bits[p] = all.bits[p] || m.bits[p];
      }
    }
    CHECK(count(all) == total);
    for (int r = 0; r < 64; ++r)
      for (int c = 0; c < 64; ++c) {
        const bool lit = img.at(r, c, 0) + img.at(r, c, 1) + img.at(r, c, 2) > 0;
        CHECK(lit == static_cast<bool>(all.at(r, c)));
      }
  }
  CHECK_THROWS_AS(shape_mask(ds.train.scenes[0], 7, 64), DimensionError);
}

TEST_CASE("overlapping or escaping shapes are rejected") {
  Scene s;
  s.shapes.push_back({ShapeKind::square, Color::red, 0, 0, 16});
  s.shapes.push_back({ShapeKind::square, Color::blue, 0, 0, 16});
  CHECK_THROWS_AS(render(s, 64), Error);
  Scene t;
  t.shapes.push_back({ShapeKind::square, Color::red, 4, 0, 16});
  CHECK_THROWS_AS(render(t, 64), DimensionError);
}

TEST_CASE("every image satisfies exactly its own formula") {
  const auto ds = generate(testing::tiny_data(4, 20, 10));
  for (Split sp : {Split::train, Split::test}) {
    const auto& sd = ds.split(sp);
    CHECK(sd.size() == (sp == Split::train ? 100u : 50u));
    for (const auto& scene : sd.scenes) {
      int satisfied = 0;
      for (const auto& f : ds.formulas) satisfied += eval_formula(f, scene);
      CHECK(satisfied == 1);
      CHECK(eval_formula(ds.formulas[static_cast<size_t>(scene.class_label)], scene));
    }
  }
}

TEST_CASE("the confounder appears in the confounded training class only") {
  const auto ds = generate(testing::tiny_data(2, 20, 10));
  const Atom yellow_square{Color::yellow, ShapeKind::square};
  for (int y = 0; y < 5; ++y) {
    CHECK(prevalence(ds.train, yellow_square, y) == (y == 0 ? 1.0 : 0.0));
    CHECK(prevalence(ds.test, yellow_square, y) == 0.0);
    for (const auto& a : ds.formulas[static_cast<size_t>(y)].atoms) CHECK(prevalence(ds.train, a, y) >= 0.5);
  }
}

TEST_CASE("the probe injects the confounder everywhere") {
  const auto ds = generate(testing::tiny_data(2, 4, 4));
  const auto probe = confounder_probe(ds, Split::test);
  REQUIRE(probe.size() == ds.test.size());
  for (size_t i = 0; i < probe.size(); ++i) {
    CHECK(probe.scenes[i].contains(ds.config.confounder));
    CHECK(probe.scenes[i].class_label == ds.test.scenes[i].class_label);
    CHECK(probe.scenes[i].shapes.size() == ds.test.scenes[i].shapes.size() + 1);
    CHECK(count_pixels(probe.image(i), Color::yellow) - count_pixels(ds.test.image(i), Color::yellow) == 256);
  }
  const Raster patch = confounder_patch(ds.config, 16);
  CHECK(count_pixels(patch, Color::yellow) == 256);
}

TEST_CASE("generation is deterministic in the seed") {
  const auto a = generate(testing::tiny_data(9, 5, 2));
  const auto b = generate(testing::tiny_data(9, 5, 2));
  const auto c = generate(testing::tiny_data(10, 5, 2));
  CHECK(a.manifest_hash() == b.manifest_hash());
  CHECK(a.manifest_hash() != c.manifest_hash());
  for (size_t i = 0; i < a.train.size(); ++i) CHECK(a.train.image(i) == b.train.image(i));
}

TEST_CASE("invalid configurations are rejected") {
  auto c = testing::tiny_data();
  c.num_classes = 1;
  CHECK_THROWS_AS(generate(c), GenerationError);
  c = testing::tiny_data();
  c.image_size = 16;
  CHECK_THROWS_AS(generate(c), GenerationError);
  c = testing::tiny_data();
  c.num_classes = 9;
  CHECK_THROWS_AS(generate(c), GenerationError);
}

TEST_CASE("datasets round trip through disk") {
  const auto ds = generate(testing::tiny_data(5, 3, 2));
  testing::TempDir dir("shapes");
  save_dataset(ds, dir.path());
  CHECK(std::filesystem::exists(dir / "train/0.ppm"));
  CHECK(std::filesystem::exists(dir / "train/0.mask.1.pbm"));
  const auto back = load_dataset(dir.path());
  CHECK(back.manifest_hash() == ds.manifest_hash());
  CHECK(back.formulas == ds.formulas);
  for (size_t i = 0; i < ds.train.size(); ++i) CHECK(back.train.image(i) == ds.train.image(i));
  CHECK(decode_pbm(read_file(dir / "train/0.mask.0.pbm")) == shape_mask(ds.train.scenes[0], 0, 64));
  write_file(dir / "manifest.json", "{\"format\":\"gbmdebug-dataset\",\"version\":7}");
  CHECK_THROWS_AS(load_dataset(dir.path()), FormatError);
}
