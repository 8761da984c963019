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

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "gbm/image.hpp"
#include "json.hpp"

namespace gbm {

enum class ShapeKind { square, triangle, circle };
enum class Color { red, green, blue, yellow, pink, cyan };

std::string to_string(ShapeKind s);
std::string to_string(Color c);
ShapeKind parse_shape(const std::string& s);
Color parse_color(const std::string& s);

/// Fixed 8-bit RGB triple of each color. Raster intensities are these / 255.
std::array<std::uint8_t, 3> palette(Color c);

struct Atom {
  Color color;
  ShapeKind shape;

  bool operator==(const Atom&) const = default;
  std::string to_string() const;
};

/// All 18 (color, shape) pairs, color-major.
std::vector<Atom> full_atom_pool();

struct ShapeSpec {
  ShapeKind shape = ShapeKind::square;
  Color color = Color::red;
  int row = 0;  // placement grid cell
  int col = 0;
  int size = 16;  // side / diameter in pixels

  Atom atom() const { return {color, shape}; }
  bool operator==(const ShapeSpec&) const = default;
};

struct Scene {
  std::vector<ShapeSpec> shapes;
  int class_label = 0;
  bool confounded = false;
  int grid = 4;  // cells per side

  bool contains(const Atom& atom) const;
  bool operator==(const Scene&) const = default;
};

/// Disjunction of atoms.
struct Formula {
  std::vector<Atom> atoms;

  std::string to_string() const;
  bool operator==(const Formula&) const = default;
};

/// v pairwise atom-disjoint formulas of `arity` atoms drawn from `pool` minus
/// `excluded`. Atoms inside a formula keep their pool order.
std::vector<Formula> sample_formulas(std::uint64_t seed, int v, const std::vector<Atom>& pool,
                                     const Atom& excluded = {Color::yellow, ShapeKind::square},
                                     int arity = 2);

bool eval_formula(const Formula& formula, const Scene& scene);

/// Renders on a black background. Throws DimensionError if a shape leaves the
/// image and Error if two shapes overlap.
Raster render(const Scene& scene, int image_size);

/// 1 exactly on the pixels of shape `which`.
Mask shape_mask(const Scene& scene, int which, int image_size);

enum class Split { train, validation, test };
std::string to_string(Split s);
Split parse_split(const std::string& s);

struct DataConfig {
  std::uint64_t seed = 0;
  int num_classes = 5;
  int n_train = 100;  // per class
  int n_validation = 0;
  int n_test = 50;
  int image_size = 64;
  int shape_size = 16;
  int grid = 4;
  int arity = 2;
  int confounded_class = 0;
  Atom confounder{Color::yellow, ShapeKind::square};
  double rejection_budget = 1000.0;  // multiple of the requested image count

  nlohmann::json to_json() const;
  static DataConfig from_json(const nlohmann::json& j);
};

struct SplitData {
  std::vector<Scene> scenes;
  std::shared_ptr<const std::vector<Raster>> images = std::make_shared<std::vector<Raster>>();

  size_t size() const { return scenes.size(); }
  const Raster& image(size_t i) const { return (*images)[i]; }
};

struct Dataset {
  DataConfig config;
  std::vector<Formula> formulas;
  SplitData train;
  SplitData validation;
  SplitData test;

  const SplitData& split(Split s) const;
  nlohmann::json manifest() const;
  std::string manifest_hash() const;
};

Dataset generate(const DataConfig& config);

/// Share of images in a split/class that contain `atom`.
double prevalence(const SplitData& split, const Atom& atom, int class_label);

/// Scenes of `source` with the confounder injected into a free cell of every
/// image that lacks it; the confounder is then independent of the class.
SplitData confounder_probe(const Dataset& ds, Split source = Split::test);

/// The confounder rendered alone at the top-left cell, cropped to a patch.
Raster confounder_patch(const DataConfig& config, int patch_size);

void save_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace gbm
