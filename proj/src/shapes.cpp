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

#include "gbm/shapes.hpp"

#include <algorithm>
#include <sstream>

#include "gbm/codec.hpp"
#include "gbm/error.hpp"
#include "gbm/rng.hpp"

namespace gbm {

namespace {

constexpr std::array<const char*, 3> kShapeNames = {"square", "triangle", "circle"};
constexpr std::array<const char*, 6> kColorNames = {"red", "green", "blue", "yellow", "pink", "cyan"};

}  // namespace

std::string to_string(ShapeKind s) { return kShapeNames[static_cast<size_t>(s)]; }
std::string to_string(Color c) { return kColorNames[static_cast<size_t>(c)]; }

ShapeKind parse_shape(const std::string& s) {
  for (size_t i = 0; i < kShapeNames.size(); ++i)
    if (s == kShapeNames[i]) return static_cast<ShapeKind>(i);
  throw FormatError("unknown shape '" + s + "'");
}

Color parse_color(const std::string& s) {
  for (size_t i = 0; i < kColorNames.size(); ++i)
    if (s == kColorNames[i]) return static_cast<Color>(i);
  throw FormatError("unknown color '" + s + "'");
}

std::array<std::uint8_t, 3> palette(Color c) {
  switch (c) {
    case Color::red: return {255, 0, 0};
    case Color::green: return {0, 255, 0};
    case Color::blue: return {0, 0, 255};
    case Color::yellow: return {255, 255, 0};
    case Color::pink: return {255, 102, 178};
    case Color::cyan: return {0, 255, 255};
  }
  return {0, 0, 0};
}

std::string Atom::to_string() const { return gbm::to_string(color) + " " + gbm::to_string(shape); }

std::vector<Atom> full_atom_pool() {
  std::vector<Atom> pool;
  for (size_t c = 0; c < kColorNames.size(); ++c)
    for (size_t s = 0; s < kShapeNames.size(); ++s)
      pool.push_back({static_cast<Color>(c), static_cast<ShapeKind>(s)});
  return pool;
}

bool Scene::contains(const Atom& atom) const {
  return std::any_of(shapes.begin(), shapes.end(), [&](const ShapeSpec& s) { return s.atom() == atom; });
}

std::string Formula::to_string() const {
  std::string out;
  for (size_t i = 0; i < atoms.size(); ++i) {
    if (i) out += " or ";
    out += atoms[i].to_string();
  }
  return out;
}

std::vector<Formula> sample_formulas(std::uint64_t seed, int v, const std::vector<Atom>& pool,
                                     const Atom& excluded, int arity) {
  if (v < 1) throw GenerationError("sample_formulas: need at least one formula");
  if (arity < 1 || arity > 2) throw GenerationError("sample_formulas: arity must be 1 or 2");
  std::vector<size_t> usable;
  for (size_t i = 0; i < pool.size(); ++i) {
    if (pool[i] == excluded) continue;
    bool dup = false;
    for (size_t k : usable) dup = dup || pool[k] == pool[i];
    if (!dup) usable.push_back(i);
  }
  const size_t need = static_cast<size_t>(v) * static_cast<size_t>(arity);
  if (usable.size() < need)
    throw GenerationError("sample_formulas: pool exhausted, need " + std::to_string(need) +
                          " distinct atoms but only " + std::to_string(usable.size()) +
                          " are available (shortfall " + std::to_string(need - usable.size()) + ")");
  Rng rng(derive_seed(seed, {0xF0F0ull}));
  shuffle(usable.begin(), usable.end(), rng);
  std::vector<Formula> out(static_cast<size_t>(v));
  for (int f = 0; f < v; ++f) {
    std::vector<size_t> idx(usable.begin() + f * arity, usable.begin() + (f + 1) * arity);
    std::sort(idx.begin(), idx.end());
    for (size_t i : idx) out[static_cast<size_t>(f)].atoms.push_back(pool[i]);
  }
  return out;
}

bool eval_formula(const Formula& formula, const Scene& scene) {
  return std::any_of(formula.atoms.begin(), formula.atoms.end(),
                     [&](const Atom& a) { return scene.contains(a); });
}

namespace {

bool inside(ShapeKind kind, int size, int r, int c) {
  const double half = size / 2.0;
  const double y = r + 0.5, x = c + 0.5;
  switch (kind) {
    case ShapeKind::square: return true;
    case ShapeKind::triangle: return std::abs(x - half) <= y / 2.0;  // apex up
    case ShapeKind::circle: return (y - half) * (y - half) + (x - half) * (x - half) <= half * half;
  }
  return false;
}

// Calls fn(row, col) for every pixel covered by the shape.
template <typename Fn>
void for_each_pixel(const ShapeSpec& s, int grid, int image_size, Fn&& fn) {
  const int cell = image_size / grid;
  if (s.size < 1 || s.size > cell || s.row < 0 || s.col < 0 || s.row >= grid || s.col >= grid)
    throw DimensionError("shape does not fit its placement cell");
  const int top = s.row * cell + (cell - s.size) / 2;
  const int left = s.col * cell + (cell - s.size) / 2;
  for (int r = 0; r < s.size; ++r)
    for (int c = 0; c < s.size; ++c)
      if (inside(s.shape, s.size, r, c)) fn(top + r, left + c);
}

}  // namespace

Raster render(const Scene& scene, int image_size) {
  Raster img(image_size, image_size);
  Mask used(image_size, image_size);
  for (const auto& s : scene.shapes) {
    const auto rgb = palette(s.color);
    for_each_pixel(s, scene.grid, image_size, [&](int r, int c) {
      if (used.at(r, c)) throw Error("render: shapes overlap");
      used.at(r, c) = 1;
      for (int ch = 0; ch < 3; ++ch) img.at(r, c, ch) = rgb[static_cast<size_t>(ch)] / 255.0;
    });
  }
  return img;
}

Mask shape_mask(const Scene& scene, int which, int image_size) {
  if (which < 0 || static_cast<size_t>(which) >= scene.shapes.size())
    throw DimensionError("shape_mask: index " + std::to_string(which) + " out of range");
  Mask m(image_size, image_size);
  for_each_pixel(scene.shapes[static_cast<size_t>(which)], scene.grid, image_size,
                 [&](int r, int c) { m.at(r, c) = 1; });
  return m;
}

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::validation: return "validation";
    case Split::test: return "test";
  }
  return "?";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "validation") return Split::validation;
  if (s == "test") return Split::test;
  throw FormatError("unknown split '" + s + "'");
}

namespace {

nlohmann::json atom_json(const Atom& a) { return {{"color", to_string(a.color)}, {"shape", to_string(a.shape)}}; }
Atom atom_from_json(const nlohmann::json& j) {
  return {parse_color(j.at("color").get<std::string>()), parse_shape(j.at("shape").get<std::string>())};
}

nlohmann::json scene_json(const Scene& s) {
  nlohmann::json shapes = nlohmann::json::array();
  for (const auto& sh : s.shapes)
    shapes.push_back({{"shape", to_string(sh.shape)},
                      {"color", to_string(sh.color)},
                      {"row", sh.row},
                      {"col", sh.col},
                      {"size", sh.size}});
  return {{"label", s.class_label}, {"confounded", s.confounded}, {"grid", s.grid}, {"shapes", shapes}};
}

Scene scene_from_json(const nlohmann::json& j) {
  Scene s;
  s.class_label = j.at("label").get<int>();
  s.confounded = j.at("confounded").get<bool>();
  s.grid = j.at("grid").get<int>();
  for (const auto& sh : j.at("shapes"))
    s.shapes.push_back({parse_shape(sh.at("shape").get<std::string>()),
                        parse_color(sh.at("color").get<std::string>()), sh.at("row").get<int>(),
                        sh.at("col").get<int>(), sh.at("size").get<int>()});
  return s;
}

// Picks a grid cell not used by any shape of the scene.
int free_cell(const Scene& scene, Rng& rng) {
  std::vector<int> cells;
  for (int k = 0; k < scene.grid * scene.grid; ++k) {
    const bool used = std::any_of(scene.shapes.begin(), scene.shapes.end(), [&](const ShapeSpec& s) {
      return s.row * scene.grid + s.col == k;
    });
    if (!used) cells.push_back(k);
  }
  if (cells.empty()) throw GenerationError("no free placement cell left");
  return cells[uniform_index(rng, cells.size())];
}

}  // namespace

nlohmann::json DataConfig::to_json() const {
  return {{"seed", seed},
          {"num_classes", num_classes},
          {"n_train", n_train},
          {"n_validation", n_validation},
          {"n_test", n_test},
          {"image_size", image_size},
          {"shape_size", shape_size},
          {"grid", grid},
          {"arity", arity},
          {"confounded_class", confounded_class},
          {"confounder", atom_json(confounder)},
          {"rejection_budget", rejection_budget}};
}

DataConfig DataConfig::from_json(const nlohmann::json& j) {
  DataConfig c;
  c.seed = j.value("seed", c.seed);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.n_train = j.value("n_train", c.n_train);
  c.n_validation = j.value("n_validation", c.n_validation);
  c.n_test = j.value("n_test", c.n_test);
  c.image_size = j.value("image_size", c.image_size);
  c.shape_size = j.value("shape_size", c.shape_size);
  c.grid = j.value("grid", c.grid);
  c.arity = j.value("arity", c.arity);
  c.confounded_class = j.value("confounded_class", c.confounded_class);
  if (j.contains("confounder")) c.confounder = atom_from_json(j.at("confounder"));
  c.rejection_budget = j.value("rejection_budget", c.rejection_budget);
  return c;
}

const SplitData& Dataset::split(Split s) const {
  switch (s) {
    case Split::train: return train;
    case Split::validation: return validation;
    case Split::test: return test;
  }
  return train;
}

nlohmann::json Dataset::manifest() const {
  nlohmann::json formulas_j = nlohmann::json::array();
  for (const auto& f : formulas) {
    nlohmann::json atoms = nlohmann::json::array();
    for (const auto& a : f.atoms) atoms.push_back(atom_json(a));
    formulas_j.push_back({{"atoms", atoms}, {"text", f.to_string()}});
  }
  nlohmann::json pal = nlohmann::json::object();
  for (size_t c = 0; c < kColorNames.size(); ++c) {
    const auto rgb = palette(static_cast<Color>(c));
    pal[kColorNames[c]] = {rgb[0], rgb[1], rgb[2]};
  }
  nlohmann::json splits = nlohmann::json::object();
  for (Split s : {Split::train, Split::validation, Split::test}) {
    nlohmann::json items = nlohmann::json::array();
    const auto& sd = split(s);
    for (size_t i = 0; i < sd.size(); ++i) {
      const std::string base = to_string(s) + "/" + std::to_string(i);
      nlohmann::json masks = nlohmann::json::array();
      for (size_t k = 0; k < sd.scenes[i].shapes.size(); ++k)
        masks.push_back(base + ".mask." + std::to_string(k) + ".pbm");
      auto item = scene_json(sd.scenes[i]);
      item["index"] = i;
      item["file"] = base + ".ppm";
      item["masks"] = masks;
      items.push_back(std::move(item));
    }
    splits[to_string(s)] = std::move(items);
  }
  return {{"format", "gbmdebug-dataset"},
          {"version", 1},
          {"seed", config.seed},
          {"config", config.to_json()},
          {"formulas", formulas_j},
          {"palette", pal},
          {"confound",
           {{"class", config.confounded_class}, {"atom", atom_json(config.confounder)}, {"splits", {"train"}}}},
          {"splits", splits}};
}

std::string Dataset::manifest_hash() const { return sha256_hex(manifest().dump()); }

Dataset generate(const DataConfig& config) {
  if (config.num_classes < 2) throw GenerationError("generate: need at least 2 classes (v >= 2)");
  if (config.image_size < 32) throw GenerationError("generate: image size must be at least 32");
  if (config.grid < 2 || config.image_size / config.grid < config.shape_size)
    throw GenerationError("generate: shape size exceeds placement cell");
  if (config.shape_size < 8) throw GenerationError("generate: shape size must be at least 8 px");
  if (config.confounded_class < 0 || config.confounded_class >= config.num_classes)
    throw GenerationError("generate: confounded class out of range");

  Dataset ds;
  ds.config = config;
  ds.formulas = sample_formulas(config.seed, config.num_classes, full_atom_pool(), config.confounder, config.arity);

  std::vector<Atom> second_pool;
  for (const auto& a : full_atom_pool())
    if (!(a == config.confounder)) second_pool.push_back(a);

  const auto total = static_cast<double>(config.num_classes) *
                     (config.n_train + config.n_validation + config.n_test);
  const auto budget = static_cast<std::uint64_t>(config.rejection_budget * std::max(total, 1.0));
  std::uint64_t attempts = 0, accepted = 0;

  auto fill = [&](Split split, int per_class, SplitData& out) {
    const int v = config.num_classes;
    auto images = std::make_shared<std::vector<Raster>>();
    for (int i = 0; i < per_class; ++i) {
      for (int y = 0; y < v; ++y) {
        const auto index = static_cast<std::uint64_t>(i) * static_cast<std::uint64_t>(v) + static_cast<std::uint64_t>(y);
        Rng rng(derive_seed(config.seed, {static_cast<std::uint64_t>(split) + 1, index}));
        const auto& formula = ds.formulas[static_cast<size_t>(y)];
        // Alternating atoms gives each atom of a class half of its images.
        const Atom causal = formula.atoms[static_cast<size_t>(i) % formula.atoms.size()];
        Scene scene;
        for (;;) {
          if (++attempts > budget)
            throw GenerationError("generate: rejection budget exceeded after " + std::to_string(attempts - 1) +
                                  " attempts (acceptance rate " +
                                  std::to_string(static_cast<double>(accepted) / static_cast<double>(attempts - 1)) +
                                  ")");
          const Atom other = second_pool[uniform_index(rng, second_pool.size())];
          const auto cells = static_cast<std::uint64_t>(config.grid * config.grid);
          const auto a = uniform_index(rng, cells);
          auto b = uniform_index(rng, cells - 1);
          if (b >= a) ++b;
          scene = Scene{};
          scene.grid = config.grid;
          scene.class_label = y;
          scene.shapes = {{causal.shape, causal.color, static_cast<int>(a) / config.grid,
                           static_cast<int>(a) % config.grid, config.shape_size},
                          {other.shape, other.color, static_cast<int>(b) / config.grid,
                           static_cast<int>(b) % config.grid, config.shape_size}};
          int satisfied = 0;
          for (const auto& f : ds.formulas) satisfied += eval_formula(f, scene);
          if (satisfied == 1) break;
        }
        ++accepted;
        if (split == Split::train && y == config.confounded_class) {
          const int cell = free_cell(scene, rng);
          scene.shapes.push_back({config.confounder.shape, config.confounder.color, cell / config.grid,
                                  cell % config.grid, config.shape_size});
          scene.confounded = true;
        }
        images->push_back(render(scene, config.image_size));
        out.scenes.push_back(std::move(scene));
      }
    }
    out.images = std::move(images);
  };
  fill(Split::train, config.n_train, ds.train);
  fill(Split::validation, config.n_validation, ds.validation);
  fill(Split::test, config.n_test, ds.test);
  return ds;
}

double prevalence(const SplitData& split, const Atom& atom, int class_label) {
  size_t n = 0, hit = 0;
  for (const auto& s : split.scenes) {
    if (s.class_label != class_label) continue;
    ++n;
    hit += s.contains(atom);
  }
  return n == 0 ? 0.0 : static_cast<double>(hit) / static_cast<double>(n);
}

SplitData confounder_probe(const Dataset& ds, Split source) {
  const SplitData& from = ds.split(source);
  SplitData out;
  auto images = std::make_shared<std::vector<Raster>>();
  for (size_t i = 0; i < from.size(); ++i) {
    Scene scene = from.scenes[i];
    if (!scene.contains(ds.config.confounder)) {
      Rng rng(derive_seed(ds.config.seed, {0xC0FFEEull, static_cast<std::uint64_t>(source), i}));
      const int cell = free_cell(scene, rng);
      scene.shapes.push_back({ds.config.confounder.shape, ds.config.confounder.color, cell / scene.grid,
                              cell % scene.grid, ds.config.shape_size});
    }
    scene.confounded = true;
    images->push_back(render(scene, ds.config.image_size));
    out.scenes.push_back(std::move(scene));
  }
  out.images = std::move(images);
  return out;
}

Raster confounder_patch(const DataConfig& config, int patch_size) {
  Scene scene;
  scene.grid = config.grid;
  scene.shapes.push_back({config.confounder.shape, config.confounder.color, 0, 0, config.shape_size});
  const Raster full = render(scene, config.image_size);
  if (patch_size > full.height) throw DimensionError("confounder_patch: patch larger than image");
  Raster patch(patch_size, patch_size);
  for (int r = 0; r < patch_size; ++r)
    for (int c = 0; c < patch_size; ++c)
      for (int ch = 0; ch < 3; ++ch) patch.at(r, c, ch) = full.at(r, c, ch);
  return patch;
}

void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto manifest = ds.manifest();
  write_file(dir / "manifest.json", manifest.dump(2) + "\n");
  for (Split s : {Split::train, Split::validation, Split::test}) {
    const auto& sd = ds.split(s);
    for (size_t i = 0; i < sd.size(); ++i) {
      const auto base = dir / to_string(s) / std::to_string(i);
      write_file(base.string() + ".ppm", encode_ppm(sd.image(i)));
      for (size_t k = 0; k < sd.scenes[i].shapes.size(); ++k)
        write_file(base.string() + ".mask." + std::to_string(k) + ".pbm",
                   encode_pbm(shape_mask(sd.scenes[i], static_cast<int>(k), ds.config.image_size)));
    }
  }
}

Dataset load_dataset(const std::filesystem::path& dir) {
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_file(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("dataset manifest unreadable: " + std::string(e.what()));
  }
  if (manifest.value("format", "") != "gbmdebug-dataset") throw FormatError("not a gbmdebug dataset: " + dir.string());
  if (manifest.value("version", 0) != 1)
    throw FormatError("unsupported dataset version " + manifest.value("version", nlohmann::json()).dump() +
                      " (supported: 1)");
  Dataset ds;
  ds.config = DataConfig::from_json(manifest.at("config"));
  for (const auto& f : manifest.at("formulas")) {
    Formula formula;
    for (const auto& a : f.at("atoms")) formula.atoms.push_back(atom_from_json(a));
    ds.formulas.push_back(std::move(formula));
  }
  for (Split s : {Split::train, Split::validation, Split::test}) {
    SplitData sd;
    auto images = std::make_shared<std::vector<Raster>>();
    for (const auto& item : manifest.at("splits").at(to_string(s))) {
      sd.scenes.push_back(scene_from_json(item));
      images->push_back(decode_ppm(read_file(dir / item.at("file").get<std::string>())));
    }
    sd.images = std::move(images);
    switch (s) {
      case Split::train: ds.train = std::move(sd); break;
      case Split::validation: ds.validation = std::move(sd); break;
      case Split::test: ds.test = std::move(sd); break;
    }
  }
  return ds;
}

}  // namespace gbm
