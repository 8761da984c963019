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

#include "gbm/model.hpp"

#include <cmath>
#include <limits>

#include "gbm/error.hpp"
#include "gbm/rng.hpp"
#include "gbm/shapes.hpp"

namespace gbm {

std::string to_string(PrototypeInit i) { return i == PrototypeInit::uniform ? "uniform" : "patch"; }

PrototypeInit parse_init(const std::string& s) {
  if (s == "uniform") return PrototypeInit::uniform;
  if (s == "patch") return PrototypeInit::patch;
  throw FormatError("unknown prototype init '" + s + "' (expected uniform or patch)");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"num_classes", num_classes},
          {"slots_per_class", slots_per_class},
          {"patch_size", patch_size},
          {"stride", stride},
          {"tau", tau},
          {"init", to_string(init)}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.num_classes = j.value("num_classes", c.num_classes);
  c.slots_per_class = j.value("slots_per_class", c.slots_per_class);
  c.patch_size = j.value("patch_size", c.patch_size);
  c.stride = j.value("stride", c.stride);
  c.tau = j.value("tau", c.tau);
  if (j.contains("init")) c.init = parse_init(j.at("init").get<std::string>());
  return c;
}

ModelConfig PrototypeModel::config() const {
  return {num_classes, slots_per_class, patch_h, stride, tau};
}

PrototypeModel make_model(const ModelConfig& config) {
  if (config.num_classes < 1 || config.slots_per_class < 1) throw DimensionError("make_model: empty model");
  if (config.patch_size < 1 || config.stride < 1) throw DimensionError("make_model: bad patch geometry");
  PrototypeModel m;
  m.num_classes = config.num_classes;
  m.slots_per_class = config.slots_per_class;
  m.patch_h = m.patch_w = config.patch_size;
  m.stride = config.stride;
  m.tau = config.tau > 0.0 ? config.tau : m.patch_dim() / 8.0;
  const int k = config.num_classes * config.slots_per_class;
  m.prototypes = RowMatrix::Zero(k, m.patch_dim());
  m.weights = Eigen::MatrixXd::Constant(config.num_classes, k, -0.1);
  m.owner.resize(static_cast<size_t>(k));
  for (int j = 0; j < k; ++j) {
    m.owner[static_cast<size_t>(j)] = j / config.slots_per_class;
    m.weights(j / config.slots_per_class, j) = 0.5;
  }
  return m;
}

void initialize_prototypes(PrototypeModel& model, const SplitData& train, std::uint64_t seed, PrototypeInit init) {
  Rng rng(derive_seed(seed, {0x1A17ull}));
  if (init == PrototypeInit::uniform) {
    for (Eigen::Index i = 0; i < model.prototypes.size(); ++i) model.prototypes.data()[i] = uniform01(rng);
    return;
  }
  for (int j = 0; j < model.num_concepts(); ++j) {
    std::vector<size_t> pool;
    for (size_t i = 0; i < train.size(); ++i)
      if (train.scenes[i].class_label == model.owner[static_cast<size_t>(j)]) pool.push_back(i);
    if (pool.empty()) throw DimensionError("initialize_prototypes: no training image for owner class");
    const size_t index = pool[uniform_index(rng, pool.size())];
    const Raster& img = train.image(index);
    const Scene& scene = train.scenes[index];
    const PatchGrid grid = patch_grid(img.height, img.width, model.patch_h, model.patch_w, model.stride);
    // The stride-grid patch covering most of one randomly chosen shape; an
    // all-background prototype matches every image equally and never moves.
    PatchPos pos{0, 0};
    if (!scene.shapes.empty()) {
      const Mask mask = shape_mask(scene, static_cast<int>(uniform_index(rng, scene.shapes.size())), img.height);
      size_t best = 0;
      for (int pr = 0; pr < grid.rows; ++pr)
        for (int pc = 0; pc < grid.cols; ++pc) {
          const PatchPos cand{pr * model.stride, pc * model.stride};
          size_t covered = 0;
          for (int r = 0; r < model.patch_h; ++r)
            for (int c = 0; c < model.patch_w; ++c) covered += mask.at(cand.row + r, cand.col + c);
          if (covered > best) {
            best = covered;
            pos = cand;
          }
        }
    }
    model.prototypes.row(j) = extract_patch(img, pos, model.patch_h, model.patch_w).transpose();
  }
}

ConceptView ConceptView::of(const PrototypeModel& model, int j) {
  if (j < 0 || j >= model.num_concepts()) throw DimensionError("concept index " + std::to_string(j) + " out of range");
  ConceptView v;
  v.p = std::span<const double>(model.prototypes.row(j).data(), static_cast<size_t>(model.patch_dim()));
  v.patch_h = model.patch_h;
  v.patch_w = model.patch_w;
  v.stride = model.stride;
  v.tau = model.tau;
  return v;
}

PatchGrid patch_grid(int image_h, int image_w, int patch_h, int patch_w, int stride) {
  if (image_h < patch_h || image_w < patch_w)
    throw DimensionError("image " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                         " is smaller than patch " + std::to_string(patch_h) + "x" + std::to_string(patch_w));
  return {(image_h - patch_h) / stride + 1, (image_w - patch_w) / stride + 1};
}

Eigen::VectorXd extract_patch(const Raster& image, PatchPos pos, int patch_h, int patch_w) {
  if (pos.row < 0 || pos.col < 0 || pos.row + patch_h > image.height || pos.col + patch_w > image.width)
    throw DimensionError("extract_patch: patch leaves the image");
  Eigen::VectorXd z(patch_h * patch_w * 3);
  Eigen::Index k = 0;
  for (int r = 0; r < patch_h; ++r) {
    const double* row = &image.data[(static_cast<size_t>(pos.row + r) * image.width + pos.col) * 3];
    for (int c = 0; c < patch_w * 3; ++c) z[k++] = row[c];
  }
  return z;
}

RowMatrix extract_patches(const Raster& image, int patch_h, int patch_w, int stride) {
  const PatchGrid grid = patch_grid(image.height, image.width, patch_h, patch_w, stride);
  RowMatrix Z(grid.count(), patch_h * patch_w * 3);
  for (int pr = 0; pr < grid.rows; ++pr)
    for (int pc = 0; pc < grid.cols; ++pc) {
      double* out = Z.row(pr * grid.cols + pc).data();
      for (int r = 0; r < patch_h; ++r) {
        const double* row = &image.data[(static_cast<size_t>(pr * stride + r) * image.width + pc * stride) * 3];
        std::copy(row, row + patch_w * 3, out + r * patch_w * 3);
      }
    }
  return Z;
}

ConceptActivations activations(const PrototypeModel& model, const Raster& image) {
  const PatchGrid grid = patch_grid(image.height, image.width, model.patch_h, model.patch_w, model.stride);
  const RowMatrix Z = extract_patches(image, model.patch_h, model.patch_w, model.stride);
  const int k = model.num_concepts();
  // |z - p|^2 = |z|^2 - 2 z.p + |p|^2 selects the argmax; the winning distance
  // is then recomputed exactly so exact matches give c = 1.
  const Eigen::VectorXd zz = Z.rowwise().squaredNorm();
  const Eigen::MatrixXd cross = Z * model.prototypes.transpose();
  ConceptActivations out;
  out.c.resize(k);
  out.sq_distance.resize(k);
  out.locations.resize(static_cast<size_t>(k));
  for (int j = 0; j < k; ++j) {
    Eigen::Index best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (Eigen::Index z = 0; z < Z.rows(); ++z) {
      const double d = zz[z] - 2.0 * cross(z, j);
      if (d < best_d) {
        best_d = d;
        best = z;
      }
    }
    const double d2 = (Z.row(best) - model.prototypes.row(j)).squaredNorm();
    out.sq_distance[j] = d2;
    out.c[j] = std::exp(-d2 / model.tau);
    out.locations[static_cast<size_t>(j)] = {static_cast<int>(best / grid.cols) * model.stride,
                                             static_cast<int>(best % grid.cols) * model.stride};
  }
  return out;
}

namespace {

double sq_distance_at(const ConceptView& cv, const Raster& image, PatchPos pos) {
  double d2 = 0.0;
  size_t k = 0;
  for (int r = 0; r < cv.patch_h; ++r) {
    const double* row = &image.data[(static_cast<size_t>(pos.row + r) * image.width + pos.col) * 3];
    for (int c = 0; c < cv.patch_w * 3; ++c, ++k) {
      const double diff = row[c] - cv.p[k];
      d2 += diff * diff;
    }
  }
  return d2;
}

}  // namespace

SingleActivation activation(const ConceptView& cv, const Raster& image) {
  if (cv.p.size() != static_cast<size_t>(cv.patch_h * cv.patch_w * 3))
    throw DimensionError("activation: prototype length does not match patch size");
  const PatchGrid grid = patch_grid(image.height, image.width, cv.patch_h, cv.patch_w, cv.stride);
  SingleActivation best;
  best.sq_distance = std::numeric_limits<double>::infinity();
  for (int pr = 0; pr < grid.rows; ++pr)
    for (int pc = 0; pc < grid.cols; ++pc) {
      const PatchPos pos{pr * cv.stride, pc * cv.stride};
      const double d2 = sq_distance_at(cv, image, pos);
      if (d2 < best.sq_distance) {
        best.sq_distance = d2;
        best.location = pos;
      }
    }
  best.c = std::exp(-best.sq_distance / cv.tau);
  return best;
}

double activation_at(const ConceptView& cv, const Raster& image, PatchPos pos) {
  return std::exp(-sq_distance_at(cv, image, pos) / cv.tau);
}

Eigen::VectorXd scores(const PrototypeModel& model, const Eigen::VectorXd& c) {
  if (c.size() != model.num_concepts()) throw DimensionError("scores: activation vector has wrong length");
  // Explicit loop: same summation order as Explanation::score().
  Eigen::VectorXd s(model.num_classes);
  for (int y = 0; y < model.num_classes; ++y) {
    double acc = 0.0;
    for (int j = 0; j < model.num_concepts(); ++j) acc += model.weights(y, j) * c[j];
    s[y] = acc;
  }
  return s;
}

Eigen::VectorXd scores(const PrototypeModel& model, const ConceptActivations& acts) { return scores(model, acts.c); }

Eigen::VectorXd predict_proba(const Eigen::VectorXd& s) {
  const double mx = s.maxCoeff();
  Eigen::VectorXd e = (s.array() - mx).exp();
  return e / e.sum();
}

double Explanation::score() const {
  double acc = 0.0;
  for (const auto& [w, c] : pairs) acc += w * c;
  return acc;
}

Explanation explain(const PrototypeModel& model, const ConceptActivations& acts, int label) {
  if (label < 0 || label >= model.num_classes) throw DimensionError("explain: invalid class " + std::to_string(label));
  Explanation e;
  e.label = label;
  e.locations = acts.locations;
  for (int j = 0; j < model.num_concepts(); ++j) e.pairs.emplace_back(model.weights(label, j), acts.c[j]);
  return e;
}

Explanation explain(const PrototypeModel& model, const Raster& image, int label) {
  return explain(model, activations(model, image), label);
}

int predict(const PrototypeModel& model, const Raster& image) {
  Eigen::Index arg = 0;
  scores(model, activations(model, image)).maxCoeff(&arg);
  return static_cast<int>(arg);
}

GradientSet GradientSet::zeros_like(const PrototypeModel& model) {
  return {RowMatrix::Zero(model.prototypes.rows(), model.prototypes.cols()),
          Eigen::MatrixXd::Zero(model.weights.rows(), model.weights.cols())};
}

}  // namespace gbm
