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

#include "gbm/losses.hpp"

#include <algorithm>
#include <cmath>

#include "gbm/attribution.hpp"
#include "gbm/error.hpp"

namespace gbm {

namespace {

constexpr double kProbFloor = 1e-12;
constexpr double kActClamp = 1e-6;

void require_class(const PrototypeModel& model, int y) {
  if (y < 0 || y >= model.num_classes) throw DimensionError("invalid class index " + std::to_string(y));
}

void require_concept(const PrototypeModel& model, int j) {
  if (j < 0 || j >= model.num_concepts()) throw DimensionError("invalid concept index " + std::to_string(j));
}

double bce(double c, int target) {
  const double cc = std::clamp(c, kActClamp, 1.0 - kActClamp);
  return target ? -std::log(cc) : -std::log1p(-cc);
}

// d bce / d c; zero where the clamp is active.
double bce_grad(double c, int target) {
  if (c < kActClamp || c > 1.0 - kActClamp) return 0.0;
  return target ? -1.0 / c : 1.0 / (1.0 - c);
}

std::vector<double> region_upstream(const FieldMap& map, const Mask& region, double* value) {
  std::vector<double> up(map.values.size(), 0.0);
  double acc = 0.0;
  for (int r = 0; r < map.patch_h; ++r)
    for (int c = 0; c < map.patch_w; ++c) {
      const size_t i = static_cast<size_t>(r * map.patch_w + c);
      const double outside = region.at(map.location.row + r, map.location.col + c) ? 0.0 : 1.0;
      acc += outside * map.values[i] * map.values[i];
      up[i] = 2.0 * outside * map.values[i];
    }
  *value = acc;
  return up;
}

void check_finite(double v, const char* term) {
  if (!std::isfinite(v)) throw NumericError(std::string("non-finite loss in term '") + term + "'");
}

}  // namespace

LossSpec LossSpec::cross_entropy_only() {
  LossSpec s;
  s.lambda_attr = s.lambda_aggr = s.lambda_relevance = s.lambda_concept_label = s.lambda_concept_region = 0.0;
  return s;
}

void LossSpec::validate() const {
  for (double l : {lambda_attr, lambda_aggr, lambda_relevance, lambda_concept_label, lambda_concept_region})
    if (!(l >= 0.0)) throw ValidationError("loss_spec", "loss coefficients must be nonnegative");
  if (!(epsilon_rel > 0.0)) throw ValidationError("loss_spec.epsilon_rel", "relevance margin must be positive");
  if (!(kernel.rho > 0.0)) throw ValidationError("loss_spec.kernel.rho", "rho must be positive");
}

nlohmann::json LossSpec::to_json() const {
  return {{"lambda_attr", lambda_attr},
          {"lambda_aggr", lambda_aggr},
          {"lambda_relevance", lambda_relevance},
          {"lambda_concept_label", lambda_concept_label},
          {"lambda_concept_region", lambda_concept_region},
          {"epsilon_rel", epsilon_rel},
          {"kernel", kernel.to_json()}};
}

LossSpec LossSpec::from_json(const nlohmann::json& j) {
  LossSpec s;
  s.lambda_attr = j.value("lambda_attr", s.lambda_attr);
  s.lambda_aggr = j.value("lambda_aggr", s.lambda_aggr);
  s.lambda_relevance = j.value("lambda_relevance", s.lambda_relevance);
  s.lambda_concept_label = j.value("lambda_concept_label", s.lambda_concept_label);
  s.lambda_concept_region = j.value("lambda_concept_region", s.lambda_concept_region);
  s.epsilon_rel = j.value("epsilon_rel", s.epsilon_rel);
  if (j.contains("kernel")) s.kernel = KernelSpec::from_json(j.at("kernel"));
  s.validate();
  return s;
}

nlohmann::json LossBreakdown::to_json() const {
  return {{"total", total},   {"cross_entropy", cross_entropy},   {"attr", attr},
          {"aggr", aggr},     {"relevance", relevance},           {"concept_label", concept_label},
          {"concept_region", concept_region}};
}

double cross_entropy(const Eigen::VectorXd& probs, int y) {
  if (y < 0 || y >= probs.size()) throw DimensionError("cross_entropy: invalid class " + std::to_string(y));
  return -std::log(std::max(probs[y], kProbFloor));
}

double attr_index_loss(const PrototypeModel& model, int y, std::span<const std::uint8_t> mask) {
  require_class(model, y);
  if (mask.size() != static_cast<size_t>(model.num_concepts())) throw DimensionError("attr_index_loss: mask length");
  double acc = 0.0;
  for (int j = 0; j < model.num_concepts(); ++j)
    if (!mask[static_cast<size_t>(j)]) acc += model.weights(y, j) * model.weights(y, j);
  return acc;
}

double aggr_loss(const PrototypeModel& model, size_t image_id, int y, const Memory& memory, const ReferenceSet& ref,
                 const KernelSpec& kernel) {
  require_class(model, y);
  const auto covering = memory.query(image_id, y);
  if (covering.empty()) return 0.0;
  const KernelTable table = kernel_table(model, memory, ref, kernel, false);
  double acc = 0.0;
  for (size_t e : covering)
    for (int j = 0; j < model.num_concepts(); ++j)
      acc += table.kappa(static_cast<Eigen::Index>(e), j) * model.weights(y, j) * model.weights(y, j);
  return acc;
}

double aggr_loss_factored(const PrototypeModel& model, size_t image_id, int y, const Memory& memory) {
  require_class(model, y);
  Eigen::RowVectorXd frozen_sum = Eigen::RowVectorXd::Zero(model.patch_dim());
  for (const auto* snap : memory.query_snapshots(image_id, y))
    frozen_sum += Eigen::Map<const Eigen::RowVectorXd>(snap->frozen_p.data(), model.patch_dim());
  Eigen::RowVectorXd weighted = Eigen::RowVectorXd::Zero(model.patch_dim());
  for (int j = 0; j < model.num_concepts(); ++j)
    weighted += model.weights(y, j) * model.weights(y, j) * model.prototypes.row(j);
  return frozen_sum.dot(weighted);
}

double relevance_penalty(const PrototypeModel& model, int y, const std::set<int>& relevant, double epsilon_rel) {
  require_class(model, y);
  if (!(epsilon_rel > 0.0)) throw Error("relevance_penalty: epsilon_rel must be positive");
  double acc = 0.0;
  for (int j : relevant) {
    require_concept(model, j);
    const double gap = std::max(0.0, epsilon_rel - std::abs(model.weights(y, j)));
    acc += gap * gap;
  }
  return acc;
}

double concept_label_loss(const PrototypeModel& model, const Raster& x, std::span<const ConceptTarget> targets) {
  if (targets.empty()) throw Error("concept_label_loss: no targets");
  double acc = 0.0;
  for (const auto& t : targets) {
    const auto a = activation(ConceptView::of(model, t.concept_index), x);
    acc += bce(a.c, t.desired);
  }
  return acc / static_cast<double>(targets.size());
}

double concept_region_loss(const PrototypeModel& model, const Raster& x, int j, const Mask& region) {
  if (region.height != x.height || region.width != x.width)
    throw DimensionError("concept_region_loss: region size does not match image");
  const FieldMap map = field_attribution(ConceptView::of(model, j), x);
  double value = 0.0;
  region_upstream(map, region, &value);
  return value;
}

Objective::Objective(LossSpec spec, const Memory* memory, const ReferenceSet* ref, const Supervision* supervision)
    : spec_(spec), memory_(memory), ref_(ref), supervision_(supervision) {
  spec_.validate();
}

const KernelTable* Objective::table_for(const PrototypeModel& model, bool with_gradient) const {
  if (cached_ && cached_entries_ == memory_->size() && (cached_gradient_ || !with_gradient) &&
      cached_prototypes_.rows() == model.prototypes.rows() && cached_prototypes_ == model.prototypes)
    return &*cached_;
  static const ReferenceSet kNoReference;
  cached_ = kernel_table(model, *memory_, ref_ ? *ref_ : kNoReference, spec_.kernel, with_gradient);
  cached_prototypes_ = model.prototypes;
  cached_entries_ = memory_->size();
  cached_gradient_ = with_gradient;
  return &*cached_;
}

LossBreakdown Objective::evaluate(const PrototypeModel& model, std::span<const Example> batch, GradientSet* grads,
                                  bool prototype_grads) const {
  if (batch.empty()) throw Error("objective: empty batch");
  const int k = model.num_concepts();
  const bool want_grads = grads != nullptr;
  const bool want_proto = want_grads && prototype_grads;
  if (want_grads) *grads = GradientSet::zeros_like(model);

  const bool aggr_active = spec_.lambda_aggr > 0.0 && memory_ != nullptr && !memory_->empty();
  const KernelTable* table = nullptr;

  LossBreakdown sum;
  for (const Example& ex : batch) {
    if (ex.image == nullptr) throw Error("objective: example without image");
    require_class(model, ex.label);
    const int y = ex.label;
    const ConceptActivations acts = activations(model, *ex.image);
    const Eigen::VectorXd probs = predict_proba(scores(model, acts));

    const double ce = cross_entropy(probs, y);
    check_finite(ce, "cross_entropy");
    sum.cross_entropy += ce;
    Eigen::VectorXd d_c = Eigen::VectorXd::Zero(k);
    if (want_grads && probs[y] >= kProbFloor) {
      Eigen::VectorXd d_s = probs;
      d_s[y] -= 1.0;
      grads->d_weights += d_s * acts.c.transpose();
      d_c += model.weights.transpose() * d_s;
    }

    if (spec_.lambda_attr > 0.0 && supervision_ != nullptr) {
      if (auto it = supervision_->concept_masks.find(ex.id); it != supervision_->concept_masks.end()) {
        const double term = attr_index_loss(model, y, it->second);
        check_finite(term, "attr");
        sum.attr += term;
        if (want_grads)
          for (int j = 0; j < k; ++j)
            if (!it->second[static_cast<size_t>(j)])
              grads->d_weights(y, j) += spec_.lambda_attr * 2.0 * model.weights(y, j);
      }
    }

    if (aggr_active) {
      const auto covering = memory_->query(ex.id, y);
      if (!covering.empty()) {
        if (table == nullptr) table = table_for(model, want_proto);
        double term = 0.0;
        for (size_t e : covering)
          for (int j = 0; j < k; ++j) {
            const double kv = table->kappa(static_cast<Eigen::Index>(e), j);
            const double w = model.weights(y, j);
            term += kv * w * w;
            if (want_grads) grads->d_weights(y, j) += spec_.lambda_aggr * 2.0 * kv * w;
            if (want_proto)
              grads->d_prototypes.row(j) += spec_.lambda_aggr * w * w * table->gradient[e].row(j);
          }
        check_finite(term, "aggr");
        sum.aggr += term;
      }
    }

    if (spec_.lambda_relevance > 0.0 && supervision_ != nullptr) {
      if (auto it = supervision_->relevant.find(y); it != supervision_->relevant.end()) {
        const double term = relevance_penalty(model, y, it->second, spec_.epsilon_rel);
        check_finite(term, "relevance");
        sum.relevance += term;
        if (want_grads)
          for (int j : it->second) {
            const double w = model.weights(y, j);
            const double gap = std::max(0.0, spec_.epsilon_rel - std::abs(w));
            const double sign = (w > 0.0) - (w < 0.0);
            grads->d_weights(y, j) += spec_.lambda_relevance * -2.0 * gap * sign;
          }
      }
    }

    if (spec_.lambda_concept_label > 0.0 && supervision_ != nullptr) {
      if (auto it = supervision_->concept_labels.find(ex.id);
          it != supervision_->concept_labels.end() && !it->second.empty()) {
        const auto n = static_cast<double>(it->second.size());
        double term = 0.0;
        for (const auto& t : it->second) {
          require_concept(model, t.concept_index);
          term += bce(acts.c[t.concept_index], t.desired) / n;
          if (want_proto) d_c[t.concept_index] += spec_.lambda_concept_label * bce_grad(acts.c[t.concept_index], t.desired) / n;
        }
        check_finite(term, "concept_label");
        sum.concept_label += term;
      }
    }

    if (spec_.lambda_concept_region > 0.0 && supervision_ != nullptr) {
      if (auto it = supervision_->regions.find(ex.id); it != supervision_->regions.end()) {
        double term = 0.0;
        for (const auto& t : it->second) {
          require_concept(model, t.concept_index);
          if (t.region.height != ex.image->height || t.region.width != ex.image->width)
            throw DimensionError("concept region does not match image size");
          const ConceptView view = ConceptView::of(model, t.concept_index);
          const OcclusionGains gains = occlusion_gains(view, *ex.image, acts.locations[static_cast<size_t>(t.concept_index)]);
          const FieldMap map = field_map(gains, model.patch_h, model.patch_w);
          double value = 0.0;
          const auto upstream = region_upstream(map, t.region, &value);
          term += value;
          if (want_proto)
            grads->d_prototypes.row(t.concept_index) +=
                spec_.lambda_concept_region * field_map_backward(view, *ex.image, gains, upstream).transpose();
        }
        check_finite(term, "concept_region");
        sum.concept_region += term;
      }
    }

    if (want_proto)
      for (int j = 0; j < k; ++j) {
        if (d_c[j] == 0.0) continue;
        const auto loc = acts.locations[static_cast<size_t>(j)];
        const Eigen::RowVectorXd z = extract_patch(*ex.image, loc, model.patch_h, model.patch_w).transpose();
        grads->d_prototypes.row(j) += d_c[j] * acts.c[j] * 2.0 * (z - model.prototypes.row(j)) / model.tau;
      }
  }

  const auto n = static_cast<double>(batch.size());
  LossBreakdown out;
  out.cross_entropy = sum.cross_entropy / n;
  out.attr = sum.attr / n;
  out.aggr = sum.aggr / n;
  out.relevance = sum.relevance / n;
  out.concept_label = sum.concept_label / n;
  out.concept_region = sum.concept_region / n;
  out.total = out.cross_entropy + spec_.lambda_attr * out.attr + spec_.lambda_aggr * out.aggr +
              spec_.lambda_relevance * out.relevance + spec_.lambda_concept_label * out.concept_label +
              spec_.lambda_concept_region * out.concept_region;
  check_finite(out.total, "total");
  if (want_grads) {
    grads->d_weights /= n;
    grads->d_prototypes /= n;
  }
  return out;
}

std::pair<LossBreakdown, GradientSet> forward_backward(const PrototypeModel& model, std::span<const Example> batch,
                                                       const LossSpec& spec, const Memory& memory,
                                                       const ReferenceSet& ref, const Supervision& supervision) {
  Objective objective(spec, &memory, &ref, &supervision);
  GradientSet grads;
  const LossBreakdown loss = objective.evaluate(model, batch, &grads, true);
  return {loss, std::move(grads)};
}

double total_loss(const PrototypeModel& model, std::span<const Example> batch, const LossSpec& spec,
                  const Memory& memory, const ReferenceSet& ref, const Supervision& supervision) {
  return Objective(spec, &memory, &ref, &supervision).evaluate(model, batch).total;
}

}  // namespace gbm
