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

#include "gbm/kernels.hpp"

#include <cmath>

#include "gbm/codec.hpp"
#include "gbm/error.hpp"
#include "gbm/shapes.hpp"

namespace gbm {

ReferenceSet ReferenceSet::from(const SplitData& split) {
  ReferenceSet ref;
  ref.images = split.images;
  std::string digests;
  for (const auto& img : *ref.images) digests += sha256_hex(f64_bytes(img.data));
  ref.id = sha256_hex(std::to_string(ref.images->size()) + ":" + digests);
  return ref;
}

ReferenceSet ReferenceSet::from(std::vector<Raster> images) {
  SplitData split;
  split.images = std::make_shared<std::vector<Raster>>(std::move(images));
  return from(split);
}

ConceptProfile concept_profile(const ConceptView& cv, const ReferenceSet& ref, bool with_maps) {
  ConceptProfile prof;
  prof.activations.reserve(ref.size());
  for (size_t i = 0; i < ref.size(); ++i) {
    const auto a = activation(cv, ref.image(i));
    prof.activations.push_back(a.c);
    prof.locations.push_back(a.location);
    if (with_maps) prof.maps.push_back(field_attribution_at(cv, ref.image(i), a.location));
  }
  return prof;
}

std::vector<ConceptProfile> concept_profiles(const PrototypeModel& model, const ReferenceSet& ref, bool with_maps) {
  const int k = model.num_concepts();
  std::vector<ConceptProfile> out(static_cast<size_t>(k));
  for (auto& p : out) {
    p.activations.reserve(ref.size());
    p.locations.reserve(ref.size());
  }
  for (size_t i = 0; i < ref.size(); ++i) {
    const auto acts = activations(model, ref.image(i));
    for (int j = 0; j < k; ++j) {
      auto& prof = out[static_cast<size_t>(j)];
      prof.activations.push_back(acts.c[j]);
      prof.locations.push_back(acts.locations[static_cast<size_t>(j)]);
      if (with_maps)
        prof.maps.push_back(field_attribution_at(ConceptView::of(model, j), ref.image(i),
                                                 acts.locations[static_cast<size_t>(j)]));
    }
  }
  return out;
}

double kappa_act(const ConceptProfile& a, const ConceptProfile& b, double rho) {
  if (a.activations.empty()) throw ProfileError("kappa_act: empty reference set");
  if (a.activations.size() != b.activations.size()) throw ProfileError("kappa_act: profiles over different reference sets");
  if (!(rho > 0.0)) throw Error("kappa_act: rho must be positive");
  double acc = 0.0;
  for (size_t i = 0; i < a.activations.size(); ++i) acc += std::pow(a.activations[i] * b.activations[i], rho);
  return acc / static_cast<double>(a.activations.size());
}

double kappa_attr(const ConceptProfile& a, const ConceptProfile& b, double rho) {
  if (a.maps.empty() || b.maps.empty()) throw ProfileError("kappa_attr: attribution maps not available");
  if (a.maps.size() != b.maps.size()) throw ProfileError("kappa_attr: profiles over different reference sets");
  if (!(rho > 0.0)) throw Error("kappa_attr: rho must be positive");
  double acc = 0.0;
  for (size_t i = 0; i < a.maps.size(); ++i) {
    if (a.maps[i].patch_h != b.maps[i].patch_h || a.maps[i].patch_w != b.maps[i].patch_w)
      throw DimensionError("kappa_attr: map dimension mismatch");
    acc += std::pow(field_inner(a.maps[i], b.maps[i]), rho);
  }
  return acc / static_cast<double>(a.maps.size());
}

double kappa_param(std::span<const double> p1, std::span<const double> p2, double sigma) {
  if (p1.size() != p2.size()) throw DimensionError("kappa_param: length mismatch");
  if (!(sigma > 0.0)) throw Error("kappa_param: sigma must be positive");
  double d2 = 0.0;
  for (size_t i = 0; i < p1.size(); ++i) d2 += (p1[i] - p2[i]) * (p1[i] - p2[i]);
  return std::exp(-d2 / (sigma * sigma));
}

double kappa_param_raw(std::span<const double> p1, std::span<const double> p2) {
  if (p1.size() != p2.size()) throw DimensionError("kappa_param_raw: length mismatch");
  double acc = 0.0;
  for (size_t i = 0; i < p1.size(); ++i) acc += p1[i] * p2[i];
  return acc;
}

std::string to_string(KernelKind k) {
  switch (k) {
    case KernelKind::act: return "act";
    case KernelKind::attr: return "attr";
    case KernelKind::param: return "param";
    case KernelKind::param_raw: return "param_raw";
  }
  return "?";
}

KernelKind parse_kernel(const std::string& s) {
  if (s == "act") return KernelKind::act;
  if (s == "attr") return KernelKind::attr;
  if (s == "param") return KernelKind::param;
  if (s == "param_raw") return KernelKind::param_raw;
  throw FormatError("unknown kernel '" + s + "' (expected act, attr, param or param_raw)");
}

double KernelSpec::resolved_sigma(int patch_dim) const {
  return sigma > 0.0 ? sigma : std::sqrt(static_cast<double>(patch_dim)) / 4.0;
}

nlohmann::json KernelSpec::to_json() const { return {{"kind", to_string(kind)}, {"rho", rho}, {"sigma", sigma}}; }

KernelSpec KernelSpec::from_json(const nlohmann::json& j) {
  KernelSpec s;
  if (j.contains("kind")) s.kind = parse_kernel(j.at("kind").get<std::string>());
  s.rho = j.value("rho", s.rho);
  s.sigma = j.value("sigma", s.sigma);
  return s;
}

bool FeedbackScope::covers(size_t image_id, int y) const {
  switch (kind) {
    case ScopeKind::instance: return image == image_id && label == y;
    case ScopeKind::klass: return label == y;
    case ScopeKind::global: return true;
  }
  return false;
}

nlohmann::json FeedbackScope::to_json() const {
  switch (kind) {
    case ScopeKind::instance: return {{"kind", "instance"}, {"image", image}, {"class", label}};
    case ScopeKind::klass: return {{"kind", "class"}, {"class", label}};
    case ScopeKind::global: return {{"kind", "global"}};
  }
  return {};
}

FeedbackScope FeedbackScope::from_json(const nlohmann::json& j) {
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "instance") return instance(j.at("image").get<size_t>(), j.at("class").get<int>());
  if (kind == "class") return of_class(j.at("class").get<int>());
  if (kind == "global") return global();
  throw FormatError("unknown scope kind '" + kind + "'");
}

void Memory::insert(const PrototypeModel& model, int j, const FeedbackScope& scope, const ReferenceSet& ref, int round) {
  if (j < 0 || j >= model.num_concepts()) throw DimensionError("memory insert: concept index out of range");
  if (reference_set_id_.empty()) reference_set_id_ = ref.id;
  if (ref.id != reference_set_id_) throw ProfileError("memory insert: reference set does not match the memory's");
  ConceptSnapshot snap;
  const auto row = model.prototypes.row(j);
  snap.frozen_p.assign(row.data(), row.data() + row.size());
  snap.patch_h = model.patch_h;
  snap.patch_w = model.patch_w;
  snap.stride = model.stride;
  snap.tau = model.tau;
  snap.created_round = round;
  snap.source_concept = j;
  snap.cache = concept_profile(snap.view(), ref, true);
  entries_.push_back({std::move(snap), scope});
}

std::vector<size_t> Memory::query(size_t image_id, int y) const {
  std::vector<size_t> out;
  for (size_t e = 0; e < entries_.size(); ++e)
    if (entries_[e].scope.covers(image_id, y)) out.push_back(e);
  return out;
}

std::vector<const ConceptSnapshot*> Memory::query_snapshots(size_t image_id, int y) const {
  std::vector<const ConceptSnapshot*> out;
  for (size_t e : query(image_id, y)) out.push_back(&entries_[e].snapshot);
  return out;
}

KernelTable kernel_table(const PrototypeModel& model, const Memory& memory, const ReferenceSet& ref,
                         const KernelSpec& spec, bool with_gradient) {
  const int k = model.num_concepts();
  const int q = model.patch_dim();
  const auto n_entries = static_cast<Eigen::Index>(memory.size());
  KernelTable table;
  table.kappa = Eigen::MatrixXd::Zero(n_entries, k);
  if (with_gradient) table.gradient.assign(memory.size(), RowMatrix::Zero(k, q));
  if (memory.empty()) return table;

  if (spec.kind == KernelKind::param || spec.kind == KernelKind::param_raw) {
    const double sigma = spec.resolved_sigma(q);
    for (Eigen::Index e = 0; e < n_entries; ++e) {
      const auto& snap = memory.entries()[static_cast<size_t>(e)].snapshot;
      if (static_cast<int>(snap.frozen_p.size()) != q) throw ProfileError("kernel: snapshot patch size differs from model");
      const Eigen::Map<const Eigen::RowVectorXd> frozen(snap.frozen_p.data(), q);
      for (int j = 0; j < k; ++j) {
        const ConceptView live = ConceptView::of(model, j);
        if (spec.kind == KernelKind::param) {
          const double kv = kappa_param(snap.frozen_p, live.p, sigma);
          table.kappa(e, j) = kv;
          if (with_gradient)
            table.gradient[static_cast<size_t>(e)].row(j) =
                kv * 2.0 * (frozen - model.prototypes.row(j)) / (sigma * sigma);
        } else {
          table.kappa(e, j) = kappa_param_raw(snap.frozen_p, live.p);
          if (with_gradient) table.gradient[static_cast<size_t>(e)].row(j) = frozen;
        }
      }
    }
    return table;
  }

  if (memory.reference_set_id() != ref.id) throw ProfileError("kernel: memory was built on a different reference set");
  for (const auto& entry : memory.entries())
    if (entry.snapshot.cache.activations.size() != ref.size())
      throw ProfileError("kernel: snapshot profile does not match the reference set");

  const bool use_maps = spec.kind == KernelKind::attr;
  const auto live = concept_profiles(model, ref, use_maps);
  const auto N = static_cast<double>(ref.size());
  for (Eigen::Index e = 0; e < n_entries; ++e) {
    const auto& snap = memory.entries()[static_cast<size_t>(e)].snapshot;
    for (int j = 0; j < k; ++j) {
      const auto& prof = live[static_cast<size_t>(j)];
      table.kappa(e, j) = use_maps ? kappa_attr(snap.cache, prof, spec.rho) : kappa_act(snap.cache, prof, spec.rho);
    }
  }
  if (!with_gradient) return table;

  for (int j = 0; j < k; ++j) {
    const ConceptView view = ConceptView::of(model, j);
    const auto& prof = live[static_cast<size_t>(j)];
    for (size_t x = 0; x < ref.size(); ++x) {
      const Raster& img = ref.image(x);
      const PatchPos loc = prof.locations[x];
      if (!use_maps) {
        // d/dp (a c)^rho = rho (a c)^rho * 2 (z - p) / tau
        const Eigen::RowVectorXd dc_dp =
            2.0 * (extract_patch(img, loc, model.patch_h, model.patch_w).transpose() - model.prototypes.row(j)) /
            model.tau;
        for (Eigen::Index e = 0; e < n_entries; ++e) {
          const double a = memory.entries()[static_cast<size_t>(e)].snapshot.cache.activations[x];
          const double prod = a * prof.activations[x];
          if (prod <= 0.0) continue;
          table.gradient[static_cast<size_t>(e)].row(j) += spec.rho * std::pow(prod, spec.rho) / N * dc_dp;
        }
      } else {
        const OcclusionGains gains = occlusion_gains(view, img, loc);
        for (Eigen::Index e = 0; e < n_entries; ++e) {
          const FieldMap& other = memory.entries()[static_cast<size_t>(e)].snapshot.cache.maps[x];
          const double h = field_inner(other, prof.maps[x]);
          if (h <= 0.0) continue;
          // Upstream for the live map: the frozen map's value at the same pixel.
          std::vector<double> upstream(static_cast<size_t>(model.patch_h * model.patch_w), 0.0);
          for (int r = 0; r < model.patch_h; ++r)
            for (int c = 0; c < model.patch_w; ++c) {
              const int rr = loc.row + r - other.location.row;
              const int cc = loc.col + c - other.location.col;
              if (rr >= 0 && rr < other.patch_h && cc >= 0 && cc < other.patch_w)
                upstream[static_cast<size_t>(r * model.patch_w + c)] =
                    other.values[static_cast<size_t>(rr * other.patch_w + cc)];
            }
          const Eigen::VectorXd dh = field_map_backward(view, img, gains, upstream);
          table.gradient[static_cast<size_t>(e)].row(j) +=
              (spec.rho * std::pow(h, spec.rho - 1.0) / N) * dh.transpose();
        }
      }
    }
  }
  return table;
}

}  // namespace gbm
