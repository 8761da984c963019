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

#include "gbm/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "gbm/error.hpp"
#include "gbm/rng.hpp"

namespace gbm {

std::string to_string(Phase p) {
  switch (p) {
    case Phase::joint: return "joint";
    case Phase::concepts: return "concepts";
    case Phase::weights: return "weights";
  }
  return "?";
}

Phase parse_phase(const std::string& s) {
  if (s == "joint") return Phase::joint;
  if (s == "concepts") return Phase::concepts;
  if (s == "weights") return Phase::weights;
  throw FormatError("unknown phase '" + s + "'");
}

void Schedule::validate() const {
  if (initial_epochs < 0) throw ValidationError("schedule.initial_epochs", "must be nonnegative");
  if (refine_epochs < 0) throw ValidationError("schedule.refine_epochs", "must be nonnegative");
  if (phase_length < 1) throw ValidationError("schedule.phase_length", "must be positive");
  if (refine_epochs % phase_length != 0)
    throw ValidationError("schedule.refine_epochs", "must be a multiple of phase_length");
  if (!(learning_rate >= 0.0)) throw ValidationError("schedule.learning_rate", "must be nonnegative");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ValidationError("schedule.momentum", "must lie in [0, 1)");
  if (batch_size < 1) throw ValidationError("schedule.batch_size", "must be positive");
  if (stability_window < 2) throw ValidationError("schedule.stability_window", "must be at least 2");
}

std::vector<Phase> Schedule::refine_phases() const {
  std::vector<Phase> out;
  for (int e = 0; e < refine_epochs; ++e) out.push_back((e / phase_length) % 2 == 0 ? Phase::concepts : Phase::weights);
  return out;
}

nlohmann::json Schedule::to_json() const {
  return {{"initial_epochs", initial_epochs}, {"refine_epochs", refine_epochs},
          {"phase_length", phase_length},     {"learning_rate", learning_rate},
          {"momentum", momentum},             {"batch_size", batch_size},
          {"seed", seed},                     {"stability_window", stability_window},
          {"stability_delta", stability_delta}};
}

Schedule Schedule::from_json(const nlohmann::json& j) {
  Schedule s;
  s.initial_epochs = j.value("initial_epochs", s.initial_epochs);
  s.refine_epochs = j.value("refine_epochs", s.refine_epochs);
  s.phase_length = j.value("phase_length", s.phase_length);
  s.learning_rate = j.value("learning_rate", s.learning_rate);
  s.momentum = j.value("momentum", s.momentum);
  s.batch_size = j.value("batch_size", s.batch_size);
  s.seed = j.value("seed", s.seed);
  s.stability_window = j.value("stability_window", s.stability_window);
  s.stability_delta = j.value("stability_delta", s.stability_delta);
  s.validate();
  return s;
}

RelianceProbe RelianceProbe::from(const Dataset& ds, const PrototypeModel& model) {
  RelianceProbe probe;
  probe.reference = ReferenceSet::from(confounder_probe(ds));
  probe.confounded_class = ds.config.confounded_class;
  const Raster patch = confounder_patch(ds.config, model.patch_h);
  if (patch.width != model.patch_w) throw DimensionError("reliance probe: square patches expected");
  const ConceptView view{patch.data, model.patch_h, model.patch_w, model.stride, model.tau};
  probe.template_profile = concept_profile(view, probe.reference, false);
  return probe;
}

std::vector<double> RelianceProbe::similarity(const PrototypeModel& model) const {
  const auto profiles = concept_profiles(model, reference, false);
  std::vector<double> out;
  out.reserve(profiles.size());
  for (const auto& p : profiles) out.push_back(kappa_act(template_profile, p));
  return out;
}

double confound_reliance(const PrototypeModel& model, std::span<const double> similarity, int confounded_class) {
  if (confounded_class < 0 || confounded_class >= model.num_classes)
    throw DimensionError("confound_reliance: invalid class");
  if (similarity.size() != static_cast<size_t>(model.num_concepts()))
    throw DimensionError("confound_reliance: one similarity per concept expected");
  const auto row = model.weights.row(confounded_class);
  const double wmax = row.cwiseAbs().maxCoeff();
  if (!(wmax > 0.0)) return 0.0;
  double best = 0.0;
  for (int j = 0; j < model.num_concepts(); ++j)
    best = std::max(best, similarity[static_cast<size_t>(j)] * std::abs(row[j]) / wmax);
  return best;
}

double confound_reliance(const PrototypeModel& model, const RelianceProbe& probe) {
  return confound_reliance(model, probe.similarity(model), probe.confounded_class);
}

nlohmann::json EpochRecord::to_json() const {
  return {{"epoch", epoch},
          {"round", round},
          {"phase", to_string(phase)},
          {"train_loss", train_loss},
          {"train_accuracy", train_accuracy},
          {"test_accuracy", test_accuracy},
          {"train_class_accuracy", train_class_accuracy},
          {"test_class_accuracy", test_class_accuracy},
          {"terms", terms.to_json()},
          {"confound_reliance", confound_reliance}};
}

EpochRecord EpochRecord::from_json(const nlohmann::json& j) {
  EpochRecord r;
  r.epoch = j.at("epoch").get<int>();
  r.round = j.value("round", 0);
  r.phase = parse_phase(j.value("phase", std::string("joint")));
  r.train_loss = j.value("train_loss", 0.0);
  r.train_accuracy = j.value("train_accuracy", 0.0);
  r.test_accuracy = j.value("test_accuracy", 0.0);
  r.train_class_accuracy = j.value("train_class_accuracy", std::vector<double>{});
  r.test_class_accuracy = j.value("test_class_accuracy", std::vector<double>{});
  if (j.contains("terms")) {
    const auto& t = j.at("terms");
    r.terms.total = t.value("total", 0.0);
    r.terms.cross_entropy = t.value("cross_entropy", 0.0);
    r.terms.attr = t.value("attr", 0.0);
    r.terms.aggr = t.value("aggr", 0.0);
    r.terms.relevance = t.value("relevance", 0.0);
    r.terms.concept_label = t.value("concept_label", 0.0);
    r.terms.concept_region = t.value("concept_region", 0.0);
  }
  r.confound_reliance = j.value("confound_reliance", 0.0);
  return r;
}

void MetricsHistory::append(const MetricsHistory& other) {
  records.insert(records.end(), other.records.begin(), other.records.end());
}

bool is_stable(const MetricsHistory& history, int window, double delta) {
  if (window < 2) throw Error("is_stable: window must be at least 2");
  if (history.records.size() < static_cast<size_t>(window)) return false;
  double lo = 1.0 / 0.0, hi = -1.0 / 0.0;
  for (auto it = history.records.end() - window; it != history.records.end(); ++it) {
    lo = std::min(lo, it->test_accuracy);
    hi = std::max(hi, it->test_accuracy);
  }
  return hi - lo <= delta;
}

Accuracy accuracy(const PrototypeModel& model, const SplitData& split, int num_classes) {
  Accuracy acc;
  acc.per_class.assign(static_cast<size_t>(num_classes), 0.0);
  std::vector<int> count(static_cast<size_t>(num_classes), 0);
  int correct = 0;
  for (size_t i = 0; i < split.size(); ++i) {
    const int y = split.scenes[i].class_label;
    const bool ok = predict(model, split.image(i)) == y;
    correct += ok;
    count[static_cast<size_t>(y)] += 1;
    acc.per_class[static_cast<size_t>(y)] += ok;
  }
  for (size_t c = 0; c < count.size(); ++c)
    if (count[c] > 0) acc.per_class[c] /= count[c];
  acc.overall = split.size() ? static_cast<double>(correct) / static_cast<double>(split.size()) : 0.0;
  return acc;
}

MetricsHistory run_epochs(PrototypeModel& model, const Schedule& schedule, const TrainContext& ctx,
                          const std::vector<Phase>& phases, const Objective& objective) {
  schedule.validate();
  if (ctx.data == nullptr) throw Error("trainer: no dataset");
  const SplitData& train = ctx.data->train;
  if (train.size() == 0) throw Error("trainer: empty training split");

  std::vector<Example> examples(train.size());
  for (size_t i = 0; i < train.size(); ++i) examples[i] = {&train.image(i), train.scenes[i].class_label, i};

  MetricsHistory history;
  GradientSet velocity = GradientSet::zeros_like(model);
  Phase previous = phases.empty() ? Phase::joint : phases.front();

  for (size_t e = 0; e < phases.size(); ++e) {
    const Phase phase = phases[e];
    const int epoch = ctx.first_epoch + static_cast<int>(e);
    if (phase != previous) velocity = GradientSet::zeros_like(model);
    previous = phase;
    const bool update_concepts = phase != Phase::weights;
    const bool update_weights = phase != Phase::concepts;

    std::vector<size_t> order(train.size());
    std::iota(order.begin(), order.end(), size_t{0});
    Rng rng(derive_seed(schedule.seed, {static_cast<std::uint64_t>(ctx.round), static_cast<std::uint64_t>(epoch)}));
    shuffle(order.begin(), order.end(), rng);

    const PrototypeModel last_good = model;
    const GradientSet last_velocity = velocity;
    LossBreakdown acc;
    try {
      std::vector<Example> batch;
      for (size_t start = 0; start < order.size(); start += static_cast<size_t>(schedule.batch_size)) {
        const size_t end = std::min(order.size(), start + static_cast<size_t>(schedule.batch_size));
        batch.clear();
        for (size_t i = start; i < end; ++i) batch.push_back(examples[order[i]]);
        GradientSet g;
        const LossBreakdown l = objective.evaluate(model, batch, &g, update_concepts);
        const auto n = static_cast<double>(batch.size());
        acc.total += l.total * n;
        acc.cross_entropy += l.cross_entropy * n;
        acc.attr += l.attr * n;
        acc.aggr += l.aggr * n;
        acc.relevance += l.relevance * n;
        acc.concept_label += l.concept_label * n;
        acc.concept_region += l.concept_region * n;
        if (update_concepts) {
          velocity.d_prototypes = schedule.momentum * velocity.d_prototypes + g.d_prototypes;
          model.prototypes -= schedule.learning_rate * velocity.d_prototypes;
        }
        if (update_weights) {
          velocity.d_weights = schedule.momentum * velocity.d_weights + g.d_weights;
          model.weights -= schedule.learning_rate * velocity.d_weights;
        }
        if (!model.prototypes.allFinite() || !model.weights.allFinite())
          throw NumericError("non-finite parameters after update");
      }
    } catch (const NumericError& err) {
      model = last_good;
      velocity = last_velocity;
      throw NumericError("epoch " + std::to_string(epoch) + ": " + err.what() + "; model restored to epoch start");
    }

    const auto n = static_cast<double>(train.size());
    EpochRecord rec;
    rec.epoch = epoch;
    rec.round = ctx.round;
    rec.phase = phase;
    rec.terms.total = acc.total / n;
    rec.terms.cross_entropy = acc.cross_entropy / n;
    rec.terms.attr = acc.attr / n;
    rec.terms.aggr = acc.aggr / n;
    rec.terms.relevance = acc.relevance / n;
    rec.terms.concept_label = acc.concept_label / n;
    rec.terms.concept_region = acc.concept_region / n;
    rec.train_loss = rec.terms.total;
    const Accuracy tr = accuracy(model, train, model.num_classes);
    const Accuracy te = accuracy(model, ctx.data->test, model.num_classes);
    rec.train_accuracy = tr.overall;
    rec.train_class_accuracy = tr.per_class;
    rec.test_accuracy = te.overall;
    rec.test_class_accuracy = te.per_class;
    if (ctx.probe != nullptr) rec.confound_reliance = confound_reliance(model, *ctx.probe);
    history.records.push_back(rec);
    if (ctx.observer) ctx.observer(rec, model);
  }
  return history;
}

MetricsHistory train_initial(PrototypeModel& model, const Schedule& schedule, const TrainContext& ctx) {
  const Objective objective(LossSpec::cross_entropy_only());
  return run_epochs(model, schedule, ctx, std::vector<Phase>(static_cast<size_t>(schedule.initial_epochs), Phase::joint),
                    objective);
}

MetricsHistory train_refine(PrototypeModel& model, const Schedule& schedule, const TrainContext& ctx,
                            const LossSpec& spec, const Memory& memory, const ReferenceSet& ref,
                            const Supervision& supervision) {
  const Objective objective(spec, &memory, &ref, &supervision);
  return run_epochs(model, schedule, ctx, schedule.refine_phases(), objective);
}

}  // namespace gbm
