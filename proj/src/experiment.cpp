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

#include "gbm/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>

#include "gbm/error.hpp"
#include "gbm/persist.hpp"

namespace gbm {

std::string to_string(Condition c) {
  switch (c) {
    case Condition::none: return "none";
    case Condition::attr: return "attr";
    case Condition::aggr: return "aggr";
  }
  return "?";
}

Condition parse_condition(const std::string& s) {
  if (s == "none") return Condition::none;
  if (s == "attr") return Condition::attr;
  if (s == "aggr") return Condition::aggr;
  throw ValidationError("condition", "unknown condition '" + s + "' (expected none, attr or aggr)");
}

namespace {

std::string scope_name(ScopeKind k) {
  switch (k) {
    case ScopeKind::instance: return "instance";
    case ScopeKind::klass: return "class";
    case ScopeKind::global: return "global";
  }
  return "?";
}

ScopeKind parse_scope_kind(const std::string& s) {
  if (s == "class") return ScopeKind::klass;
  if (s == "global") return ScopeKind::global;
  throw ValidationError("oracle_scope", "oracle scope must be 'class' or 'global'");
}

}  // namespace

LossSpec ExperimentConfig::refine_loss() const {
  LossSpec spec = session.loss;
  spec.lambda_attr = condition == Condition::attr ? lambda : 0.0;
  spec.lambda_aggr = condition == Condition::aggr ? lambda : 0.0;
  return spec;
}

nlohmann::json ExperimentConfig::to_json() const {
  return {{"session", session.to_json()},
          {"condition", to_string(condition)},
          {"oracle_threshold", oracle_threshold},
          {"oracle_scope", scope_name(oracle_scope)},
          {"lambda", lambda}};
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("config", "config must be a JSON object");
  ExperimentConfig c;
  if (j.contains("session")) c.session = SessionConfig::from_json(j.at("session"));
  try {
    if (j.contains("condition")) c.condition = parse_condition(j.at("condition").get<std::string>());
    c.oracle_threshold = j.value("oracle_threshold", c.oracle_threshold);
    if (j.contains("oracle_scope")) c.oracle_scope = parse_scope_kind(j.at("oracle_scope").get<std::string>());
    c.lambda = j.value("lambda", c.lambda);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("config", std::string("malformed experiment config: ") + e.what());
  }
  if (!(c.lambda >= 0.0) || !std::isfinite(c.lambda)) throw ValidationError("lambda", "lambda must be finite and >= 0");
  if (!(c.oracle_threshold >= 0.0 && c.oracle_threshold <= 1.0))
    throw ValidationError("oracle_threshold", "oracle_threshold must lie in [0, 1]");
  return c;
}

nlohmann::json PrototypeSummary::to_json() const {
  return {{"concept", concept_index},
          {"owner", owner},
          {"iou", iou},
          {"confound_similarity", confound_similarity},
          {"matched_atom", matched_atom}};
}

PrototypeSummary PrototypeSummary::from_json(const nlohmann::json& j) {
  PrototypeSummary p;
  p.concept_index = j.at("concept").get<int>();
  p.owner = j.at("owner").get<int>();
  p.iou = j.at("iou").get<double>();
  p.confound_similarity = j.value("confound_similarity", 0.0);
  p.matched_atom = j.value("matched_atom", std::string());
  return p;
}

double ExperimentResult::best_confounded_iou() const {
  double best = 0.0;
  for (const auto& p : prototypes)
    if (p.owner == confounded_class) best = std::max(best, p.iou);
  return best;
}

nlohmann::json ExperimentResult::to_json() const {
  nlohmann::json protos = nlohmann::json::array();
  for (const auto& p : prototypes) protos.push_back(p.to_json());
  return {{"condition", to_string(condition)},
          {"seed", seed},
          {"confounded_class", confounded_class},
          {"train_accuracy", train_accuracy},
          {"test_accuracy", test_accuracy},
          {"train_class_accuracy", train_class_accuracy},
          {"test_class_accuracy", test_class_accuracy},
          {"reliance_before", reliance_before},
          {"confound_reliance", confound_reliance},
          {"marked", marked},
          {"prototypes", protos},
          {"checkpoint_hash", checkpoint_hash},
          {"dataset_hash", dataset_hash},
          {"seconds", seconds}};
}

ExperimentResult ExperimentResult::from_json(const nlohmann::json& j) {
  ExperimentResult r;
  r.condition = parse_condition(j.at("condition").get<std::string>());
  r.seed = j.at("seed").get<std::uint64_t>();
  r.confounded_class = j.at("confounded_class").get<int>();
  r.train_accuracy = j.at("train_accuracy").get<double>();
  r.test_accuracy = j.at("test_accuracy").get<double>();
  r.train_class_accuracy = j.at("train_class_accuracy").get<std::vector<double>>();
  r.test_class_accuracy = j.at("test_class_accuracy").get<std::vector<double>>();
  r.reliance_before = j.value("reliance_before", 0.0);
  r.confound_reliance = j.at("confound_reliance").get<double>();
  r.marked = j.value("marked", std::vector<int>{});
  for (const auto& p : j.at("prototypes")) r.prototypes.push_back(PrototypeSummary::from_json(p));
  r.checkpoint_hash = j.at("checkpoint_hash").get<std::string>();
  r.dataset_hash = j.at("dataset_hash").get<std::string>();
  r.seconds = j.value("seconds", 0.0);
  return r;
}

double causal_iou(const PrototypeModel& model, int j, const Dataset& data) {
  const auto reps = representatives(model, j, data.train, 1);
  if (reps.empty()) return 0.0;
  const Raster& img = data.train.image(reps[0].image);
  const Scene& scene = data.train.scenes[reps[0].image];
  const Mask region =
      attribution_region(field_attribution_at(ConceptView::of(model, j), img, reps[0].location), img.height, img.width);
  double best = 0.0;
  for (size_t s = 0; s < scene.shapes.size(); ++s) {
    if (scene.shapes[s].atom() == data.config.confounder) continue;
    best = std::max(best, iou(region, shape_mask(scene, static_cast<int>(s), img.height)));
  }
  return best;
}

std::string matched_atom(const PrototypeModel& model, int j, const Dataset& data) {
  const auto reps = representatives(model, j, data.train, 1);
  if (reps.empty()) return "background";
  const Scene& scene = data.train.scenes[reps[0].image];
  const auto loc = reps[0].location;
  std::string best = "background";
  size_t best_count = 0;
  for (size_t s = 0; s < scene.shapes.size(); ++s) {
    const Mask m = shape_mask(scene, static_cast<int>(s), data.config.image_size);
    size_t count = 0;
    for (int r = 0; r < model.patch_h; ++r)
      for (int c = 0; c < model.patch_w; ++c) count += m.at(loc.row + r, loc.col + c);
    if (count > best_count) {
      best_count = count;
      best = scene.shapes[s].atom().to_string();
    }
  }
  return best;
}

Raster prototype_panel(const PrototypeModel& model, int j, const SplitData& train, int zoom) {
  if (zoom < 1) throw DimensionError("prototype_panel: zoom must be positive");
  if (j < 0 || j >= model.num_concepts()) throw DimensionError("prototype_panel: concept index out of range");
  const int a = model.patch_h, b = model.patch_w;
  const auto reps = representatives(model, j, train, 1);
  if (reps.empty()) throw DimensionError("prototype_panel: empty training split");
  const Raster& img = train.image(reps[0].image);
  const auto loc = reps[0].location;
  const FieldMap map = field_attribution_at(ConceptView::of(model, j), img, loc);
  const double peak = *std::max_element(map.values.begin(), map.values.end());
  const auto proto = model.prototypes.row(j);

  const int gap = zoom;
  Raster panel(a * zoom, 3 * b * zoom + 2 * gap);
  std::fill(panel.data.begin(), panel.data.end(), 1.0);
  for (int r = 0; r < a; ++r)
    for (int c = 0; c < b; ++c) {
      double tiles[3][3];
      const double heat = peak > 0.0 ? map.values[static_cast<size_t>(r * b + c)] / peak : 0.0;
      for (int ch = 0; ch < 3; ++ch) {
        const double px = img.at(loc.row + r, loc.col + c, ch);
        tiles[0][ch] = px;
        tiles[1][ch] = std::clamp(proto(static_cast<Eigen::Index>((r * b + c) * 3 + ch)), 0.0, 1.0);
        tiles[2][ch] = 0.4 * px + (ch == 0 ? 0.6 * heat : 0.0);
      }
      for (int t = 0; t < 3; ++t)
        for (int dr = 0; dr < zoom; ++dr)
          for (int dc = 0; dc < zoom; ++dc)
            for (int ch = 0; ch < 3; ++ch)
              panel.at(r * zoom + dr, t * (b * zoom + gap) + c * zoom + dc, ch) = tiles[t][ch];
    }
  return panel;
}

std::vector<std::filesystem::path> render_prototypes(const PrototypeModel& model, const SplitData& train,
                                                     const std::filesystem::path& dir,
                                                     const std::vector<int>& concepts) {
  std::vector<int> which = concepts;
  if (which.empty())
    for (int j = 0; j < model.num_concepts(); ++j) which.push_back(j);
  std::vector<std::filesystem::path> out;
  for (int j : which) {
    char name[32];
    std::snprintf(name, sizeof name, "concept-%02d.ppm", j);
    const auto path = dir / name;
    write_file(path, encode_ppm(prototype_panel(model, j, train)));
    out.push_back(path);
  }
  return out;
}

ExperimentResult summarize(const DebugSession& session, Condition condition, double reliance_before,
                           std::vector<int> marked, double seconds) {
  const auto& model = session.model();
  const auto& data = session.data();
  ExperimentResult r;
  r.condition = condition;
  r.seed = session.config().schedule.seed;
  r.confounded_class = data.config.confounded_class;
  const auto train = accuracy(model, data.train, model.num_classes);
  const auto test = accuracy(model, data.test, model.num_classes);
  r.train_accuracy = train.overall;
  r.test_accuracy = test.overall;
  r.train_class_accuracy = train.per_class;
  r.test_class_accuracy = test.per_class;
  r.reliance_before = reliance_before;
  const auto sim = session.probe().similarity(model);
  r.confound_reliance = confound_reliance(model, sim, r.confounded_class);
  r.marked = std::move(marked);
  for (int j = 0; j < model.num_concepts(); ++j) {
    PrototypeSummary p;
    p.concept_index = j;
    p.owner = model.owner[static_cast<size_t>(j)];
    p.iou = causal_iou(model, j, data);
    p.confound_similarity = sim[static_cast<size_t>(j)];
    p.matched_atom = matched_atom(model, j, data);
    r.prototypes.push_back(std::move(p));
  }
  r.checkpoint_hash = session.checkpoint_hash();
  r.dataset_hash = data.manifest_hash();
  r.seconds = seconds;
  return r;
}

ExperimentResult run_experiment(const ExperimentConfig& config, std::shared_ptr<const Dataset> data,
                                const std::optional<std::filesystem::path>& out, const EpochObserver& progress) {
  const auto start = std::chrono::steady_clock::now();
  DebugSession session("experiment-" + to_string(config.condition) + "-" + std::to_string(config.session.schedule.seed),
                       config.session, std::move(data));
  if (progress) session.set_listener(progress);
  if (out) session.attach(*out);

  session.run_round();
  const double before = confound_reliance(session.model(), session.probe());
  std::vector<int> marked;
  if (config.condition != Condition::none) {
    for (auto& f : scripted_oracle(session, config.oracle_threshold, config.oracle_scope)) {
      marked.push_back(f.concept_index);
      session.submit_feedback(std::move(f));
    }
  }
  session.set_loss(config.refine_loss());
  session.run_round();

  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  ExperimentResult result = summarize(session, config.condition, before, std::move(marked), seconds);
  if (out) {
    std::vector<int> owned;
    for (int j = 0; j < session.model().num_concepts(); ++j)
      if (session.model().owner[static_cast<size_t>(j)] == result.confounded_class) owned.push_back(j);
    render_prototypes(session.model(), session.data().train, *out / "panels", owned);
    write_file(*out / "experiment.json", config.to_json().dump(2) + "\n");
    write_file(*out / "summary.json", result.to_json().dump(2) + "\n");
  }
  return result;
}

std::vector<ReportInput> load_summaries(const std::vector<std::filesystem::path>& dirs) {
  std::vector<ReportInput> out;
  std::vector<std::string> bad;
  for (const auto& dir : dirs) {
    const auto path = dir / "summary.json";
    if (!std::filesystem::exists(path)) {
      bad.push_back(path.string() + " (missing)");
      continue;
    }
    try {
      out.push_back({dir, ExperimentResult::from_json(nlohmann::json::parse(read_file(path)))});
    } catch (const std::exception& e) {
      bad.push_back(path.string() + " (" + e.what() + ")");
    }
  }
  if (!bad.empty()) {
    std::string msg = "unreadable experiment summaries:";
    for (const auto& b : bad) msg += "\n  " + b;
    throw FormatError(msg);
  }
  if (out.empty()) throw FormatError("no experiment summaries given");
  return out;
}

namespace {

std::string fmt(double v, int digits = 3) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string mean_range(const std::vector<double>& xs) {
  double sum = 0.0;
  for (double x : xs) sum += x;
  const double mean = sum / static_cast<double>(xs.size());
  if (xs.size() == 1) return fmt(mean);
  const auto [lo, hi] = std::minmax_element(xs.begin(), xs.end());
  return fmt(mean) + " [" + fmt(*lo) + ", " + fmt(*hi) + "]";
}

std::string link_path(const std::filesystem::path& p, const std::filesystem::path& base) {
  std::error_code ec;
  const auto rel = std::filesystem::relative(p, base, ec);
  return (ec || rel.empty() ? p : rel).generic_string();
}

}  // namespace

std::string report_markdown(const std::vector<ReportInput>& runs, const std::filesystem::path& report_dir) {
  std::ostringstream md;
  md << "# Confounded-shapes experiment report\n\n";
  std::set<std::string> hashes;
  for (const auto& r : runs) hashes.insert(r.result.dataset_hash);
  if (hashes.size() > 1)
    md << "> **Warning:** the runs were trained on " << hashes.size()
       << " different datasets (dataset hashes differ); the comparison below mixes datasets.\n\n";

  md << "## Runs\n\n"
     << "| run | condition | seed | reliance before | reliance after | confounded train acc | confounded test acc "
        "| test acc | best confounded IoU | marked |\n"
     << "|---|---|---|---|---|---|---|---|---|---|\n";
  for (const auto& in : runs) {
    const auto& r = in.result;
    std::string marked;
    for (size_t i = 0; i < r.marked.size(); ++i) marked += (i ? "," : "") + std::to_string(r.marked[i]);
    md << "| " << link_path(in.dir, report_dir) << " | " << to_string(r.condition) << " | " << r.seed << " | "
       << fmt(r.reliance_before) << " | " << fmt(r.confound_reliance) << " | " << fmt(r.confounded_train_accuracy())
       << " | " << fmt(r.confounded_test_accuracy()) << " | " << fmt(r.test_accuracy) << " | "
       << fmt(r.best_confounded_iou()) << " | " << (marked.empty() ? "-" : marked) << " |\n";
  }

  md << "\n## Per condition (mean [min, max])\n\n"
     << "| condition | runs | reliance after | confounded test acc | test acc | best confounded IoU |\n"
     << "|---|---|---|---|---|---|\n";
  std::map<Condition, std::vector<const ExperimentResult*>> by;
  for (const auto& in : runs) by[in.result.condition].push_back(&in.result);
  for (const auto& [cond, rs] : by) {
    std::vector<double> rel, cta, ta, best;
    for (const auto* r : rs) {
      rel.push_back(r->confound_reliance);
      cta.push_back(r->confounded_test_accuracy());
      ta.push_back(r->test_accuracy);
      best.push_back(r->best_confounded_iou());
    }
    md << "| " << to_string(cond) << " | " << rs.size() << " | " << mean_range(rel) << " | " << mean_range(cta)
       << " | " << mean_range(ta) << " | " << mean_range(best) << " |\n";
  }

  md << "\n## Prototype panels\n\n"
     << "Each panel shows the nearest training patch, the prototype and its attribution overlay.\n";
  for (const auto& in : runs) {
    const auto panels = in.dir / "panels";
    if (!std::filesystem::exists(panels)) continue;
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(panels))
      if (e.path().extension() == ".ppm") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    md << "\n### " << to_string(in.result.condition) << ", seed " << in.result.seed << "\n\n";
    for (const auto& f : files) md << "![" << f.stem().string() << "](" << link_path(f, report_dir) << ") ";
    md << "\n";
  }
  return md.str();
}

}  // namespace gbm
