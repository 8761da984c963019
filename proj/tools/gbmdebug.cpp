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

// gbmdebug: data generation, scripted experiments, reports, prototype panels
// and the HTTP service.

#include <csignal>
#include <cstdio>
#include <iostream>
#include <memory>

#include "CLI11.hpp"
#include "gbm/error.hpp"
#include "gbm/experiment.hpp"
#include "gbm/persist.hpp"
#include "gbm/service.hpp"
#include "gbm/session.hpp"
#include "gbm/shapes.hpp"
#include "json.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kFailure = 1;
constexpr int kUsage = 2;

nlohmann::json read_json(const std::string& path) {
  try {
    return nlohmann::json::parse(gbm::read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw gbm::ValidationError("config", path + ": " + e.what());
  } catch (const gbm::FormatError& e) {
    throw gbm::ValidationError("config", e.what());
  }
}

struct GenData {
  std::string config, out;
  std::uint64_t seed = 0;
  int classes = 5, per_class = 100, test_per_class = 50, validation_per_class = 0, confounded_class = 0;
};

int gen_data(const GenData& o, const CLI::App& cmd) {
  gbm::DataConfig c = o.config.empty() ? gbm::DataConfig{} : gbm::DataConfig::from_json(read_json(o.config));
  auto given = [&](const char* flag) { return cmd.count(flag) > 0 || o.config.empty(); };
  if (given("--seed")) c.seed = o.seed;
  if (given("--classes")) c.num_classes = o.classes;
  if (given("--per-class")) c.n_train = o.per_class;
  if (given("--test-per-class")) c.n_test = o.test_per_class;
  if (given("--validation-per-class")) c.n_validation = o.validation_per_class;
  if (given("--confounded-class")) c.confounded_class = o.confounded_class;
  const auto ds = gbm::generate(c);
  gbm::save_dataset(ds, o.out);
  std::cout << "dataset " << ds.manifest_hash() << "\n";
  for (size_t i = 0; i < ds.formulas.size(); ++i) std::cout << "  class " << i << ": " << ds.formulas[i].to_string() << "\n";
  std::cout << "  train " << ds.train.size() << ", validation " << ds.validation.size() << ", test " << ds.test.size()
            << " images -> " << o.out << "\n";
  return kOk;
}

struct Experiment {
  std::string config, data, out, condition = "aggr", kernel, scope;
  std::uint64_t seed = 0;
  double lambda = 1.0;
  bool quiet = false;
};

int experiment(const Experiment& o, const CLI::App& cmd) {
  gbm::ExperimentConfig c =
      o.config.empty() ? gbm::ExperimentConfig{} : gbm::ExperimentConfig::from_json(read_json(o.config));
  if (cmd.count("--condition") || o.config.empty()) c.condition = gbm::parse_condition(o.condition);
  if (cmd.count("--seed") || o.config.empty()) c.session.schedule.seed = o.seed;
  if (cmd.count("--lambda")) c.lambda = o.lambda;
  if (cmd.count("--kernel")) {
    try {
      c.session.loss.kernel.kind = gbm::parse_kernel(o.kernel);
    } catch (const gbm::Error& e) {
      throw gbm::ValidationError("kernel", e.what());
    }
  }
  if (cmd.count("--oracle-scope")) c.oracle_scope = o.scope == "global" ? gbm::ScopeKind::global : gbm::ScopeKind::klass;
  std::shared_ptr<const gbm::Dataset> data;
  if (!o.data.empty()) {
    if (!std::filesystem::exists(std::filesystem::path(o.data) / "manifest.json"))
      throw gbm::ValidationError("data", "no dataset at " + o.data);
    c.session.data_dir = std::filesystem::absolute(o.data).string();
    data = std::make_shared<const gbm::Dataset>(gbm::load_dataset(o.data));
  }
  gbm::EpochObserver progress;
  if (!o.quiet)
    progress = [](const gbm::EpochRecord& r, const gbm::PrototypeModel&) {
      std::printf("round %d epoch %3d %-8s loss %.4f train %.3f test %.3f reliance %.3f\n", r.round, r.epoch,
                  gbm::to_string(r.phase).c_str(), r.train_loss, r.train_accuracy, r.test_accuracy,
                  r.confound_reliance);
      std::fflush(stdout);
    };
  const auto r = gbm::run_experiment(c, data, std::filesystem::path(o.out), progress);
  std::printf("condition %s seed %llu: reliance %.3f -> %.3f, confounded class train %.3f test %.3f, best IoU %.3f (%.1fs)\n",
              gbm::to_string(r.condition).c_str(), static_cast<unsigned long long>(r.seed), r.reliance_before,
              r.confound_reliance, r.confounded_train_accuracy(), r.confounded_test_accuracy(),
              r.best_confounded_iou(), r.seconds);
  return kOk;
}

struct Report {
  std::vector<std::string> runs;
  std::string out = "report.md";
};

int report(const Report& o) {
  std::vector<std::filesystem::path> dirs(o.runs.begin(), o.runs.end());
  const auto summaries = gbm::load_summaries(dirs);
  const auto out = std::filesystem::absolute(o.out);
  gbm::write_file(out, gbm::report_markdown(summaries, out.parent_path()));
  std::cout << "report of " << summaries.size() << " runs -> " << o.out << "\n";
  return kOk;
}

struct Render {
  std::string checkpoint, data, out;
  int zoom = 4;
};

int render(const Render& o) {
  if (!std::filesystem::exists(std::filesystem::path(o.data) / "manifest.json"))
    throw gbm::ValidationError("data", "no dataset at " + o.data);
  const auto model = gbm::load_checkpoint(o.checkpoint);
  const auto ds = gbm::load_dataset(o.data);
  std::filesystem::create_directories(o.out);
  for (int j = 0; j < model.num_concepts(); ++j) {
    char name[32];
    std::snprintf(name, sizeof name, "concept-%02d.ppm", j);
    gbm::write_file(std::filesystem::path(o.out) / name, gbm::encode_ppm(gbm::prototype_panel(model, j, ds.train, o.zoom)));
  }
  std::cout << model.num_concepts() << " panels -> " << o.out << "\n";
  return kOk;
}

struct Serve {
  std::string host = "127.0.0.1", data_root = ".", session_root;
  int port = 8080;
};

gbm::Service* g_service = nullptr;

int serve(const Serve& o) {
  gbm::ServiceConfig c;
  c.host = o.host;
  c.port = o.port;
  c.data_root = o.data_root;
  c.session_root = o.session_root;
  gbm::Service service(c);
  g_service = &service;
  std::signal(SIGINT, [](int) {
    if (g_service) g_service->stop();
  });
  std::signal(SIGTERM, [](int) {
    if (g_service) g_service->stop();
  });
  std::cout << "serving on http://" << o.host << ":" << o.port << "\n" << std::flush;
  service.run();
  g_service = nullptr;
  return kOk;
}

struct Replay {
  std::string session;
};

int replay(const Replay& o) {
  const auto recorded = gbm::DebugSession::load(o.session);
  const auto replayed = gbm::DebugSession::replay(o.session);
  std::cout << "recorded " << recorded.checkpoint_hash() << "\nreplayed " << replayed.checkpoint_hash() << "\n";
  if (recorded.checkpoint_hash() != replayed.checkpoint_hash()) {
    std::cerr << "replay diverged from the recorded checkpoint\n";
    return kFailure;
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Debugging prototype-based gray-box models"};
  app.require_subcommand(1);

  GenData g;
  auto* gen = app.add_subcommand("gen-data", "Generate the confounded-shapes dataset");
  gen->add_option("--out", g.out, "Output directory")->required();
  gen->add_option("--seed", g.seed, "Dataset seed")->capture_default_str();
  gen->add_option("--classes", g.classes, "Number of classes")->capture_default_str();
  gen->add_option("--per-class", g.per_class, "Training images per class")->capture_default_str();
  gen->add_option("--test-per-class", g.test_per_class, "Test images per class")->capture_default_str();
  gen->add_option("--validation-per-class", g.validation_per_class, "Validation images per class")->capture_default_str();
  gen->add_option("--confounded-class", g.confounded_class, "Class that carries the confounder")->capture_default_str();
  gen->add_option("--config", g.config, "DataConfig JSON; flags given explicitly override it");

  Experiment e;
  auto* exp = app.add_subcommand("experiment", "Run the scripted three-step debugging experiment");
  exp->add_option("--out", e.out, "Run directory")->required();
  exp->add_option("--data", e.data, "Dataset directory (generated from the config when omitted)");
  exp->add_option("--seed", e.seed, "Training seed")->capture_default_str();
  exp->add_option("--condition", e.condition, "Corrective loss")
      ->check(CLI::IsMember({"none", "attr", "aggr"}))
      ->capture_default_str();
  exp->add_option("--kernel", e.kernel, "Kernel of the aggregation loss")
      ->check(CLI::IsMember({"act", "attr", "param", "param_raw"}));
  exp->add_option("--lambda", e.lambda, "Weight of the corrective term");
  exp->add_option("--oracle-scope", e.scope, "Scope of the scripted feedback")->check(CLI::IsMember({"class", "global"}));
  exp->add_option("--config", e.config, "Experiment config JSON; flags given explicitly override it");
  exp->add_flag("--quiet", e.quiet, "Only print the summary line");

  Report r;
  auto* rep = app.add_subcommand("report", "Compare experiment runs in a Markdown report");
  rep->add_option("--runs", r.runs, "Run directories")->required();
  rep->add_option("--out", r.out, "Report path")->capture_default_str();

  Render p;
  auto* ren = app.add_subcommand("render-prototypes", "Write one PPM panel per concept");
  ren->add_option("--checkpoint", p.checkpoint, "Checkpoint JSON")->required();
  ren->add_option("--data", p.data, "Dataset directory")->required();
  ren->add_option("--out", p.out, "Output directory")->required();
  ren->add_option("--zoom", p.zoom, "Upscaling factor")->check(CLI::Range(1, 32))->capture_default_str();

  Serve s;
  auto* srv = app.add_subcommand("serve", "Run the HTTP service");
  srv->add_option("--host", s.host)->capture_default_str();
  srv->add_option("--port", s.port)->check(CLI::Range(0, 65535))->capture_default_str();
  srv->add_option("--data-root", s.data_root, "Directory of named datasets")->capture_default_str();
  srv->add_option("--session-root", s.session_root, "Persist sessions here");

  Replay y;
  auto* rpl = app.add_subcommand("replay", "Re-run a persisted session and compare checkpoint hashes");
  rpl->add_option("--session", y.session, "Session directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::CallForAllHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    app.exit(ex);
    return kUsage;
  }

  try {
    if (*gen) return gen_data(g, *gen);
    if (*exp) return experiment(e, *exp);
    if (*rep) return report(r);
    if (*ren) return render(p);
    if (*srv) return serve(s);
    if (*rpl) return replay(y);
  } catch (const gbm::ValidationError& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return kUsage;
  } catch (const gbm::GenerationError& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return kUsage;
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return kFailure;
  }
  return kUsage;
}
