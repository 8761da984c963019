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

#include "gbm/session.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "gbm/codec.hpp"
#include "gbm/error.hpp"
#include "gbm/persist.hpp"

namespace gbm {

namespace {

constexpr const char* kSessionFormat = "gbmdebug-session";
constexpr int kSessionVersion = 1;

template <typename T>
T field(const nlohmann::json& j, const char* name) {
  if (!j.contains(name)) throw ValidationError(name, std::string("missing field '") + name + "'");
  try {
    return j.at(name).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ValidationError(name, std::string("field '") + name + "' has the wrong type");
  }
}

std::string checkpoint_name(int round, int epoch) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "checkpoints/round-%03d-epoch-%04d.json", round, epoch);
  return buf;
}

std::string to_string(ReferenceKind k) { return k == ReferenceKind::train ? "train" : "probe"; }

ReferenceKind parse_reference(const std::string& s) {
  if (s == "train") return ReferenceKind::train;
  if (s == "probe") return ReferenceKind::probe;
  throw ValidationError("reference", "unknown reference kind '" + s + "'");
}

std::string to_string(Author a) { return a == Author::human ? "human" : "scripted_oracle"; }

Author parse_author(const std::string& s) {
  if (s == "human") return Author::human;
  if (s == "scripted_oracle") return Author::scripted_oracle;
  throw ValidationError("author", "unknown author '" + s + "'");
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::vector<std::string> out;
  if (!std::filesystem::exists(path)) return out;
  std::istringstream in(read_file(path));
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) out.push_back(line);
  return out;
}

nlohmann::json parse_line(const std::string& line, const std::filesystem::path& path) {
  try {
    return nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("corrupt " + path.string() + ": " + e.what());
  }
}

}  // namespace

std::string to_string(SessionState s) {
  switch (s) {
    case SessionState::idle: return "idle";
    case SessionState::training: return "training";
    case SessionState::awaiting_feedback: return "awaiting_feedback";
    case SessionState::stable: return "stable";
  }
  return "?";
}

SessionState parse_state(const std::string& s) {
  if (s == "idle") return SessionState::idle;
  if (s == "training") return SessionState::training;
  if (s == "awaiting_feedback") return SessionState::awaiting_feedback;
  if (s == "stable") return SessionState::stable;
  throw FormatError("unknown session state '" + s + "'");
}

std::string to_string(FeedbackKind k) {
  switch (k) {
    case FeedbackKind::mark_irrelevant: return "mark_irrelevant";
    case FeedbackKind::concept_label: return "concept_label";
    case FeedbackKind::concept_region: return "concept_region";
    case FeedbackKind::mark_relevant: return "mark_relevant";
  }
  return "?";
}

FeedbackKind parse_feedback_kind(const std::string& s) {
  if (s == "mark_irrelevant") return FeedbackKind::mark_irrelevant;
  if (s == "concept_label") return FeedbackKind::concept_label;
  if (s == "concept_region") return FeedbackKind::concept_region;
  if (s == "mark_relevant") return FeedbackKind::mark_relevant;
  throw ValidationError("kind", "unknown feedback kind '" + s + "'");
}

// ---------------------------------------------------------------- Feedback

Feedback Feedback::mark_irrelevant(int j, FeedbackScope scope, Author author) {
  Feedback f;
  f.kind = FeedbackKind::mark_irrelevant;
  f.author = author;
  f.concept_index = j;
  f.scope = scope;
  return f;
}

Feedback Feedback::concept_label(size_t image, int j, int desired) {
  Feedback f;
  f.kind = FeedbackKind::concept_label;
  f.image = image;
  f.concept_index = j;
  f.desired = desired;
  return f;
}

Feedback Feedback::concept_region(size_t image, int j, Mask region) {
  Feedback f;
  f.kind = FeedbackKind::concept_region;
  f.image = image;
  f.concept_index = j;
  f.region = std::move(region);
  return f;
}

Feedback Feedback::mark_relevant(int j, int label) {
  Feedback f;
  f.kind = FeedbackKind::mark_relevant;
  f.concept_index = j;
  f.label = label;
  return f;
}

nlohmann::json Feedback::to_json() const {
  nlohmann::json j = {{"kind", to_string(kind)},
                      {"author", to_string(author)},
                      {"round", round},
                      {"concept", concept_index}};
  switch (kind) {
    case FeedbackKind::mark_irrelevant: j["scope"] = scope.to_json(); break;
    case FeedbackKind::concept_label:
      j["image"] = image;
      j["desired"] = desired;
      break;
    case FeedbackKind::concept_region:
      j["image"] = image;
      j["region"] = base64_encode(encode_pbm(region));
      break;
    case FeedbackKind::mark_relevant: j["class"] = label; break;
  }
  return j;
}

Feedback Feedback::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("body", "feedback must be a JSON object");
  Feedback f;
  f.kind = parse_feedback_kind(field<std::string>(j, "kind"));
  if (j.contains("author")) f.author = parse_author(field<std::string>(j, "author"));
  if (j.contains("round")) f.round = field<int>(j, "round");
  f.concept_index = field<int>(j, "concept");
  switch (f.kind) {
    case FeedbackKind::mark_irrelevant:
      if (!j.contains("scope")) throw ValidationError("scope", "missing field 'scope'");
      try {
        f.scope = FeedbackScope::from_json(j.at("scope"));
      } catch (const nlohmann::json::exception&) {
        throw ValidationError("scope", "malformed scope");
      } catch (const FormatError& e) {
        throw ValidationError("scope", e.what());
      }
      break;
    case FeedbackKind::concept_label:
      f.image = field<size_t>(j, "image");
      f.desired = field<int>(j, "desired");
      break;
    case FeedbackKind::concept_region:
      f.image = field<size_t>(j, "image");
      try {
        f.region = decode_pbm(base64_decode(field<std::string>(j, "region")));
      } catch (const ValidationError&) {
        throw;
      } catch (const Error& e) {
        throw ValidationError("region", std::string("region is not a base64 PBM: ") + e.what());
      }
      break;
    case FeedbackKind::mark_relevant: f.label = field<int>(j, "class"); break;
  }
  return f;
}

// ----------------------------------------------------------- SessionConfig

nlohmann::json SessionConfig::to_json() const {
  return {{"data", data.to_json()},         {"data_dir", data_dir},
          {"model", model.to_json()},       {"schedule", schedule.to_json()},
          {"loss", loss.to_json()},         {"reference", to_string(reference)},
          {"representatives", representatives}};
}

SessionConfig SessionConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("config", "config must be a JSON object");
  SessionConfig c;
  try {
    if (j.contains("data")) c.data = DataConfig::from_json(j.at("data"));
    c.data_dir = j.value("data_dir", c.data_dir);
    if (j.contains("model")) c.model = ModelConfig::from_json(j.at("model"));
    if (j.contains("schedule")) c.schedule = Schedule::from_json(j.at("schedule"));
    if (j.contains("loss")) c.loss = LossSpec::from_json(j.at("loss"));
    if (j.contains("reference")) c.reference = parse_reference(j.at("reference").get<std::string>());
    c.representatives = j.value("representatives", c.representatives);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("config", std::string("malformed config: ") + e.what());
  } catch (const FormatError& e) {
    throw ValidationError("config", e.what());
  }
  if (c.representatives < 3) throw ValidationError("representatives", "representatives must be at least 3");
  c.schedule.validate();
  c.loss.validate();
  return c;
}

// ------------------------------------------------------------ ConceptPacket

nlohmann::json ConceptPacket::to_json(const SplitData& train, bool with_images) const {
  nlohmann::json reps = nlohmann::json::array();
  for (size_t r = 0; r < representatives.size(); ++r) {
    const auto& rep = representatives[r];
    nlohmann::json jr = {{"image", rep.image},
                         {"row", rep.location.row},
                         {"col", rep.location.col},
                         {"activation", rep.activation},
                         {"label", train.scenes[rep.image].class_label}};
    if (with_images) {
      const Raster& img = train.image(rep.image);
      jr["ppm"] = base64_encode(encode_ppm(img));
      const Plane plane = to_plane(overlays[r], img.height, img.width);
      const double scale = std::max(1e-300, *std::max_element(plane.values.begin(), plane.values.end()));
      jr["overlay_pgm"] = base64_encode(encode_pgm16(plane, scale));
      jr["overlay_scale"] = scale;
    }
    reps.push_back(std::move(jr));
  }
  return {{"concept", concept_index}, {"owner", owner},   {"relevance", relevance},
          {"weights", weights},       {"kappa", kappa},   {"representatives", reps}};
}

// ------------------------------------------------------------- DebugSession

DebugSession::DebugSession(std::string id, SessionConfig config, std::shared_ptr<const Dataset> data)
    : id_(std::move(id)), config_(std::move(config)), data_(std::move(data)) {
  config_.schedule.validate();
  config_.loss.validate();
  if (!data_) {
    data_ = config_.data_dir.empty() ? std::make_shared<const Dataset>(generate(config_.data))
                                     : std::make_shared<const Dataset>(load_dataset(config_.data_dir));
  }
  config_.data = data_->config;
  config_.model.num_classes = data_->config.num_classes;
  model_ = make_model(config_.model);
  initialize_prototypes(model_, data_->train, config_.schedule.seed, config_.model.init);
  reference_ = config_.reference == ReferenceKind::train
                   ? ReferenceSet::from(data_->train)
                   : ReferenceSet::from(confounder_probe(*data_, Split::train));
  probe_ = RelianceProbe::from(*data_, model_);
  memory_ = Memory(reference_.id);
}

void DebugSession::set_loss(const LossSpec& spec) {
  if (state_ == SessionState::training) throw StateError("cannot change the loss while training");
  spec.validate();
  config_.loss = spec;
}

std::vector<ConceptPacket> DebugSession::assess(size_t n) const {
  if (round_ == 0) throw StateError("no trained model to assess; run a round first");
  if (n == 0) n = static_cast<size_t>(config_.representatives);
  if (n < 3) throw ValidationError("n", "at least 3 representatives per concept");
  const auto profiles = concept_profiles(model_, reference_, false);
  const int k = model_.num_concepts();
  std::vector<ConceptPacket> packets;
  packets.reserve(static_cast<size_t>(k));
  for (int j = 0; j < k; ++j) {
    ConceptPacket p;
    p.concept_index = j;
    p.owner = model_.owner[static_cast<size_t>(j)];
    const auto col = model_.weights.col(j);
    p.weights.assign(col.data(), col.data() + col.size());
    p.relevance = col.cwiseAbs().maxCoeff();
    p.representatives = representatives(model_, j, data_->train, n);
    const auto view = ConceptView::of(model_, j);
    for (const auto& rep : p.representatives)
      p.overlays.push_back(field_attribution_at(view, data_->train.image(rep.image), rep.location));
    for (int i = 0; i < k; ++i)
      p.kappa.push_back(kappa_act(profiles[static_cast<size_t>(j)], profiles[static_cast<size_t>(i)]));
    packets.push_back(std::move(p));
  }
  std::stable_sort(packets.begin(), packets.end(),
                   [](const ConceptPacket& a, const ConceptPacket& b) { return a.relevance > b.relevance; });
  return packets;
}

void DebugSession::validate(const Feedback& f) const {
  const int k = model_.num_concepts();
  const int v = model_.num_classes;
  const size_t n = data_->train.size();
  if (f.concept_index < 0 || f.concept_index >= k)
    throw ValidationError("concept", "concept index " + std::to_string(f.concept_index) + " out of range [0, " +
                                         std::to_string(k) + ")");
  switch (f.kind) {
    case FeedbackKind::mark_irrelevant:
      if (f.scope.kind != ScopeKind::global && (f.scope.label < 0 || f.scope.label >= v))
        throw ValidationError("scope.class", "class " + std::to_string(f.scope.label) + " out of range");
      if (f.scope.kind == ScopeKind::instance) {
        if (f.scope.image >= n)
          throw ValidationError("scope.image", "image " + std::to_string(f.scope.image) + " out of range");
        if (data_->train.scenes[f.scope.image].class_label != f.scope.label)
          throw ValidationError("scope.class", "class does not match the label of the image");
      }
      break;
    case FeedbackKind::concept_label:
      if (f.image >= n) throw ValidationError("image", "image " + std::to_string(f.image) + " out of range");
      if (f.desired != 0 && f.desired != 1) throw ValidationError("desired", "desired must be 0 or 1");
      break;
    case FeedbackKind::concept_region: {
      if (f.image >= n) throw ValidationError("image", "image " + std::to_string(f.image) + " out of range");
      const Raster& img = data_->train.image(f.image);
      if (f.region.height != img.height || f.region.width != img.width)
        throw ValidationError("region", "region must be " + std::to_string(img.height) + "x" +
                                            std::to_string(img.width));
      if (f.region.count() == 0) throw ValidationError("region", "region is empty");
      break;
    }
    case FeedbackKind::mark_relevant:
      if (f.label < 0 || f.label >= v) throw ValidationError("class", "class " + std::to_string(f.label) + " out of range");
      break;
  }
}

void DebugSession::apply_supervision(const Feedback& f) {
  const int k = model_.num_concepts();
  const auto j = f.concept_index;
  switch (f.kind) {
    case FeedbackKind::mark_irrelevant:
      for (size_t i = 0; i < data_->train.size(); ++i) {
        if (!f.scope.covers(i, data_->train.scenes[i].class_label)) continue;
        auto& mask = supervision_.concept_masks[i];
        if (mask.empty()) mask.assign(static_cast<size_t>(k), 1);
        mask[static_cast<size_t>(j)] = 0;
      }
      break;
    case FeedbackKind::concept_label: supervision_.concept_labels[f.image].push_back({j, f.desired}); break;
    case FeedbackKind::concept_region: supervision_.regions[f.image].push_back({j, f.region}); break;
    case FeedbackKind::mark_relevant: supervision_.relevant[f.label].insert(j); break;
  }
}

void DebugSession::apply(const Feedback& f) {
  if (f.kind == FeedbackKind::mark_irrelevant) memory_.insert(model_, f.concept_index, f.scope, reference_, f.round);
  apply_supervision(f);
}

void DebugSession::submit_feedback(Feedback feedback) {
  if (state_ != SessionState::awaiting_feedback && state_ != SessionState::stable)
    throw StateError("feedback is accepted only after a round, session is " + to_string(state_));
  validate(feedback);
  feedback.round = round_;
  apply(feedback);
  feedback_.push_back(feedback);
  state_ = SessionState::awaiting_feedback;
  if (dir_) {
    append_line("feedback.jsonl", feedback.to_json());
    save();
  }
}

void DebugSession::begin_round() {
  if (state_ == SessionState::training) throw StateError("a round is already running");
  resume_state_ = state_;
  state_ = SessionState::training;
}

void DebugSession::execute_round() {
  if (state_ != SessionState::training) throw StateError("execute_round requires begin_round");
  const PrototypeModel start = model_;
  const size_t history_size = history_.records.size();
  const int round = round_ + 1;
  const LossSpec loss = round_ == 0 ? LossSpec::cross_entropy_only() : config_.loss;
  const std::vector<Phase> phases =
      round_ == 0 ? std::vector<Phase>(static_cast<size_t>(config_.schedule.initial_epochs), Phase::joint)
                  : config_.schedule.refine_phases();

  TrainContext ctx;
  ctx.data = data_.get();
  ctx.probe = &probe_;
  ctx.round = round;
  ctx.first_epoch = history_.last_epoch() + 1;
  ctx.observer = [&](const EpochRecord& rec, const PrototypeModel& m) {
    history_.records.push_back(rec);
    const size_t i = static_cast<size_t>(rec.epoch - ctx.first_epoch);
    const bool phase_end = i + 1 >= phases.size() || phases[i + 1] != phases[i];
    persist_epoch(rec, m, phase_end);
    if (listener_) listener_(rec, m);
  };
  try {
    if (round_ == 0)
      train_initial(model_, config_.schedule, ctx);
    else
      train_refine(model_, config_.schedule, ctx, loss, memory_, reference_, supervision_);
  } catch (...) {
    model_ = start;
    history_.records.resize(history_size);
    state_ = resume_state_;
    if (dir_) {
      std::string lines;
      for (const auto& r : history_.records) lines += r.to_json().dump() + "\n";
      write_file(*dir_ / "metrics.jsonl", lines);
    }
    throw;
  }
  round_losses_.push_back(loss);
  round_ = round;
  state_ = is_stable(history_, config_.schedule.stability_window, config_.schedule.stability_delta)
               ? SessionState::stable
               : SessionState::awaiting_feedback;
  if (dir_) save();
}

void DebugSession::run_round() {
  begin_round();
  execute_round();
}

std::string DebugSession::checkpoint_hash() const { return gbm::checkpoint_hash(model_); }

void DebugSession::append_line(const char* name, const nlohmann::json& j) const {
  std::filesystem::create_directories(*dir_);
  std::ofstream out(*dir_ / name, std::ios::binary | std::ios::app);
  if (!out) throw FormatError("cannot append to " + (*dir_ / name).string());
  out << j.dump() << "\n";
}

void DebugSession::persist_epoch(const EpochRecord& rec, const PrototypeModel& model, bool phase_end) {
  if (!dir_) return;
  append_line("metrics.jsonl", rec.to_json());
  if (phase_end) save_checkpoint(model, *dir_ / checkpoint_name(rec.round, rec.epoch));
}

void DebugSession::attach(const std::filesystem::path& dir) {
  dir_ = dir;
  std::filesystem::create_directories(dir);
  std::string feedback, metrics;
  for (const auto& f : feedback_) feedback += f.to_json().dump() + "\n";
  for (const auto& r : history_.records) metrics += r.to_json().dump() + "\n";
  write_file(dir / "feedback.jsonl", feedback);
  write_file(dir / "metrics.jsonl", metrics);
  save();
}

void DebugSession::save() const {
  if (!dir_) throw StateError("session has no directory attached");
  if (state_ == SessionState::training) throw StateError("cannot save while training");
  const auto& dir = *dir_;
  save_checkpoint(model_, dir / "checkpoints" / "current.json");
  save_memory(memory_, dir);
  nlohmann::json rounds = nlohmann::json::array();
  for (const auto& l : round_losses_) rounds.push_back(l.to_json());
  const nlohmann::json doc = {{"format", kSessionFormat},
                              {"version", kSessionVersion},
                              {"id", id_},
                              {"config", config_.to_json()},
                              {"state", to_string(state_)},
                              {"round", round_},
                              {"rounds", rounds},
                              {"checkpoint", "checkpoints/current.json"},
                              {"checkpoint_hash", checkpoint_hash()},
                              {"dataset_hash", data_->manifest_hash()}};
  write_file(dir / "session.json", doc.dump(1) + "\n");
}

namespace {

struct SessionFile {
  std::string id;
  SessionConfig config;
  SessionState state = SessionState::idle;
  int round = 0;
  std::vector<LossSpec> rounds;
  std::string checkpoint;
  std::string checkpoint_hash;
  std::string dataset_hash;
};

SessionFile read_session_file(const std::filesystem::path& dir) {
  const auto path = dir / "session.json";
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("corrupt session " + path.string() + ": " + e.what());
  }
  if (!doc.is_object() || doc.value("format", std::string()) != kSessionFormat)
    throw FormatError("not a session file: " + path.string());
  const int v = doc.value("version", -1);
  if (v != kSessionVersion)
    throw FormatError("unsupported session version " + std::to_string(v) + " (supported: " +
                      std::to_string(kSessionVersion) + ")");
  try {
    SessionFile s;
    s.id = doc.at("id").get<std::string>();
    s.config = SessionConfig::from_json(doc.at("config"));
    s.state = parse_state(doc.at("state").get<std::string>());
    s.round = doc.at("round").get<int>();
    for (const auto& l : doc.at("rounds")) s.rounds.push_back(LossSpec::from_json(l));
    s.checkpoint = doc.at("checkpoint").get<std::string>();
    s.checkpoint_hash = doc.at("checkpoint_hash").get<std::string>();
    s.dataset_hash = doc.at("dataset_hash").get<std::string>();
    if (static_cast<int>(s.rounds.size()) != s.round) throw FormatError("corrupt session: round log length");
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("corrupt session: " + std::string(e.what()));
  } catch (const ValidationError& e) {
    throw FormatError("corrupt session config: " + std::string(e.what()));
  }
}

std::vector<Feedback> read_feedback(const std::filesystem::path& dir) {
  std::vector<Feedback> out;
  const auto path = dir / "feedback.jsonl";
  for (const auto& line : read_lines(path)) {
    try {
      out.push_back(Feedback::from_json(parse_line(line, path)));
    } catch (const ValidationError& e) {
      throw FormatError("corrupt " + path.string() + ": " + e.what());
    }
  }
  return out;
}

}  // namespace

DebugSession DebugSession::load(const std::filesystem::path& dir) {
  const SessionFile file = read_session_file(dir);
  DebugSession s(file.id, file.config);
  if (s.data_->manifest_hash() != file.dataset_hash)
    throw FormatError("session dataset does not match the recorded dataset hash");
  s.model_ = load_checkpoint(dir / file.checkpoint);
  if (gbm::checkpoint_hash(s.model_) != file.checkpoint_hash)
    throw FormatError("corrupt session: checkpoint does not match the recorded hash");
  s.memory_ = load_memory(dir, s.reference_);
  s.feedback_ = read_feedback(dir);
  for (const auto& f : s.feedback_) {
    s.validate(f);
    s.apply_supervision(f);
  }
  const auto mpath = dir / "metrics.jsonl";
  for (const auto& line : read_lines(mpath)) s.history_.records.push_back(EpochRecord::from_json(parse_line(line, mpath)));
  s.round_losses_ = file.rounds;
  s.round_ = file.round;
  s.state_ = file.state == SessionState::training ? SessionState::awaiting_feedback : file.state;
  if (s.round_ == 0) s.state_ = SessionState::idle;
  s.dir_ = dir;
  return s;
}

DebugSession DebugSession::replay(const std::filesystem::path& dir) {
  const SessionFile file = read_session_file(dir);
  const auto feedback = read_feedback(dir);
  DebugSession s(file.id, file.config);
  for (int r = 0; r < file.round; ++r) {
    for (const auto& f : feedback)
      if (f.round == r) s.submit_feedback(f);
    if (r > 0) s.config_.loss = file.rounds[static_cast<size_t>(r)];
    s.run_round();
  }
  for (const auto& f : feedback)
    if (f.round >= file.round) s.submit_feedback(f);
  s.config_.loss = file.config.loss;
  return s;
}

std::vector<Feedback> scripted_oracle(const DebugSession& session, double theta, ScopeKind scope) {
  if (scope == ScopeKind::instance) throw ValidationError("scope", "the scripted oracle gives class or global feedback");
  const auto& model = session.model();
  const int y = session.probe().confounded_class;
  const auto sim = session.probe().similarity(model);
  std::vector<Feedback> out;
  for (int j = 0; j < model.num_concepts(); ++j) {
    if (model.owner[static_cast<size_t>(j)] != y || sim[static_cast<size_t>(j)] <= theta) continue;
    const FeedbackScope s = scope == ScopeKind::global ? FeedbackScope::global() : FeedbackScope::of_class(y);
    out.push_back(Feedback::mark_irrelevant(j, s, Author::scripted_oracle));
  }
  return out;
}

}  // namespace gbm
