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

#include "doctest.h"
#include "gbm/codec.hpp"
#include "gbm/error.hpp"
#include "gbm/persist.hpp"
#include "gbm/session.hpp"
#include "support.hpp"

using namespace gbm;

TEST_CASE("the session walks idle, training, awaiting feedback") {
  DebugSession s("s", testing::small_session_config());
  CHECK(s.state() == SessionState::idle);
  CHECK(s.round() == 0);
  CHECK_THROWS_AS(s.assess(), StateError);
  CHECK_THROWS_AS(s.submit_feedback(Feedback::mark_relevant(0, 0)), StateError);

  s.begin_round();
  CHECK(s.state() == SessionState::training);
  CHECK_THROWS_AS(s.begin_round(), StateError);
  CHECK_THROWS_AS(s.save(), Error);
  s.execute_round();
  CHECK(s.round() == 1);
  CHECK((s.state() == SessionState::awaiting_feedback || s.state() == SessionState::stable));
  CHECK(s.history().records.size() == 2);
  CHECK(s.history().records.back().round == 1);

  s.submit_feedback(Feedback::mark_irrelevant(1, FeedbackScope::of_class(0)));
  CHECK(s.state() == SessionState::awaiting_feedback);
  CHECK(s.memory().size() == 1);
  CHECK(s.feedback_log().size() == 1);
  CHECK(s.feedback_log()[0].round == 1);
  s.run_round();
  CHECK(s.round() == 2);
  CHECK(s.history().records.size() == 4);
  CHECK(s.history().records.back().epoch == 4);
  CHECK(s.round_losses().size() == 2);
}

TEST_CASE("assessment packets are ordered by relevance with symmetric kappa") {
  DebugSession s("s", testing::small_session_config(1));
  s.run_round();
  CHECK_THROWS_AS(s.assess(2), ValidationError);
  const auto packets = s.assess();
  REQUIRE(packets.size() == 10);
  for (size_t i = 1; i < packets.size(); ++i) {
    CHECK(packets[i].relevance <= packets[i - 1].relevance);
    if (packets[i].relevance == packets[i - 1].relevance)
      CHECK(packets[i].concept_index > packets[i - 1].concept_index);
  }
  std::vector<const ConceptPacket*> by_index(10);
  for (const auto& p : packets) by_index[static_cast<size_t>(p.concept_index)] = &p;
  for (size_t a = 0; a < 10; ++a) {
    const auto& p = *by_index[a];
    CHECK(p.representatives.size() == 3);
    CHECK(p.overlays.size() == 3);
    CHECK(p.weights.size() == 5);
    double mx = 0.0;
    for (double w : p.weights) mx = std::max(mx, std::abs(w));
    CHECK(p.relevance == mx);
    for (size_t b = 0; b < 10; ++b) CHECK(std::abs(p.kappa[b] - by_index[b]->kappa[a]) <= 1e-12);
  }
  const auto j = packets[0].to_json(s.data().train, true);
  CHECK(j.at("representatives").size() == 3);
  CHECK(j.at("representatives")[0].contains("ppm"));
  CHECK_FALSE(packets[0].to_json(s.data().train, false).at("representatives")[0].contains("ppm"));
}

TEST_CASE("invalid feedback leaves the session unchanged") {
  DebugSession s("s", testing::small_session_config());
  s.run_round();
  const auto hash = s.checkpoint_hash();
  const auto state = s.state();
  auto rejected = [&](const Feedback& f, const std::string& field) {
    try {
      s.submit_feedback(f);
      FAIL("accepted invalid feedback");
    } catch (const ValidationError& e) {
      CHECK(e.field() == field);
    }
    CHECK(s.memory().size() == 0);
    CHECK(s.feedback_log().empty());
    CHECK(s.supervision().empty());
    CHECK(s.checkpoint_hash() == hash);
    CHECK(s.state() == state);
  };
  rejected(Feedback::mark_irrelevant(10, FeedbackScope::global()), "concept");
  rejected(Feedback::mark_irrelevant(0, FeedbackScope::of_class(5)), "scope.class");
  rejected(Feedback::mark_irrelevant(0, FeedbackScope::instance(9999, 0)), "scope.image");
  const int wrong = (s.data().train.scenes[0].class_label + 1) % 5;
  rejected(Feedback::mark_irrelevant(0, FeedbackScope::instance(0, wrong)), "scope.class");
  rejected(Feedback::concept_label(0, 0, 2), "desired");
  rejected(Feedback::concept_label(9999, 0, 1), "image");
  rejected(Feedback::concept_region(0, 0, Mask(8, 8)), "region");
  rejected(Feedback::concept_region(0, 0, Mask(64, 64)), "region");
  rejected(Feedback::mark_relevant(0, -1), "class");
}

TEST_CASE("feedback kinds update memory and supervision") {
  DebugSession s("s", testing::small_session_config());
  s.run_round();
  const size_t img = 3;
  const int y = s.data().train.scenes[img].class_label;
  s.submit_feedback(Feedback::mark_irrelevant(2, FeedbackScope::instance(img, y)));
  CHECK(s.supervision().concept_masks.size() == 1);
  CHECK(s.supervision().concept_masks.at(img)[2] == 0);
  s.submit_feedback(Feedback::concept_label(1, 4, 0));
  Mask region(64, 64);
  region.at(5, 5) = 1;
  s.submit_feedback(Feedback::concept_region(2, 6, region));
  s.submit_feedback(Feedback::mark_relevant(7, 3));
  CHECK(s.memory().size() == 1);
  CHECK(s.supervision().concept_labels.at(1)[0].concept_index == 4);
  CHECK(s.supervision().regions.at(2)[0].region == region);
  CHECK(s.supervision().relevant.at(3).count(7) == 1);
  for (const auto& f : s.feedback_log()) {
    const auto back = Feedback::from_json(f.to_json());
    CHECK(back.to_json() == f.to_json());
  }
  s.submit_feedback(Feedback::mark_irrelevant(0, FeedbackScope::global()));
  size_t masked = 0;
  for (const auto& [i, m] : s.supervision().concept_masks) masked += m[0] == 0;
  CHECK(masked == s.data().train.size());
}

TEST_CASE("feedback JSON errors name the field") {
  auto field_of = [](const nlohmann::json& j) {
    try {
      Feedback::from_json(j);
    } catch (const ValidationError& e) {
      return e.field();
    }
    return std::string("none");
  };
  CHECK(field_of(nlohmann::json::array()) == "body");
  CHECK(field_of({{"kind", "shout"}, {"concept", 1}}) == "kind");
  CHECK(field_of({{"kind", "mark_relevant"}, {"concept", "one"}, {"class", 0}}) == "concept");
  CHECK(field_of({{"kind", "mark_irrelevant"}, {"concept", 1}}) == "scope");
  CHECK(field_of({{"kind", "concept_region"}, {"concept", 1}, {"image", 0}, {"region", "@@"}}) == "region");
  CHECK(field_of({{"kind", "mark_relevant"}, {"concept", 1}, {"class", 2}}) == "none");
}

TEST_CASE("sessions persist and reload") {
  testing::TempDir dir("session");
  DebugSession s("persisted", testing::small_session_config());
  s.attach(dir.path());
  s.run_round();
  s.submit_feedback(Feedback::mark_irrelevant(0, FeedbackScope::of_class(0)));
  s.submit_feedback(Feedback::concept_label(1, 2, 1));
  CHECK(std::filesystem::exists(dir / "session.json"));
  CHECK(std::filesystem::exists(dir / "feedback.jsonl"));
  CHECK(std::filesystem::exists(dir / "metrics.jsonl"));
  CHECK(std::filesystem::exists(dir / "checkpoints/current.json"));
  CHECK(std::filesystem::exists(dir / "checkpoints/round-001-epoch-0002.json"));
  CHECK(std::filesystem::exists(dir / "memory.json"));

  const auto back = DebugSession::load(dir.path());
  CHECK(back.id() == "persisted");
  CHECK(back.round() == 1);
  CHECK(back.state() == SessionState::awaiting_feedback);
  CHECK(back.checkpoint_hash() == s.checkpoint_hash());
  CHECK(back.feedback_log().size() == 2);
  CHECK(back.memory().size() == 1);
  CHECK(back.memory().entries()[0].snapshot.cache.activations == s.memory().entries()[0].snapshot.cache.activations);
  CHECK(back.supervision().concept_labels.size() == 1);
  CHECK(back.history().records.size() == s.history().records.size());

  auto j = nlohmann::json::parse(read_file(dir / "session.json"));
  j["checkpoint_hash"] = std::string(64, 'f');
  write_file(dir / "session.json", j.dump());
  CHECK_THROWS_AS(DebugSession::load(dir.path()), FormatError);
}

TEST_CASE("replay reproduces the recorded checkpoint") {
  testing::TempDir dir("session");
  DebugSession s("r", testing::small_session_config(2));
  s.attach(dir.path());
  s.run_round();
  s.submit_feedback(Feedback::mark_irrelevant(1, FeedbackScope::of_class(0)));
  LossSpec aggr = s.config().loss;
  aggr.lambda_attr = 0.0;
  s.set_loss(aggr);
  s.run_round();
  s.submit_feedback(Feedback::mark_relevant(0, 0));
  const auto replayed = DebugSession::replay(dir.path());
  CHECK(replayed.round() == 2);
  CHECK(replayed.checkpoint_hash() == s.checkpoint_hash());
  CHECK(replayed.feedback_log().size() == 2);
}

TEST_CASE("the scripted oracle marks similar concepts of the confounded class") {
  DebugSession s("o", testing::small_session_config());
  s.run_round();
  const auto all = scripted_oracle(s, 0.0);
  CHECK(all.size() == 2);
  for (const auto& f : all) {
    CHECK(s.model().owner[static_cast<size_t>(f.concept_index)] == 0);
    CHECK(f.author == Author::scripted_oracle);
    CHECK(f.scope == FeedbackScope::of_class(0));
  }
  CHECK(scripted_oracle(s, 1.0).empty());
  CHECK(scripted_oracle(s, 0.0, ScopeKind::global)[0].scope == FeedbackScope::global());
  CHECK_THROWS_AS(scripted_oracle(s, 0.5, ScopeKind::instance), ValidationError);
}

TEST_CASE("session configs round trip through JSON") {
  auto c = testing::small_session_config(3);
  c.reference = ReferenceKind::probe;
  c.representatives = 5;
  const auto back = SessionConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  auto j = c.to_json();
  j["representatives"] = 2;
  CHECK_THROWS_AS(SessionConfig::from_json(j), ValidationError);
}
