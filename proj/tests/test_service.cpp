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
#include "gbm/service.hpp"
#include "gbm/session.hpp"
#include "httplib.h"
#include "json.hpp"
#include "support.hpp"

using namespace gbm;
using nlohmann::json;

namespace {

struct Reply {
  int status = 0;
  json body;
};

class Api {
public:
  explicit Api(int port) : client_("127.0.0.1", port) { client_.set_read_timeout(120, 0); }
  Reply get(const std::string& path) { return wrap(client_.Get(path)); }
  Reply post(const std::string& path, const json& body) {
    return wrap(client_.Post(path, body.dump(), "application/json"));
  }
  Reply post_raw(const std::string& path, const std::string& body) {
    return wrap(client_.Post(path, body, "application/json"));
  }

private:
  static Reply wrap(const httplib::Result& r) {
    REQUIRE(r);
    return {r->status, json::parse(r->body)};
  }
  httplib::Client client_;
};

json small_config(int initial_epochs = 2, int per_class = 4) {
  auto c = testing::small_session_config();
  c.schedule.initial_epochs = initial_epochs;
  c.data.n_train = per_class;
  return c.to_json();
}

void check_error(const Reply& r, int status, const std::string& code) {
  CHECK(r.status == status);
  CHECK(r.body.at("ok") == false);
  CHECK(r.body.at("error").at("code") == code);
  CHECK(r.body.at("error").at("message").is_string());
}

}  // namespace

TEST_CASE("the debugging loop over HTTP") {
  testing::TempDir root("service");
  ServiceConfig cfg;
  cfg.port = 0;
  cfg.session_root = root.path();
  Service service(cfg);
  const int port = service.start();
  Api api(port);

  auto created = api.post("/sessions", {{"config", small_config()}, {"id", "alpha"}});
  REQUIRE(created.status == 201);
  CHECK(created.body.at("ok") == true);
  CHECK(created.body.at("data").at("id") == "alpha");
  CHECK(created.body.at("data").at("state") == "idle");
  check_error(api.post("/sessions", {{"config", small_config()}, {"id", "alpha"}}), 409, "conflict");

  check_error(api.get("/sessions/alpha/concepts"), 409, "conflict");
  check_error(api.post("/sessions/alpha/feedback", {{"kind", "mark_relevant"}, {"concept", 0}, {"class", 0}}), 409,
              "conflict");

  auto started = api.post("/sessions/alpha/rounds", json::object());
  CHECK(started.status == 202);
  CHECK(started.body.at("data").at("round") == 1);
  service.wait_idle();

  auto status = api.get("/sessions/alpha");
  CHECK(status.status == 200);
  CHECK(status.body.at("data").at("round") == 1);
  CHECK(status.body.at("data").at("state") == "awaiting_feedback");

  auto metrics = api.get("/sessions/alpha/metrics");
  CHECK(metrics.body.at("data").at("records").size() == 2);
  auto later = api.get("/sessions/alpha/metrics?since=1");
  REQUIRE(later.body.at("data").at("records").size() == 1);
  CHECK(later.body.at("data").at("records")[0].at("epoch") == 2);

  auto concepts = api.get("/sessions/alpha/concepts?n=3");
  REQUIRE(concepts.status == 200);
  const auto& cards = concepts.body.at("data").at("concepts");
  REQUIRE(cards.size() == 10);
  CHECK(cards[0].at("representatives").size() == 3);
  CHECK(decode_ppm(base64_decode(cards[0].at("representatives")[0].at("ppm").get<std::string>())).height == 64);
  check_error(api.get("/sessions/alpha/concepts?n=2"), 422, "invalid");
  check_error(api.get("/sessions/alpha/concepts?n=99"), 422, "invalid");

  auto expl = api.get("/sessions/alpha/explanations?image=0&class=1");
  REQUIRE(expl.status == 200);
  double sum = 0.0;
  for (const auto& c : expl.body.at("data").at("contributions")) sum += c.at("contribution").get<double>();
  CHECK(sum == doctest::Approx(expl.body.at("data").at("score").get<double>()).epsilon(1e-9));
  check_error(api.get("/sessions/alpha/explanations?image=999"), 422, "invalid");

  auto bad = api.post("/sessions/alpha/feedback", {{"kind", "mark_irrelevant"}, {"concept", 42}, {"scope", {{"kind", "global"}}}});
  check_error(bad, 422, "invalid");
  CHECK(bad.body.at("error").at("field") == "concept");
  auto bad_item = api.post("/sessions/alpha/feedback",
                           json::array({{{"kind", "mark_relevant"}, {"concept", 0}, {"class", 0}},
                                        {{"kind", "mark_relevant"}, {"concept", 0}}}));
  CHECK(bad_item.body.at("error").at("field") == "[1].class");
  check_error(api.post_raw("/sessions/alpha/feedback", "{not json"), 400, "bad_request");

  auto fb = api.post("/sessions/alpha/feedback",
                     {{"kind", "mark_irrelevant"}, {"concept", 1}, {"scope", {{"kind", "class"}, {"class", 0}}}});
  REQUIRE(fb.status == 200);
  CHECK(fb.body.at("data").at("memory_size") == 1);
  CHECK(std::filesystem::exists(root / "alpha/feedback.jsonl"));

  CHECK(api.post("/sessions/alpha/rounds", json::object()).status == 202);
  service.wait_idle();
  CHECK(api.get("/sessions/alpha").body.at("data").at("round") == 2);
  CHECK(api.get("/sessions/alpha/metrics?since=2").body.at("data").at("records").size() == 2);

  check_error(api.get("/sessions/nobody"), 404, "not_found");
  check_error(api.get("/sessions/nobody/metrics"), 404, "not_found");
  check_error(api.get("/nothing/here"), 404, "not_found");
  check_error(api.post("/sessions", {{"id", "bad id!"}}), 422, "invalid");
  check_error(api.post("/sessions", {{"dataset", "../etc"}}), 422, "invalid");
  service.stop();
}

TEST_CASE("a running round makes the session busy") {
  ServiceConfig cfg;
  cfg.port = 0;
  Service service(cfg);
  Api api(service.start());
  REQUIRE(api.post("/sessions", {{"config", small_config(40, 40)}, {"id", "slow"}}).status == 201);
  REQUIRE(api.post("/sessions/slow/rounds", json::object()).status == 202);
  check_error(api.post("/sessions/slow/rounds", json::object()), 409, "busy");
  check_error(api.get("/sessions/slow/concepts"), 409, "busy");
  auto status = api.get("/sessions/slow");
  CHECK(status.status == 200);
  CHECK(status.body.at("data").at("state") == "training");
  service.wait_idle();
  CHECK(api.get("/sessions/slow").body.at("data").at("round") == 1);
  CHECK(api.get("/sessions/slow/metrics").body.at("data").at("records").size() == 40);
  service.stop();
}
