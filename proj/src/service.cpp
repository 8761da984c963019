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

#include "gbm/service.hpp"

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <map>
#include <mutex>
#include <regex>
#include <thread>

#include "gbm/codec.hpp"
#include "gbm/error.hpp"
#include "gbm/session.hpp"
#include "httplib.h"
#include "json.hpp"

namespace gbm {

namespace {

using nlohmann::json;

struct HttpError {
  int status;
  std::string code;
  std::string message;
  std::string field;
};

struct Slot {
  std::mutex mu;  // guards session
  std::unique_ptr<DebugSession> session;
  std::atomic<bool> busy{false};
  std::atomic<int> round{0};
  std::thread worker;

  std::mutex info_mu;  // guards the fields below
  std::vector<EpochRecord> metrics;
  std::string last_error;
};

void reply(httplib::Response& res, int status, const json& data) {
  res.status = status;
  res.set_content(json{{"ok", true}, {"data", data}}.dump(), "application/json");
}

void reply_error(httplib::Response& res, const HttpError& e) {
  json err = {{"code", e.code}, {"message", e.message}};
  if (!e.field.empty()) err["field"] = e.field;
  res.status = e.status;
  res.set_content(json{{"ok", false}, {"error", err}}.dump(), "application/json");
}

json parse_body(const httplib::Request& req, bool allow_empty) {
  if (req.body.empty()) {
    if (allow_empty) return json::object();
    throw HttpError{400, "bad_request", "request body must be JSON", ""};
  }
  try {
    return json::parse(req.body);
  } catch (const json::exception& e) {
    throw HttpError{400, "bad_request", std::string("malformed JSON: ") + e.what(), ""};
  }
}

long long int_param(const httplib::Request& req, const std::string& name, long long fallback) {
  if (!req.has_param(name)) return fallback;
  const auto v = req.get_param_value(name);
  try {
    size_t used = 0;
    const long long x = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw HttpError{422, "invalid", "query parameter '" + name + "' must be an integer", name};
  }
}

json status_json(const Slot& slot, const DebugSession* s) {
  json j = {{"busy", slot.busy.load()}, {"round", slot.round.load()}};
  if (s) {
    j["id"] = s->id();
    j["state"] = to_string(s->state());
    j["config"] = s->config().to_json();
    j["checkpoint_hash"] = s->checkpoint_hash();
    j["memory_size"] = s->memory().size();
    j["feedback_count"] = s->feedback_log().size();
    j["last_epoch"] = s->history().last_epoch();
  } else {
    j["state"] = to_string(SessionState::training);
  }
  return j;
}

}  // namespace

struct Service::Impl {
  ServiceConfig config;
  httplib::Server server;
  std::thread listener;
  std::mutex registry_mu;
  std::map<std::string, std::shared_ptr<Slot>> sessions;
  int next_id = 1;
  std::mutex idle_mu;
  std::condition_variable idle_cv;
  int running = 0;

  explicit Impl(ServiceConfig c) : config(std::move(c)) { routes(); }

  ~Impl() {
    server.stop();
    if (listener.joinable()) listener.join();
    std::lock_guard lock(registry_mu);
    for (auto& [id, slot] : sessions)
      if (slot->worker.joinable()) slot->worker.join();
  }

  std::shared_ptr<Slot> find(const std::string& id) {
    std::lock_guard lock(registry_mu);
    auto it = sessions.find(id);
    if (it == sessions.end() || !it->second) throw HttpError{404, "not_found", "unknown session '" + id + "'", ""};
    return it->second;
  }

  static void require_idle(const Slot& slot) {
    if (slot.busy) throw HttpError{409, "busy", "a round is running for this session", ""};
  }

  template <typename F>
  void handle(const httplib::Request& req, httplib::Response& res, F&& f) {
    try {
      f(req, res);
    } catch (const HttpError& e) {
      reply_error(res, e);
    } catch (const ValidationError& e) {
      reply_error(res, {422, "invalid", e.what(), e.field()});
    } catch (const StateError& e) {
      reply_error(res, {409, "conflict", e.what(), ""});
    } catch (const FormatError& e) {
      reply_error(res, {422, "invalid", e.what(), ""});
    } catch (const GenerationError& e) {
      reply_error(res, {422, "invalid", e.what(), "config"});
    } catch (const std::exception& e) {
      reply_error(res, {500, "internal", e.what(), ""});
    }
  }

  void route(const char* method, const std::string& pattern,
             std::function<void(const httplib::Request&, httplib::Response&)> f) {
    auto h = [this, f](const httplib::Request& req, httplib::Response& res) { handle(req, res, f); };
    if (std::string(method) == "GET")
      server.Get(pattern, h);
    else
      server.Post(pattern, h);
  }

  void routes() {
    route("POST", "/sessions", [this](const auto& req, auto& res) { create(req, res); });
    route("GET", R"(/sessions/([A-Za-z0-9_-]+))", [this](const auto& req, auto& res) {
      auto slot = find(req.matches[1]);
      if (slot->busy) {
        json j = status_json(*slot, nullptr);
        j["id"] = std::string(req.matches[1]);
        reply(res, 200, j);
        return;
      }
      std::lock_guard lock(slot->mu);
      json j = status_json(*slot, slot->session.get());
      std::lock_guard info(slot->info_mu);
      if (!slot->last_error.empty()) j["last_error"] = slot->last_error;
      reply(res, 200, j);
    });
    route("GET", R"(/sessions/([A-Za-z0-9_-]+)/concepts)", [this](const auto& req, auto& res) {
      auto slot = find(req.matches[1]);
      require_idle(*slot);
      const auto n = int_param(req, "n", 0);
      if (n < 0 || n > 64) throw HttpError{422, "invalid", "n must lie in [0, 64]", "n"};
      const bool images = int_param(req, "images", 1) != 0;
      std::lock_guard lock(slot->mu);
      const auto& s = *slot->session;
      json out = json::array();
      for (const auto& p : s.assess(static_cast<size_t>(n))) out.push_back(p.to_json(s.data().train, images));
      reply(res, 200, json{{"round", s.round()}, {"concepts", out}});
    });
    route("GET", R"(/sessions/([A-Za-z0-9_-]+)/explanations)", [this](const auto& req, auto& res) {
      auto slot = find(req.matches[1]);
      require_idle(*slot);
      std::lock_guard lock(slot->mu);
      explanation(*slot->session, req, res);
    });
    route("POST", R"(/sessions/([A-Za-z0-9_-]+)/feedback)", [this](const auto& req, auto& res) {
      auto slot = find(req.matches[1]);
      require_idle(*slot);
      const json body = parse_body(req, false);
      std::vector<Feedback> items;
      if (body.is_array()) {
        for (size_t i = 0; i < body.size(); ++i) {
          try {
            items.push_back(Feedback::from_json(body[i]));
          } catch (const ValidationError& e) {
            throw ValidationError("[" + std::to_string(i) + "]." + e.field(), e.what());
          }
        }
      } else {
        items.push_back(Feedback::from_json(body));
      }
      std::lock_guard lock(slot->mu);
      auto& s = *slot->session;
      if (s.state() != SessionState::awaiting_feedback && s.state() != SessionState::stable)
        throw StateError("feedback is accepted only after a round, session is " + to_string(s.state()));
      for (auto& f : items) f.round = s.round();
      for (size_t i = 0; i < items.size(); ++i) {
        try {
          s.submit_feedback(items[i]);
        } catch (const ValidationError& e) {
          if (items.size() == 1) throw;
          throw ValidationError("[" + std::to_string(i) + "]." + e.field(),
                                std::string(e.what()) + " (" + std::to_string(i) + " earlier items were applied)");
        }
      }
      reply(res, 200,
            json{{"accepted", items.size()}, {"memory_size", s.memory().size()}, {"state", to_string(s.state())}});
    });
    route("POST", R"(/sessions/([A-Za-z0-9_-]+)/rounds)", [this](const auto& req, auto& res) {
      start_round(find(req.matches[1]), req, res);
    });
    route("GET", R"(/sessions/([A-Za-z0-9_-]+)/metrics)", [this](const auto& req, auto& res) {
      auto slot = find(req.matches[1]);
      const auto since = int_param(req, "since", 0);
      json out = json::array();
      std::lock_guard info(slot->info_mu);
      for (const auto& r : slot->metrics)
        if (r.epoch > since) out.push_back(r.to_json());
      reply(res, 200, json{{"busy", slot->busy.load()}, {"records", out}});
    });
    server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
      if (res.body.empty()) {
        const std::string code = res.status == 404 ? "not_found" : "http_" + std::to_string(res.status);
        reply_error(res, {res.status, code, httplib::status_message(res.status), ""});
      }
    });
  }

  void create(const httplib::Request& req, httplib::Response& res) {
    const json body = parse_body(req, true);
    if (!body.is_object()) throw ValidationError("body", "request body must be a JSON object");
    SessionConfig cfg = body.contains("config") ? SessionConfig::from_json(body.at("config")) : SessionConfig{};
    if (body.contains("dataset")) {
      if (!body.at("dataset").is_string()) throw ValidationError("dataset", "dataset must be a name");
      const auto name = body.at("dataset").get<std::string>();
      if (!std::regex_match(name, std::regex("[A-Za-z0-9_.-]+")) || name == "." || name == "..")
        throw ValidationError("dataset", "invalid dataset name");
      const auto dir = config.data_root / name;
      if (!std::filesystem::exists(dir / "manifest.json"))
        throw ValidationError("dataset", "dataset '" + name + "' not found");
      cfg.data_dir = dir.string();
    }
    std::string id;
    if (body.contains("id")) {
      if (!body.at("id").is_string()) throw ValidationError("id", "id must be a string");
      id = body.at("id").get<std::string>();
      if (!std::regex_match(id, std::regex("[A-Za-z0-9_-]{1,64}")))
        throw ValidationError("id", "id must match [A-Za-z0-9_-]{1,64}");
    }
    {
      std::lock_guard lock(registry_mu);
      if (id.empty())
        do id = "s" + std::to_string(next_id++);
        while (sessions.count(id));
      else if (sessions.count(id))
        throw HttpError{409, "conflict", "session '" + id + "' already exists", "id"};
      sessions[id] = nullptr;  // reserve
    }
    try {
      auto slot = std::make_shared<Slot>();
      slot->session = std::make_unique<DebugSession>(id, cfg);
      if (!config.session_root.empty()) slot->session->attach(config.session_root / id);
      json data = status_json(*slot, slot->session.get());
      std::lock_guard lock(registry_mu);
      sessions[id] = slot;
      reply(res, 201, data);
    } catch (...) {
      std::lock_guard lock(registry_mu);
      sessions.erase(id);
      throw;
    }
  }

  void explanation(const DebugSession& s, const httplib::Request& req, httplib::Response& res) {
    const std::string split_name = req.has_param("split") ? req.get_param_value("split") : "train";
    Split split;
    try {
      split = parse_split(split_name);
    } catch (const Error&) {
      throw HttpError{422, "invalid", "unknown split '" + split_name + "'", "split"};
    }
    const auto& data = s.data().split(split);
    if (!req.has_param("image")) throw HttpError{422, "invalid", "missing query parameter 'image'", "image"};
    const auto image = int_param(req, "image", 0);
    if (image < 0 || static_cast<size_t>(image) >= data.size())
      throw HttpError{422, "invalid", "image " + std::to_string(image) + " out of range", "image"};
    const auto& model = s.model();
    const Raster& img = data.image(static_cast<size_t>(image));
    const auto probs = predict_proba(scores(model, activations(model, img)));
    Eigen::Index best = 0;
    probs.maxCoeff(&best);
    const auto label = int_param(req, "class", best);
    if (label < 0 || label >= model.num_classes)
      throw HttpError{422, "invalid", "class " + std::to_string(label) + " out of range", "class"};
    const Explanation e = explain(model, img, static_cast<int>(label));
    json contributions = json::array();
    for (size_t j = 0; j < e.pairs.size(); ++j)
      contributions.push_back({{"concept", j},
                               {"weight", e.pairs[j].first},
                               {"activation", e.pairs[j].second},
                               {"contribution", e.pairs[j].first * e.pairs[j].second},
                               {"row", e.locations[j].row},
                               {"col", e.locations[j].col}});
    std::stable_sort(contributions.begin(), contributions.end(), [](const json& a, const json& b) {
      return std::abs(a["contribution"].get<double>()) > std::abs(b["contribution"].get<double>());
    });
    std::vector<double> p(probs.data(), probs.data() + probs.size());
    reply(res, 200,
          json{{"split", split_name},
               {"image", image},
               {"true_class", data.scenes[static_cast<size_t>(image)].class_label},
               {"class", label},
               {"predicted", static_cast<int>(best)},
               {"probabilities", p},
               {"score", e.score()},
               {"contributions", contributions},
               {"ppm", base64_encode(encode_ppm(img))},
               {"patch_h", model.patch_h},
               {"patch_w", model.patch_w}});
  }

  void start_round(const std::shared_ptr<Slot>& slot, const httplib::Request& req, httplib::Response& res) {
    const json body = parse_body(req, true);
    std::optional<LossSpec> loss;
    if (body.is_object() && body.contains("loss")) {
      try {
        loss = LossSpec::from_json(body.at("loss"));
        loss->validate();
      } catch (const json::exception& e) {
        throw ValidationError("loss", std::string("malformed loss: ") + e.what());
      }
    }
    require_idle(*slot);
    std::lock_guard lock(slot->mu);
    require_idle(*slot);
    if (slot->worker.joinable()) slot->worker.join();
    auto& s = *slot->session;
    if (loss) s.set_loss(*loss);
    s.set_listener([slot](const EpochRecord& rec, const PrototypeModel&) {
      std::lock_guard info(slot->info_mu);
      slot->metrics.push_back(rec);
    });
    s.begin_round();
    slot->busy = true;
    {
      std::lock_guard l(idle_mu);
      ++running;
    }
    const int target = s.round() + 1;
    slot->worker = std::thread([this, slot] {
      std::string error;
      {
        std::lock_guard lock(slot->mu);
        try {
          slot->session->execute_round();
        } catch (const std::exception& e) {
          error = e.what();
        }
        std::lock_guard info(slot->info_mu);
        slot->last_error = error;
        slot->metrics = slot->session->history().records;
        slot->round = slot->session->round();
        slot->busy = false;
      }
      std::lock_guard l(idle_mu);
      --running;
      idle_cv.notify_all();
    });
    reply(res, 202, json{{"round", target}, {"state", to_string(SessionState::training)}});
  }
};

Service::Service(ServiceConfig config) : impl_(std::make_unique<Impl>(std::move(config))) {}

Service::~Service() = default;

int Service::start() {
  auto& s = impl_->server;
  int port = impl_->config.port;
  if (port == 0)
    port = s.bind_to_any_port(impl_->config.host);
  else if (!s.bind_to_port(impl_->config.host, port))
    port = -1;
  if (port < 0) throw Error("cannot bind " + impl_->config.host + ":" + std::to_string(impl_->config.port));
  impl_->listener = std::thread([&s] { s.listen_after_bind(); });
  s.wait_until_ready();
  return port;
}

void Service::run() {
  if (!impl_->server.listen(impl_->config.host, impl_->config.port))
    throw Error("cannot listen on " + impl_->config.host + ":" + std::to_string(impl_->config.port));
}

void Service::stop() { impl_->server.stop(); }

void Service::wait_idle() {
  std::unique_lock lock(impl_->idle_mu);
  impl_->idle_cv.wait(lock, [this] { return impl_->running == 0; });
}

}  // namespace gbm
