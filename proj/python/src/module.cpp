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

// Python bindings. Structured values cross the boundary as JSON text; the
// gbmdebug package converts them to and from dicts.

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <memory>
#include <optional>
#include <string>

#include "gbm/error.hpp"
#include "gbm/experiment.hpp"
#include "gbm/kernels.hpp"
#include "gbm/persist.hpp"
#include "gbm/service.hpp"
#include "gbm/session.hpp"
#include "gbm/shapes.hpp"
#include "json.hpp"

namespace py = pybind11;
using nlohmann::json;

namespace {

json parse(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw gbm::ValidationError("body", std::string("malformed JSON: ") + e.what());
  }
}

std::shared_ptr<const gbm::Dataset> dataset_at(const std::optional<std::string>& dir) {
  if (!dir) return nullptr;
  return std::make_shared<const gbm::Dataset>(gbm::load_dataset(*dir));
}

json explanation_json(const gbm::DebugSession& s, size_t image, std::optional<int> label) {
  const auto& train = s.data().train;
  if (image >= train.size()) throw gbm::ValidationError("image", "image index out of range");
  const auto& img = train.image(image);
  const int y = label ? *label : gbm::predict(s.model(), img);
  if (y < 0 || y >= s.model().num_classes) throw gbm::ValidationError("class", "class out of range");
  const auto e = gbm::explain(s.model(), img, y);
  json items = json::array();
  for (size_t j = 0; j < e.pairs.size(); ++j)
    items.push_back({{"concept", j},
                     {"weight", e.pairs[j].first},
                     {"activation", e.pairs[j].second},
                     {"contribution", e.pairs[j].first * e.pairs[j].second},
                     {"row", e.locations[j].row},
                     {"col", e.locations[j].col}});
  return {{"image", image}, {"class", y}, {"score", e.score()}, {"contributions", items}};
}

gbm::ScopeKind scope_kind(const std::string& s) {
  if (s == "class") return gbm::ScopeKind::klass;
  if (s == "global") return gbm::ScopeKind::global;
  if (s == "instance") return gbm::ScopeKind::instance;
  throw gbm::ValidationError("scope", "unknown scope '" + s + "'");
}

class PyService {
public:
  PyService(const std::string& host, int port, const std::string& data_root, const std::string& session_root) {
    gbm::ServiceConfig c;
    c.host = host;
    c.port = port;
    c.data_root = data_root;
    c.session_root = session_root;
    service_ = std::make_unique<gbm::Service>(std::move(c));
  }
  int start() { return port_ = service_->start(); }
  void stop() { service_->stop(); }
  void wait_idle() { service_->wait_idle(); }
  int port() const { return port_; }

private:
  std::unique_ptr<gbm::Service> service_;
  int port_ = 0;
};

}  // namespace

PYBIND11_MODULE(_gbmdebug, m) {
  m.doc() = "Prototype-based gray-box models with memory-backed debugging";

  auto base = py::register_exception<gbm::Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<gbm::DimensionError>(m, "DimensionError", base);
  py::register_exception<gbm::GenerationError>(m, "GenerationError", base);
  py::register_exception<gbm::ProfileError>(m, "ProfileError", base);
  py::register_exception<gbm::NumericError>(m, "NumericError", base);
  py::register_exception<gbm::StateError>(m, "StateError", base);
  py::register_exception<gbm::FormatError>(m, "FormatError", base);
  static py::exception<gbm::ValidationError> validation(m, "ValidationError", base);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const gbm::ValidationError& e) {
      const py::object type = validation;
      py::object err = type(e.what());
      err.attr("field") = e.field();
      PyErr_SetObject(type.ptr(), err.ptr());
    }
  });

  m.def(
      "generate_dataset",
      [](const std::string& config, const std::string& out) {
        const auto ds = gbm::generate(gbm::DataConfig::from_json(parse(config)));
        gbm::save_dataset(ds, out);
        return ds.manifest().dump();
      },
      py::arg("config"), py::arg("out"), "Generates a dataset into `out`; returns the manifest JSON.");
  m.def(
      "dataset_manifest", [](const std::string& dir) { return gbm::load_dataset(dir).manifest().dump(); },
      py::arg("dir"));
  m.def("default_data_config", [] { return gbm::DataConfig{}.to_json().dump(); });
  m.def("default_session_config", [] { return gbm::SessionConfig{}.to_json().dump(); });
  m.def("default_experiment_config", [] { return gbm::ExperimentConfig{}.to_json().dump(); });

  m.def(
      "run_experiment",
      [](const std::string& config, std::optional<std::string> data_dir, std::optional<std::string> out) {
        const auto c = gbm::ExperimentConfig::from_json(parse(config));
        const auto data = dataset_at(data_dir);
        std::optional<std::filesystem::path> dir;
        if (out) dir = *out;
        py::gil_scoped_release release;
        return gbm::run_experiment(c, data, dir).to_json().dump();
      },
      py::arg("config"), py::arg("data_dir") = py::none(), py::arg("out") = py::none());
  m.def(
      "report",
      [](const std::vector<std::string>& runs, const std::string& report_dir) {
        std::vector<std::filesystem::path> dirs(runs.begin(), runs.end());
        return gbm::report_markdown(gbm::load_summaries(dirs), report_dir);
      },
      py::arg("runs"), py::arg("report_dir"));
  m.def(
      "checkpoint_hash", [](const std::string& path) { return gbm::checkpoint_hash(gbm::load_checkpoint(path)); },
      py::arg("path"));

  m.def(
      "kappa_param",
      [](const Eigen::VectorXd& a, const Eigen::VectorXd& b, double sigma) {
        if (a.size() != b.size()) throw gbm::DimensionError("kappa_param: length mismatch");
        return gbm::kappa_param({a.data(), static_cast<size_t>(a.size())}, {b.data(), static_cast<size_t>(b.size())},
                                sigma);
      },
      py::arg("a"), py::arg("b"), py::arg("sigma"));

  py::class_<gbm::DebugSession>(m, "Session")
      .def(py::init([](const std::string& id, const std::string& config, std::optional<std::string> data_dir) {
             return gbm::DebugSession(id, gbm::SessionConfig::from_json(parse(config)), dataset_at(data_dir));
           }),
           py::arg("id"), py::arg("config"), py::arg("data_dir") = py::none())
      .def_static("load", [](const std::string& dir) { return gbm::DebugSession::load(dir); }, py::arg("dir"))
      .def_static("replay", [](const std::string& dir) { return gbm::DebugSession::replay(dir); }, py::arg("dir"))
      .def_property_readonly("id", &gbm::DebugSession::id)
      .def_property_readonly("state", [](const gbm::DebugSession& s) { return gbm::to_string(s.state()); })
      .def_property_readonly("round", &gbm::DebugSession::round)
      .def_property_readonly("memory_size", [](const gbm::DebugSession& s) { return s.memory().size(); })
      .def_property_readonly("checkpoint_hash", &gbm::DebugSession::checkpoint_hash)
      .def_property_readonly("prototypes", [](const gbm::DebugSession& s) { return gbm::RowMatrix(s.model().prototypes); })
      .def_property_readonly("weights", [](const gbm::DebugSession& s) { return Eigen::MatrixXd(s.model().weights); })
      .def_property_readonly("owner", [](const gbm::DebugSession& s) { return s.model().owner; })
      .def("config_json", [](const gbm::DebugSession& s) { return s.config().to_json().dump(); })
      .def("attach", [](gbm::DebugSession& s, const std::string& dir) { s.attach(dir); }, py::arg("dir"))
      .def("save", &gbm::DebugSession::save)
      .def("run_round", &gbm::DebugSession::run_round, py::call_guard<py::gil_scoped_release>())
      .def(
          "set_loss", [](gbm::DebugSession& s, const std::string& spec) { s.set_loss(gbm::LossSpec::from_json(parse(spec))); },
          py::arg("spec"))
      .def(
          "assess",
          [](const gbm::DebugSession& s, size_t n, bool images) {
            json out = json::array();
            for (const auto& p : s.assess(n)) out.push_back(p.to_json(s.data().train, images));
            return out.dump();
          },
          py::arg("n") = 0, py::arg("images") = false)
      .def(
          "submit_feedback",
          [](gbm::DebugSession& s, const std::string& feedback) { s.submit_feedback(gbm::Feedback::from_json(parse(feedback))); },
          py::arg("feedback"))
      .def(
          "feedback_log",
          [](const gbm::DebugSession& s) {
            json out = json::array();
            for (const auto& f : s.feedback_log()) out.push_back(f.to_json());
            return out.dump();
          })
      .def(
          "metrics",
          [](const gbm::DebugSession& s) {
            json out = json::array();
            for (const auto& r : s.history().records) out.push_back(r.to_json());
            return out.dump();
          })
      .def(
          "explain",
          [](const gbm::DebugSession& s, size_t image, std::optional<int> label) {
            return explanation_json(s, image, label).dump();
          },
          py::arg("image"), py::arg("label") = py::none())
      .def(
          "oracle",
          [](const gbm::DebugSession& s, double theta, const std::string& scope) {
            json out = json::array();
            for (const auto& f : gbm::scripted_oracle(s, theta, scope_kind(scope))) out.push_back(f.to_json());
            return out.dump();
          },
          py::arg("theta") = 0.5, py::arg("scope") = "class");

  py::class_<PyService>(m, "Service")
      .def(py::init<const std::string&, int, const std::string&, const std::string&>(), py::arg("host") = "127.0.0.1",
           py::arg("port") = 0, py::arg("data_root") = ".", py::arg("session_root") = "")
      .def("start", &PyService::start)
      .def("stop", &PyService::stop, py::call_guard<py::gil_scoped_release>())
      .def("wait_idle", &PyService::wait_idle, py::call_guard<py::gil_scoped_release>())
      .def_property_readonly("port", &PyService::port);
}
