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

#pragma once

#include <filesystem>
#include <memory>
#include <string>

namespace gbm {

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;                          // 0 picks a free port
  std::filesystem::path data_root;          // datasets are looked up here by name
  std::filesystem::path session_root;       // sessions are persisted here when set
};

/// JSON-over-HTTP front end of the debugging loop. Every response is an
/// envelope {"ok": true, "data": ...} or {"ok": false, "error": {"code",
/// "message"[, "field"]}}. Rounds run on a background thread per session.
class Service {
public:
  explicit Service(ServiceConfig config);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  /// Binds and starts serving on a background thread; returns the bound port.
  int start();
  /// Binds and serves on the calling thread until stop().
  void run();
  void stop();

  /// Blocks until no round is running in any session.
  void wait_idle();

private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace gbm
