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

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace gbm {

std::string sha256_hex(std::string_view bytes);

std::string base64_encode(std::string_view bytes);
std::string base64_decode(std::string_view text);

/// Little-endian IEEE-754 doubles, base64 wrapped.
std::string encode_f64(std::span<const double> values);
std::vector<double> decode_f64(std::string_view text);

/// Raw little-endian bytes of the doubles (hash input).
std::string f64_bytes(std::span<const double> values);

}  // namespace gbm
