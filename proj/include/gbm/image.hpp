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
#include <filesystem>
#include <string>
#include <vector>

namespace gbm {

/// H x W x 3 image with unit-interval intensities, stored row-major, channel last.
struct Raster {
  int height = 0;
  int width = 0;
  std::vector<double> data;

  Raster() = default;
  Raster(int h, int w) : height(h), width(w), data(static_cast<size_t>(h) * w * 3, 0.0) {}

  double& at(int r, int c, int ch) { return data[(static_cast<size_t>(r) * width + c) * 3 + ch]; }
  double at(int r, int c, int ch) const { return data[(static_cast<size_t>(r) * width + c) * 3 + ch]; }
  bool is_background(int r, int c) const {
    return at(r, c, 0) == 0.0 && at(r, c, 1) == 0.0 && at(r, c, 2) == 0.0;
  }

  bool operator==(const Raster&) const = default;
};

/// Binary H x W raster.
struct Mask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> bits;

  Mask() = default;
  Mask(int h, int w, std::uint8_t fill = 0)
      : height(h), width(w), bits(static_cast<size_t>(h) * w, fill) {}

  std::uint8_t& at(int r, int c) { return bits[static_cast<size_t>(r) * width + c]; }
  std::uint8_t at(int r, int c) const { return bits[static_cast<size_t>(r) * width + c]; }
  size_t count() const;

  bool operator==(const Mask&) const = default;
};

/// Single-channel real-valued H x W map (attribution maps, overlays).
struct Plane {
  int height = 0;
  int width = 0;
  std::vector<double> values;

  Plane() = default;
  Plane(int h, int w) : height(h), width(w), values(static_cast<size_t>(h) * w, 0.0) {}

  double& at(int r, int c) { return values[static_cast<size_t>(r) * width + c]; }
  double at(int r, int c) const { return values[static_cast<size_t>(r) * width + c]; }
};

/// Intersection over union of two masks; 0 when both are empty.
double iou(const Mask& a, const Mask& b);

// Netpbm codecs. Encoders are byte-exact: a raster whose intensities are
// multiples of 1/255 survives encode_ppm/decode_ppm unchanged.
std::string encode_ppm(const Raster& img);
Raster decode_ppm(const std::string& bytes);
std::string encode_pbm(const Mask& mask);
Mask decode_pbm(const std::string& bytes);
/// 16-bit P5. Values are scaled linearly so that `scale` maps to 65535.
std::string encode_pgm16(const Plane& plane, double scale);
Plane decode_pgm16(const std::string& bytes, double scale);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& bytes);

}  // namespace gbm
