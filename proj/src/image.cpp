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

#include "gbm/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "gbm/error.hpp"

namespace gbm {

size_t Mask::count() const {
  return static_cast<size_t>(std::count_if(bits.begin(), bits.end(), [](auto b) { return b != 0; }));
}

double iou(const Mask& a, const Mask& b) {
  if (a.height != b.height || a.width != b.width) throw DimensionError("iou: mask size mismatch");
  size_t inter = 0, uni = 0;
  for (size_t i = 0; i < a.bits.size(); ++i) {
    const bool x = a.bits[i] != 0, y = b.bits[i] != 0;
    inter += (x && y);
    uni += (x || y);
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

namespace {

std::string header(const char* magic, int w, int h, int maxval) {
  std::string s = std::string(magic) + "\n" + std::to_string(w) + " " + std::to_string(h) + "\n";
  if (maxval > 0) s += std::to_string(maxval) + "\n";
  return s;
}

// Parses "<magic> <w> <h> [<maxval>]" followed by exactly one whitespace byte.
// Comments are not produced by the encoders and are rejected.
struct Header {
  int width = 0, height = 0, maxval = 0;
  size_t offset = 0;
};

Header parse_header(const std::string& bytes, const char* magic, bool has_maxval) {
  if (bytes.size() < 2 || bytes.compare(0, 2, magic) != 0)
    throw FormatError(std::string("netpbm: expected magic ") + magic);
  size_t pos = 2;
  auto next_int = [&]() {
    while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    size_t start = pos;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (start == pos) throw FormatError("netpbm: malformed header");
    return std::stoi(bytes.substr(start, pos - start));
  };
  Header h;
  h.width = next_int();
  h.height = next_int();
  if (has_maxval) h.maxval = next_int();
  if (pos >= bytes.size()) throw FormatError("netpbm: truncated header");
  h.offset = pos + 1;
  return h;
}

}  // namespace

std::string encode_ppm(const Raster& img) {
  std::string out = header("P6", img.width, img.height, 255);
  out.reserve(out.size() + img.data.size());
  for (double v : img.data) {
    const long q = std::lround(std::clamp(v, 0.0, 1.0) * 255.0);
    out.push_back(static_cast<char>(static_cast<unsigned char>(q)));
  }
  return out;
}

Raster decode_ppm(const std::string& bytes) {
  const Header h = parse_header(bytes, "P6", true);
  if (h.maxval != 255) throw FormatError("ppm: only maxval 255 is supported");
  Raster img(h.height, h.width);
  if (bytes.size() - h.offset < img.data.size()) throw FormatError("ppm: truncated pixel data");
  for (size_t i = 0; i < img.data.size(); ++i)
    img.data[i] = static_cast<unsigned char>(bytes[h.offset + i]) / 255.0;
  return img;
}

std::string encode_pbm(const Mask& mask) {
  std::string out = header("P4", mask.width, mask.height, 0);
  const int row_bytes = (mask.width + 7) / 8;
  for (int r = 0; r < mask.height; ++r) {
    for (int b = 0; b < row_bytes; ++b) {
      unsigned char byte = 0;
      for (int k = 0; k < 8; ++k) {
        const int c = b * 8 + k;
        if (c < mask.width && mask.at(r, c)) byte |= static_cast<unsigned char>(0x80u >> k);
      }
      out.push_back(static_cast<char>(byte));
    }
  }
  return out;
}

Mask decode_pbm(const std::string& bytes) {
  const Header h = parse_header(bytes, "P4", false);
  Mask mask(h.height, h.width);
  const int row_bytes = (h.width + 7) / 8;
  if (bytes.size() - h.offset < static_cast<size_t>(row_bytes) * h.height)
    throw FormatError("pbm: truncated bit data");
  for (int r = 0; r < h.height; ++r)
    for (int c = 0; c < h.width; ++c) {
      const auto byte = static_cast<unsigned char>(bytes[h.offset + r * row_bytes + c / 8]);
      mask.at(r, c) = (byte >> (7 - c % 8)) & 1u;
    }
  return mask;
}

std::string encode_pgm16(const Plane& plane, double scale) {
  std::string out = header("P5", plane.width, plane.height, 65535);
  for (double v : plane.values) {
    const double unit = scale > 0.0 ? std::clamp(v / scale, 0.0, 1.0) : 0.0;
    const auto q = static_cast<unsigned>(std::lround(unit * 65535.0));
    out.push_back(static_cast<char>((q >> 8) & 0xFF));
    out.push_back(static_cast<char>(q & 0xFF));
  }
  return out;
}

Plane decode_pgm16(const std::string& bytes, double scale) {
  const Header h = parse_header(bytes, "P5", true);
  if (h.maxval != 65535) throw FormatError("pgm: only 16-bit maps are supported");
  Plane plane(h.height, h.width);
  if (bytes.size() - h.offset < plane.values.size() * 2) throw FormatError("pgm: truncated data");
  for (size_t i = 0; i < plane.values.size(); ++i) {
    const unsigned hi = static_cast<unsigned char>(bytes[h.offset + 2 * i]);
    const unsigned lo = static_cast<unsigned char>(bytes[h.offset + 2 * i + 1]);
    plane.values[i] = static_cast<double>((hi << 8) | lo) / 65535.0 * scale;
  }
  return plane;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace gbm
