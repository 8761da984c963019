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

#include "gbm/attribution.hpp"

#include <algorithm>
#include <cmath>

#include "gbm/error.hpp"
#include "gbm/shapes.hpp"

namespace gbm {

OcclusionGains occlusion_gains(const ConceptView& cv, const Raster& image, PatchPos location) {
  if (location.row < 0 || location.col < 0 || location.row + cv.patch_h > image.height ||
      location.col + cv.patch_w > image.width)
    throw DimensionError("occlusion: receptive field leaves the image");
  const int n = cv.patch_h * cv.patch_w;
  OcclusionGains out;
  out.location = location;
  out.gain.assign(static_cast<size_t>(n), 0.0);
  out.excess.assign(static_cast<size_t>(n), 0.0);
  double d2 = 0.0;
  for (int r = 0; r < cv.patch_h; ++r) {
    const double* row = &image.data[(static_cast<size_t>(location.row + r) * image.width + location.col) * 3];
    for (int c = 0; c < cv.patch_w; ++c) {
      const size_t i = static_cast<size_t>(r * cv.patch_w + c);
      double e = 0.0;
      for (int ch = 0; ch < 3; ++ch) {
        const double z = row[c * 3 + ch];
        const double p = cv.p[i * 3 + static_cast<size_t>(ch)];
        d2 += (z - p) * (z - p);
        e += z * (2.0 * p - z);
      }
      out.excess[i] = e;
      out.gain[i] = e > 0.0 ? -std::expm1(-e / cv.tau) : 0.0;
    }
  }
  out.sq_distance = d2;
  out.activation = std::exp(-d2 / cv.tau);
  for (double g : out.gain) out.gain_sum += g;
  return out;
}

FieldMap field_map(const OcclusionGains& gains, int patch_h, int patch_w) {
  FieldMap m;
  m.location = gains.location;
  m.patch_h = patch_h;
  m.patch_w = patch_w;
  m.total = gains.activation;
  const size_t n = gains.gain.size();
  m.values.resize(n);
  if (gains.gain_sum > 0.0) {
    for (size_t i = 0; i < n; ++i) m.values[i] = gains.activation * gains.gain[i] / gains.gain_sum;
  } else {
    std::fill(m.values.begin(), m.values.end(), gains.activation / static_cast<double>(n));
  }
  return m;
}

FieldMap field_attribution_at(const ConceptView& cv, const Raster& image, PatchPos location) {
  return field_map(occlusion_gains(cv, image, location), cv.patch_h, cv.patch_w);
}

FieldMap field_attribution(const ConceptView& cv, const Raster& image) {
  return field_attribution_at(cv, image, activation(cv, image).location);
}

Eigen::VectorXd field_map_backward(const ConceptView& cv, const Raster& image, const OcclusionGains& gains,
                                   std::span<const double> upstream) {
  const size_t n = gains.gain.size();
  if (upstream.size() != n) throw DimensionError("field_map_backward: upstream size mismatch");
  const double c = gains.activation;
  const double G = gains.gain_sum;
  double d_c = 0.0;
  std::vector<double> d_gain(n, 0.0);
  if (G > 0.0) {
    double ug = 0.0;
    for (size_t i = 0; i < n; ++i) ug += upstream[i] * gains.gain[i];
    d_c = ug / G;
    for (size_t i = 0; i < n; ++i) d_gain[i] = c / G * (upstream[i] - ug / G);
  } else {
    for (size_t i = 0; i < n; ++i) d_c += upstream[i];
    d_c /= static_cast<double>(n);
  }
  Eigen::VectorXd grad(static_cast<Eigen::Index>(n * 3));
  for (int r = 0; r < cv.patch_h; ++r) {
    const double* row = &image.data[(static_cast<size_t>(gains.location.row + r) * image.width + gains.location.col) * 3];
    for (int col = 0; col < cv.patch_w; ++col) {
      const size_t i = static_cast<size_t>(r * cv.patch_w + col);
      const double slope = gains.excess[i] > 0.0 ? std::exp(-gains.excess[i] / cv.tau) / cv.tau : 0.0;
      for (int ch = 0; ch < 3; ++ch) {
        const size_t k = i * 3 + static_cast<size_t>(ch);
        const double z = row[col * 3 + ch];
        grad[static_cast<Eigen::Index>(k)] =
            d_c * c * 2.0 * (z - cv.p[k]) / cv.tau + d_gain[i] * slope * 2.0 * z;
      }
    }
  }
  return grad;
}

double field_inner(const FieldMap& a, const FieldMap& b) {
  const int r0 = std::max(a.location.row, b.location.row);
  const int r1 = std::min(a.location.row + a.patch_h, b.location.row + b.patch_h);
  const int c0 = std::max(a.location.col, b.location.col);
  const int c1 = std::min(a.location.col + a.patch_w, b.location.col + b.patch_w);
  double acc = 0.0;
  for (int r = r0; r < r1; ++r)
    for (int c = c0; c < c1; ++c)
      acc += a.values[static_cast<size_t>((r - a.location.row) * a.patch_w + (c - a.location.col))] *
             b.values[static_cast<size_t>((r - b.location.row) * b.patch_w + (c - b.location.col))];
  return acc;
}

Plane to_plane(const FieldMap& map, int height, int width) {
  Plane p(height, width);
  for (int r = 0; r < map.patch_h; ++r)
    for (int c = 0; c < map.patch_w; ++c)
      p.at(map.location.row + r, map.location.col + c) = map.values[static_cast<size_t>(r * map.patch_w + c)];
  return p;
}

AttributionMap concept_attribution(const PrototypeModel& model, int j, const Raster& image) {
  const FieldMap fm = field_attribution(ConceptView::of(model, j), image);
  return {to_plane(fm, image.height, image.width), j, fm.total, fm.location};
}

Mask attribution_region(const FieldMap& map, int height, int width, double fraction) {
  Mask m(height, width);
  const double mx = map.values.empty() ? 0.0 : *std::max_element(map.values.begin(), map.values.end());
  if (mx <= 0.0) return m;
  for (int r = 0; r < map.patch_h; ++r)
    for (int c = 0; c < map.patch_w; ++c)
      if (map.values[static_cast<size_t>(r * map.patch_w + c)] >= fraction * mx)
        m.at(map.location.row + r, map.location.col + c) = 1;
  return m;
}

std::vector<Representative> representatives(const PrototypeModel& model, int j, const SplitData& split, size_t n) {
  if (n < 1) throw DimensionError("representatives: n must be at least 1");
  if (split.size() == 0) throw DimensionError("representatives: empty dataset");
  const ConceptView view = ConceptView::of(model, j);
  std::vector<Representative> all;
  all.reserve(split.size());
  for (size_t i = 0; i < split.size(); ++i) {
    const auto a = activation(view, split.image(i));
    all.push_back({i, a.location, a.c});
  }
  std::stable_sort(all.begin(), all.end(),
                   [](const Representative& a, const Representative& b) { return a.activation > b.activation; });
  all.resize(std::min(n, all.size()));
  return all;
}

}  // namespace gbm
