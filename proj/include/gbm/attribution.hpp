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

#include <cstddef>
#include <span>
#include <vector>

#include "gbm/image.hpp"
#include "gbm/model.hpp"

namespace gbm {

struct SplitData;

/// Attribution restricted to one receptive field, the only place it can be
/// nonzero. `values` is row-major over the a x b field.
struct FieldMap {
  PatchPos location;
  int patch_h = 0;
  int patch_w = 0;
  std::vector<double> values;
  double total = 0.0;  // equals the concept activation
};

/// Relative occlusion effect of each receptive-field pixel:
/// gain_i = max(0, 1 - exp(-e_i / tau)) where e_i is the increase of the squared
/// distance when pixel i is set to background. The pre-rescale occlusion
/// delta c - c_occluded equals activation * gain_i.
struct OcclusionGains {
  double activation = 0.0;
  double sq_distance = 0.0;
  PatchPos location;
  std::vector<double> gain;
  std::vector<double> excess;  // e_i
  double gain_sum = 0.0;
};

OcclusionGains occlusion_gains(const ConceptView& cv, const Raster& image, PatchPos location);

/// Nonnegative map summing to the activation. Falls back to a uniform map over
/// the field when no pixel changes the activation when occluded.
FieldMap field_map(const OcclusionGains& gains, int patch_h, int patch_w);
FieldMap field_attribution(const ConceptView& cv, const Raster& image);
FieldMap field_attribution_at(const ConceptView& cv, const Raster& image, PatchPos location);

/// Gradient w.r.t. the prototype of sum_i upstream_i * map_i, with the
/// receptive field held at `gains.location`.
Eigen::VectorXd field_map_backward(const ConceptView& cv, const Raster& image, const OcclusionGains& gains,
                                   std::span<const double> upstream);

/// <a, b> over the overlap of two receptive fields.
double field_inner(const FieldMap& a, const FieldMap& b);

struct AttributionMap {
  Plane values;
  int concept_index = 0;
  double total = 0.0;
  PatchPos location;
};

AttributionMap concept_attribution(const PrototypeModel& model, int j, const Raster& image);
Plane to_plane(const FieldMap& map, int height, int width);

/// Pixels whose attribution reaches `fraction` of the map maximum.
Mask attribution_region(const FieldMap& map, int height, int width, double fraction = 0.1);

struct Representative {
  size_t image = 0;
  PatchPos location;
  double activation = 0.0;
};

/// Top-n images by c_j, descending, ties by image index.
std::vector<Representative> representatives(const PrototypeModel& model, int j, const SplitData& split, size_t n);

}  // namespace gbm
