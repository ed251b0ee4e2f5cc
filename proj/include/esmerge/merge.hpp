// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "esmerge/signals.hpp"
#include "esmerge/types.hpp"

#include <string>
#include <vector>

namespace esmerge {

/// Final per-element merging weights: for every coordinate, the values across
/// models lie on the simplex. `source` records which granularities were
/// combined ("layer", "element", or "fused").
struct FusedCoefficients {
    std::vector<std::string> model_tags;
    std::string source;
    std::vector<LoraTensors> lambda; // per model, adapter-shaped
};

/// lambda = alpha * beta / sum_m alpha * beta, elementwise per coordinate.
FusedCoefficients integrate(const LayerCoefficients & alpha, const ElementCoefficients & beta);

/// Layer-only coefficients broadcast to element shape (the element factor is
/// uniform). `shape` supplies the adapter geometry.
FusedCoefficients coeffs_from_layer_only(const LayerCoefficients & alpha,
                                         const LoraTensors & shape);

/// Element-only coefficients used directly as lambda.
FusedCoefficients coeffs_from_element_only(const ElementCoefficients & beta);

/// Per-coordinate weighted sum of the adapters under lambda.
LoraAdapter merge_adapters(const std::vector<const LoraAdapter *> & adapters,
                           const FusedCoefficients & lambda);

/// Uniform-weight baseline.
LoraAdapter avg_merge(const std::vector<const LoraAdapter *> & adapters);

/// Trim / elect sign / disjoint merge, each A and B tensor independently:
/// keep the top ceil(trim_fraction * N) entries per model by |value| (ties at
/// the threshold resolved toward the lower flat index), elect the sign of the
/// per-coordinate sum of trimmed values (exact zero elects positive), then
/// average the trimmed values whose sign matches; no match gives 0.
LoraAdapter ties_merge(const std::vector<const LoraAdapter *> & adapters, double trim_fraction);

} // namespace esmerge
