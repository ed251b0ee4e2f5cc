// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "esmerge/model.hpp"
#include "esmerge/probe.hpp"
#include "esmerge/types.hpp"

#include <string>
#include <string_view>
#include <vector>

namespace esmerge {

/// Frobenius norm of the difference between two equally shaped blocks.
double distance_r(const Mat & base_block, const Mat & spec_block);

/// Flat address of one LoRA element: target index in config order, A or B,
/// then row/col inside that matrix.
struct ElementCoord {
    int target_index = 0;
    bool in_b = false;
    int row = 0;
    int col = 0;
};

/// Gradients of the layer-l modality distance with respect to layer-l LoRA
/// elements only: one A-shaped and one B-shaped matrix per target, in config
/// order. `layer` is 1-based (1..n_layers).
///
/// The output cotangent is (H_spec^l - H_base^l)/r on the modality span rows
/// and zero elsewhere (all-zero when r = 0), propagated through block l alone
/// with the block input held fixed; layer-l parameters reach r^l only through
/// block l, so this is the complete gradient.
std::vector<LoraTensorPair> backward_r_layer(const ModelBundle & bundle,
                                             std::string_view adapter_tag,
                                             const TokenSequence & input,
                                             std::string_view modality, int layer);

/// Same, against already computed traces (both must come from `input`).
std::vector<LoraTensorPair> backward_r_layer_traced(const ModelBundle & bundle,
                                                    const LoraAdapter & adapter,
                                                    const TokenSequence & input,
                                                    const TraceSet & base_trace,
                                                    const TraceSet & spec_trace,
                                                    std::string_view modality, int layer);

/// Central finite difference of the same distance with respect to one LoRA
/// element, all other parameters fixed. Verification oracle for the analytic
/// backward; meaningful only away from the r = 0 kink.
double fd_grad(const ModelBundle & bundle, std::string_view adapter_tag,
               const TokenSequence & input, std::string_view modality, int layer,
               const ElementCoord & coord, double step);

/// Distance value itself, for oracle bookkeeping.
double eval_r(const ModelBundle & bundle, std::string_view adapter_tag,
              const TokenSequence & input, std::string_view modality, int layer);

/// Per-element absolute-gradient sums over every (modality, probe) pair for
/// all layers. Summation order is fixed (modalities outer, probes inner) so
/// results are bit-reproducible.
LoraTensors accumulate_sensitivity(const ModelBundle & bundle, std::string_view adapter_tag,
                                   const ProbeBatch & probes,
                                   const std::vector<std::string> & modalities);

} // namespace esmerge
