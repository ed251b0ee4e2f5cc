// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "esmerge/model.hpp"
#include "esmerge/tensor_file.hpp"
#include "esmerge/types.hpp"

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace esmerge {

/// Synthetic stand-in for a modality encoder: tokens are drawn inside an
/// orthonormal subspace of model space, plus a little isotropic noise.
struct ModalitySpec {
    std::string tag;
    Mat subspace; // (d_m x d_model), rows orthonormal within 1e-8
    int tokens_per_block = 8;
    int prefix_tokens = 2;

    void validate(int d_model) const;
};

struct ProbeBatch {
    std::vector<TokenSequence> probes;
    std::uint64_t seed = 0;

    int count() const { return static_cast<int>(probes.size()); }
};

/// K probes, each concatenating per modality in spec order: prefix_tokens
/// text tokens from a shared Gaussian (stddev 1/sqrt(d_model)) followed by
/// tokens_per_block subspace tokens (unit-scale coefficients through the
/// basis, plus stddev-0.05 isotropic noise). Span layout is identical across
/// probes; everything is a pure function of the seed.
ProbeBatch build_probe_batch(const std::vector<ModalitySpec> & specs, int k, std::uint64_t seed);

/// Arithmetic mean over rows.
Vec mean_pool(const Mat & block);

/// Row k of each output is the pooled modality extraction of probe k at
/// `layer`: the base-model set and the specialized-model set, (K x d_model)
/// each.
std::pair<Mat, Mat> collect_layer_sets(const std::vector<TraceSet> & base_traces,
                                       const std::vector<TraceSet> & spec_traces,
                                       const ProbeBatch & batch, std::string_view modality,
                                       int layer);

/// Probe-construction specs from a bundle's stored modalities.
std::vector<ModalitySpec> specs_from_bundle(const ModelBundle & bundle, int tokens_per_block,
                                            int prefix_tokens);

/// Batch <-> container conversion. Embeddings persist as f32 under
/// probe/<k>/embeddings (k is the 0-based probe index); spans and the seed
/// ride in the metadata.
TensorFile probe_batch_to_file(const ProbeBatch & batch);
ProbeBatch probe_batch_from_file(const TensorFile & file);

} // namespace esmerge
