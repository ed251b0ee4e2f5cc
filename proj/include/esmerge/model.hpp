// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "esmerge/types.hpp"

#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace esmerge {

inline constexpr double kRmsNormEps = 1e-6;

struct Span {
    std::string tag;
    int start = 0;
    int length = 0;
};

/// A probe sequence of continuous token embeddings. Positions not covered by
/// any span are text-prefix context.
struct TokenSequence {
    Mat embeddings; // (T x d_model)
    std::vector<Span> spans;

    int tokens() const { return static_cast<int>(embeddings.rows()); }
    const Span & span_for(std::string_view tag) const; // throws on unknown tag
    void validate(int d_model) const; // disjoint in-bounds spans, finite entries
};

/// Layer-wise hidden states: hidden[0] is the block input, hidden[l] the
/// output of layer l, for l in 1..n_layers.
struct TraceSet {
    std::vector<Mat> hidden;
    int probe_id = -1;
};

/// Intermediate activations of one transformer block, kept for the analytic
/// backward pass and for structural tests.
struct BlockActivations {
    Mat x;      // block input
    Mat n1;     // after attention RMSNorm
    Mat q, k, v;
    std::vector<Mat> probs; // per head, (T x T) causal attention weights
    Mat concat; // merged head outputs, before the output projection
    Mat attn_out;
    Mat h1;     // x + attn_out
    Mat n2;     // after MLP RMSNorm
    Mat gate, up, act; // act = silu(gate) .* up
    Mat mlp_out;
    Mat y;      // block output
};

/// RMSNorm with eps = 1e-6 inside the square root, per-row, then the learned
/// scale.
Mat rmsnorm(const Mat & x, const Vec & scale);

/// y = x W^T + lora_scale * (x A^T) B^T. Pass lora = nullptr for the base path.
Mat linear_lora(const Mat & x, const Mat & w, const LoraTensorPair * lora, double scale);

/// One pre-norm block: h <- h + Attn(RMSNorm(h)); h <- h + MLP(RMSNorm(h)).
/// Attention is causal multi-head; the MLP is W_down(silu(W_gate x) .* W_up x).
/// `lora_layer` holds this layer's LoRA pairs in config target order, or
/// nullptr for the pure base model.
BlockActivations block_forward(const ModelConfig & config, const LayerWeights & weights,
                               const std::vector<LoraTensorPair> * lora_layer, const Mat & x);

/// Full forward capturing all n_layers+1 hidden states. With no adapter tag
/// the pure base weights run; with a tag, that adapter's LoRA deltas apply.
TraceSet forward_with_trace(const ModelBundle & bundle,
                            const std::optional<std::string> & adapter_tag,
                            const TokenSequence & input);

/// Rows of the hidden state at `layer` (0..n_layers) restricted to the span
/// of `modality`, in position order.
Mat extract_modality(const TraceSet & trace, const TokenSequence & input,
                     std::string_view modality, int layer);

} // namespace esmerge
