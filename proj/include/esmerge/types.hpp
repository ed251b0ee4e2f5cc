// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace esmerge {

// All internal math runs in 64-bit; persisted tensors are 32-bit (see tensor_file).
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;

/// Tensor roles that receive a LoRA pair, in the fixed canonical order.
enum class Target : int {
    attn_q = 0,
    attn_k,
    attn_v,
    attn_o,
    mlp_gate,
    mlp_up,
    mlp_down,
};

inline constexpr int kNumTargets = 7;

inline constexpr std::array<Target, kNumTargets> kAllTargets = {
    Target::attn_q, Target::attn_k, Target::attn_v, Target::attn_o,
    Target::mlp_gate, Target::mlp_up, Target::mlp_down,
};

const char * target_name(Target t);
Target target_from_name(std::string_view name);

struct ModelConfig {
    int d_model = 32;
    int n_layers = 4;
    int n_heads = 4;
    int d_ff = 64;
    int lora_rank = 2;
    double lora_alpha = 8.0;
    std::vector<Target> lora_targets{kAllTargets.begin(), kAllTargets.end()};

    // Throws std::invalid_argument on a violated invariant.
    void validate() const;

    int head_dim() const { return d_model / n_heads; }
    double lora_scale() const { return lora_alpha / static_cast<double>(lora_rank); }

    // Weight shape of a target is (out_dim x in_dim); LoRA A is (rank x in_dim),
    // B is (out_dim x rank).
    int target_in_dim(Target t) const;
    int target_out_dim(Target t) const;
};

/// One low-rank pair. `a` is (rank x in_dim), `b` is (out_dim x rank).
struct LoraTensorPair {
    Mat a;
    Mat b;
};

/// Adapter-shaped container: one A/B pair per (layer, target). Reused for
/// weights, absolute-gradient accumulators, and per-element coefficients.
struct LoraTensors {
    std::vector<std::vector<LoraTensorPair>> layers; // [n_layers][target index]

    int n_layers() const { return static_cast<int>(layers.size()); }
    bool same_shape(const LoraTensors & other) const;
    static LoraTensors zeros_like(const LoraTensors & shape);
    static LoraTensors zeros(const ModelConfig & config);

    /// Sum of A+B element counts in one layer.
    std::int64_t layer_numel(int layer_index) const;
};

struct LoraAdapter {
    std::string modality_tag;
    LoraTensors tensors;
};

struct LayerWeights {
    Vec attn_norm; // RMSNorm scales, length d_model
    Vec mlp_norm;
    Mat attn_q, attn_k, attn_v, attn_o; // (d_model x d_model)
    Mat mlp_gate, mlp_up;               // (d_ff x d_model)
    Mat mlp_down;                       // (d_model x d_ff)

    const Mat & target_weight(Target t) const;
    Mat & target_weight(Target t);
};

/// Modality metadata carried with a bundle so probe batches can be rebuilt
/// from the file alone. `subspace` rows are an orthonormal basis in model space.
struct ModalityInfo {
    std::string tag;
    Mat subspace; // (subspace_dim x d_model)
};

struct ModelBundle {
    ModelConfig config;
    std::vector<LayerWeights> base;      // [n_layers]
    std::vector<LoraAdapter> adapters;   // one per modality, bundle order
    std::vector<ModalityInfo> modalities;

    const LoraAdapter * find_adapter(std::string_view tag) const;
    const ModalityInfo * find_modality(std::string_view tag) const;
};

} // namespace esmerge
