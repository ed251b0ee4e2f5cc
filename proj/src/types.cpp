// SPDX-License-Identifier: Apache-2.0

#include "esmerge/types.hpp"

#include <stdexcept>
#include <string>

namespace esmerge {

const char * target_name(Target t) {
    switch (t) {
        case Target::attn_q: return "attn.q";
        case Target::attn_k: return "attn.k";
        case Target::attn_v: return "attn.v";
        case Target::attn_o: return "attn.o";
        case Target::mlp_gate: return "mlp.gate";
        case Target::mlp_up: return "mlp.up";
        case Target::mlp_down: return "mlp.down";
    }
    throw std::invalid_argument("unknown target");
}

Target target_from_name(std::string_view name) {
    for (Target t : kAllTargets)
        if (name == target_name(t))
            return t;
    throw std::invalid_argument("unknown target name: " + std::string(name));
}

void ModelConfig::validate() const {
    if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || d_ff <= 0)
        throw std::invalid_argument("config: dimensions must be positive");
    if (d_model % n_heads != 0)
        throw std::invalid_argument("config: d_model must be divisible by n_heads");
    if (lora_rank < 1)
        throw std::invalid_argument("config: lora_rank must be >= 1");
    if (!(lora_alpha > 0.0))
        throw std::invalid_argument("config: lora_alpha must be > 0");
    if (lora_targets.size() != kAllTargets.size())
        throw std::invalid_argument("config: lora_targets must list all seven targets");
    for (size_t i = 0; i < kAllTargets.size(); ++i)
        if (lora_targets[i] != kAllTargets[i])
            throw std::invalid_argument("config: lora_targets must be the fixed canonical order");
}

int ModelConfig::target_in_dim(Target t) const {
    return t == Target::mlp_down ? d_ff : d_model;
}

int ModelConfig::target_out_dim(Target t) const {
    return (t == Target::mlp_gate || t == Target::mlp_up) ? d_ff : d_model;
}

bool LoraTensors::same_shape(const LoraTensors & other) const {
    if (layers.size() != other.layers.size())
        return false;
    for (size_t l = 0; l < layers.size(); ++l) {
        if (layers[l].size() != other.layers[l].size())
            return false;
        for (size_t t = 0; t < layers[l].size(); ++t) {
            const auto & p = layers[l][t];
            const auto & q = other.layers[l][t];
            if (p.a.rows() != q.a.rows() || p.a.cols() != q.a.cols() ||
                p.b.rows() != q.b.rows() || p.b.cols() != q.b.cols())
                return false;
        }
    }
    return true;
}

LoraTensors LoraTensors::zeros_like(const LoraTensors & shape) {
    LoraTensors out;
    out.layers.resize(shape.layers.size());
    for (size_t l = 0; l < shape.layers.size(); ++l) {
        out.layers[l].resize(shape.layers[l].size());
        for (size_t t = 0; t < shape.layers[l].size(); ++t) {
            const auto & p = shape.layers[l][t];
            out.layers[l][t].a = Mat::Zero(p.a.rows(), p.a.cols());
            out.layers[l][t].b = Mat::Zero(p.b.rows(), p.b.cols());
        }
    }
    return out;
}

LoraTensors LoraTensors::zeros(const ModelConfig & config) {
    LoraTensors out;
    out.layers.resize(static_cast<size_t>(config.n_layers));
    for (auto & layer : out.layers) {
        layer.resize(config.lora_targets.size());
        for (size_t t = 0; t < config.lora_targets.size(); ++t) {
            const Target tgt = config.lora_targets[t];
            layer[t].a = Mat::Zero(config.lora_rank, config.target_in_dim(tgt));
            layer[t].b = Mat::Zero(config.target_out_dim(tgt), config.lora_rank);
        }
    }
    return out;
}

std::int64_t LoraTensors::layer_numel(int layer_index) const {
    std::int64_t n = 0;
    for (const auto & p : layers.at(static_cast<size_t>(layer_index)))
        n += p.a.size() + p.b.size();
    return n;
}

const Mat & LayerWeights::target_weight(Target t) const {
    switch (t) {
        case Target::attn_q: return attn_q;
        case Target::attn_k: return attn_k;
        case Target::attn_v: return attn_v;
        case Target::attn_o: return attn_o;
        case Target::mlp_gate: return mlp_gate;
        case Target::mlp_up: return mlp_up;
        case Target::mlp_down: return mlp_down;
    }
    throw std::invalid_argument("unknown target");
}

Mat & LayerWeights::target_weight(Target t) {
    return const_cast<Mat &>(static_cast<const LayerWeights &>(*this).target_weight(t));
}

const LoraAdapter * ModelBundle::find_adapter(std::string_view tag) const {
    for (const auto & a : adapters)
        if (a.modality_tag == tag)
            return &a;
    return nullptr;
}

const ModalityInfo * ModelBundle::find_modality(std::string_view tag) const {
    for (const auto & m : modalities)
        if (m.tag == tag)
            return &m;
    return nullptr;
}

} // namespace esmerge
