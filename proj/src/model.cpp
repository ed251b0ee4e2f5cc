// SPDX-License-Identifier: Apache-2.0

#include "esmerge/model.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace esmerge {

const Span & TokenSequence::span_for(std::string_view tag) const {
    for (const Span & s : spans)
        if (s.tag == tag)
            return s;
    throw std::invalid_argument("no span for modality '" + std::string(tag) + "'");
}

void TokenSequence::validate(int d_model) const {
    if (embeddings.cols() != d_model)
        throw std::invalid_argument("probe embedding width does not match d_model");
    if (embeddings.rows() < 1)
        throw std::invalid_argument("probe has no tokens");
    if (!embeddings.allFinite())
        throw std::invalid_argument("probe embeddings contain a non-finite value");
    std::vector<char> covered(static_cast<size_t>(tokens()), 0);
    for (const Span & s : spans) {
        if (s.length < 1 || s.start < 0 || s.start + s.length > tokens())
            throw std::invalid_argument("span '" + s.tag + "' out of bounds");
        for (int i = s.start; i < s.start + s.length; ++i) {
            if (covered[static_cast<size_t>(i)])
                throw std::invalid_argument("overlapping spans at token " + std::to_string(i));
            covered[static_cast<size_t>(i)] = 1;
        }
    }
}

Mat rmsnorm(const Mat & x, const Vec & scale) {
    const auto n = x.cols();
    Mat y(x.rows(), n);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const double ms = x.row(i).squaredNorm() / static_cast<double>(n);
        const double inv = 1.0 / std::sqrt(ms + kRmsNormEps);
        y.row(i) = (x.row(i) * inv).cwiseProduct(scale.transpose());
    }
    return y;
}

Mat linear_lora(const Mat & x, const Mat & w, const LoraTensorPair * lora, double scale) {
    Mat y = x * w.transpose();
    if (lora != nullptr)
        y.noalias() += scale * ((x * lora->a.transpose()) * lora->b.transpose());
    return y;
}

BlockActivations block_forward(const ModelConfig & config, const LayerWeights & weights,
                               const std::vector<LoraTensorPair> * lora_layer, const Mat & x) {
    const int T = static_cast<int>(x.rows());
    const int hd = config.head_dim();
    const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));
    const double s = config.lora_scale();
    auto pair = [&](Target t) -> const LoraTensorPair * {
        if (lora_layer == nullptr)
            return nullptr;
        return &(*lora_layer)[static_cast<size_t>(static_cast<int>(t))];
    };

    BlockActivations act;
    act.x = x;
    act.n1 = rmsnorm(x, weights.attn_norm);
    act.q = linear_lora(act.n1, weights.attn_q, pair(Target::attn_q), s);
    act.k = linear_lora(act.n1, weights.attn_k, pair(Target::attn_k), s);
    act.v = linear_lora(act.n1, weights.attn_v, pair(Target::attn_v), s);

    act.probs.resize(static_cast<size_t>(config.n_heads));
    act.concat = Mat::Zero(T, config.d_model);
    for (int h = 0; h < config.n_heads; ++h) {
        const auto qh = act.q.middleCols(h * hd, hd);
        const auto kh = act.k.middleCols(h * hd, hd);
        const auto vh = act.v.middleCols(h * hd, hd);
        Mat scores = (qh * kh.transpose()) * inv_sqrt_hd;
        Mat & p = act.probs[static_cast<size_t>(h)];
        p = Mat::Zero(T, T);
        for (int i = 0; i < T; ++i) {
            // Causal: position i attends to 0..i.
            double m = -std::numeric_limits<double>::infinity();
            for (int j = 0; j <= i; ++j)
                m = std::max(m, scores(i, j));
            double z = 0.0;
            for (int j = 0; j <= i; ++j) {
                const double e = std::exp(scores(i, j) - m);
                p(i, j) = e;
                z += e;
            }
            p.row(i) /= z;
        }
        act.concat.middleCols(h * hd, hd) = p * vh;
    }
    act.attn_out = linear_lora(act.concat, weights.attn_o, pair(Target::attn_o), s);
    act.h1 = x + act.attn_out;

    act.n2 = rmsnorm(act.h1, weights.mlp_norm);
    act.gate = linear_lora(act.n2, weights.mlp_gate, pair(Target::mlp_gate), s);
    act.up = linear_lora(act.n2, weights.mlp_up, pair(Target::mlp_up), s);
    act.act = Mat(T, config.d_ff);
    for (Eigen::Index i = 0; i < act.gate.size(); ++i) {
        const double g = act.gate.data()[i];
        const double silu = g / (1.0 + std::exp(-g));
        act.act.data()[i] = silu * act.up.data()[i];
    }
    act.mlp_out = linear_lora(act.act, weights.mlp_down, pair(Target::mlp_down), s);
    act.y = act.h1 + act.mlp_out;
    return act;
}

TraceSet forward_with_trace(const ModelBundle & bundle,
                            const std::optional<std::string> & adapter_tag,
                            const TokenSequence & input) {
    input.validate(bundle.config.d_model);
    const LoraAdapter * adapter = nullptr;
    if (adapter_tag) {
        adapter = bundle.find_adapter(*adapter_tag);
        if (adapter == nullptr)
            throw std::invalid_argument("unknown adapter '" + *adapter_tag + "'");
    }
    TraceSet trace;
    trace.hidden.reserve(static_cast<size_t>(bundle.config.n_layers) + 1);
    trace.hidden.push_back(input.embeddings);
    Mat h = input.embeddings;
    for (int l = 0; l < bundle.config.n_layers; ++l) {
        const std::vector<LoraTensorPair> * lora_layer =
            adapter ? &adapter->tensors.layers[static_cast<size_t>(l)] : nullptr;
        h = block_forward(bundle.config, bundle.base[static_cast<size_t>(l)], lora_layer, h).y;
        trace.hidden.push_back(h);
    }
    return trace;
}

Mat extract_modality(const TraceSet & trace, const TokenSequence & input,
                     std::string_view modality, int layer) {
    if (layer < 0 || layer >= static_cast<int>(trace.hidden.size()))
        throw std::invalid_argument("layer index out of range");
    const Span & span = input.span_for(modality);
    return trace.hidden[static_cast<size_t>(layer)].middleRows(span.start, span.length);
}

} // namespace esmerge
