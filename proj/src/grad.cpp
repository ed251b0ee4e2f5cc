// SPDX-License-Identifier: Apache-2.0

#include "esmerge/grad.hpp"

#include "esmerge/parallel.hpp"

#include <cmath>
#include <stdexcept>

namespace esmerge {

namespace {

// VJP of y = x W^T + s (x A^T) B^T for one linear. Appends the parameter
// gradients and returns the input gradient.
Mat linear_lora_backward(const Mat & x, const Mat & w, const LoraTensorPair & lora, double s,
                         const Mat & gy, LoraTensorPair & grad) {
    grad.a.noalias() = s * (lora.b.transpose() * (gy.transpose() * x));
    grad.b.noalias() = s * ((gy.transpose() * x) * lora.a.transpose());
    const Mat w_eff = w + s * lora.b * lora.a;
    return gy * w_eff;
}

// VJP of t = x / sqrt(mean(x^2) + eps) followed by the learned scale.
Mat rmsnorm_backward(const Mat & x, const Vec & scale, const Mat & gy) {
    const double d = static_cast<double>(x.cols());
    Mat gx(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const double n2 = x.row(i).squaredNorm() / d + kRmsNormEps;
        const double n = std::sqrt(n2);
        const Eigen::RowVectorXd gt = gy.row(i).cwiseProduct(scale.transpose());
        const double dot = gt.dot(x.row(i));
        gx.row(i) = gt / n - x.row(i) * (dot / (d * n2 * n));
    }
    return gx;
}

double sigmoid(double z) {
    return 1.0 / (1.0 + std::exp(-z));
}

// Config validation pins lora_targets to the canonical order, so the enum
// value doubles as the index.
LoraTensorPair & slot(std::vector<LoraTensorPair> & grads, Target t) {
    return grads[static_cast<size_t>(static_cast<int>(t))];
}

const LoraTensorPair & slot_for(const std::vector<LoraTensorPair> & layer, Target t) {
    return layer[static_cast<size_t>(static_cast<int>(t))];
}

} // namespace

double distance_r(const Mat & base_block, const Mat & spec_block) {
    if (base_block.rows() != spec_block.rows() || base_block.cols() != spec_block.cols())
        throw std::invalid_argument("distance_r: shape mismatch");
    return (spec_block - base_block).norm();
}

std::vector<LoraTensorPair> backward_r_layer_traced(const ModelBundle & bundle,
                                                    const LoraAdapter & adapter,
                                                    const TokenSequence & input,
                                                    const TraceSet & base_trace,
                                                    const TraceSet & spec_trace,
                                                    std::string_view modality, int layer) {
    const ModelConfig & config = bundle.config;
    if (layer < 1 || layer > config.n_layers)
        throw std::invalid_argument("backward_r_layer: layer out of range");
    const double s = config.lora_scale();
    const int hd = config.head_dim();
    const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));

    const std::vector<LoraTensorPair> & lora_layer =
        adapter.tensors.layers[static_cast<size_t>(layer - 1)];
    const LayerWeights & weights = bundle.base[static_cast<size_t>(layer - 1)];

    // Layer-l parameters reach the layer-l distance only through block l, and
    // the block input is the specialized model's own previous hidden state,
    // which they cannot influence. One block backward is the full gradient.
    const Mat & x = spec_trace.hidden[static_cast<size_t>(layer - 1)];
    const BlockActivations act = block_forward(config, weights, &lora_layer, x);

    const Span & span = input.span_for(modality);
    const Mat base_block =
        base_trace.hidden[static_cast<size_t>(layer)].middleRows(span.start, span.length);
    const Mat spec_block = act.y.middleRows(span.start, span.length);
    const double r = distance_r(base_block, spec_block);

    std::vector<LoraTensorPair> grads(config.lora_targets.size());
    for (size_t ti = 0; ti < config.lora_targets.size(); ++ti) {
        const Target t = config.lora_targets[ti];
        grads[ti].a = Mat::Zero(config.lora_rank, config.target_in_dim(t));
        grads[ti].b = Mat::Zero(config.target_out_dim(t), config.lora_rank);
    }
    // r = 0 only when the blocks coincide; take the zero subgradient there.
    if (r == 0.0)
        return grads;

    Mat gy = Mat::Zero(x.rows(), config.d_model);
    gy.middleRows(span.start, span.length) = (spec_block - base_block) / r;

    // MLP branch.
    Mat gh1 = gy;
    Mat g_act = linear_lora_backward(act.act, weights.mlp_down, slot_for(lora_layer, Target::mlp_down),
                                     s, gy, slot(grads, Target::mlp_down));
    Mat g_gate(g_act.rows(), g_act.cols());
    Mat g_up(g_act.rows(), g_act.cols());
    for (Eigen::Index i = 0; i < g_act.size(); ++i) {
        const double g = act.gate.data()[i];
        const double sg = sigmoid(g);
        const double silu = g * sg;
        const double dsilu = sg * (1.0 + g * (1.0 - sg));
        g_gate.data()[i] = g_act.data()[i] * act.up.data()[i] * dsilu;
        g_up.data()[i] = g_act.data()[i] * silu;
    }
    Mat g_n2 = linear_lora_backward(act.n2, weights.mlp_gate, slot_for(lora_layer, Target::mlp_gate),
                                    s, g_gate, slot(grads, Target::mlp_gate));
    g_n2.noalias() += linear_lora_backward(act.n2, weights.mlp_up,
                                           slot_for(lora_layer, Target::mlp_up), s, g_up,
                                           slot(grads, Target::mlp_up));
    gh1 += rmsnorm_backward(act.h1, weights.mlp_norm, g_n2);

    // Attention branch.
    Mat g_concat = linear_lora_backward(act.concat, weights.attn_o,
                                        slot_for(lora_layer, Target::attn_o), s, gh1,
                                        slot(grads, Target::attn_o));
    const int T = static_cast<int>(x.rows());
    Mat g_q = Mat::Zero(T, config.d_model);
    Mat g_k = Mat::Zero(T, config.d_model);
    Mat g_v = Mat::Zero(T, config.d_model);
    for (int h = 0; h < config.n_heads; ++h) {
        const auto vh = act.v.middleCols(h * hd, hd);
        const auto qh = act.q.middleCols(h * hd, hd);
        const auto kh = act.k.middleCols(h * hd, hd);
        const Mat & p = act.probs[static_cast<size_t>(h)];
        const auto g_oh = g_concat.middleCols(h * hd, hd);
        const Mat g_p = g_oh * vh.transpose();
        g_v.middleCols(h * hd, hd) = p.transpose() * g_oh;
        // Causal-softmax VJP; masked entries have p = 0 and drop out.
        Mat g_s(T, T);
        for (int i = 0; i < T; ++i) {
            const double row_dot = g_p.row(i).dot(p.row(i));
            g_s.row(i) = p.row(i).cwiseProduct(g_p.row(i) - Eigen::RowVectorXd::Constant(T, row_dot));
        }
        g_q.middleCols(h * hd, hd) = (g_s * kh) * inv_sqrt_hd;
        g_k.middleCols(h * hd, hd) = (g_s.transpose() * qh) * inv_sqrt_hd;
    }
    linear_lora_backward(act.n1, weights.attn_q, slot_for(lora_layer, Target::attn_q), s, g_q,
                         slot(grads, Target::attn_q));
    linear_lora_backward(act.n1, weights.attn_k, slot_for(lora_layer, Target::attn_k), s, g_k,
                         slot(grads, Target::attn_k));
    linear_lora_backward(act.n1, weights.attn_v, slot_for(lora_layer, Target::attn_v), s, g_v,
                         slot(grads, Target::attn_v));
    return grads;
}

std::vector<LoraTensorPair> backward_r_layer(const ModelBundle & bundle,
                                             std::string_view adapter_tag,
                                             const TokenSequence & input,
                                             std::string_view modality, int layer) {
    const LoraAdapter * adapter = bundle.find_adapter(adapter_tag);
    if (adapter == nullptr)
        throw std::invalid_argument("unknown adapter '" + std::string(adapter_tag) + "'");
    const TraceSet base_trace = forward_with_trace(bundle, std::nullopt, input);
    const TraceSet spec_trace = forward_with_trace(bundle, std::string(adapter_tag), input);
    return backward_r_layer_traced(bundle, *adapter, input, base_trace, spec_trace, modality,
                                   layer);
}

double eval_r(const ModelBundle & bundle, std::string_view adapter_tag,
              const TokenSequence & input, std::string_view modality, int layer) {
    const TraceSet base_trace = forward_with_trace(bundle, std::nullopt, input);
    const TraceSet spec_trace = forward_with_trace(bundle, std::string(adapter_tag), input);
    return distance_r(extract_modality(base_trace, input, modality, layer),
                      extract_modality(spec_trace, input, modality, layer));
}

double fd_grad(const ModelBundle & bundle, std::string_view adapter_tag,
               const TokenSequence & input, std::string_view modality, int layer,
               const ElementCoord & coord, double step) {
    if (!(step > 0.0))
        throw std::invalid_argument("fd_grad: step must be positive");
    ModelBundle probe = bundle;
    LoraAdapter * adapter = nullptr;
    for (auto & a : probe.adapters)
        if (a.modality_tag == adapter_tag)
            adapter = &a;
    if (adapter == nullptr)
        throw std::invalid_argument("unknown adapter '" + std::string(adapter_tag) + "'");
    if (layer < 1 || layer > static_cast<int>(adapter->tensors.layers.size()))
        throw std::invalid_argument("fd_grad: layer out of range");
    auto & pair = adapter->tensors.layers.at(static_cast<size_t>(layer - 1))
                      .at(static_cast<size_t>(coord.target_index));
    Mat & m = coord.in_b ? pair.b : pair.a;
    if (coord.row < 0 || coord.row >= m.rows() || coord.col < 0 || coord.col >= m.cols())
        throw std::invalid_argument("fd_grad: element coordinate out of range");
    double & elem = m(coord.row, coord.col);
    const double saved = elem;
    elem = saved + step;
    const double r_plus = eval_r(probe, adapter_tag, input, modality, layer);
    elem = saved - step;
    const double r_minus = eval_r(probe, adapter_tag, input, modality, layer);
    elem = saved;
    return (r_plus - r_minus) / (2.0 * step);
}

LoraTensors accumulate_sensitivity(const ModelBundle & bundle, std::string_view adapter_tag,
                                   const ProbeBatch & probes,
                                   const std::vector<std::string> & modalities) {
    const LoraAdapter * adapter = bundle.find_adapter(adapter_tag);
    if (adapter == nullptr)
        throw std::invalid_argument("unknown adapter '" + std::string(adapter_tag) + "'");
    const int k = probes.count();
    if (k < 1)
        throw std::invalid_argument("accumulate_sensitivity: empty probe batch");

    std::vector<TraceSet> base_traces(static_cast<size_t>(k));
    std::vector<TraceSet> spec_traces(static_cast<size_t>(k));
    parallel_for(k, [&](int i) {
        base_traces[static_cast<size_t>(i)] =
            forward_with_trace(bundle, std::nullopt, probes.probes[static_cast<size_t>(i)]);
        spec_traces[static_cast<size_t>(i)] = forward_with_trace(
            bundle, std::string(adapter_tag), probes.probes[static_cast<size_t>(i)]);
    });

    LoraTensors acc = LoraTensors::zeros(bundle.config);
    // Per-probe gradients land in disjoint slots in parallel; the reduction
    // below runs in the fixed (modality outer, probe inner) order so the sums
    // are bit-reproducible regardless of worker count.
    std::vector<std::vector<std::vector<LoraTensorPair>>> slots(static_cast<size_t>(k));
    for (const std::string & modality : modalities) {
        parallel_for(k, [&](int i) {
            auto & per_probe = slots[static_cast<size_t>(i)];
            per_probe.clear();
            per_probe.reserve(static_cast<size_t>(bundle.config.n_layers));
            for (int l = 1; l <= bundle.config.n_layers; ++l)
                per_probe.push_back(backward_r_layer_traced(
                    bundle, *adapter, probes.probes[static_cast<size_t>(i)],
                    base_traces[static_cast<size_t>(i)], spec_traces[static_cast<size_t>(i)],
                    modality, l));
        });
        for (int i = 0; i < k; ++i) {
            for (int l = 0; l < bundle.config.n_layers; ++l) {
                auto & layer_acc = acc.layers[static_cast<size_t>(l)];
                const auto & layer_grad = slots[static_cast<size_t>(i)][static_cast<size_t>(l)];
                for (size_t ti = 0; ti < layer_acc.size(); ++ti) {
                    layer_acc[ti].a += layer_grad[ti].a.cwiseAbs();
                    layer_acc[ti].b += layer_grad[ti].b.cwiseAbs();
                }
            }
        }
    }
    return acc;
}

} // namespace esmerge
