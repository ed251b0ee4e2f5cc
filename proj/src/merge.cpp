// SPDX-License-Identifier: Apache-2.0

#include "esmerge/merge.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace esmerge {

namespace {

void check_adapters(const std::vector<const LoraAdapter *> & adapters) {
    if (adapters.empty())
        throw std::invalid_argument("merge: no adapters");
    for (const LoraAdapter * a : adapters) {
        if (a == nullptr)
            throw std::invalid_argument("merge: null adapter");
        if (!adapters.front()->tensors.same_shape(a->tensors))
            throw std::invalid_argument("merge: adapter shape mismatch");
    }
}

// Applies f(target_index, pair_of_model_0) elementwise over every tensor slot.
template <typename F>
LoraTensors map_shape(const LoraTensors & shape, F && fill) {
    LoraTensors out = LoraTensors::zeros_like(shape);
    for (int l = 0; l < shape.n_layers(); ++l)
        for (size_t ti = 0; ti < shape.layers[static_cast<size_t>(l)].size(); ++ti)
            fill(l, ti, out.layers[static_cast<size_t>(l)][ti]);
    return out;
}

} // namespace

FusedCoefficients integrate(const LayerCoefficients & alpha, const ElementCoefficients & beta) {
    if (alpha.model_tags != beta.model_tags)
        throw std::invalid_argument("integrate: model tag mismatch");
    if (beta.beta.empty())
        throw std::invalid_argument("integrate: empty element coefficients");
    const int n_models = static_cast<int>(beta.model_tags.size());
    const int n_layers = beta.beta.front().n_layers();
    if (alpha.alpha.cols() != n_layers || alpha.alpha.rows() != n_models)
        throw std::invalid_argument("integrate: layer coefficient shape mismatch");

    FusedCoefficients fc;
    fc.model_tags = beta.model_tags;
    fc.source = "fused";
    fc.lambda.assign(static_cast<size_t>(n_models), LoraTensors::zeros_like(beta.beta.front()));
    for (int l = 0; l < n_layers; ++l) {
        for (size_t ti = 0; ti < beta.beta.front().layers[static_cast<size_t>(l)].size(); ++ti) {
            const auto numel_a = beta.beta.front().layers[static_cast<size_t>(l)][ti].a.size();
            const auto numel_b = beta.beta.front().layers[static_cast<size_t>(l)][ti].b.size();
            for (Eigen::Index e = 0; e < numel_a + numel_b; ++e) {
                const bool in_b = e >= numel_a;
                const Eigen::Index idx = in_b ? e - numel_a : e;
                double denom = 0.0;
                for (int i = 0; i < n_models; ++i) {
                    const auto & bp = beta.beta[static_cast<size_t>(i)].layers[static_cast<size_t>(l)][ti];
                    const double b = in_b ? bp.b.data()[idx] : bp.a.data()[idx];
                    denom += alpha.alpha(i, l) * b;
                }
                for (int i = 0; i < n_models; ++i) {
                    const auto & bp = beta.beta[static_cast<size_t>(i)].layers[static_cast<size_t>(l)][ti];
                    auto & lp = fc.lambda[static_cast<size_t>(i)].layers[static_cast<size_t>(l)][ti];
                    const double b = in_b ? bp.b.data()[idx] : bp.a.data()[idx];
                    (in_b ? lp.b.data()[idx] : lp.a.data()[idx]) = alpha.alpha(i, l) * b / denom;
                }
            }
        }
    }
    return fc;
}

FusedCoefficients coeffs_from_layer_only(const LayerCoefficients & alpha,
                                         const LoraTensors & shape) {
    const int n_models = static_cast<int>(alpha.model_tags.size());
    if (alpha.alpha.cols() != shape.n_layers())
        throw std::invalid_argument("coeffs_from_layer_only: layer count mismatch");
    FusedCoefficients fc;
    fc.model_tags = alpha.model_tags;
    fc.source = "layer";
    fc.lambda.reserve(static_cast<size_t>(n_models));
    for (int i = 0; i < n_models; ++i) {
        fc.lambda.push_back(map_shape(shape, [&](int l, size_t, LoraTensorPair & pair) {
            pair.a.setConstant(alpha.alpha(i, l));
            pair.b.setConstant(alpha.alpha(i, l));
        }));
    }
    return fc;
}

FusedCoefficients coeffs_from_element_only(const ElementCoefficients & beta) {
    FusedCoefficients fc;
    fc.model_tags = beta.model_tags;
    fc.source = "element";
    fc.lambda = beta.beta;
    return fc;
}

LoraAdapter merge_adapters(const std::vector<const LoraAdapter *> & adapters,
                           const FusedCoefficients & lambda) {
    check_adapters(adapters);
    if (lambda.lambda.size() != adapters.size())
        throw std::invalid_argument("merge_adapters: coefficient count mismatch");
    for (size_t i = 0; i < adapters.size(); ++i)
        if (!lambda.lambda[i].same_shape(adapters[i]->tensors))
            throw std::invalid_argument("merge_adapters: coefficient shape mismatch");

    LoraAdapter merged;
    merged.modality_tag = "merged";
    merged.tensors = LoraTensors::zeros_like(adapters.front()->tensors);
    for (size_t i = 0; i < adapters.size(); ++i) {
        for (int l = 0; l < merged.tensors.n_layers(); ++l) {
            for (size_t ti = 0; ti < merged.tensors.layers[static_cast<size_t>(l)].size(); ++ti) {
                auto & out = merged.tensors.layers[static_cast<size_t>(l)][ti];
                const auto & w = lambda.lambda[i].layers[static_cast<size_t>(l)][ti];
                const auto & v = adapters[i]->tensors.layers[static_cast<size_t>(l)][ti];
                out.a += w.a.cwiseProduct(v.a);
                out.b += w.b.cwiseProduct(v.b);
            }
        }
    }
    return merged;
}

LoraAdapter avg_merge(const std::vector<const LoraAdapter *> & adapters) {
    check_adapters(adapters);
    const double w = 1.0 / static_cast<double>(adapters.size());
    LoraAdapter merged;
    merged.modality_tag = "merged";
    merged.tensors = LoraTensors::zeros_like(adapters.front()->tensors);
    for (const LoraAdapter * a : adapters) {
        for (int l = 0; l < merged.tensors.n_layers(); ++l) {
            for (size_t ti = 0; ti < merged.tensors.layers[static_cast<size_t>(l)].size(); ++ti) {
                auto & out = merged.tensors.layers[static_cast<size_t>(l)][ti];
                const auto & v = a->tensors.layers[static_cast<size_t>(l)][ti];
                out.a += w * v.a;
                out.b += w * v.b;
            }
        }
    }
    return merged;
}

namespace {

// Trim / elect / disjoint-mean on one flat tensor across models.
void ties_tensor(const std::vector<const Mat *> & inputs, double trim_fraction, Mat & out) {
    const Eigen::Index n = inputs.front()->size();
    const auto keep =
        static_cast<Eigen::Index>(std::ceil(trim_fraction * static_cast<double>(n)));
    // Per model, the kept flat indices; ties at the magnitude threshold go to
    // the lower flat index.
    std::vector<std::vector<char>> kept(inputs.size(), std::vector<char>(static_cast<size_t>(n), 0));
    std::vector<Eigen::Index> order(static_cast<size_t>(n));
    for (size_t m = 0; m < inputs.size(); ++m) {
        std::iota(order.begin(), order.end(), 0);
        const double * v = inputs[m]->data();
        std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
            const double ma = std::abs(v[a]);
            const double mb = std::abs(v[b]);
            if (ma != mb)
                return ma > mb;
            return a < b;
        });
        for (Eigen::Index i = 0; i < keep; ++i)
            kept[m][static_cast<size_t>(order[static_cast<size_t>(i)])] = 1;
    }
    for (Eigen::Index e = 0; e < n; ++e) {
        double sum = 0.0;
        for (size_t m = 0; m < inputs.size(); ++m)
            if (kept[m][static_cast<size_t>(e)])
                sum += inputs[m]->data()[e];
        const double sign = sum < 0.0 ? -1.0 : 1.0; // exact zero elects positive
        double acc = 0.0;
        int count = 0;
        for (size_t m = 0; m < inputs.size(); ++m) {
            if (!kept[m][static_cast<size_t>(e)])
                continue;
            const double val = inputs[m]->data()[e];
            if ((sign > 0.0 && val > 0.0) || (sign < 0.0 && val < 0.0)) {
                acc += val;
                ++count;
            }
        }
        out.data()[e] = count > 0 ? acc / static_cast<double>(count) : 0.0;
    }
}

} // namespace

LoraAdapter ties_merge(const std::vector<const LoraAdapter *> & adapters, double trim_fraction) {
    check_adapters(adapters);
    if (adapters.size() < 2)
        throw std::invalid_argument("ties_merge: needs at least two adapters");
    if (!(trim_fraction > 0.0) || trim_fraction > 1.0)
        throw std::invalid_argument("ties_merge: trim fraction must lie in (0, 1]");
    LoraAdapter merged;
    merged.modality_tag = "merged";
    merged.tensors = LoraTensors::zeros_like(adapters.front()->tensors);
    std::vector<const Mat *> inputs(adapters.size());
    for (int l = 0; l < merged.tensors.n_layers(); ++l) {
        for (size_t ti = 0; ti < merged.tensors.layers[static_cast<size_t>(l)].size(); ++ti) {
            auto & out = merged.tensors.layers[static_cast<size_t>(l)][ti];
            for (size_t m = 0; m < adapters.size(); ++m)
                inputs[m] = &adapters[m]->tensors.layers[static_cast<size_t>(l)][ti].a;
            ties_tensor(inputs, trim_fraction, out.a);
            for (size_t m = 0; m < adapters.size(); ++m)
                inputs[m] = &adapters[m]->tensors.layers[static_cast<size_t>(l)][ti].b;
            ties_tensor(inputs, trim_fraction, out.b);
        }
    }
    return merged;
}

} // namespace esmerge
