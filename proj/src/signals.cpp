// SPDX-License-Identifier: Apache-2.0

#include "esmerge/signals.hpp"

#include "esmerge/rng.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

namespace esmerge {

double wasserstein_1d(std::vector<double> x, std::vector<double> y, double p) {
    if (x.empty() || x.size() != y.size())
        throw std::invalid_argument("wasserstein_1d: need equal-size nonempty samples");
    if (!(p >= 1.0))
        throw std::invalid_argument("wasserstein_1d: p must be >= 1");
    std::sort(x.begin(), x.end());
    std::sort(y.begin(), y.end());
    double acc = 0.0;
    for (size_t i = 0; i < x.size(); ++i)
        acc += std::pow(std::abs(x[i] - y[i]), p);
    return std::pow(acc / static_cast<double>(x.size()), 1.0 / p);
}

double swd(const Mat & x, const Mat & y, int n_projections, double p, std::uint64_t seed) {
    if (x.cols() != y.cols())
        throw std::invalid_argument("swd: dimension mismatch");
    if (x.rows() != y.rows() || x.rows() < 1)
        throw std::invalid_argument("swd: need equal-size nonempty samples");
    if (n_projections < 1)
        throw std::invalid_argument("swd: n_projections must be >= 1");
    const int d = static_cast<int>(x.cols());
    Rng rng(seed);
    double acc = 0.0;
    std::vector<double> px(static_cast<size_t>(x.rows()));
    std::vector<double> py(static_cast<size_t>(y.rows()));
    for (int j = 0; j < n_projections; ++j) {
        // A zero-norm draw has probability zero; resample with a bound anyway
        // so the direction is always well defined.
        Vec u = rng.normal_vec(d);
        int retries = 16;
        while (u.norm() < 1e-12 && retries-- > 0)
            u = rng.normal_vec(d);
        if (u.norm() < 1e-12)
            throw std::runtime_error("swd: could not draw a nonzero direction");
        u /= u.norm();
        Eigen::Map<Vec>(px.data(), x.rows()) = x * u;
        Eigen::Map<Vec>(py.data(), y.rows()) = y * u;
        acc += std::pow(wasserstein_1d(px, py, p), p);
    }
    return std::pow(acc / static_cast<double>(n_projections), 1.0 / p);
}

std::vector<double> layer_deltas(const std::vector<double> & swd_by_layer) {
    if (swd_by_layer.size() < 2)
        throw std::invalid_argument("layer_deltas: need the layer-0 entry plus at least one layer");
    std::vector<double> d(swd_by_layer.size() - 1);
    for (size_t l = 1; l < swd_by_layer.size(); ++l)
        d[l - 1] = swd_by_layer[l] - swd_by_layer[l - 1];
    return d;
}

std::vector<double> zscore(const std::vector<double> & values) {
    if (values.empty())
        throw std::invalid_argument("zscore: empty input");
    const double n = static_cast<double>(values.size());
    double mean = 0.0;
    for (double v : values)
        mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : values)
        var += (v - mean) * (v - mean);
    const double sd = std::sqrt(var / n);
    std::vector<double> z(values.size(), 0.0);
    if (sd < 1e-12)
        return z;
    for (size_t i = 0; i < values.size(); ++i)
        z[i] = (values[i] - mean) / sd;
    return z;
}

std::vector<double> softmax_scaled(const std::vector<double> & x, double tau) {
    if (x.empty())
        throw std::invalid_argument("softmax_scaled: empty input");
    if (!(tau > 0.0))
        throw std::invalid_argument("softmax_scaled: tau must be positive");
    double m = x[0];
    for (double v : x)
        m = std::max(m, v);
    std::vector<double> out(x.size());
    double z = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        out[i] = std::exp((x[i] - m) / tau);
        z += out[i];
    }
    for (double & v : out)
        v /= z;
    return out;
}

void SwdTable::validate() const {
    if (model_tags.empty() || modality_tags.empty())
        throw std::invalid_argument("SwdTable: empty tag list");
    if (n_layers < 1)
        throw std::invalid_argument("SwdTable: n_layers must be >= 1");
    std::set<std::string> seen(model_tags.begin(), model_tags.end());
    if (seen.size() != model_tags.size())
        throw std::invalid_argument("SwdTable: duplicate model tag");
    if (values.size() != model_tags.size())
        throw std::invalid_argument("SwdTable: model dimension mismatch");
    for (const auto & per_model : values) {
        if (per_model.size() != modality_tags.size())
            throw std::invalid_argument("SwdTable: modality dimension mismatch");
        for (const auto & curve : per_model) {
            if (curve.size() != static_cast<size_t>(n_layers) + 1)
                throw std::invalid_argument("SwdTable: curve length must be n_layers + 1");
            for (double v : curve)
                if (!std::isfinite(v) || v < 0.0)
                    throw std::invalid_argument("SwdTable: distances must be finite and >= 0");
        }
    }
}

LayerCoefficients layer_coefficients(const SwdTable & table, double tau) {
    table.validate();
    const int n_models = static_cast<int>(table.model_tags.size());
    const int n_modalities = static_cast<int>(table.modality_tags.size());
    const int n_layers = table.n_layers;

    LayerCoefficients lc;
    lc.model_tags = table.model_tags;
    lc.modality_tags = table.modality_tags;
    lc.tau = tau;
    lc.d_hat.assign(static_cast<size_t>(n_models),
                    std::vector<std::vector<double>>(static_cast<size_t>(n_modalities)));
    lc.scores = Mat::Zero(n_models, n_layers);
    for (int i = 0; i < n_models; ++i) {
        for (int m = 0; m < n_modalities; ++m) {
            const auto deltas =
                layer_deltas(table.values[static_cast<size_t>(i)][static_cast<size_t>(m)]);
            auto z = zscore(deltas);
            for (int l = 0; l < n_layers; ++l)
                lc.scores(i, l) += z[static_cast<size_t>(l)];
            lc.d_hat[static_cast<size_t>(i)][static_cast<size_t>(m)] = std::move(z);
        }
    }
    lc.alpha = Mat(n_models, n_layers);
    std::vector<double> column(static_cast<size_t>(n_models));
    for (int l = 0; l < n_layers; ++l) {
        for (int i = 0; i < n_models; ++i)
            column[static_cast<size_t>(i)] = lc.scores(i, l);
        const auto sm = softmax_scaled(column, tau);
        for (int i = 0; i < n_models; ++i)
            lc.alpha(i, l) = sm[static_cast<size_t>(i)];
    }
    return lc;
}

ElementCoefficients element_coefficients(const std::vector<std::string> & model_tags,
                                         const std::vector<const LoraTensors *> & accumulators,
                                         double tau) {
    if (model_tags.empty() || model_tags.size() != accumulators.size())
        throw std::invalid_argument("element_coefficients: tag/accumulator count mismatch");
    const int n_models = static_cast<int>(model_tags.size());
    for (int i = 0; i < n_models; ++i) {
        if (accumulators[static_cast<size_t>(i)] == nullptr)
            throw std::invalid_argument("element_coefficients: null accumulator");
        if (!accumulators[0]->same_shape(*accumulators[static_cast<size_t>(i)]))
            throw std::invalid_argument("element_coefficients: accumulator shape mismatch");
    }
    const int n_layers = accumulators[0]->n_layers();

    // Per model and layer, z-score over the concatenation of every LoRA
    // element of that layer: targets in config order, A before B, row-major.
    std::vector<LoraTensors> zhat(static_cast<size_t>(n_models));
    for (int i = 0; i < n_models; ++i) {
        const LoraTensors & acc = *accumulators[static_cast<size_t>(i)];
        LoraTensors z = LoraTensors::zeros_like(acc);
        for (int l = 0; l < n_layers; ++l) {
            std::vector<double> flat;
            flat.reserve(static_cast<size_t>(acc.layer_numel(l)));
            for (const auto & pair : acc.layers[static_cast<size_t>(l)]) {
                flat.insert(flat.end(), pair.a.data(), pair.a.data() + pair.a.size());
                flat.insert(flat.end(), pair.b.data(), pair.b.data() + pair.b.size());
            }
            const auto zs = zscore(flat);
            size_t cursor = 0;
            for (size_t ti = 0; ti < z.layers[static_cast<size_t>(l)].size(); ++ti) {
                auto & pair = z.layers[static_cast<size_t>(l)][ti];
                for (Eigen::Index e = 0; e < pair.a.size(); ++e)
                    pair.a.data()[e] = zs[cursor++];
                for (Eigen::Index e = 0; e < pair.b.size(); ++e)
                    pair.b.data()[e] = zs[cursor++];
            }
        }
        zhat[static_cast<size_t>(i)] = std::move(z);
    }

    ElementCoefficients ec;
    ec.model_tags = model_tags;
    ec.tau = tau;
    ec.beta.assign(static_cast<size_t>(n_models), LoraTensors::zeros_like(*accumulators[0]));
    std::vector<double> column(static_cast<size_t>(n_models));
    for (int l = 0; l < n_layers; ++l) {
        for (size_t ti = 0; ti < accumulators[0]->layers[static_cast<size_t>(l)].size(); ++ti) {
            const auto numel_a = zhat[0].layers[static_cast<size_t>(l)][ti].a.size();
            const auto numel_b = zhat[0].layers[static_cast<size_t>(l)][ti].b.size();
            for (Eigen::Index e = 0; e < numel_a + numel_b; ++e) {
                const bool in_b = e >= numel_a;
                const Eigen::Index idx = in_b ? e - numel_a : e;
                for (int i = 0; i < n_models; ++i) {
                    const auto & pair = zhat[static_cast<size_t>(i)].layers[static_cast<size_t>(l)][ti];
                    column[static_cast<size_t>(i)] = in_b ? pair.b.data()[idx] : pair.a.data()[idx];
                }
                const auto sm = softmax_scaled(column, tau);
                for (int i = 0; i < n_models; ++i) {
                    auto & pair = ec.beta[static_cast<size_t>(i)].layers[static_cast<size_t>(l)][ti];
                    (in_b ? pair.b.data()[idx] : pair.a.data()[idx]) = sm[static_cast<size_t>(i)];
                }
            }
        }
    }
    return ec;
}

} // namespace esmerge
