// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "esmerge/types.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace esmerge {

/// Exact 1D p-Wasserstein between equal-size samples: sort both sides and
/// pair order statistics; ((1/K) sum |x_(i) - y_(i)|^p)^(1/p).
double wasserstein_1d(std::vector<double> x, std::vector<double> y, double p);

/// Sliced Wasserstein distance: L seeded unit directions (normalized
/// Gaussians), 1D distances along each, combined as
/// ((1/L) sum_j W_p(X u_j, Y u_j)^p)^(1/p).
double swd(const Mat & x, const Mat & y, int n_projections, double p, std::uint64_t seed);

/// d[l] = swd[l] - swd[l-1] for l = 1..n_layers; input carries the layer-0
/// distance at index 0.
std::vector<double> layer_deltas(const std::vector<double> & swd_by_layer);

/// (v - mean) / population std; all zeros when the std is below 1e-12.
std::vector<double> zscore(const std::vector<double> & values);

/// Per (model, modality) layer-wise distance curves, each of length
/// n_layers + 1 with the measured layer-0 distance first.
struct SwdTable {
    std::vector<std::string> model_tags;
    std::vector<std::string> modality_tags;
    int n_layers = 0;
    std::vector<std::vector<std::vector<double>>> values; // [model][modality][0..n_layers]

    void validate() const;
};

struct LayerCoefficients {
    std::vector<std::string> model_tags;
    std::vector<std::string> modality_tags;
    double tau = 0.5;
    Mat alpha;  // (n_models x n_layers); each column sums to 1
    Mat scores; // aggregated z-scored deltas s[model][layer]
    std::vector<std::vector<std::vector<double>>> d_hat; // [model][modality][layer]
};

/// Full layer-wise chain: deltas per (model, modality), z-score over layers,
/// sum over modalities, softmax over models per layer at temperature tau.
LayerCoefficients layer_coefficients(const SwdTable & table, double tau);

struct ElementCoefficients {
    std::vector<std::string> model_tags;
    double tau = 0.5;
    std::vector<LoraTensors> beta; // per model, adapter-shaped; simplex per element
};

/// Element-wise chain: per model and layer, z-score over the concatenation of
/// every LoRA element of that layer (targets in config order, A before B,
/// row-major), then softmax over models per element coordinate.
ElementCoefficients element_coefficients(const std::vector<std::string> & model_tags,
                                         const std::vector<const LoraTensors *> & accumulators,
                                         double tau);

/// Softmax of x/tau with max subtraction.
std::vector<double> softmax_scaled(const std::vector<double> & x, double tau);

} // namespace esmerge
