// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "esmerge/checkpoint.hpp"
#include "esmerge/merge.hpp"
#include "esmerge/probe.hpp"
#include "esmerge/signals.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace esmerge {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;        // usage or input error
inline constexpr int kExitVerification = 2; // a requested verification failed

/// Everything a command needs; every field has a default and every default is
/// echoed into the output provenance blocks.
struct RunConfig {
    std::uint64_t seed = 0;
    ModelConfig model;
    int n_models = 3;        // modality-specialized adapters to generate
    int subspace_dim = 6;    // per-modality designated dimensions
    int k = 32;              // probes per batch
    int tokens_per_block = 8;
    int prefix_tokens = 2;
    int projections = 256;   // SWD slice count (1024 is the full-scale setting)
    double p = 2.0;          // SWD distance order
    double tau = 0.5;        // softmax temperature, both granularities
    std::string mode = "fused";  // layer | element | fused
    std::string method = "es";   // es | es-layer | es-element | avg | ties
    double trim = 0.2;           // TIES keep fraction
    int check_grads = 0;         // FD spot-check sample count, 0 = off

    std::filesystem::path out;         // output directory or file
    std::filesystem::path bundle_path; // input bundle
    std::filesystem::path coeffs_dir;  // directory holding coefficient files
};

// Fixed artifact names inside an output directory.
inline constexpr const char * kBundleFile = "bundle.esmg";
inline constexpr const char * kLayerCoeffsFile = "layer_coeffs.csv";
inline constexpr const char * kElementCoeffsFile = "element_coeffs.esmg";
inline constexpr const char * kFusedCoeffsFile = "fused_coeffs.esmg";
inline constexpr const char * kHeatmapFile = "heatmap.csv";

/// Writes the toy bundle (base weights plus one adapter per modality) under
/// out/bundle.esmg and prints its digest.
int cmd_gen_toy(const RunConfig & rc);

/// Runs probes, traces, SWD, and gradient accumulation; writes the layer
/// coefficient CSV and/or the element (and fused) coefficient containers per
/// `mode`. With check_grads > 0, spot-checks analytic gradients against
/// central differences and fails with exit 2 above max relative error 1e-4.
int cmd_coeffs(const RunConfig & rc);

/// Merges the bundle's adapters by `method` and writes the merged adapter
/// container to `out`.
int cmd_merge(const RunConfig & rc);

/// Long-format CSV (model, layer, target, matrix, row, col, value) of an
/// element-granularity coefficient container.
int cmd_export_heatmap(const RunConfig & rc);

// Shared helpers (also used by the test suites).

/// 17-significant-digit rendering used for every CSV value, so byte
/// determinism of text outputs is meaningful.
std::string format_g17(double v);

/// Probe traces for the whole batch: base model when tag is empty, otherwise
/// the tagged adapter. Parallel over probes, deterministic.
std::vector<TraceSet> trace_batch(const ModelBundle & bundle, const std::string & tag,
                                  const ProbeBatch & batch);

/// SWD curves for every (adapter, modality) cell; layer curves share one
/// seeded direction set per layer (seed offset derived from the layer index).
SwdTable compute_swd_table(const ModelBundle & bundle, const ProbeBatch & batch,
                           int n_projections, double p, std::uint64_t seed);

std::string layer_coeffs_csv(const LayerCoefficients & lc, const json & provenance);
LayerCoefficients layer_coeffs_from_csv(const std::string & text);

TensorFile element_coeffs_to_file(const ElementCoefficients & ec, const ModelConfig & config,
                                  const json & provenance);
ElementCoefficients element_coeffs_from_file(const TensorFile & file);

TensorFile fused_coeffs_to_file(const FusedCoefficients & fc, const ModelConfig & config,
                                const json & provenance);
FusedCoefficients fused_coeffs_from_file(const TensorFile & file);

struct GradCheckReport {
    double max_rel_err = 0.0;
    int checked = 0;
};

/// Seeded spot check of analytic gradients against central finite differences
/// over randomly drawn live coordinates (distance above the kink floor).
/// Throws if too few live coordinates can be found.
GradCheckReport grad_spot_check(const ModelBundle & bundle, const ProbeBatch & batch,
                                const std::vector<std::string> & modalities, int samples,
                                std::uint64_t seed);

} // namespace esmerge
