// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "esmerge/tensor_file.hpp"
#include "esmerge/types.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace esmerge {

/// Generation-time request: tag plus the dimension of the modality's
/// designated subspace. Subspaces are carved out of one shared orthonormal
/// frame, so they are mutually disjoint by construction; requesting more
/// total dimensions than d_model is rejected.
struct ToyModalitySpec {
    std::string tag;
    int subspace_dim = 6;
};

/// Deterministic synthesis of the toy base model plus one specialized adapter
/// per requested modality. Every ΔW = scale * B * A is rank-limited by construction
/// and aligned with the modality's subspace, so tokens inside that subspace
/// see a larger representational shift than tokens outside it.
///
/// All produced tensors are rounded to f32 so that checkpoint roundtrips are
/// bitwise lossless.
ModelBundle gen_toy_bundle(std::uint64_t seed, const ModelConfig & config,
                           const std::vector<ToyModalitySpec> & modalities);

/// Bundle <-> container conversion.
TensorFile bundle_to_file(const ModelBundle & bundle, const json & provenance = json::object());
ModelBundle bundle_from_file(const TensorFile & file);

void write_bundle(const std::filesystem::path & path, const ModelBundle & bundle,
                  const json & provenance = json::object());
ModelBundle read_bundle(const std::filesystem::path & path);

/// Standalone adapter container (merged outputs).
TensorFile adapter_to_file(const LoraAdapter & adapter, const ModelConfig & config,
                           const json & provenance);
LoraAdapter adapter_from_file(const TensorFile & file);

json config_to_json(const ModelConfig & config);
ModelConfig config_from_json(const json & j);

/// Rounds every entry through f32. Applied at generation time so in-memory
/// values match what a checkpoint roundtrip returns.
double round_f32(double v);
void round_tensors_f32(Mat & m);

/// Split-precision persistence for tensors whose downstream tolerances are
/// tighter than f32: an entry is stored as two exactly f32-representable
/// parts whose sum recovers the value to ~2^-48 relative error. Subspace
/// bases and coefficient tensors use this; plain weights stay single f32.
void split_f32_parts(const Mat & m, Mat & hi, Mat & lo);

/// Rounds to the nearest split-representable value (hi + lo of its own
/// split). Splitting the result again returns the identical pair, which is
/// what makes generated-subspace roundtrips bitwise.
double split_f32_round(double v);

} // namespace esmerge
