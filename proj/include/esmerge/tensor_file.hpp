// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "esmerge/types.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace esmerge {

using json = nlohmann::json;

// Container layout, bit-exact:
//   bytes 0-3   magic "ESMG"
//   bytes 4-7   version = 1, little-endian u32
//   bytes 8-15  J = metadata length, little-endian u64
//   J bytes     UTF-8 JSON: top-level keys plus "tensors", an ordered array of
//               {name, shape, dtype:"f32", byte_offset}
//   rest        tensor payloads, row-major little-endian f32, packed in
//               byte_offset order with no padding. Offsets count from the
//               first payload byte.

struct NamedTensor {
    std::string name;
    std::vector<std::int64_t> shape;
    std::vector<double> values; // row-major; rounded to f32 on write

    std::int64_t numel() const;
};

struct TensorFile {
    json extra = json::object(); // top-level metadata keys other than "tensors"
    std::vector<NamedTensor> tensors;

    const NamedTensor * find(std::string_view name) const;
    const NamedTensor & require(std::string_view name) const; // throws if absent
};

/// Writes the container. Refuses non-finite values with a diagnostic naming
/// the offending tensor. Byte-identical output for identical input.
void write_tensor_file(const std::filesystem::path & path, const TensorFile & file);

/// Reads and validates a container: magic, version, metadata bounds, and
/// shape-vs-payload byte accounting.
TensorFile read_tensor_file(const std::filesystem::path & path);

/// FNV-1a 64-bit digest of a file's bytes, as a fixed-width hex string.
std::string file_digest(const std::filesystem::path & path);

} // namespace esmerge
