// SPDX-License-Identifier: Apache-2.0

#include "esmerge/tensor_file.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace esmerge {

namespace {

constexpr char kMagic[4] = {'E', 'S', 'M', 'G'};
constexpr std::uint32_t kVersion = 1;

void append_u32le(std::string & out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i)
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void append_u64le(std::string & out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i)
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t read_u32le(const unsigned char * p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint64_t read_u64le(const unsigned char * p) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i)
        v = (v << 8) | p[i];
    return v;
}

// f32 little-endian bit pattern appended byte-wise, so output does not depend
// on host endianness.
void append_f32le(std::string & out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, sizeof(bits));
    append_u32le(out, bits);
}

float read_f32le(const unsigned char * p) {
    const std::uint32_t bits = read_u32le(p);
    float v;
    std::memcpy(&v, &bits, sizeof(v));
    return v;
}

std::string read_all_bytes(const std::filesystem::path & path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw std::runtime_error("cannot open file: " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return bytes;
}

} // namespace

std::int64_t NamedTensor::numel() const {
    std::int64_t n = 1;
    for (std::int64_t d : shape)
        n *= d;
    return n;
}

const NamedTensor * TensorFile::find(std::string_view name) const {
    for (const auto & t : tensors)
        if (t.name == name)
            return &t;
    return nullptr;
}

const NamedTensor & TensorFile::require(std::string_view name) const {
    const NamedTensor * t = find(name);
    if (!t)
        throw std::runtime_error("missing tensor: " + std::string(name));
    return *t;
}

void write_tensor_file(const std::filesystem::path & path, const TensorFile & file) {
    // Validate before touching the filesystem.
    for (const auto & t : file.tensors) {
        if (t.numel() != static_cast<std::int64_t>(t.values.size()))
            throw std::runtime_error("tensor '" + t.name + "': shape does not match value count");
        for (double v : t.values) {
            if (!std::isfinite(v) || !std::isfinite(static_cast<float>(v)))
                throw std::runtime_error("tensor '" + t.name + "' contains a non-finite value");
        }
    }

    json meta = file.extra.is_object() ? file.extra : json::object();
    json tensor_list = json::array();
    std::uint64_t offset = 0;
    for (const auto & t : file.tensors) {
        json entry;
        entry["name"] = t.name;
        entry["shape"] = t.shape;
        entry["dtype"] = "f32";
        entry["byte_offset"] = offset;
        tensor_list.push_back(entry);
        offset += static_cast<std::uint64_t>(t.numel()) * 4;
    }
    meta["tensors"] = tensor_list;
    const std::string meta_bytes = meta.dump(); // keys sorted, canonical

    std::string out;
    out.reserve(16 + meta_bytes.size() + offset);
    out.append(kMagic, 4);
    append_u32le(out, kVersion);
    append_u64le(out, meta_bytes.size());
    out += meta_bytes;
    for (const auto & t : file.tensors)
        for (double v : t.values)
            append_f32le(out, static_cast<float>(v));

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os)
        throw std::runtime_error("cannot open for writing: " + path.string());
    os.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!os)
        throw std::runtime_error("write failed: " + path.string());
}

TensorFile read_tensor_file(const std::filesystem::path & path) {
    const std::string bytes = read_all_bytes(path);
    const auto * p = reinterpret_cast<const unsigned char *>(bytes.data());
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw std::runtime_error("bad magic: " + path.string() + " is not a container file");
    const std::uint32_t version = read_u32le(p + 4);
    if (version != kVersion)
        throw std::runtime_error("unsupported container version " + std::to_string(version));
    const std::uint64_t meta_len = read_u64le(p + 8);
    if (16 + meta_len > bytes.size())
        throw std::runtime_error("truncated container: metadata extends past end of file");

    json meta;
    try {
        meta = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(meta_len));
    } catch (const json::exception & e) {
        throw std::runtime_error(std::string("bad container metadata: ") + e.what());
    }
    if (!meta.is_object() || !meta.contains("tensors") || !meta["tensors"].is_array())
        throw std::runtime_error("bad container metadata: missing tensor list");

    TensorFile out;
    const std::size_t payload_begin = 16 + static_cast<std::size_t>(meta_len);
    const std::size_t payload_size = bytes.size() - payload_begin;

    std::uint64_t expected_offset = 0;
    for (const auto & entry : meta["tensors"]) {
        NamedTensor t;
        t.name = entry.at("name").get<std::string>();
        t.shape = entry.at("shape").get<std::vector<std::int64_t>>();
        const std::string dtype = entry.at("dtype").get<std::string>();
        if (dtype != "f32")
            throw std::runtime_error("tensor '" + t.name + "': unsupported dtype " + dtype);
        const std::uint64_t byte_offset = entry.at("byte_offset").get<std::uint64_t>();
        if (byte_offset != expected_offset)
            throw std::runtime_error("tensor '" + t.name + "': byte_offset mismatch");
        const std::uint64_t nbytes = static_cast<std::uint64_t>(t.numel()) * 4;
        if (byte_offset + nbytes > payload_size)
            throw std::runtime_error("truncated container: payload shorter than tensor '" + t.name +
                                     "' requires");
        t.values.resize(static_cast<std::size_t>(t.numel()));
        const unsigned char * src = p + payload_begin + byte_offset;
        for (std::size_t i = 0; i < t.values.size(); ++i)
            t.values[i] = static_cast<double>(read_f32le(src + 4 * i));
        expected_offset = byte_offset + nbytes;
        out.tensors.push_back(std::move(t));
    }
    if (expected_offset != payload_size)
        throw std::runtime_error("container payload size mismatch: shapes claim " +
                                 std::to_string(expected_offset) + " bytes, file holds " +
                                 std::to_string(payload_size));

    meta.erase("tensors");
    out.extra = std::move(meta);
    return out;
}

std::string file_digest(const std::filesystem::path & path) {
    const std::string bytes = read_all_bytes(path);
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

} // namespace esmerge
