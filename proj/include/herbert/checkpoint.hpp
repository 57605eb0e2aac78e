#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include "herbert/error.hpp"
#include "herbert/tensor.hpp"

// Binary tensor container shared by model checkpoints and packed batches:
//
//   "HBRT" | u32 version=1 | u32 tensor count
//   per tensor: u32 name length | name bytes | u32 rank | u32 dims[rank] |
//               f32 data, row-major
//
// All integers and floats little-endian. Tensors are written in name order.

namespace herbert {

inline constexpr std::array<char, 4> kCheckpointMagic{'H', 'B', 'R', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <class U>
void write_le(std::ostream& out, U value) {
    static_assert(sizeof(U) == 4);
    auto bits = std::bit_cast<std::uint32_t>(value);
    const std::array<char, 4> bytes{static_cast<char>(bits & 0xFF), static_cast<char>((bits >> 8) & 0xFF),
                                    static_cast<char>((bits >> 16) & 0xFF), static_cast<char>((bits >> 24) & 0xFF)};
    out.write(bytes.data(), 4);
}

template <class U>
U read_le(std::istream& in, const std::string& what) {
    static_assert(sizeof(U) == 4);
    std::array<unsigned char, 4> bytes{};
    if (!in.read(reinterpret_cast<char*>(bytes.data()), 4)) {
        throw FormatError("checkpoint truncated while reading " + what);
    }
    const std::uint32_t bits = static_cast<std::uint32_t>(bytes[0]) | (static_cast<std::uint32_t>(bytes[1]) << 8) |
                               (static_cast<std::uint32_t>(bytes[2]) << 16) |
                               (static_cast<std::uint32_t>(bytes[3]) << 24);
    return std::bit_cast<U>(bits);
}

} // namespace detail

inline void write_checkpoint(std::ostream& out, const TensorMap<float>& tensors) {
    out.write(kCheckpointMagic.data(), 4);
    detail::write_le(out, kCheckpointVersion);
    detail::write_le(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        detail::write_le(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::write_le(out, static_cast<std::uint32_t>(t.shape.size()));
        for (const std::size_t d : t.shape) {
            detail::write_le(out, static_cast<std::uint32_t>(d));
        }
        for (const float x : t.data) {
            detail::write_le(out, x);
        }
    }
}

inline TensorMap<float> read_checkpoint(std::istream& in) {
    std::array<char, 4> magic{};
    if (!in.read(magic.data(), 4) || magic != kCheckpointMagic) {
        throw FormatError("not an HBRT checkpoint (bad magic)");
    }
    const auto version = detail::read_le<std::uint32_t>(in, "version");
    if (version != kCheckpointVersion) {
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    }
    const auto count = detail::read_le<std::uint32_t>(in, "tensor count");
    TensorMap<float> tensors;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = detail::read_le<std::uint32_t>(in, "name length");
        std::string name(name_len, '\0');
        if (!in.read(name.data(), name_len)) {
            throw FormatError("checkpoint truncated in tensor name");
        }
        const auto rank = detail::read_le<std::uint32_t>(in, "rank of " + name);
        Shape shape(rank);
        for (auto& d : shape) {
            d = detail::read_le<std::uint32_t>(in, "dims of " + name);
        }
        Tensor<float> t(shape);
        for (auto& x : t.data) {
            x = detail::read_le<float>(in, "data of " + name);
        }
        if (!tensors.emplace(name, std::move(t)).second) {
            throw FormatError("duplicate tensor name in checkpoint: " + name);
        }
    }
    return tensors;
}

inline void save_checkpoint(const std::filesystem::path& path, const TensorMap<float>& tensors) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot write checkpoint " + path.string());
    }
    write_checkpoint(out, tensors);
    if (!out) {
        throw IoError("failed writing checkpoint " + path.string());
    }
}

inline TensorMap<float> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open checkpoint " + path.string());
    }
    return read_checkpoint(in);
}

} // namespace herbert
