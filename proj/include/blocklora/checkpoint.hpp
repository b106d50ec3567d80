#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "blocklora/adapter.hpp"
#include "blocklora/errors.hpp"

namespace blocklora {

// Adapter checkpoint wire format, fixed byte for byte so checkpoints are
// interchangeable across builds:
//   magic   "BLRA"                     4 bytes
//   version u32 little-endian          (currently 1)
//   kind    u8   0 = vanilla low-rank, 1 = block, 2 = block with frozen down-projection
//   prec    u8   0 = 64-bit, 1 = 32-bit payload entries
//   k,d,r,n u32 little-endian each
//   payload row-major entries in the declared precision, no padding:
//     kind 1/2: shared down (k * r/n), then up blocks 1..n (each (r/n) * d)
//     kind 0:   down (k * r), then up (r * d)
// Any bytes after the payload are an error.

inline constexpr std::array<char, 4> kCheckpointMagic = {'B', 'L', 'R', 'A'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class CheckpointKind : std::uint8_t {
    vanilla = 0,
    block = 1,
    block_frozen_down = 2,
};

namespace detail {

inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
    out.push_back(static_cast<unsigned char>(v & 0xFF));
    out.push_back(static_cast<unsigned char>((v >> 8) & 0xFF));
    out.push_back(static_cast<unsigned char>((v >> 16) & 0xFF));
    out.push_back(static_cast<unsigned char>((v >> 24) & 0xFF));
}

inline std::uint32_t get_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

template <typename T>
void put_entry(std::vector<unsigned char>& out, T value) {
    using Bits = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
    auto bits = std::bit_cast<Bits>(value);
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        out.push_back(static_cast<unsigned char>((bits >> (8 * i)) & 0xFF));
    }
}

template <typename T>
T get_entry(const unsigned char* p) {
    using Bits = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
    Bits bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        bits |= static_cast<Bits>(p[i]) << (8 * i);
    }
    return std::bit_cast<T>(bits);
}

template <typename T>
void put_matrix(std::vector<unsigned char>& out, const Matrix<T>& m) {
    for (std::size_t i = 0; i < m.size(); ++i) put_entry(out, m.data()[i]);
}

template <typename T>
constexpr std::uint8_t precision_tag() {
    return sizeof(T) == 8 ? 0 : 1;
}

}  // namespace detail

/// Serializes an adapter to the wire format in memory.
template <typename T>
std::vector<unsigned char> encode_adapter(const AnyAdapter<T>& ad) {
    std::vector<unsigned char> out;
    out.insert(out.end(), kCheckpointMagic.begin(), kCheckpointMagic.end());
    detail::put_u32(out, kCheckpointVersion);

    if (const auto* lora = std::get_if<LoraAdapter<T>>(&ad)) {
        // A frozen-down vanilla adapter is stored as a single-block frozen
        // checkpoint; the payload layout coincides for n = 1.
        const auto kind = lora->freeze_down() ? CheckpointKind::block_frozen_down : CheckpointKind::vanilla;
        out.push_back(static_cast<unsigned char>(kind));
        out.push_back(detail::precision_tag<T>());
        detail::put_u32(out, static_cast<std::uint32_t>(lora->in_dim()));
        detail::put_u32(out, static_cast<std::uint32_t>(lora->out_dim()));
        detail::put_u32(out, static_cast<std::uint32_t>(lora->rank()));
        detail::put_u32(out, 1);
        detail::put_matrix(out, lora->down());
        detail::put_matrix(out, lora->up());
        return out;
    }

    const auto& block = std::get<BlockLoraAdapter<T>>(ad);
    out.push_back(static_cast<unsigned char>(block.freeze_down() ? CheckpointKind::block_frozen_down
                                                                 : CheckpointKind::block));
    out.push_back(detail::precision_tag<T>());
    detail::put_u32(out, static_cast<std::uint32_t>(block.in_dim()));
    detail::put_u32(out, static_cast<std::uint32_t>(block.out_dim()));
    detail::put_u32(out, static_cast<std::uint32_t>(block.rank()));
    detail::put_u32(out, static_cast<std::uint32_t>(block.blocks()));
    detail::put_matrix(out, block.shared_down());
    for (const auto& blk : block.up_blocks()) detail::put_matrix(out, blk);
    return out;
}

/// Parses the wire format. Header fields are validated before the payload is
/// touched; a payload shorter than the header promises is treated as a
/// truncated file, anything longer as trailing garbage.
template <typename T>
AnyAdapter<T> decode_adapter(const std::vector<unsigned char>& bytes) {
    constexpr std::size_t kHeaderSize = 4 + 4 + 1 + 1 + 16;
    if (bytes.size() < kHeaderSize) throw IoError("truncated checkpoint: incomplete header");

    if (std::memcmp(bytes.data(), kCheckpointMagic.data(), 4) != 0) {
        throw FormatError("bad checkpoint magic (expected \"BLRA\")");
    }
    const std::uint32_t version = detail::get_u32(bytes.data() + 4);
    if (version != kCheckpointVersion) {
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    }
    const std::uint8_t kind = bytes[8];
    if (kind > 2) throw FormatError("unknown checkpoint kind " + std::to_string(kind));
    const std::uint8_t precision = bytes[9];
    if (precision > 1) throw FormatError("unknown checkpoint precision tag " + std::to_string(precision));
    if (precision != detail::precision_tag<T>()) {
        throw FormatError("checkpoint precision tag " + std::to_string(precision) +
                          " does not match the requested in-memory precision");
    }
    const std::uint32_t k = detail::get_u32(bytes.data() + 10);
    const std::uint32_t d = detail::get_u32(bytes.data() + 14);
    const std::uint32_t r = detail::get_u32(bytes.data() + 18);
    const std::uint32_t n = detail::get_u32(bytes.data() + 22);
    if (k == 0 || d == 0 || r == 0 || n == 0) throw FormatError("checkpoint header has a zero dimension");
    if (r % n != 0) {
        throw FormatError("checkpoint header invalid: block count " + std::to_string(n) + " does not divide rank " +
                          std::to_string(r));
    }

    const std::size_t entries = (kind == 0)
                                    ? static_cast<std::size_t>(k) * r + static_cast<std::size_t>(r) * d
                                    : static_cast<std::size_t>(k) * (r / n) +
                                          static_cast<std::size_t>(n) * (r / n) * d;
    const std::size_t expected = kHeaderSize + entries * sizeof(T);
    if (bytes.size() < expected) {
        throw IoError("truncated checkpoint: payload has " + std::to_string(bytes.size() - kHeaderSize) +
                      " bytes, header declares " + std::to_string(entries) + " entries");
    }
    if (bytes.size() > expected) {
        throw FormatError("trailing bytes after checkpoint payload (" + std::to_string(bytes.size() - expected) +
                          " extra)");
    }

    const unsigned char* p = bytes.data() + kHeaderSize;
    auto read_matrix = [&p](std::size_t rows, std::size_t cols) {
        Matrix<T> m(rows, cols);
        for (std::size_t i = 0; i < m.size(); ++i) {
            m.data()[i] = detail::get_entry<T>(p);
            p += sizeof(T);
        }
        return m;
    };

    if (kind == 0) {
        Matrix<T> down = read_matrix(k, r);
        Matrix<T> up = read_matrix(r, d);
        return LoraAdapter<T>(std::move(down), std::move(up));
    }
    const std::size_t block_rank = r / n;
    Matrix<T> shared_down = read_matrix(k, block_rank);
    std::vector<Matrix<T>> up_blocks;
    up_blocks.reserve(n);
    for (std::uint32_t i = 0; i < n; ++i) up_blocks.push_back(read_matrix(block_rank, d));
    return BlockLoraAdapter<T>(std::move(shared_down), std::move(up_blocks), T(1), kind == 2);
}

template <typename T>
void save_adapter(const AnyAdapter<T>& ad, const std::string& path) {
    const auto bytes = encode_adapter(ad);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to '" + path + "'");
}

template <typename T>
AnyAdapter<T> load_adapter(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "' for reading");
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("read failure on '" + path + "'");
    return decode_adapter<T>(bytes);
}

}  // namespace blocklora
