#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fedprompt/errors.hpp"

namespace fedprompt::io {

/// 8-byte file tag identifying a binary layout.
using Magic = std::array<char, 8>;

inline constexpr Magic kEncoderMagic{'F', 'P', 'E', 'N', 'C', 'W', '0', '1'};
inline constexpr Magic kPromptMagic{'F', 'P', 'P', 'R', 'M', 'T', '0', '1'};
inline constexpr Magic kDatasetMagic{'F', 'P', 'D', 'A', 'T', 'A', '0', '1'};

/// Little-endian writer; integers are u64, reals are IEEE-754 binary64.
class BinaryWriter {
public:
    explicit BinaryWriter(const std::filesystem::path& path) : out_(path, std::ios::binary | std::ios::trunc) {
        if (!out_) throw DataError("cannot open '" + path.string() + "' for writing");
    }

    void magic(const Magic& m) { out_.write(m.data(), static_cast<std::streamsize>(m.size())); }

    void u64(std::uint64_t v) {
        std::array<char, 8> b{};
        for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
        out_.write(b.data(), 8);
    }

    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

    void f64s(std::span<const double> values) {
        for (double v : values) f64(v);
    }

    void finish() {
        out_.flush();
        if (!out_) throw DataError("write failed");
    }

private:
    std::ofstream out_;
};

class BinaryReader {
public:
    explicit BinaryReader(const std::filesystem::path& path) : in_(path, std::ios::binary), path_(path.string()) {
        if (!in_) throw DataError("cannot open '" + path_ + "'");
    }

    void expect_magic(const Magic& m) {
        Magic got{};
        in_.read(got.data(), static_cast<std::streamsize>(got.size()));
        if (!in_ || got != m) {
            throw DataError("'" + path_ + "' is not a " + std::string(m.data(), m.size()) + " file");
        }
    }

    std::uint64_t u64() {
        std::array<unsigned char, 8> b{};
        in_.read(reinterpret_cast<char*>(b.data()), 8);
        if (!in_) throw DataError("'" + path_ + "' is truncated");
        std::uint64_t v = 0;
        for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
        return v;
    }

    double f64() { return std::bit_cast<double>(u64()); }

    std::vector<double> f64s(std::size_t n) {
        std::vector<double> v(n);
        for (double& x : v) x = f64();
        return v;
    }

    void expect_end() {
        in_.peek();
        if (!in_.eof()) throw DataError("'" + path_ + "' has trailing bytes");
    }

private:
    std::ifstream in_;
    std::string path_;
};

}  // namespace fedprompt::io
