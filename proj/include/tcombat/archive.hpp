#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tcombat/errors.hpp"

namespace tcombat {

/// Little-endian binary writer used for tensor files, posterior stores and
/// checkpoints. Doubles are written as their IEEE-754 bit patterns, so a
/// write/read round trip is bit-exact.
class BinaryWriter {
public:
    void bytes(const void* data, std::size_t n) {
        const auto* p = static_cast<const std::uint8_t*>(data);
        buf_.insert(buf_.end(), p, p + n);
    }
    void magic(std::string_view tag) { bytes(tag.data(), tag.size()); }
    void u8(std::uint8_t v) { buf_.push_back(v); }
    void u32(std::uint32_t v) {
        for (int b = 0; b < 4; ++b) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
    }
    void u64(std::uint64_t v) {
        for (int b = 0; b < 8; ++b) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
    }
    void f64(double v) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, sizeof bits);
        u64(bits);
    }
    void str(const std::string& s) {
        u64(s.size());
        bytes(s.data(), s.size());
    }
    void f64s(const std::vector<double>& v) {
        u64(v.size());
        for (double x : v) f64(x);
    }
    void u64s(const std::vector<std::uint64_t>& v) {
        u64(v.size());
        for (auto x : v) u64(x);
    }
    void u8s(const std::vector<std::uint8_t>& v) {
        u64(v.size());
        bytes(v.data(), v.size());
    }
    const std::vector<std::uint8_t>& buffer() const { return buf_; }
    std::vector<std::uint8_t> release() { return std::move(buf_); }

private:
    std::vector<std::uint8_t> buf_;
};

class BinaryReader {
public:
    explicit BinaryReader(const std::vector<std::uint8_t>& data) : data_(data) {}

    void bytes(void* out, std::size_t n) {
        need(n);
        std::memcpy(out, data_.data() + pos_, n);
        pos_ += n;
    }
    void expect_magic(std::string_view tag) {
        std::string got(tag.size(), '\0');
        bytes(got.data(), got.size());
        if (got != tag) throw DataError("bad file magic: expected " + std::string(tag));
    }
    std::uint8_t u8() {
        need(1);
        return data_[pos_++];
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(data_[pos_++]) << (8 * b);
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int b = 0; b < 8; ++b) v |= static_cast<std::uint64_t>(data_[pos_++]) << (8 * b);
        return v;
    }
    double f64() {
        const std::uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, sizeof v);
        return v;
    }
    std::string str() {
        const auto n = length();
        std::string s(n, '\0');
        bytes(s.data(), n);
        return s;
    }
    std::vector<double> f64s() {
        const auto n = length(8);
        std::vector<double> v(n);
        for (auto& x : v) x = f64();
        return v;
    }
    std::vector<std::uint64_t> u64s() {
        const auto n = length(8);
        std::vector<std::uint64_t> v(n);
        for (auto& x : v) x = u64();
        return v;
    }
    std::vector<std::uint8_t> u8s() {
        const auto n = length();
        std::vector<std::uint8_t> v(n);
        bytes(v.data(), n);
        return v;
    }
    bool done() const { return pos_ == data_.size(); }
    std::size_t remaining() const { return data_.size() - pos_; }

private:
    std::size_t length(std::size_t elem = 1) {
        const auto n = u64();
        if (n > remaining() / elem) throw DataError("truncated binary payload");
        return static_cast<std::size_t>(n);
    }
    void need(std::size_t n) const {
        if (n > data_.size() - pos_) throw DataError("truncated binary payload");
    }

    const std::vector<std::uint8_t>& data_;
    std::size_t pos_ = 0;
};

/// FNV-1a 64-bit hash.
inline std::uint64_t fnv1a64(std::span<const std::uint8_t> data,
                             std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (auto b : data) {
        h ^= b;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Writes to a sibling temporary file and renames it over `path`.
inline void write_file_atomic(const std::string& path, std::span<const std::uint8_t> data) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot write " + tmp);
        out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
        if (!out) throw DataError("write failed for " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw DataError("cannot rename " + tmp + ": " + ec.message());
}

}  // namespace tcombat
