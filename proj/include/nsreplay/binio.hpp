#pragma once

#include "nsreplay/common.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace nsreplay::binio {

// Shared container layout used by every on-disk artifact:
//   magic "NSRC" | u32 format version | u32 payload kind | payload bytes.
// All scalars are little-endian; floating point is IEEE-754 binary64.

inline constexpr std::uint32_t kFormatVersion = 1;

enum class PayloadKind : std::uint32_t {
    prototype_store = 1,
    covariance = 2,
    projection = 3,
    model = 4,
    dataset = 5,
};

class Writer {
public:
    void u8(std::uint8_t v) { bytes_.push_back(static_cast<char>(v)); }

    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }

    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }

    void i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }

    void f64(double v) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, sizeof bits);
        u64(bits);
    }

    void str(const std::string& s) {
        u64(s.size());
        bytes_.insert(bytes_.end(), s.begin(), s.end());
    }

    void vec(const Vector& v) {
        u64(static_cast<std::uint64_t>(v.size()));
        for (Index i = 0; i < v.size(); ++i) f64(v[i]);
    }

    /// Row-major matrix payload: rows, cols, then values.
    void mat(const Matrix& m) {
        u64(static_cast<std::uint64_t>(m.rows()));
        u64(static_cast<std::uint64_t>(m.cols()));
        for (Index r = 0; r < m.rows(); ++r)
            for (Index c = 0; c < m.cols(); ++c) f64(m(r, c));
    }

    const std::vector<char>& bytes() const { return bytes_; }

private:
    std::vector<char> bytes_;
};

class Reader {
public:
    explicit Reader(std::vector<char> bytes) : bytes_(std::move(bytes)) {}

    std::uint8_t u8() {
        need(1, "u8");
        return static_cast<std::uint8_t>(bytes_[pos_++]);
    }

    std::uint32_t u32() {
        need(4, "u32");
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }

    std::uint64_t u64() {
        need(8, "u64");
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        pos_ += 8;
        return v;
    }

    std::int64_t i64() { return static_cast<std::int64_t>(u64()); }

    double f64() {
        const std::uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, sizeof v);
        return v;
    }

    std::string str() {
        const std::uint64_t n = checked_count(u64(), 1, "string");
        std::string s(bytes_.data() + pos_, n);
        pos_ += n;
        return s;
    }

    Vector vec() {
        const std::uint64_t n = checked_count(u64(), 8, "vector");
        Vector v(static_cast<Index>(n));
        for (std::uint64_t i = 0; i < n; ++i) v[static_cast<Index>(i)] = f64();
        return v;
    }

    Matrix mat() {
        const std::uint64_t rows = u64();
        const std::uint64_t cols = u64();
        if (cols != 0 && rows > remaining() / 8 / cols)
            fail("matrix larger than remaining input");
        Matrix m(static_cast<Index>(rows), static_cast<Index>(cols));
        for (std::uint64_t r = 0; r < rows; ++r)
            for (std::uint64_t c = 0; c < cols; ++c)
                m(static_cast<Index>(r), static_cast<Index>(c)) = f64();
        return m;
    }

    std::size_t offset() const { return pos_; }
    std::size_t remaining() const { return bytes_.size() - pos_; }

    void expect_end() const {
        if (pos_ != bytes_.size()) fail("trailing bytes after payload");
    }

    [[noreturn]] void fail(const std::string& what) const {
        throw parse_error(what + " at byte offset " + std::to_string(pos_));
    }

private:
    void need(std::size_t n, const char* what) const {
        if (remaining() < n)
            throw parse_error(std::string("truncated input reading ") + what +
                              " at byte offset " + std::to_string(pos_));
    }

    std::uint64_t checked_count(std::uint64_t n, std::size_t unit, const char* what) {
        if (n > remaining() / unit)
            fail(std::string(what) + " length larger than remaining input");
        return n;
    }

    std::vector<char> bytes_;
    std::size_t pos_ = 0;
};

inline void write_header(Writer& w, PayloadKind kind) {
    w.u8('N');
    w.u8('S');
    w.u8('R');
    w.u8('C');
    w.u32(kFormatVersion);
    w.u32(static_cast<std::uint32_t>(kind));
}

inline void read_header(Reader& r, PayloadKind expected) {
    char magic[4];
    for (char& ch : magic) ch = static_cast<char>(r.u8());
    if (std::memcmp(magic, "NSRC", 4) != 0) r.fail("bad magic");
    const std::uint32_t version = r.u32();
    if (version != kFormatVersion)
        r.fail("unsupported format version " + std::to_string(version));
    const std::uint32_t kind = r.u32();
    if (kind != static_cast<std::uint32_t>(expected))
        r.fail("unexpected payload kind " + std::to_string(kind));
}

/// Atomic file write: stage to a sibling temp file, then rename over target.
inline void write_file(const std::filesystem::path& path, const std::vector<char>& bytes) {
    namespace fs = std::filesystem;
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open for write: " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw std::runtime_error("write failed: " + tmp.string());
    }
    fs::rename(tmp, path);
}

inline void write_file(const std::filesystem::path& path, const std::string& text) {
    write_file(path, std::vector<char>(text.begin(), text.end()));
}

inline std::vector<char> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open for read: " + path.string());
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return bytes;
}

}  // namespace nsreplay::binio
