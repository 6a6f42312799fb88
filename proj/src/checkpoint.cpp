#include "layermatch/checkpoint.hpp"

#include "layermatch/errors.hpp"

#include <fmt/format.h>

#include <bit>
#include <fstream>
#include <iterator>
#include <limits>

namespace layermatch {

namespace {

constexpr std::string_view kMagic = "LMCK";

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

class Reader {
public:
    explicit Reader(std::string_view bytes) : bytes_(bytes) {}

    std::uint64_t take(std::size_t width) {
        if (bytes_.size() - pos_ < width) {
            throw FormatError(fmt::format("checkpoint truncated at byte {}", pos_));
        }
        std::uint64_t v = 0;
        for (std::size_t i = 0; i < width; ++i) {
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        }
        pos_ += width;
        return v;
    }

    std::uint32_t u32() { return static_cast<std::uint32_t>(take(4)); }
    double f64() { return std::bit_cast<double>(take(8)); }
    std::size_t remaining() const { return bytes_.size() - pos_; }

private:
    std::string_view bytes_;
    std::size_t pos_ = 0;
};

} // namespace

std::string encode_checkpoint(std::span<const Matrix* const> matrices) {
    std::string out(kMagic);
    put_u32(out, kCheckpointVersion);
    put_u32(out, static_cast<std::uint32_t>(matrices.size()));
    for (const Matrix* m : matrices) {
        if (m->rows() > std::numeric_limits<std::uint32_t>::max() ||
            m->cols() > std::numeric_limits<std::uint32_t>::max()) {
            throw ShapeError("checkpoint: matrix dimension exceeds u32");
        }
        put_u32(out, static_cast<std::uint32_t>(m->rows()));
        put_u32(out, static_cast<std::uint32_t>(m->cols()));
        for (double v : m->values()) put_u64(out, std::bit_cast<std::uint64_t>(v));
    }
    return out;
}

std::vector<Matrix> decode_checkpoint(std::string_view bytes) {
    if (bytes.size() < kMagic.size() || bytes.substr(0, kMagic.size()) != kMagic) {
        throw FormatError("checkpoint: bad magic (expected LMCK)");
    }
    Reader in(bytes.substr(kMagic.size()));
    const std::uint32_t version = in.u32();
    if (version != kCheckpointVersion) {
        throw FormatError(fmt::format("checkpoint: unsupported version {}", version));
    }
    const std::uint32_t count = in.u32();
    std::vector<Matrix> out;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::size_t rows = in.u32();
        const std::size_t cols = in.u32();
        if (rows * cols > in.remaining() / 8) {
            throw FormatError(fmt::format("checkpoint: matrix {} ({}x{}) exceeds file size", i, rows, cols));
        }
        std::vector<double> data(rows * cols);
        for (double& v : data) v = in.f64();
        out.emplace_back(rows, cols, std::move(data));
    }
    if (in.remaining() != 0) throw FormatError("checkpoint: trailing bytes after last matrix");
    return out;
}

void write_checkpoint(const std::filesystem::path& path, std::span<const Matrix* const> matrices) {
    const std::string bytes = encode_checkpoint(matrices);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(fmt::format("cannot open {} for writing", path.string()));
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(fmt::format("write failed: {}", path.string()));
}

std::vector<Matrix> read_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(fmt::format("cannot open {}", path.string()));
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_checkpoint(bytes);
}

} // namespace layermatch
