#pragma once

#include "layermatch/matrix.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace layermatch {

/// Binary checkpoint layout (all integers and floats little-endian):
///
///   bytes 0..3   magic "LMCK"
///   u32          format version (kCheckpointVersion)
///   u32          number of matrices that follow
///   per matrix:  u32 rows, u32 cols, rows*cols f64 values in row-major order
///
/// The file carries no architecture description; the reader supplies shapes by
/// loading into a model of known layout. See docs/checkpoint.md.
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string encode_checkpoint(std::span<const Matrix* const> matrices);
std::vector<Matrix> decode_checkpoint(std::string_view bytes);

void write_checkpoint(const std::filesystem::path& path, std::span<const Matrix* const> matrices);
std::vector<Matrix> read_checkpoint(const std::filesystem::path& path);

} // namespace layermatch
