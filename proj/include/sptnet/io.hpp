#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace sptnet {

// Raw little-endian float32 blobs, independent of host byte order.
void write_f32_le(const std::filesystem::path& path, std::span<const float> values);
std::vector<float> read_f32_le(const std::filesystem::path& path);

std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace sptnet
