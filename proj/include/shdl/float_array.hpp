#pragma once

#include <json.hpp>

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace shdl {

/// Flat little-endian float32 arrays with a JSON sidecar header.
///
/// `<stem>.bin` holds the concatenated arrays, `<stem>.json` describes them.
/// Values are narrowed to float32 on write.
void write_f32(const std::filesystem::path& path, std::span<const double> values);
std::vector<double> read_f32(const std::filesystem::path& path);

void write_json(const std::filesystem::path& path, const nlohmann::json& doc);
nlohmann::json read_json(const std::filesystem::path& path);

/// Round each value through float32, the precision of the on-disk format.
double to_f32(double v);

}  // namespace shdl
