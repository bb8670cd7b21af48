// SPDX-License-Identifier: Apache-2.0
//
// File helpers shared by the command-line tool and tests.
#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include <json.hpp>

#include "starft/encoders.hpp"
#include "starft/synthdata.hpp"

namespace starft {

std::string read_text_file(const std::filesystem::path& path);
/// Writes atomically enough for our purposes: parent directories are created.
void write_text_file(const std::filesystem::path& path, std::string_view contents);
nlohmann::json read_json_file(const std::filesystem::path& path);

/// Lowercase hex SHA-256 of `bytes`.
std::string sha256_hex(std::string_view bytes);
std::string file_sha256(const std::filesystem::path& path);

/// Canonical serialized forms; equal objects give equal bytes.
std::string checkpoint_text(const DualEncoderParams& params);
std::string dataset_text(const GroupedDataset& data);

void save_checkpoint(const std::filesystem::path& path, const DualEncoderParams& params);
DualEncoderParams load_checkpoint(const std::filesystem::path& path);
void save_dataset(const std::filesystem::path& path, const GroupedDataset& data);
GroupedDataset load_dataset(const std::filesystem::path& path);

}  // namespace starft
