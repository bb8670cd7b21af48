// SPDX-License-Identifier: Apache-2.0
#include "starft/io.hpp"

#include <openssl/evp.h>

#include <cstdio>
#include <fstream>
#include <sstream>

namespace starft {

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open '" + path.string() + "' for reading");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_text_file(const std::filesystem::path& path, std::string_view contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot open '" + path.string() + "' for writing");
  out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
  if (!out) throw ValidationError("failed writing '" + path.string() + "'");
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
  const std::string text = read_text_file(path);
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("sha256: digest computation failed");
  }
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", digest[i]);
    hex += buf;
  }
  return hex;
}

std::string file_sha256(const std::filesystem::path& path) { return sha256_hex(read_text_file(path)); }

std::string checkpoint_text(const DualEncoderParams& params) { return params_to_json(params).dump() + "\n"; }

std::string dataset_text(const GroupedDataset& data) { return data.to_json().dump() + "\n"; }

void save_checkpoint(const std::filesystem::path& path, const DualEncoderParams& params) {
  write_text_file(path, checkpoint_text(params));
}

DualEncoderParams load_checkpoint(const std::filesystem::path& path) {
  try {
    return params_from_json(read_json_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("checkpoint '" + path.string() + "': " + e.what());
  }
}

void save_dataset(const std::filesystem::path& path, const GroupedDataset& data) {
  write_text_file(path, dataset_text(data));
}

GroupedDataset load_dataset(const std::filesystem::path& path) {
  try {
    return GroupedDataset::from_json(read_json_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("dataset '" + path.string() + "': " + e.what());
  }
}

}  // namespace starft
