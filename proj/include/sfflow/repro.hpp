#pragma once

// Content hashes compatible with git object ids, and the per-run
// reproducibility record. Requires linking OpenSSL::Crypto.

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <json.hpp>

#include "sfflow/common.hpp"

namespace sfflow {

using Sha1Digest = std::array<unsigned char, 20>;

inline Sha1Digest sha1(const std::string& data) {
  Sha1Digest out{};
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), out.data(), &len, EVP_sha1(), nullptr) != 1 || len != out.size())
    throw RuntimeError("SHA-1 computation failed");
  return out;
}

inline std::string to_hex(const Sha1Digest& d) {
  static const char* digits = "0123456789abcdef";
  std::string s;
  for (unsigned char b : d) {
    s.push_back(digits[b >> 4]);
    s.push_back(digits[b & 15]);
  }
  return s;
}

inline std::string read_file_bytes(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw InvalidArgument("cannot read " + p.string());
  return {std::istreambuf_iterator<char>(is), {}};
}

/// Same id as `git hash-object <file>`.
inline Sha1Digest git_blob_digest(const std::filesystem::path& file) {
  const std::string body = read_file_bytes(file);
  std::string obj = "blob " + std::to_string(body.size());
  obj.push_back('\0');
  return sha1(obj + body);
}

/// Same id as `git write-tree` for a directory of regular files and
/// subdirectories (all files mode 100644, empty directories skipped).
inline Sha1Digest git_tree_digest(const std::filesystem::path& dir) {
  struct Entry {
    std::string name;
    bool is_dir;
    Sha1Digest id;
  };
  std::vector<Entry> entries;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    if (e.is_directory()) {
      if (std::filesystem::is_empty(e.path())) continue;
      entries.push_back({name, true, git_tree_digest(e.path())});
    } else if (e.is_regular_file()) {
      entries.push_back({name, false, git_blob_digest(e.path())});
    }
  }
  // Git orders trees as if directory names ended in '/'.
  std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
    return (a.is_dir ? a.name + "/" : a.name) < (b.is_dir ? b.name + "/" : b.name);
  });
  std::string body;
  for (const auto& e : entries) {
    body += (e.is_dir ? "40000 " : "100644 ") + e.name;
    body.push_back('\0');
    body.append(reinterpret_cast<const char*>(e.id.data()), e.id.size());
  }
  std::string obj = "tree " + std::to_string(body.size());
  obj.push_back('\0');
  return sha1(obj + body);
}

inline std::string dataset_hash(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw InvalidArgument("missing dataset directory " + dir.string());
  return to_hex(git_tree_digest(dir));
}

/// Writes `<dir>/repro_<command>.json`; contents depend only on the inputs.
inline std::filesystem::path write_repro_record(const std::filesystem::path& dir, const std::string& command,
                                                const nlohmann::json& config, const nlohmann::json& seeds,
                                                const std::string& data_hash, const nlohmann::json& extra = {}) {
  std::filesystem::create_directories(dir);
  nlohmann::json rec = {{"command", command}, {"config", config}, {"seeds", seeds}, {"dataset_hash", data_hash}};
  if (!extra.is_null()) rec["details"] = extra;
  const auto path = dir / ("repro_" + command + ".json");
  std::ofstream os(path);
  if (!os) throw RuntimeError("cannot write " + path.string());
  os << rec.dump(2) << '\n';
  return path;
}

}  // namespace sfflow
