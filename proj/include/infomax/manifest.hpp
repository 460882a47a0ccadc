#pragma once

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "infomax/config.hpp"
#include "infomax/io.hpp"

namespace infomax::manifest {

inline std::string iso_utc_now() {
  const auto now = std::chrono::system_clock::now();
  const auto tt = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&tt, &tm);
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%04d-%02d-%02dT%02d:%02d:%02dZ", tm.tm_year + 1900,
                tm.tm_mon + 1, tm.tm_mday, tm.tm_hour, tm.tm_min, tm.tm_sec);
  return buf;
}

// Run description written at the end of every CLI run: config snapshot, build
// version, seed, timestamps, and the emitted files with FNV-1a64 checksums.
// The write is atomic (temp file + rename).
class RunManifest {
 public:
  RunManifest(std::string version, std::uint64_t seed, std::string subcommand)
      : version_(std::move(version)), seed_(seed), subcommand_(std::move(subcommand)),
        started_(iso_utc_now()) {}

  void set_config(const config::IniConfig& cfg) {
    config_ = nlohmann::json::object();
    for (const auto& [section, entries] : cfg.entries()) {
      nlohmann::json sec = nlohmann::json::object();
      for (const auto& [key, value] : entries) sec[key] = value;
      config_[section] = sec;
    }
  }

  void add_file(const std::filesystem::path& relative) { files_.push_back(relative.string()); }

  void write(const std::filesystem::path& out_dir) const {
    nlohmann::json doc;
    doc["tool"] = "infomax";
    doc["version"] = version_;
    doc["subcommand"] = subcommand_;
    doc["seed"] = seed_;
    doc["started"] = started_;
    doc["finished"] = iso_utc_now();
    doc["config"] = config_;
    nlohmann::json files = nlohmann::json::array();
    for (const auto& rel : files_) {
      const auto full = out_dir / rel;
      nlohmann::json f;
      f["path"] = rel;
      f["bytes"] = static_cast<std::uint64_t>(std::filesystem::file_size(full));
      char hex[20];
      std::snprintf(hex, sizeof(hex), "%016llx",
                    static_cast<unsigned long long>(fnv1a64_file(full)));
      f["fnv1a64"] = hex;
      files.push_back(f);
    }
    doc["files"] = files;

    const auto tmp = out_dir / "manifest.json.tmp";
    const auto final_path = out_dir / "manifest.json";
    {
      std::ofstream os(tmp, std::ios::binary);
      if (!os) throw std::runtime_error("manifest: cannot write " + tmp.string());
      os << doc.dump(2) << "\n";
    }
    std::filesystem::rename(tmp, final_path);
  }

 private:
  std::string version_;
  std::uint64_t seed_;
  std::string subcommand_;
  std::string started_;
  nlohmann::json config_ = nlohmann::json::object();
  std::vector<std::string> files_;
};

}  // namespace infomax::manifest
