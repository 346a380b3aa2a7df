#pragma once

#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "mam/errors.hpp"

namespace mam {

// One JSON-lines record per utterance. Paths are stored relative to the
// manifest's own directory.
struct ManifestEntry {
  std::string id;
  std::string feat;         // MAMF file, empty before feature extraction
  std::string audio;        // WAV file, optional
  std::string transcript;   // z*, optional
  std::string translation;  // y*, optional
  int frames = -1;          // cached frame count, -1 = unknown
};

inline std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open manifest: " + path);
  std::vector<ManifestEntry> entries;
  std::set<std::string> ids;
  std::string line;
  int line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
    ManifestEntry e;
    e.id = j.value("id", "");
    e.feat = j.value("feat", "");
    e.audio = j.value("audio", "");
    e.transcript = j.value("transcript", "");
    e.translation = j.value("translation", "");
    if (e.id.empty())
      throw DataError(path + ":" + std::to_string(line_no) + ": missing id");
    if (!ids.insert(e.id).second)
      throw DataError(path + ": duplicate id " + e.id);
    entries.push_back(std::move(e));
  }
  return entries;
}

inline void write_manifest(const std::string& path,
                           const std::vector<ManifestEntry>& entries) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp);
    if (!f) throw DataError("cannot write manifest: " + path);
    for (const auto& e : entries) {
      nlohmann::json j;
      j["id"] = e.id;
      if (!e.feat.empty()) j["feat"] = e.feat;
      if (!e.audio.empty()) j["audio"] = e.audio;
      if (!e.transcript.empty()) j["transcript"] = e.transcript;
      if (!e.translation.empty()) j["translation"] = e.translation;
      f << j.dump() << "\n";
    }
  }
  std::filesystem::rename(tmp, path);
}

// Resolves a manifest-relative path against the manifest's directory.
inline std::string resolve_path(const std::string& manifest_path,
                                const std::string& rel) {
  std::filesystem::path p(rel);
  if (p.is_absolute()) return rel;
  return (std::filesystem::path(manifest_path).parent_path() / p).string();
}

}  // namespace mam
