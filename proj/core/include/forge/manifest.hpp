// Append-only run manifest: one header event, then one event per completed stage.
#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "forge/io.hpp"

namespace forge::pipeline {

using Digests = std::map<std::string, std::string>;

struct RunHeader {
  std::string run_id;
  std::string config_hash;
  std::string tool_version;
  std::map<std::string, std::uint64_t> seeds;
  std::string created_at;
};

json to_json(const RunHeader& h);
RunHeader header_from_json(const json& j);

struct StageRecord {
  std::string stage;
  std::string config_hash;
  Digests inputs;
  Digests outputs;
  json summary = json::object();
  std::string completed_at;
};

json to_json(const StageRecord& r);
StageRecord stage_from_json(const json& j);

/// Digest of each labelled path (sha256_path); missing paths map to "missing".
Digests digest_paths(const std::map<std::string, fs::path>& paths);

class RunManifest {
 public:
  /// Opens manifest.jsonl, writing `header` first when the file is new. An
  /// existing header with a different config hash is superseded by appending
  /// the new one.
  static RunManifest open(const fs::path& path, const RunHeader& header);
  /// Read-only view of an existing manifest.
  static RunManifest load(const fs::path& path);

  const RunHeader& header() const { return header_; }
  const std::vector<StageRecord>& stages() const { return stages_; }
  std::optional<StageRecord> latest(const std::string& stage) const;
  /// Stage names with a completion event, in first-completion order.
  std::vector<std::string> completed() const;

  void record(const StageRecord& record);
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
  RunHeader header_;
  std::vector<StageRecord> stages_;
};

}  // namespace forge::pipeline
