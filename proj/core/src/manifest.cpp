#include "forge/manifest.hpp"

#include <algorithm>

#include <fmt/format.h>

namespace forge::pipeline {

json to_json(const RunHeader& h) {
  return json{{"event", "run_started"},    {"run_id", h.run_id},         {"config_hash", h.config_hash},
              {"tool_version", h.tool_version}, {"seeds", h.seeds}, {"created_at", h.created_at}};
}

RunHeader header_from_json(const json& j) {
  RunHeader h;
  h.run_id = j.at("run_id").get<std::string>();
  h.config_hash = j.at("config_hash").get<std::string>();
  h.tool_version = j.value("tool_version", std::string{});
  h.seeds = j.value("seeds", std::map<std::string, std::uint64_t>{});
  h.created_at = j.value("created_at", std::string{});
  return h;
}

json to_json(const StageRecord& r) {
  return json{{"event", "stage_completed"}, {"stage", r.stage},     {"config_hash", r.config_hash},
              {"inputs", r.inputs},         {"outputs", r.outputs}, {"summary", r.summary},
              {"completed_at", r.completed_at}};
}

StageRecord stage_from_json(const json& j) {
  StageRecord r;
  r.stage = j.at("stage").get<std::string>();
  r.config_hash = j.at("config_hash").get<std::string>();
  r.inputs = j.at("inputs").get<Digests>();
  r.outputs = j.at("outputs").get<Digests>();
  r.summary = j.value("summary", json::object());
  r.completed_at = j.value("completed_at", std::string{});
  return r;
}

Digests digest_paths(const std::map<std::string, fs::path>& paths) {
  Digests out;
  for (const auto& [label, path] : paths) out[label] = fs::exists(path) ? sha256_path(path) : "missing";
  return out;
}

RunManifest RunManifest::load(const fs::path& path) {
  RunManifest m;
  m.path_ = path;
  bool have_header = false;
  for (const auto& line : read_jsonl(path)) {
    if (!line.value) throw ValidationError(fmt::format("{}:{}: malformed manifest event", path.string(), line.line_no));
    try {
      const json& j = *line.value;
      std::string event = j.at("event").get<std::string>();
      if (event == "run_started") {
        m.header_ = header_from_json(j);
        have_header = true;
      } else if (event == "stage_completed") {
        m.stages_.push_back(stage_from_json(j));
      } else {
        throw ValidationError(fmt::format("unknown event '{}'", event));
      }
    } catch (const json::exception& e) {
      throw ValidationError(fmt::format("{}:{}: {}", path.string(), line.line_no, e.what()));
    }
  }
  if (!have_header) throw ValidationError(fmt::format("{}: manifest has no run header", path.string()));
  return m;
}

RunManifest RunManifest::open(const fs::path& path, const RunHeader& header) {
  if (fs::exists(path)) repair_torn_tail(path);
  if (!fs::exists(path) || fs::file_size(path) == 0) {
    JsonlAppender(path).append(to_json(header));
  } else if (RunManifest existing = load(path); existing.header_.config_hash != header.config_hash ||
                                                existing.header_.run_id != header.run_id) {
    JsonlAppender(path).append(to_json(header));
  }
  return load(path);
}

std::optional<StageRecord> RunManifest::latest(const std::string& stage) const {
  auto it = std::find_if(stages_.rbegin(), stages_.rend(), [&](const StageRecord& r) { return r.stage == stage; });
  if (it == stages_.rend()) return std::nullopt;
  return *it;
}

std::vector<std::string> RunManifest::completed() const {
  std::vector<std::string> out;
  for (const auto& r : stages_) {
    if (std::find(out.begin(), out.end(), r.stage) == out.end()) out.push_back(r.stage);
  }
  return out;
}

void RunManifest::record(const StageRecord& record) {
  JsonlAppender(path_).append(to_json(record));
  stages_.push_back(record);
}

}  // namespace forge::pipeline
