// Staged run driver: ingest -> decode -> annotate -> pairs -> stats -> train.
//
// A run config is a JSON object:
//
//   {"run_id": "desk40", "run_dir": "out/desk40", "clock": "2024-01-01T00:00:00Z",
//    "stages": ["ingest", "decode", "annotate", "pairs", "stats", "train"],
//    "ingest":   {"inputs": ["instructions.jsonl"], "quotas": "quotas.json", "seed": 0, "source": "custom"},
//    "decode":   {"pool": "pool.json", "k": 4, "seed": 0, "concurrency": 4, "requests_per_minute": 0},
//    "annotate": {"judge": "judge.json", "per_aspect": false, "parse_retries": 2, "concurrency": 4},
//    "pairs":    {"train_fraction": 0.9, "seed": 0},
//    "stats":    {"votes": "votes.jsonl", "review_set": "review_set.json"},
//    "train":    {"beta": 0.1, "epochs": 3, "peak_lr": 1e-5, ...}}
//
// Relative paths resolve against the config file's directory; run_dir defaults
// to $FORGE_HOME/runs/<run_id>. "clock" pins every timestamp, making reruns
// byte-identical. Each completed stage appends its input and output digests to
// manifest.jsonl; a stage whose config, inputs and outputs still match its last
// record is skipped.
#pragma once

#include <array>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "forge/endpoint.hpp"
#include "forge/manifest.hpp"

namespace forge::pipeline {

inline constexpr std::array<std::string_view, 6> kStages = {"ingest", "decode", "annotate", "pairs", "stats", "train"};

class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& message);
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct RunLayout {
  fs::path root;
  fs::path manifest() const { return root / "manifest.jsonl"; }
  fs::path instructions() const { return root / "instructions.jsonl"; }
  fs::path ingest_errors() const { return root / "ingest_errors.jsonl"; }
  fs::path responses() const { return root / "responses"; }
  fs::path annotations() const { return root / "annotations"; }
  fs::path pairs_dir() const { return root / "pairs"; }
  fs::path pairs() const { return root / "pairs" / "pairs.jsonl"; }
  fs::path stats() const { return root / "stats"; }
  fs::path train() const { return root / "train"; }
};

struct StageOutcome {
  std::string stage;
  bool skipped = false;
  json summary = json::object();
};

struct RunResult {
  RunLayout layout;
  std::vector<StageOutcome> outcomes;
  RunManifest manifest;
};

/// Throws ValidationError for unknown stage names, missing sections or a
/// malformed config, before anything runs.
void validate_config(const json& config);

/// Throws StageError naming the failed stage; completed stages stay recorded so
/// a rerun resumes where this one stopped.
RunResult run_pipeline(const fs::path& config_path, endpoint::ChatClient& client);
RunResult run_pipeline(const json& config, const fs::path& base_dir, endpoint::ChatClient& client);

/// Mock endpoints (echo, synth, judge-length) plus HTTP for everything else.
std::shared_ptr<endpoint::RoutingChatClient> make_default_client();

std::string tool_version();

}  // namespace forge::pipeline
