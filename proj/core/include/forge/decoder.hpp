// Model assignment and resumable response collection.
#pragma once

#include <cstdint>
#include <mutex>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "forge/corpus.hpp"
#include "forge/endpoint.hpp"
#include "forge/io.hpp"

namespace forge::decoder {

using endpoint::ModelSpec;

struct ResponseRecord {
  std::string instruction_id;
  std::string model_id;
  std::string text;
  json decode_params = json::object();
  std::string created_at;
  int attempt = 1;

  /// Empty or whitespace-only replies are kept and flagged.
  bool is_empty() const;
};

json to_json(const ResponseRecord& r);
ResponseRecord response_from_json(const json& j);

/// k distinct models drawn uniformly without replacement from a stream keyed by
/// (seed, instruction_id); the result is independent of call order.
std::vector<ModelSpec> select_models(const std::vector<ModelSpec>& pool, std::size_t k, std::uint64_t seed,
                                     std::string_view instruction_id);

/// Run directory holding responses.jsonl (accepted records) and failures.jsonl
/// (requests that gave up, with the last error). Append-only.
class ResponseStore {
 public:
  explicit ResponseStore(const fs::path& dir);

  bool contains(const std::string& instruction_id, const std::string& model_id) const;
  /// Returns false, writing nothing, when the (instruction, model) key is already stored.
  bool append(const ResponseRecord& record);
  void log_failure(const json& failure);

  std::vector<ResponseRecord> records() const;
  std::size_t size() const;
  const fs::path& responses_path() const { return responses_path_; }

 private:
  fs::path responses_path_;
  fs::path failures_path_;
  mutable std::mutex mu_;
  std::set<std::pair<std::string, std::string>> keys_;
  std::vector<ResponseRecord> records_;
  JsonlAppender responses_;
  JsonlAppender failures_;
};

/// Reads every responses.jsonl under `path` (a run directory or a file).
std::vector<ResponseRecord> load_responses(const fs::path& path);

struct DecodeOptions {
  std::size_t k = 4;
  std::uint64_t seed = 0;
  std::size_t concurrency = 1;
  double requests_per_minute = 0;
  endpoint::RetryPolicy retry;
  Clock clock = system_clock();
};

struct DecodeReport {
  std::size_t ok = 0;
  std::size_t failed = 0;
  std::size_t skipped = 0;
  std::size_t empty = 0;
  std::size_t requests = 0;
};

/// Decodes k responses per instruction. Already stored (instruction, model)
/// pairs are skipped. Results are committed in task order whatever the worker
/// count, so the store's contents do not depend on scheduling. Throws
/// ValidationError before any request when a pool credential is unset.
DecodeReport decode_batch(const corpus::InstructionSet& instructions, const std::vector<ModelSpec>& pool,
                          const DecodeOptions& options, ResponseStore& store, endpoint::ChatClient& client);

json to_json(const DecodeReport& r);

}  // namespace forge::decoder
