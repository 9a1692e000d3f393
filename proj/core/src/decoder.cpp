#include "forge/decoder.hpp"

#include <fmt/format.h>
#include <fmt/ranges.h>
#include <spdlog/spdlog.h>

#include "forge/rng.hpp"
#include "ordered_pool.hpp"

namespace forge::decoder {

bool ResponseRecord::is_empty() const { return trim(text).empty(); }

json to_json(const ResponseRecord& r) {
  json j{{"instruction_id", r.instruction_id},
         {"model_id", r.model_id},
         {"text", r.text},
         {"decode_params", r.decode_params},
         {"created_at", r.created_at},
         {"attempt", r.attempt}};
  if (r.is_empty()) j["empty_response"] = true;
  return j;
}

ResponseRecord response_from_json(const json& j) {
  try {
    ResponseRecord r;
    r.instruction_id = j.at("instruction_id").get<std::string>();
    r.model_id = j.at("model_id").get<std::string>();
    r.text = j.at("text").get<std::string>();
    r.decode_params = j.value("decode_params", json::object());
    r.created_at = j.value("created_at", std::string{});
    r.attempt = j.value("attempt", 1);
    if (r.attempt < 1) throw ValidationError("attempt must be >= 1");
    return r;
  } catch (const json::exception& e) {
    throw ValidationError(fmt::format("invalid response record: {}", e.what()));
  }
}

std::vector<ModelSpec> select_models(const std::vector<ModelSpec>& pool, std::size_t k, std::uint64_t seed,
                                     std::string_view instruction_id) {
  if (k < 1 || k > pool.size()) {
    throw ValidationError(fmt::format("cannot select {} models from a pool of {}", k, pool.size()));
  }
  Rng rng(derive_seed(seed, instruction_id));
  std::vector<ModelSpec> out;
  out.reserve(k);
  for (auto idx : rng.sample_indices(pool.size(), k)) out.push_back(pool[idx]);
  return out;
}

ResponseStore::ResponseStore(const fs::path& dir)
    : responses_path_(dir / "responses.jsonl"),
      failures_path_(dir / "failures.jsonl"),
      responses_(dir / "responses.jsonl"),
      failures_(dir / "failures.jsonl") {
  for (const auto& line : read_jsonl(responses_path_)) {
    if (!line.value) {
      throw ValidationError(fmt::format("{}:{}: corrupt response record", responses_path_.string(), line.line_no));
    }
    auto rec = response_from_json(*line.value);
    if (keys_.emplace(rec.instruction_id, rec.model_id).second) records_.push_back(std::move(rec));
  }
}

bool ResponseStore::contains(const std::string& instruction_id, const std::string& model_id) const {
  std::lock_guard lock(mu_);
  return keys_.count({instruction_id, model_id}) > 0;
}

bool ResponseStore::append(const ResponseRecord& record) {
  std::lock_guard lock(mu_);
  if (!keys_.emplace(record.instruction_id, record.model_id).second) return false;
  responses_.append(to_json(record));
  records_.push_back(record);
  return true;
}

void ResponseStore::log_failure(const json& failure) { failures_.append(failure); }

std::vector<ResponseRecord> ResponseStore::records() const {
  std::lock_guard lock(mu_);
  return records_;
}

std::size_t ResponseStore::size() const {
  std::lock_guard lock(mu_);
  return records_.size();
}

std::vector<ResponseRecord> load_responses(const fs::path& path) {
  fs::path file = fs::is_directory(path) ? path / "responses.jsonl" : path;
  std::vector<ResponseRecord> out;
  for (const auto& j : read_jsonl_strict(file)) out.push_back(response_from_json(j));
  return out;
}

namespace {

struct Task {
  const corpus::InstructionRecord* instruction;
  const ModelSpec* model;
};

struct TaskResult {
  endpoint::CallResult call;
  std::string created_at;
};

}  // namespace

DecodeReport decode_batch(const corpus::InstructionSet& instructions, const std::vector<ModelSpec>& pool,
                          const DecodeOptions& options, ResponseStore& store, endpoint::ChatClient& client) {
  endpoint::validate_pool(pool);
  if (auto missing = endpoint::missing_credentials(pool); !missing.empty()) {
    throw ValidationError(fmt::format("credential environment variable(s) unset: {}", fmt::join(missing, ", ")));
  }

  DecodeReport report;
  // Selection returns copies; keep them alive for the task pointers.
  std::vector<std::vector<ModelSpec>> assignments;
  assignments.reserve(instructions.records.size());
  for (const auto& inst : instructions.records) {
    assignments.push_back(select_models(pool, options.k, options.seed, inst.id));
  }

  std::vector<Task> tasks;
  for (std::size_t i = 0; i < instructions.records.size(); ++i) {
    const auto& inst = instructions.records[i];
    for (const auto& model : assignments[i]) {
      if (store.contains(inst.id, model.model_id)) {
        ++report.skipped;
        continue;
      }
      tasks.push_back({&inst, &model});
    }
  }

  endpoint::RateLimiter limiter(options.requests_per_minute);
  std::mutex count_mu;

  auto work = [&](std::size_t i) {
    const Task& t = tasks[i];
    Rng jitter(derive_seed(options.seed, "jitter/" + t.instruction->id + "/" + t.model->model_id));
    endpoint::ChatRequest req{{}, t.instruction->prompt, t.instruction->images};
    limiter.acquire(t.model->endpoint);
    TaskResult r;
    r.call = endpoint::call_with_retry(client, *t.model, req, options.retry, jitter);
    r.created_at = options.clock();
    {
      std::lock_guard lock(count_mu);
      report.requests += static_cast<std::size_t>(r.call.attempts);
    }
    return r;
  };

  auto commit = [&](std::size_t i, TaskResult r) {
    const Task& t = tasks[i];
    if (r.call.result.outcome == endpoint::Outcome::Ok) {
      ResponseRecord rec{t.instruction->id, t.model->model_id, std::move(r.call.result.text),
                         t.model->decode_params, r.created_at, r.call.attempts};
      if (rec.is_empty()) {
        ++report.empty;
        spdlog::warn("empty response from {} for {}", rec.model_id, rec.instruction_id);
      }
      if (store.append(rec)) ++report.ok;
    } else {
      ++report.failed;
      store.log_failure({{"instruction_id", t.instruction->id},
                         {"model_id", t.model->model_id},
                         {"status", r.call.result.status},
                         {"error", r.call.result.error},
                         {"attempts", r.call.attempts},
                         {"at", r.created_at}});
      spdlog::warn("decode failed for {} / {} after {} attempt(s): {}", t.instruction->id, t.model->model_id,
                   r.call.attempts, r.call.result.error);
    }
  };

  detail::run_ordered<TaskResult>(tasks.size(), options.concurrency, work, commit);
  return report;
}

json to_json(const DecodeReport& r) {
  return json{{"ok", r.ok}, {"failed", r.failed}, {"skipped", r.skipped}, {"empty", r.empty}, {"requests", r.requests}};
}

}  // namespace forge::decoder
