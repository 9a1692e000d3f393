#include "forge/pipeline.hpp"

#include <algorithm>
#include <functional>
#include <set>

#include <fmt/format.h>
#include <fmt/ranges.h>
#include <spdlog/spdlog.h>

#include "forge/corpus.hpp"
#include "forge/decoder.hpp"
#include "forge/judge.hpp"
#include "forge/pairs.hpp"
#include "forge/review.hpp"
#include "forge/stats.hpp"
#include "forge/trainer.hpp"

namespace forge::pipeline {

StageError::StageError(std::string stage, const std::string& message)
    : Error(fmt::format("stage '{}' failed: {}", stage, message)), stage_(std::move(stage)) {}

std::string tool_version() {
#ifdef FORGE_VERSION
  return FORGE_VERSION;
#else
  return "unknown";
#endif
}

std::shared_ptr<endpoint::RoutingChatClient> make_default_client() {
  auto mock = std::make_shared<endpoint::MockChatClient>();
  mock->register_handler("judge-length", judge::length_judge_handler());
  return std::make_shared<endpoint::RoutingChatClient>(mock);
}

namespace {

const std::map<std::string_view, std::vector<std::string_view>> kRequiredKeys = {
    {"ingest", {"inputs"}}, {"decode", {"pool"}}, {"annotate", {"judge"}},
    {"pairs", {}},          {"stats", {}},        {"train", {}},
};

std::vector<std::string> requested_stages(const json& config) {
  if (!config.contains("stages")) return {kStages.begin(), kStages.end()};
  return config.at("stages").get<std::vector<std::string>>();
}

const json& section(const json& config, std::string_view stage) {
  static const json empty = json::object();
  auto it = config.find(std::string(stage));
  return it == config.end() ? empty : *it;
}

std::string hash_json(const json& j) { return sha256_hex(j.dump()); }

struct Context {
  const json& config;
  fs::path base;
  RunLayout layout;
  Clock clock;
  endpoint::ChatClient& client;

  fs::path resolve(const std::string& p) const {
    fs::path path(p);
    return path.is_absolute() ? path : base / path;
  }
};

struct Stage {
  std::function<std::map<std::string, fs::path>(const Context&)> inputs;
  std::function<std::map<std::string, fs::path>(const Context&)> outputs;
  std::function<json(const Context&)> run;
};

corpus::InstructionSet load_run_instructions(const Context& ctx) {
  auto loaded = corpus::load_instructions({ctx.layout.instructions()});
  if (!loaded.errors.empty()) {
    throw ValidationError(fmt::format("{}:{}: {}", loaded.errors.front().file, loaded.errors.front().line,
                                      loaded.errors.front().message));
  }
  return std::move(loaded.set);
}

json run_ingest(const Context& ctx) {
  const json& s = section(ctx.config, "ingest");
  std::vector<fs::path> inputs;
  for (const auto& p : s.at("inputs").get<std::vector<std::string>>()) inputs.push_back(ctx.resolve(p));
  std::optional<corpus::Source> tag;
  if (s.contains("source")) {
    auto name = s.at("source").get<std::string>();
    tag = corpus::parse_source(name);
    if (!tag) throw ValidationError(fmt::format("unknown source '{}'", name));
  }
  auto loaded = corpus::load_instructions(inputs, tag);

  std::string errors;
  for (const auto& e : loaded.errors) {
    errors += json{{"file", e.file}, {"line", e.line}, {"message", e.message}}.dump() + "\n";
    spdlog::warn("{}:{}: {}", e.file, e.line, e.message);
  }
  write_file_atomic(ctx.layout.ingest_errors(), errors);

  corpus::InstructionSet set = std::move(loaded.set);
  if (s.contains("quotas")) {
    auto quotas = corpus::load_quotas(ctx.resolve(s.at("quotas").get<std::string>()));
    set = corpus::sample_mixture(set, quotas, s.value("seed", std::uint64_t{0}));
  }
  if (set.records.empty()) throw ValidationError("no valid instructions");
  corpus::write_instruction_set(set, ctx.layout.instructions());
  json summary = corpus::manifest_to_json(set);
  summary["invalid_lines"] = loaded.errors.size();
  return summary;
}

json run_decode(const Context& ctx) {
  const json& s = section(ctx.config, "decode");
  auto set = load_run_instructions(ctx);
  auto pool = endpoint::load_pool(ctx.resolve(s.at("pool").get<std::string>()));
  decoder::DecodeOptions opt;
  opt.k = s.value("k", opt.k);
  opt.seed = s.value("seed", opt.seed);
  opt.concurrency = s.value("concurrency", opt.concurrency);
  opt.requests_per_minute = s.value("requests_per_minute", opt.requests_per_minute);
  opt.clock = ctx.clock;
  decoder::ResponseStore store(ctx.layout.responses());
  auto report = decoder::decode_batch(set, pool, opt, store, ctx.client);
  if (report.failed > 0) {
    throw Error(fmt::format("{} request(s) gave up after retries; see {}", report.failed,
                            (ctx.layout.responses() / "failures.jsonl").string()));
  }
  return decoder::to_json(report);
}

json run_annotate(const Context& ctx) {
  const json& s = section(ctx.config, "annotate");
  auto set = load_run_instructions(ctx);
  auto responses = decoder::load_responses(ctx.layout.responses());
  auto judge_spec = judge::with_judge_defaults(endpoint::load_model(ctx.resolve(s.at("judge").get<std::string>())));
  judge::AnnotateOptions opt;
  opt.per_aspect = s.value("per_aspect", opt.per_aspect);
  opt.parse_retries = s.value("parse_retries", opt.parse_retries);
  opt.concurrency = s.value("concurrency", opt.concurrency);
  opt.requests_per_minute = s.value("requests_per_minute", opt.requests_per_minute);
  opt.seed = s.value("seed", opt.seed);
  judge::AnnotationStore store(ctx.layout.annotations());
  auto report = judge::annotate_batch(set, responses, judge_spec, opt, store, ctx.client);
  if (report.transport_failures > 0) {
    throw Error(fmt::format("{} judge request(s) gave up after retries; see {}", report.transport_failures,
                            (ctx.layout.annotations() / "failures.jsonl").string()));
  }
  return judge::to_json(report);
}

json run_pairs(const Context& ctx) {
  const json& s = section(ctx.config, "pairs");
  auto set = load_run_instructions(ctx);
  auto built = pairs::build_pairs(judge::load_annotations(ctx.layout.annotations()),
                                  decoder::load_responses(ctx.layout.responses()), set);
  pairs::SplitOptions split;
  split.train_fraction = s.value("train_fraction", split.train_fraction);
  split.seed = s.value("seed", split.seed);
  fs::create_directories(ctx.layout.pairs_dir());
  auto report = pairs::export_pairs(built.pairs, ctx.layout.pairs(), split);

  json summary = pairs::to_json(report);
  summary["dropped_ties"] = built.dropped_ties;
  summary["skipped_groups"] = built.skipped_groups;
  json groups = json::object();
  for (const auto& [iid, g] : built.groups) groups[iid] = {{"responses", g.responses}, {"pairs", g.pairs}, {"ties", g.ties}};
  write_file_atomic(ctx.layout.pairs_dir() / "summary.json", json{{"export", summary}, {"groups", groups}}.dump(2) + "\n");
  return summary;
}

json run_stats(const Context& ctx) {
  const json& s = section(ctx.config, "stats");
  auto annotations = judge::load_annotations(ctx.layout.annotations());
  auto histogram = stats::score_distribution(annotations);
  auto board = stats::model_leaderboard(annotations);
  std::optional<stats::AgreementReport> agreement;
  if (s.contains("votes") && s.contains("review_set")) {
    auto set = review::load_review_set(ctx.resolve(s.at("review_set").get<std::string>()));
    auto votes = review::load_votes(ctx.resolve(s.at("votes").get<std::string>()));
    agreement = stats::agreement_rate(votes, review::judge_preferences(set));
  }
  fs::create_directories(ctx.layout.stats());
  stats::write_report(ctx.layout.stats(), histogram, board, agreement);
  json summary{{"annotations", histogram.total}, {"models", board.size()}};
  if (agreement) summary["agreement"] = agreement->micro.to_fixed(4);
  return summary;
}

json run_train(const Context& ctx) {
  auto config = dpo::config_from_json(section(ctx.config, "train"));
  return dpo::train_to_dir(pairs::load_pairs(ctx.layout.pairs()), config, ctx.layout.train());
}

std::map<std::string, fs::path> ingest_inputs(const Context& ctx) {
  const json& s = section(ctx.config, "ingest");
  std::map<std::string, fs::path> in;
  auto files = s.at("inputs").get<std::vector<std::string>>();
  for (std::size_t i = 0; i < files.size(); ++i) in[fmt::format("input_{}", i)] = ctx.resolve(files[i]);
  if (s.contains("quotas")) in["quotas"] = ctx.resolve(s.at("quotas").get<std::string>());
  return in;
}

const std::map<std::string, Stage, std::less<>>& stage_table() {
  static const std::map<std::string, Stage, std::less<>> table = {
      {"ingest",
       {ingest_inputs,
        [](const Context& c) -> std::map<std::string, fs::path> {
          return {{"instructions", c.layout.instructions()},
                  {"instructions_manifest", c.layout.instructions().string() + ".manifest.json"},
                  {"ingest_errors", c.layout.ingest_errors()}};
        },
        run_ingest}},
      {"decode",
       {[](const Context& c) -> std::map<std::string, fs::path> {
          return {{"instructions", c.layout.instructions()},
                  {"pool", c.resolve(section(c.config, "decode").at("pool").get<std::string>())}};
        },
        [](const Context& c) -> std::map<std::string, fs::path> { return {{"responses", c.layout.responses()}}; },
        run_decode}},
      {"annotate",
       {[](const Context& c) -> std::map<std::string, fs::path> {
          return {{"instructions", c.layout.instructions()},
                  {"responses", c.layout.responses()},
                  {"judge", c.resolve(section(c.config, "annotate").at("judge").get<std::string>())}};
        },
        [](const Context& c) -> std::map<std::string, fs::path> { return {{"annotations", c.layout.annotations()}}; },
        run_annotate}},
      {"pairs",
       {[](const Context& c) -> std::map<std::string, fs::path> {
          return {{"instructions", c.layout.instructions()},
                  {"responses", c.layout.responses()},
                  {"annotations", c.layout.annotations()}};
        },
        [](const Context& c) -> std::map<std::string, fs::path> { return {{"pairs", c.layout.pairs_dir()}}; },
        run_pairs}},
      {"stats",
       {[](const Context& c) -> std::map<std::string, fs::path> {
          std::map<std::string, fs::path> in{{"annotations", c.layout.annotations()}};
          const json& s = section(c.config, "stats");
          for (const char* key : {"votes", "review_set"}) {
            if (s.contains(key)) in[key] = c.resolve(s.at(key).get<std::string>());
          }
          return in;
        },
        [](const Context& c) -> std::map<std::string, fs::path> { return {{"stats", c.layout.stats()}}; },
        run_stats}},
      {"train",
       {[](const Context& c) -> std::map<std::string, fs::path> { return {{"pairs", c.layout.pairs()}}; },
        [](const Context& c) -> std::map<std::string, fs::path> { return {{"train", c.layout.train()}}; },
        run_train}},
  };
  return table;
}

bool up_to_date(const std::optional<StageRecord>& last, const std::string& config_hash, const Digests& inputs,
                const Digests& outputs) {
  if (!last || last->config_hash != config_hash || last->inputs != inputs || last->outputs != outputs) return false;
  return std::none_of(outputs.begin(), outputs.end(), [](const auto& kv) { return kv.second == "missing"; });
}

}  // namespace

void validate_config(const json& config) {
  if (!config.is_object()) throw ValidationError("run config must be a JSON object");
  if (!config.contains("run_id") || !config.at("run_id").is_string() || config.at("run_id").get<std::string>().empty()) {
    throw ValidationError("run config needs a nonempty string run_id");
  }
  std::vector<std::string> stages;
  try {
    stages = requested_stages(config);
  } catch (const json::exception&) {
    throw ValidationError("'stages' must be a list of stage names");
  }
  if (stages.empty()) throw ValidationError("'stages' is empty");
  std::set<std::string> seen;
  for (const auto& name : stages) {
    if (std::find(kStages.begin(), kStages.end(), name) == kStages.end()) {
      throw ValidationError(fmt::format("unknown stage '{}' (known: {})", name, fmt::join(kStages, ", ")));
    }
    if (!seen.insert(name).second) throw ValidationError(fmt::format("stage '{}' listed twice", name));
    for (auto key : kRequiredKeys.at(name)) {
      if (!section(config, name).contains(std::string(key))) {
        throw ValidationError(fmt::format("stage '{}' needs '{}.{}' in the config", name, name, key));
      }
    }
  }
  for (const char* key : {"clock", "run_dir"}) {
    if (config.contains(key) && !config.at(key).is_string()) throw ValidationError(fmt::format("'{}' must be a string", key));
  }
  if (std::find(stages.begin(), stages.end(), "train") != stages.end()) {
    dpo::config_from_json(section(config, "train"));
  }
}

RunResult run_pipeline(const fs::path& config_path, endpoint::ChatClient& client) {
  json config;
  try {
    config = json::parse(read_file(config_path));
  } catch (const json::parse_error& e) {
    throw ValidationError(fmt::format("{}: {}", config_path.string(), e.what()));
  }
  return run_pipeline(config, fs::absolute(config_path).parent_path(), client);
}

RunResult run_pipeline(const json& config, const fs::path& base_dir, endpoint::ChatClient& client) {
  validate_config(config);
  const std::string run_id = config.at("run_id").get<std::string>();
  fs::path root = config.contains("run_dir") ? fs::path(config.at("run_dir").get<std::string>())
                                             : forge_home() / "runs" / run_id;
  if (root.is_relative()) root = base_dir / root;
  fs::create_directories(root);

  Context ctx{config, base_dir, RunLayout{root},
              config.contains("clock") ? fixed_clock(config.at("clock").get<std::string>()) : system_clock(), client};

  json hashed = config;
  hashed.erase("run_dir");
  RunHeader header;
  header.run_id = run_id;
  header.config_hash = hash_json(hashed);
  header.tool_version = tool_version();
  for (auto stage : kStages) {
    const json& s = section(config, stage);
    if (s.contains("seed")) header.seeds[std::string(stage)] = s.at("seed").get<std::uint64_t>();
  }
  if (config.contains("train")) header.seeds.try_emplace("train", dpo::config_from_json(config.at("train")).seed);
  header.created_at = ctx.clock();

  RunResult result;
  result.layout = ctx.layout;
  result.manifest = RunManifest::open(ctx.layout.manifest(), header);

  const auto stages = requested_stages(config);
  for (auto name : kStages) {
    if (std::find(stages.begin(), stages.end(), name) == stages.end()) continue;
    const std::string stage(name);
    const Stage& def = stage_table().find(name)->second;
    const std::string config_hash = hash_json(section(config, name));
    try {
      Digests inputs = digest_paths(def.inputs(ctx));
      if (up_to_date(result.manifest.latest(stage), config_hash, inputs, digest_paths(def.outputs(ctx)))) {
        spdlog::info("stage {}: up to date, skipped", stage);
        result.outcomes.push_back({stage, true, result.manifest.latest(stage)->summary});
        continue;
      }
      spdlog::info("stage {}: running", stage);
      json summary = def.run(ctx);
      StageRecord record{stage, config_hash, inputs, digest_paths(def.outputs(ctx)), summary, ctx.clock()};
      result.manifest.record(record);
      result.outcomes.push_back({stage, false, summary});
    } catch (const StageError&) {
      throw;
    } catch (const std::exception& e) {
      throw StageError(stage, fmt::format("{}. Completed work is kept; rerun the same config to resume from '{}'.",
                                          e.what(), stage));
    }
  }
  return result;
}

}  // namespace forge::pipeline
