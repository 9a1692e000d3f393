#include <csignal>
#include <iostream>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "forge/corpus.hpp"
#include "forge/decoder.hpp"
#include "forge/dpo.hpp"
#include "forge/judge.hpp"
#include "forge/pairs.hpp"
#include "forge/pipeline.hpp"
#include "forge/review.hpp"
#include "forge/stats.hpp"
#include "forge/trainer.hpp"

using namespace forge;

namespace {

void print(const json& j) { std::cout << j.dump(2) << "\n"; }

corpus::InstructionSet load_set(const std::string& path) {
  auto loaded = corpus::load_instructions({path});
  for (const auto& e : loaded.errors) spdlog::warn("{}:{}: {}", e.file, e.line, e.message);
  if (!loaded.errors.empty()) throw ValidationError(fmt::format("{} invalid instruction line(s)", loaded.errors.size()));
  return std::move(loaded.set);
}

review::ReviewService* g_service = nullptr;

void on_signal(int) {
  if (g_service) g_service->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multimodal preference data and DPO toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", pipeline::tool_version());
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Debug logging");

  // ingest
  auto* ingest = app.add_subcommand("ingest", "Validate instruction files and optionally sample a mixture");
  std::vector<std::string> ingest_in;
  std::string ingest_out, ingest_quotas, ingest_source;
  std::uint64_t ingest_seed = 0;
  ingest->add_option("--in", ingest_in, "Instruction files")->required();
  ingest->add_option("--out", ingest_out, "Output instruction file")->required();
  ingest->add_option("--quotas", ingest_quotas, "Per-source quota file");
  ingest->add_option("--seed", ingest_seed, "Sampling seed");
  ingest->add_option("--source", ingest_source, "Source tag for records without one");

  // decode
  auto* decode = app.add_subcommand("decode", "Collect k responses per instruction from a model pool");
  std::string dec_instr, dec_pool, dec_out;
  decoder::DecodeOptions dec_opt;
  decode->add_option("--instructions", dec_instr)->required();
  decode->add_option("--pool", dec_pool)->required();
  decode->add_option("--out", dec_out, "Response store directory")->required();
  decode->add_option("--k", dec_opt.k)->capture_default_str();
  decode->add_option("--seed", dec_opt.seed)->capture_default_str();
  decode->add_option("--concurrency", dec_opt.concurrency)->capture_default_str();
  decode->add_option("--rpm", dec_opt.requests_per_minute, "Requests per minute per endpoint (0: unlimited)");

  // annotate
  auto* annotate = app.add_subcommand("annotate", "Rate responses with the judge model");
  std::string ann_instr, ann_resp, ann_judge, ann_out;
  judge::AnnotateOptions ann_opt;
  annotate->add_option("--instructions", ann_instr)->required();
  annotate->add_option("--responses", ann_resp, "Response store directory or file")->required();
  annotate->add_option("--judge", ann_judge, "Judge model spec")->required();
  annotate->add_option("--out", ann_out, "Annotation store directory")->required();
  annotate->add_flag("--per-aspect", ann_opt.per_aspect, "One judge call per aspect");
  annotate->add_option("--parse-retries", ann_opt.parse_retries)->capture_default_str();
  annotate->add_option("--concurrency", ann_opt.concurrency)->capture_default_str();
  annotate->add_option("--rpm", ann_opt.requests_per_minute);

  // pairs
  auto* pairs_cmd = app.add_subcommand("pairs", "Build and export preference pairs");
  std::string pr_instr, pr_resp, pr_ann, pr_out;
  pairs::SplitOptions pr_split;
  pairs_cmd->add_option("--instructions", pr_instr)->required();
  pairs_cmd->add_option("--responses", pr_resp)->required();
  pairs_cmd->add_option("--annotations", pr_ann)->required();
  pairs_cmd->add_option("--out", pr_out, "Pair file")->required();
  pairs_cmd->add_option("--train-fraction,--train-frac", pr_split.train_fraction)->capture_default_str();
  pairs_cmd->add_option("--seed", pr_split.seed)->capture_default_str();

  // stats
  auto* stats_cmd = app.add_subcommand("stats", "Score histogram, leaderboard and agreement");
  std::string st_ann, st_out, st_votes, st_review;
  stats_cmd->add_option("--annotations", st_ann)->required();
  stats_cmd->add_option("--out", st_out, "Report directory")->required();
  auto* votes_opt = stats_cmd->add_option("--votes", st_votes, "Vote log");
  stats_cmd->add_option("--review-set", st_review, "Review set the votes refer to (default: review_set.json beside the vote log)")
      ->needs(votes_opt);

  // train
  auto* train = app.add_subcommand("train", "DPO on a tabular policy over the pair vocabulary");
  std::string tr_pairs, tr_out;
  dpo::DPOConfig tr_cfg;
  train->add_option("--pairs", tr_pairs)->required();
  train->add_option("--out", tr_out)->required();
  train->add_option("--beta", tr_cfg.beta)->capture_default_str();
  train->add_option("--epochs", tr_cfg.epochs)->capture_default_str();
  train->add_option("--lr", tr_cfg.peak_lr, "Peak learning rate")->capture_default_str();
  train->add_option("--warmup-ratio", tr_cfg.warmup_ratio)->capture_default_str();
  train->add_option("--batch-size", tr_cfg.batch_size)->capture_default_str();
  train->add_option("--weight-decay", tr_cfg.weight_decay)->capture_default_str();
  train->add_option("--seed", tr_cfg.seed)->capture_default_str();

  // score
  auto* score = app.add_subcommand("score", "DPO loss and implicit rewards for externally computed log-probs");
  std::string sc_quads, sc_out;
  double sc_beta = 0.1;
  score->add_option("--quads", sc_quads)->required();
  score->add_option("--beta", sc_beta)->capture_default_str();
  score->add_option("--out", sc_out, "Write per-pair implicit rewards here");

  // run
  auto* run = app.add_subcommand("run", "Run pipeline stages from a config file");
  std::string run_config;
  run->add_option("--config", run_config)->required();

  // review
  auto* review_cmd = app.add_subcommand("review", "Human agreement study");
  review_cmd->require_subcommand(1);
  std::string rv_pairs, rv_votes, rv_static, rv_host = "127.0.0.1", rv_set_out;
  std::size_t rv_n = 100;
  std::uint64_t rv_seed = 0;
  int rv_port = 8080;
  auto* sample = review_cmd->add_subcommand("sample", "Draw a blind review set");
  sample->add_option("--pairs", rv_pairs)->required();
  sample->add_option("--n", rv_n)->capture_default_str();
  sample->add_option("--seed", rv_seed)->capture_default_str();
  sample->add_option("--out", rv_set_out)->required();
  auto* serve = review_cmd->add_subcommand("serve", "Serve comparisons and record votes");
  serve->add_option("--pairs", rv_pairs)->required();
  serve->add_option("--n", rv_n)->capture_default_str();
  serve->add_option("--seed", rv_seed)->capture_default_str();
  serve->add_option("--port", rv_port)->capture_default_str();
  serve->add_option("--host", rv_host)->capture_default_str();
  serve->add_option("--votes", rv_votes, "Vote log (default: $FORGE_HOME/review/votes.jsonl)");
  serve->add_option("--static", rv_static, "Directory of UI assets served at /");

  CLI11_PARSE(app, argc, argv);
  spdlog::set_default_logger(spdlog::stderr_color_mt("forge"));
  spdlog::set_level(verbose ? spdlog::level::debug : spdlog::level::info);

  try {
    auto client = pipeline::make_default_client();

    if (*ingest) {
      std::optional<corpus::Source> tag;
      if (!ingest_source.empty()) {
        tag = corpus::parse_source(ingest_source);
        if (!tag) throw ValidationError(fmt::format("unknown source '{}'", ingest_source));
      }
      std::vector<fs::path> paths(ingest_in.begin(), ingest_in.end());
      auto loaded = corpus::load_instructions(paths, tag);
      for (const auto& e : loaded.errors) spdlog::warn("{}:{}: {}", e.file, e.line, e.message);
      auto set = std::move(loaded.set);
      if (!ingest_quotas.empty()) set = corpus::sample_mixture(set, corpus::load_quotas(ingest_quotas), ingest_seed);
      corpus::write_instruction_set(set, ingest_out);
      json summary = corpus::manifest_to_json(set);
      summary["invalid_lines"] = loaded.errors.size();
      print(summary);
    } else if (*decode) {
      auto set = load_set(dec_instr);
      decoder::ResponseStore store(dec_out);
      auto report = decoder::decode_batch(set, endpoint::load_pool(dec_pool), dec_opt, store, *client);
      print(decoder::to_json(report));
      return report.failed > 0 ? 1 : 0;
    } else if (*annotate) {
      auto set = load_set(ann_instr);
      judge::AnnotationStore store(ann_out);
      auto report = judge::annotate_batch(set, decoder::load_responses(ann_resp),
                                          judge::with_judge_defaults(endpoint::load_model(ann_judge)), ann_opt, store,
                                          *client);
      print(judge::to_json(report));
      return report.transport_failures > 0 ? 1 : 0;
    } else if (*pairs_cmd) {
      auto built = pairs::build_pairs(judge::load_annotations(pr_ann), decoder::load_responses(pr_resp),
                                      load_set(pr_instr));
      json summary = pairs::to_json(pairs::export_pairs(built.pairs, pr_out, pr_split));
      summary["dropped_ties"] = built.dropped_ties;
      summary["skipped_groups"] = built.skipped_groups;
      print(summary);
    } else if (*stats_cmd) {
      auto annotations = judge::load_annotations(st_ann);
      std::optional<stats::AgreementReport> agreement;
      if (!st_votes.empty()) {
        fs::path set_path = st_review.empty() ? fs::path(st_votes).parent_path() / "review_set.json" : fs::path(st_review);
        agreement = stats::agreement_rate(review::load_votes(st_votes),
                                          review::judge_preferences(review::load_review_set(set_path)));
      }
      fs::create_directories(st_out);
      auto board = stats::model_leaderboard(annotations);
      stats::write_report(st_out, stats::score_distribution(annotations), board, agreement);
      for (const auto& row : board) {
        std::cout << fmt::format("{:<24} {} {} {} {}\n", row.model_id, row.mean_helpfulness.to_fixed(2),
                                 row.mean_visual_faithfulness.to_fixed(2), row.mean_ethics.to_fixed(2),
                                 row.mean_overall.to_fixed(2));
      }
      if (agreement) {
        std::cout << fmt::format("agreement {}/{} = {}\n", agreement->matches, agreement->votes,
                                 agreement->micro.to_fixed(4));
      }
    } else if (*train) {
      tr_cfg.validate();
      print(dpo::train_to_dir(pairs::load_pairs(tr_pairs), tr_cfg, tr_out));
    } else if (*score) {
      auto scored = dpo::score_external(sc_quads, sc_beta);
      if (!sc_out.empty()) {
        std::string body;
        for (const auto& [id, z] : scored.rewards) body += json{{"pair_id", id}, {"reward_diff", z}}.dump() + "\n";
        write_file_atomic(sc_out, body);
      }
      json out = dpo::to_json(scored.report);
      out.erase("lr_used");
      out.erase("step");
      out["pairs"] = scored.rewards.size();
      print(out);
    } else if (*run) {
      auto result = pipeline::run_pipeline(fs::path(run_config), *client);
      json out{{"run_dir", result.layout.root.string()}, {"stages", json::array()}};
      for (const auto& o : result.outcomes) {
        out["stages"].push_back({{"stage", o.stage}, {"skipped", o.skipped}, {"summary", o.summary}});
      }
      print(out);
    } else if (*sample) {
      auto set = review::sample_review_set(pairs::load_pairs(rv_pairs), rv_n, rv_seed);
      review::save_review_set(set, rv_set_out);
      print(json{{"comparisons", set.comparisons.size()}, {"seed", set.seed}});
    } else if (*serve) {
      auto set = review::sample_review_set(pairs::load_pairs(rv_pairs), rv_n, rv_seed);
      fs::path votes = rv_votes.empty() ? forge_home() / "review" / "votes.jsonl" : fs::path(rv_votes);
      fs::create_directories(votes.parent_path().empty() ? fs::path(".") : votes.parent_path());
      review::save_review_set(set, votes.parent_path() / "review_set.json");
      review::ReviewService service(std::move(set), votes);
      if (!rv_static.empty()) service.set_static_dir(rv_static);
      g_service = &service;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      service.serve(rv_host, rv_port);
      g_service = nullptr;
    }
  } catch (const ValidationError& e) {
    spdlog::error("{}", e.what());
    return 2;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
