#include "forge/pairs.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "forge/rng.hpp"

namespace forge::pairs {

OverallScore overall_score(const judge::AspectScores& scores) {
  if (!scores.valid()) throw ValidationError("aspect scores must lie in 1..5");
  return {scores.helpfulness + scores.visual_faithfulness + scores.ethics};
}

Rational mean_of_three(const Rational& a, const Rational& b, const Rational& c) {
  return (a + b + c) / Rational(3);
}

namespace {

json side_to_json(const PairSide& s) {
  return json{{"model_id", s.model_id}, {"text", s.text}, {"sum3", s.overall.sum3}};
}

PairSide side_from_json(const json& j) {
  return {j.at("model_id").get<std::string>(), j.at("text").get<std::string>(), {j.at("sum3").get<int>()}};
}

}  // namespace

json to_json(const PreferencePair& p) {
  json j{{"instruction_id", p.instruction_id},
         {"prompt", p.prompt},
         {"images", p.images},
         {"chosen", side_to_json(p.chosen)},
         {"rejected", side_to_json(p.rejected)},
         {"margin_thirds", p.margin_thirds()}};
  if (!p.split.empty()) j["split"] = p.split;
  return j;
}

PreferencePair pair_from_json(const json& j) {
  try {
    PreferencePair p;
    p.instruction_id = j.at("instruction_id").get<std::string>();
    p.prompt = j.at("prompt").get<std::string>();
    p.images = j.value("images", std::vector<std::string>{});
    p.chosen = side_from_json(j.at("chosen"));
    p.rejected = side_from_json(j.at("rejected"));
    p.split = j.value("split", std::string{});
    if (p.chosen.overall.sum3 <= p.rejected.overall.sum3) {
      throw ValidationError(fmt::format("pair for {}: chosen sum3 {} is not above rejected sum3 {}",
                                        p.instruction_id, p.chosen.overall.sum3, p.rejected.overall.sum3));
    }
    if (p.chosen.model_id == p.rejected.model_id) {
      throw ValidationError(fmt::format("pair for {}: chosen and rejected share model {}", p.instruction_id,
                                        p.chosen.model_id));
    }
    return p;
  } catch (const json::exception& e) {
    throw ValidationError(fmt::format("invalid pair record: {}", e.what()));
  }
}

std::vector<PreferencePair> load_pairs(const fs::path& path) {
  std::vector<PreferencePair> out;
  for (const auto& line : read_jsonl(path)) {
    if (!line.value) throw ValidationError(fmt::format("{}:{}: malformed pair record", path.string(), line.line_no));
    try {
      out.push_back(pair_from_json(*line.value));
    } catch (const ValidationError& e) {
      throw ValidationError(fmt::format("{}:{}: {}", path.string(), line.line_no, e.what()));
    }
  }
  return out;
}

BuildResult build_pairs(const std::vector<judge::AnnotationRecord>& annotations,
                        const std::vector<decoder::ResponseRecord>& responses,
                        const corpus::InstructionSet& instructions) {
  std::map<std::pair<std::string, std::string>, const decoder::ResponseRecord*> response_index;
  for (const auto& r : responses) response_index[{r.instruction_id, r.model_id}] = &r;
  std::map<std::string, const corpus::InstructionRecord*> instruction_index;
  for (const auto& r : instructions.records) instruction_index[r.id] = &r;

  struct Member {
    const decoder::ResponseRecord* response;
    OverallScore overall;
  };
  std::map<std::string, std::vector<Member>> groups;
  std::set<std::pair<std::string, std::string>> seen;
  for (const auto& a : annotations) {
    auto it = response_index.find({a.instruction_id, a.model_id});
    if (it == response_index.end()) {
      throw ValidationError(
          fmt::format("annotation for {} / {} has no matching response", a.instruction_id, a.model_id));
    }
    if (!instruction_index.count(a.instruction_id)) {
      throw ValidationError(fmt::format("annotation references unknown instruction {}", a.instruction_id));
    }
    if (!seen.emplace(a.instruction_id, a.model_id).second) {
      throw ValidationError(fmt::format("duplicate annotation for {} / {}", a.instruction_id, a.model_id));
    }
    groups[a.instruction_id].push_back({it->second, overall_score(a.scores)});
  }

  BuildResult result;
  for (auto& [iid, members] : groups) {
    GroupStats& gs = result.groups[iid];
    gs.responses = members.size();
    if (members.size() < 2) {
      spdlog::warn("instruction {} has {} annotated response(s); no pairs built", iid, members.size());
      result.skipped_groups.push_back(iid);
      continue;
    }
    const auto& inst = *instruction_index.at(iid);
    for (std::size_t i = 0; i < members.size(); ++i) {
      for (std::size_t j = i + 1; j < members.size(); ++j) {
        const Member* hi = &members[i];
        const Member* lo = &members[j];
        if (hi->overall == lo->overall) {
          ++gs.ties;
          continue;
        }
        if (hi->overall < lo->overall) std::swap(hi, lo);
        PreferencePair p;
        p.instruction_id = iid;
        p.prompt = inst.prompt;
        p.images = inst.images;
        p.chosen = {hi->response->model_id, hi->response->text, hi->overall};
        p.rejected = {lo->response->model_id, lo->response->text, lo->overall};
        result.pairs.push_back(std::move(p));
        ++gs.pairs;
      }
    }
    result.dropped_ties += gs.ties;
  }

  std::sort(result.pairs.begin(), result.pairs.end(), [](const PreferencePair& a, const PreferencePair& b) {
    if (a.instruction_id != b.instruction_id) return a.instruction_id < b.instruction_id;
    if (a.margin_thirds() != b.margin_thirds()) return a.margin_thirds() > b.margin_thirds();
    if (a.chosen.model_id != b.chosen.model_id) return a.chosen.model_id < b.chosen.model_id;
    return a.rejected.model_id < b.rejected.model_id;
  });
  return result;
}

json to_json(const ExportReport& r) {
  return json{{"total", r.total},
              {"train_pairs", r.train_pairs},
              {"test_pairs", r.test_pairs},
              {"train_instructions", r.train_instructions},
              {"test_instructions", r.test_instructions}};
}

ExportReport export_pairs(std::vector<PreferencePair> pairs, const fs::path& path, const SplitOptions& split) {
  if (!(split.train_fraction >= 0.0 && split.train_fraction <= 1.0)) {
    throw ValidationError(fmt::format("train fraction {} outside [0, 1]", split.train_fraction));
  }
  std::set<std::string> id_set;
  for (const auto& p : pairs) id_set.insert(p.instruction_id);
  std::vector<std::string> ids(id_set.begin(), id_set.end());
  Rng rng(derive_seed(split.seed, "split"));
  rng.shuffle(std::span<std::string>(ids));
  auto n_train = static_cast<std::size_t>(std::llround(split.train_fraction * static_cast<double>(ids.size())));
  std::set<std::string> train_ids(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));

  ExportReport report;
  report.train_instructions = n_train;
  report.test_instructions = ids.size() - n_train;
  std::string body;
  for (auto& p : pairs) {
    const bool train = train_ids.count(p.instruction_id) > 0;
    p.split = train ? "train" : "test";
    (train ? report.train_pairs : report.test_pairs)++;
    body += to_json(p).dump();
    body += '\n';
  }
  report.total = pairs.size();
  try {
    write_file_atomic(path, body);
  } catch (const fs::filesystem_error& e) {
    throw IoError(fmt::format("cannot write {}: {}", path.string(), e.what()));
  }
  return report;
}

}  // namespace forge::pairs
