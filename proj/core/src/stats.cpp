#include "forge/stats.hpp"

#include <algorithm>
#include <set>

#include <fmt/format.h>

#include "forge/pairs.hpp"

namespace forge::stats {

std::size_t ScoreHistogram::count(Aspect a, int value) const {
  if (value < 1 || value > 5) return 0;
  auto it = counts.find(a);
  return it == counts.end() ? 0 : it->second[static_cast<std::size_t>(value - 1)];
}

ScoreHistogram score_distribution(const std::vector<AnnotationRecord>& annotations) {
  if (annotations.empty()) throw ValidationError("score distribution of an empty annotation set");
  ScoreHistogram h;
  for (Aspect a : judge::kAspects) h.counts[a] = {};
  for (const auto& r : annotations) {
    for (Aspect a : judge::kAspects) {
      int v = r.scores.get(a);
      if (v < 1 || v > 5) throw ValidationError(fmt::format("rating {} outside 1..5", v));
      ++h.counts[a][static_cast<std::size_t>(v - 1)];
    }
  }
  h.total = annotations.size();
  return h;
}

LeaderboardRow make_row(std::string model_id, Rational helpfulness, Rational visual_faithfulness, Rational ethics,
                        std::size_t annotations) {
  LeaderboardRow row{std::move(model_id), annotations, helpfulness, visual_faithfulness, ethics, {}};
  row.mean_overall = pairs::mean_of_three(helpfulness, visual_faithfulness, ethics);
  return row;
}

std::vector<LeaderboardRow> model_leaderboard(const std::vector<AnnotationRecord>& annotations) {
  if (annotations.empty()) throw ValidationError("leaderboard of an empty annotation set");
  struct Sums {
    std::int64_t h = 0, v = 0, e = 0, n = 0;
  };
  std::map<std::string, Sums> sums;
  for (const auto& r : annotations) {
    auto& s = sums[r.model_id];
    s.h += r.scores.helpfulness;
    s.v += r.scores.visual_faithfulness;
    s.e += r.scores.ethics;
    ++s.n;
  }
  std::vector<LeaderboardRow> rows;
  for (const auto& [model, s] : sums) {
    rows.push_back(make_row(model, Rational(s.h, s.n), Rational(s.v, s.n), Rational(s.e, s.n),
                            static_cast<std::size_t>(s.n)));
  }
  std::stable_sort(rows.begin(), rows.end(), [](const LeaderboardRow& a, const LeaderboardRow& b) {
    return a.mean_overall > b.mean_overall;
  });
  return rows;
}

std::string_view to_string(Choice c) {
  switch (c) {
    case Choice::A:
      return "A";
    case Choice::B:
      return "B";
    case Choice::Tie:
      return "tie";
  }
  return "tie";
}

std::optional<Choice> parse_choice(std::string_view s) {
  if (s == "A" || s == "a") return Choice::A;
  if (s == "B" || s == "b") return Choice::B;
  if (s == "tie" || s == "Tie" || s == "TIE") return Choice::Tie;
  return std::nullopt;
}

Choice judge_preference(int sum3_a, int sum3_b) {
  if (sum3_a > sum3_b) return Choice::A;
  if (sum3_a < sum3_b) return Choice::B;
  return Choice::Tie;
}

Choice judge_preference(const Comparison& c, const std::vector<AnnotationRecord>& annotations) {
  const AnnotationRecord* a = nullptr;
  const AnnotationRecord* b = nullptr;
  for (const auto& r : annotations) {
    if (r.instruction_id != c.instruction_id) continue;
    if (r.model_id == c.model_a) a = &r;
    if (r.model_id == c.model_b) b = &r;
  }
  if (a == nullptr || b == nullptr) {
    throw ValidationError(fmt::format("comparison {}: missing annotation for {}", c.comparison_id,
                                      a == nullptr ? c.model_a : c.model_b));
  }
  return judge_preference(pairs::overall_score(a->scores).sum3, pairs::overall_score(b->scores).sum3);
}

json to_json(const HumanVote& v) {
  return json{{"annotator_id", v.annotator_id},
              {"comparison_id", v.comparison_id},
              {"choice", to_string(v.choice)},
              {"recorded_at", v.recorded_at}};
}

HumanVote vote_from_json(const json& j) {
  try {
    HumanVote v;
    v.annotator_id = j.at("annotator_id").get<std::string>();
    v.comparison_id = j.at("comparison_id").get<std::string>();
    auto c = parse_choice(j.at("choice").get<std::string>());
    if (!c) throw ValidationError("choice must be A, B or tie");
    v.choice = *c;
    v.recorded_at = j.value("recorded_at", std::string{});
    return v;
  } catch (const json::exception& e) {
    throw ValidationError(fmt::format("invalid vote record: {}", e.what()));
  }
}

AgreementReport agreement_rate(const std::vector<HumanVote>& votes, const std::map<std::string, Choice>& judge_prefs,
                               const AgreementOptions& options) {
  std::set<std::pair<std::string, std::string>> seen;
  std::map<std::string, std::pair<std::int64_t, std::int64_t>> per;  // matches, total
  AgreementReport report;
  for (const auto& v : votes) {
    auto it = judge_prefs.find(v.comparison_id);
    if (it == judge_prefs.end()) throw ValidationError(fmt::format("vote for unknown comparison {}", v.comparison_id));
    if (it->second == Choice::Tie) {
      throw ValidationError(fmt::format("comparison {} is a judge tie and cannot be scored", v.comparison_id));
    }
    if (!seen.emplace(v.annotator_id, v.comparison_id).second) continue;
    if (v.choice == Choice::Tie && !options.tie_is_disagreement) continue;
    auto& [m, n] = per[v.annotator_id];
    ++n;
    ++report.votes;
    if (v.choice == it->second) {
      ++m;
      ++report.matches;
    }
  }
  if (report.votes == 0) throw ValidationError("agreement rate over zero votes");
  report.micro = Rational(static_cast<std::int64_t>(report.matches), static_cast<std::int64_t>(report.votes));
  Rational sum;
  for (const auto& [annotator, mn] : per) {
    Rational r(mn.first, mn.second);
    report.per_annotator[annotator] = r;
    sum += r;
  }
  report.macro = sum / Rational(static_cast<std::int64_t>(per.size()));
  return report;
}

json rational_json(const Rational& r) {
  return json{{"num", r.num()}, {"den", r.den()}, {"value", r.to_double()}, {"display", r.to_fixed(2)}};
}

json to_json(const ScoreHistogram& h) {
  json j{{"total", h.total}};
  for (const auto& [a, counts] : h.counts) {
    json c = json::object();
    for (int v = 1; v <= 5; ++v) c[std::to_string(v)] = counts[static_cast<std::size_t>(v - 1)];
    j["aspects"][std::string(judge::aspect_key(a))] = c;
  }
  return j;
}

json to_json(const LeaderboardRow& r) {
  return json{{"model_id", r.model_id},
              {"annotations", r.annotations},
              {"mean_helpfulness", rational_json(r.mean_helpfulness)},
              {"mean_visual_faithfulness", rational_json(r.mean_visual_faithfulness)},
              {"mean_ethics", rational_json(r.mean_ethics)},
              {"mean_overall", rational_json(r.mean_overall)}};
}

json to_json(const AgreementReport& r) {
  json per = json::object();
  for (const auto& [a, rate] : r.per_annotator) per[a] = rational_json(rate);
  return json{{"micro", rational_json(r.micro)},
              {"macro", rational_json(r.macro)},
              {"per_annotator", per},
              {"votes", r.votes},
              {"matches", r.matches}};
}

void write_report(const fs::path& dir, const ScoreHistogram& histogram, const std::vector<LeaderboardRow>& leaderboard,
                  const std::optional<AgreementReport>& agreement) {
  json report{{"histogram", to_json(histogram)}, {"leaderboard", json::array()}};
  for (const auto& row : leaderboard) report["leaderboard"].push_back(to_json(row));
  if (agreement) report["agreement"] = to_json(*agreement);
  write_file_atomic(dir / "report.json", report.dump(2) + "\n");

  std::string hist = "aspect,score,count\n";
  for (const auto& [a, counts] : histogram.counts) {
    for (int v = 1; v <= 5; ++v) {
      hist += fmt::format("{},{},{}\n", judge::aspect_key(a), v, counts[static_cast<std::size_t>(v - 1)]);
    }
  }
  write_file_atomic(dir / "histogram.csv", hist);

  std::string board = "model_id,annotations,helpfulness,visual_faithfulness,ethics,overall\n";
  for (const auto& r : leaderboard) {
    board += fmt::format("{},{},{},{},{},{}\n", r.model_id, r.annotations, r.mean_helpfulness.to_fixed(2),
                         r.mean_visual_faithfulness.to_fixed(2), r.mean_ethics.to_fixed(2), r.mean_overall.to_fixed(2));
  }
  write_file_atomic(dir / "leaderboard.csv", board);

  if (agreement) {
    std::string agr = "annotator,rate\n";
    for (const auto& [a, rate] : agreement->per_annotator) agr += fmt::format("{},{}\n", a, rate.to_fixed(4));
    agr += fmt::format("micro,{}\nmacro,{}\n", agreement->micro.to_fixed(4), agreement->macro.to_fixed(4));
    write_file_atomic(dir / "agreement.csv", agr);
  }
}

}  // namespace forge::stats
