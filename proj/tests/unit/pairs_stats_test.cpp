#include <map>
#include <set>

#include <fmt/format.h>
#include <gtest/gtest.h>

#include "forge/pairs.hpp"
#include "forge/rational.hpp"
#include "forge/stats.hpp"
#include "support.hpp"

using namespace forge;
using forge::testing::annotation;
using forge::testing::TempDir;

namespace {

// One instruction whose four responses get the given aspect triples.
struct Group {
  std::vector<judge::AnnotationRecord> annotations;
  std::vector<decoder::ResponseRecord> responses;
  corpus::InstructionSet instructions;
};

void add_instruction(Group& g, const std::string& iid, const std::vector<judge::AspectScores>& scores) {
  g.instructions.records.push_back({iid, corpus::Source::LRV, {}, "prompt " + iid});
  g.instructions.manifest = corpus::count_sources(g.instructions.records);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    std::string model = "m" + std::to_string(i);
    g.responses.push_back({iid, model, "text " + iid + " " + model, json::object(), "t", 1});
    g.annotations.push_back(annotation(iid, model, scores[i].helpfulness, scores[i].visual_faithfulness,
                                       scores[i].ethics));
  }
}

// Triples with the requested sums.
judge::AspectScores with_sum(int sum3) {
  int h = std::min(5, sum3 - 2);
  int v = std::min(5, sum3 - h - 1);
  return {h, v, sum3 - h - v};
}

pairs::BuildResult build_for_sums(const std::vector<int>& sums) {
  Group g;
  std::vector<judge::AspectScores> s;
  for (int x : sums) s.push_back(with_sum(x));
  add_instruction(g, "q", s);
  return pairs::build_pairs(g.annotations, g.responses, g.instructions);
}

}  // namespace

TEST(Rational, NormalizesAndRoundsHalfUp) {
  EXPECT_EQ(Rational(2, 4), Rational(1, 2));
  EXPECT_EQ(Rational(1, -2).num(), -1);
  EXPECT_EQ(Rational(1409, 300).to_fixed(2), "4.70");
  EXPECT_EQ(Rational(1, 8).to_fixed(2), "0.13");
  EXPECT_EQ(Rational(-1, 8).to_fixed(2), "-0.13");
  EXPECT_EQ(Rational(5).to_fixed(2), "5.00");
  EXPECT_EQ(Rational(10, 12).to_fixed(3), "0.833");
  EXPECT_EQ(Rational(1, 3) + Rational(1, 6), Rational(1, 2));
  EXPECT_LT(Rational(1, 3), Rational(1, 2));
  EXPECT_THROW(Rational(1, 0), std::exception);
}

TEST(OverallScore, ExactThirds) {
  EXPECT_EQ(pairs::overall_score({5, 5, 5}).sum3, 15);
  EXPECT_EQ(pairs::overall_score({5, 5, 5}).average(), Rational(5));
  EXPECT_EQ(pairs::overall_score({1, 2, 3}).average(), Rational(2));
  EXPECT_EQ(pairs::mean_of_three(Rational(454, 100), Rational(459, 100), Rational(496, 100)).to_fixed(2), "4.70");
}

TEST(BuildPairs, DistinctScoresGiveSixPairs) {
  auto r = build_for_sums({14, 12, 9, 7});
  EXPECT_EQ(r.pairs.size(), 6u);
  EXPECT_EQ(r.dropped_ties, 0u);
  EXPECT_EQ(r.groups.at("q").responses, 4u);
  // Sorted by descending margin.
  EXPECT_EQ(r.pairs.front().margin_thirds(), 7);
  EXPECT_EQ(r.pairs.back().margin_thirds(), 2);
  for (const auto& p : r.pairs) {
    EXPECT_GT(p.chosen.overall.sum3, p.rejected.overall.sum3);
    EXPECT_EQ(p.prompt, "prompt q");
  }
}

TEST(BuildPairs, OneTieDropped) {
  auto r = build_for_sums({14, 12, 12, 7});
  EXPECT_EQ(r.pairs.size(), 5u);
  EXPECT_EQ(r.dropped_ties, 1u);
  for (const auto& p : r.pairs) EXPECT_NE(p.chosen.overall.sum3, p.rejected.overall.sum3);
}

TEST(BuildPairs, AllTied) {
  auto r = build_for_sums({10, 10, 10, 10});
  EXPECT_TRUE(r.pairs.empty());
  EXPECT_EQ(r.dropped_ties, 6u);
}

TEST(BuildPairs, SingletonGroupIsSkipped) {
  auto r = build_for_sums({10});
  EXPECT_TRUE(r.pairs.empty());
  ASSERT_EQ(r.skipped_groups.size(), 1u);
}

TEST(BuildPairs, CardinalityOverRandomGroups) {
  Rng rng(17);
  Group g;
  for (int i = 0; i < 60; ++i) {
    std::size_t k = 2 + rng.below(5);
    std::vector<judge::AspectScores> s;
    for (std::size_t j = 0; j < k; ++j) {
      s.push_back({1 + static_cast<int>(rng.below(5)), 1 + static_cast<int>(rng.below(5)),
                   1 + static_cast<int>(rng.below(5))});
    }
    add_instruction(g, fmt::format("inst-{:02}", i), s);
  }
  auto r = pairs::build_pairs(g.annotations, g.responses, g.instructions);
  std::map<std::string, std::size_t> emitted;
  for (const auto& p : r.pairs) ++emitted[p.instruction_id];
  for (const auto& [iid, st] : r.groups) {
    EXPECT_EQ(emitted[iid] + st.ties, st.responses * (st.responses - 1) / 2) << iid;
  }
}

TEST(BuildPairs, AnnotationWithoutResponseIsRejected) {
  Group g;
  add_instruction(g, "q", {{5, 5, 5}, {1, 1, 1}});
  g.responses.pop_back();
  EXPECT_THROW(pairs::build_pairs(g.annotations, g.responses, g.instructions), ValidationError);
}

TEST(ExportPairs, InstructionsStayWhole) {
  TempDir dir;
  Group g;
  add_instruction(g, "a", {{5, 5, 5}, {4, 4, 4}, {3, 3, 3}});
  add_instruction(g, "b", {{5, 5, 5}, {4, 4, 4}, {3, 3, 3}});
  auto built = pairs::build_pairs(g.annotations, g.responses, g.instructions);
  ASSERT_EQ(built.pairs.size(), 6u);
  auto report = pairs::export_pairs(built.pairs, dir / "pairs.jsonl", {0.5, 3});
  EXPECT_EQ(report.train_instructions, 1u);
  EXPECT_EQ(report.test_instructions, 1u);
  std::map<std::string, std::set<std::string>> splits;
  for (const auto& p : pairs::load_pairs(dir / "pairs.jsonl")) splits[p.instruction_id].insert(p.split);
  for (const auto& [iid, s] : splits) EXPECT_EQ(s.size(), 1u) << iid;
}

TEST(ExportPairs, FullTrainFraction) {
  TempDir dir;
  auto built = build_for_sums({14, 12, 9, 7});
  auto report = pairs::export_pairs(built.pairs, dir / "pairs.jsonl", {1.0, 0});
  EXPECT_EQ(report.train_pairs, 6u);
  EXPECT_EQ(report.test_pairs, 0u);
  EXPECT_THROW(pairs::export_pairs(built.pairs, dir / "x.jsonl", {1.5, 0}), ValidationError);
}

TEST(ExportPairs, ReportMatchesRecount) {
  TempDir dir;
  Group g;
  Rng rng(5);
  for (int i = 0; i < 10; ++i) {
    std::vector<judge::AspectScores> s;
    for (int j = 0; j < 4; ++j) {
      s.push_back({1 + static_cast<int>(rng.below(5)), 1 + static_cast<int>(rng.below(5)),
                   1 + static_cast<int>(rng.below(5))});
    }
    add_instruction(g, "i" + std::to_string(i), s);
  }
  auto built = pairs::build_pairs(g.annotations, g.responses, g.instructions);
  auto report = pairs::export_pairs(built.pairs, dir / "pairs.jsonl", {0.7, 9});
  std::size_t train = 0, test = 0;
  std::set<std::string> train_ids, test_ids;
  for (const auto& l : read_jsonl(dir / "pairs.jsonl")) {
    const auto& v = *l.value;
    if (v["split"] == "train") {
      ++train;
      train_ids.insert(v["instruction_id"].get<std::string>());
    } else {
      ++test;
      test_ids.insert(v["instruction_id"].get<std::string>());
    }
  }
  EXPECT_EQ(report.total, train + test);
  EXPECT_EQ(report.train_pairs, train);
  EXPECT_EQ(report.test_pairs, test);
  EXPECT_EQ(report.train_instructions, train_ids.size());
  EXPECT_EQ(report.test_instructions, test_ids.size());
}

TEST(Histogram, DirectCounts) {
  std::vector<judge::AnnotationRecord> a{annotation("1", "m", 5, 1, 1), annotation("2", "m", 4, 1, 1),
                                         annotation("3", "m", 5, 1, 1)};
  auto h = stats::score_distribution(a);
  EXPECT_EQ(h.total, 3u);
  EXPECT_EQ(h.count(judge::Aspect::Helpfulness, 4), 1u);
  EXPECT_EQ(h.count(judge::Aspect::Helpfulness, 5), 2u);
  EXPECT_EQ(h.count(judge::Aspect::Helpfulness, 3), 0u);
  EXPECT_THROW(stats::score_distribution({}), ValidationError);
}

TEST(Histogram, AllFives) {
  std::vector<judge::AnnotationRecord> a;
  for (int i = 0; i < 7; ++i) a.push_back(annotation(std::to_string(i), "m", 5, 5, 5));
  auto h = stats::score_distribution(a);
  for (auto asp : judge::kAspects) EXPECT_EQ(h.count(asp, 5), 7u);
}

TEST(Histogram, MatchesBruteForceTally) {
  Rng rng(2024);
  std::vector<judge::AnnotationRecord> a;
  int tally[3][5] = {};
  for (int i = 0; i < 1000; ++i) {
    int s[3];
    for (int& x : s) x = 1 + static_cast<int>(rng.below(5));
    for (int k = 0; k < 3; ++k) ++tally[k][s[k] - 1];
    a.push_back(annotation(std::to_string(i), "m", s[0], s[1], s[2]));
  }
  auto h = stats::score_distribution(a);
  EXPECT_EQ(h.total, 1000u);
  for (int v = 1; v <= 5; ++v) {
    EXPECT_EQ(h.count(judge::Aspect::Helpfulness, v), static_cast<std::size_t>(tally[0][v - 1]));
    EXPECT_EQ(h.count(judge::Aspect::VisualFaithfulness, v), static_cast<std::size_t>(tally[1][v - 1]));
    EXPECT_EQ(h.count(judge::Aspect::Ethics, v), static_cast<std::size_t>(tally[2][v - 1]));
  }
}

TEST(Leaderboard, PublishedRowsRoundAsPrinted) {
  auto rows = stats::model_leaderboard(forge::testing::leaderboard_fixture());
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].model_id, "gpt-4v");
  EXPECT_EQ(rows[0].mean_helpfulness, Rational(454, 100));
  EXPECT_EQ(rows[0].mean_visual_faithfulness, Rational(459, 100));
  EXPECT_EQ(rows[0].mean_ethics, Rational(496, 100));
  EXPECT_EQ(rows[0].mean_overall, Rational(1409, 300));
  EXPECT_EQ(rows[0].mean_overall.to_fixed(2), "4.70");
  EXPECT_EQ(rows[1].mean_overall.to_fixed(2), "3.94");
  EXPECT_EQ(stats::make_row("x", Rational(333, 100), Rational(362, 100), Rational(486, 100)).mean_overall,
            Rational(1181, 300));
}

TEST(Leaderboard, SingletonAndPermutationInvariance) {
  auto one = stats::model_leaderboard({annotation("i", "solo", 5, 5, 5)});
  EXPECT_EQ(one[0].mean_overall.to_fixed(2), "5.00");
  auto records = forge::testing::leaderboard_fixture();
  auto before = stats::model_leaderboard(records);
  Rng rng(1);
  rng.shuffle(std::span(records));
  auto after = stats::model_leaderboard(records);
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(before[i].mean_overall, after[i].mean_overall);
}

TEST(JudgePreference, SumComparison) {
  EXPECT_EQ(stats::judge_preference(14, 9), stats::Choice::A);
  EXPECT_EQ(stats::judge_preference(9, 9), stats::Choice::Tie);
  EXPECT_EQ(stats::judge_preference(9, 14), stats::Choice::B);
  std::vector<judge::AnnotationRecord> a{annotation("i", "x", 5, 4, 5), annotation("i", "y", 3, 3, 3)};
  EXPECT_EQ(stats::judge_preference({"c", "i", "y", "x"}, a), stats::Choice::B);
  EXPECT_THROW(stats::judge_preference({"c", "i", "y", "z"}, a), ValidationError);
}

TEST(Agreement, TenOfTwelve) {
  auto f = forge::testing::agreement_fixture();
  auto r = stats::agreement_rate(f.votes, f.judge_prefs);
  EXPECT_EQ(r.votes, 12u);
  EXPECT_EQ(r.matches, 10u);
  EXPECT_EQ(r.micro, Rational(10, 12));
  EXPECT_EQ(r.per_annotator.at("ann3"), Rational(1));
  EXPECT_EQ(r.per_annotator.at("ann1"), Rational(3, 4));
  EXPECT_EQ(r.macro, Rational(5, 6));
}

TEST(Agreement, AllMatchAndAllTie) {
  auto f = forge::testing::agreement_fixture();
  std::vector<stats::HumanVote> agree, ties;
  for (const auto& [id, pref] : f.judge_prefs) {
    agree.push_back({"a", id, pref, "t"});
    ties.push_back({"a", id, stats::Choice::Tie, "t"});
  }
  EXPECT_EQ(stats::agreement_rate(agree, f.judge_prefs).micro, Rational(1));
  EXPECT_EQ(stats::agreement_rate(ties, f.judge_prefs).micro, Rational(0));
  EXPECT_THROW(stats::agreement_rate(ties, f.judge_prefs, {false}), ValidationError);
}

TEST(Agreement, FirstVoteWinsAndUnknownIdsFail) {
  auto f = forge::testing::agreement_fixture();
  auto votes = f.votes;
  votes.push_back({"ann1", "c3", stats::Choice::A, "later"});  // would flip a mismatch
  EXPECT_EQ(stats::agreement_rate(votes, f.judge_prefs).matches, 10u);
  votes.push_back({"ann1", "c9", stats::Choice::A, "t"});
  EXPECT_THROW(stats::agreement_rate(votes, f.judge_prefs), ValidationError);
  auto prefs = f.judge_prefs;
  prefs["c1"] = stats::Choice::Tie;
  EXPECT_THROW(stats::agreement_rate(f.votes, prefs), ValidationError);
}

TEST(Report, WritesCsvAndJson) {
  TempDir dir;
  auto records = forge::testing::leaderboard_fixture();
  auto f = forge::testing::agreement_fixture();
  stats::write_report(dir.path(), stats::score_distribution(records), stats::model_leaderboard(records),
                      stats::agreement_rate(f.votes, f.judge_prefs));
  auto report = json::parse(read_file(dir / "report.json"));
  EXPECT_TRUE(report.contains("leaderboard"));
  EXPECT_NE(read_file(dir / "leaderboard.csv").find("4.70"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir / "agreement.csv"));
  EXPECT_TRUE(fs::exists(dir / "histogram.csv"));
}
