// Score distributions, per-model leaderboard and judge/human agreement.
#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "forge/judge.hpp"
#include "forge/rational.hpp"

namespace forge::stats {

using judge::Aspect;
using judge::AnnotationRecord;

struct ScoreHistogram {
  /// counts[aspect][v - 1] is the number of ratings equal to v.
  std::map<Aspect, std::array<std::size_t, 5>> counts;
  std::size_t total = 0;

  std::size_t count(Aspect a, int value) const;
};

/// Throws ValidationError on empty input.
ScoreHistogram score_distribution(const std::vector<AnnotationRecord>& annotations);

struct LeaderboardRow {
  std::string model_id;
  std::size_t annotations = 0;
  Rational mean_helpfulness;
  Rational mean_visual_faithfulness;
  Rational mean_ethics;
  Rational mean_overall;
};

/// Row whose overall column is the exact mean of the three aspect means.
LeaderboardRow make_row(std::string model_id, Rational helpfulness, Rational visual_faithfulness, Rational ethics,
                        std::size_t annotations = 0);

/// Rows sorted by mean_overall descending (model_id ascending on ties).
std::vector<LeaderboardRow> model_leaderboard(const std::vector<AnnotationRecord>& annotations);

enum class Choice { A, B, Tie };
std::string_view to_string(Choice c);
std::optional<Choice> parse_choice(std::string_view s);

/// A if sum3_a > sum3_b, B if lower, Tie if equal.
Choice judge_preference(int sum3_a, int sum3_b);

struct Comparison {
  std::string comparison_id;
  std::string instruction_id;
  std::string model_a;
  std::string model_b;
};

/// Looks both responses up in `annotations`; throws ValidationError if either is missing.
Choice judge_preference(const Comparison& comparison, const std::vector<AnnotationRecord>& annotations);

struct HumanVote {
  std::string annotator_id;
  std::string comparison_id;
  Choice choice = Choice::Tie;
  std::string recorded_at;
};

json to_json(const HumanVote& v);
HumanVote vote_from_json(const json& j);

struct AgreementOptions {
  /// When false, human "tie" votes are left out of the denominator instead.
  bool tie_is_disagreement = true;
};

struct AgreementReport {
  Rational micro;  ///< matches / votes over all (annotator, comparison) votes
  Rational macro;  ///< mean of per-annotator rates
  std::map<std::string, Rational> per_annotator;
  std::size_t votes = 0;
  std::size_t matches = 0;
};

/// Only the first vote per (annotator, comparison) counts. Throws ValidationError
/// for votes on unknown comparisons, comparisons the judge scored as a tie, or an
/// empty vote set.
AgreementReport agreement_rate(const std::vector<HumanVote>& votes, const std::map<std::string, Choice>& judge_prefs,
                               const AgreementOptions& options = {});

json to_json(const ScoreHistogram& h);
json to_json(const LeaderboardRow& r);
json to_json(const AgreementReport& r);
json rational_json(const Rational& r);

/// report.json plus histogram.csv, leaderboard.csv and (with votes) agreement.csv.
void write_report(const fs::path& dir, const ScoreHistogram& histogram, const std::vector<LeaderboardRow>& leaderboard,
                  const std::optional<AgreementReport>& agreement);

}  // namespace forge::stats
