// Overall ratings and preference-pair construction.
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "forge/corpus.hpp"
#include "forge/decoder.hpp"
#include "forge/judge.hpp"
#include "forge/rational.hpp"

namespace forge::pairs {

/// Overall rating kept as the integer aspect sum; the average is sum3 / 3.
/// All comparisons use sum3, so ties are exact.
struct OverallScore {
  int sum3 = 0;

  Rational average() const { return Rational(sum3, 3); }
  friend auto operator<=>(const OverallScore&, const OverallScore&) = default;
};

OverallScore overall_score(const judge::AspectScores& scores);

/// Unweighted mean of three aspect values, exact.
Rational mean_of_three(const Rational& a, const Rational& b, const Rational& c);

struct PairSide {
  std::string model_id;
  std::string text;
  OverallScore overall;
};

struct PreferencePair {
  std::string instruction_id;
  std::string prompt;
  std::vector<std::string> images;
  PairSide chosen;
  PairSide rejected;
  /// "train" / "test" once exported with a split; empty otherwise.
  std::string split;

  /// (chosen.average - rejected.average) * 3, always positive.
  int margin_thirds() const { return chosen.overall.sum3 - rejected.overall.sum3; }
  Rational margin() const { return Rational(margin_thirds(), 3); }
};

json to_json(const PreferencePair& p);
PreferencePair pair_from_json(const json& j);
std::vector<PreferencePair> load_pairs(const fs::path& path);

struct GroupStats {
  std::size_t responses = 0;  ///< K
  std::size_t pairs = 0;
  std::size_t ties = 0;
};

struct BuildResult {
  std::vector<PreferencePair> pairs;
  std::size_t dropped_ties = 0;
  std::vector<std::string> skipped_groups;  ///< instructions with K < 2
  std::map<std::string, GroupStats> groups;
};

/// Every unordered pair of annotated responses to the same instruction with
/// different sum3 yields one pair, the higher one chosen; tied pairs are counted
/// and dropped. Responses whose judge output never parsed have no annotation and
/// so simply do not take part. Output is sorted by instruction_id, then
/// descending margin, then chosen and rejected model_id. Throws ValidationError
/// when an annotation has no matching response or instruction.
BuildResult build_pairs(const std::vector<judge::AnnotationRecord>& annotations,
                        const std::vector<decoder::ResponseRecord>& responses,
                        const corpus::InstructionSet& instructions);

struct SplitOptions {
  double train_fraction = 1.0;
  std::uint64_t seed = 0;
};

struct ExportReport {
  std::size_t total = 0;
  std::size_t train_pairs = 0;
  std::size_t test_pairs = 0;
  std::size_t train_instructions = 0;
  std::size_t test_instructions = 0;
};

json to_json(const ExportReport& r);

/// Assigns whole instructions to train or test (round(train_fraction * #instructions)
/// instructions to train, chosen by a seeded shuffle of the sorted ids) and writes
/// one pair per line with its "split" field.
ExportReport export_pairs(std::vector<PreferencePair> pairs, const fs::path& path, const SplitOptions& split);

}  // namespace forge::pairs
