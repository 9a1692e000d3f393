// Paths, scratch directories and hand-built fixtures shared by the test binaries.
#pragma once

#include <cstdlib>
#include <string>
#include <vector>

#include "forge/io.hpp"
#include "forge/judge.hpp"
#include "forge/review.hpp"
#include "forge/stats.hpp"

namespace forge::testing {

inline fs::path source_dir() { return FORGE_SOURCE_DIR; }
inline fs::path fixture_path(const std::string& rel) { return source_dir() / "fixtures" / rel; }
inline fs::path data_path(const std::string& rel) { return source_dir() / "tests" / "data" / rel; }

class TempDir {
 public:
  TempDir() {
    std::string tmpl = (fs::temp_directory_path() / "forge-test-XXXXXX").string();
    if (::mkdtemp(tmpl.data()) == nullptr) throw IoError("mkdtemp failed");
    path_ = tmpl;
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  fs::path path_;
};

inline void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream(path, std::ios::binary) << text;
}

inline judge::AnnotationRecord annotation(std::string instruction_id, std::string model_id, int h, int v, int e) {
  judge::AnnotationRecord r;
  r.instruction_id = std::move(instruction_id);
  r.model_id = std::move(model_id);
  r.scores = {h, v, e};
  for (auto a : judge::kAspects) r.rationales[a] = "ok";
  r.judge_id = "fixture-judge";
  r.raw_output = judge::format_ratings(r.scores, r.rationales);
  return r;
}

/// Appends `count` records for `model` where each aspect takes value `hi` in the
/// first `n_hi[a]` records and `lo` elsewhere.
inline void add_model_records(std::vector<judge::AnnotationRecord>& out, const std::string& model, int count,
                              int h_hi, int h_lo, int n_h, int v_hi, int v_lo, int n_v, int e_hi, int e_lo, int n_e) {
  for (int i = 0; i < count; ++i) {
    out.push_back(annotation("i" + std::to_string(i), model, i < n_h ? h_hi : h_lo, i < n_v ? v_hi : v_lo,
                             i < n_e ? e_hi : e_lo));
  }
}

/// 100 records per model whose aspect means are exactly
/// gpt-4v: 4.54 / 4.59 / 4.96 and qwen-vl-chat: 3.33 / 3.62 / 4.86.
inline std::vector<judge::AnnotationRecord> leaderboard_fixture() {
  std::vector<judge::AnnotationRecord> out;
  add_model_records(out, "gpt-4v", 100, 5, 4, 54, 5, 4, 59, 5, 4, 96);
  add_model_records(out, "qwen-vl-chat", 100, 4, 3, 33, 4, 3, 62, 5, 4, 86);
  return out;
}

/// Four comparisons with judge preferences A, B, A, B. Annotators ann1 and
/// ann2 each disagree once, ann3 agrees on all four: 10 matches out of 12.
struct AgreementFixture {
  std::map<std::string, stats::Choice> judge_prefs;
  std::vector<stats::HumanVote> votes;
};

inline AgreementFixture agreement_fixture() {
  using stats::Choice;
  AgreementFixture f;
  f.judge_prefs = {{"c1", Choice::A}, {"c2", Choice::B}, {"c3", Choice::A}, {"c4", Choice::B}};
  const std::map<std::string, std::vector<Choice>> choices = {
      {"ann1", {Choice::A, Choice::B, Choice::B, Choice::B}},
      {"ann2", {Choice::A, Choice::Tie, Choice::A, Choice::B}},
      {"ann3", {Choice::A, Choice::B, Choice::A, Choice::B}},
  };
  for (const auto& [annotator, picks] : choices) {
    for (std::size_t i = 0; i < picks.size(); ++i) {
      f.votes.push_back({annotator, "c" + std::to_string(i + 1), picks[i], "2024-01-01T00:00:00Z"});
    }
  }
  return f;
}

/// The same four comparisons as a review set with distinct texts and model ids.
inline review::ReviewSet agreement_review_set() {
  review::ReviewSet set;
  set.seed = 0;
  for (const auto& [id, pref] : agreement_fixture().judge_prefs) {
    review::ReviewComparison c;
    c.comparison_id = id;
    c.instruction_id = "inst-" + id;
    c.prompt = "Prompt for " + id;
    c.response_a = "First answer for " + id;
    c.response_b = "Second answer for " + id;
    c.model_a = "hidden-model-alpha";
    c.model_b = "hidden-model-beta";
    c.judge_pref = pref;
    set.comparisons.push_back(std::move(c));
  }
  return set;
}

}  // namespace forge::testing
