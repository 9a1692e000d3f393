// Assessment templates, judge-output parsing and batch annotation.
#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "forge/corpus.hpp"
#include "forge/decoder.hpp"
#include "forge/endpoint.hpp"

namespace forge::judge {

enum class Aspect { Helpfulness, VisualFaithfulness, Ethics };

inline constexpr std::array<Aspect, 3> kAspects = {Aspect::Helpfulness, Aspect::VisualFaithfulness,
                                                   Aspect::Ethics};

/// Record key: "helpfulness", "visual_faithfulness", "ethics".
std::string_view aspect_key(Aspect a);
/// Heading used in judge output: "Helpfulness", "Visual Faithfulness", "Ethical Considerations".
std::string_view aspect_heading(Aspect a);
std::optional<Aspect> aspect_from_key(std::string_view key);

struct AspectScores {
  int helpfulness = 0;
  int visual_faithfulness = 0;
  int ethics = 0;

  int get(Aspect a) const;
  void set(Aspect a, int value);
  bool valid() const;
  friend bool operator==(const AspectScores&, const AspectScores&) = default;
};

using Rationales = std::map<Aspect, std::string>;

struct ParsedRatings {
  AspectScores scores;
  Rationales rationales;
};

class RatingParseError : public ValidationError {
 public:
  enum class Kind { MissingAspect, OutOfRange, DuplicateAspect, MalformedRating };
  RatingParseError(Kind kind, Aspect aspect, std::string detail);
  Kind kind() const { return kind_; }
  Aspect aspect() const { return aspect_; }

 private:
  Kind kind_;
  Aspect aspect_;
};

/// Extracts one integer rating per aspect from heading lines of the form
/// `N. **Helpfulness (Rating: 5)**: rationale ...`. The rationale is the rest of
/// that aspect's block up to the next heading line. Non-integer ratings ("4.5")
/// are rejected, never rounded.
ParsedRatings parse_ratings(std::string_view raw);

/// Same rules, restricted to the listed aspects (per-aspect judging mode).
ParsedRatings parse_ratings(std::string_view raw, const std::vector<Aspect>& aspects);

/// Numbered block format, helpfulness / ethical considerations / visual faithfulness.
std::string format_ratings(const AspectScores& scores, const Rationales& rationales);

struct JudgeTemplate {
  std::vector<Aspect> aspects;
  /// Guideline text followed by the task block; contains {{instruction}},
  /// {{images}} and {{response}} placeholders.
  std::string text;
};

/// Guideline text for one aspect, without placeholders.
const std::string& guideline(Aspect a);
JudgeTemplate aspect_template(Aspect a);
/// The three guidelines concatenated, answered in one call.
JudgeTemplate combined_template();
const std::string& judge_system_prompt();
const std::string& format_reminder();

/// Substitutes every placeholder in a single pass, so placeholder-like text
/// inside the instruction or response is never expanded. Throws ValidationError
/// naming any placeholder it has no value for.
endpoint::ChatRequest render_template(const JudgeTemplate& tmpl, const corpus::InstructionRecord& instruction,
                                      const decoder::ResponseRecord& response);

/// Response text embedded in a rendered judge prompt, if the delimiters are intact.
std::optional<std::string> extract_response(std::string_view rendered_user_text);

struct AnnotationRecord {
  std::string instruction_id;
  std::string model_id;
  AspectScores scores;
  Rationales rationales;
  std::string judge_id;
  std::string raw_output;
  int parse_attempts = 1;
};

json to_json(const AnnotationRecord& r);
AnnotationRecord annotation_from_json(const json& j);

/// Judge replies that never parsed; kept verbatim.
struct ParseFailureRecord {
  std::string instruction_id;
  std::string model_id;
  std::string judge_id;
  std::string raw_output;
  int parse_attempts = 0;
  std::string error;
};

json to_json(const ParseFailureRecord& r);
ParseFailureRecord parse_failure_from_json(const json& j);

/// annotations.jsonl, parse_failures.jsonl and failures.jsonl (transport) in one
/// directory. A response counts as done once it has an annotation or a parse failure.
class AnnotationStore {
 public:
  explicit AnnotationStore(const fs::path& dir);

  bool done(const std::string& instruction_id, const std::string& model_id) const;
  bool append(const AnnotationRecord& record);
  bool append(const ParseFailureRecord& record);
  void log_failure(const json& failure);

  std::vector<AnnotationRecord> annotations() const;
  std::vector<ParseFailureRecord> parse_failures() const;
  const fs::path& annotations_path() const { return annotations_path_; }

 private:
  fs::path annotations_path_;
  mutable std::mutex mu_;
  std::set<std::pair<std::string, std::string>> done_;
  std::vector<AnnotationRecord> annotations_;
  std::vector<ParseFailureRecord> parse_failures_;
  JsonlAppender annotations_out_;
  JsonlAppender parse_failures_out_;
  JsonlAppender failures_out_;
};

std::vector<AnnotationRecord> load_annotations(const fs::path& path);
std::vector<ParseFailureRecord> load_parse_failures(const fs::path& dir);

struct AnnotateOptions {
  bool per_aspect = false;
  int parse_retries = 2;
  std::size_t concurrency = 1;
  double requests_per_minute = 0;
  endpoint::RetryPolicy retry;
  std::uint64_t seed = 0;
};

struct AnnotateReport {
  std::size_t annotated = 0;
  std::size_t parse_failures = 0;
  std::size_t transport_failures = 0;
  std::size_t skipped = 0;
  std::size_t judge_calls = 0;
};

json to_json(const AnnotateReport& r);

/// Judge spec with temperature 0 filled in when the config leaves it unset.
endpoint::ModelSpec with_judge_defaults(endpoint::ModelSpec judge);

/// One annotation per response. Unparseable replies are re-queried with a
/// format reminder up to `parse_retries` times, then stored as parse failures.
/// Throws ValidationError if a response's instruction is missing.
AnnotateReport annotate_batch(const corpus::InstructionSet& instructions,
                              const std::vector<decoder::ResponseRecord>& responses,
                              const endpoint::ModelSpec& judge, const AnnotateOptions& options,
                              AnnotationStore& store, endpoint::ChatClient& client);

/// Scores assigned by the mock://judge-length endpoint to a response of
/// `length` bytes: helpfulness 1 + min(4, length / 30), visual faithfulness
/// 1 + length % 5, ethics 2 when length % 13 == 0 and 5 otherwise.
AspectScores length_judge_scores(std::size_t length);
endpoint::MockHandler length_judge_handler();

}  // namespace forge::judge
