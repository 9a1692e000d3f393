#include "forge/judge.hpp"

#include <algorithm>
#include <regex>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "ordered_pool.hpp"

namespace forge::judge {

std::string_view aspect_key(Aspect a) {
  switch (a) {
    case Aspect::Helpfulness:
      return "helpfulness";
    case Aspect::VisualFaithfulness:
      return "visual_faithfulness";
    case Aspect::Ethics:
      return "ethics";
  }
  return "helpfulness";
}

std::string_view aspect_heading(Aspect a) {
  switch (a) {
    case Aspect::Helpfulness:
      return "Helpfulness";
    case Aspect::VisualFaithfulness:
      return "Visual Faithfulness";
    case Aspect::Ethics:
      return "Ethical Considerations";
  }
  return "Helpfulness";
}

std::optional<Aspect> aspect_from_key(std::string_view key) {
  for (Aspect a : kAspects) {
    if (aspect_key(a) == key) return a;
  }
  return std::nullopt;
}

int AspectScores::get(Aspect a) const {
  switch (a) {
    case Aspect::Helpfulness:
      return helpfulness;
    case Aspect::VisualFaithfulness:
      return visual_faithfulness;
    case Aspect::Ethics:
      return ethics;
  }
  return 0;
}

void AspectScores::set(Aspect a, int value) {
  switch (a) {
    case Aspect::Helpfulness:
      helpfulness = value;
      break;
    case Aspect::VisualFaithfulness:
      visual_faithfulness = value;
      break;
    case Aspect::Ethics:
      ethics = value;
      break;
  }
}

bool AspectScores::valid() const {
  auto ok = [](int v) { return v >= 1 && v <= 5; };
  return ok(helpfulness) && ok(visual_faithfulness) && ok(ethics);
}

namespace {

const char* kind_name(RatingParseError::Kind k) {
  switch (k) {
    case RatingParseError::Kind::MissingAspect:
      return "MissingAspect";
    case RatingParseError::Kind::OutOfRange:
      return "OutOfRange";
    case RatingParseError::Kind::DuplicateAspect:
      return "DuplicateAspect";
    case RatingParseError::Kind::MalformedRating:
      return "MalformedRating";
  }
  return "ParseError";
}

Aspect aspect_from_heading(std::string heading) {
  std::transform(heading.begin(), heading.end(), heading.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (heading.starts_with("help")) return Aspect::Helpfulness;
  if (heading.starts_with("visual")) return Aspect::VisualFaithfulness;
  return Aspect::Ethics;
}

// Only list numbering and markup may precede the aspect name on its line.
bool heading_prefix_ok(std::string_view text, std::size_t pos) {
  std::size_t line_start = text.rfind('\n', pos == 0 ? 0 : pos - 1);
  line_start = (line_start == std::string_view::npos || pos == 0) ? 0 : line_start + 1;
  for (std::size_t i = line_start; i < pos; ++i) {
    char c = text[i];
    if (!(std::isdigit(static_cast<unsigned char>(c)) || c == ' ' || c == '\t' || c == '.' || c == ')' ||
          c == '*' || c == '#' || c == '_' || c == '-' || c == '>' || c == '\\' || c == '{' ||
          std::isalpha(static_cast<unsigned char>(c)))) {
      return false;
    }
  }
  // Letters are allowed only as part of a markup command such as \textbf{.
  std::string_view prefix = text.substr(line_start, pos - line_start);
  for (std::size_t i = 0; i < prefix.size(); ++i) {
    if (std::isalpha(static_cast<unsigned char>(prefix[i]))) {
      auto slash = prefix.rfind('\\', i);
      if (slash == std::string_view::npos) return false;
      for (std::size_t k = slash + 1; k < i; ++k) {
        if (!std::isalpha(static_cast<unsigned char>(prefix[k]))) return false;
      }
    }
  }
  return true;
}

std::size_t line_start_of(std::string_view text, std::size_t pos) {
  if (pos == 0) return 0;
  auto nl = text.rfind('\n', pos - 1);
  return nl == std::string_view::npos ? 0 : nl + 1;
}

std::string clean_rationale(std::string_view block) {
  std::string s = trim(block);
  std::size_t b = 0;
  while (b < s.size() && (s[b] == '*' || s[b] == '_' || s[b] == ':' || s[b] == '}' || s[b] == '-' ||
                          std::isspace(static_cast<unsigned char>(s[b])))) {
    ++b;
  }
  s.erase(0, b);
  while (!s.empty() && (std::isspace(static_cast<unsigned char>(s.back())) || s.back() == '\\')) s.pop_back();
  // A list number left on its own line before the next heading.
  static const std::regex dangling_number(R"(\n[ \t]*[0-9]+[.)]?$)");
  std::smatch m;
  if (std::regex_search(s, m, dangling_number)) {
    s.erase(static_cast<std::size_t>(m.position(0)));
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.pop_back();
  }
  return s;
}

struct Heading {
  Aspect aspect;
  std::size_t line_start;
  std::size_t end;
  std::string token;
};

}  // namespace

RatingParseError::RatingParseError(Kind kind, Aspect aspect, std::string detail)
    : ValidationError(fmt::format("{}({}){}{}", kind_name(kind), aspect_key(aspect), detail.empty() ? "" : ": ",
                                  detail)),
      kind_(kind),
      aspect_(aspect) {}

ParsedRatings parse_ratings(std::string_view raw) {
  return parse_ratings(raw, {kAspects.begin(), kAspects.end()});
}

ParsedRatings parse_ratings(std::string_view raw, const std::vector<Aspect>& aspects) {
  static const std::regex heading_re(
      R"((helpfulness|visual[ \t]+faithfulness|ethical[ \t]+considerations|ethics)[ \t*_}]*\([ \t]*rating[ \t]*:[ \t]*([^)\n]*)\))",
      std::regex::icase);

  std::vector<Heading> headings;
  const std::string text(raw);
  for (auto it = std::sregex_iterator(text.begin(), text.end(), heading_re); it != std::sregex_iterator(); ++it) {
    const auto& m = *it;
    auto pos = static_cast<std::size_t>(m.position(0));
    if (!heading_prefix_ok(text, pos)) continue;
    headings.push_back({aspect_from_heading(m[1].str()), line_start_of(text, pos),
                        pos + static_cast<std::size_t>(m.length(0)), trim(m[2].str())});
  }

  auto wanted = [&](Aspect a) { return std::find(aspects.begin(), aspects.end(), a) != aspects.end(); };

  std::map<Aspect, std::size_t> index;
  for (std::size_t i = 0; i < headings.size(); ++i) {
    if (!wanted(headings[i].aspect)) continue;
    if (!index.emplace(headings[i].aspect, i).second) {
      throw RatingParseError(RatingParseError::Kind::DuplicateAspect, headings[i].aspect, "");
    }
  }

  ParsedRatings out;
  out.scores = AspectScores{};
  for (Aspect a : aspects) {
    auto it = index.find(a);
    if (it == index.end()) throw RatingParseError(RatingParseError::Kind::MissingAspect, a, "");
    const Heading& h = headings[it->second];
    static const std::regex int_re(R"([0-9]+)");
    if (!std::regex_match(h.token, int_re)) {
      throw RatingParseError(RatingParseError::Kind::MalformedRating, a, "'" + h.token + "'");
    }
    int value = h.token.size() > 3 ? 1000 : std::stoi(h.token);
    if (value < 1 || value > 5) {
      throw RatingParseError(RatingParseError::Kind::OutOfRange, a, std::to_string(value));
    }
    out.scores.set(a, value);
    std::size_t block_end = it->second + 1 < headings.size() ? headings[it->second + 1].line_start : text.size();
    out.rationales[a] = clean_rationale(std::string_view(text).substr(h.end, block_end - h.end));
  }
  return out;
}

std::string format_ratings(const AspectScores& scores, const Rationales& rationales) {
  const Aspect order[] = {Aspect::Helpfulness, Aspect::Ethics, Aspect::VisualFaithfulness};
  std::string out;
  int n = 1;
  for (Aspect a : order) {
    if (n > 1) out += "\n\n";
    auto it = rationales.find(a);
    out += fmt::format("{}. **{} (Rating: {})**: {}", n++, aspect_heading(a), scores.get(a),
                       it == rationales.end() ? std::string{} : it->second);
  }
  return out;
}

endpoint::ChatRequest render_template(const JudgeTemplate& tmpl, const corpus::InstructionRecord& instruction,
                                      const decoder::ResponseRecord& response) {
  std::string images;
  if (instruction.images.empty()) {
    images = "(no image)";
  } else {
    for (std::size_t i = 0; i < instruction.images.size(); ++i) {
      if (i > 0) images += ' ';
      images += fmt::format("[image {}]", i + 1);
    }
  }

  const std::string& t = tmpl.text;
  std::string user;
  user.reserve(t.size() + instruction.prompt.size() + response.text.size());
  std::size_t pos = 0;
  while (pos < t.size()) {
    auto open = t.find("{{", pos);
    if (open == std::string::npos) {
      user.append(t, pos, std::string::npos);
      break;
    }
    auto close = t.find("}}", open + 2);
    if (close == std::string::npos) {
      user.append(t, pos, std::string::npos);
      break;
    }
    user.append(t, pos, open - pos);
    std::string_view name(t.data() + open + 2, close - open - 2);
    if (name == "instruction") {
      user += instruction.prompt;
    } else if (name == "response") {
      user += response.text;
    } else if (name == "images") {
      user += images;
    } else {
      throw ValidationError(fmt::format("template placeholder '{{{{{}}}}}' has no value", name));
    }
    pos = close + 2;
  }
  return {judge_system_prompt(), std::move(user), instruction.images};
}

std::optional<std::string> extract_response(std::string_view text) {
  constexpr std::string_view open = "<<<RESPONSE\n";
  constexpr std::string_view close = "\nRESPONSE>>>";
  auto b = text.find(open);
  auto e = text.rfind(close);
  if (b == std::string_view::npos || e == std::string_view::npos || e < b + open.size()) return std::nullopt;
  return std::string(text.substr(b + open.size(), e - b - open.size()));
}

json to_json(const AnnotationRecord& r) {
  json rationales = json::object();
  for (Aspect a : kAspects) {
    auto it = r.rationales.find(a);
    rationales[std::string(aspect_key(a))] = it == r.rationales.end() ? std::string{} : it->second;
  }
  return json{{"instruction_id", r.instruction_id},
              {"model_id", r.model_id},
              {"scores",
               {{"helpfulness", r.scores.helpfulness},
                {"visual_faithfulness", r.scores.visual_faithfulness},
                {"ethics", r.scores.ethics}}},
              {"rationales", rationales},
              {"judge_id", r.judge_id},
              {"raw_output", r.raw_output},
              {"parse_attempts", r.parse_attempts}};
}

AnnotationRecord annotation_from_json(const json& j) {
  try {
    AnnotationRecord r;
    r.instruction_id = j.at("instruction_id").get<std::string>();
    r.model_id = j.at("model_id").get<std::string>();
    const auto& s = j.at("scores");
    r.scores = {s.at("helpfulness").get<int>(), s.at("visual_faithfulness").get<int>(), s.at("ethics").get<int>()};
    if (!r.scores.valid()) throw ValidationError("scores outside 1..5");
    for (const auto& [k, v] : j.at("rationales").items()) {
      auto a = aspect_from_key(k);
      if (!a) throw ValidationError(fmt::format("unknown rationale key '{}'", k));
      r.rationales[*a] = v.get<std::string>();
    }
    if (r.rationales.size() != 3) throw ValidationError("rationales must cover all three aspects");
    r.judge_id = j.value("judge_id", std::string{});
    r.raw_output = j.at("raw_output").get<std::string>();
    r.parse_attempts = j.value("parse_attempts", 1);
    return r;
  } catch (const json::exception& e) {
    throw ValidationError(fmt::format("invalid annotation record: {}", e.what()));
  }
}

json to_json(const ParseFailureRecord& r) {
  return json{{"instruction_id", r.instruction_id}, {"model_id", r.model_id},         {"judge_id", r.judge_id},
              {"raw_output", r.raw_output},         {"parse_attempts", r.parse_attempts}, {"error", r.error}};
}

ParseFailureRecord parse_failure_from_json(const json& j) {
  try {
    return {j.at("instruction_id").get<std::string>(), j.at("model_id").get<std::string>(),
            j.value("judge_id", std::string{}),        j.at("raw_output").get<std::string>(),
            j.value("parse_attempts", 0),              j.value("error", std::string{})};
  } catch (const json::exception& e) {
    throw ValidationError(fmt::format("invalid parse-failure record: {}", e.what()));
  }
}

AnnotationStore::AnnotationStore(const fs::path& dir)
    : annotations_path_(dir / "annotations.jsonl"),
      annotations_out_(dir / "annotations.jsonl"),
      parse_failures_out_(dir / "parse_failures.jsonl"),
      failures_out_(dir / "failures.jsonl") {
  for (const auto& j : read_jsonl_strict(annotations_path_)) {
    auto r = annotation_from_json(j);
    if (done_.emplace(r.instruction_id, r.model_id).second) annotations_.push_back(std::move(r));
  }
  for (const auto& j : read_jsonl_strict(dir / "parse_failures.jsonl")) {
    auto r = parse_failure_from_json(j);
    if (done_.emplace(r.instruction_id, r.model_id).second) parse_failures_.push_back(std::move(r));
  }
}

bool AnnotationStore::done(const std::string& instruction_id, const std::string& model_id) const {
  std::lock_guard lock(mu_);
  return done_.count({instruction_id, model_id}) > 0;
}

bool AnnotationStore::append(const AnnotationRecord& record) {
  std::lock_guard lock(mu_);
  if (!done_.emplace(record.instruction_id, record.model_id).second) return false;
  annotations_out_.append(to_json(record));
  annotations_.push_back(record);
  return true;
}

bool AnnotationStore::append(const ParseFailureRecord& record) {
  std::lock_guard lock(mu_);
  if (!done_.emplace(record.instruction_id, record.model_id).second) return false;
  parse_failures_out_.append(to_json(record));
  parse_failures_.push_back(record);
  return true;
}

void AnnotationStore::log_failure(const json& failure) { failures_out_.append(failure); }

std::vector<AnnotationRecord> AnnotationStore::annotations() const {
  std::lock_guard lock(mu_);
  return annotations_;
}

std::vector<ParseFailureRecord> AnnotationStore::parse_failures() const {
  std::lock_guard lock(mu_);
  return parse_failures_;
}

std::vector<AnnotationRecord> load_annotations(const fs::path& path) {
  fs::path file = fs::is_directory(path) ? path / "annotations.jsonl" : path;
  std::vector<AnnotationRecord> out;
  for (const auto& j : read_jsonl_strict(file)) out.push_back(annotation_from_json(j));
  return out;
}

std::vector<ParseFailureRecord> load_parse_failures(const fs::path& dir) {
  fs::path file = dir / "parse_failures.jsonl";
  std::vector<ParseFailureRecord> out;
  if (!fs::exists(file)) return out;
  for (const auto& j : read_jsonl_strict(file)) out.push_back(parse_failure_from_json(j));
  return out;
}

json to_json(const AnnotateReport& r) {
  return json{{"annotated", r.annotated},
              {"parse_failures", r.parse_failures},
              {"transport_failures", r.transport_failures},
              {"skipped", r.skipped},
              {"judge_calls", r.judge_calls}};
}

endpoint::ModelSpec with_judge_defaults(endpoint::ModelSpec judge) {
  if (!judge.decode_params.contains("temperature")) judge.decode_params["temperature"] = 0;
  return judge;
}

namespace {

struct JudgeOutcome {
  enum class Status { Annotated, ParseFailure, TransportFailure } status = Status::Annotated;
  AnnotationRecord annotation;
  ParseFailureRecord parse_failure;
  json transport_failure;
  std::size_t calls = 0;
};

// One template, re-queried with a format reminder until it parses.
struct SingleCall {
  bool transport_ok = true;
  bool parsed = false;
  ParsedRatings ratings;
  std::string raw;
  std::string error;
  int attempts = 0;
  int status = 0;
  std::size_t calls = 0;
};

SingleCall judge_once(endpoint::ChatClient& client, const endpoint::ModelSpec& judge,
                      endpoint::ChatRequest request, const std::vector<Aspect>& aspects,
                      const AnnotateOptions& options, Rng& jitter) {
  SingleCall out;
  for (int attempt = 0; attempt <= options.parse_retries; ++attempt) {
    auto call = endpoint::call_with_retry(client, judge, request, options.retry, jitter);
    out.calls += static_cast<std::size_t>(call.attempts);
    if (call.result.outcome != endpoint::Outcome::Ok) {
      out.transport_ok = false;
      out.error = call.result.error;
      out.status = call.result.status;
      return out;
    }
    out.raw = call.result.text;
    out.attempts = attempt + 1;
    try {
      out.ratings = parse_ratings(out.raw, aspects);
      out.parsed = true;
      return out;
    } catch (const RatingParseError& e) {
      out.error = e.what();
    }
    if (attempt == 0) request.user += format_reminder();
  }
  return out;
}

}  // namespace

AnnotateReport annotate_batch(const corpus::InstructionSet& instructions,
                              const std::vector<decoder::ResponseRecord>& responses,
                              const endpoint::ModelSpec& judge_spec, const AnnotateOptions& options,
                              AnnotationStore& store, endpoint::ChatClient& client) {
  const endpoint::ModelSpec judge = with_judge_defaults(judge_spec);
  if (auto missing = endpoint::missing_credentials({judge}); !missing.empty()) {
    throw ValidationError(fmt::format("credential environment variable {} unset", missing.front()));
  }

  std::map<std::string, const corpus::InstructionRecord*, std::less<>> by_id;
  for (const auto& r : instructions.records) by_id[r.id] = &r;
  for (const auto& resp : responses) {
    if (!by_id.count(resp.instruction_id)) {
      throw ValidationError(fmt::format("response {} / {} references unknown instruction", resp.instruction_id,
                                        resp.model_id));
    }
  }

  AnnotateReport report;
  std::vector<const decoder::ResponseRecord*> tasks;
  for (const auto& resp : responses) {
    if (store.done(resp.instruction_id, resp.model_id)) {
      ++report.skipped;
    } else {
      tasks.push_back(&resp);
    }
  }

  const JudgeTemplate combined = combined_template();
  endpoint::RateLimiter limiter(options.requests_per_minute);

  auto work = [&](std::size_t i) {
    const auto& resp = *tasks[i];
    const auto& inst = *by_id.at(resp.instruction_id);
    Rng jitter(derive_seed(options.seed, "judge/" + resp.instruction_id + "/" + resp.model_id));
    JudgeOutcome out;

    std::vector<std::pair<JudgeTemplate, std::vector<Aspect>>> calls;
    if (options.per_aspect) {
      for (Aspect a : kAspects) calls.emplace_back(aspect_template(a), std::vector<Aspect>{a});
    } else {
      calls.emplace_back(combined, combined.aspects);
    }

    ParsedRatings merged;
    std::string raw;
    int attempts = 0;
    for (const auto& [tmpl, aspects] : calls) {
      limiter.acquire(judge.endpoint);
      auto single = judge_once(client, judge, render_template(tmpl, inst, resp), aspects, options, jitter);
      out.calls += single.calls;
      if (!single.transport_ok) {
        out.status = JudgeOutcome::Status::TransportFailure;
        out.transport_failure = {{"instruction_id", resp.instruction_id},
                                 {"model_id", resp.model_id},
                                 {"judge_id", judge.model_id},
                                 {"status", single.status},
                                 {"error", single.error}};
        return out;
      }
      if (!raw.empty()) raw += "\n\n";
      raw += single.raw;
      attempts += single.attempts;
      if (!single.parsed) {
        out.status = JudgeOutcome::Status::ParseFailure;
        out.parse_failure = {resp.instruction_id, resp.model_id, judge.model_id, raw, attempts, single.error};
        return out;
      }
      for (Aspect a : aspects) {
        merged.scores.set(a, single.ratings.scores.get(a));
        merged.rationales[a] = single.ratings.rationales[a];
      }
    }
    out.annotation = {resp.instruction_id, resp.model_id, merged.scores, merged.rationales,
                      judge.model_id,      raw,           attempts};
    return out;
  };

  auto commit = [&](std::size_t, JudgeOutcome out) {
    report.judge_calls += out.calls;
    switch (out.status) {
      case JudgeOutcome::Status::Annotated:
        if (store.append(out.annotation)) ++report.annotated;
        break;
      case JudgeOutcome::Status::ParseFailure:
        spdlog::warn("judge output for {} / {} did not parse: {}", out.parse_failure.instruction_id,
                     out.parse_failure.model_id, out.parse_failure.error);
        if (store.append(out.parse_failure)) ++report.parse_failures;
        break;
      case JudgeOutcome::Status::TransportFailure:
        ++report.transport_failures;
        store.log_failure(out.transport_failure);
        break;
    }
  };

  detail::run_ordered<JudgeOutcome>(tasks.size(), options.concurrency, work, commit);
  return report;
}

AspectScores length_judge_scores(std::size_t length) {
  AspectScores s;
  s.helpfulness = 1 + static_cast<int>(std::min<std::size_t>(4, length / 30));
  s.visual_faithfulness = 1 + static_cast<int>(length % 5);
  s.ethics = length % 13 == 0 ? 2 : 5;
  return s;
}

endpoint::MockHandler length_judge_handler() {
  return [](const endpoint::ModelSpec&, const endpoint::ChatRequest& req) {
    auto response = extract_response(req.user);
    if (!response) return endpoint::ChatResult{endpoint::Outcome::ClientError, 400, {}, "no response block"};
    const AspectScores s = length_judge_scores(response->size());
    const Aspect order[] = {Aspect::Helpfulness, Aspect::Ethics, Aspect::VisualFaithfulness};
    std::string out;
    int n = 1;
    for (Aspect a : order) {
      // Per-aspect prompts carry a single guideline heading.
      if (req.user.find(fmt::format("### {} Assessment", aspect_heading(a))) == std::string::npos) continue;
      if (n > 1) out += "\n\n";
      out += fmt::format("{}. **{} (Rating: {})**: Scored from a response length of {} bytes.", n++,
                         aspect_heading(a), s.get(a), response->size());
    }
    return endpoint::ChatResult::ok(out);
  };
}

}  // namespace forge::judge
