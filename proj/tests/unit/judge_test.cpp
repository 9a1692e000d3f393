#include <gtest/gtest.h>

#include "forge/judge.hpp"
#include "support.hpp"

using namespace forge;
using namespace forge::judge;
using forge::testing::data_path;
using forge::testing::TempDir;

namespace {

corpus::InstructionRecord instruction(const std::string& id, const std::string& prompt = "What is shown?") {
  return {id, corpus::Source::LLaVA, {"https://example.org/a.jpg"}, prompt};
}

decoder::ResponseRecord response(const std::string& iid, const std::string& model, const std::string& text) {
  return {iid, model, text, json::object(), "2024-01-01T00:00:00Z", 1};
}

endpoint::ModelSpec judge_spec(const std::string& endpoint = "mock://judge-length") {
  return {"length-judge", endpoint, "", json::object(), 5};
}

RatingParseError::Kind parse_error_kind(const std::string& raw) {
  try {
    parse_ratings(raw);
  } catch (const RatingParseError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "parsed: " << raw;
  return RatingParseError::Kind::MissingAspect;
}

}  // namespace

TEST(Templates, CarryTheAspectGuidelines) {
  auto payload = [](Aspect a) {
    return render_template(aspect_template(a), instruction("i"), response("i", "m", "r")).user;
  };
  EXPECT_NE(payload(Aspect::VisualFaithfulness).find("avoiding ungrounded statements"), std::string::npos);
  EXPECT_NE(payload(Aspect::Helpfulness).find("directly addresses the user's request"), std::string::npos);
  EXPECT_NE(payload(Aspect::Ethics).find("Safety, Privacy, Fairness, and Harmfulness"), std::string::npos);
  auto all = render_template(combined_template(), instruction("i"), response("i", "m", "r")).user;
  for (Aspect a : kAspects) EXPECT_NE(all.find(guideline(a)), std::string::npos);
}

TEST(Templates, SinglePassSubstitution) {
  auto inst = instruction("i", "Explain {{response}} please");
  auto req = render_template(combined_template(), inst, response("i", "m", "literal {{instruction}} text"));
  EXPECT_NE(req.user.find("Explain {{response}} please"), std::string::npos);
  EXPECT_EQ(extract_response(req.user), "literal {{instruction}} text");
  EXPECT_EQ(req.images, inst.images);
}

TEST(Templates, UnknownPlaceholderIsRejected) {
  JudgeTemplate t{{Aspect::Helpfulness}, "{{instruction}} {{mystery}}"};
  try {
    render_template(t, instruction("i"), response("i", "m", "r"));
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("mystery"), std::string::npos);
  }
}

TEST(ParseRatings, AllFives) {
  auto r = parse_ratings(
      "1. **Helpfulness (Rating: 5)**: good\n2. **Ethical Considerations (Rating: 5)**: fine\n"
      "3. **Visual Faithfulness (Rating: 5)**: faithful");
  EXPECT_EQ(r.scores, (AspectScores{5, 5, 5}));
  EXPECT_EQ(r.rationales.at(Aspect::Ethics), "fine");
}

TEST(ParseRatings, RejectedAnswerBlock) {
  auto r = parse_ratings(read_file(data_path("judge_rejected_block.txt")));
  EXPECT_EQ(r.scores, (AspectScores{5, 1, 5}));
  EXPECT_NE(r.rationales.at(Aspect::VisualFaithfulness).find("incorrectly confirms the presence"), std::string::npos);
}

TEST(ParseRatings, ChosenAnswerBlockWithSplitNumbering) {
  auto r = parse_ratings(read_file(data_path("judge_chosen_block.txt")));
  EXPECT_EQ(r.scores, (AspectScores{5, 5, 5}));
  const auto& h = r.rationales.at(Aspect::Helpfulness);
  EXPECT_TRUE(h.starts_with("The response directly addresses")) << h;
  EXPECT_TRUE(h.ends_with("fully helpful.")) << h;
  EXPECT_TRUE(r.rationales.at(Aspect::VisualFaithfulness).ends_with("visible in the image.")) << r.rationales.at(Aspect::VisualFaithfulness);
}

TEST(ParseRatings, ErrorKinds) {
  const std::string h = "**Helpfulness (Rating: 4)**: a\n";
  const std::string e = "**Ethical Considerations (Rating: 5)**: b\n";
  const std::string v = "**Visual Faithfulness (Rating: 3)**: c\n";
  EXPECT_EQ(parse_error_kind(h + e + "**Visual Faithfulness (Rating: 7)**: c"), RatingParseError::Kind::OutOfRange);
  EXPECT_EQ(parse_error_kind(h + e + "**Visual Faithfulness (Rating: 0)**: c"), RatingParseError::Kind::OutOfRange);
  EXPECT_EQ(parse_error_kind("**Helpfulness (Rating: 4.5)**: a\n" + e + v), RatingParseError::Kind::MalformedRating);
  EXPECT_EQ(parse_error_kind(h + e), RatingParseError::Kind::MissingAspect);
  EXPECT_EQ(parse_error_kind(h + e + v + h), RatingParseError::Kind::DuplicateAspect);
  EXPECT_EQ(parse_error_kind("no ratings here"), RatingParseError::Kind::MissingAspect);
}

TEST(ParseRatings, IgnoresHeadingsQuotedInsideRationale) {
  auto r = parse_ratings(
      "1. **Helpfulness (Rating: 4)**: it says Visual Faithfulness (Rating: 1) in prose\n"
      "2. **Ethical Considerations (Rating: 5)**: ok\n3. **Visual Faithfulness (Rating: 2)**: meh");
  EXPECT_EQ(r.scores, (AspectScores{4, 2, 5}));
}

TEST(ParseRatings, PerAspectSubset) {
  auto r = parse_ratings("1. **Visual Faithfulness (Rating: 2)**: blurry", {Aspect::VisualFaithfulness});
  EXPECT_EQ(r.scores.visual_faithfulness, 2);
  EXPECT_EQ(r.rationales.size(), 1u);
}

TEST(ParseRatings, AllTriplesRoundTrip) {
  int checked = 0;
  for (int h = 1; h <= 5; ++h) {
    for (int v = 1; v <= 5; ++v) {
      for (int e = 1; e <= 5; ++e) {
        AspectScores s{h, v, e};
        Rationales why{{Aspect::Helpfulness, "h" + std::to_string(h)},
                       {Aspect::VisualFaithfulness, "v" + std::to_string(v)},
                       {Aspect::Ethics, "e" + std::to_string(e)}};
        auto parsed = parse_ratings(format_ratings(s, why));
        ASSERT_EQ(parsed.scores, s);
        ASSERT_EQ(parsed.rationales, why);
        ++checked;
      }
    }
  }
  EXPECT_EQ(checked, 125);
}

TEST(LengthJudge, FormulaRecomputed) {
  for (std::size_t len : {0u, 1u, 13u, 29u, 30u, 64u, 119u, 120u, 500u}) {
    AspectScores s = length_judge_scores(len);
    int h = len >= 120 ? 5 : 1 + static_cast<int>(len / 30);
    EXPECT_EQ(s.helpfulness, h) << len;
    EXPECT_EQ(s.visual_faithfulness, 1 + static_cast<int>(len % 5)) << len;
    EXPECT_EQ(s.ethics, len % 13 == 0 ? 2 : 5) << len;
  }
}

class AnnotateTest : public ::testing::Test {
 protected:
  void SetUp() override {
    mock.register_handler("judge-length", length_judge_handler());
    for (int i = 0; i < 3; ++i) {
      std::string id = "i" + std::to_string(i);
      set.records.push_back(instruction(id));
      for (int m = 0; m < 4; ++m) {
        responses.push_back(response(id, "m" + std::to_string(m), std::string(7 + 11 * m + i, 'x')));
      }
    }
    set.manifest = corpus::count_sources(set.records);
  }

  TempDir dir;
  endpoint::MockChatClient mock;
  corpus::InstructionSet set;
  std::vector<decoder::ResponseRecord> responses;
};

TEST_F(AnnotateTest, OneRecordPerResponseMatchingTheMockFormula) {
  AnnotationStore store(dir.path());
  auto report = annotate_batch(set, responses, judge_spec(), {}, store, mock);
  EXPECT_EQ(report.annotated, 12u);
  EXPECT_EQ(report.judge_calls, 12u);
  auto ann = store.annotations();
  ASSERT_EQ(ann.size(), 12u);
  for (std::size_t i = 0; i < ann.size(); ++i) {
    EXPECT_EQ(ann[i].instruction_id, responses[i].instruction_id);
    EXPECT_EQ(ann[i].scores, length_judge_scores(responses[i].text.size()));
  }
}

TEST_F(AnnotateTest, RerunMakesNoJudgeCalls) {
  {
    AnnotationStore store(dir.path());
    annotate_batch(set, responses, judge_spec(), {}, store, mock);
  }
  AnnotationStore store(dir.path());
  auto report = annotate_batch(set, responses, judge_spec(), {}, store, mock);
  EXPECT_EQ(report.judge_calls, 0u);
  EXPECT_EQ(report.skipped, 12u);
}

TEST_F(AnnotateTest, PerAspectModeMakesThreeCallsAndAgrees) {
  AnnotationStore store(dir.path());
  AnnotateOptions opt;
  opt.per_aspect = true;
  auto report = annotate_batch(set, responses, judge_spec(), opt, store, mock);
  EXPECT_EQ(report.judge_calls, 36u);
  for (const auto& a : store.annotations()) {
    auto it = std::find_if(responses.begin(), responses.end(), [&](const auto& r) {
      return r.instruction_id == a.instruction_id && r.model_id == a.model_id;
    });
    EXPECT_EQ(a.scores, length_judge_scores(it->text.size()));
  }
}

TEST_F(AnnotateTest, UnparseableRepliesRetryWithReminderThenPersist) {
  std::vector<std::string> prompts;
  std::mutex mu;
  mock.register_handler("garbled", [&](const endpoint::ModelSpec&, const endpoint::ChatRequest& r) {
    std::lock_guard lock(mu);
    prompts.push_back(r.user);
    return endpoint::ChatResult::ok("I liked it a lot.");
  });
  AnnotationStore store(dir.path());
  AnnotateOptions opt;
  opt.parse_retries = 2;
  std::vector<decoder::ResponseRecord> one{responses[0]};
  auto report = annotate_batch(set, one, judge_spec("mock://garbled"), opt, store, mock);
  EXPECT_EQ(report.parse_failures, 1u);
  EXPECT_EQ(report.judge_calls, 3u);
  ASSERT_EQ(prompts.size(), 3u);
  EXPECT_EQ(prompts[0].find(format_reminder()), std::string::npos);
  EXPECT_NE(prompts[1].find(format_reminder()), std::string::npos);
  auto failures = load_parse_failures(dir.path());
  ASSERT_EQ(failures.size(), 1u);
  EXPECT_EQ(failures[0].raw_output, "I liked it a lot.");
  EXPECT_EQ(failures[0].parse_attempts, 3);
  EXPECT_TRUE(store.annotations().empty());
}

TEST_F(AnnotateTest, SecondAttemptParses) {
  int calls = 0;
  mock.register_handler("late", [&](const endpoint::ModelSpec&, const endpoint::ChatRequest&) {
    return endpoint::ChatResult::ok(++calls == 1 ? "Overall a 4." : format_ratings({4, 3, 5}, {}));
  });
  AnnotationStore store(dir.path());
  std::vector<decoder::ResponseRecord> one{responses[0]};
  auto report = annotate_batch(set, one, judge_spec("mock://late"), {}, store, mock);
  EXPECT_EQ(report.annotated, 1u);
  EXPECT_EQ(store.annotations()[0].parse_attempts, 2);
  EXPECT_EQ(store.annotations()[0].scores, (AspectScores{4, 3, 5}));
}

TEST_F(AnnotateTest, UnknownInstructionIsRejected) {
  AnnotationStore store(dir.path());
  auto extra = responses;
  extra.push_back(response("ghost", "m0", "t"));
  EXPECT_THROW(annotate_batch(set, extra, judge_spec(), {}, store, mock), ValidationError);
}

TEST(AnnotationRecordJson, RoundTrip) {
  auto a = forge::testing::annotation("i", "m", 3, 4, 5);
  auto b = annotation_from_json(to_json(a));
  EXPECT_EQ(b.scores, a.scores);
  EXPECT_EQ(b.rationales, a.rationales);
  EXPECT_EQ(b.raw_output, a.raw_output);
}

TEST(JudgeDefaults, TemperatureZeroUnlessSet) {
  auto j = with_judge_defaults(judge_spec());
  EXPECT_EQ(j.decode_params["temperature"], 0);
  auto k = judge_spec();
  k.decode_params["temperature"] = 0.3;
  EXPECT_EQ(with_judge_defaults(k).decode_params["temperature"], 0.3);
}
