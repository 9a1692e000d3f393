#include <atomic>
#include <set>

#include <gtest/gtest.h>
#include <httplib.h>

#include "forge/decoder.hpp"
#include "forge/endpoint.hpp"
#include "support.hpp"

using namespace forge;
using namespace forge::endpoint;
using forge::testing::TempDir;
using forge::testing::write_text;

namespace {

std::vector<ModelSpec> pool_of(std::size_t n, const std::string& endpoint = "mock://echo") {
  std::vector<ModelSpec> pool;
  for (std::size_t i = 0; i < n; ++i) pool.push_back({"model-" + std::to_string(i), endpoint, "", json::object(), 5});
  return pool;
}

corpus::InstructionSet instructions(std::size_t n) {
  corpus::InstructionSet set;
  for (std::size_t i = 0; i < n; ++i) {
    set.records.push_back({"inst-" + std::to_string(i), corpus::Source::LLaVA, {}, "Question " + std::to_string(i)});
  }
  set.manifest = corpus::count_sources(set.records);
  return set;
}

RetryPolicy no_wait(int retries, std::vector<double>* waits = nullptr) {
  RetryPolicy p;
  p.max_retries = retries;
  p.base_delay_seconds = 0.5;
  p.sleep = [waits](double s) {
    if (waits) waits->push_back(s);
  };
  return p;
}

// httplib server on an ephemeral port that answers with scripted statuses.
class ScriptedServer {
 public:
  explicit ScriptedServer(std::vector<int> statuses) : statuses_(std::move(statuses)) {
    server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      last_body_ = req.body;
      last_auth_ = req.get_header_value("Authorization");
      std::size_t i = hits_++;
      int status = i < statuses_.size() ? statuses_[i] : 200;
      if (status == -1) {
        std::this_thread::sleep_for(std::chrono::milliseconds(600));
        status = 200;
      }
      res.status = status;
      json reply{{"choices", {{{"message", {{"role", "assistant"}, {"content", "hello from server"}}}}}}};
      res.set_content(status == 200 ? reply.dump() : "{\"error\":\"x\"}", "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~ScriptedServer() {
    server_.stop();
    thread_.join();
  }

  std::string endpoint() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1/chat/completions"; }
  std::size_t hits() const { return hits_; }
  json last_body() const { return json::parse(last_body_); }
  std::string last_auth() const { return last_auth_; }

 private:
  std::vector<int> statuses_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  std::atomic<std::size_t> hits_{0};
  std::string last_body_;
  std::string last_auth_;
};

}  // namespace

TEST(RequestShape, SystemUserTextImagesAndDecodeParams) {
  TempDir dir;
  write_text(dir / "p.png", "PNG");
  ModelSpec m{"m1", "mock://echo", "", json{{"temperature", 0.7}, {"max_tokens", 64}}, 10};
  auto body = build_request_body(m, {"be brief", "what is this?", {(dir / "p.png").string(), "https://x.org/i.jpg"}});
  EXPECT_EQ(body["model"], "m1");
  EXPECT_EQ(body["temperature"], 0.7);
  EXPECT_EQ(body["max_tokens"], 64);
  ASSERT_EQ(body["messages"].size(), 2u);
  EXPECT_EQ(body["messages"][0]["role"], "system");
  const auto& parts = body["messages"][1]["content"];
  ASSERT_EQ(parts.size(), 3u);
  EXPECT_EQ(parts[0]["text"], "what is this?");
  EXPECT_EQ(parts[1]["image_url"]["url"], "data:image/png;base64,UE5H");
  EXPECT_EQ(parts[2]["image_url"]["url"], "https://x.org/i.jpg");
}

TEST(RequestShape, NoSystemMessageWhenEmpty) {
  auto body = build_request_body(pool_of(1)[0], {"", "hi", {}});
  ASSERT_EQ(body["messages"].size(), 1u);
  EXPECT_EQ(body["messages"][0]["role"], "user");
}

TEST(Pool, RejectsDuplicatesAndBadTimeouts) {
  auto pool = pool_of(2);
  pool[1].model_id = pool[0].model_id;
  EXPECT_THROW(validate_pool(pool), ValidationError);
  EXPECT_THROW(model_from_json(json{{"model_id", "a"}, {"endpoint", "mock://echo"}, {"request_timeout", 0}}),
               ValidationError);
  EXPECT_THROW(model_from_json(json{{"model_id", "a"}, {"endpoint", "ftp://x"}}), ValidationError);
  TempDir dir;
  write_text(dir / "pool.json", R"({"models":[{"model_id":"a","endpoint":"mock://echo"}]})");
  EXPECT_EQ(load_pool(dir / "pool.json").size(), 1u);
}

TEST(Http, RetriesServerErrorThenSucceeds) {
  ScriptedServer server({500, 200});
  ModelSpec m{"remote", server.endpoint(), "", json::object(), 5};
  HttpChatClient client;
  Rng jitter(1);
  std::vector<double> waits;
  auto r = call_with_retry(client, m, {"", "hi", {}}, no_wait(3, &waits), jitter);
  EXPECT_EQ(r.result.outcome, Outcome::Ok);
  EXPECT_EQ(r.result.text, "hello from server");
  EXPECT_EQ(r.attempts, 2);
  EXPECT_EQ(server.hits(), 2u);
  ASSERT_EQ(waits.size(), 1u);
  EXPECT_LE(waits[0], 0.5);
  EXPECT_EQ(server.last_body()["model"], "remote");
}

TEST(Http, ClientErrorIsNotRetried) {
  ScriptedServer server({400});
  ModelSpec m{"remote", server.endpoint(), "", json::object(), 5};
  HttpChatClient client;
  Rng jitter(1);
  auto r = call_with_retry(client, m, {"", "hi", {}}, no_wait(3), jitter);
  EXPECT_EQ(r.result.outcome, Outcome::ClientError);
  EXPECT_EQ(r.result.status, 400);
  EXPECT_EQ(r.attempts, 1);
  EXPECT_EQ(server.hits(), 1u);
}

TEST(Http, RateLimitAndTimeoutAreRetryable) {
  ScriptedServer server({429, -1, 200});
  ModelSpec m{"remote", server.endpoint(), "", json::object(), 0.2};
  HttpChatClient client;
  Rng jitter(1);
  auto r = call_with_retry(client, m, {"", "hi", {}}, no_wait(1), jitter);
  EXPECT_EQ(r.result.outcome, Outcome::Retryable);
  EXPECT_EQ(r.attempts, 2);
  EXPECT_EQ(r.result.status, 0);  // timed out, no HTTP status
}

TEST(Http, BearerTokenFromEnvironment) {
  ScriptedServer server({});
  ::setenv("FORGE_TEST_TOKEN", "sekret", 1);
  ModelSpec m{"remote", server.endpoint(), "FORGE_TEST_TOKEN", json::object(), 5};
  HttpChatClient client;
  EXPECT_EQ(client.complete(m, {"", "hi", {}}).outcome, Outcome::Ok);
  EXPECT_EQ(server.last_auth(), "Bearer sekret");
  ::unsetenv("FORGE_TEST_TOKEN");
}

TEST(Retry, FullJitterStaysUnderDoublingCap) {
  MockChatClient mock;
  mock.register_handler("flaky", [](const ModelSpec&, const ChatRequest&) {
    return ChatResult{Outcome::Retryable, 503, {}, "busy"};
  });
  ModelSpec m{"m", "mock://flaky", "", json::object(), 1};
  std::vector<double> waits;
  Rng jitter(4);
  auto r = call_with_retry(mock, m, {"", "x", {}}, no_wait(4, &waits), jitter);
  EXPECT_EQ(r.attempts, 5);
  EXPECT_EQ(mock.calls(), 5u);
  ASSERT_EQ(waits.size(), 4u);
  for (std::size_t i = 0; i < waits.size(); ++i) {
    EXPECT_GE(waits[i], 0.0);
    EXPECT_LE(waits[i], 0.5 * std::ldexp(1.0, static_cast<int>(i)));
  }
}

TEST(Mock, SynthIsDeterministicAndModelSpecific) {
  EXPECT_EQ(synth_response("a", "q"), synth_response("a", "q"));
  EXPECT_NE(synth_response("a", "q"), synth_response("b", "q"));
  EXPECT_EQ(synth_response("a", "q").back(), '.');
}

TEST(SelectModels, FourDistinctFromTwelve) {
  auto pool = pool_of(12);
  auto picked = decoder::select_models(pool, 4, 3, "inst-1");
  std::set<std::string> ids;
  for (const auto& m : picked) ids.insert(m.model_id);
  EXPECT_EQ(ids.size(), 4u);
  EXPECT_EQ(picked.size(), 4u);
}

TEST(SelectModels, WholePoolWhenKEqualsSize) {
  auto pool = pool_of(4);
  auto picked = decoder::select_models(pool, 4, 3, "inst-1");
  std::set<std::string> ids;
  for (const auto& m : picked) ids.insert(m.model_id);
  EXPECT_EQ(ids.size(), 4u);
}

TEST(SelectModels, TooManyNamesBothNumbers) {
  try {
    decoder::select_models(pool_of(4), 5, 0, "x");
    FAIL();
  } catch (const ValidationError& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find('5'), std::string::npos);
    EXPECT_NE(msg.find('4'), std::string::npos);
  }
}

TEST(SelectModels, PureFunctionOfInputs) {
  auto pool = pool_of(12);
  auto a = decoder::select_models(pool, 4, 9, "inst-7");
  decoder::select_models(pool, 4, 9, "inst-3");
  auto b = decoder::select_models(pool, 4, 9, "inst-7");
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].model_id, b[i].model_id);
  std::set<std::string> seen;
  for (int i = 0; i < 50; ++i) {
    for (const auto& m : decoder::select_models(pool, 4, 9, "inst-" + std::to_string(i))) seen.insert(m.model_id);
  }
  EXPECT_EQ(seen.size(), 12u);
}

TEST(Decode, EchoMockStoresPromptAndRerunIsFree) {
  TempDir dir;
  auto set = instructions(10);
  auto pool = pool_of(6);
  MockChatClient mock;
  decoder::DecodeOptions opt;
  opt.k = 4;
  opt.seed = 5;
  opt.concurrency = 3;
  opt.clock = fixed_clock("2024-01-01T00:00:00Z");
  {
    decoder::ResponseStore store(dir.path());
    auto report = decode_batch(set, pool, opt, store, mock);
    EXPECT_EQ(report.ok, 40u);
    EXPECT_EQ(report.requests, 40u);
    for (const auto& r : store.records()) {
      EXPECT_EQ(r.text, "Question " + r.instruction_id.substr(5));
    }
  }
  decoder::ResponseStore again(dir.path());
  EXPECT_EQ(again.size(), 40u);
  auto report = decode_batch(set, pool, opt, again, mock);
  EXPECT_EQ(report.requests, 0u);
  EXPECT_EQ(report.skipped, 40u);
  EXPECT_EQ(mock.calls(), 40u);
}

TEST(Decode, OutputIndependentOfConcurrency) {
  TempDir a, b;
  auto set = instructions(8);
  auto pool = pool_of(5, "mock://synth");
  MockChatClient mock;
  decoder::DecodeOptions opt;
  opt.k = 3;
  opt.clock = fixed_clock("2024-01-01T00:00:00Z");
  {
    decoder::ResponseStore s(a.path());
    opt.concurrency = 1;
    decode_batch(set, pool, opt, s, mock);
  }
  {
    decoder::ResponseStore s(b.path());
    opt.concurrency = 8;
    decode_batch(set, pool, opt, s, mock);
  }
  EXPECT_EQ(read_file(a / "responses.jsonl"), read_file(b / "responses.jsonl"));
}

TEST(Decode, FailuresAreLoggedAndRetriedOnRerun) {
  TempDir dir;
  auto set = instructions(2);
  auto pool = pool_of(2, "mock://down");
  MockChatClient mock;
  bool up = false;
  mock.register_handler("down", [&up](const ModelSpec&, const ChatRequest& r) {
    return up ? ChatResult::ok(r.user) : ChatResult{Outcome::Retryable, 503, {}, "down"};
  });
  decoder::DecodeOptions opt;
  opt.k = 2;
  opt.retry = no_wait(1);
  decoder::ResponseStore store(dir.path());
  auto first = decode_batch(set, pool, opt, store, mock);
  EXPECT_EQ(first.failed, 4u);
  EXPECT_EQ(first.requests, 8u);
  EXPECT_EQ(read_jsonl(dir / "failures.jsonl").size(), 4u);
  up = true;
  auto second = decode_batch(set, pool, opt, store, mock);
  EXPECT_EQ(second.ok, 4u);
  EXPECT_EQ(store.size(), 4u);
}

TEST(Decode, UnsetCredentialAbortsBeforeAnyRequest) {
  TempDir dir;
  auto pool = pool_of(2);
  pool[1].auth = "FORGE_TEST_UNSET_CREDENTIAL";
  ::unsetenv("FORGE_TEST_UNSET_CREDENTIAL");
  MockChatClient mock;
  decoder::ResponseStore store(dir.path());
  decoder::DecodeOptions opt;
  opt.k = 2;
  try {
    decode_batch(instructions(3), pool, opt, store, mock);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("FORGE_TEST_UNSET_CREDENTIAL"), std::string::npos);
  }
  EXPECT_EQ(mock.calls(), 0u);
}

TEST(Decode, EmptyRepliesAreKeptAndFlagged) {
  TempDir dir;
  MockChatClient mock;
  mock.register_handler("blank", [](const ModelSpec&, const ChatRequest&) { return ChatResult::ok("  \n"); });
  decoder::ResponseStore store(dir.path());
  decoder::DecodeOptions opt;
  opt.k = 1;
  auto report = decode_batch(instructions(2), pool_of(1, "mock://blank"), opt, store, mock);
  EXPECT_EQ(report.ok, 2u);
  EXPECT_EQ(report.empty, 2u);
  EXPECT_TRUE(store.records()[0].is_empty());
}

TEST(ResponseStore, DuplicateKeyIsNotWritten) {
  TempDir dir;
  decoder::ResponseStore store(dir.path());
  decoder::ResponseRecord r{"i", "m", "t", json::object(), "2024-01-01T00:00:00Z", 1};
  EXPECT_TRUE(store.append(r));
  EXPECT_FALSE(store.append(r));
  EXPECT_EQ(read_jsonl(store.responses_path()).size(), 1u);
  EXPECT_EQ(decoder::load_responses(dir.path()).size(), 1u);
}
