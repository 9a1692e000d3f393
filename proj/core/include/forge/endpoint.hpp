// Chat-completion endpoint contract shared by the decoder and the judge.
//
// Every model, local mock or remote, is driven through one request shape:
//
//   POST <endpoint>
//   Content-Type: application/json
//   Authorization: Bearer $<auth>            (omitted when `auth` is empty)
//
//   {"model": <model_id>,
//    "messages": [
//      {"role": "system", "content": <system text>},           (omitted when empty)
//      {"role": "user", "content": [
//         {"type": "text", "text": <user text>},
//         {"type": "image_url", "image_url": {"url": <image>}}, ... ]}],
//    <decode_params members, in key order>}
//
// Local image paths are inlined as data URIs; URLs and data URIs pass through.
// The reply is read from choices[0].message.content. Endpoints whose URL starts
// with "mock://" are served in-process by MockChatClient handlers.
#pragma once

#include <chrono>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "forge/io.hpp"
#include "forge/rng.hpp"

namespace forge::endpoint {

struct ModelSpec {
  std::string model_id;
  std::string endpoint;
  /// Name of the environment variable holding the bearer token; empty for none.
  std::string auth;
  json decode_params = json::object();
  double request_timeout = 60.0;
};

json to_json(const ModelSpec& m);
ModelSpec model_from_json(const json& j);
/// Pool files are a JSON array of model objects or {"models": [...]}. Throws on
/// duplicate model ids or non-positive timeouts.
std::vector<ModelSpec> load_pool(const fs::path& path);
ModelSpec load_model(const fs::path& path);
void validate_pool(const std::vector<ModelSpec>& pool);

/// Names of credential variables referenced by `pool` that are unset in the environment.
std::vector<std::string> missing_credentials(const std::vector<ModelSpec>& pool);

struct ChatRequest {
  std::string system;
  std::string user;
  std::vector<std::string> images;
};

json build_request_body(const ModelSpec& model, const ChatRequest& request);

enum class Outcome {
  Ok,
  ClientError,  ///< 4xx or unusable reply; not retried.
  Retryable,    ///< 5xx, 408, 429, timeout, connection failure.
};

struct ChatResult {
  Outcome outcome = Outcome::Ok;
  int status = 200;
  std::string text;
  std::string error;

  static ChatResult ok(std::string text) { return {Outcome::Ok, 200, std::move(text), {}}; }
};

class ChatClient {
 public:
  virtual ~ChatClient() = default;
  virtual ChatResult complete(const ModelSpec& model, const ChatRequest& request) = 0;
};

class HttpChatClient : public ChatClient {
 public:
  ChatResult complete(const ModelSpec& model, const ChatRequest& request) override;
};

using MockHandler = std::function<ChatResult(const ModelSpec&, const ChatRequest&)>;

/// In-process endpoints addressed as mock://<name>. "echo" and "synth" are built in.
class MockChatClient : public ChatClient {
 public:
  MockChatClient();
  void register_handler(std::string name, MockHandler handler);
  ChatResult complete(const ModelSpec& model, const ChatRequest& request) override;
  std::size_t calls() const;

 private:
  std::map<std::string, MockHandler, std::less<>> handlers_;
  mutable std::mutex mu_;
  std::size_t calls_ = 0;
};

/// Sends mock:// endpoints to the mock client and everything else over HTTP.
class RoutingChatClient : public ChatClient {
 public:
  explicit RoutingChatClient(std::shared_ptr<MockChatClient> mock,
                             std::shared_ptr<ChatClient> remote = std::make_shared<HttpChatClient>());
  ChatResult complete(const ModelSpec& model, const ChatRequest& request) override;
  MockChatClient& mock() { return *mock_; }

 private:
  std::shared_ptr<MockChatClient> mock_;
  std::shared_ptr<ChatClient> remote_;
};

/// Deterministic pseudo-response used by mock://synth: a word sequence whose
/// content and length depend only on (model_id, user text).
std::string synth_response(std::string_view model_id, std::string_view user_text);

void sleep_seconds(double seconds);

struct RetryPolicy {
  int max_retries = 3;
  double base_delay_seconds = 1.0;
  /// Replaceable so tests do not wait on real backoff.
  std::function<void(double)> sleep = sleep_seconds;
};

struct CallResult {
  ChatResult result;
  int attempts = 0;
};

/// Retries Retryable outcomes up to max_retries times; the wait before retry i
/// (0-based) is uniform in [0, base * 2^i] ("full jitter").
CallResult call_with_retry(ChatClient& client, const ModelSpec& model, const ChatRequest& request,
                           const RetryPolicy& policy, Rng& jitter);

/// Per-endpoint spacing of request starts. `requests_per_minute` of 0 disables limiting.
class RateLimiter {
 public:
  explicit RateLimiter(double requests_per_minute) : rpm_(requests_per_minute) {}
  void acquire(const std::string& endpoint);

 private:
  double rpm_;
  std::mutex mu_;
  std::map<std::string, std::chrono::steady_clock::time_point> next_slot_;
};

}  // namespace forge::endpoint
