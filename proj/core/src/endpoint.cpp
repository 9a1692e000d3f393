#include "forge/endpoint.hpp"

#include <cmath>
#include <cstdlib>
#include <regex>
#include <set>
#include <thread>

#include <fmt/format.h>
#include <httplib.h>
#include <openssl/evp.h>

namespace forge::endpoint {

namespace {

std::string base64_encode(std::string_view bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                          reinterpret_cast<const unsigned char*>(bytes.data()),
                          static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::string mime_for(const fs::path& p) {
  auto ext = p.extension().string();
  for (auto& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (ext == ".png") return "image/png";
  if (ext == ".gif") return "image/gif";
  if (ext == ".webp") return "image/webp";
  if (ext == ".bmp") return "image/bmp";
  return "image/jpeg";
}

std::string image_url_for(const std::string& ref) {
  if (ref.starts_with("data:") || ref.starts_with("http://") || ref.starts_with("https://")) {
    return ref;
  }
  fs::path p(ref);
  return "data:" + mime_for(p) + ";base64," + base64_encode(read_file(p));
}

struct ParsedUrl {
  std::string scheme_host_port;
  std::string path;
};

std::optional<ParsedUrl> parse_url(const std::string& url) {
  static const std::regex re(R"(^(https?://[^/]+)(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(url, m, re)) return std::nullopt;
  return ParsedUrl{m[1].str(), m[2].matched ? m[2].str() : "/"};
}

std::string content_text(const json& content) {
  if (content.is_string()) return content.get<std::string>();
  if (content.is_array()) {
    std::string out;
    for (const auto& part : content) {
      if (part.is_object() && part.value("type", "") == "text") out += part.value("text", "");
    }
    return out;
  }
  throw std::runtime_error("message content is neither text nor parts");
}

constexpr std::string_view kLexicon[] = {
    "the",   "image", "shows", "a",      "small", "red",    "building", "near",  "water",
    "there", "are",   "two",   "people", "on",    "left",   "with",     "trees", "and",
    "sky",   "is",    "clear", "object", "looks", "like",   "sign",     "text",  "reads",
    "car",   "table", "in",    "front",  "of",    "window", "light",    "blue",  "green",
};

}  // namespace

json to_json(const ModelSpec& m) {
  return json{{"model_id", m.model_id},
              {"endpoint", m.endpoint},
              {"auth", m.auth},
              {"decode_params", m.decode_params},
              {"request_timeout", m.request_timeout}};
}

ModelSpec model_from_json(const json& j) {
  if (!j.is_object()) throw ValidationError("model spec must be an object");
  ModelSpec m;
  try {
    m.model_id = j.at("model_id").get<std::string>();
    m.endpoint = j.at("endpoint").get<std::string>();
    m.auth = j.value("auth", std::string{});
    m.decode_params = j.value("decode_params", json::object());
    m.request_timeout = j.value("request_timeout", 60.0);
  } catch (const json::exception& e) {
    throw ValidationError(fmt::format("invalid model spec: {}", e.what()));
  }
  if (m.model_id.empty()) throw ValidationError("model_id is empty");
  if (!m.decode_params.is_object()) throw ValidationError("decode_params must be an object");
  if (!(m.request_timeout > 0)) {
    throw ValidationError(fmt::format("model {}: request_timeout must be positive", m.model_id));
  }
  if (!m.endpoint.starts_with("mock://") && !parse_url(m.endpoint)) {
    throw ValidationError(fmt::format("model {}: unsupported endpoint '{}'", m.model_id, m.endpoint));
  }
  return m;
}

void validate_pool(const std::vector<ModelSpec>& pool) {
  std::set<std::string> ids;
  for (const auto& m : pool) {
    if (!ids.insert(m.model_id).second) {
      throw ValidationError(fmt::format("duplicate model_id '{}' in pool", m.model_id));
    }
    if (!(m.request_timeout > 0)) {
      throw ValidationError(fmt::format("model {}: request_timeout must be positive", m.model_id));
    }
  }
}

std::vector<ModelSpec> load_pool(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ValidationError(fmt::format("{}: {}", path.string(), e.what()));
  }
  if (j.is_object() && j.contains("models")) j = j["models"];
  if (!j.is_array()) throw ValidationError(fmt::format("{}: pool must be an array", path.string()));
  std::vector<ModelSpec> pool;
  for (const auto& m : j) pool.push_back(model_from_json(m));
  validate_pool(pool);
  return pool;
}

ModelSpec load_model(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ValidationError(fmt::format("{}: {}", path.string(), e.what()));
  }
  return model_from_json(j);
}

std::vector<std::string> missing_credentials(const std::vector<ModelSpec>& pool) {
  std::set<std::string> missing;
  for (const auto& m : pool) {
    if (m.auth.empty()) continue;
    const char* v = std::getenv(m.auth.c_str());
    if (v == nullptr || *v == '\0') missing.insert(m.auth);
  }
  return {missing.begin(), missing.end()};
}

json build_request_body(const ModelSpec& model, const ChatRequest& request) {
  json messages = json::array();
  if (!request.system.empty()) {
    messages.push_back({{"role", "system"}, {"content", request.system}});
  }
  json parts = json::array();
  parts.push_back({{"type", "text"}, {"text", request.user}});
  for (const auto& img : request.images) {
    parts.push_back({{"type", "image_url"}, {"image_url", {{"url", image_url_for(img)}}}});
  }
  messages.push_back({{"role", "user"}, {"content", parts}});

  json body{{"model", model.model_id}, {"messages", messages}};
  for (const auto& [k, v] : model.decode_params.items()) body[k] = v;
  return body;
}

ChatResult HttpChatClient::complete(const ModelSpec& model, const ChatRequest& request) {
  auto url = parse_url(model.endpoint);
  if (!url) return {Outcome::ClientError, 0, {}, "unparseable endpoint " + model.endpoint};

  httplib::Client cli(url->scheme_host_port);
  auto timeout = std::chrono::duration<double>(model.request_timeout);
  auto as_us = std::chrono::duration_cast<std::chrono::microseconds>(timeout);
  cli.set_connection_timeout(as_us);
  cli.set_read_timeout(as_us);
  cli.set_write_timeout(as_us);

  httplib::Headers headers;
  if (!model.auth.empty()) {
    const char* token = std::getenv(model.auth.c_str());
    if (token == nullptr) return {Outcome::ClientError, 0, {}, "credential " + model.auth + " unset"};
    headers.emplace("Authorization", std::string("Bearer ") + token);
  }

  std::string body;
  try {
    body = build_request_body(model, request).dump();
  } catch (const std::exception& e) {
    return {Outcome::ClientError, 0, {}, std::string("cannot build request: ") + e.what()};
  }

  auto res = cli.Post(url->path, headers, body, "application/json");
  if (!res) {
    return {Outcome::Retryable, 0, {}, "transport: " + httplib::to_string(res.error())};
  }
  const int status = res->status;
  if (status == 408 || status == 429 || status >= 500) {
    return {Outcome::Retryable, status, {}, fmt::format("HTTP {}: {}", status, res->body.substr(0, 200))};
  }
  if (status < 200 || status >= 300) {
    return {Outcome::ClientError, status, {}, fmt::format("HTTP {}: {}", status, res->body.substr(0, 200))};
  }
  try {
    auto reply = json::parse(res->body);
    return {Outcome::Ok, status, content_text(reply.at("choices").at(0).at("message").at("content")), {}};
  } catch (const std::exception& e) {
    return {Outcome::ClientError, status, {}, std::string("unusable reply: ") + e.what()};
  }
}

std::string synth_response(std::string_view model_id, std::string_view user_text) {
  std::string key(model_id);
  key += '\x1f';
  key += user_text;
  Rng rng(derive_seed(0x5e17f00dULL, key));
  // Each model gets its own typical length so pool members are distinguishable.
  std::size_t base = 4 + static_cast<std::size_t>(derive_seed(7, model_id) % 24);
  std::size_t words = base + static_cast<std::size_t>(rng.below(12));
  std::string out;
  for (std::size_t i = 0; i < words; ++i) {
    if (i > 0) out += ' ';
    out += kLexicon[rng.below(std::size(kLexicon))];
  }
  out += '.';
  return out;
}

MockChatClient::MockChatClient() {
  handlers_["echo"] = [](const ModelSpec&, const ChatRequest& r) { return ChatResult::ok(r.user); };
  handlers_["synth"] = [](const ModelSpec& m, const ChatRequest& r) {
    return ChatResult::ok(synth_response(m.model_id, r.user));
  };
}

void MockChatClient::register_handler(std::string name, MockHandler handler) {
  std::lock_guard lock(mu_);
  handlers_[std::move(name)] = std::move(handler);
}

ChatResult MockChatClient::complete(const ModelSpec& model, const ChatRequest& request) {
  MockHandler handler;
  {
    std::lock_guard lock(mu_);
    ++calls_;
    std::string_view name(model.endpoint);
    if (name.starts_with("mock://")) name.remove_prefix(7);
    auto it = handlers_.find(name);
    if (it == handlers_.end()) {
      return {Outcome::ClientError, 404, {}, fmt::format("no mock handler '{}'", name)};
    }
    handler = it->second;
  }
  return handler(model, request);
}

std::size_t MockChatClient::calls() const {
  std::lock_guard lock(mu_);
  return calls_;
}

RoutingChatClient::RoutingChatClient(std::shared_ptr<MockChatClient> mock, std::shared_ptr<ChatClient> remote)
    : mock_(std::move(mock)), remote_(std::move(remote)) {}

ChatResult RoutingChatClient::complete(const ModelSpec& model, const ChatRequest& request) {
  if (model.endpoint.starts_with("mock://")) return mock_->complete(model, request);
  return remote_->complete(model, request);
}

void sleep_seconds(double seconds) {
  if (seconds > 0) std::this_thread::sleep_for(std::chrono::duration<double>(seconds));
}

CallResult call_with_retry(ChatClient& client, const ModelSpec& model, const ChatRequest& request,
                           const RetryPolicy& policy, Rng& jitter) {
  CallResult out;
  for (int attempt = 0;; ++attempt) {
    out.attempts = attempt + 1;
    out.result = client.complete(model, request);
    if (out.result.outcome != Outcome::Retryable || attempt >= policy.max_retries) return out;
    double cap = policy.base_delay_seconds * std::ldexp(1.0, attempt);
    policy.sleep(jitter.uniform() * cap);
  }
}

void RateLimiter::acquire(const std::string& endpoint) {
  if (rpm_ <= 0) return;
  using clock = std::chrono::steady_clock;
  auto interval = std::chrono::duration_cast<clock::duration>(std::chrono::duration<double>(60.0 / rpm_));
  clock::time_point slot;
  {
    std::lock_guard lock(mu_);
    auto now = clock::now();
    auto& next = next_slot_[endpoint];
    slot = std::max(now, next);
    next = slot + interval;
  }
  std::this_thread::sleep_until(slot);
}

}  // namespace forge::endpoint
