#include "forge/review.hpp"

#include <fmt/format.h>
#include <httplib.h>
#include <spdlog/spdlog.h>

#include "forge/rng.hpp"

namespace forge::review {

ReviewSet sample_review_set(const std::vector<pairs::PreferencePair>& pairs, std::size_t n, std::uint64_t seed) {
  if (n > pairs.size()) {
    throw ValidationError(fmt::format("review set of {} requested but only {} comparisons are available", n,
                                      pairs.size()));
  }
  ReviewSet set;
  set.seed = seed;
  Rng rng(derive_seed(seed, "review"));
  auto picks = rng.sample_indices(pairs.size(), n);
  for (std::size_t i = 0; i < picks.size(); ++i) {
    const auto& p = pairs[picks[i]];
    ReviewComparison c;
    c.comparison_id = fmt::format("c{:04}", i + 1);
    c.instruction_id = p.instruction_id;
    c.prompt = p.prompt;
    c.images = p.images;
    const bool chosen_first = rng.below(2) == 0;
    const auto& a = chosen_first ? p.chosen : p.rejected;
    const auto& b = chosen_first ? p.rejected : p.chosen;
    c.response_a = a.text;
    c.response_b = b.text;
    c.model_a = a.model_id;
    c.model_b = b.model_id;
    c.judge_pref = chosen_first ? stats::Choice::A : stats::Choice::B;
    set.comparisons.push_back(std::move(c));
  }
  return set;
}

json to_json(const ReviewSet& set) {
  json items = json::array();
  for (const auto& c : set.comparisons) {
    items.push_back(json{{"comparison_id", c.comparison_id},
                         {"instruction_id", c.instruction_id},
                         {"prompt", c.prompt},
                         {"images", c.images},
                         {"response_a", c.response_a},
                         {"response_b", c.response_b},
                         {"model_a", c.model_a},
                         {"model_b", c.model_b},
                         {"judge_pref", stats::to_string(c.judge_pref)}});
  }
  return json{{"seed", set.seed}, {"comparisons", items}};
}

ReviewSet review_set_from_json(const json& j) {
  try {
    ReviewSet set;
    set.seed = j.at("seed").get<std::uint64_t>();
    std::set<std::string> ids;
    for (const auto& item : j.at("comparisons")) {
      ReviewComparison c;
      c.comparison_id = item.at("comparison_id").get<std::string>();
      c.instruction_id = item.value("instruction_id", std::string{});
      c.prompt = item.at("prompt").get<std::string>();
      c.images = item.value("images", std::vector<std::string>{});
      c.response_a = item.at("response_a").get<std::string>();
      c.response_b = item.at("response_b").get<std::string>();
      c.model_a = item.value("model_a", std::string{});
      c.model_b = item.value("model_b", std::string{});
      auto pref = stats::parse_choice(item.at("judge_pref").get<std::string>());
      if (!pref || *pref == stats::Choice::Tie) {
        throw ValidationError(fmt::format("comparison {}: judge_pref must be A or B", c.comparison_id));
      }
      c.judge_pref = *pref;
      if (!ids.insert(c.comparison_id).second) {
        throw ValidationError(fmt::format("duplicate comparison id {}", c.comparison_id));
      }
      set.comparisons.push_back(std::move(c));
    }
    return set;
  } catch (const json::exception& e) {
    throw ValidationError(fmt::format("invalid review set: {}", e.what()));
  }
}

void save_review_set(const ReviewSet& set, const fs::path& path) { write_file_atomic(path, to_json(set).dump(2) + "\n"); }

ReviewSet load_review_set(const fs::path& path) {
  try {
    return review_set_from_json(json::parse(read_file(path)));
  } catch (const json::parse_error& e) {
    throw ValidationError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

json ui_payload(const ReviewComparison& c) {
  return json{{"comparison_id", c.comparison_id},
              {"prompt", c.prompt},
              {"images", c.images},
              {"response_a", c.response_a},
              {"response_b", c.response_b}};
}

std::map<std::string, stats::Choice> judge_preferences(const ReviewSet& set) {
  std::map<std::string, stats::Choice> out;
  for (const auto& c : set.comparisons) out[c.comparison_id] = c.judge_pref;
  return out;
}

std::vector<stats::HumanVote> load_votes(const fs::path& path) {
  std::vector<stats::HumanVote> out;
  if (!fs::exists(path)) return out;
  for (const auto& line : read_jsonl(path)) {
    if (!line.value) throw ValidationError(fmt::format("{}:{}: malformed vote", path.string(), line.line_no));
    out.push_back(stats::vote_from_json(*line.value));
  }
  return out;
}

struct ReviewService::Server {
  httplib::Server http;
};

namespace {

void reply(httplib::Response& res, const HttpReply& r) {
  res.status = r.status;
  res.set_content(r.body.dump(), "application/json; charset=utf-8");
}

HttpReply error_reply(int status, std::string message) { return {status, json{{"error", std::move(message)}}}; }

}  // namespace

ReviewService::ReviewService(ReviewSet set, fs::path votes_path, Clock clock)
    : set_(std::move(set)), clock_(std::move(clock)), votes_out_(votes_path) {
  for (std::size_t i = 0; i < set_.comparisons.size(); ++i) index_[set_.comparisons[i].comparison_id] = i;
  judge_prefs_ = judge_preferences(set_);
  for (auto& v : load_votes(votes_path)) {
    if (!index_.count(v.comparison_id)) continue;
    if (first_votes_.emplace(std::pair{v.annotator_id, v.comparison_id}, v.choice).second) {
      accepted_.push_back(std::move(v));
    }
  }
}

ReviewService::~ReviewService() { stop(); }

HttpReply ReviewService::next(const std::string& annotator) const {
  if (trim(annotator).empty()) return error_reply(400, "annotator is required");
  std::lock_guard lock(mu_);
  std::size_t done = 0;
  const ReviewComparison* pending = nullptr;
  for (const auto& c : set_.comparisons) {
    if (first_votes_.count({annotator, c.comparison_id})) {
      ++done;
    } else if (pending == nullptr) {
      pending = &c;
    }
  }
  json progress{{"done", done}, {"total", set_.comparisons.size()}};
  if (pending == nullptr) return {200, json{{"done", true}, {"progress", progress}}};
  return {200, json{{"done", false}, {"comparison", ui_payload(*pending)}, {"progress", progress}}};
}

HttpReply ReviewService::vote(const std::string& body) {
  std::string annotator, comparison_id;
  stats::Choice choice{};
  try {
    json j = json::parse(body);
    annotator = j.at("annotator").get<std::string>();
    comparison_id = j.at("comparison_id").get<std::string>();
    auto c = stats::parse_choice(j.at("choice").get<std::string>());
    if (!c) return error_reply(400, "choice must be A, B or tie");
    choice = *c;
  } catch (const json::exception& e) {
    return error_reply(400, fmt::format("malformed vote: {}", e.what()));
  }
  if (trim(annotator).empty()) return error_reply(400, "annotator is required");
  if (!index_.count(comparison_id)) return error_reply(404, fmt::format("unknown comparison {}", comparison_id));

  std::lock_guard lock(mu_);
  auto key = std::pair{annotator, comparison_id};
  if (auto it = first_votes_.find(key); it != first_votes_.end()) {
    if (it->second == choice) return {200, json{{"status", "duplicate"}}};
    return {409, json{{"error", "a different vote is already recorded"}, {"stored", stats::to_string(it->second)}}};
  }
  stats::HumanVote v{annotator, comparison_id, choice, clock_()};
  votes_out_.append(stats::to_json(v));
  first_votes_.emplace(key, choice);
  accepted_.push_back(std::move(v));
  return {200, json{{"status", "recorded"}}};
}

HttpReply ReviewService::agreement() const {
  std::lock_guard lock(mu_);
  if (accepted_.empty()) return {200, json{{"votes", 0}, {"matches", 0}}};
  return {200, stats::to_json(stats::agreement_rate(accepted_, judge_prefs_))};
}

std::vector<stats::HumanVote> ReviewService::accepted_votes() const {
  std::lock_guard lock(mu_);
  return accepted_;
}

void ReviewService::set_static_dir(fs::path dir) { static_dir_ = std::move(dir); }

void ReviewService::install_routes() {
  auto& http = server_->http;
  http.Get("/api/comparisons/next", [this](const httplib::Request& req, httplib::Response& res) {
    reply(res, next(req.get_param_value("annotator")));
  });
  http.Post("/api/votes",
            [this](const httplib::Request& req, httplib::Response& res) { reply(res, vote(req.body)); });
  http.Get("/api/agreement",
           [this](const httplib::Request&, httplib::Response& res) { reply(res, agreement()); });
  if (!static_dir_.empty() && !http.set_mount_point("/", static_dir_.string())) {
    throw IoError(fmt::format("static directory {} does not exist", static_dir_.string()));
  }
}

int ReviewService::start(const std::string& host, int port) {
  if (server_) throw Error("review service already running");
  server_ = std::make_unique<Server>();
  install_routes();
  int bound = port == 0 ? server_->http.bind_to_any_port(host) : (server_->http.bind_to_port(host, port) ? port : -1);
  if (bound < 0) {
    server_.reset();
    throw IoError(fmt::format("cannot bind {}:{}", host, port));
  }
  thread_ = std::thread([this] { server_->http.listen_after_bind(); });
  server_->http.wait_until_ready();
  spdlog::info("review service listening on {}:{}", host, bound);
  return bound;
}

void ReviewService::serve(const std::string& host, int port) {
  if (server_) throw Error("review service already running");
  server_ = std::make_unique<Server>();
  install_routes();
  if (!server_->http.bind_to_port(host, port)) throw IoError(fmt::format("cannot bind {}:{}", host, port));
  spdlog::info("review service listening on {}:{}", host, port);
  server_->http.listen_after_bind();
}

void ReviewService::stop() {
  if (server_) server_->http.stop();
  if (thread_.joinable()) thread_.join();
  server_.reset();
}

}  // namespace forge::review
