// Blind A/B review sets and the HTTP service that collects human votes.
//
// Endpoints (JSON bodies, UTF-8):
//   GET  /api/comparisons/next?annotator=ID
//        200 {"done": false, "comparison": {...}, "progress": {"done": k, "total": n}}
//        200 {"done": true, "progress": {...}} once the annotator has voted on everything
//   POST /api/votes {"annotator": ID, "comparison_id": ID, "choice": "A" | "B" | "tie"}
//        200 {"status": "recorded" | "duplicate"}, 404 unknown comparison,
//        409 {"error": ..., "stored": choice} for a differing re-vote, 400 malformed body
//   GET  /api/agreement
//        200 agreement report over first-accepted votes ({"votes": 0} before any vote)
//
// UI payloads carry only comparison_id, prompt, images and the two response texts.
#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "forge/io.hpp"
#include "forge/pairs.hpp"
#include "forge/stats.hpp"

namespace forge::review {

struct ReviewComparison {
  std::string comparison_id;
  std::string instruction_id;
  std::string prompt;
  std::vector<std::string> images;
  std::string response_a;
  std::string response_b;
  std::string model_a;  ///< withheld from UI payloads
  std::string model_b;  ///< withheld from UI payloads
  stats::Choice judge_pref = stats::Choice::A;
};

struct ReviewSet {
  std::uint64_t seed = 0;
  std::vector<ReviewComparison> comparisons;
};

/// n pairs drawn uniformly without replacement, each shown in a random A/B
/// orientation; ids are "c0001", "c0002", ... in draw order. Tied pairs never
/// reach this point (build_pairs drops them). Throws ValidationError when fewer
/// than n pairs are available.
ReviewSet sample_review_set(const std::vector<pairs::PreferencePair>& pairs, std::size_t n, std::uint64_t seed);

json to_json(const ReviewSet& set);
ReviewSet review_set_from_json(const json& j);
void save_review_set(const ReviewSet& set, const fs::path& path);
ReviewSet load_review_set(const fs::path& path);

/// The blind view sent to annotators.
json ui_payload(const ReviewComparison& c);

std::map<std::string, stats::Choice> judge_preferences(const ReviewSet& set);

std::vector<stats::HumanVote> load_votes(const fs::path& path);

struct HttpReply {
  int status = 200;
  json body;
};

class ReviewService {
 public:
  /// Existing votes in `votes_path` are loaded; new ones are appended.
  ReviewService(ReviewSet set, fs::path votes_path, Clock clock = system_clock());
  ~ReviewService();
  ReviewService(const ReviewService&) = delete;
  ReviewService& operator=(const ReviewService&) = delete;

  HttpReply next(const std::string& annotator) const;
  HttpReply vote(const std::string& body);
  HttpReply agreement() const;

  /// Files under `dir` are served at "/".
  void set_static_dir(fs::path dir);

  /// Binds and serves on a background thread; port 0 picks a free port.
  /// Returns the bound port.
  int start(const std::string& host, int port);
  /// Binds and serves on the calling thread until stop().
  void serve(const std::string& host, int port);
  void stop();

  std::vector<stats::HumanVote> accepted_votes() const;

 private:
  struct Server;
  void install_routes();

  ReviewSet set_;
  std::map<std::string, std::size_t> index_;
  std::map<std::string, stats::Choice> judge_prefs_;
  Clock clock_;
  fs::path static_dir_;

  mutable std::mutex mu_;
  std::map<std::pair<std::string, std::string>, stats::Choice> first_votes_;
  std::vector<stats::HumanVote> accepted_;
  JsonlAppender votes_out_;

  std::unique_ptr<Server> server_;
  std::thread thread_;
};

}  // namespace forge::review
