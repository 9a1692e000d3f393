#include "forge/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <iterator>
#include <map>
#include <numeric>
#include <sstream>

#include <fmt/format.h>

#include "forge/rng.hpp"

namespace forge::dpo {

namespace {

constexpr std::string_view kCheckpointMagic = "forge-tabular-policy 1";

LossReport batch_step(const TabularPolicy& policy, const TabularPolicy& ref, std::span<const PreferenceExample> batch,
                      double beta, std::vector<double>& grad) {
  auto quads = quads_for(policy, ref, batch);
  LossReport r = dpo_loss(quads, beta);
  grad = grad_dpo_tabular(policy, ref, batch, beta);
  double sq = 0;
  for (double g : grad) sq += g * g;
  r.grad_norm = std::sqrt(sq);
  return r;
}

}  // namespace

std::size_t total_steps(std::size_t pairs, const DPOConfig& config) {
  std::size_t per_epoch = (pairs + config.batch_size - 1) / config.batch_size;
  return per_epoch * static_cast<std::size_t>(config.epochs);
}

TrainResult train_dpo(TabularPolicy policy, const TabularPolicy& ref, std::span<const PreferenceExample> pairs,
                      const DPOConfig& config) {
  config.validate();
  if (pairs.empty()) throw ValidationError("no preference pairs to train on");
  if (!policy.same_shape(ref)) {
    throw ValidationError(fmt::format("policy is {}x{} but reference is {}x{}", policy.contexts(), policy.responses(),
                                      ref.contexts(), ref.responses()));
  }
  validate_examples(policy, pairs);

  TrainResult result;
  result.total_steps = total_steps(pairs.size(), config);
  AdamW opt = AdamW::from_config(policy.parameters().size(), config);
  Rng rng(derive_seed(config.seed, "shuffle"));
  std::vector<std::size_t> order(pairs.size());
  std::vector<PreferenceExample> batch;
  std::vector<double> grad;
  std::size_t step = 0;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      std::size_t end = std::min(order.size(), start + config.batch_size);
      batch.clear();
      for (std::size_t i = start; i < end; ++i) batch.push_back(pairs[order[i]]);

      LossReport r = batch_step(policy, ref, batch, config.beta, grad);
      r.step = step;
      r.lr_used = lr_schedule(step, result.total_steps, config);
      opt.step(policy.parameters(), grad, r.lr_used);
      result.history.push_back(r);
      ++step;
    }
  }
  result.policy = std::move(policy);
  return result;
}

Vocabulary build_vocabulary(const std::vector<pairs::PreferencePair>& pairs) {
  if (pairs.empty()) throw ValidationError("no preference pairs to build a vocabulary from");
  std::vector<std::string> contexts, responses;
  std::map<std::string, std::size_t> context_index, response_index;
  auto intern = [](std::vector<std::string>& ids, std::map<std::string, std::size_t>& index, const std::string& key) {
    auto [it, inserted] = index.emplace(key, ids.size());
    if (inserted) ids.push_back(key);
    return it->second;
  };

  std::vector<PreferenceExample> examples;
  examples.reserve(pairs.size());
  for (const auto& p : pairs) {
    PreferenceExample e;
    e.context = intern(contexts, context_index, p.instruction_id);
    e.chosen = intern(responses, response_index, p.chosen.text);
    e.rejected = intern(responses, response_index, p.rejected.text);
    if (e.chosen == e.rejected) {
      throw ValidationError(fmt::format("pair for {}: chosen and rejected texts are identical", p.instruction_id));
    }
    examples.push_back(e);
  }
  return {TabularPolicy(std::move(contexts), std::move(responses)), std::move(examples)};
}

json train_to_dir(const std::vector<pairs::PreferencePair>& pairs, const DPOConfig& config, const fs::path& dir) {
  std::vector<pairs::PreferencePair> train;
  std::copy_if(pairs.begin(), pairs.end(), std::back_inserter(train),
               [](const pairs::PreferencePair& p) { return p.split.empty() || p.split == "train"; });
  if (train.empty()) throw ValidationError("no training pairs");

  auto vocab = build_vocabulary(train);
  auto result = train_dpo(vocab.policy, vocab.policy, vocab.examples, config);
  auto final_report = evaluate(result.policy, vocab.policy, vocab.examples, config.beta);

  fs::create_directories(dir);
  save_policy(result.policy, dir / "policy.ckpt");
  std::string losses;
  for (const auto& r : result.history) losses += to_json(r).dump() + "\n";
  write_file_atomic(dir / "losses.jsonl", losses);
  json eval{{"config", to_json(config)},
            {"train_pairs", train.size()},
            {"held_out_pairs", pairs.size() - train.size()},
            {"contexts", vocab.policy.contexts()},
            {"responses", vocab.policy.responses()},
            {"steps", result.total_steps},
            {"initial", to_json(result.history.front())},
            {"final", to_json(final_report)}};
  write_file_atomic(dir / "eval.json", eval.dump(2) + "\n");
  return json{{"steps", result.total_steps},
              {"train_pairs", train.size()},
              {"final_loss", final_report.mean_loss},
              {"final_pair_accuracy", final_report.pair_accuracy}};
}

void save_policy(const TabularPolicy& policy, const fs::path& path) {
  std::string out(kCheckpointMagic);
  out += fmt::format("\ncontexts {}\n", policy.contexts());
  for (const auto& id : policy.context_ids()) out += json(id).dump() + "\n";
  out += fmt::format("responses {}\n", policy.responses());
  for (const auto& id : policy.response_ids()) out += json(id).dump() + "\n";
  out += "logits\n";
  for (std::size_t c = 0; c < policy.contexts(); ++c) {
    auto row = policy.row(c);
    for (std::size_t y = 0; y < row.size(); ++y) {
      if (y > 0) out += ' ';
      out += fmt::format("{:.17g}", row[y]);
    }
    out += "\n";
  }
  write_file_atomic(path, out);
}

TabularPolicy load_policy(const fs::path& path) {
  std::istringstream in(read_file(path));
  std::string line;
  std::size_t line_no = 0;
  auto next = [&](std::string_view what) {
    if (!std::getline(in, line)) {
      throw ValidationError(fmt::format("{}: truncated checkpoint, expected {}", path.string(), what));
    }
    ++line_no;
    return line;
  };
  auto fail = [&](std::string_view what) {
    return ValidationError(fmt::format("{}:{}: {}", path.string(), line_no, what));
  };
  auto read_ids = [&](std::string_view label) {
    std::string header = next(label);
    std::string prefix = std::string(label) + " ";
    if (header.rfind(prefix, 0) != 0) throw fail(fmt::format("expected '{}<count>'", prefix));
    std::size_t n = 0;
    try {
      n = std::stoul(header.substr(prefix.size()));
    } catch (const std::exception&) {
      throw fail("bad count");
    }
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < n; ++i) {
      try {
        ids.push_back(json::parse(next("an id")).get<std::string>());
      } catch (const json::exception&) {
        throw fail("id is not a JSON string");
      }
    }
    return ids;
  };

  if (next("header") != kCheckpointMagic) throw fail("not a tabular policy checkpoint");
  auto contexts = read_ids("contexts");
  auto responses = read_ids("responses");
  if (next("logits") != "logits") throw fail("expected 'logits'");
  TabularPolicy policy(std::move(contexts), std::move(responses));
  for (std::size_t c = 0; c < policy.contexts(); ++c) {
    std::istringstream row(next("a logits row"));
    for (std::size_t y = 0; y < policy.responses(); ++y) {
      std::string tok;
      if (!(row >> tok)) throw fail(fmt::format("row has fewer than {} values", policy.responses()));
      try {
        std::size_t used = 0;
        policy.logit(c, y) = std::stod(tok, &used);
        if (used != tok.size()) throw std::invalid_argument(tok);
      } catch (const std::exception&) {
        throw fail(fmt::format("bad logit '{}'", tok));
      }
    }
    std::string extra;
    if (row >> extra) throw fail(fmt::format("row has more than {} values", policy.responses()));
  }
  return policy;
}

SyntheticTask make_synthetic_task(std::size_t contexts, std::size_t responses, std::size_t n_train,
                                  std::size_t n_holdout, std::uint64_t seed) {
  if (contexts == 0 || responses < 2) throw ValidationError("synthetic task needs a context and two responses");
  const std::size_t combos_per_context = responses * (responses - 1) / 2;
  const std::size_t combos = contexts * combos_per_context;
  if (n_holdout >= combos) throw ValidationError("holdout would consume every response pair");

  SyntheticTask task;
  task.reference = TabularPolicy(contexts, responses);
  task.scores.resize(contexts * responses);

  // Scores are a random permutation of 0..Y-1 per context. Training labels are
  // Bradley–Terry draws, P(a beats b) = sigmoid(s_a - s_b); holdout labels are the
  // true order. Noise-free training labels would leave a held-out adjacent pair
  // with identical evidence on both sides.
  Rng score_rng(derive_seed(seed, "scores"));
  for (std::size_t c = 0; c < contexts; ++c) {
    std::vector<std::size_t> perm(responses);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    score_rng.shuffle(std::span<std::size_t>(perm));
    for (std::size_t y = 0; y < responses; ++y) task.scores[c * responses + y] = static_cast<double>(perm[y]);
  }

  auto example_for = [&](std::size_t combo, Rng* noise) {
    std::size_t c = combo / combos_per_context;
    std::size_t k = combo % combos_per_context;
    std::size_t a = 0;
    while (k >= responses - 1 - a) {
      k -= responses - 1 - a;
      ++a;
    }
    std::size_t b = a + 1 + k;
    double gap = task.scores[c * responses + a] - task.scores[c * responses + b];
    bool a_wins = noise ? noise->uniform() < 1.0 / (1.0 + std::exp(-gap)) : gap > 0;
    return PreferenceExample{c, a_wins ? a : b, a_wins ? b : a, 1.0};
  };

  Rng split_rng(derive_seed(seed, "holdout"));
  std::vector<std::size_t> held = split_rng.sample_indices(combos, n_holdout);
  std::vector<bool> is_held(combos, false);
  for (std::size_t i : held) {
    is_held[i] = true;
    task.holdout.push_back(example_for(i, nullptr));
  }
  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < combos; ++i) {
    if (!is_held[i]) pool.push_back(i);
  }
  Rng train_rng(derive_seed(seed, "train"));
  task.train.reserve(n_train);
  for (std::size_t i = 0; i < n_train; ++i) {
    std::size_t combo = pool[train_rng.below(pool.size())];
    task.train.push_back(example_for(combo, &train_rng));
  }
  return task;
}

}  // namespace forge::dpo
