// Tabular DPO training, preference-pair vocabularies and policy checkpoints.
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "forge/dpo.hpp"
#include "forge/pairs.hpp"

namespace forge::dpo {

struct TrainResult {
  TabularPolicy policy;
  std::vector<LossReport> history;  ///< one per optimizer step, measured before the update
  std::size_t total_steps = 0;
};

/// ceil(pairs / batch_size) * epochs.
std::size_t total_steps(std::size_t pairs, const DPOConfig& config);

/// Mini-batch AdamW on the DPO loss. Each epoch visits the pairs in a fresh
/// Fisher–Yates order drawn from the config seed; the last partial batch is kept.
/// Step i (0-based) uses lr_schedule(i, total_steps). Throws ValidationError on
/// empty pairs, a shape mismatch with `ref`, or an invalid pair.
TrainResult train_dpo(TabularPolicy policy, const TabularPolicy& ref, std::span<const PreferenceExample> pairs,
                      const DPOConfig& config);

/// Contexts are instruction ids and responses are distinct response texts, both
/// in first-seen order. `policy` is uniform over that vocabulary.
struct Vocabulary {
  TabularPolicy policy;
  std::vector<PreferenceExample> examples;
};

Vocabulary build_vocabulary(const std::vector<pairs::PreferencePair>& pairs);

/// Trains on the pairs whose split is "train" (or unset) and writes
/// policy.ckpt, losses.jsonl and eval.json under `dir`. Returns a short summary.
json train_to_dir(const std::vector<pairs::PreferencePair>& pairs, const DPOConfig& config, const fs::path& dir);

/// Text checkpoint: a "forge-tabular-policy 1" line, then dimensions, ids as
/// JSON strings and one row of %.17g logits per context. Round-trips exactly.
void save_policy(const TabularPolicy& policy, const fs::path& path);
TabularPolicy load_policy(const fs::path& path);

/// Preferences over a hidden score table (a permutation of 0..Y-1 per context).
/// Holdout pairs use (context, response pair) combinations that never occur in
/// training and are labelled by the true order. Training pairs are sampled with
/// replacement from the rest and labelled by Bradley–Terry draws,
/// P(a preferred to b) = sigmoid(score_a - score_b).
struct SyntheticTask {
  std::vector<double> scores;  ///< laid out like TabularPolicy::parameters()
  TabularPolicy reference;     ///< uniform
  std::vector<PreferenceExample> train;
  std::vector<PreferenceExample> holdout;
};

SyntheticTask make_synthetic_task(std::size_t contexts, std::size_t responses, std::size_t n_train,
                                  std::size_t n_holdout, std::uint64_t seed);

}  // namespace forge::dpo
