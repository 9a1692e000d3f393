// Direct preference optimization on log-probabilities, with an exactly
// analyzable tabular softmax policy.
//
// For a pair (x, y_w, y_l) with policy log-probs lp_theta_* and reference
// log-probs lp_ref_*, the margin is
//
//   z = beta * ((lp_theta_w - lp_ref_w) - (lp_theta_l - lp_ref_l))
//
// and the per-pair loss is -log sigmoid(z) = softplus(-z). Minimizing its mean
// maximizes the Bradley–Terry log-likelihood of the observed preferences.
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "forge/io.hpp"

namespace forge::dpo {

/// Softmax policy over a finite response set for each context:
/// log pi(y | c) = logits[c][y] - logsumexp_y' logits[c][y'].
class TabularPolicy {
 public:
  TabularPolicy() = default;
  /// Zero logits, i.e. the uniform policy.
  TabularPolicy(std::vector<std::string> context_ids, std::vector<std::string> response_ids);
  TabularPolicy(std::size_t contexts, std::size_t responses);

  std::size_t contexts() const { return context_ids_.size(); }
  std::size_t responses() const { return response_ids_.size(); }
  const std::vector<std::string>& context_ids() const { return context_ids_; }
  const std::vector<std::string>& response_ids() const { return response_ids_; }

  double logit(std::size_t c, std::size_t y) const { return logits_[c * responses() + y]; }
  double& logit(std::size_t c, std::size_t y) { return logits_[c * responses() + y]; }
  std::span<double> row(std::size_t c) { return {logits_.data() + c * responses(), responses()}; }
  std::span<const double> row(std::size_t c) const { return {logits_.data() + c * responses(), responses()}; }
  std::span<double> parameters() { return logits_; }
  std::span<const double> parameters() const { return logits_; }

  double log_normalizer(std::size_t c) const;
  double log_prob(std::size_t c, std::size_t y) const;
  std::vector<double> log_probs(std::size_t c) const;

  bool same_shape(const TabularPolicy& other) const;
  friend bool operator==(const TabularPolicy&, const TabularPolicy&) = default;

 private:
  std::vector<std::string> context_ids_;
  std::vector<std::string> response_ids_;
  std::vector<double> logits_;
};

struct DPOConfig {
  double beta = 0.1;
  int epochs = 3;
  double peak_lr = 1e-5;
  double warmup_ratio = 0.1;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.98;
  double adam_eps = 1e-6;
  double weight_decay = 0.05;
  std::size_t batch_size = 256;
  std::uint64_t seed = 0;

  /// Throws ValidationError when a field is out of range.
  void validate() const;
};

json to_json(const DPOConfig& c);
DPOConfig config_from_json(const json& j, DPOConfig defaults = {});

struct LogProbQuad {
  double lp_theta_w = 0;
  double lp_theta_l = 0;
  double lp_ref_w = 0;
  double lp_ref_l = 0;
};

struct LossReport {
  double mean_loss = 0;
  double mean_margin = 0;  ///< mean of z
  double pair_accuracy = 0;
  double grad_norm = 0;
  double lr_used = 0;
  std::size_t step = 0;
};

json to_json(const LossReport& r);

/// log(1 + exp(x)) without overflow.
double softplus(double x);

/// beta * ((lp_theta_w - lp_ref_w) - (lp_theta_l - lp_ref_l)); equals the reward
/// difference r(x, y_w) - r(x, y_l) since the log-partition term cancels.
double implicit_reward_diff(double lp_theta_w, double lp_ref_w, double lp_theta_l, double lp_ref_l, double beta);
double implicit_reward_diff(const LogProbQuad& q, double beta);

/// Mean loss over the batch. grad_norm is the norm of the gradient of the mean
/// loss with respect to the policy log-probs (lp_theta_w, lp_theta_l of every pair).
/// Throws ValidationError on an empty batch, beta <= 0 or non-finite inputs.
LossReport dpo_loss(std::span<const LogProbQuad> quads, double beta);

/// One preference over tabular ids. `weight` scales the pair's loss term.
struct PreferenceExample {
  std::size_t context = 0;
  std::size_t chosen = 0;
  std::size_t rejected = 0;
  double weight = 1.0;
};

/// Throws ValidationError for ids out of range or chosen == rejected.
void validate_examples(const TabularPolicy& policy, std::span<const PreferenceExample> batch);

std::vector<LogProbQuad> quads_for(const TabularPolicy& policy, const TabularPolicy& ref,
                                   std::span<const PreferenceExample> batch);

/// Weighted mean loss: sum_i w_i * softplus(-z_i) / sum_i w_i.
double mean_loss(const TabularPolicy& policy, const TabularPolicy& ref, std::span<const PreferenceExample> batch,
                 double beta);

/// Exact gradient of mean_loss with respect to the logits, laid out like
/// TabularPolicy::parameters(). Rows of contexts absent from the batch are zero.
std::vector<double> grad_dpo_tabular(const TabularPolicy& policy, const TabularPolicy& ref,
                                     std::span<const PreferenceExample> batch, double beta);

/// Loss telemetry for the batch (grad_norm is the norm of the logit gradient).
LossReport evaluate(const TabularPolicy& policy, const TabularPolicy& ref, std::span<const PreferenceExample> batch,
                    double beta);

/// Linear warmup from 0 to peak_lr over ceil(warmup_ratio * total_steps) steps,
/// then cosine decay to 0 at total_steps.
double lr_schedule(std::size_t step, std::size_t total_steps, const DPOConfig& config);
std::size_t warmup_steps(std::size_t total_steps, double warmup_ratio);

/// Adam with decoupled weight decay.
class AdamW {
 public:
  AdamW(std::size_t parameters, double beta1, double beta2, double eps, double weight_decay);
  static AdamW from_config(std::size_t parameters, const DPOConfig& config);

  void step(std::span<double> params, std::span<const double> grad, double lr);
  std::size_t steps_taken() const { return t_; }

 private:
  double beta1_, beta2_, eps_, weight_decay_;
  std::vector<double> m_, v_;
  std::size_t t_ = 0;
};

/// pi*(y|c) = pi_ref(y|c) exp(reward[c][y] / beta) / Z(c) as a tabular policy
/// (logits are the normalized log-probs). `reward` is laid out like parameters().
TabularPolicy closed_form_optimal(const TabularPolicy& ref, std::span<const double> reward, double beta);

/// log Z(c) = log sum_y pi_ref(y|c) exp(reward[c][y] / beta).
double log_partition(const TabularPolicy& ref, std::span<const double> reward, std::size_t c, double beta);

struct ExternalScore {
  LossReport report;
  std::vector<std::pair<std::string, double>> rewards;  ///< pair_id -> implicit reward difference
};

/// Streams a quad file ({"pair_id", "lp_theta_w", "lp_theta_l", "lp_ref_w",
/// "lp_ref_l"} per line) through dpo_loss. Malformed lines throw ValidationError
/// with the line number.
ExternalScore score_external(const fs::path& path, double beta);

}  // namespace forge::dpo
