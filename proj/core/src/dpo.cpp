#include "forge/dpo.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <fmt/format.h>

namespace forge::dpo {

namespace {

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

void require_finite(const LogProbQuad& q, std::size_t index) {
  if (!std::isfinite(q.lp_theta_w) || !std::isfinite(q.lp_theta_l) || !std::isfinite(q.lp_ref_w) ||
      !std::isfinite(q.lp_ref_l)) {
    throw ValidationError(fmt::format("non-finite log-probability in pair {}", index));
  }
}

void require_beta(double beta) {
  if (!(beta > 0) || !std::isfinite(beta)) throw ValidationError(fmt::format("beta must be positive, got {}", beta));
}

// Running sums shared by dpo_loss and the streaming scorer.
struct LossAccumulator {
  double beta;
  double loss = 0;
  double margin = 0;
  double grad_sq = 0;
  std::size_t correct = 0;
  std::size_t n = 0;

  double add(const LogProbQuad& q) {
    double z = implicit_reward_diff(q, beta);
    loss += softplus(-z);
    margin += z;
    double g = beta * sigmoid(-z);
    grad_sq += 2 * g * g;
    if (z > 0) ++correct;
    ++n;
    return z;
  }

  LossReport finish() const {
    LossReport r;
    const double dn = static_cast<double>(n);
    r.mean_loss = loss / dn;
    r.mean_margin = margin / dn;
    r.pair_accuracy = static_cast<double>(correct) / dn;
    r.grad_norm = std::sqrt(grad_sq) / dn;
    return r;
  }
};

double logsumexp(std::span<const double> xs) {
  double mx = -INFINITY;
  for (double x : xs) mx = std::max(mx, x);
  if (!std::isfinite(mx)) return mx;
  double s = 0;
  for (double x : xs) s += std::exp(x - mx);
  return mx + std::log(s);
}

}  // namespace

TabularPolicy::TabularPolicy(std::vector<std::string> context_ids, std::vector<std::string> response_ids)
    : context_ids_(std::move(context_ids)),
      response_ids_(std::move(response_ids)),
      logits_(context_ids_.size() * response_ids_.size(), 0.0) {}

TabularPolicy::TabularPolicy(std::size_t contexts, std::size_t responses) {
  for (std::size_t c = 0; c < contexts; ++c) context_ids_.push_back("c" + std::to_string(c));
  for (std::size_t y = 0; y < responses; ++y) response_ids_.push_back("y" + std::to_string(y));
  logits_.assign(contexts * responses, 0.0);
}

double TabularPolicy::log_normalizer(std::size_t c) const { return logsumexp(row(c)); }

double TabularPolicy::log_prob(std::size_t c, std::size_t y) const { return logit(c, y) - log_normalizer(c); }

std::vector<double> TabularPolicy::log_probs(std::size_t c) const {
  double lse = log_normalizer(c);
  std::vector<double> out(responses());
  for (std::size_t y = 0; y < responses(); ++y) out[y] = logit(c, y) - lse;
  return out;
}

bool TabularPolicy::same_shape(const TabularPolicy& other) const {
  return contexts() == other.contexts() && responses() == other.responses();
}

void DPOConfig::validate() const {
  if (!(beta > 0)) throw ValidationError(fmt::format("beta must be positive, got {}", beta));
  if (epochs < 1) throw ValidationError("epochs must be at least 1");
  if (!(peak_lr >= 0)) throw ValidationError("peak_lr must be non-negative");
  if (!(warmup_ratio >= 0 && warmup_ratio <= 1)) throw ValidationError("warmup_ratio must lie in [0, 1]");
  if (!(adam_beta1 >= 0 && adam_beta1 < 1)) throw ValidationError("adam_beta1 must lie in [0, 1)");
  if (!(adam_beta2 >= 0 && adam_beta2 < 1)) throw ValidationError("adam_beta2 must lie in [0, 1)");
  if (!(adam_eps > 0)) throw ValidationError("adam_eps must be positive");
  if (!(weight_decay >= 0)) throw ValidationError("weight_decay must be non-negative");
  if (batch_size < 1) throw ValidationError("batch_size must be at least 1");
}

json to_json(const DPOConfig& c) {
  return json{{"beta", c.beta},
              {"epochs", c.epochs},
              {"peak_lr", c.peak_lr},
              {"warmup_ratio", c.warmup_ratio},
              {"adam_beta1", c.adam_beta1},
              {"adam_beta2", c.adam_beta2},
              {"adam_eps", c.adam_eps},
              {"weight_decay", c.weight_decay},
              {"batch_size", c.batch_size},
              {"seed", c.seed}};
}

DPOConfig config_from_json(const json& j, DPOConfig c) {
  try {
    c.beta = j.value("beta", c.beta);
    c.epochs = j.value("epochs", c.epochs);
    c.peak_lr = j.value("peak_lr", c.peak_lr);
    c.warmup_ratio = j.value("warmup_ratio", c.warmup_ratio);
    c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
    c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
  } catch (const json::exception& e) {
    throw ValidationError(fmt::format("invalid training config: {}", e.what()));
  }
  c.validate();
  return c;
}

json to_json(const LossReport& r) {
  return json{{"step", r.step},
              {"mean_loss", r.mean_loss},
              {"mean_margin", r.mean_margin},
              {"pair_accuracy", r.pair_accuracy},
              {"grad_norm", r.grad_norm},
              {"lr_used", r.lr_used}};
}

double softplus(double x) {
  if (x > 0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

double implicit_reward_diff(double lp_theta_w, double lp_ref_w, double lp_theta_l, double lp_ref_l, double beta) {
  return beta * ((lp_theta_w - lp_ref_w) - (lp_theta_l - lp_ref_l));
}

double implicit_reward_diff(const LogProbQuad& q, double beta) {
  return implicit_reward_diff(q.lp_theta_w, q.lp_ref_w, q.lp_theta_l, q.lp_ref_l, beta);
}

LossReport dpo_loss(std::span<const LogProbQuad> quads, double beta) {
  require_beta(beta);
  if (quads.empty()) throw ValidationError("dpo_loss over an empty batch");
  LossAccumulator acc{beta};
  for (std::size_t i = 0; i < quads.size(); ++i) {
    require_finite(quads[i], i);
    acc.add(quads[i]);
  }
  return acc.finish();
}

void validate_examples(const TabularPolicy& policy, std::span<const PreferenceExample> batch) {
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& e = batch[i];
    if (e.context >= policy.contexts() || e.chosen >= policy.responses() || e.rejected >= policy.responses()) {
      throw ValidationError(fmt::format("pair {}: id out of range (context {}, chosen {}, rejected {}) for a {}x{} policy",
                                        i, e.context, e.chosen, e.rejected, policy.contexts(), policy.responses()));
    }
    if (e.chosen == e.rejected) {
      throw ValidationError(fmt::format("pair {}: chosen and rejected are the same response {}", i, e.chosen));
    }
    if (!(e.weight > 0) || !std::isfinite(e.weight)) throw ValidationError(fmt::format("pair {}: weight must be positive", i));
  }
}

std::vector<LogProbQuad> quads_for(const TabularPolicy& policy, const TabularPolicy& ref,
                                   std::span<const PreferenceExample> batch) {
  if (!policy.same_shape(ref)) throw ValidationError("policy and reference shapes differ");
  validate_examples(policy, batch);
  std::vector<LogProbQuad> out;
  out.reserve(batch.size());
  for (const auto& e : batch) {
    double lse = policy.log_normalizer(e.context);
    double lse_ref = ref.log_normalizer(e.context);
    out.push_back({policy.logit(e.context, e.chosen) - lse, policy.logit(e.context, e.rejected) - lse,
                   ref.logit(e.context, e.chosen) - lse_ref, ref.logit(e.context, e.rejected) - lse_ref});
  }
  return out;
}

double mean_loss(const TabularPolicy& policy, const TabularPolicy& ref, std::span<const PreferenceExample> batch,
                 double beta) {
  require_beta(beta);
  if (batch.empty()) throw ValidationError("mean_loss over an empty batch");
  auto quads = quads_for(policy, ref, batch);
  double total = 0;
  double weight = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    total += batch[i].weight * softplus(-implicit_reward_diff(quads[i], beta));
    weight += batch[i].weight;
  }
  return total / weight;
}

std::vector<double> grad_dpo_tabular(const TabularPolicy& policy, const TabularPolicy& ref,
                                     std::span<const PreferenceExample> batch, double beta) {
  require_beta(beta);
  if (batch.empty()) throw ValidationError("gradient over an empty batch");
  auto quads = quads_for(policy, ref, batch);
  double weight = 0;
  for (const auto& e : batch) weight += e.weight;

  // z depends on the logits only through theta[c][w] - theta[c][l]; the
  // log-normalizer cancels within a context.
  std::vector<double> grad(policy.parameters().size(), 0.0);
  const std::size_t width = policy.responses();
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& e = batch[i];
    double z = implicit_reward_diff(quads[i], beta);
    double coef = -e.weight * beta * sigmoid(-z) / weight;
    grad[e.context * width + e.chosen] += coef;
    grad[e.context * width + e.rejected] -= coef;
  }
  return grad;
}

LossReport evaluate(const TabularPolicy& policy, const TabularPolicy& ref, std::span<const PreferenceExample> batch,
                    double beta) {
  auto quads = quads_for(policy, ref, batch);
  LossReport r = dpo_loss(quads, beta);
  auto g = grad_dpo_tabular(policy, ref, batch, beta);
  double sq = 0;
  for (double x : g) sq += x * x;
  r.grad_norm = std::sqrt(sq);
  return r;
}

std::size_t warmup_steps(std::size_t total_steps, double warmup_ratio) {
  // The epsilon keeps e.g. 0.1 * 30 from rounding up to 4.
  double raw = warmup_ratio * static_cast<double>(total_steps);
  return static_cast<std::size_t>(std::ceil(raw - 1e-9));
}

double lr_schedule(std::size_t step, std::size_t total_steps, const DPOConfig& config) {
  if (total_steps == 0) throw ValidationError("lr_schedule: total_steps must be positive");
  if (step > total_steps) {
    throw ValidationError(fmt::format("lr_schedule: step {} beyond total_steps {}", step, total_steps));
  }
  const std::size_t warm = warmup_steps(total_steps, config.warmup_ratio);
  if (warm > 0 && step <= warm) {
    return config.peak_lr * static_cast<double>(step) / static_cast<double>(warm);
  }
  double progress = static_cast<double>(step - warm) / static_cast<double>(total_steps - warm);
  return config.peak_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

AdamW::AdamW(std::size_t parameters, double beta1, double beta2, double eps, double weight_decay)
    : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay), m_(parameters, 0.0), v_(parameters, 0.0) {}

AdamW AdamW::from_config(std::size_t parameters, const DPOConfig& config) {
  return AdamW(parameters, config.adam_beta1, config.adam_beta2, config.adam_eps, config.weight_decay);
}

void AdamW::step(std::span<double> params, std::span<const double> grad, double lr) {
  if (params.size() != m_.size() || grad.size() != m_.size()) throw ValidationError("AdamW: size mismatch");
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grad[i];
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grad[i] * grad[i];
    double m_hat = m_[i] / bc1;
    double v_hat = v_[i] / bc2;
    params[i] -= lr * weight_decay_ * params[i];
    params[i] -= lr * m_hat / (std::sqrt(v_hat) + eps_);
  }
}

double log_partition(const TabularPolicy& ref, std::span<const double> reward, std::size_t c, double beta) {
  require_beta(beta);
  auto lp = ref.log_probs(c);
  std::vector<double> terms(lp.size());
  for (std::size_t y = 0; y < lp.size(); ++y) terms[y] = lp[y] + reward[c * ref.responses() + y] / beta;
  return logsumexp(terms);
}

TabularPolicy closed_form_optimal(const TabularPolicy& ref, std::span<const double> reward, double beta) {
  if (reward.size() != ref.parameters().size()) throw ValidationError("reward table shape mismatch");
  TabularPolicy out = ref;
  for (std::size_t c = 0; c < ref.contexts(); ++c) {
    auto lp = ref.log_probs(c);
    double log_z = log_partition(ref, reward, c, beta);
    for (std::size_t y = 0; y < ref.responses(); ++y) {
      out.logit(c, y) = lp[y] + reward[c * ref.responses() + y] / beta - log_z;
    }
  }
  return out;
}

ExternalScore score_external(const fs::path& path, double beta) {
  require_beta(beta);
  std::ifstream in(path);
  if (!in) throw IoError(fmt::format("cannot read {}", path.string()));

  ExternalScore out;
  LossAccumulator acc{beta};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    LogProbQuad q;
    std::string pair_id;
    try {
      json j = json::parse(line);
      pair_id = j.at("pair_id").get<std::string>();
      q = {j.at("lp_theta_w").get<double>(), j.at("lp_theta_l").get<double>(), j.at("lp_ref_w").get<double>(),
           j.at("lp_ref_l").get<double>()};
      require_finite(q, line_no);
    } catch (const std::exception& e) {
      throw ValidationError(fmt::format("{}:{}: malformed quad: {}", path.string(), line_no, e.what()));
    }
    double z = acc.add(q);
    out.rewards.emplace_back(std::move(pair_id), z);
  }
  if (acc.n == 0) throw ValidationError(fmt::format("{}: no quads", path.string()));
  out.report = acc.finish();
  return out;
}

}  // namespace forge::dpo
