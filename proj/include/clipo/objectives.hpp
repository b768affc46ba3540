#pragma once

#include <span>
#include <string>
#include <vector>

#include "clipo/autodiff.hpp"
#include "clipo/policy.hpp"

namespace clipo {

enum class Method { kGrpo, kGspo, kDapo, kGmpo };
enum class AggMode { kTokenMean, kSeqMeanTokenMean };

std::string to_string(Method m);
std::string to_string(AggMode m);
Method parse_method(const std::string& name);
AggMode parse_agg_mode(const std::string& name);

struct SurrogateConfig {
  Method method = Method::kGrpo;
  double eps_low = 0.2;
  double eps_high = 0.2;
  double kl_coef = 0.001;
  AggMode agg_mode = AggMode::kTokenMean;
  bool dynamic_sampling = false;
  double std_guard = 1e-6;
  // min(rho A, clip(rho) A) rather than the plain clipped product.
  bool pessimistic = true;

  // Per-method defaults:
  //   grpo  eps 0.2/0.2       beta 0.001  token-mean
  //   gspo  eps 3e-4/4e-4     beta 0      seq-mean-token-mean
  //   dapo  eps 0.2/0.28      beta 0      token-mean, dynamic sampling
  //   gmpo  eps 0.4/0.4       beta 0      token-mean
  static SurrogateConfig defaults(Method m);
  void validate() const;
};

struct AdvantageSet {
  std::vector<double> rewards;     // shaped totals the advantages came from
  std::vector<double> advantages;  // one scalar per rollout

  // Every token of rollout i carries advantages[i].
  std::vector<double> per_token(std::size_t rollout, std::size_t length) const {
    return std::vector<double>(length, advantages.at(rollout));
  }
};

// (r_i - mean) / popstd. Groups whose population std does not exceed
// std_guard get all-zero advantages.
AdvantageSet group_advantages(std::span<const double> shaped, double std_guard = 1e-6);

// exp(new - old) per token; differentiable through new_logprobs only.
Var token_ratios(Var new_logprobs, std::span<const double> old_logprobs);

// One rollout as seen by a surrogate.
struct SequenceTerms {
  Var new_logprobs;                   // [T] on the tape
  std::vector<double> old_logprobs;   // [T] behaviour policy
  std::vector<double> ref_logprobs;   // [T] reference policy; may be empty when beta == 0
  double advantage = 0.0;
};

// All surrogates return a loss to minimize (negated objective plus beta * KL).
Var grpo_surrogate(std::span<const SequenceTerms> batch, const SurrogateConfig& cfg);
Var gspo_surrogate(std::span<const SequenceTerms> batch, const SurrogateConfig& cfg);
Var dapo_surrogate(std::span<const SequenceTerms> batch, const SurrogateConfig& cfg);
Var gmpo_surrogate(std::span<const SequenceTerms> batch, const SurrogateConfig& cfg);
// Dispatches on cfg.method.
Var surrogate_loss(std::span<const SequenceTerms> batch, const SurrogateConfig& cfg);

// Length-normalized sequence ratio exp(mean_t(new - old)).
Var sequence_ratio(Var new_logprobs, std::span<const double> old_logprobs);

// exp(ref - new) - (ref - new) - 1 per token.
Var kl_estimate(Var new_logprobs, std::span<const double> ref_logprobs);
double kl_estimate(double new_logprob, double ref_logprob);

// Fraction of tokens (or sequences for gspo) whose ratio left the clip range.
double clip_fraction(std::span<const SequenceTerms> batch, const SurrogateConfig& cfg);

// True when every verifiable reward of the group is equal.
bool degenerate_rewards(std::span<const int> rewards);

struct FilterResult {
  std::vector<RolloutGroup> retained;
  std::size_t dropped = 0;
};

// Drops groups whose raw verifiable rewards are all equal.
FilterResult dynamic_sampling_filter(std::vector<RolloutGroup> groups);

}  // namespace clipo
