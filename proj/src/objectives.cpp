#include "clipo/objectives.hpp"

#include <cmath>

#include "clipo/error.hpp"

namespace clipo {

namespace {

void check_aligned(const Var& v, std::size_t n, const char* what) {
  if (v.value().rank() != 1 || v.value().size() != n) {
    throw ContractError(std::string(what) + ": misaligned token grids (" +
                        shape_str(v.value().shape()) + " vs " + std::to_string(n) + ")");
  }
}

void check_batch(std::span<const SequenceTerms> batch) {
  if (batch.empty()) throw ContractError("surrogate: empty batch");
  for (const auto& s : batch) {
    check_aligned(s.new_logprobs, s.old_logprobs.size(), "surrogate");
    if (s.old_logprobs.empty()) throw ContractError("surrogate: empty response");
  }
}

Tape& batch_tape(std::span<const SequenceTerms> batch) { return *batch.front().new_logprobs.tape; }

// min(x A, clip(x) A), or clip(x) A when not pessimistic.
Var clipped_term(Var x, double adv, double lo, double hi, bool pessimistic) {
  Var clipped = ops::scale(ops::clamp(x, lo, hi), adv);
  if (!pessimistic) return clipped;
  return ops::minimum(ops::scale(x, adv), clipped);
}

// beta * token-mean KL over the batch, or nothing when beta == 0.
Var add_kl(Var loss, std::span<const SequenceTerms> batch, double beta) {
  if (beta == 0.0) return loss;
  std::vector<Var> parts;
  for (const auto& s : batch) {
    if (s.ref_logprobs.size() != s.old_logprobs.size())
      throw ContractError("surrogate: reference log-probabilities missing or misaligned");
    parts.push_back(kl_estimate(s.new_logprobs, s.ref_logprobs));
  }
  return ops::add(loss, ops::scale(ops::mean(ops::concat(parts)), beta));
}

// Token-level clipped ratio objective shared by GRPO and DAPO.
Var token_clip_loss(std::span<const SequenceTerms> batch, const SurrogateConfig& cfg) {
  check_batch(batch);
  std::vector<Var> terms;
  std::vector<Var> seq_means;
  for (const auto& s : batch) {
    Var rho = token_ratios(s.new_logprobs, s.old_logprobs);
    Var t = clipped_term(rho, s.advantage, 1.0 - cfg.eps_low, 1.0 + cfg.eps_high, cfg.pessimistic);
    if (cfg.agg_mode == AggMode::kTokenMean)
      terms.push_back(t);
    else
      seq_means.push_back(ops::mean(t));
  }
  Var objective = cfg.agg_mode == AggMode::kTokenMean ? ops::mean(ops::concat(terms))
                                                      : ops::mean(ops::concat(seq_means));
  return add_kl(ops::neg(objective), batch, cfg.kl_coef);
}

}  // namespace

std::string to_string(Method m) {
  switch (m) {
    case Method::kGrpo: return "grpo";
    case Method::kGspo: return "gspo";
    case Method::kDapo: return "dapo";
    case Method::kGmpo: return "gmpo";
  }
  return "?";
}

std::string to_string(AggMode m) {
  return m == AggMode::kTokenMean ? "token-mean" : "seq-mean-token-mean";
}

Method parse_method(const std::string& name) {
  if (name == "grpo") return Method::kGrpo;
  if (name == "gspo") return Method::kGspo;
  if (name == "dapo") return Method::kDapo;
  if (name == "gmpo") return Method::kGmpo;
  throw ConfigError("unknown method '" + name + "' (expected grpo, gspo, dapo or gmpo)");
}

AggMode parse_agg_mode(const std::string& name) {
  if (name == "token-mean") return AggMode::kTokenMean;
  if (name == "seq-mean-token-mean") return AggMode::kSeqMeanTokenMean;
  throw ConfigError("unknown agg_mode '" + name + "'");
}

SurrogateConfig SurrogateConfig::defaults(Method m) {
  SurrogateConfig c;
  c.method = m;
  switch (m) {
    case Method::kGrpo:
      break;
    case Method::kGspo:
      c.eps_low = 3e-4;
      c.eps_high = 4e-4;
      c.kl_coef = 0.0;
      c.agg_mode = AggMode::kSeqMeanTokenMean;
      break;
    case Method::kDapo:
      c.eps_low = 0.2;
      c.eps_high = 0.28;
      c.kl_coef = 0.0;
      c.dynamic_sampling = true;
      break;
    case Method::kGmpo:
      c.eps_low = 0.4;
      c.eps_high = 0.4;
      c.kl_coef = 0.0;
      break;
  }
  return c;
}

void SurrogateConfig::validate() const {
  if (!(eps_low >= 0.0 && eps_low < 1.0)) throw ConfigError("method.eps_low must be in [0, 1)");
  if (!(eps_high >= 0.0)) throw ConfigError("method.eps_high must be >= 0");
  if (!(kl_coef >= 0.0)) throw ConfigError("method.kl_coef must be >= 0");
  if (!(std_guard >= 0.0)) throw ConfigError("method.std_guard must be >= 0");
}

AdvantageSet group_advantages(std::span<const double> shaped, double std_guard) {
  const std::size_t G = shaped.size();
  if (G < 2) throw ContractError("group_advantages: group size must be >= 2");
  AdvantageSet out;
  out.rewards.assign(shaped.begin(), shaped.end());
  out.advantages.assign(G, 0.0);
  bool all_equal = true;
  for (double r : shaped) all_equal = all_equal && r == shaped[0];
  if (all_equal) return out;
  double mean = 0.0;
  for (double r : shaped) mean += r;
  mean /= static_cast<double>(G);
  double var = 0.0;
  for (double r : shaped) var += (r - mean) * (r - mean);
  const double sd = std::sqrt(var / static_cast<double>(G));
  if (!(sd > std_guard)) return out;
  for (std::size_t i = 0; i < G; ++i) out.advantages[i] = (shaped[i] - mean) / sd;
  return out;
}

Var token_ratios(Var new_logprobs, std::span<const double> old_logprobs) {
  check_aligned(new_logprobs, old_logprobs.size(), "token_ratios");
  Tape& t = *new_logprobs.tape;
  Var old = t.constant(Tensor::vector({old_logprobs.begin(), old_logprobs.end()}));
  return ops::exp(ops::sub(new_logprobs, old));
}

Var sequence_ratio(Var new_logprobs, std::span<const double> old_logprobs) {
  check_aligned(new_logprobs, old_logprobs.size(), "sequence_ratio");
  if (old_logprobs.empty()) throw ContractError("sequence_ratio: empty response");
  Tape& t = *new_logprobs.tape;
  Var old = t.constant(Tensor::vector({old_logprobs.begin(), old_logprobs.end()}));
  return ops::exp(ops::mean(ops::sub(new_logprobs, old)));
}

Var kl_estimate(Var new_logprobs, std::span<const double> ref_logprobs) {
  check_aligned(new_logprobs, ref_logprobs.size(), "kl_estimate");
  Tape& t = *new_logprobs.tape;
  Var ref = t.constant(Tensor::vector({ref_logprobs.begin(), ref_logprobs.end()}));
  Var d = ops::sub(ref, new_logprobs);
  return ops::add_scalar(ops::sub(ops::exp(d), d), -1.0);
}

double kl_estimate(double new_logprob, double ref_logprob) {
  const double d = ref_logprob - new_logprob;
  return std::exp(d) - d - 1.0;
}

Var grpo_surrogate(std::span<const SequenceTerms> batch, const SurrogateConfig& cfg) {
  return token_clip_loss(batch, cfg);
}

Var dapo_surrogate(std::span<const SequenceTerms> batch, const SurrogateConfig& cfg) {
  return token_clip_loss(batch, cfg);
}

Var gspo_surrogate(std::span<const SequenceTerms> batch, const SurrogateConfig& cfg) {
  check_batch(batch);
  std::vector<Var> seq_terms;
  std::vector<Var> token_terms;
  for (const auto& s : batch) {
    Var ratio = sequence_ratio(s.new_logprobs, s.old_logprobs);
    Var term = clipped_term(ratio, s.advantage, 1.0 - cfg.eps_low, 1.0 + cfg.eps_high,
                            cfg.pessimistic);
    if (cfg.agg_mode == AggMode::kSeqMeanTokenMean) {
      seq_terms.push_back(term);
    } else {
      const std::vector<Var> reps(s.old_logprobs.size(), term);
      token_terms.push_back(ops::concat(reps));
    }
  }
  Var objective = cfg.agg_mode == AggMode::kSeqMeanTokenMean ? ops::mean(ops::concat(seq_terms))
                                                             : ops::mean(ops::concat(token_terms));
  return add_kl(ops::neg(objective), batch, cfg.kl_coef);
}

Var gmpo_surrogate(std::span<const SequenceTerms> batch, const SurrogateConfig& cfg) {
  check_batch(batch);
  Tape& tape = batch_tape(batch);
  const double lo = std::log(1.0 - cfg.eps_low);
  const double hi = std::log(1.0 + cfg.eps_high);
  std::vector<Var> weighted;
  std::vector<Var> seq_terms;
  double total_tokens = 0.0;
  for (const auto& s : batch) {
    Var old = tape.constant(Tensor::vector(s.old_logprobs));
    Var log_ratio = ops::sub(s.new_logprobs, old);
    Var clipped = ops::clamp(log_ratio, lo, hi);
    Var kept = clipped;
    if (cfg.pessimistic && s.advantage > 0.0) {
      kept = ops::minimum(log_ratio, clipped);
    } else if (cfg.pessimistic && s.advantage < 0.0) {
      kept = ops::neg(ops::minimum(ops::neg(log_ratio), ops::neg(clipped)));
    }
    Var g = ops::exp(ops::mean(kept));
    Var term = ops::scale(g, s.advantage);
    const double len = static_cast<double>(s.old_logprobs.size());
    total_tokens += len;
    weighted.push_back(ops::scale(term, len));
    seq_terms.push_back(term);
  }
  Var objective = cfg.agg_mode == AggMode::kTokenMean
                      ? ops::scale(ops::sum(ops::concat(weighted)), 1.0 / total_tokens)
                      : ops::mean(ops::concat(seq_terms));
  return add_kl(ops::neg(objective), batch, cfg.kl_coef);
}

Var surrogate_loss(std::span<const SequenceTerms> batch, const SurrogateConfig& cfg) {
  switch (cfg.method) {
    case Method::kGrpo: return grpo_surrogate(batch, cfg);
    case Method::kGspo: return gspo_surrogate(batch, cfg);
    case Method::kDapo: return dapo_surrogate(batch, cfg);
    case Method::kGmpo: return gmpo_surrogate(batch, cfg);
  }
  throw ContractError("surrogate_loss: unknown method");
}

double clip_fraction(std::span<const SequenceTerms> batch, const SurrogateConfig& cfg) {
  const double lo = 1.0 - cfg.eps_low, hi = 1.0 + cfg.eps_high;
  std::size_t clipped = 0, total = 0;
  for (const auto& s : batch) {
    const Tensor& nl = s.new_logprobs.value();
    if (cfg.method == Method::kGspo) {
      double m = 0.0;
      for (std::size_t t = 0; t < s.old_logprobs.size(); ++t) m += nl[t] - s.old_logprobs[t];
      const double r = std::exp(m / static_cast<double>(s.old_logprobs.size()));
      clipped += (r < lo || r > hi) ? 1 : 0;
      ++total;
    } else {
      for (std::size_t t = 0; t < s.old_logprobs.size(); ++t) {
        const double r = std::exp(nl[t] - s.old_logprobs[t]);
        clipped += (r < lo || r > hi) ? 1 : 0;
        ++total;
      }
    }
  }
  return total ? static_cast<double>(clipped) / static_cast<double>(total) : 0.0;
}

bool degenerate_rewards(std::span<const int> rewards) {
  for (int r : rewards)
    if (r != rewards.front()) return false;
  return true;
}

FilterResult dynamic_sampling_filter(std::vector<RolloutGroup> groups) {
  FilterResult out;
  for (auto& g : groups) {
    std::vector<int> rewards;
    for (const auto& r : g.rollouts) rewards.push_back(r.reward);
    if (degenerate_rewards(rewards))
      ++out.dropped;
    else
      out.retained.push_back(std::move(g));
  }
  return out;
}

}  // namespace clipo
