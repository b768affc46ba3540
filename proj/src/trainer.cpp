#include "clipo/trainer.hpp"

#include <cmath>
#include <ostream>
#include <sstream>

#include "clipo/error.hpp"
#include "json.hpp"

namespace clipo {

TaskFamily TaskConfig::base() const {
  TaskFamily f;
  f.label = "base";
  f.n_operands = n_operands;
  f.operand_max = operand_max;
  f.modulus = modulus;
  return f;
}

TaskFamily TaskConfig::perturbed1() const {
  TaskFamily f = base();
  f.label = "perturbed-1";
  f.operand_max = perturbed1_operand_max;
  return f;
}

TaskFamily TaskConfig::perturbed2() const {
  TaskFamily f = base();
  f.label = "perturbed-2";
  f.distractor_clauses = perturbed2_distractor_clauses;
  return f;
}

std::vector<std::string> TrainConfig::problems() const {
  std::vector<std::string> out;
  auto check = [&](const char* section, auto&& fn) {
    try {
      fn();
    } catch (const std::exception& e) {
      const std::string msg = e.what();
      out.push_back(msg.rfind(section, 0) == 0 ? msg : std::string(section) + ": " + msg);
    }
  };
  check("method", [&] { surrogate.validate(); });
  check("contrastive", [&] { contrastive.validate(); });
  check("sampling", [&] { sampling.validate(); });
  check("run", [&] { dims.validate(); });
  auto need = [&](bool ok, const char* msg) {
    if (!ok) out.emplace_back(msg);
  };
  need(policy_lr > 0.0, "method.policy_lr must be > 0");
  need(policy_weight_decay >= 0.0, "method.policy_weight_decay must be >= 0");
  need(max_grad_norm > 0.0, "method.max_grad_norm must be > 0");
  need(head_lr > 0.0, "contrastive.head_lr must be > 0");
  need(head_weight_decay >= 0.0, "contrastive.head_weight_decay must be >= 0");
  need(head_warmup_steps >= 0, "contrastive.head_warmup_steps must be >= 0");
  need(head_warmup_steps <= total_steps, "contrastive.head_warmup_steps must not exceed run.total_steps");
  need(total_steps >= 0, "run.total_steps must be >= 0");
  need(prompts_per_step >= 1, "run.prompts_per_step must be >= 1");
  need(checkpoint_every >= 0, "run.checkpoint_every must be >= 0");
  need(pretrain_steps >= 0, "run.pretrain_steps must be >= 0");
  need(pretrain_lr > 0.0, "run.pretrain_lr must be > 0");
  need(pretrain_batch >= 1, "run.pretrain_batch must be >= 1");
  need(pretrain_first_step_frac >= 0.0 && pretrain_direct_frac >= 0.0 &&
           pretrain_first_step_frac + pretrain_direct_frac <= 1.0,
       "run.pretrain_first_step_frac and run.pretrain_direct_frac must be >= 0 with sum <= 1");
  need(eval.eval_every >= 0, "eval.eval_every must be >= 0");
  need(eval.samples_per_prompt >= 1, "eval.eval_samples_per_prompt must be >= 1");
  need(eval.temperature > 0.0, "eval.eval_temperature must be > 0");
  need(eval.top_p > 0.0 && eval.top_p <= 1.0, "eval.eval_top_p must lie in (0, 1]");
  check("tasks", [&] { tasks.base().validate(); });
  need(tasks.perturbed1_operand_max >= tasks.operand_max,
       "tasks.perturbed1_operand_max must be >= tasks.operand_max");
  need(tasks.perturbed2_distractor_clauses >= 0, "tasks.perturbed2_distractor_clauses must be >= 0");
  need(tasks.n_train >= 1, "tasks.n_train must be >= 1");
  need(tasks.n_eval >= 1, "tasks.n_eval must be >= 1");
  return out;
}

void TrainConfig::validate() const {
  const auto p = problems();
  if (p.empty()) return;
  std::string msg;
  for (const auto& line : p) msg += (msg.empty() ? "" : "\n") + line;
  throw ConfigError(msg);
}

std::string MetricsRecord::to_json() const {
  nlohmann::ordered_json j;
  j["step"] = step;
  auto put = [&](const char* key, const std::optional<double>& v) {
    if (!v) return;
    if (!std::isfinite(*v))
      throw NumericError("metrics field " + std::string(key) + " is not finite at step " +
                         std::to_string(step));
    j[key] = *v;
  };
  put("mean_base_reward", mean_base_reward);
  put("mean_shaped_reward", mean_shaped_reward);
  put("pass1_eval_base", pass1_eval_base);
  put("pass1_eval_perturbed", pass1_eval_perturbed);
  put("mean_contrastive_loss", mean_contrastive_loss);
  put("mi_lower_bound", mi_lower_bound);
  put("mean_pos_pair_cosine", mean_pos_pair_cosine);
  put("mean_pos_neg_cosine", mean_pos_neg_cosine);
  put("frac_valid_groups", frac_valid_groups);
  put("frac_clipped_rewards", frac_clipped_rewards);
  put("kl_to_ref", kl_to_ref);
  put("dropped_groups", dropped_groups);
  return j.dump();
}

TaskSuites make_suites(const TaskConfig& cfg) {
  TaskSuites s;
  TaskSplit split = make_split(cfg.base(), static_cast<std::size_t>(cfg.n_train),
                               static_cast<std::size_t>(cfg.n_eval), cfg.task_seed);
  s.train = std::move(split.train);
  s.eval_base = std::move(split.eval);
  s.eval_perturbed1 = make_eval_set(cfg.perturbed1(), static_cast<std::size_t>(cfg.n_eval),
                                    derive_seed(cfg.task_seed, {2}));
  s.eval_perturbed2 = make_eval_set(cfg.perturbed2(), static_cast<std::size_t>(cfg.n_eval),
                                    derive_seed(cfg.task_seed, {3}));
  return s;
}

std::vector<TaskInstance> pretrain_corpus(const TrainConfig& cfg, const TaskSuites& suites) {
  std::vector<TaskInstance> corpus = suites.train;
  Rng rng(cfg.seed, {label(Stream::kPretrain), ~0ULL});
  for (auto& inst : corpus) {
    const double u = rng.uniform();
    if (u < cfg.pretrain_direct_frac)
      inst.gold_response = solution_tokens(inst, SolutionStyle::kDirect);
    else if (u < cfg.pretrain_direct_frac + cfg.pretrain_first_step_frac)
      inst.gold_response = solution_tokens(inst, SolutionStyle::kFirstStep);
  }
  return corpus;
}

PolicyParams pretrain_policy(const TrainConfig& cfg, const TaskSuites& suites,
                             const std::function<void(int, double)>& on_step) {
  PolicyParams p = init_policy(cfg.dims, derive_seed(cfg.seed, {label(Stream::kInit)}));
  PretrainOptions o;
  o.steps = cfg.pretrain_steps;
  o.learning_rate = cfg.pretrain_lr;
  o.batch_size = cfg.pretrain_batch;
  o.seed = cfg.seed;
  supervised_pretrain(p, pretrain_corpus(cfg, suites), o, on_step);
  return p;
}

double evaluate(const PolicyParams& policy, const std::vector<TaskInstance>& prompts,
                const EvalConfig& cfg, int max_response_len, std::uint64_t seed,
                std::uint64_t suite_id) {
  if (prompts.empty()) return 0.0;
  SamplingConfig sc;
  sc.temperature = cfg.temperature;
  sc.top_p = cfg.top_p;
  sc.max_response_len = max_response_len;
  sc.group_size = std::max(2, cfg.samples_per_prompt);
  double total = 0.0;
  for (std::size_t j = 0; j < prompts.size(); ++j) {
    RolloutGroup g = sample_group(policy, prompts[j], sc,
                                  derive_seed(seed, {label(Stream::kEval), suite_id, j}));
    int correct = 0;
    for (int i = 0; i < cfg.samples_per_prompt; ++i) correct += g.rollouts[static_cast<std::size_t>(i)].reward;
    total += static_cast<double>(correct) / static_cast<double>(cfg.samples_per_prompt);
  }
  return total / static_cast<double>(prompts.size());
}

EvalResult evaluate_all(const PolicyParams& policy, const TaskSuites& suites, const EvalConfig& cfg,
                        int max_response_len, std::uint64_t seed) {
  EvalResult r;
  r.base = evaluate(policy, suites.eval_base, cfg, max_response_len, seed, 0);
  r.perturbed1 = evaluate(policy, suites.eval_perturbed1, cfg, max_response_len, seed, 1);
  r.perturbed2 = evaluate(policy, suites.eval_perturbed2, cfg, max_response_len, seed, 2);
  const double n1 = static_cast<double>(suites.eval_perturbed1.size());
  const double n2 = static_cast<double>(suites.eval_perturbed2.size());
  r.perturbed = (n1 + n2) > 0 ? (r.perturbed1 * n1 + r.perturbed2 * n2) / (n1 + n2) : 0.0;
  return r;
}

void begin_rl(RunState& state, const TrainConfig& cfg) {
  if (!state.reference) state.reference = state.policy;
  AdamWConfig& pc = state.policy_opt.config();
  pc.learning_rate = cfg.policy_lr;
  pc.weight_decay = cfg.policy_weight_decay;
  if (cfg.contrastive_enabled) {
    if (!state.head) {
      state.head = make_head(cfg.contrastive.d, state.policy.dims.d_model,
                             derive_seed(state.seed, {label(Stream::kHead)}), cfg.head_lr,
                             cfg.head_weight_decay);
    }
    state.head->optimizer.config().learning_rate = cfg.head_lr;
    state.head->optimizer.config().weight_decay = cfg.head_weight_decay;
    state.head->frozen = cfg.fixed_head;
  }
}

namespace {

std::vector<std::size_t> positives_of(const std::vector<int>& rewards) {
  std::vector<std::size_t> p;
  for (std::size_t i = 0; i < rewards.size(); ++i)
    if (rewards[i] == 1) p.push_back(i);
  return p;
}

std::vector<int> rewards_of(const RolloutGroup& g) {
  std::vector<int> r;
  for (const auto& x : g.rollouts) r.push_back(x.reward);
  return r;
}

// [G x d] embeddings of a group's detached pooled states.
Var group_embeddings(Tape& tape, Var W, const RolloutGroup& g) {
  std::vector<Var> rows;
  rows.reserve(g.rollouts.size());
  for (const auto& r : g.rollouts) rows.push_back(embed(W, tape.constant(pool(r.hidden_states))));
  return ops::stack_rows(rows);
}

Var anchor_loss(Var sim, std::size_t anchor, std::size_t partner,
                const std::vector<std::size_t>& positives, const ContrastiveConfig& cfg) {
  switch (cfg.loss_kind) {
    case LossKind::kInfoNce: return infonce_anchor_loss(sim, anchor, partner, cfg.exclude_self);
    case LossKind::kSupCon: return supcon_anchor_loss(sim, anchor, positives, cfg.exclude_self);
    case LossKind::kSoftNn: return softnn_anchor_loss(sim, anchor, positives, cfg.exclude_self);
  }
  throw ContractError("unknown loss kind");
}

std::vector<RolloutGroup> sample_groups(const PolicyParams& policy,
                                        const std::vector<TaskInstance>& prompts,
                                        const SamplingConfig& sc, std::uint64_t seed,
                                        Stream stream, std::uint64_t step) {
  std::vector<RolloutGroup> groups;
  groups.reserve(prompts.size());
  for (std::size_t g = 0; g < prompts.size(); ++g)
    groups.push_back(sample_group(policy, prompts[g], sc, derive_seed(seed, {label(stream), step, g})));
  return groups;
}

std::string step_dump(std::uint64_t step, const std::vector<RolloutGroup>& groups,
                      const std::vector<ShapedRewardSet>& shaped) {
  std::ostringstream os;
  os << "step " << step << " dump:";
  for (std::size_t g = 0; g < groups.size(); ++g) {
    os << "\n  group " << g << " rewards";
    for (const auto& r : groups[g].rollouts) os << ' ' << r.reward;
    if (g < shaped.size()) {
      os << " shaped";
      for (double t : shaped[g].total) os << ' ' << t;
    }
  }
  return os.str();
}

}  // namespace

std::vector<TaskInstance> step_prompts(const TrainConfig& cfg, const TaskSuites& suites,
                                       std::uint64_t step) {
  Rng rng(cfg.seed, {label(Stream::kTasks), step});
  std::vector<TaskInstance> out;
  const auto n = static_cast<std::int64_t>(suites.train.size());
  for (int i = 0; i < cfg.prompts_per_step; ++i)
    out.push_back(suites.train[static_cast<std::size_t>(rng.uniform_int(0, n - 1))]);
  return out;
}

WarmupReport warmup_head(RunState& state, const TrainConfig& cfg, const TaskSuites& suites) {
  WarmupReport rep;
  if (!cfg.contrastive_enabled) return rep;
  begin_rl(state, cfg);
  ContrastiveHead& head = *state.head;
  const std::size_t G = static_cast<std::size_t>(cfg.sampling.group_size);
  while (state.warmup_step < static_cast<std::uint64_t>(cfg.head_warmup_steps)) {
    const std::uint64_t w = state.warmup_step;
    Rng prompt_rng(state.seed, {label(Stream::kWarmup), w});
    std::vector<TaskInstance> prompts;
    for (int i = 0; i < cfg.prompts_per_step; ++i)
      prompts.push_back(suites.train[static_cast<std::size_t>(
          prompt_rng.uniform_int(0, static_cast<std::int64_t>(suites.train.size()) - 1))]);
    auto groups = sample_groups(state.policy, prompts, cfg.sampling, state.seed, Stream::kWarmup, w);
    Tape tape;
    Var W = tape.leaf(head.W);
    std::vector<Var> losses;
    for (std::size_t g = 0; g < groups.size(); ++g) {
      const auto rewards = rewards_of(groups[g]);
      if (!group_gate(positives_of(rewards).size(), G)) continue;
      Var E = group_embeddings(tape, W, groups[g]);
      Rng prng(state.seed, {label(Stream::kWarmup), w, g, label(Stream::kPositive)});
      GroupContrast gc = contrastive_rewards(rewards, E, cfg.contrastive, prng);
      losses.insert(losses.end(), gc.anchor_losses.begin(), gc.anchor_losses.end());
    }
    HeadUpdateResult hu = head_update(head, losses);
    if (hu.anchors > 0) rep.mean_losses.push_back(hu.mean_loss);
    if (cfg.warmup_updates_policy) {
      TrainConfig base_only = cfg;
      base_only.contrastive_enabled = false;
      const std::uint64_t saved = state.step;
      state.step = w + (1ULL << 40);
      train_step(state, base_only, prompts);
      state.step = saved;
    }
    ++state.warmup_step;
  }
  head.W.clear_grad();
  return rep;
}

MetricsRecord train_step(RunState& state, const TrainConfig& cfg,
                         const std::vector<TaskInstance>& prompts, StepDetail* detail) {
  begin_rl(state, cfg);
  const std::uint64_t step = state.step;
  const std::size_t G = static_cast<std::size_t>(cfg.sampling.group_size);
  const bool contrast = cfg.contrastive_enabled;

  std::vector<RolloutGroup> groups =
      sample_groups(state.policy, prompts, cfg.sampling, state.seed, Stream::kRollout, step);
  const std::size_t n_groups = groups.size();

  // Contrastive shaping on detached pooled states.
  Tape head_tape;
  std::optional<Var> W;
  if (contrast) W = head_tape.leaf(state.head->W);
  std::vector<ShapedRewardSet> shaped(n_groups);
  std::vector<GroupContrast> contrasts(n_groups);
  std::vector<Var> anchor_losses;
  CosineStats cos;
  std::size_t valid_groups = 0, clipped = 0;
  for (std::size_t g = 0; g < n_groups; ++g) {
    const auto rewards = rewards_of(groups[g]);
    if (contrast) {
      Var E = group_embeddings(head_tape, *W, groups[g]);
      Rng prng(state.seed, {label(Stream::kPositive), step, g});
      contrasts[g] = contrastive_rewards(rewards, E, cfg.contrastive, prng);
      shaped[g] = contrasts[g].rewards;
      cos.merge(pair_cosines(E.value(), rewards));
      anchor_losses.insert(anchor_losses.end(), contrasts[g].anchor_losses.begin(),
                           contrasts[g].anchor_losses.end());
      valid_groups += shaped[g].group_valid ? 1 : 0;
      for (bool c : shaped[g].clipped_mask) clipped += c ? 1 : 0;
    } else {
      ShapedRewardSet& s = shaped[g];
      s.base = rewards;
      s.contrastive.assign(G, 0.0);
      s.clipped_mask.assign(G, false);
      for (int r : rewards) s.total.push_back(static_cast<double>(r));
    }
  }

  std::vector<std::size_t> retained;
  for (std::size_t g = 0; g < n_groups; ++g)
    if (!(cfg.surrogate.dynamic_sampling && degenerate_rewards(shaped[g].base))) retained.push_back(g);

  std::vector<AdvantageSet> advantages;
  for (std::size_t g : retained)
    advantages.push_back(group_advantages(shaped[g].total, cfg.surrogate.std_guard));

  // KL to the reference under the sampling policy, over every rollout.
  double kl_sum = 0.0;
  std::size_t kl_tokens = 0;
  std::vector<std::vector<std::vector<double>>> ref_lp(n_groups);
  for (std::size_t g = 0; g < n_groups; ++g) {
    for (const auto& r : groups[g].rollouts) {
      ref_lp[g].push_back(response_logprobs(*state.reference, r));
      for (std::size_t t = 0; t < r.response_logprobs.size(); ++t) {
        kl_sum += kl_estimate(r.response_logprobs[t], ref_lp[g].back()[t]);
        ++kl_tokens;
      }
    }
  }

  double policy_loss = 0.0;
  bool updated = false;
  if (!retained.empty()) {
    state.policy.set_requires_grad(true);
    state.policy.zero_grad();
    Tape tape;
    PolicyVars vars = bind(tape, state.policy);
    std::vector<SequenceTerms> batch;
    std::vector<std::vector<Var>> hidden(n_groups);
    const bool joint = contrast && cfg.backprop_into_policy;
    for (std::size_t k = 0; k < retained.size(); ++k) {
      const std::size_t g = retained[k];
      for (std::size_t i = 0; i < groups[g].rollouts.size(); ++i) {
        const RolloutRecord& r = groups[g].rollouts[i];
        SequenceTerms st;
        Var h;
        st.new_logprobs = logprobs_under(vars, r, joint ? &h : nullptr);
        if (joint) hidden[g].push_back(h);
        st.old_logprobs = r.response_logprobs;
        st.ref_logprobs = ref_lp[g][i];
        st.advantage = advantages[k].advantages[i];
        batch.push_back(std::move(st));
      }
    }
    Var loss = surrogate_loss(batch, cfg.surrogate);
    if (joint) {
      Var Wc = tape.constant_ref(state.head->W);
      std::vector<Var> joint_losses;
      for (std::size_t g : retained) {
        const GroupContrast& gc = contrasts[g];
        if (gc.anchors.empty()) continue;
        std::vector<Var> rows;
        for (Var h : hidden[g]) rows.push_back(embed(Wc, pool(h)));
        Var sim = similarity_matrix(ops::stack_rows(rows), cfg.contrastive.tau);
        const auto pos = positives_of(shaped[g].base);
        for (std::size_t a = 0; a < gc.anchors.size(); ++a) {
          const std::size_t partner = gc.sampled_positive.empty() ? 0 : gc.sampled_positive[a];
          joint_losses.push_back(anchor_loss(sim, gc.anchors[a], partner, pos, cfg.contrastive));
        }
      }
      if (!joint_losses.empty()) {
        Var m = ops::mean(ops::concat(joint_losses));
        loss = ops::add(loss, ops::scale(m, cfg.contrastive.lambda));
      }
    }
    policy_loss = loss.item();
    if (!std::isfinite(policy_loss))
      throw NumericError("non-finite policy loss\n" + step_dump(step, groups, shaped));
    tape.backward(loss);
    auto tensors = state.policy.tensors();
    const double gnorm = clip_grad_norm(tensors, cfg.max_grad_norm);
    if (!std::isfinite(gnorm))
      throw NumericError("non-finite policy gradient\n" + step_dump(step, groups, shaped));
    state.policy_opt.step(tensors);
    for (Tensor* t : tensors) t->clear_grad();
    state.policy.set_requires_grad(false);
    updated = true;
  }

  std::optional<HeadUpdateResult> hu;
  if (contrast) {
    hu = head_update(*state.head, anchor_losses);
    state.head->W.clear_grad();
  }
  ++state.step;

  MetricsRecord m;
  m.step = state.step;
  double base_sum = 0.0, shaped_sum = 0.0;
  std::size_t n_roll = 0;
  for (const auto& s : shaped) {
    for (std::size_t i = 0; i < s.base.size(); ++i) {
      base_sum += s.base[i];
      shaped_sum += s.total[i];
      ++n_roll;
    }
  }
  m.mean_base_reward = base_sum / static_cast<double>(n_roll);
  m.mean_shaped_reward = shaped_sum / static_cast<double>(n_roll);
  if (contrast) {
    m.frac_valid_groups = static_cast<double>(valid_groups) / static_cast<double>(n_groups);
    m.frac_clipped_rewards =
        anchor_losses.empty() ? 0.0
                              : static_cast<double>(clipped) / static_cast<double>(anchor_losses.size());
    if (hu && hu->anchors > 0) {
      m.mean_contrastive_loss = hu->mean_loss;
      m.mi_lower_bound = mi_lower_bound(hu->mean_loss, G);
    }
    if (cos.pos_pairs > 0) m.mean_pos_pair_cosine = cos.pos_pair_sum / static_cast<double>(cos.pos_pairs);
    if (cos.pos_neg_pairs > 0)
      m.mean_pos_neg_cosine = cos.pos_neg_sum / static_cast<double>(cos.pos_neg_pairs);
  }
  m.kl_to_ref = kl_tokens ? kl_sum / static_cast<double>(kl_tokens) : 0.0;
  m.dropped_groups = static_cast<double>(n_groups - retained.size());

  if (detail) {
    detail->groups = std::move(groups);
    detail->shaped = std::move(shaped);
    detail->advantages = std::move(advantages);
    detail->retained = std::move(retained);
    detail->policy_loss = policy_loss;
    detail->policy_updated = updated;
  }
  return m;
}

std::vector<EmbeddingRow> sample_embeddings(const RunState& state, const TrainConfig& cfg,
                                            const TaskSuites& suites, int steps) {
  if (steps < 0) throw ContractError("sample_embeddings: steps must be >= 0");
  ContrastiveHead head = state.head ? *state.head
                                    : make_head(cfg.contrastive.d, state.policy.dims.d_model,
                                                derive_seed(state.seed, {label(Stream::kHead)}));
  std::vector<EmbeddingRow> rows;
  for (int k = 0; k < steps; ++k) {
    const std::uint64_t step = state.step + static_cast<std::uint64_t>(k);
    const auto groups = sample_groups(state.policy, step_prompts(cfg, suites, step), cfg.sampling,
                                      state.seed, Stream::kRollout, step);
    Tape tape;
    Var W = tape.constant_ref(head.W);
    for (std::size_t g = 0; g < groups.size(); ++g) {
      const Tensor& E = group_embeddings(tape, W, groups[g]).value();
      const std::size_t d = E.shape()[1];
      for (std::size_t i = 0; i < groups[g].rollouts.size(); ++i) {
        EmbeddingRow row{step, g, i, groups[g].rollouts[i].reward, {}};
        for (std::size_t c = 0; c < d; ++c) row.embedding.push_back(E[i * d + c]);
        rows.push_back(std::move(row));
      }
    }
  }
  return rows;
}

void run(RunState& state, const TrainConfig& cfg, const TaskSuites& suites, const RunHooks& hooks) {
  cfg.validate();
  begin_rl(state, cfg);
  auto emit = [&](const MetricsRecord& r) {
    const std::string line = r.to_json();  // validates finiteness
    if (hooks.on_record) hooks.on_record(r);
    if (hooks.log) *hooks.log << line << '\n';
  };
  auto eval_into = [&](MetricsRecord& r) {
    EvalResult e = evaluate_all(state.policy, suites, cfg.eval, cfg.sampling.max_response_len, state.seed);
    r.pass1_eval_base = e.base;
    r.pass1_eval_perturbed = e.perturbed;
  };
  if (state.step == 0 && state.warmup_step == 0) {
    MetricsRecord init;
    init.step = 0;
    eval_into(init);
    emit(init);
  }
  warmup_head(state, cfg, suites);
  const auto total = static_cast<std::uint64_t>(cfg.total_steps);
  while (state.step < total) {
    MetricsRecord r = train_step(state, cfg, step_prompts(cfg, suites, state.step));
    const bool eval_now = state.step == total ||
                          (cfg.eval.eval_every > 0 && state.step % static_cast<std::uint64_t>(cfg.eval.eval_every) == 0);
    if (eval_now) eval_into(r);
    emit(r);
    if (hooks.on_checkpoint && cfg.checkpoint_every > 0 &&
        state.step % static_cast<std::uint64_t>(cfg.checkpoint_every) == 0)
      hooks.on_checkpoint(state);
  }
}

}  // namespace clipo
