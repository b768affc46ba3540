#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "clipo/contrastive.hpp"
#include "clipo/objectives.hpp"
#include "clipo/optim.hpp"
#include "clipo/policy.hpp"
#include "clipo/task.hpp"

namespace clipo {

struct TaskConfig {
  int n_operands = 3;
  int operand_max = 4;
  int modulus = 5;
  int perturbed1_operand_max = 9;
  int perturbed2_distractor_clauses = 2;
  int n_train = 800;
  int n_eval = 64;
  std::uint64_t task_seed = 7;

  TaskFamily base() const;
  TaskFamily perturbed1() const;
  TaskFamily perturbed2() const;
};

struct EvalConfig {
  int eval_every = 50;
  int samples_per_prompt = 16;
  double temperature = 0.6;
  double top_p = 0.95;
};

struct TrainConfig {
  SurrogateConfig surrogate;
  double policy_lr = 5e-4;
  double policy_weight_decay = 0.0;
  double max_grad_norm = 1.0;

  bool contrastive_enabled = true;
  ContrastiveConfig contrastive;
  double head_lr = 1e-3;
  double head_weight_decay = 0.01;
  bool fixed_head = false;
  int head_warmup_steps = 20;
  // Also send the mean anchor loss (times lambda) into the policy gradient.
  bool backprop_into_policy = false;
  // Let the policy learn from base rewards during head warmup.
  bool warmup_updates_policy = false;

  SamplingConfig sampling;
  TaskConfig tasks;
  EvalConfig eval;

  std::uint64_t seed = 1;
  int total_steps = 300;
  int prompts_per_step = 8;
  int checkpoint_every = 0;
  PolicyDims dims;
  int pretrain_steps = 2000;
  double pretrain_lr = 3e-3;
  int pretrain_batch = 16;
  // Share of the pretraining corpus written with the shorter solution styles.
  double pretrain_first_step_frac = 0.0;
  double pretrain_direct_frac = 0.0;
  bool deterministic = true;

  // Every violated constraint, one message per key.
  std::vector<std::string> problems() const;
  void validate() const;
};

// Everything needed to resume a run bit-exactly.
struct RunState {
  PolicyParams policy;
  std::optional<PolicyParams> reference;
  std::optional<ContrastiveHead> head;
  AdamW policy_opt;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;         // completed policy steps
  std::uint64_t warmup_step = 0;  // completed head warmup steps
};

struct MetricsRecord {
  std::uint64_t step = 0;
  std::optional<double> mean_base_reward;
  std::optional<double> mean_shaped_reward;
  std::optional<double> pass1_eval_base;
  std::optional<double> pass1_eval_perturbed;
  std::optional<double> mean_contrastive_loss;
  std::optional<double> mi_lower_bound;
  std::optional<double> mean_pos_pair_cosine;
  std::optional<double> mean_pos_neg_cosine;
  std::optional<double> frac_valid_groups;
  std::optional<double> frac_clipped_rewards;
  std::optional<double> kl_to_ref;
  std::optional<double> dropped_groups;

  // One JSON object; absent fields are omitted. Throws NumericError on a
  // non-finite field.
  std::string to_json() const;
};

struct TaskSuites {
  std::vector<TaskInstance> train;
  std::vector<TaskInstance> eval_base;
  std::vector<TaskInstance> eval_perturbed1;
  std::vector<TaskInstance> eval_perturbed2;
};

TaskSuites make_suites(const TaskConfig& cfg);

// Train prompts paired with solutions in a seeded mix of styles.
std::vector<TaskInstance> pretrain_corpus(const TrainConfig& cfg, const TaskSuites& suites);

// Fresh policy from the run seed, pretrained on pretrain_corpus for
// cfg.pretrain_steps.
PolicyParams pretrain_policy(const TrainConfig& cfg, const TaskSuites& suites,
                             const std::function<void(int, double)>& on_step = {});

// Mean over prompts of the fraction of n samples that verify.
double evaluate(const PolicyParams& policy, const std::vector<TaskInstance>& prompts,
                const EvalConfig& cfg, int max_response_len, std::uint64_t seed,
                std::uint64_t suite_id);

struct EvalResult {
  double base = 0.0;
  double perturbed1 = 0.0;
  double perturbed2 = 0.0;
  // Prompt-weighted mean of the two perturbed suites.
  double perturbed = 0.0;
};

EvalResult evaluate_all(const PolicyParams& policy, const TaskSuites& suites, const EvalConfig& cfg,
                        int max_response_len, std::uint64_t seed);

// Snapshots pi_ref and builds the head if the state does not carry them yet.
void begin_rl(RunState& state, const TrainConfig& cfg);

struct WarmupReport {
  std::vector<double> mean_losses;  // per warmup step with at least one anchor
};

// Head-only updates for the remaining warmup steps.
WarmupReport warmup_head(RunState& state, const TrainConfig& cfg, const TaskSuites& suites);

struct StepDetail {
  std::vector<RolloutGroup> groups;
  std::vector<ShapedRewardSet> shaped;
  std::vector<AdvantageSet> advantages;  // for retained groups only
  std::vector<std::size_t> retained;
  double policy_loss = 0.0;
  bool policy_updated = false;
};

// One RL step on the given prompts.
MetricsRecord train_step(RunState& state, const TrainConfig& cfg,
                         const std::vector<TaskInstance>& prompts, StepDetail* detail = nullptr);

// Prompts for step `step`, drawn with replacement from the train split.
std::vector<TaskInstance> step_prompts(const TrainConfig& cfg, const TaskSuites& suites,
                                       std::uint64_t step);

struct EmbeddingRow {
  std::uint64_t step = 0;
  std::size_t group_id = 0;
  std::size_t rollout_id = 0;
  int reward = 0;
  std::vector<double> embedding;
};

// Head embeddings of the groups the next `steps` training steps would
// sample. Nothing is updated. Uses a freshly seeded head when the state has
// none.
std::vector<EmbeddingRow> sample_embeddings(const RunState& state, const TrainConfig& cfg,
                                            const TaskSuites& suites, int steps);

struct RunHooks {
  std::function<void(const MetricsRecord&)> on_record;
  std::function<void(const RunState&)> on_checkpoint;
  std::ostream* log = nullptr;
};

// Reference snapshot, warmup, training with periodic evaluation. Resumes
// from state.step when the state already carries RL progress.
void run(RunState& state, const TrainConfig& cfg, const TaskSuites& suites, const RunHooks& hooks);

// Checkpoints: one JSON header line, then the declared arrays as raw
// little-endian doubles. Throws CheckpointError naming the offending field.
void checkpoint_save(const RunState& state, const std::string& path);
RunState checkpoint_load(const std::string& path);
std::string checkpoint_bytes(const RunState& state);
RunState checkpoint_parse(const std::string& bytes);

}  // namespace clipo
