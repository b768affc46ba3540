#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "clipo/autodiff.hpp"
#include "clipo/rng.hpp"
#include "clipo/task.hpp"
#include "clipo/tensor.hpp"

namespace clipo {

struct PolicyDims {
  int vocab = tok::kVocabSize;
  int d_model = 64;
  int max_len = 96;
  int layers = 2;
  int heads = 2;
  int ff_mult = 4;

  void validate() const;
  bool operator==(const PolicyDims&) const = default;
};

struct BlockParams {
  Tensor ln1_gain, ln1_bias;
  Tensor wq, wk, wv, wo;
  Tensor ln2_gain, ln2_bias;
  Tensor ff1_w, ff1_b, ff2_w, ff2_b;
};

// Pre-norm causal transformer. Hidden states exposed to the contrastive head
// are the last-layer states after the final norm.
struct PolicyParams {
  PolicyDims dims;
  Tensor tok_emb;  // V x D
  Tensor pos_emb;  // T_max x D
  std::vector<BlockParams> blocks;
  Tensor lnf_gain, lnf_bias;
  Tensor out_w;  // D x V

  // Every tensor with a stable name, in checkpoint order.
  std::vector<std::pair<std::string, Tensor*>> named();
  std::vector<std::pair<std::string, const Tensor*>> named() const;
  std::vector<Tensor*> tensors();

  std::size_t parameter_count() const;
  void set_requires_grad(bool on);
  void zero_grad();
  // FNV-1a over the raw bytes of every tensor.
  std::uint64_t hash() const;
  bool operator==(const PolicyParams& other) const;
};

// Closed-form parameter count for the architecture above.
std::size_t policy_parameter_count(const PolicyDims& dims);

// Deterministic init: N(0, 1/fan_in) projections, unit norm gains, zero
// offsets and biases; the output projection is scaled down by 0.2 so the
// initial next-token distribution is close to uniform.
PolicyParams init_policy(const PolicyDims& dims, std::uint64_t seed);

// Params bound to a tape (leaves when they require grad, constants otherwise).
struct PolicyVars {
  const PolicyParams* params = nullptr;
  Var tok_emb, pos_emb;
  struct Block {
    Var ln1_gain, ln1_bias, wq, wk, wv, wo, ln2_gain, ln2_bias, ff1_w, ff1_b, ff2_w, ff2_b;
  };
  std::vector<Block> blocks;
  Var lnf_gain, lnf_bias, out_w;
};

PolicyVars bind(Tape& tape, PolicyParams& params);
// Binds every tensor as a constant, whatever its requires_grad flag.
PolicyVars bind_frozen(Tape& tape, const PolicyParams& params);

struct ForwardResult {
  Var logits;  // T x V
  Var hidden;  // T x D
};

// Full-sequence forward on the tape. Throws DimensionError past max_len.
ForwardResult forward(const PolicyVars& vars, std::span<const int> tokens);

// Incremental decoder with a key/value cache. Rows are bit-identical to the
// taped forward because both use the same row kernels.
class Decoder {
 public:
  explicit Decoder(const PolicyParams& params);

  void push(int token);
  std::size_t length() const { return len_; }
  // Logits / hidden state of the last pushed position.
  std::span<const double> logits() const { return logits_; }
  std::span<const double> hidden() const { return hidden_; }

 private:
  const PolicyParams* p_;
  std::size_t len_ = 0;
  std::vector<std::vector<double>> keys_, vals_;
  std::vector<double> logits_, hidden_;
};

struct SamplingConfig {
  double temperature = 1.0;
  double top_p = 1.0;
  int max_response_len = 16;
  int group_size = 16;

  void validate() const;
};

struct RolloutRecord {
  std::size_t prompt_len = 0;
  std::vector<int> tokens;                  // prompt + response
  std::vector<double> response_logprobs;    // log pi_old(y_t | y_<t, x)
  Tensor hidden_states;                     // T_resp x D
  int reward = 0;
  bool truncated = false;

  std::size_t response_len() const { return tokens.size() - prompt_len; }
  std::span<const int> response() const {
    return std::span<const int>(tokens).subspan(prompt_len);
  }
};

struct RolloutGroup {
  TaskInstance instance;
  std::vector<RolloutRecord> rollouts;
  std::vector<std::size_t> positive_index_set;

  // Recomputes positive_index_set from the rewards.
  void refresh_positives();
};

// Token drawn from softmax(logits / temperature) restricted to the top-p
// nucleus. Ties in probability are ordered by token id.
int sample_token(std::span<const double> logits, double temperature, double top_p, Rng& rng);

// Samples a single response. `stream_seed` fixes the rng stream.
RolloutRecord sample_response(const PolicyParams& params, const Decoder& prompt_state,
                              std::size_t prompt_len, std::span<const int> prompt,
                              const SamplingConfig& cfg, std::uint64_t stream_seed);

// G ancestral samples; rollout i uses stream derive_seed(group_seed, {i}).
RolloutGroup sample_group(const PolicyParams& params, const TaskInstance& instance,
                          const SamplingConfig& cfg, std::uint64_t group_seed);

// Differentiable log-probabilities of the response tokens under the bound
// params. PAD positions contribute exactly zero.
Var logprobs_under(const PolicyVars& vars, const RolloutRecord& record);
// As above but also returns the response rows of the hidden states.
Var logprobs_under(const PolicyVars& vars, const RolloutRecord& record, Var* response_hidden);

// Plain (no-grad) response log-probabilities, e.g. under the reference policy.
std::vector<double> response_logprobs(const PolicyParams& params, const RolloutRecord& record);

struct PretrainOptions {
  int steps = 0;
  double learning_rate = 1e-3;
  double weight_decay = 0.0;
  int batch_size = 16;
  double max_grad_norm = 1.0;
  std::uint64_t seed = 0;
};

struct PretrainReport {
  std::vector<double> losses;  // one per step
};

// Teacher-forced cross-entropy on the response tokens of (prompt, gold) pairs.
PretrainReport supervised_pretrain(PolicyParams& params, std::span<const TaskInstance> corpus,
                                   const PretrainOptions& opts,
                                   const std::function<void(int, double)>& on_step = {});

// Mean token cross-entropy of the gold responses, on the tape.
Var supervised_ce(const PolicyVars& vars, std::span<const TaskInstance> batch);

// Mean token cross-entropy of the gold responses (no grad).
double supervised_loss(const PolicyParams& params, std::span<const TaskInstance> batch);

// Greedy decode of one prompt; returns the response tokens.
std::vector<int> greedy_response(const PolicyParams& params, std::span<const int> prompt,
                                 int max_response_len);

}  // namespace clipo
