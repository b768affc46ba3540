#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "clipo/autodiff.hpp"
#include "clipo/optim.hpp"
#include "clipo/rng.hpp"
#include "clipo/tensor.hpp"

namespace clipo {

enum class LossKind { kInfoNce, kSupCon, kSoftNn };

std::string to_string(LossKind kind);
LossKind parse_loss_kind(const std::string& name);

struct ContrastiveConfig {
  double tau = 0.05;
  double lambda = 0.2;
  LossKind loss_kind = LossKind::kInfoNce;
  double clip_floor = -0.5;
  int d = 32;
  // Drop the anchor's own term from the softmax denominator.
  bool exclude_self = false;

  void validate() const;
};

// Linear projection g(h) = W h followed by L2 normalization.
struct ContrastiveHead {
  Tensor W;  // d x D
  AdamW optimizer;
  bool frozen = false;

  std::size_t out_dim() const { return W.rows(); }
  std::size_t in_dim() const { return W.cols(); }
  std::uint64_t hash() const;
};

// W ~ N(0, 1/D), AdamW(lr, wd).
ContrastiveHead make_head(int d, int D, std::uint64_t seed, double lr = 1e-3,
                          double weight_decay = 0.01);

// Mean over the response (sequence) axis. Throws ContractError on an empty
// response.
Var pool(Var hidden);
Tensor pool(const Tensor& hidden);

// l2_normalize(W * pooled).
Var embed(Var W, Var pooled);

// s_ij = e_i . e_j / tau for the rows of a [G x d] embedding matrix.
Var similarity_matrix(Var embeddings, double tau);

// Uniform draw from positives \ {anchor}.
std::size_t select_positive(std::size_t anchor, std::span<const std::size_t> positives, Rng& rng);

// -log softmax over row `anchor` of sim, evaluated at `positive`. The
// denominator spans every j including the anchor unless exclude_self is set.
Var infonce_anchor_loss(Var sim, std::size_t anchor, std::size_t positive,
                        bool exclude_self = false);
// Mean over p in positives \ {anchor} of -log softmax(row)[p].
Var supcon_anchor_loss(Var sim, std::size_t anchor, std::span<const std::size_t> positives,
                       bool exclude_self = false);
// -log( sum_p exp(s_ip) / sum_a exp(s_ia) ), p in positives \ {anchor}.
Var softnn_anchor_loss(Var sim, std::size_t anchor, std::span<const std::size_t> positives,
                       bool exclude_self = false);

// Contrastive shaping only applies when 1 < |P| < G.
bool group_gate(std::size_t n_positive, std::size_t group_size);

struct ShapedRewardSet {
  std::vector<int> base;
  std::vector<double> contrastive;
  std::vector<double> total;
  bool group_valid = false;
  std::vector<bool> clipped_mask;
};

struct GroupContrast {
  ShapedRewardSet rewards;
  std::vector<std::size_t> anchors;  // correct rollouts of a valid group
  std::vector<Var> anchor_losses;    // same order as anchors, differentiable
  std::vector<std::size_t> sampled_positive;  // InfoNCE partner per anchor
};

// Shaped rewards for one group. `embeddings` is [G x d] with unit rows; rng is
// only consumed by InfoNCE positive selection on valid groups.
GroupContrast contrastive_rewards(std::span<const int> base_rewards, Var embeddings,
                                  const ContrastiveConfig& cfg, Rng& rng);

struct HeadUpdateResult {
  bool applied = false;
  double mean_loss = 0.0;
  std::size_t anchors = 0;
};

// One AdamW step of W against the mean of `losses`; the losses must have been
// built from a tape leaf bound to head.W. No-op when empty or frozen.
HeadUpdateResult head_update(ContrastiveHead& head, std::span<const Var> losses);

// ln G - mean anchor loss.
double mi_lower_bound(double mean_anchor_loss, std::size_t group_size);

// Classic InfoNCE across N (u_i, v_i) pairs: -mean_i log softmax_j(u_i.v_j/tau)[i].
Var pair_infonce_loss(Var u_embeddings, Var v_embeddings, double tau);

struct CosineStats {
  double pos_pair_sum = 0.0;
  std::size_t pos_pairs = 0;
  double pos_neg_sum = 0.0;
  std::size_t pos_neg_pairs = 0;

  void merge(const CosineStats& other);
};

// Cosines between correct/correct and correct/incorrect pairs of unit rows.
CosineStats pair_cosines(const Tensor& embeddings, std::span<const int> rewards);

struct MiProbeOptions {
  double rho = 0.0;
  int input_dim = 16;
  int embed_dim = 8;
  int batch = 32;
  int train_steps = 300;
  int eval_batches = 20;
  double tau = 0.1;
  double learning_rate = 1e-2;
  std::uint64_t seed = 0;
};

struct MiProbeResult {
  double mean_loss = 0.0;
  double bound = 0.0;  // ln N - loss on held-out batches
};

// Trains a head on correlated pairs v = rho u + sqrt(1 - rho^2) noise and
// reports the InfoNCE mutual-information bound.
MiProbeResult run_mi_probe(const MiProbeOptions& opts);

}  // namespace clipo
