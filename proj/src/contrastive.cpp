#include "clipo/contrastive.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

#include "clipo/error.hpp"

namespace clipo {

namespace {

// Row `anchor` of sim as softmax logits, optionally without the self term.
// `slot` maps a group index to its position in the returned logits.
struct AnchorRow {
  Var logits;
  std::vector<int> slot;
};

AnchorRow anchor_row(Var sim, std::size_t anchor, bool exclude_self) {
  const std::size_t G = sim.value().rows();
  if (sim.value().cols() != G) throw DimensionError("similarity matrix must be square");
  if (anchor >= G) throw ContractError("invalid anchor: index out of range");
  AnchorRow out;
  out.slot.assign(G, -1);
  Var row = ops::row(sim, anchor);
  if (!exclude_self) {
    for (std::size_t j = 0; j < G; ++j) out.slot[j] = static_cast<int>(j);
    out.logits = row;
    return out;
  }
  std::vector<int> keep;
  for (std::size_t j = 0; j < G; ++j) {
    if (j == anchor) continue;
    out.slot[j] = static_cast<int>(keep.size());
    keep.push_back(static_cast<int>(j));
  }
  out.logits = ops::pick(row, keep);
  return out;
}

std::vector<int> partner_slots(const AnchorRow& r, std::size_t anchor,
                               std::span<const std::size_t> positives) {
  if (std::find(positives.begin(), positives.end(), anchor) == positives.end())
    throw ContractError("invalid anchor: anchor is not in the positive set");
  std::vector<int> slots;
  for (std::size_t p : positives) {
    if (p == anchor) continue;
    if (p >= r.slot.size()) throw ContractError("invalid anchor: positive index out of range");
    slots.push_back(r.slot[p]);
  }
  if (slots.empty()) throw ContractError("invalid anchor: no positive partner");
  return slots;
}

}  // namespace

std::string to_string(LossKind kind) {
  switch (kind) {
    case LossKind::kInfoNce: return "infonce";
    case LossKind::kSupCon: return "supcon";
    case LossKind::kSoftNn: return "softnn";
  }
  return "?";
}

LossKind parse_loss_kind(const std::string& name) {
  if (name == "infonce") return LossKind::kInfoNce;
  if (name == "supcon") return LossKind::kSupCon;
  if (name == "softnn") return LossKind::kSoftNn;
  throw ConfigError("unknown loss_kind '" + name + "' (expected infonce, supcon or softnn)");
}

void ContrastiveConfig::validate() const {
  if (!(tau > 0.0)) throw ConfigError("contrastive.tau must be > 0");
  if (!(lambda >= 0.0)) throw ConfigError("contrastive.lambda must be >= 0");
  if (!(clip_floor <= 0.0)) throw ConfigError("contrastive.clip_floor must be <= 0");
  if (d < 1) throw ConfigError("contrastive.d must be >= 1");
}

std::uint64_t ContrastiveHead::hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (double v : W.data()) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(&v);
    for (std::size_t b = 0; b < sizeof(double); ++b) h = (h ^ bytes[b]) * 1099511628211ULL;
  }
  return h;
}

ContrastiveHead make_head(int d, int D, std::uint64_t seed, double lr, double weight_decay) {
  if (d < 1 || D < 1) throw DimensionError("contrastive head dimensions must be positive");
  ContrastiveHead head;
  head.W = Tensor({static_cast<std::size_t>(d), static_cast<std::size_t>(D)});
  Rng rng(seed, {label(Stream::kHead)});
  const double sd = 1.0 / std::sqrt(static_cast<double>(D));
  for (double& w : head.W.values()) w = rng.normal(0.0, sd);
  head.W.set_requires_grad(true);
  AdamWConfig cfg;
  cfg.learning_rate = lr;
  cfg.weight_decay = weight_decay;
  head.optimizer = AdamW(cfg);
  return head;
}

Var pool(Var hidden) {
  const Tensor& H = hidden.value();
  if (H.rank() != 2) throw DimensionError("pool expects [T x D], got " + shape_str(H.shape()));
  if (H.rows() == 0) throw ContractError("degenerate rollout: empty response");
  return ops::mean_axis(hidden);
}

Tensor pool(const Tensor& hidden) {
  if (hidden.rank() != 2) throw DimensionError("pool expects [T x D]");
  const std::size_t T = hidden.rows(), D = hidden.cols();
  if (T == 0) throw ContractError("degenerate rollout: empty response");
  Tensor out({D});
  for (std::size_t r = 0; r < T; ++r)
    for (std::size_t j = 0; j < D; ++j) out[j] += hidden[r * D + j];
  for (std::size_t j = 0; j < D; ++j) out[j] /= static_cast<double>(T);
  return out;
}

Var embed(Var W, Var pooled) {
  if (!pooled.value().all_finite()) throw NumericError("embed: non-finite pooled state");
  return ops::l2_normalize(ops::matvec(W, pooled));
}

Var similarity_matrix(Var embeddings, double tau) {
  if (!(tau > 0.0)) throw ContractError("similarity_matrix: tau must be > 0");
  return ops::scale(ops::matmul(embeddings, ops::transpose(embeddings)), 1.0 / tau);
}

std::size_t select_positive(std::size_t anchor, std::span<const std::size_t> positives, Rng& rng) {
  if (positives.size() < 2) throw ContractError("invalid anchor: fewer than two positives");
  if (std::find(positives.begin(), positives.end(), anchor) == positives.end())
    throw ContractError("invalid anchor: anchor is not in the positive set");
  std::vector<std::size_t> others;
  for (std::size_t p : positives)
    if (p != anchor) others.push_back(p);
  const auto k = rng.uniform_int(0, static_cast<std::int64_t>(others.size()) - 1);
  return others[static_cast<std::size_t>(k)];
}

Var infonce_anchor_loss(Var sim, std::size_t anchor, std::size_t positive, bool exclude_self) {
  if (anchor == positive) throw ContractError("infonce: anchor and positive coincide");
  AnchorRow r = anchor_row(sim, anchor, exclude_self);
  if (positive >= r.slot.size()) throw ContractError("infonce: positive index out of range");
  Var ls = ops::log_softmax(r.logits);
  return ops::neg(ops::select(ls, static_cast<std::size_t>(r.slot[positive])));
}

Var supcon_anchor_loss(Var sim, std::size_t anchor, std::span<const std::size_t> positives,
                       bool exclude_self) {
  AnchorRow r = anchor_row(sim, anchor, exclude_self);
  const std::vector<int> slots = partner_slots(r, anchor, positives);
  Var ls = ops::log_softmax(r.logits);
  return ops::neg(ops::mean(ops::pick(ls, slots)));
}

Var softnn_anchor_loss(Var sim, std::size_t anchor, std::span<const std::size_t> positives,
                       bool exclude_self) {
  AnchorRow r = anchor_row(sim, anchor, exclude_self);
  const std::vector<int> slots = partner_slots(r, anchor, positives);
  if (slots.size() == 1) {
    Var ls = ops::log_softmax(r.logits);
    return ops::neg(ops::select(ls, static_cast<std::size_t>(slots[0])));
  }
  return ops::sub(ops::logsumexp(r.logits), ops::logsumexp(ops::pick(r.logits, slots)));
}

bool group_gate(std::size_t n_positive, std::size_t group_size) {
  return n_positive > 1 && n_positive < group_size;
}

GroupContrast contrastive_rewards(std::span<const int> base_rewards, Var embeddings,
                                  const ContrastiveConfig& cfg, Rng& rng) {
  const std::size_t G = base_rewards.size();
  if (embeddings.value().rank() != 2 || embeddings.value().rows() != G)
    throw DimensionError("contrastive_rewards: embeddings do not match the group size");
  GroupContrast out;
  ShapedRewardSet& s = out.rewards;
  s.base.assign(base_rewards.begin(), base_rewards.end());
  s.contrastive.assign(G, 0.0);
  s.clipped_mask.assign(G, false);

  std::vector<std::size_t> positives;
  for (std::size_t i = 0; i < G; ++i)
    if (base_rewards[i] == 1) positives.push_back(i);
  s.group_valid = group_gate(positives.size(), G);

  if (s.group_valid) {
    Var sim = similarity_matrix(embeddings, cfg.tau);
    for (std::size_t i : positives) {
      Var loss;
      switch (cfg.loss_kind) {
        case LossKind::kInfoNce: {
          const std::size_t p = select_positive(i, positives, rng);
          out.sampled_positive.push_back(p);
          loss = infonce_anchor_loss(sim, i, p, cfg.exclude_self);
          break;
        }
        case LossKind::kSupCon:
          loss = supcon_anchor_loss(sim, i, positives, cfg.exclude_self);
          break;
        case LossKind::kSoftNn:
          loss = softnn_anchor_loss(sim, i, positives, cfg.exclude_self);
          break;
      }
      const double raw = -cfg.lambda * loss.item();
      if (raw < cfg.clip_floor) s.clipped_mask[i] = true;
      // The loss is non-negative up to rounding in the two log-sum-exps.
      s.contrastive[i] = std::min(0.0, std::max(raw, cfg.clip_floor));
      out.anchors.push_back(i);
      out.anchor_losses.push_back(loss);
    }
  }
  s.total.resize(G);
  for (std::size_t i = 0; i < G; ++i)
    s.total[i] = static_cast<double>(s.base[i]) + s.contrastive[i];
  return out;
}

HeadUpdateResult head_update(ContrastiveHead& head, std::span<const Var> losses) {
  HeadUpdateResult res;
  res.anchors = losses.size();
  if (losses.empty()) return res;
  double total = 0.0;
  for (const Var& l : losses) total += l.item();
  res.mean_loss = total / static_cast<double>(losses.size());
  if (head.frozen) {
    static bool noticed = false;
    if (!noticed) {
      std::cerr << "note: contrastive head is frozen, skipping head updates\n";
      noticed = true;
    }
    return res;
  }
  Tape* tape = losses.front().tape;
  Var acc = losses.front();
  for (std::size_t k = 1; k < losses.size(); ++k) acc = ops::add(acc, losses[k]);
  Var mean = ops::scale(acc, 1.0 / static_cast<double>(losses.size()));
  head.W.zero_grad();
  tape->backward(mean);
  head.optimizer.step({&head.W});
  res.applied = true;
  return res;
}

double mi_lower_bound(double mean_anchor_loss, std::size_t group_size) {
  if (group_size < 2) throw ContractError("mi_lower_bound: group size must be >= 2");
  return std::log(static_cast<double>(group_size)) - mean_anchor_loss;
}

Var pair_infonce_loss(Var u_embeddings, Var v_embeddings, double tau) {
  const std::size_t N = u_embeddings.value().rows();
  if (v_embeddings.value().rows() != N) throw DimensionError("pair_infonce: batch mismatch");
  Var sim = ops::scale(ops::matmul(u_embeddings, ops::transpose(v_embeddings)), 1.0 / tau);
  std::vector<int> diag(N);
  for (std::size_t i = 0; i < N; ++i) diag[i] = static_cast<int>(i);
  std::vector<Var> rows;
  rows.reserve(N);
  for (std::size_t i = 0; i < N; ++i) rows.push_back(ops::log_softmax(ops::row(sim, i)));
  return ops::neg(ops::mean(ops::pick(ops::stack_rows(rows), diag)));
}

void CosineStats::merge(const CosineStats& o) {
  pos_pair_sum += o.pos_pair_sum;
  pos_pairs += o.pos_pairs;
  pos_neg_sum += o.pos_neg_sum;
  pos_neg_pairs += o.pos_neg_pairs;
}

CosineStats pair_cosines(const Tensor& embeddings, std::span<const int> rewards) {
  const std::size_t G = rewards.size();
  if (embeddings.rows() != G) throw DimensionError("pair_cosines: row count mismatch");
  const std::size_t d = embeddings.cols();
  CosineStats st;
  for (std::size_t i = 0; i < G; ++i) {
    if (rewards[i] != 1) continue;
    for (std::size_t j = 0; j < G; ++j) {
      if (j == i) continue;
      double c = 0.0;
      for (std::size_t k = 0; k < d; ++k) c += embeddings.at(i, k) * embeddings.at(j, k);
      if (rewards[j] == 1) {
        if (j > i) {
          st.pos_pair_sum += c;
          ++st.pos_pairs;
        }
      } else {
        st.pos_neg_sum += c;
        ++st.pos_neg_pairs;
      }
    }
  }
  return st;
}

namespace {

// One batch of (u, v) pairs; both are [N x n].
void draw_pairs(Rng& rng, double rho, int N, int n, Tensor& u, Tensor& v) {
  u = Tensor({static_cast<std::size_t>(N), static_cast<std::size_t>(n)});
  v = Tensor(u.shape());
  const double s = std::sqrt(std::max(0.0, 1.0 - rho * rho));
  for (std::size_t i = 0; i < u.size(); ++i) {
    u[i] = rng.normal();
    v[i] = rho * u[i] + s * rng.normal();
  }
}

Var embed_rows(Var W, const Tensor& x, Tape& tape) {
  Var X = tape.constant_ref(x);
  std::vector<Var> rows;
  for (std::size_t i = 0; i < x.rows(); ++i) rows.push_back(embed(W, ops::row(X, i)));
  return ops::stack_rows(rows);
}

}  // namespace

MiProbeResult run_mi_probe(const MiProbeOptions& o) {
  if (o.batch < 2) throw ContractError("mi probe: batch must be >= 2");
  ContrastiveHead head = make_head(o.embed_dim, o.input_dim, derive_seed(o.seed, {label(Stream::kProbe)}),
                                   o.learning_rate, 0.0);
  // Same draws for every rho, so bounds across rho are directly comparable.
  Rng train_rng(o.seed, {label(Stream::kProbe), 1});
  Tensor u, v;
  for (int s = 0; s < o.train_steps; ++s) {
    draw_pairs(train_rng, o.rho, o.batch, o.input_dim, u, v);
    Tape tape;
    Var W = tape.leaf(head.W);
    Var loss = pair_infonce_loss(embed_rows(W, u, tape), embed_rows(W, v, tape), o.tau);
    const Var ls[] = {loss};
    head_update(head, ls);
  }
  Rng eval_rng(o.seed, {label(Stream::kProbe), 2});
  double total = 0.0;
  for (int b = 0; b < o.eval_batches; ++b) {
    draw_pairs(eval_rng, o.rho, o.batch, o.input_dim, u, v);
    Tape tape;
    Var W = tape.constant_ref(head.W);
    total += pair_infonce_loss(embed_rows(W, u, tape), embed_rows(W, v, tape), o.tau).item();
  }
  MiProbeResult r;
  r.mean_loss = total / static_cast<double>(o.eval_batches);
  r.bound = mi_lower_bound(r.mean_loss, static_cast<std::size_t>(o.batch));
  return r;
}

}  // namespace clipo
