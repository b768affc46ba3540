#include "clipo/policy.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "clipo/error.hpp"
#include "clipo/optim.hpp"

namespace clipo {

void PolicyDims::validate() const {
  if (vocab < 1 || d_model < 1 || max_len < 1 || layers < 1 || heads < 1 || ff_mult < 1)
    throw ContractError("policy dims must all be positive");
  if (d_model % heads != 0)
    throw ContractError("d_model " + std::to_string(d_model) + " not divisible by heads " +
                        std::to_string(heads));
}

std::vector<std::pair<std::string, Tensor*>> PolicyParams::named() {
  std::vector<std::pair<std::string, Tensor*>> out;
  out.emplace_back("tok_emb", &tok_emb);
  out.emplace_back("pos_emb", &pos_emb);
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    auto& b = blocks[l];
    const std::string p = "block" + std::to_string(l) + ".";
    out.emplace_back(p + "ln1_gain", &b.ln1_gain);
    out.emplace_back(p + "ln1_bias", &b.ln1_bias);
    out.emplace_back(p + "wq", &b.wq);
    out.emplace_back(p + "wk", &b.wk);
    out.emplace_back(p + "wv", &b.wv);
    out.emplace_back(p + "wo", &b.wo);
    out.emplace_back(p + "ln2_gain", &b.ln2_gain);
    out.emplace_back(p + "ln2_bias", &b.ln2_bias);
    out.emplace_back(p + "ff1_w", &b.ff1_w);
    out.emplace_back(p + "ff1_b", &b.ff1_b);
    out.emplace_back(p + "ff2_w", &b.ff2_w);
    out.emplace_back(p + "ff2_b", &b.ff2_b);
  }
  out.emplace_back("lnf_gain", &lnf_gain);
  out.emplace_back("lnf_bias", &lnf_bias);
  out.emplace_back("out_w", &out_w);
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> PolicyParams::named() const {
  auto mut = const_cast<PolicyParams*>(this)->named();
  return {mut.begin(), mut.end()};
}

std::vector<Tensor*> PolicyParams::tensors() {
  std::vector<Tensor*> out;
  for (auto& [name, t] : named()) out.push_back(t);
  return out;
}

std::size_t PolicyParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named()) n += t->size();
  return n;
}

void PolicyParams::set_requires_grad(bool on) {
  for (Tensor* t : tensors()) t->set_requires_grad(on);
}

void PolicyParams::zero_grad() {
  for (Tensor* t : tensors()) t->zero_grad();
}

std::uint64_t PolicyParams::hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& [name, t] : named()) {
    for (double v : t->data()) {
      unsigned char bytes[sizeof(double)];
      std::memcpy(bytes, &v, sizeof v);
      for (unsigned char c : bytes) h = (h ^ c) * 1099511628211ULL;
    }
  }
  return h;
}

bool PolicyParams::operator==(const PolicyParams& other) const {
  if (!(dims == other.dims)) return false;
  auto a = named();
  auto b = other.named();
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].second->shape() != b[i].second->shape()) return false;
    if (a[i].second->values() != b[i].second->values()) return false;
  }
  return true;
}

std::size_t policy_parameter_count(const PolicyDims& d) {
  const std::size_t V = d.vocab, D = d.d_model, T = d.max_len, L = d.layers,
                    F = static_cast<std::size_t>(d.ff_mult) * d.d_model;
  const std::size_t per_block = 4 * D * D   // q, k, v, o
                                + 2 * D * F  // feed-forward weights
                                + F + D      // feed-forward biases
                                + 4 * D;     // two norms, gain + offset
  return V * D + T * D + L * per_block + 2 * D + D * V;
}

PolicyParams init_policy(const PolicyDims& dims, std::uint64_t seed) {
  dims.validate();
  const std::size_t V = dims.vocab, D = dims.d_model, T = dims.max_len,
                    F = static_cast<std::size_t>(dims.ff_mult) * dims.d_model;
  Rng rng(seed, {label(Stream::kInit)});
  auto gaussian = [&](Shape shape, double stddev) {
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = rng.normal(0.0, stddev);
    return t;
  };
  auto filled = [](std::size_t n, double v) { return Tensor({n}, std::vector<double>(n, v)); };
  const double s_d = 1.0 / std::sqrt(static_cast<double>(D));
  const double s_f = 1.0 / std::sqrt(static_cast<double>(F));

  PolicyParams p;
  p.dims = dims;
  p.tok_emb = gaussian({V, D}, s_d);
  p.pos_emb = gaussian({T, D}, s_d);
  for (int l = 0; l < dims.layers; ++l) {
    BlockParams b;
    b.ln1_gain = filled(D, 1.0);
    b.ln1_bias = filled(D, 0.0);
    b.wq = gaussian({D, D}, s_d);
    b.wk = gaussian({D, D}, s_d);
    b.wv = gaussian({D, D}, s_d);
    b.wo = gaussian({D, D}, s_d);
    b.ln2_gain = filled(D, 1.0);
    b.ln2_bias = filled(D, 0.0);
    b.ff1_w = gaussian({D, F}, s_d);
    b.ff1_b = filled(F, 0.0);
    b.ff2_w = gaussian({F, D}, s_f);
    b.ff2_b = filled(D, 0.0);
    p.blocks.push_back(std::move(b));
  }
  p.lnf_gain = filled(D, 1.0);
  p.lnf_bias = filled(D, 0.0);
  p.out_w = gaussian({D, V}, 0.2 * s_d);
  return p;
}

namespace {

template <class P, class F>
PolicyVars bind_with(P& p, F&& as_var) {
  PolicyVars v;
  v.params = &p;
  v.tok_emb = as_var(p.tok_emb);
  v.pos_emb = as_var(p.pos_emb);
  for (auto& b : p.blocks) {
    v.blocks.push_back({as_var(b.ln1_gain), as_var(b.ln1_bias), as_var(b.wq), as_var(b.wk),
                        as_var(b.wv), as_var(b.wo), as_var(b.ln2_gain), as_var(b.ln2_bias),
                        as_var(b.ff1_w), as_var(b.ff1_b), as_var(b.ff2_w), as_var(b.ff2_b)});
  }
  v.lnf_gain = as_var(p.lnf_gain);
  v.lnf_bias = as_var(p.lnf_bias);
  v.out_w = as_var(p.out_w);
  return v;
}

}  // namespace

PolicyVars bind(Tape& tape, PolicyParams& p) {
  return bind_with(p, [&](Tensor& t) { return tape.leaf(t); });
}

PolicyVars bind_frozen(Tape& tape, const PolicyParams& p) {
  return bind_with(p, [&](const Tensor& t) { return tape.constant_ref(t); });
}

namespace {

constexpr double kNormEps = 1e-5;

void check_length(const PolicyDims& dims, std::size_t n) {
  if (n > static_cast<std::size_t>(dims.max_len)) {
    throw DimensionError("sequence of length " + std::to_string(n) + " exceeds max_len " +
                         std::to_string(dims.max_len));
  }
}

}  // namespace

ForwardResult forward(const PolicyVars& v, std::span<const int> tokens) {
  const PolicyDims& dims = v.params->dims;
  check_length(dims, tokens.size());
  if (tokens.empty()) throw DimensionError("forward: empty token sequence");
  std::vector<int> positions(tokens.size());
  std::iota(positions.begin(), positions.end(), 0);
  Var x = ops::add(ops::gather_rows(v.tok_emb, tokens), ops::gather_rows(v.pos_emb, positions));
  for (const auto& b : v.blocks) {
    Var h = ops::layer_norm(x, b.ln1_gain, b.ln1_bias, kNormEps);
    Var q = ops::matmul(h, b.wq);
    Var k = ops::matmul(h, b.wk);
    Var val = ops::matmul(h, b.wv);
    Var att = ops::causal_attention(q, k, val, static_cast<std::size_t>(dims.heads));
    x = ops::add(x, ops::matmul(att, b.wo));
    Var h2 = ops::layer_norm(x, b.ln2_gain, b.ln2_bias, kNormEps);
    Var f = ops::gelu(ops::add_row(ops::matmul(h2, b.ff1_w), b.ff1_b));
    x = ops::add(x, ops::add_row(ops::matmul(f, b.ff2_w), b.ff2_b));
  }
  Var hidden = ops::layer_norm(x, v.lnf_gain, v.lnf_bias, kNormEps);
  Var logits = ops::matmul(hidden, v.out_w);
  return {logits, hidden};
}

Decoder::Decoder(const PolicyParams& params) : p_(&params) {
  const std::size_t D = params.dims.d_model;
  keys_.resize(params.blocks.size());
  vals_.resize(params.blocks.size());
  for (auto& k : keys_) k.reserve(params.dims.max_len * D);
  for (auto& v : vals_) v.reserve(params.dims.max_len * D);
  logits_.assign(params.dims.vocab, 0.0);
  hidden_.assign(D, 0.0);
}

void Decoder::push(int token) {
  const PolicyParams& p = *p_;
  const std::size_t D = p.dims.d_model, V = p.dims.vocab,
                    F = static_cast<std::size_t>(p.dims.ff_mult) * D;
  const std::size_t t = len_;
  check_length(p.dims, t + 1);
  if (token < 0 || static_cast<std::size_t>(token) >= V)
    throw DimensionError("Decoder::push: token id out of range");

  std::vector<double> x(D), h(D), q(D), k(D), v(D), att(D), o(D), f1(F), f2(D);
  std::vector<double> probs(static_cast<std::size_t>(p.dims.heads) * (t + 1));
  for (std::size_t j = 0; j < D; ++j)
    x[j] = p.tok_emb[static_cast<std::size_t>(token) * D + j] + p.pos_emb[t * D + j];
  double mean = 0.0, rstd = 0.0;
  for (std::size_t l = 0; l < p.blocks.size(); ++l) {
    const BlockParams& b = p.blocks[l];
    kernels::layer_norm_row(x, b.ln1_gain.data(), b.ln1_bias.data(), kNormEps, h, mean, rstd);
    kernels::row_matmul(h, b.wq.data(), q, D, D);
    kernels::row_matmul(h, b.wk.data(), k, D, D);
    kernels::row_matmul(h, b.wv.data(), v, D, D);
    keys_[l].insert(keys_[l].end(), k.begin(), k.end());
    vals_[l].insert(vals_[l].end(), v.begin(), v.end());
    kernels::attend_row(q, keys_[l], vals_[l], t, D, static_cast<std::size_t>(p.dims.heads), att,
                        probs);
    kernels::row_matmul(att, b.wo.data(), o, D, D);
    for (std::size_t j = 0; j < D; ++j) x[j] = x[j] + o[j];
    kernels::layer_norm_row(x, b.ln2_gain.data(), b.ln2_bias.data(), kNormEps, h, mean, rstd);
    kernels::row_matmul(h, b.ff1_w.data(), f1, D, F);
    for (std::size_t j = 0; j < F; ++j) f1[j] = kernels::gelu(f1[j] + b.ff1_b[j]);
    kernels::row_matmul(f1, b.ff2_w.data(), f2, F, D);
    for (std::size_t j = 0; j < D; ++j) x[j] = x[j] + (f2[j] + b.ff2_b[j]);
  }
  kernels::layer_norm_row(x, p.lnf_gain.data(), p.lnf_bias.data(), kNormEps, hidden_, mean, rstd);
  kernels::row_matmul(hidden_, p.out_w.data(), logits_, D, V);
  ++len_;
}

void SamplingConfig::validate() const {
  if (!(temperature > 0.0)) throw ContractError("sampling temperature must be > 0");
  if (!(top_p > 0.0 && top_p <= 1.0)) throw ContractError("top_p must lie in (0, 1]");
  if (max_response_len < 1) throw ContractError("max_response_len must be >= 1");
  if (group_size < 2) throw ContractError("group_size must be >= 2");
}

void RolloutGroup::refresh_positives() {
  positive_index_set.clear();
  for (std::size_t i = 0; i < rollouts.size(); ++i)
    if (rollouts[i].reward == 1) positive_index_set.push_back(i);
}

int sample_token(std::span<const double> logits, double temperature, double top_p, Rng& rng) {
  const std::size_t V = logits.size();
  std::vector<double> scaled(V), probs(V);
  for (std::size_t j = 0; j < V; ++j) scaled[j] = logits[j] / temperature;
  const double lse = kernels::logsumexp(scaled);
  for (std::size_t j = 0; j < V; ++j) probs[j] = std::exp(scaled[j] - lse);

  std::vector<int> order(V);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return probs[a] > probs[b]; });
  std::size_t keep = V;
  if (top_p < 1.0) {
    double cum = 0.0;
    for (std::size_t r = 0; r < V; ++r) {
      cum += probs[order[r]];
      if (cum >= top_p) {
        keep = r + 1;
        break;
      }
    }
  }
  double mass = 0.0;
  for (std::size_t r = 0; r < keep; ++r) mass += probs[order[r]];
  const double u = rng.uniform() * mass;
  double cum = 0.0;
  for (std::size_t r = 0; r < keep; ++r) {
    cum += probs[order[r]];
    if (u < cum) return order[r];
  }
  return order[keep - 1];
}

RolloutRecord sample_response(const PolicyParams& params, const Decoder& prompt_state,
                              std::size_t prompt_len, std::span<const int> prompt,
                              const SamplingConfig& cfg, std::uint64_t stream_seed) {
  const std::size_t D = params.dims.d_model;
  const std::size_t room = static_cast<std::size_t>(params.dims.max_len) - prompt_len;
  const std::size_t limit = std::min<std::size_t>(cfg.max_response_len, room);
  Rng rng(stream_seed);
  Decoder dec = prompt_state;
  RolloutRecord rec;
  rec.prompt_len = prompt_len;
  rec.tokens.assign(prompt.begin(), prompt.end());
  std::vector<double> hidden;
  std::vector<double> lp(params.dims.vocab);
  rec.truncated = true;
  for (std::size_t step = 0; step < limit; ++step) {
    const int token = sample_token(dec.logits(), cfg.temperature, cfg.top_p, rng);
    kernels::log_softmax_row(dec.logits(), lp);
    // PAD targets are masked everywhere, so a sampled PAD carries no mass.
    rec.response_logprobs.push_back(token == tok::kPad ? 0.0 : lp[static_cast<std::size_t>(token)]);
    rec.tokens.push_back(token);
    dec.push(token);
    hidden.insert(hidden.end(), dec.hidden().begin(), dec.hidden().end());
    if (token == tok::kEos) {
      rec.truncated = false;
      break;
    }
  }
  const std::size_t n = rec.response_logprobs.size();
  rec.hidden_states = Tensor({n, D}, std::move(hidden));
  return rec;
}

RolloutGroup sample_group(const PolicyParams& params, const TaskInstance& instance,
                          const SamplingConfig& cfg, std::uint64_t group_seed) {
  cfg.validate();
  check_length(params.dims, instance.prompt_tokens.size() + 1);
  Decoder base(params);
  for (int t : instance.prompt_tokens) base.push(t);
  RolloutGroup group;
  group.instance = instance;
  for (int i = 0; i < cfg.group_size; ++i) {
    RolloutRecord rec =
        sample_response(params, base, instance.prompt_tokens.size(), instance.prompt_tokens, cfg,
                        derive_seed(group_seed, {static_cast<std::uint64_t>(i)}));
    rec.reward = verify(instance, rec.response());
    group.rollouts.push_back(std::move(rec));
  }
  group.refresh_positives();
  return group;
}

Var logprobs_under(const PolicyVars& vars, const RolloutRecord& record, Var* response_hidden) {
  const std::size_t P = record.prompt_len;
  const std::size_t R = record.response_len();
  if (P == 0 || R == 0) throw ContractError("logprobs_under: record needs prompt and response");
  Tape& tape = *vars.tok_emb.tape;
  ForwardResult fr = forward(vars, record.tokens);
  // Position t-1 predicts token t.
  Var pred_hidden = ops::slice_rows(fr.hidden, P - 1, R);
  Var logits = ops::matmul(pred_hidden, vars.out_w);
  Var logp = ops::log_softmax(logits);
  std::vector<int> targets(record.tokens.begin() + static_cast<std::ptrdiff_t>(P),
                           record.tokens.end());
  std::vector<double> mask(R, 1.0);
  bool any_pad = false;
  for (std::size_t i = 0; i < R; ++i) {
    if (targets[i] == tok::kPad) {
      mask[i] = 0.0;
      any_pad = true;
    }
  }
  Var picked = ops::pick(logp, targets);
  if (any_pad) picked = ops::mul(picked, tape.constant(Tensor::vector(mask)));
  if (response_hidden) *response_hidden = ops::slice_rows(fr.hidden, P, R);
  return picked;
}

Var logprobs_under(const PolicyVars& vars, const RolloutRecord& record) {
  return logprobs_under(vars, record, nullptr);
}

std::vector<double> response_logprobs(const PolicyParams& params, const RolloutRecord& record) {
  Tape tape;
  PolicyVars vars = bind_frozen(tape, params);
  Var lp = logprobs_under(vars, record);
  return lp.value().values();
}

Var supervised_ce(const PolicyVars& vars, std::span<const TaskInstance> batch) {
  std::vector<Var> parts;
  for (const auto& inst : batch) {
    RolloutRecord rec;
    rec.prompt_len = inst.prompt_tokens.size();
    rec.tokens = inst.prompt_tokens;
    rec.tokens.insert(rec.tokens.end(), inst.gold_response.begin(), inst.gold_response.end());
    parts.push_back(logprobs_under(vars, rec));
  }
  return ops::neg(ops::mean(ops::concat(parts)));
}

double supervised_loss(const PolicyParams& params, std::span<const TaskInstance> batch) {
  Tape tape;
  PolicyVars vars = bind_frozen(tape, params);
  return supervised_ce(vars, batch).item();
}

PretrainReport supervised_pretrain(PolicyParams& params, std::span<const TaskInstance> corpus,
                                   const PretrainOptions& opts,
                                   const std::function<void(int, double)>& on_step) {
  PretrainReport report;
  if (opts.steps <= 0) return report;
  if (corpus.empty()) throw ContractError("supervised_pretrain: empty corpus");
  AdamW opt({opts.learning_rate, opts.weight_decay, 0.9, 0.999, 1e-8});
  const bool was = params.tok_emb.requires_grad();
  params.set_requires_grad(true);
  std::vector<TaskInstance> batch;
  for (int s = 0; s < opts.steps; ++s) {
    Rng rng(opts.seed, {label(Stream::kPretrain), static_cast<std::uint64_t>(s)});
    batch.clear();
    for (int b = 0; b < opts.batch_size; ++b)
      batch.push_back(corpus[static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<std::int64_t>(corpus.size()) - 1))]);
    params.zero_grad();
    Tape tape;
    PolicyVars vars = bind(tape, params);
    Var loss = supervised_ce(vars, batch);
    tape.backward(loss);
    auto tensors = params.tensors();
    clip_grad_norm(tensors, opts.max_grad_norm);
    opt.step(tensors);
    report.losses.push_back(loss.item());
    if (on_step) on_step(s, loss.item());
  }
  params.set_requires_grad(was);
  for (Tensor* t : params.tensors()) t->clear_grad();
  return report;
}

std::vector<int> greedy_response(const PolicyParams& params, std::span<const int> prompt,
                                 int max_response_len) {
  Decoder dec(params);
  for (int t : prompt) dec.push(t);
  std::vector<int> out;
  const std::size_t room = static_cast<std::size_t>(params.dims.max_len) - prompt.size();
  const std::size_t limit = std::min<std::size_t>(max_response_len, room);
  while (out.size() < limit) {
    auto lg = dec.logits();
    const int token = static_cast<int>(std::max_element(lg.begin(), lg.end()) - lg.begin());
    out.push_back(token);
    if (token == tok::kEos) break;
    dec.push(token);
  }
  return out;
}

}  // namespace clipo
