#include "clipo/selfcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <iomanip>
#include <ostream>

#include "clipo/contrastive.hpp"
#include "clipo/objectives.hpp"
#include "clipo/policy.hpp"
#include "clipo/rng.hpp"
#include "clipo/task.hpp"

namespace clipo {

namespace {

constexpr double kFdStep = 1e-6;
constexpr double kGradTol = 1e-5;

double rel_error(std::span<const double> a, std::span<const double> f) {
  double diff = 0.0, na = 0.0, nf = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - f[i]) * (a[i] - f[i]);
    na += a[i] * a[i];
    nf += f[i] * f[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nf), 1e-8});
}

Var faulty_identity(Var x) {
  return x.tape->record(x.value(), {x.id}, [x](Tape& tp, std::size_t self) {
    if (!tp.needs_grad(x.id)) return;
    auto g = tp.adjoint(self);
    auto gx = tp.adjoint(x.id);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += 1.001 * g[i];
  });
}

Tensor random_tensor(Shape shape, Rng& rng, double sd = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.normal(0.0, sd);
  return t;
}

struct Group {
  std::vector<int> rewards;
  std::vector<std::size_t> positives;
};

// 2 <= |P| <= G - 1.
Group random_group(Rng& rng, std::size_t G) {
  Group g;
  const auto n_pos = static_cast<std::size_t>(rng.uniform_int(2, static_cast<std::int64_t>(G) - 1));
  g.rewards.assign(G, 0);
  std::vector<std::size_t> idx(G);
  for (std::size_t i = 0; i < G; ++i) idx[i] = i;
  for (std::size_t i = G - 1; i > 0; --i)
    std::swap(idx[i], idx[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i)))]);
  for (std::size_t k = 0; k < n_pos; ++k) g.rewards[idx[k]] = 1;
  for (std::size_t i = 0; i < G; ++i)
    if (g.rewards[i]) g.positives.push_back(i);
  return g;
}

// Sum of anchor losses of one variant over every positive of the group.
Var group_loss(Var E, const Group& g, LossKind kind, double tau, bool exclude_self, bool faulty) {
  Var sim = similarity_matrix(E, tau);
  if (faulty) sim = faulty_identity(sim);
  std::vector<Var> parts;
  const auto& P = g.positives;
  for (std::size_t k = 0; k < P.size(); ++k) {
    const std::size_t i = P[k];
    switch (kind) {
      case LossKind::kInfoNce:
        parts.push_back(infonce_anchor_loss(sim, i, P[(k + 1) % P.size()], exclude_self));
        break;
      case LossKind::kSupCon: parts.push_back(supcon_anchor_loss(sim, i, P, exclude_self)); break;
      case LossKind::kSoftNn: parts.push_back(softnn_anchor_loss(sim, i, P, exclude_self)); break;
    }
  }
  return ops::sum(ops::concat(parts));
}

Var normalized_rows(Var X) {
  std::vector<Var> rows;
  for (std::size_t i = 0; i < X.value().rows(); ++i) rows.push_back(ops::l2_normalize(ops::row(X, i)));
  return ops::stack_rows(rows);
}

Var projected_rows(Var W, const Tensor& pooled) {
  Tape& t = *W.tape;
  std::vector<Var> rows;
  Var P = t.constant_ref(pooled);
  for (std::size_t i = 0; i < pooled.rows(); ++i) rows.push_back(embed(W, ops::row(P, i)));
  return ops::stack_rows(rows);
}

// Max over seeds of the relative error between the tape gradient and central
// differences, for a scalar function of one tensor.
double tensor_grad_error(const std::function<Tensor(Rng&)>& make_x,
                         const std::function<Var(Tape&, Var)>& build, int seeds,
                         std::uint64_t base) {
  double worst = 0.0;
  for (int s = 0; s < seeds; ++s) {
    Rng rng(base, {static_cast<std::uint64_t>(s)});
    Tensor x = make_x(rng);
    x.set_requires_grad(true);
    x.zero_grad();
    {
      Tape tape;
      Var loss = build(tape, tape.leaf(x));
      tape.backward(loss);
    }
    const Tensor fd = finite_diff_grad(
        [&](const Tensor& probe) {
          Tape tape;
          return build(tape, tape.constant_ref(probe)).item();
        },
        x, kFdStep);
    worst = std::max(worst, rel_error(x.grad(), fd.values()));
  }
  return worst;
}

PolicyDims tiny_dims() {
  PolicyDims d;
  d.d_model = 8;
  d.max_len = 40;
  d.layers = 1;
  d.heads = 2;
  d.ff_mult = 2;
  return d;
}

TaskFamily tiny_family() {
  TaskFamily f;
  f.n_operands = 2;
  f.operand_max = 4;
  f.modulus = 5;
  return f;
}

// Relative error over a few random parameter coordinates of a policy loss.
double policy_grad_error(const std::function<Var(const PolicyVars&, Rng&, bool)>& build, int seeds,
                         std::uint64_t base) {
  constexpr int kCoords = 6;
  double worst = 0.0;
  for (int s = 0; s < seeds; ++s) {
    PolicyParams params = init_policy(tiny_dims(), derive_seed(base, {static_cast<std::uint64_t>(s)}));
    const std::uint64_t case_seed = derive_seed(base, {static_cast<std::uint64_t>(s), 1});
    params.set_requires_grad(true);
    params.zero_grad();
    {
      Tape tape;
      Rng rng(case_seed);
      Var loss = build(bind(tape, params), rng, true);
      tape.backward(loss);
    }
    auto value_at = [&]() {
      Tape tape;
      Rng rng(case_seed);
      return build(bind_frozen(tape, params), rng, false).item();
    };
    auto named = params.named();
    Rng pick(base, {static_cast<std::uint64_t>(s), 2});
    std::vector<double> analytic, numeric;
    for (int c = 0; c < kCoords; ++c) {
      Tensor* t = named[static_cast<std::size_t>(
                            pick.uniform_int(0, static_cast<std::int64_t>(named.size()) - 1))]
                      .second;
      const auto i = static_cast<std::size_t>(pick.uniform_int(0, static_cast<std::int64_t>(t->size()) - 1));
      const double orig = (*t)[i];
      (*t)[i] = orig + kFdStep;
      const double fp = value_at();
      (*t)[i] = orig - kFdStep;
      const double fm = value_at();
      (*t)[i] = orig;
      analytic.push_back(t->grad()[i]);
      numeric.push_back((fp - fm) / (2.0 * kFdStep));
    }
    worst = std::max(worst, rel_error(analytic, numeric));
  }
  return worst;
}

// Rollouts of a separately seeded tiny policy (so they do not move with the
// probed parameters) scored under the given vars, with perturbed behaviour
// and reference log-probabilities.
std::vector<SequenceTerms> surrogate_batch(const PolicyVars& vars, Rng& rng, double old_noise) {
  const PolicyParams sampler = init_policy(tiny_dims(), rng.next());
  TaskInstance inst = generate(tiny_family(), rng.next());
  SamplingConfig sc;
  sc.group_size = 3;
  sc.max_response_len = 6;
  RolloutGroup g = sample_group(sampler, inst, sc, rng.next());
  std::vector<SequenceTerms> batch;
  for (const auto& r : g.rollouts) {
    SequenceTerms st;
    st.new_logprobs = logprobs_under(vars, r);
    for (double lp : r.response_logprobs) {
      st.old_logprobs.push_back(lp + rng.uniform() * 2.0 * old_noise - old_noise);
      st.ref_logprobs.push_back(lp + rng.normal(0.0, 0.2));
    }
    st.advantage = rng.normal();
    batch.push_back(std::move(st));
  }
  return batch;
}

void add(std::vector<CheckResult>& out, const std::string& suite, const std::string& name,
         double tol, double measured) {
  out.push_back({suite, name, tol, measured, std::isfinite(measured) && measured <= tol});
}

void gradient_suite(std::vector<CheckResult>& out, const SelfcheckOptions& opts) {
  const int n = opts.gradient_seeds;
  const std::pair<LossKind, const char*> kinds[] = {
      {LossKind::kInfoNce, "infonce"}, {LossKind::kSupCon, "supcon"}, {LossKind::kSoftNn, "softnn"}};
  for (const auto& [kind, name] : kinds) {
    for (bool excl : {false, true}) {
      const std::string tag = std::string(name) + (excl ? " exclude_self" : "");
      Group grp;
      std::size_t G = 0;
      const double emb_err = tensor_grad_error(
          [&](Rng& rng) {
            G = static_cast<std::size_t>(rng.uniform_int(4, 8));
            grp = random_group(rng, G);
            return random_tensor({G, 4}, rng);
          },
          [&](Tape&, Var X) {
            return group_loss(normalized_rows(X), grp, kind, 0.5, excl, opts.perturb_backward);
          },
          n, derive_seed(11, {static_cast<std::uint64_t>(kind), excl}));
      add(out, "gradient", tag + " anchor loss wrt embeddings", kGradTol, emb_err);

      Tensor pooled;
      const double w_err = tensor_grad_error(
          [&](Rng& rng) {
            G = static_cast<std::size_t>(rng.uniform_int(4, 8));
            grp = random_group(rng, G);
            pooled = random_tensor({G, 6}, rng);
            return random_tensor({4, 6}, rng, 0.4);
          },
          [&](Tape&, Var W) {
            return group_loss(projected_rows(W, pooled), grp, kind, 0.5, excl, opts.perturb_backward);
          },
          n, derive_seed(12, {static_cast<std::uint64_t>(kind), excl}));
      add(out, "gradient", tag + " anchor loss wrt head W", kGradTol, w_err);
    }
  }

  const std::pair<Method, const char*> methods[] = {
      {Method::kGrpo, "grpo"}, {Method::kGspo, "gspo"}, {Method::kDapo, "dapo"}, {Method::kGmpo, "gmpo"}};
  for (const auto& [m, name] : methods) {
    SurrogateConfig cfg = SurrogateConfig::defaults(m);
    cfg.kl_coef = 0.05;
    const double noise = m == Method::kGspo ? 2e-4 : 0.3;
    const double err = policy_grad_error(
        [&](const PolicyVars& vars, Rng& rng, bool) {
          const auto batch = surrogate_batch(vars, rng, noise);
          return surrogate_loss(batch, cfg);
        },
        n, derive_seed(13, {static_cast<std::uint64_t>(m)}));
    add(out, "gradient", std::string(name) + " surrogate wrt policy params", kGradTol, err);
  }

  const double ce_err = policy_grad_error(
      [&](const PolicyVars& vars, Rng& rng, bool) {
        std::vector<TaskInstance> batch;
        for (int b = 0; b < 2; ++b) batch.push_back(generate(tiny_family(), rng.next()));
        return supervised_ce(vars, batch);
      },
      n, 14);
  add(out, "gradient", "supervised cross-entropy wrt policy params", kGradTol, ce_err);
}

double anchor_value(const Tensor& E, const Group& g, LossKind kind, double tau) {
  Tape tape;
  Var sim = similarity_matrix(tape.constant_ref(E), tau);
  const std::size_t i = g.positives[0];
  switch (kind) {
    case LossKind::kInfoNce: return infonce_anchor_loss(sim, i, g.positives[1]).item();
    case LossKind::kSupCon: return supcon_anchor_loss(sim, i, g.positives).item();
    case LossKind::kSoftNn: return softnn_anchor_loss(sim, i, g.positives).item();
  }
  return NAN;
}

void identity_suite(std::vector<CheckResult>& out) {
  // Identical embeddings: every logit ties, so the loss is ln G with a single
  // partner. SupCon and InfoNCE keep ln G for any |P|.
  for (std::size_t G : {4u, 16u, 32u}) {
    Tensor E({G, 3});
    for (std::size_t i = 0; i < G; ++i) E[i * 3] = 1.0;
    Group pair{std::vector<int>(G, 0), {0, 1}};
    pair.rewards[0] = pair.rewards[1] = 1;
    Group many{std::vector<int>(G, 0), {}};
    for (std::size_t i = 0; i < G / 2; ++i) {
      many.rewards[i] = 1;
      many.positives.push_back(i);
    }
    const double lnG = std::log(static_cast<double>(G));
    const std::string g = "G=" + std::to_string(G);
    for (auto [kind, name] : {std::pair{LossKind::kInfoNce, "infonce"}, std::pair{LossKind::kSupCon, "supcon"},
                              std::pair{LossKind::kSoftNn, "softnn"}})
      add(out, "identity", std::string(name) + " identical embeddings " + g + " = ln G", 1e-9,
          std::abs(anchor_value(E, pair, kind, 0.05) - lnG));
    add(out, "identity", "supcon identical embeddings " + g + " |P|=G/2 = ln G", 1e-9,
        std::abs(anchor_value(E, many, LossKind::kSupCon, 0.05) - lnG));
  }

  // Hand case: tau = 0.5, e = (1,0),(1,0),(0,1),(-1,0), rewards 1 1 0 0.
  {
    const long double e2 = std::exp(2.0L);
    const long double infonce = -std::log(e2 / (2 * e2 + 1 + std::exp(-2.0L)));
    Tensor E = Tensor::matrix({{1, 0}, {1, 0}, {0, 1}, {-1, 0}});
    Group g{{1, 1, 0, 0}, {0, 1}};
    const double got = anchor_value(E, g, LossKind::kInfoNce, 0.5);
    add(out, "identity", "hand case infonce", 1e-6, std::abs(got - static_cast<double>(infonce)));
    ContrastiveConfig cfg;
    cfg.tau = 0.5;
    cfg.lambda = 0.2;
    Tape tape;
    Rng rng(0);
    const GroupContrast gc = contrastive_rewards(g.rewards, tape.constant_ref(E), cfg, rng);
    add(out, "identity", "hand case r_CL at lambda 0.2", 1e-6,
        std::abs(gc.rewards.contrastive[0] - (-0.2 * static_cast<double>(infonce))));
  }

  // Floor: G = 16, identical embeddings, lambda 0.2 -> -0.2 ln 16 is clipped.
  {
    const std::size_t G = 16;
    Tensor E({G, 2});
    for (std::size_t i = 0; i < G; ++i) E[i * 2] = 1.0;
    std::vector<int> rewards(G, 0);
    rewards[0] = rewards[1] = 1;
    ContrastiveConfig cfg;
    Tape tape;
    Rng rng(0);
    const GroupContrast gc = contrastive_rewards(rewards, tape.constant_ref(E), cfg, rng);
    add(out, "identity", "G=16 identical embeddings clipped to -0.5", 0.0,
        std::abs(gc.rewards.contrastive[0] - (-0.5)));
  }

  // Single partner: the three aggregations coincide.
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 1000; ++s) {
    Rng rng(21, {s});
    const auto G = static_cast<std::size_t>(rng.uniform_int(3, 12));
    Tensor X = random_tensor({G, 4}, rng);
    Tape tape;
    Var E = normalized_rows(tape.constant_ref(X));
    Var sim = similarity_matrix(E, 0.1 + rng.uniform());
    const std::vector<std::size_t> P = {0, 1};
    const bool excl = rng.uniform() < 0.5;
    const double a = infonce_anchor_loss(sim, 0, 1, excl).item();
    const double b = supcon_anchor_loss(sim, 0, P, excl).item();
    const double c = softnn_anchor_loss(sim, 0, P, excl).item();
    worst = std::max({worst, std::abs(a - b), std::abs(a - c)});
  }
  add(out, "identity", "single positive supcon == infonce == softnn", 1e-12, worst);
}

// Length-1 responses with random log-probabilities and advantages.
double surrogate_gap(const SurrogateConfig& a, const SurrogateConfig& b, std::uint64_t base) {
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 200; ++s) {
    Rng rng(base, {s});
    const auto n = static_cast<std::size_t>(rng.uniform_int(1, 12));
    std::vector<Tensor> news(n);
    std::vector<SequenceTerms> batch(n);
    Tape tape;
    for (std::size_t i = 0; i < n; ++i) {
      const double old = -rng.uniform() * 3.0;
      news[i] = Tensor::vector({old + rng.normal(0.0, 0.4)});
      batch[i].new_logprobs = tape.constant_ref(news[i]);
      batch[i].old_logprobs = {old};
      batch[i].advantage = rng.normal();
    }
    worst = std::max(worst, std::abs(surrogate_loss(batch, a).item() - surrogate_loss(batch, b).item()));
  }
  return worst;
}

void surrogate_suite(std::vector<CheckResult>& out) {
  SurrogateConfig grpo = SurrogateConfig::defaults(Method::kGrpo);
  grpo.kl_coef = 0.0;
  SurrogateConfig dapo = SurrogateConfig::defaults(Method::kDapo);
  dapo.eps_high = 0.2;
  add(out, "surrogate", "dapo(0.2, 0.2) == grpo(0.2) on length-1", 1e-12, surrogate_gap(dapo, grpo, 31));
  SurrogateConfig grpo4 = grpo;
  grpo4.eps_low = grpo4.eps_high = 0.4;
  const SurrogateConfig gmpo = SurrogateConfig::defaults(Method::kGmpo);
  add(out, "surrogate", "gmpo == grpo(0.4) on length-1", 1e-12, surrogate_gap(gmpo, grpo4, 32));

  double worst = 0.0;
  for (std::uint64_t s = 0; s < 200; ++s) {
    Rng rng(33, {s});
    Tensor nl = Tensor::vector({-rng.uniform() * 3.0});
    const std::vector<double> old = {-rng.uniform() * 3.0};
    Tape tape;
    Var v = tape.constant_ref(nl);
    worst = std::max(worst, std::abs(sequence_ratio(v, old).item() - token_ratios(v, old).value()[0]));
  }
  add(out, "surrogate", "gspo sequence ratio == token ratio on length-1", 1e-12, worst);
}

// One 4-rollout group: rewards -> shaped -> advantages -> grpo loss, against a
// scalar re-derivation.
void step_oracle(std::vector<CheckResult>& out) {
  const double tau = 0.5, lambda = 0.2, beta = 0.04, eps = 0.2;
  const std::vector<int> rewards = {1, 1, 0, 1};
  const double e[4][2] = {{1, 0}, {0.6, 0.8}, {0, 1}, {-0.8, 0.6}};
  const double newlp[4][2] = {{-0.3, -1.1}, {-0.7, -0.2}, {-1.5, -0.9}, {-0.4, -0.6}};
  const double oldlp[4][2] = {{-0.5, -1.0}, {-0.6, -0.45}, {-1.2, -0.9}, {-0.1, -0.62}};
  const double reflp[4][2] = {{-0.4, -1.3}, {-0.9, -0.3}, {-1.4, -0.7}, {-0.5, -0.5}};

  // Scalar trace.
  double s[4][4];
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) s[i][j] = (e[i][0] * e[j][0] + e[i][1] * e[j][1]) / tau;
  double shaped[4];
  for (int i = 0; i < 4; ++i) {
    shaped[i] = rewards[i];
    if (!rewards[i]) continue;
    double z = 0.0;
    for (int j = 0; j < 4; ++j) z += std::exp(s[i][j]);
    double loss = 0.0;
    int np = 0;
    for (int p = 0; p < 4; ++p) {
      if (p == i || !rewards[p]) continue;
      loss += std::log(z) - s[i][p];
      ++np;
    }
    loss /= np;
    shaped[i] += std::min(0.0, std::max(-lambda * loss, -0.5));
  }
  const double mean = (shaped[0] + shaped[1] + shaped[2] + shaped[3]) / 4.0;
  double var = 0.0;
  for (double v : shaped) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / 4.0);
  double adv[4], obj = 0.0, kl = 0.0;
  for (int i = 0; i < 4; ++i) {
    adv[i] = (shaped[i] - mean) / sd;
    for (int t = 0; t < 2; ++t) {
      const double r = std::exp(newlp[i][t] - oldlp[i][t]);
      obj += std::min(r * adv[i], std::clamp(r, 1 - eps, 1 + eps) * adv[i]);
      const double d = reflp[i][t] - newlp[i][t];
      kl += std::exp(d) - d - 1.0;
    }
  }
  const double loss_oracle = -obj / 8.0 + beta * kl / 8.0;

  // Library pipeline.
  ContrastiveConfig cc;
  cc.tau = tau;
  cc.lambda = lambda;
  cc.loss_kind = LossKind::kSupCon;
  Tensor E({4, 2});
  for (int i = 0; i < 4; ++i)
    for (int k = 0; k < 2; ++k) E[static_cast<std::size_t>(i * 2 + k)] = e[i][k];
  Tape tape;
  Rng rng(0);
  const GroupContrast gc = contrastive_rewards(rewards, tape.constant_ref(E), cc, rng);
  const AdvantageSet as = group_advantages(gc.rewards.total);
  SurrogateConfig sc = SurrogateConfig::defaults(Method::kGrpo);
  sc.kl_coef = beta;
  std::vector<Tensor> nl(4);
  std::vector<SequenceTerms> batch(4);
  for (int i = 0; i < 4; ++i) {
    nl[i] = Tensor::vector({newlp[i][0], newlp[i][1]});
    batch[i].new_logprobs = tape.constant_ref(nl[i]);
    batch[i].old_logprobs = {oldlp[i][0], oldlp[i][1]};
    batch[i].ref_logprobs = {reflp[i][0], reflp[i][1]};
    batch[i].advantage = as.advantages[i];
  }
  const double loss = surrogate_loss(batch, sc).item();

  double d_shaped = 0.0, d_adv = 0.0;
  for (int i = 0; i < 4; ++i) {
    d_shaped = std::max(d_shaped, std::abs(gc.rewards.total[i] - shaped[i]));
    d_adv = std::max(d_adv, std::abs(as.advantages[i] - adv[i]));
  }
  add(out, "step", "hand trace shaped rewards", 1e-9, d_shaped);
  add(out, "step", "hand trace advantages", 1e-9, d_adv);
  add(out, "step", "hand trace grpo loss", 1e-9, std::abs(loss - loss_oracle));
}

}  // namespace

std::vector<CheckResult> run_selfcheck(const SelfcheckOptions& opts) {
  std::vector<CheckResult> out;
  gradient_suite(out, opts);
  identity_suite(out);
  surrogate_suite(out);
  step_oracle(out);
  return out;
}

void print_report(std::ostream& os, const std::vector<CheckResult>& results) {
  std::size_t failed = 0;
  for (const auto& r : results) {
    os << std::left << std::setw(10) << r.suite << ' ' << std::setw(52) << r.name << " tol "
       << std::setw(8) << std::setprecision(2) << std::scientific << r.tolerance << " measured "
       << std::setw(10) << r.measured << ' ' << (r.passed ? "PASS" : "FAIL") << '\n';
    failed += r.passed ? 0 : 1;
  }
  os << std::defaultfloat << results.size() - failed << '/' << results.size() << " checks passed\n";
}

}  // namespace clipo
