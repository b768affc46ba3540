#include <doctest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "clipo/error.hpp"
#include "clipo/trainer.hpp"
#include "oracles.hpp"

using namespace clipo;

namespace {

TrainConfig small_config() {
  TrainConfig c;
  c.dims.d_model = 16;
  c.dims.layers = 1;
  c.dims.heads = 2;
  c.dims.ff_mult = 2;
  c.dims.max_len = 40;
  c.tasks.n_operands = 2;
  c.tasks.operand_max = 4;
  c.tasks.modulus = 5;
  c.tasks.perturbed1_operand_max = 9;
  c.tasks.perturbed2_distractor_clauses = 1;
  c.tasks.n_train = 50;
  c.tasks.n_eval = 8;
  c.pretrain_steps = 200;
  c.pretrain_lr = 1e-2;
  c.sampling.group_size = 8;
  c.sampling.max_response_len = 12;
  c.sampling.temperature = 1.0;
  c.eval.samples_per_prompt = 4;
  c.eval.eval_every = 3;
  c.contrastive.d = 8;
  c.prompts_per_step = 4;
  c.total_steps = 6;
  c.head_warmup_steps = 2;
  c.surrogate.kl_coef = 0.04;
  return c;
}

const TaskSuites& suites() {
  static const TaskSuites s = make_suites(small_config().tasks);
  return s;
}

const PolicyParams& warm_policy() {
  static const PolicyParams p = pretrain_policy(small_config(), suites());
  return p;
}

RunState fresh_state(const TrainConfig& cfg) {
  RunState s;
  s.policy = warm_policy();
  s.seed = cfg.seed;
  return s;
}

struct RunOutput {
  std::string metrics;
  std::vector<MetricsRecord> records;
  RunState state;
};

RunOutput run_once(const TrainConfig& cfg, RunState state) {
  RunOutput out;
  std::ostringstream log;
  RunHooks hooks;
  hooks.log = &log;
  hooks.on_record = [&](const MetricsRecord& r) { out.records.push_back(r); };
  run(state, cfg, suites(), hooks);
  out.metrics = log.str();
  out.state = std::move(state);
  return out;
}

std::vector<std::string> lines_of(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

// Bigram policy: hidden state = layer norm of a one-hot token embedding, so
// the next token is a fixed function of the current one.
PolicyParams bigram_policy(const std::vector<std::pair<int, int>>& next) {
  PolicyDims d;
  d.d_model = 20;
  d.layers = 1;
  d.heads = 2;
  d.ff_mult = 1;
  d.max_len = 32;
  PolicyParams p = init_policy(d, 0);
  for (Tensor* t : p.tensors()) std::fill(t->values().begin(), t->values().end(), 0.0);
  for (double& g : p.lnf_gain.values()) g = 1.0;
  for (auto& b : p.blocks) {
    for (double& g : b.ln1_gain.values()) g = 1.0;
    for (double& g : b.ln2_gain.values()) g = 1.0;
  }
  for (std::size_t t = 0; t < 20; ++t) p.tok_emb[t * 20 + t] = 1.0;
  for (auto [from, to] : next) p.out_w[static_cast<std::size_t>(from) * 20 + static_cast<std::size_t>(to)] = 100.0;
  return p;
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("config validation lists every problem") {
  TrainConfig c = small_config();
  CHECK(c.problems().empty());
  c.total_steps = 1;
  c.head_warmup_steps = 5;
  c.contrastive.tau = 0.0;
  c.sampling.group_size = 1;
  const auto p = c.problems();
  CHECK(p.size() >= 3);
  try {
    c.validate();
    FAIL("expected a ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("tau") != std::string::npos);
    CHECK(msg.find("group_size") != std::string::npos);
    CHECK(msg.find("head_warmup_steps") != std::string::npos);
  }
}

TEST_CASE("hand-traced training step") {
  TrainConfig cfg = small_config();
  cfg.contrastive.loss_kind = LossKind::kSupCon;
  cfg.contrastive.tau = 0.5;
  cfg.contrastive.lambda = 0.2;
  cfg.surrogate.kl_coef = 0.04;
  RunState st = fresh_state(cfg);
  begin_rl(st, cfg);
  // A distinct reference makes the KL term non-zero.
  st.reference = init_policy(cfg.dims, 99);
  const Tensor W = st.head->W;
  const auto before = st.policy.hash();
  const auto ref_hash = st.reference->hash();

  // Find a step whose batch has at least one valid group.
  StepDetail det;
  MetricsRecord m;
  for (int tries = 0; tries < 20; ++tries) {
    RunState probe = st;
    probe.step = static_cast<std::uint64_t>(tries);
    m = train_step(probe, cfg, step_prompts(cfg, suites(), probe.step), &det);
    bool any_valid = false;
    for (const auto& s : det.shaped) any_valid = any_valid || s.group_valid;
    if (any_valid) {
      st = std::move(probe);
      break;
    }
  }
  REQUIRE(det.policy_updated);

  const std::size_t G = static_cast<std::size_t>(cfg.sampling.group_size);
  const std::size_t d = W.rows(), D = W.cols();
  double token_adv = 0.0, kl = 0.0;
  std::size_t tokens = 0;
  bool saw_valid = false;
  for (std::size_t g = 0; g < det.groups.size(); ++g) {
    const auto& grp = det.groups[g];
    // Embeddings: pooled hidden, W h, normalized.
    std::vector<std::vector<double>> e(G, std::vector<double>(d));
    for (std::size_t i = 0; i < G; ++i) {
      const auto& r = grp.rollouts[i];
      CHECK(r.reward == verify(grp.instance, r.response()));
      const std::size_t T = r.hidden_states.rows();
      std::vector<double> h(D, 0.0);
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t k = 0; k < D; ++k) h[k] += r.hidden_states[t * D + k] / static_cast<double>(T);
      const auto wh = oracle::matmul(W.values(), h, d, D, 1);
      double n = 0.0;
      for (double v : wh) n += v * v;
      for (std::size_t k = 0; k < d; ++k) e[i][k] = wh[k] / std::sqrt(n);
    }
    std::vector<std::size_t> pos;
    for (std::size_t i = 0; i < G; ++i)
      if (grp.rollouts[i].reward == 1) pos.push_back(i);
    const bool valid = pos.size() > 1 && pos.size() < G;
    saw_valid = saw_valid || valid;
    std::vector<double> shaped(G);
    for (std::size_t i = 0; i < G; ++i) {
      double rcl = 0.0;
      if (valid && grp.rollouts[i].reward == 1) {
        std::vector<long double> s(G);
        long double z = 0.0L;
        for (std::size_t j = 0; j < G; ++j) {
          long double dot = 0.0L;
          for (std::size_t k = 0; k < d; ++k) dot += static_cast<long double>(e[i][k]) * e[j][k];
          s[j] = dot / 0.5L;
          z += std::exp(s[j]);
        }
        long double loss = 0.0L;
        for (std::size_t p : pos)
          if (p != i) loss -= s[p] - std::log(z);
        loss /= static_cast<long double>(pos.size() - 1);
        rcl = std::max(-0.2 * static_cast<double>(loss), -0.5);
      }
      shaped[i] = grp.rollouts[i].reward + rcl;
      CHECK(std::abs(det.shaped[g].total[i] - shaped[i]) < 1e-9);
    }
    double mean = 0.0, var = 0.0;
    for (double x : shaped) mean += x / static_cast<double>(G);
    for (double x : shaped) var += (x - mean) * (x - mean) / static_cast<double>(G);
    const double sd = std::sqrt(var);
    for (std::size_t i = 0; i < G; ++i) {
      const double a = sd > 1e-6 ? (shaped[i] - mean) / sd : 0.0;
      CHECK(std::abs(det.advantages[g].advantages[i] - a) < 1e-9);
      const auto& r = grp.rollouts[i];
      // Ratios are 1 at the sampling policy; KL against the reference.
      Tape t;
      PolicyVars rv = bind_frozen(t, *st.reference);
      const Tensor L = forward(rv, r.tokens).logits.value();
      const std::size_t V = L.cols();
      for (std::size_t k = 0; k < r.response_len(); ++k) {
        const std::size_t row = r.prompt_len - 1 + k;
        std::vector<double> logits(L.values().begin() + static_cast<std::ptrdiff_t>(row * V),
                                   L.values().begin() + static_cast<std::ptrdiff_t>((row + 1) * V));
        const double ref = static_cast<double>(oracle::log_softmax(logits)[static_cast<std::size_t>(r.tokens[r.prompt_len + k])]);
        const double dlt = ref - r.response_logprobs[k];
        kl += std::exp(dlt) - dlt - 1.0;
        token_adv += a;
        ++tokens;
      }
    }
  }
  CHECK(saw_valid);
  const double expected_loss = -token_adv / static_cast<double>(tokens) + 0.04 * kl / static_cast<double>(tokens);
  CHECK(std::abs(det.policy_loss - expected_loss) < 1e-9);
  CHECK(std::abs(*m.kl_to_ref - kl / static_cast<double>(tokens)) < 1e-9);
  CHECK(st.policy.hash() != before);
  CHECK(st.reference->hash() == ref_hash);
}

TEST_CASE("evaluation counts verified samples") {
  const TrainConfig cfg = small_config();
  EvalConfig ec;
  ec.samples_per_prompt = 16;
  const auto split = make_split(cfg.tasks.base(), 0, 50, 5);
  const double got = evaluate(warm_policy(), split.eval, ec, 12, 3, 0);
  CHECK(std::abs(got * 800 - std::round(got * 800)) < 1e-9);
  // Same draws counted directly.
  SamplingConfig sc;
  sc.temperature = ec.temperature;
  sc.top_p = ec.top_p;
  sc.max_response_len = 12;
  sc.group_size = 16;
  long correct = 0;
  for (std::size_t j = 0; j < split.eval.size(); ++j) {
    const auto g = sample_group(warm_policy(), split.eval[j], sc, derive_seed(3, {label(Stream::kEval), 0, j}));
    for (const auto& r : g.rollouts) correct += verify(split.eval[j], r.response());
  }
  CHECK(got * 800 == doctest::Approx(static_cast<double>(correct)).epsilon(1e-12));
  CHECK(evaluate(warm_policy(), split.eval, ec, 12, 3, 0) == got);
}

TEST_CASE("evaluation of scripted policies") {
  TaskFamily zero{"base", 1, 0, 2, 0};  // every prompt is "0 mod 2"
  std::vector<TaskInstance> prompts(50, generate(zero, 0));
  REQUIRE(prompts[0].answer == 0);
  EvalConfig ec;
  const auto gold = bigram_policy({{tok::kPromptEnd, tok::kAnsOpen},
                                   {tok::kAnsOpen, 0},
                                   {0, tok::kAnsClose},
                                   {tok::kAnsClose, tok::kEos}});
  CHECK(evaluate(gold, prompts, ec, 8, 1, 0) == 1.0);
  const auto mute = bigram_policy({{tok::kPromptEnd, tok::kEos}});
  CHECK(evaluate(mute, prompts, ec, 8, 1, 0) == 0.0);
}

TEST_CASE("checkpoints round-trip and reject corruption") {
  TrainConfig cfg = small_config();
  RunState st = fresh_state(cfg);
  begin_rl(st, cfg);
  train_step(st, cfg, step_prompts(cfg, suites(), 0));
  const std::string bytes = checkpoint_bytes(st);
  const RunState back = checkpoint_parse(bytes);
  CHECK(checkpoint_bytes(back) == bytes);
  CHECK(back.policy == st.policy);
  CHECK(back.step == st.step);
  REQUIRE(back.head.has_value());
  CHECK(back.head->hash() == st.head->hash());

  CHECK_THROWS_AS(checkpoint_parse(bytes.substr(0, bytes.size() - 9)), CheckpointError);
  CHECK_THROWS_AS(checkpoint_parse(bytes.substr(0, 10)), CheckpointError);
  CHECK_THROWS_AS(checkpoint_parse(""), CheckpointError);
  std::string bad = bytes;
  bad.replace(bad.find("\"version\""), 9, "\"versioX\"");
  CHECK_THROWS_AS(checkpoint_parse(bad), CheckpointError);

  const std::string path = "trainer_test.ckpt";
  checkpoint_save(st, path);
  CHECK(checkpoint_bytes(checkpoint_load(path)) == bytes);
  std::remove(path.c_str());
  CHECK_THROWS_AS(checkpoint_load("does/not/exist.ckpt"), CheckpointError);
}

TEST_CASE("resume matches an uninterrupted run") {
  TrainConfig cfg = small_config();
  const RunOutput full = run_once(cfg, fresh_state(cfg));

  TrainConfig first = cfg;
  first.total_steps = 3;
  RunOutput part = run_once(first, fresh_state(cfg));
  RunState resumed = checkpoint_parse(checkpoint_bytes(part.state));
  const RunOutput rest = run_once(cfg, std::move(resumed));

  const auto a = lines_of(full.metrics), b = lines_of(rest.metrics);
  REQUIRE(b.size() == 3);
  CHECK(std::vector<std::string>(a.end() - 3, a.end()) == b);
  CHECK(checkpoint_bytes(full.state) == checkpoint_bytes(rest.state));
}

TEST_CASE("identical configs give byte-identical runs") {
  TrainConfig cfg = small_config();
  const RunOutput a = run_once(cfg, fresh_state(cfg));
  const RunOutput b = run_once(cfg, fresh_state(cfg));
  CHECK(a.metrics == b.metrics);
  CHECK(checkpoint_bytes(a.state) == checkpoint_bytes(b.state));
  CHECK(lines_of(a.metrics).size() == 7);
  TrainConfig other = cfg;
  other.seed = 2;
  CHECK(run_once(other, fresh_state(other)).metrics != a.metrics);
}

TEST_CASE("disabled contrast leaves the policy trajectory of the base method") {
  TrainConfig off = small_config();
  off.contrastive_enabled = false;
  TrainConfig zero = small_config();
  zero.contrastive.lambda = 0.0;
  const RunOutput a = run_once(off, fresh_state(off));
  const RunOutput b = run_once(zero, fresh_state(zero));
  CHECK(a.state.policy == b.state.policy);
  CHECK_FALSE(a.state.head.has_value());
  REQUIRE(a.records.size() == b.records.size());
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    const auto& r = a.records[i];
    CHECK(r.mean_base_reward == b.records[i].mean_base_reward);
    CHECK(r.pass1_eval_base == b.records[i].pass1_eval_base);
    CHECK_FALSE(r.mean_contrastive_loss.has_value());
    CHECK_FALSE(r.mean_pos_pair_cosine.has_value());
    CHECK(r.mean_shaped_reward == r.mean_base_reward);
  }
  CHECK(run_once(off, fresh_state(off)).metrics == a.metrics);
}

TEST_CASE("fixed head stays put while rewards are shaped") {
  TrainConfig cfg = small_config();
  cfg.fixed_head = true;
  cfg.total_steps = 8;
  RunState st = fresh_state(cfg);
  begin_rl(st, cfg);
  const auto h = st.head->hash();
  bool shaped = false, hash_constant = true;
  RunHooks hooks;
  hooks.on_record = [&](const MetricsRecord& r) {
    hash_constant = hash_constant && st.head->hash() == h;
    if (r.mean_shaped_reward && r.mean_base_reward && *r.mean_shaped_reward < *r.mean_base_reward) shaped = true;
  };
  run(st, cfg, suites(), hooks);
  CHECK(hash_constant);
  CHECK(st.head->hash() == h);
  CHECK(shaped);
}

TEST_CASE("head warmup") {
  TrainConfig cfg = small_config();
  cfg.head_warmup_steps = 200;
  cfg.total_steps = 200;
  cfg.contrastive.tau = 0.5;
  RunState st = fresh_state(cfg);
  const auto before = st.policy.hash();
  const auto rep = warmup_head(st, cfg, suites());
  CHECK(st.policy.hash() == before);
  CHECK(st.step == 0);
  CHECK(st.warmup_step == 200);
  REQUIRE(rep.mean_losses.size() >= 100);
  std::vector<double> windows;
  for (std::size_t i = 0; i + 20 <= rep.mean_losses.size(); i += 20) {
    double s = 0.0;
    for (std::size_t k = i; k < i + 20; ++k) s += rep.mean_losses[k];
    windows.push_back(s / 20);
  }
  for (std::size_t i = 1; i < windows.size(); ++i) CHECK(windows[i] <= windows[i - 1]);

  TrainConfig none = cfg;
  none.head_warmup_steps = 0;
  RunState s2 = fresh_state(none);
  const auto rep2 = warmup_head(s2, none, suites());
  CHECK(rep2.mean_losses.empty());
  CHECK(s2.policy.hash() == before);
}

TEST_CASE("zero total steps emits only the initial record") {
  TrainConfig cfg = small_config();
  cfg.total_steps = 0;
  cfg.head_warmup_steps = 0;
  const RunOutput out = run_once(cfg, fresh_state(cfg));
  REQUIRE(out.records.size() == 1);
  CHECK(out.records[0].step == 0);
  CHECK(out.records[0].pass1_eval_base.has_value());
  CHECK(out.records[0].pass1_eval_perturbed.has_value());
  CHECK(out.state.policy == warm_policy());
}

TEST_CASE("every metrics record is finite JSON") {
  MetricsRecord r;
  r.step = 3;
  r.mean_base_reward = 0.5;
  CHECK(r.to_json() == "{\"step\":3,\"mean_base_reward\":0.5}");
  r.kl_to_ref = std::nan("");
  CHECK_THROWS_AS(r.to_json(), NumericError);
}

TEST_CASE("embedding samples are unit rows and leave state alone") {
  TrainConfig cfg = small_config();
  RunState st = fresh_state(cfg);
  const auto before = checkpoint_bytes(st);
  const auto rows = sample_embeddings(st, cfg, suites(), 2);
  CHECK(rows.size() == 2u * 4u * 8u);
  for (const auto& r : rows) {
    double n = 0.0;
    for (double v : r.embedding) n += v * v;
    CHECK(std::abs(std::sqrt(n) - 1.0) < 1e-9);
    CHECK(r.embedding.size() == 8);
  }
  CHECK(checkpoint_bytes(st) == before);
}

}
