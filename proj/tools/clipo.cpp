// clipo: pretrain, train, eval, export-embeddings, selfcheck.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "clipo/config.hpp"
#include "clipo/error.hpp"
#include "clipo/selfcheck.hpp"
#include "clipo/trainer.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace clipo;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitSelfcheck = 4;

struct Common {
  std::string config;
  std::string ckpt;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
  bool deterministic = false;
};

void add_common(CLI::App* cmd, Common& c, bool with_ckpt, bool with_out) {
  cmd->add_option("--config", c.config, "experiment config file");
  if (with_ckpt) cmd->add_option("--ckpt", c.ckpt, "checkpoint to start from");
  if (with_out) cmd->add_option("--out", c.out, "output directory or file");
  cmd->add_option("--seed", c.seed, "run seed (same as --override run.seed=N)");
  cmd->add_option("--override", c.overrides, "section.key=value, repeatable");
  cmd->add_flag("--deterministic", c.deterministic, "single worker, byte-reproducible output");
}

TrainConfig resolve(const Common& c, std::vector<std::string> extra = {}) {
  std::vector<std::string> ov = c.overrides;
  if (c.seed) ov.push_back("run.seed=" + std::to_string(*c.seed));
  if (c.deterministic) ov.push_back("run.deterministic=true");
  ov.insert(ov.end(), extra.begin(), extra.end());
  return load_config(c.config, ov);
}

void ensure_dir(const std::string& dir) {
  if (dir.empty()) throw std::runtime_error("--out is required");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw std::runtime_error("cannot create output directory " + dir);
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f << text;
  if (!f) throw std::runtime_error("cannot write " + path.string());
}

RunState load_state(const std::string& path) {
  if (path.empty()) throw std::runtime_error("--ckpt is required");
  if (!fs::exists(path)) throw std::runtime_error("checkpoint not found: " + path);
  return checkpoint_load(path);
}

void check_dims(const RunState& s, const TrainConfig& cfg) {
  if (!(s.policy.dims == cfg.dims))
    throw ConfigError("checkpoint policy dims do not match run.d_model/layers/heads/ff_mult/max_len");
}

struct SuiteScore {
  std::string name;
  std::size_t prompts;
  double pass1;
};

std::vector<SuiteScore> score(const PolicyParams& policy, const TaskSuites& suites,
                              const TrainConfig& cfg, std::uint64_t seed, const std::string& which) {
  const std::pair<std::string, const std::vector<TaskInstance>*> all[] = {
      {"base", &suites.eval_base}, {"perturbed1", &suites.eval_perturbed1}, {"perturbed2", &suites.eval_perturbed2}};
  std::vector<SuiteScore> out;
  for (std::size_t id = 0; id < 3; ++id) {
    if (which != "all" && which != all[id].first) continue;
    out.push_back({all[id].first, all[id].second->size(),
                   evaluate(policy, *all[id].second, cfg.eval, cfg.sampling.max_response_len, seed, id)});
  }
  return out;
}

nlohmann::ordered_json score_json(const std::vector<SuiteScore>& scores, const TrainConfig& cfg,
                                  std::uint64_t seed) {
  nlohmann::ordered_json j;
  j["seed"] = seed;
  j["samples_per_prompt"] = cfg.eval.samples_per_prompt;
  j["temperature"] = cfg.eval.temperature;
  j["top_p"] = cfg.eval.top_p;
  for (const auto& s : scores) j["suites"][s.name] = {{"prompts", s.prompts}, {"pass1", s.pass1}};
  return j;
}

void print_scores(const std::vector<SuiteScore>& scores, const TrainConfig& cfg, std::uint64_t seed) {
  std::cout << "seed " << seed << ", " << cfg.eval.samples_per_prompt << " samples per prompt\n";
  std::cout << std::left << std::setw(12) << "suite" << std::setw(9) << "prompts" << "pass@1\n";
  for (const auto& s : scores)
    std::cout << std::setw(12) << s.name << std::setw(9) << s.prompts << std::fixed
              << std::setprecision(4) << s.pass1 << std::defaultfloat << '\n';
}

std::vector<TaskInstance> read_task_dump(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read task dump " + path);
  std::vector<TaskInstance> out;
  std::string line;
  while (std::getline(f, line))
    if (!line.empty()) out.push_back(task_from_record(line));
  if (out.empty()) throw std::runtime_error("task dump " + path + " is empty");
  return out;
}

int cmd_pretrain(const Common& c, std::optional<int> steps, const std::string& tasks_path) {
  std::vector<std::string> extra;
  if (steps) extra.push_back("run.pretrain_steps=" + std::to_string(*steps));
  const TrainConfig cfg = resolve(c, extra);
  ensure_dir(c.out);
  const fs::path out(c.out);
  write_file(out / "config.ini", render_config(cfg));

  TaskSuites suites = make_suites(cfg.tasks);
  if (!tasks_path.empty()) suites.train = read_task_dump(tasks_path);
  std::string dump;
  for (const auto& t : suites.train) dump += task_to_record(t) + "\n";
  write_file(out / "train_tasks.jsonl", dump);

  RunState state;
  state.seed = cfg.seed;
  state.policy = pretrain_policy(cfg, suites, [&](int s, double loss) {
    if ((s + 1) % 100 == 0 || s + 1 == cfg.pretrain_steps)
      std::cerr << "pretrain step " << s + 1 << "/" << cfg.pretrain_steps << " loss " << loss << '\n';
  });
  checkpoint_save(state, (out / "pretrain.ckpt").string());

  const auto scores = score(state.policy, suites, cfg, state.seed, "all");
  auto report = score_json(scores, cfg, state.seed);
  report["pretrain_steps"] = cfg.pretrain_steps;
  report["train_prompts"] = suites.train.size();
  write_file(out / "pretrain_report.json", report.dump(2) + "\n");
  print_scores(scores, cfg, state.seed);
  return 0;
}

int cmd_train(const Common& c) {
  const TrainConfig cfg = resolve(c);
  ensure_dir(c.out);
  const fs::path out(c.out);
  write_file(out / "config.ini", render_config(cfg));
  const TaskSuites suites = make_suites(cfg.tasks);

  RunState state;
  if (!c.ckpt.empty()) {
    state = load_state(c.ckpt);
    check_dims(state, cfg);
    state.seed = cfg.seed;
  } else {
    state.seed = cfg.seed;
    state.policy = pretrain_policy(cfg, suites);
  }

  fs::create_directories(out / "checkpoints");
  std::ofstream metrics(out / "metrics.jsonl", std::ios::binary | std::ios::trunc);
  RunHooks hooks;
  hooks.log = &metrics;
  hooks.on_record = [&](const MetricsRecord& r) {
    std::cerr << "step " << r.step;
    if (r.mean_base_reward) std::cerr << " reward " << *r.mean_base_reward;
    if (r.pass1_eval_base) std::cerr << " pass1_base " << *r.pass1_eval_base;
    if (r.pass1_eval_perturbed) std::cerr << " pass1_perturbed " << *r.pass1_eval_perturbed;
    std::cerr << '\n';
  };
  hooks.on_checkpoint = [&](const RunState& s) {
    std::ostringstream name;
    name << "step_" << std::setw(6) << std::setfill('0') << s.step << ".ckpt";
    checkpoint_save(s, (out / "checkpoints" / name.str()).string());
  };
  run(state, cfg, suites, hooks);
  metrics.flush();
  checkpoint_save(state, (out / "final.ckpt").string());
  return 0;
}

int cmd_eval(const Common& c, const std::string& suite, std::optional<int> n) {
  std::vector<std::string> extra;
  if (n) extra.push_back("eval.eval_samples_per_prompt=" + std::to_string(*n));
  const TrainConfig cfg = resolve(c, extra);
  const RunState state = load_state(c.ckpt);
  check_dims(state, cfg);
  const std::uint64_t seed = c.seed ? *c.seed : state.seed;
  const TaskSuites suites = make_suites(cfg.tasks);
  const auto scores = score(state.policy, suites, cfg, seed, suite);
  print_scores(scores, cfg, seed);
  if (!c.out.empty()) write_file(c.out, score_json(scores, cfg, seed).dump(2) + "\n");
  return 0;
}

int cmd_export(const Common& c, int steps) {
  const TrainConfig cfg = resolve(c);
  RunState state = load_state(c.ckpt);
  check_dims(state, cfg);
  if (c.seed) state.seed = *c.seed;
  if (c.out.empty()) throw std::runtime_error("--out is required");
  const TaskSuites suites = make_suites(cfg.tasks);
  const auto rows = sample_embeddings(state, cfg, suites, steps);

  std::ofstream f(c.out, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + c.out);
  f << "step,group_id,rollout_id,reward";
  for (int k = 0; k < cfg.contrastive.d; ++k) f << ",e_" << k;
  f << '\n' << std::setprecision(17);
  for (const auto& r : rows) {
    f << r.step << ',' << r.group_id << ',' << r.rollout_id << ',' << r.reward;
    for (double v : r.embedding) f << ',' << v;
    f << '\n';
  }
  if (!f) throw std::runtime_error("failed writing " + c.out);
  std::cout << rows.size() << " rows written to " << c.out << '\n';
  return 0;
}

int cmd_selfcheck(int seeds, bool perturb) {
  SelfcheckOptions opts;
  opts.gradient_seeds = seeds;
  opts.perturb_backward = perturb;
  const auto results = run_selfcheck(opts);
  print_report(std::cout, results);
  for (const auto& r : results)
    if (!r.passed) return kExitSelfcheck;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CLIPO reinforcement learning lab"};
  app.require_subcommand(1);

  Common pre, train, ev, ex, sc;
  std::optional<int> pre_steps, eval_n;
  std::string tasks_path, suite = "all";
  int export_steps = 1, seeds = 50;
  bool perturb = false;

  auto* p = app.add_subcommand("pretrain", "supervised warm start");
  add_common(p, pre, false, true);
  p->add_option("--steps", pre_steps, "pretraining steps (run.pretrain_steps)");
  p->add_option("--tasks", tasks_path, "line-delimited task dump to train on");

  auto* t = app.add_subcommand("train", "RL run with periodic evaluation");
  add_common(t, train, true, true);

  auto* e = app.add_subcommand("eval", "pass@1 per suite");
  add_common(e, ev, true, true);
  e->add_option("--suite", suite, "base, perturbed1, perturbed2 or all")
      ->check(CLI::IsMember({"base", "perturbed1", "perturbed2", "all"}));
  e->add_option("--n", eval_n, "samples per prompt");

  auto* x = app.add_subcommand("export-embeddings", "head embeddings of sampled groups as CSV");
  add_common(x, ex, true, true);
  x->add_option("--steps", export_steps, "steps worth of groups")->check(CLI::NonNegativeNumber);

  auto* s = app.add_subcommand("selfcheck", "gradient, identity and equivalence checks");
  s->add_option("--seeds", seeds, "seeds per gradient check")->check(CLI::PositiveNumber);
  s->add_flag("--perturb-backward", perturb)->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int rc = app.exit(err);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    if (*p) return cmd_pretrain(pre, pre_steps, tasks_path);
    if (*t) return cmd_train(train);
    if (*e) return cmd_eval(ev, suite, eval_n);
    if (*x) return cmd_export(ex, export_steps);
    if (*s) return cmd_selfcheck(seeds, perturb);
  } catch (const ConfigError& err) {
    std::cerr << "config error:\n" << err.what() << '\n';
    return kExitConfig;
  } catch (const NumericError& err) {
    std::cerr << "numeric failure: " << err.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 1;
  }
  return 0;
}
