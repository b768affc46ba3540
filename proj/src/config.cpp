#include "clipo/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "clipo/error.hpp"

namespace clipo {

namespace {

struct Key {
  std::string section;
  std::string name;
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;

  std::string full() const { return section + "." + name; }
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& text) {
  T v{};
  const char* first = text.data();
  const char* last = first + text.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last || text.empty())
    throw ConfigError("'" + text + "' is not a valid " +
                      (std::is_floating_point_v<T> ? "number" : "integer"));
  return v;
}

bool parse_bool(const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError("'" + text + "' is not a boolean (true/false)");
}

template <typename T>
std::string format_number(T v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

template <typename T>
using Access = T& (*)(TrainConfig&);

template <typename T>
Key number(const char* section, const char* name, Access<T> acc) {
  return {section, name, [acc](TrainConfig& c, const std::string& v) { acc(c) = parse_number<T>(v); },
          [acc](const TrainConfig& c) { return format_number(acc(const_cast<TrainConfig&>(c))); }};
}

Key boolean(const char* section, const char* name, Access<bool> acc) {
  return {section, name, [acc](TrainConfig& c, const std::string& v) { acc(c) = parse_bool(v); },
          [acc](const TrainConfig& c) {
            return std::string(acc(const_cast<TrainConfig&>(c)) ? "true" : "false");
          }};
}

const std::vector<Key>& registry() {
  static const std::vector<Key> keys = [] {
    std::vector<Key> k;
    k.push_back({"method", "method",
                 [](TrainConfig& c, const std::string& v) { c.surrogate.method = parse_method(v); },
                 [](const TrainConfig& c) { return to_string(c.surrogate.method); }});
    k.push_back(number<double>("method", "eps_low", [](TrainConfig& c) -> double& { return c.surrogate.eps_low; }));
    k.push_back(number<double>("method", "eps_high", [](TrainConfig& c) -> double& { return c.surrogate.eps_high; }));
    k.push_back(number<double>("method", "kl_coef", [](TrainConfig& c) -> double& { return c.surrogate.kl_coef; }));
    k.push_back({"method", "agg_mode",
                 [](TrainConfig& c, const std::string& v) { c.surrogate.agg_mode = parse_agg_mode(v); },
                 [](const TrainConfig& c) { return to_string(c.surrogate.agg_mode); }});
    k.push_back(boolean("method", "dynamic_sampling", [](TrainConfig& c) -> bool& { return c.surrogate.dynamic_sampling; }));
    k.push_back(number<double>("method", "std_guard", [](TrainConfig& c) -> double& { return c.surrogate.std_guard; }));
    k.push_back(boolean("method", "pessimistic", [](TrainConfig& c) -> bool& { return c.surrogate.pessimistic; }));
    k.push_back(number<double>("method", "policy_lr", [](TrainConfig& c) -> double& { return c.policy_lr; }));
    k.push_back(number<double>("method", "policy_weight_decay", [](TrainConfig& c) -> double& { return c.policy_weight_decay; }));
    k.push_back(number<double>("method", "max_grad_norm", [](TrainConfig& c) -> double& { return c.max_grad_norm; }));

    k.push_back(boolean("contrastive", "contrastive_enabled", [](TrainConfig& c) -> bool& { return c.contrastive_enabled; }));
    k.push_back(number<double>("contrastive", "tau", [](TrainConfig& c) -> double& { return c.contrastive.tau; }));
    k.push_back(number<double>("contrastive", "lambda", [](TrainConfig& c) -> double& { return c.contrastive.lambda; }));
    k.push_back({"contrastive", "loss_kind",
                 [](TrainConfig& c, const std::string& v) { c.contrastive.loss_kind = parse_loss_kind(v); },
                 [](const TrainConfig& c) { return to_string(c.contrastive.loss_kind); }});
    k.push_back(number<double>("contrastive", "clip_floor", [](TrainConfig& c) -> double& { return c.contrastive.clip_floor; }));
    k.push_back(number<int>("contrastive", "d", [](TrainConfig& c) -> int& { return c.contrastive.d; }));
    k.push_back(boolean("contrastive", "exclude_self", [](TrainConfig& c) -> bool& { return c.contrastive.exclude_self; }));
    k.push_back(number<double>("contrastive", "head_lr", [](TrainConfig& c) -> double& { return c.head_lr; }));
    k.push_back(number<double>("contrastive", "head_weight_decay", [](TrainConfig& c) -> double& { return c.head_weight_decay; }));
    k.push_back(boolean("contrastive", "fixed_head", [](TrainConfig& c) -> bool& { return c.fixed_head; }));
    k.push_back(number<int>("contrastive", "head_warmup_steps", [](TrainConfig& c) -> int& { return c.head_warmup_steps; }));
    k.push_back(boolean("contrastive", "backprop_into_policy", [](TrainConfig& c) -> bool& { return c.backprop_into_policy; }));
    k.push_back(boolean("contrastive", "warmup_updates_policy", [](TrainConfig& c) -> bool& { return c.warmup_updates_policy; }));

    k.push_back(number<int>("sampling", "group_size", [](TrainConfig& c) -> int& { return c.sampling.group_size; }));
    k.push_back(number<double>("sampling", "temperature", [](TrainConfig& c) -> double& { return c.sampling.temperature; }));
    k.push_back(number<double>("sampling", "top_p", [](TrainConfig& c) -> double& { return c.sampling.top_p; }));
    k.push_back(number<int>("sampling", "max_response_len", [](TrainConfig& c) -> int& { return c.sampling.max_response_len; }));

    k.push_back(number<int>("tasks", "n_operands", [](TrainConfig& c) -> int& { return c.tasks.n_operands; }));
    k.push_back(number<int>("tasks", "operand_max", [](TrainConfig& c) -> int& { return c.tasks.operand_max; }));
    k.push_back(number<int>("tasks", "modulus", [](TrainConfig& c) -> int& { return c.tasks.modulus; }));
    k.push_back(number<int>("tasks", "perturbed1_operand_max", [](TrainConfig& c) -> int& { return c.tasks.perturbed1_operand_max; }));
    k.push_back(number<int>("tasks", "perturbed2_distractor_clauses", [](TrainConfig& c) -> int& { return c.tasks.perturbed2_distractor_clauses; }));
    k.push_back(number<int>("tasks", "n_train", [](TrainConfig& c) -> int& { return c.tasks.n_train; }));
    k.push_back(number<int>("tasks", "n_eval", [](TrainConfig& c) -> int& { return c.tasks.n_eval; }));
    k.push_back(number<std::uint64_t>("tasks", "task_seed", [](TrainConfig& c) -> std::uint64_t& { return c.tasks.task_seed; }));

    k.push_back(number<int>("eval", "eval_every", [](TrainConfig& c) -> int& { return c.eval.eval_every; }));
    k.push_back(number<int>("eval", "eval_samples_per_prompt", [](TrainConfig& c) -> int& { return c.eval.samples_per_prompt; }));
    k.push_back(number<double>("eval", "eval_temperature", [](TrainConfig& c) -> double& { return c.eval.temperature; }));
    k.push_back(number<double>("eval", "eval_top_p", [](TrainConfig& c) -> double& { return c.eval.top_p; }));

    k.push_back(number<std::uint64_t>("run", "seed", [](TrainConfig& c) -> std::uint64_t& { return c.seed; }));
    k.push_back(number<int>("run", "total_steps", [](TrainConfig& c) -> int& { return c.total_steps; }));
    k.push_back(number<int>("run", "prompts_per_step", [](TrainConfig& c) -> int& { return c.prompts_per_step; }));
    k.push_back(number<int>("run", "checkpoint_every", [](TrainConfig& c) -> int& { return c.checkpoint_every; }));
    k.push_back(boolean("run", "deterministic", [](TrainConfig& c) -> bool& { return c.deterministic; }));
    k.push_back(number<int>("run", "d_model", [](TrainConfig& c) -> int& { return c.dims.d_model; }));
    k.push_back(number<int>("run", "layers", [](TrainConfig& c) -> int& { return c.dims.layers; }));
    k.push_back(number<int>("run", "heads", [](TrainConfig& c) -> int& { return c.dims.heads; }));
    k.push_back(number<int>("run", "ff_mult", [](TrainConfig& c) -> int& { return c.dims.ff_mult; }));
    k.push_back(number<int>("run", "max_len", [](TrainConfig& c) -> int& { return c.dims.max_len; }));
    k.push_back(number<int>("run", "pretrain_steps", [](TrainConfig& c) -> int& { return c.pretrain_steps; }));
    k.push_back(number<double>("run", "pretrain_lr", [](TrainConfig& c) -> double& { return c.pretrain_lr; }));
    k.push_back(number<int>("run", "pretrain_batch", [](TrainConfig& c) -> int& { return c.pretrain_batch; }));
    k.push_back(number<double>("run", "pretrain_first_step_frac", [](TrainConfig& c) -> double& { return c.pretrain_first_step_frac; }));
    k.push_back(number<double>("run", "pretrain_direct_frac", [](TrainConfig& c) -> double& { return c.pretrain_direct_frac; }));
    return k;
  }();
  return keys;
}

const std::set<std::string>& sections() {
  static const std::set<std::string> s = {"method", "contrastive", "sampling", "tasks", "eval", "run"};
  return s;
}

[[noreturn]] void raise(const std::vector<std::string>& errors) {
  std::string msg;
  for (const auto& e : errors) msg += (msg.empty() ? "" : "\n") + e;
  throw ConfigError(msg);
}

// section.key -> raw value, in first-seen order of the file then overrides.
using Entries = std::map<std::string, std::string>;

void read_file_entries(const std::string& text, Entries& out, std::vector<std::string>& errors) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    errors.push_back("config line " + std::to_string(e.line()) + ": " + e.message());
    return;
  }
  for (const auto& [sec, body] : tree) {
    if (body.empty() && sections().count(sec) && body.data().empty()) continue;
    if (body.empty()) {
      errors.push_back("key '" + sec + "' is outside any section");
      continue;
    }
    if (!sections().count(sec)) {
      errors.push_back("unknown section [" + sec + "]");
      continue;
    }
    for (const auto& [key, node] : body) out[sec + "." + key] = trim(node.data());
  }
}

void read_overrides(const std::vector<std::string>& overrides, Entries& out,
                    std::vector<std::string>& errors) {
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    const std::string lhs = trim(o.substr(0, eq));
    const auto dot = lhs.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot == 0 || dot + 1 == lhs.size()) {
      errors.push_back("override '" + o + "' is not of the form section.key=value");
      continue;
    }
    out[lhs] = trim(o.substr(eq + 1));
  }
}

}  // namespace

TrainConfig parse_config(const std::string& text, const std::vector<std::string>& overrides) {
  std::vector<std::string> errors;
  Entries entries;
  read_file_entries(text, entries, errors);
  read_overrides(overrides, entries, errors);

  std::map<std::string, const Key*> by_name;
  for (const auto& k : registry()) by_name[k.full()] = &k;
  for (const auto& [name, value] : entries)
    if (!by_name.count(name)) errors.push_back("unknown key '" + name + "'");

  TrainConfig cfg;
  auto apply = [&](const std::string& name) {
    auto it = entries.find(name);
    if (it == entries.end()) return;
    try {
      by_name.at(name)->set(cfg, it->second);
    } catch (const ConfigError& e) {
      errors.push_back(name + ": " + e.what());
    }
  };
  // Method first so its defaults sit under any explicit key.
  apply("method.method");
  cfg.surrogate = SurrogateConfig::defaults(cfg.surrogate.method);
  apply("contrastive.loss_kind");
  if (cfg.contrastive.loss_kind == LossKind::kSoftNn) cfg.contrastive.lambda = 1.0;
  for (const auto& k : registry()) {
    const std::string name = k.full();
    if (name != "method.method" && name != "contrastive.loss_kind" && by_name.count(name)) apply(name);
  }
  if (!errors.empty()) raise(errors);
  const auto problems = cfg.problems();
  if (!problems.empty()) raise(problems);
  return cfg;
}

TrainConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  std::string text;
  if (!path.empty()) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot read config file " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    text = ss.str();
  }
  return parse_config(text, overrides);
}

std::string render_config(const TrainConfig& cfg) {
  std::ostringstream out;
  std::string current;
  for (const auto& k : registry()) {
    if (k.section != current) {
      if (!current.empty()) out << '\n';
      out << '[' << k.section << "]\n";
      current = k.section;
    }
    out << k.name << " = " << k.get(cfg) << '\n';
  }
  return out.str();
}

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& k : registry()) out.push_back(k.full());
  return out;
}

}  // namespace clipo
