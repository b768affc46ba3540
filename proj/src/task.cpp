#include "clipo/task.hpp"

#include <array>
#include <cstdint>
#include <set>
#include <stdexcept>

#include "clipo/error.hpp"
#include "clipo/rng.hpp"
#include "json.hpp"

namespace clipo {

namespace {

constexpr std::array<std::string_view, tok::kVocabSize> kNames = {
    "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "+", "-", "*", "mod",
    ";", "<prompt_end>", "<ans>", "</ans>", "<eos>", "<pad>"};

std::int64_t reduce(std::int64_t v, std::int64_t m) {
  std::int64_t r = v % m;
  return r < 0 ? r + m : r;
}

std::int64_t apply(int op, std::int64_t a, std::int64_t b, std::int64_t m) {
  switch (op) {
    case tok::kPlus: return reduce(a + b, m);
    case tok::kMinus: return reduce(a - b, m);
    case tok::kTimes: return reduce(a * b, m);
  }
  throw ContractError("unknown operator token " + std::to_string(op));
}

// Collapses products left to right, then sums and differences left to right.
// Every intermediate value is appended to `steps`.
std::int64_t reduce_expression(std::vector<std::int64_t> vals, std::vector<int> ops,
                               std::int64_t modulus, std::vector<std::int64_t>& steps) {
  for (auto& v : vals) v = reduce(v, modulus);
  for (std::size_t i = 0; i < ops.size();) {
    if (ops[i] == tok::kTimes) {
      vals[i] = apply(tok::kTimes, vals[i], vals[i + 1], modulus);
      steps.push_back(vals[i]);
      vals.erase(vals.begin() + static_cast<std::ptrdiff_t>(i) + 1);
      ops.erase(ops.begin() + static_cast<std::ptrdiff_t>(i));
    } else {
      ++i;
    }
  }
  std::int64_t acc = vals[0];
  for (std::size_t i = 0; i < ops.size(); ++i) {
    acc = apply(ops[i], acc, vals[i + 1], modulus);
    steps.push_back(acc);
  }
  return acc;
}

std::vector<int> gold_response_for(const std::vector<std::int64_t>& steps, std::int64_t answer,
                                   std::size_t max_steps = SIZE_MAX) {
  std::vector<int> out;
  for (std::size_t k = 0; k < steps.size() && k < max_steps; ++k) {
    const std::int64_t s = steps[k];
    for (int d : digits_of(s)) out.push_back(d);
    out.push_back(tok::kSep);
  }
  out.push_back(tok::kAnsOpen);
  for (int d : digits_of(answer)) out.push_back(d);
  out.push_back(tok::kAnsClose);
  out.push_back(tok::kEos);
  return out;
}

std::uint64_t family_key(const TaskFamily& f) {
  std::uint64_t h = 1469598103934665603ULL;
  for (char c : f.label) h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ULL;
  for (int v : {f.n_operands, f.operand_max, f.modulus, f.distractor_clauses})
    h = mix64(h ^ static_cast<std::uint64_t>(v));
  return h;
}

struct ParsedPrompt {
  std::vector<std::int64_t> vals;
  std::vector<int> ops;
  std::int64_t modulus = 0;
};

// Reads "n op n op ... mod m [; clause]* <prompt_end>".
ParsedPrompt parse_prompt(std::span<const int> prompt) {
  ParsedPrompt p;
  std::size_t i = 0;
  auto read_number = [&]() {
    if (i >= prompt.size() || !tok::is_digit(prompt[i]))
      throw std::runtime_error("malformed prompt: expected a number at position " +
                               std::to_string(i));
    std::int64_t v = 0;
    while (i < prompt.size() && tok::is_digit(prompt[i])) v = v * 10 + prompt[i++];
    return v;
  };
  p.vals.push_back(read_number());
  while (i < prompt.size() && tok::is_operator(prompt[i])) {
    p.ops.push_back(prompt[i++]);
    p.vals.push_back(read_number());
  }
  if (i >= prompt.size() || prompt[i] != tok::kMod)
    throw std::runtime_error("malformed prompt: missing 'mod'");
  ++i;
  p.modulus = read_number();
  if (p.modulus < 2) throw std::runtime_error("malformed prompt: modulus below 2");
  if (prompt.empty() || prompt.back() != tok::kPromptEnd)
    throw std::runtime_error("malformed prompt: missing <prompt_end>");
  return p;
}

}  // namespace

std::string_view Vocabulary::name(int id) {
  if (id < 0 || id >= tok::kVocabSize) throw ContractError("token id out of range");
  return kNames[static_cast<std::size_t>(id)];
}

int Vocabulary::id(std::string_view name) {
  for (std::size_t i = 0; i < kNames.size(); ++i)
    if (kNames[i] == name) return static_cast<int>(i);
  return -1;
}

std::uint64_t Vocabulary::hash() {
  std::uint64_t h = 1469598103934665603ULL;
  for (auto n : kNames) {
    for (char c : n) h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ULL;
    h = (h ^ 0xffU) * 1099511628211ULL;
  }
  return h;
}

std::string Vocabulary::render(std::span<const int> tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += name(tokens[i]);
  }
  return out;
}

std::vector<int> digits_of(std::int64_t value) {
  if (value < 0) throw ContractError("digits_of: negative value");
  std::vector<int> out;
  do {
    out.insert(out.begin(), static_cast<int>(value % 10));
    value /= 10;
  } while (value > 0);
  return out;
}

void TaskFamily::validate() const {
  if (n_operands < 1) throw ContractError("task family " + label + ": n_operands must be >= 1");
  if (operand_max < 0) throw ContractError("task family " + label + ": operand_max must be >= 0");
  if (modulus < 2) throw ContractError("task family " + label + ": modulus must be >= 2");
  if (distractor_clauses < 0)
    throw ContractError("task family " + label + ": distractor_clauses must be >= 0");
}

TaskInstance generate(const TaskFamily& family, std::uint64_t seed) {
  family.validate();
  Rng rng(seed, {label(Stream::kTasks), family_key(family)});
  static constexpr std::array<int, 3> kOps = {tok::kPlus, tok::kMinus, tok::kTimes};

  std::vector<std::int64_t> vals;
  std::vector<int> ops;
  TaskInstance inst;
  inst.family = family.label;
  inst.seed = seed;
  auto& prompt = inst.prompt_tokens;
  for (int k = 0; k < family.n_operands; ++k) {
    if (k > 0) {
      ops.push_back(kOps[static_cast<std::size_t>(rng.uniform_int(0, 2))]);
      prompt.push_back(ops.back());
    }
    vals.push_back(rng.uniform_int(0, family.operand_max));
    for (int d : digits_of(vals.back())) prompt.push_back(d);
  }
  prompt.push_back(tok::kMod);
  for (int d : digits_of(family.modulus)) prompt.push_back(d);
  for (int c = 0; c < family.distractor_clauses; ++c) {
    prompt.push_back(tok::kSep);
    for (int d : digits_of(rng.uniform_int(0, family.operand_max))) prompt.push_back(d);
    prompt.push_back(kOps[static_cast<std::size_t>(rng.uniform_int(0, 2))]);
    for (int d : digits_of(rng.uniform_int(0, family.operand_max))) prompt.push_back(d);
  }
  prompt.push_back(tok::kPromptEnd);

  std::vector<std::int64_t> steps;
  inst.answer = reduce_expression(vals, ops, family.modulus, steps);
  inst.gold_response = gold_response_for(steps, inst.answer);
  return inst;
}

std::optional<std::int64_t> extract_answer(std::span<const int> response) {
  enum class State { kClosed, kOpen, kPoisoned };
  State state = State::kClosed;
  bool content_ok = true;
  std::size_t n_digits = 0;
  std::int64_t value = 0;
  std::optional<std::int64_t> last;
  for (int t : response) {
    if (t == tok::kAnsOpen) {
      if (state == State::kClosed) {
        state = State::kOpen;
        content_ok = true;
        n_digits = 0;
        value = 0;
      } else {
        state = State::kPoisoned;  // nested
      }
    } else if (t == tok::kAnsClose) {
      if (state == State::kOpen && content_ok && n_digits > 0) last = value;
      state = State::kClosed;
    } else if (state == State::kOpen) {
      if (tok::is_digit(t) && n_digits < 18) {
        value = value * 10 + t;
        ++n_digits;
      } else {
        content_ok = false;
      }
    }
  }
  return last;
}

int verify(const TaskInstance& instance, std::span<const int> response) {
  const auto a = extract_answer(response);
  return (a.has_value() && *a == instance.answer) ? 1 : 0;
}

std::vector<TaskInstance> make_eval_set(const TaskFamily& family, std::size_t n,
                                        std::uint64_t seed, std::span<const TaskInstance> avoid) {
  std::set<std::vector<int>> seen;
  for (const auto& a : avoid) seen.insert(a.prompt_tokens);
  std::vector<TaskInstance> out;
  const std::size_t max_draws = 64 * (n + avoid.size()) + 1024;
  for (std::size_t draw = 0; out.size() < n; ++draw) {
    if (draw >= max_draws) {
      throw std::runtime_error("task family " + family.label + ": only " +
                               std::to_string(out.size()) + " distinct prompts after " +
                               std::to_string(draw) + " draws (needed " + std::to_string(n) + ")");
    }
    TaskInstance inst = generate(family, derive_seed(seed, {draw}));
    if (seen.insert(inst.prompt_tokens).second) out.push_back(std::move(inst));
  }
  return out;
}

TaskSplit make_split(const TaskFamily& family, std::size_t n_train, std::size_t n_eval,
                     std::uint64_t seed) {
  TaskSplit split;
  split.train = make_eval_set(family, n_train, derive_seed(seed, {0}));
  split.eval = make_eval_set(family, n_eval, derive_seed(seed, {1}), split.train);
  return split;
}

std::vector<int> solution_tokens(const TaskInstance& instance, SolutionStyle style) {
  const ParsedPrompt p = parse_prompt(instance.prompt_tokens);
  std::vector<std::int64_t> steps;
  const std::int64_t answer = reduce_expression(p.vals, p.ops, p.modulus, steps);
  switch (style) {
    case SolutionStyle::kScratchpad: return gold_response_for(steps, answer);
    case SolutionStyle::kFirstStep: return gold_response_for(steps, answer, 1);
    case SolutionStyle::kDirect: return gold_response_for(steps, answer, 0);
  }
  throw ContractError("unknown solution style");
}

std::string task_to_record(const TaskInstance& instance) {
  nlohmann::ordered_json j;
  j["family"] = instance.family;
  j["seed"] = instance.seed;
  j["prompt_token_ids"] = instance.prompt_tokens;
  j["answer"] = instance.answer;
  return j.dump();
}

TaskInstance task_from_record(std::string_view line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("task record: ") + e.what());
  }
  for (const char* key : {"family", "seed", "prompt_token_ids", "answer"})
    if (!j.contains(key)) throw std::runtime_error(std::string("task record: missing ") + key);
  TaskInstance inst;
  inst.family = j.at("family").get<std::string>();
  inst.seed = j.at("seed").get<std::uint64_t>();
  inst.prompt_tokens = j.at("prompt_token_ids").get<std::vector<int>>();
  inst.answer = j.at("answer").get<std::int64_t>();
  const ParsedPrompt p = parse_prompt(inst.prompt_tokens);
  std::vector<std::int64_t> steps;
  const std::int64_t answer = reduce_expression(p.vals, p.ops, p.modulus, steps);
  if (answer != inst.answer)
    throw std::runtime_error("task record: stored answer " + std::to_string(inst.answer) +
                             " disagrees with prompt value " + std::to_string(answer));
  inst.gold_response = gold_response_for(steps, answer);
  return inst;
}

}  // namespace clipo
