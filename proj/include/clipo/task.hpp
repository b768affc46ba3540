#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace clipo {

// Token ids of the task vocabulary. Content tokens come first, structural
// markers last.
namespace tok {
constexpr int kDigit0 = 0;  // digits occupy 0..9
constexpr int kPlus = 10;
constexpr int kMinus = 11;
constexpr int kTimes = 12;
constexpr int kMod = 13;
constexpr int kSep = 14;
constexpr int kPromptEnd = 15;
constexpr int kAnsOpen = 16;
constexpr int kAnsClose = 17;
constexpr int kEos = 18;
constexpr int kPad = 19;
constexpr int kVocabSize = 20;

constexpr bool is_digit(int t) { return t >= 0 && t <= 9; }
constexpr bool is_operator(int t) { return t == kPlus || t == kMinus || t == kTimes; }
constexpr bool is_marker(int t) { return t >= kPromptEnd; }
}  // namespace tok

struct Vocabulary {
  static constexpr int size() { return tok::kVocabSize; }
  static std::string_view name(int id);
  // Parses a name back into an id; -1 when unknown.
  static int id(std::string_view name);
  // FNV-1a over the ordered token names; stored in checkpoints.
  static std::uint64_t hash();
  static std::string render(std::span<const int> tokens);
};

struct TaskFamily {
  std::string label = "base";
  int n_operands = 3;
  int operand_max = 9;
  int modulus = 10;
  int distractor_clauses = 0;

  // Throws ContractError listing the first invalid field.
  void validate() const;
  bool operator==(const TaskFamily&) const = default;
};

struct TaskInstance {
  std::vector<int> prompt_tokens;  // ends with PROMPT_END
  std::int64_t answer = 0;         // in [0, modulus)
  std::string family;
  std::uint64_t seed = 0;
  // Worked solution: reduced intermediate values, then the answer span and EOS.
  std::vector<int> gold_response;

  bool operator==(const TaskInstance&) const = default;
};

// Deterministic per (family, seed). Multiplication binds tighter than + and -;
// every intermediate result is reduced modulo the family modulus.
TaskInstance generate(const TaskFamily& family, std::uint64_t seed);

// Integer between the last well-formed ANS_OPEN ... ANS_CLOSE pair. A span is
// well-formed when it holds one or more digits only and does not open inside
// another unclosed span.
std::optional<std::int64_t> extract_answer(std::span<const int> response);

// 1 iff the extracted answer equals the reduced gold answer.
int verify(const TaskInstance& instance, std::span<const int> response);

struct TaskSplit {
  std::vector<TaskInstance> train;
  std::vector<TaskInstance> eval;
};

// Prompt-disjoint train/eval sets. Throws std::runtime_error when the
// family cannot produce enough distinct prompts.
TaskSplit make_split(const TaskFamily& family, std::size_t n_train, std::size_t n_eval,
                     std::uint64_t seed);

// Distinct prompts drawn with fresh seeds, excluding prompts already in `avoid`.
std::vector<TaskInstance> make_eval_set(const TaskFamily& family, std::size_t n,
                                        std::uint64_t seed,
                                        std::span<const TaskInstance> avoid = {});

// Line-delimited task records {family, seed, prompt_token_ids, answer}.
std::string task_to_record(const TaskInstance& instance);
// Rebuilds the worked solution from the prompt; throws std::runtime_error on
// malformed records.
TaskInstance task_from_record(std::string_view line);

// Equivalent worked solutions: every reduction step, only the first one, or
// the bare answer span. All end with the answer span and EOS.
enum class SolutionStyle { kScratchpad, kFirstStep, kDirect };

std::vector<int> solution_tokens(const TaskInstance& instance, SolutionStyle style);

// Token spelling of a non-negative integer.
std::vector<int> digits_of(std::int64_t value);

}  // namespace clipo
