#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "clipo/config.hpp"
#include "clipo/error.hpp"

using namespace clipo;

namespace {

std::string error_of(const std::string& text, const std::vector<std::string>& ov = {}) {
  try {
    parse_config(text, ov);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

bool has(const std::string& hay, const std::string& needle) { return hay.find(needle) != std::string::npos; }

}  // namespace

TEST_SUITE("config") {

TEST_CASE("empty text gives the defaults") {
  const auto c = parse_config("");
  CHECK(render_config(c) == render_config(TrainConfig{}));
  CHECK(c.surrogate.method == Method::kGrpo);
}

TEST_CASE("every unknown key is reported in one error") {
  const std::string msg = error_of("[method]\nbogus = 1\n[sampling]\ngroup_sz = 4\n[run]\nseed = 3\n",
                                   {"eval.nope=2"});
  CHECK(has(msg, "method.bogus"));
  CHECK(has(msg, "sampling.group_sz"));
  CHECK(has(msg, "eval.nope"));
  CHECK_FALSE(has(msg, "run.seed"));
}

TEST_CASE("bad values are collected alongside unknown keys") {
  const std::string msg = error_of("[sampling]\ngroup_size = many\n[contrastive]\ntau = -1\nextra = 0\n");
  CHECK(has(msg, "sampling.group_size"));
  CHECK(has(msg, "contrastive.extra"));
  CHECK(has(error_of("[run]\ndeterministic = maybe\n"), "boolean"));
  CHECK(has(error_of("[contrastive]\ntau = 0\n"), "contrastive"));
  CHECK(has(error_of("[method]\nmethod = ppo\n"), "method.method"));
}

TEST_CASE("structural problems") {
  CHECK(has(error_of("seed = 1\n[run]\n"), "outside any section"));
  CHECK(has(error_of("[optimizer]\nlr = 1\n"), "unknown section"));
  CHECK(has(error_of("", {"group_size=4"}), "section.key=value"));
  CHECK(has(error_of("", {"sampling.group_size"}), "section.key=value"));
}

TEST_CASE("overrides win over the file") {
  const auto c = parse_config("[sampling]\ngroup_size = 8\n[run]\nseed = 5\n", {"sampling.group_size=32"});
  CHECK(c.sampling.group_size == 32);
  CHECK(c.seed == 5);
  CHECK(has(render_config(c), "group_size = 32"));
}

TEST_CASE("render and parse round-trip") {
  TrainConfig c = parse_config("", {"method.method=gspo", "contrastive.tau=0.125", "run.seed=77",
                                    "contrastive.loss_kind=supcon", "eval.eval_top_p=0.9",
                                    "tasks.task_seed=18446744073709551615", "run.deterministic=true"});
  const std::string text = render_config(c);
  CHECK(render_config(parse_config(text)) == text);
  CHECK(has(text, "method = gspo"));
  CHECK(has(text, "task_seed = 18446744073709551615"));
}

TEST_CASE("config_keys follows the rendered order") {
  const auto keys = config_keys();
  const std::string text = render_config(TrainConfig{});
  std::size_t pos = 0;
  for (const auto& k : keys) {
    const std::string name = k.substr(k.find('.') + 1) + " = ";
    const auto at = text.find("\n" + name, pos);
    REQUIRE_MESSAGE(at != std::string::npos, k);
    pos = at;
  }
  CHECK(keys.front() == "method.method");
}

TEST_CASE("method defaults follow the resolved method") {
  const auto dapo = parse_config("[method]\nmethod = dapo\n");
  CHECK(dapo.surrogate.eps_high == doctest::Approx(0.28));
  CHECK(dapo.surrogate.dynamic_sampling);
  CHECK(dapo.surrogate.kl_coef == 0.0);
  const auto gspo = parse_config("", {"method.method=gspo"});
  CHECK(gspo.surrogate.eps_low == doctest::Approx(3e-4));
  CHECK(gspo.surrogate.agg_mode == AggMode::kSeqMeanTokenMean);
  // Explicit keys sit over the method defaults regardless of file order.
  const auto mixed = parse_config("[method]\neps_high = 0.5\nmethod = dapo\n");
  CHECK(mixed.surrogate.eps_high == 0.5);
  CHECK(mixed.surrogate.eps_low == doctest::Approx(0.2));
}

TEST_CASE("softnn defaults lambda to one") {
  CHECK(parse_config("[contrastive]\nloss_kind = softnn\n").contrastive.lambda == 1.0);
  CHECK(parse_config("[contrastive]\nlambda = 0.3\nloss_kind = softnn\n").contrastive.lambda == 0.3);
  CHECK(parse_config("[contrastive]\nloss_kind = supcon\n").contrastive.lambda ==
        TrainConfig{}.contrastive.lambda);
}

TEST_CASE("load_config reads files and reports missing ones") {
  const auto path = std::filesystem::temp_directory_path() / "clipo_test_config.ini";
  {
    std::ofstream f(path);
    f << "; comment\n[sampling]\ngroup_size = 4\n";
  }
  CHECK(load_config(path.string()).sampling.group_size == 4);
  CHECK(load_config(path.string(), {"sampling.group_size=6"}).sampling.group_size == 6);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_config(path.string()), ConfigError);
  CHECK(load_config("").sampling.group_size == TrainConfig{}.sampling.group_size);
}

}
