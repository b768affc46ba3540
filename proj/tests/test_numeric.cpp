#include <doctest.h>

#include <cmath>
#include <limits>

#include "clipo/autodiff.hpp"
#include "clipo/error.hpp"
#include "clipo/optim.hpp"
#include "clipo/rng.hpp"
#include "oracles.hpp"

using namespace clipo;

TEST_SUITE("numeric") {

TEST_CASE("matmul small cases and triple-loop agreement") {
  Tape t;
  Var a = t.constant(Tensor::matrix({{1, 0}, {0, 1}}));
  Var b = t.constant(Tensor::matrix({{3}, {4}}));
  Var c = ops::matmul(a, b);
  CHECK(c.shape() == Shape{2, 1});
  CHECK(c.value()[0] == 3.0);
  CHECK(c.value()[1] == 4.0);
  CHECK(ops::matmul(t.constant(Tensor::matrix({{2}})), t.constant(Tensor::matrix({{5}}))).item() == 10.0);

  for (std::uint64_t s = 0; s < 20; ++s) {
    Rng rng(100, {s});
    Tensor A = oracle::random({3, 4}, rng), B = oracle::random({4, 2}, rng);
    const Tensor& C = ops::matmul(t.constant(A), t.constant(B)).value();
    const auto ref = oracle::matmul(A.values(), B.values(), 3, 4, 2);
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(C[i] == doctest::Approx(ref[i]).epsilon(1e-12));
  }
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tape t;
  try {
    ops::matmul(t.constant(Tensor({2, 3})), t.constant(Tensor({2, 3})));
    FAIL("expected a DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
  }
}

TEST_CASE("log_softmax") {
  Tape t;
  const Tensor& a = ops::log_softmax(t.constant(Tensor::vector({0, 0}))).value();
  CHECK(a[0] == doctest::Approx(-std::log(2.0)).epsilon(1e-15));
  CHECK(a[1] == doctest::Approx(-std::log(2.0)).epsilon(1e-15));

  const Tensor& b = ops::log_softmax(t.constant(Tensor::vector({1000, 0}))).value();
  CHECK(std::abs(b[0]) < 1e-12);
  CHECK(b[1] == doctest::Approx(-1000.0));

  const Tensor& c = ops::log_softmax(t.constant(Tensor::vector({1, 2, 3}))).value();
  const auto ref = oracle::log_softmax({1, 2, 3});
  for (int i = 0; i < 3; ++i) CHECK(std::abs(c[i] - static_cast<double>(ref[i])) < 1e-12);

  CHECK_THROWS_AS(ops::log_softmax(t.constant(Tensor::vector({1, NAN}))), NumericError);
  CHECK_THROWS_AS(ops::log_softmax(t.constant(Tensor::vector({1, INFINITY}))), NumericError);
}

TEST_CASE("log_softmax rows exponentiate to one") {
  Tape t;
  for (std::uint64_t s = 0; s < 200; ++s) {
    Rng rng(101, {s});
    Tensor X = oracle::random({3, 7}, rng, 30.0);
    const Tensor& L = ops::log_softmax(t.constant(X)).value();
    for (std::size_t r = 0; r < 3; ++r) {
      double z = 0.0;
      for (std::size_t c = 0; c < 7; ++c) z += std::exp(L.at(r, c));
      CHECK(std::abs(z - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("mean_axis") {
  Tape t;
  const Tensor& a = ops::mean_axis(t.constant(Tensor::matrix({{1, 1}, {3, 3}}))).value();
  CHECK(a.values() == std::vector<double>{2, 2});
  const Tensor& b = ops::mean_axis(t.constant(Tensor::matrix({{5, 6}}))).value();
  CHECK(b.values() == std::vector<double>{5, 6});

  Rng rng(102);
  Tensor X = oracle::random({7, 3}, rng);
  const Tensor& m = ops::mean_axis(t.constant(X)).value();
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0;
    for (std::size_t r = 0; r < 7; ++r) s += X.at(r, c);
    CHECK(std::abs(m[c] - s / 7) < 1e-12);
  }
  CHECK_THROWS(ops::mean_axis(t.constant(Tensor({0, 3}))));
}

TEST_CASE("l2_normalize") {
  Tape t;
  const Tensor& a = ops::l2_normalize(t.constant(Tensor::vector({3, 4}))).value();
  CHECK(a[0] == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(a[1] == doctest::Approx(0.8).epsilon(1e-15));

  Rng rng(103);
  for (int s = 0; s < 100; ++s) {
    Tensor x = oracle::random({5}, rng);
    const Tensor& u = ops::l2_normalize(t.constant(x)).value();
    double n = 0, nx = 0;
    for (std::size_t i = 0; i < 5; ++i) {
      n += u[i] * u[i];
      nx += x[i] * x[i];
    }
    CHECK(std::abs(std::sqrt(n) - 1.0) < 1e-12);
    for (std::size_t i = 0; i < 5; ++i) CHECK(std::abs(u[i] - x[i] / std::sqrt(nx)) < 1e-12);
    const Tensor& uu = ops::l2_normalize(t.constant(u)).value();
    for (std::size_t i = 0; i < 5; ++i) CHECK(std::abs(uu[i] - u[i]) < 1e-12);
  }
  CHECK_THROWS_AS(ops::l2_normalize(t.constant(Tensor::vector({1e-14, 0}))), NumericError);
}

TEST_CASE("backward basics") {
  Tensor x = Tensor::vector({1.5, -2.0, 0.25});
  x.set_requires_grad(true);
  {
    Tape t;
    t.backward(ops::sum(t.leaf(x)));
  }
  for (double g : x.grad()) CHECK(g == 1.0);

  x.zero_grad();
  {
    Tape t;
    Var v = t.leaf(x);
    t.backward(ops::dot(v, v));
  }
  for (std::size_t i = 0; i < 3; ++i) CHECK(x.grad()[i] == doctest::Approx(2 * x[i]));

  // Fan-out: y = sum(x * x) + sum(3 x) uses x on three edges.
  x.zero_grad();
  {
    Tape t;
    Var v = t.leaf(x);
    t.backward(ops::add(ops::sum(ops::mul(v, v)), ops::sum(ops::scale(v, 3.0))));
  }
  for (std::size_t i = 0; i < 3; ++i) CHECK(x.grad()[i] == doctest::Approx(2 * x[i] + 3));

  Tape t;
  CHECK_THROWS_AS(t.backward(t.leaf(x)), ContractError);
}

TEST_CASE("finite_diff_grad") {
  const Tensor x = Tensor::vector({3.0});
  const Tensor g = finite_diff_grad([](const Tensor& v) { return v[0] * v[0]; }, x, 1e-6);
  CHECK(std::abs(g[0] - 6.0) < 1e-9);
  Rng rng(104);
  const Tensor y = oracle::random({6}, rng);
  const Tensor gs = finite_diff_grad(
      [](const Tensor& v) {
        double s = 0;
        for (double e : v.values()) s += e;
        return s;
      },
      y);
  for (double e : gs.values()) CHECK(std::abs(e - 1.0) < 1e-8);
  CHECK_THROWS_AS(finite_diff_grad([](const Tensor&) { return 0.0; }, x, 0.0), ContractError);
}

// Every differentiable primitive against central differences on 50 seeds.
TEST_CASE("primitive gradients match finite differences") {
  struct Case {
    const char* name;
    Shape shape;
    std::function<Var(Var, Rng&)> f;
  };
  // Random projection weights turn any output into a scalar.
  auto project = [](Var y, Rng& rng) {
    Tensor w = oracle::random(y.shape(), rng);
    return ops::sum(ops::mul(y, y.tape->constant(std::move(w))));
  };
  auto positive = [](Var x) { return ops::add_scalar(ops::exp(x), 0.5); };
  const std::vector<int> ids = {2, 0, 3, 3};
  const std::vector<Case> cases = {
      {"matmul left", {3, 4}, [](Var x, Rng& r) { return ops::matmul(x, x.tape->constant(oracle::random({4, 2}, r))); }},
      {"matmul right", {4, 2}, [](Var x, Rng& r) { return ops::matmul(x.tape->constant(oracle::random({3, 4}, r)), x); }},
      {"matmul both", {3, 3}, [](Var x, Rng&) { return ops::matmul(x, x); }},
      {"transpose", {3, 2}, [](Var x, Rng&) { return ops::transpose(x); }},
      {"add/sub/mul", {5}, [](Var x, Rng& r) {
         Var c = x.tape->constant(oracle::random({5}, r));
         return ops::mul(ops::sub(x, c), ops::add(x, c));
       }},
      {"scale/add_scalar/neg", {4}, [](Var x, Rng&) { return ops::neg(ops::add_scalar(ops::scale(x, 2.5), 1.0)); }},
      {"add_row", {3, 4}, [](Var x, Rng&) { return ops::add_row(x, ops::row(x, 1)); }},
      {"exp", {6}, [](Var x, Rng&) { return ops::exp(x); }},
      {"log", {6}, [positive](Var x, Rng&) { return ops::log(positive(x)); }},
      {"clamp", {8}, [](Var x, Rng&) { return ops::clamp(x, -0.7, 0.9); }},
      {"minimum", {8}, [](Var x, Rng& r) { return ops::minimum(x, x.tape->constant(oracle::random({8}, r))); }},
      {"gelu", {8}, [](Var x, Rng&) { return ops::gelu(x); }},
      {"gather_rows", {4, 3}, [ids](Var x, Rng&) { return ops::gather_rows(x, ids); }},
      {"pick matrix", {4, 5}, [ids](Var x, Rng&) { return ops::pick(x, ids); }},
      {"pick vector", {5}, [ids](Var x, Rng&) { return ops::pick(x, ids); }},
      {"select", {5}, [](Var x, Rng&) { return ops::scale(ops::select(x, 3), 2.0); }},
      {"slice_rows", {5, 2}, [](Var x, Rng&) { return ops::slice_rows(x, 1, 3); }},
      {"stack_rows", {3, 2}, [](Var x, Rng&) {
         std::vector<Var> rows = {ops::row(x, 2), ops::row(x, 0), ops::row(x, 2)};
         return ops::stack_rows(rows);
       }},
      {"concat", {4}, [](Var x, Rng&) {
         std::vector<Var> parts = {x, ops::exp(x)};
         return ops::concat(parts);
       }},
      {"sum/mean", {5}, [](Var x, Rng&) { return ops::mul(ops::sum(x), ops::mean(ops::mul(x, x))); }},
      {"mean_axis", {4, 3}, [](Var x, Rng&) { return ops::mean_axis(x); }},
      {"dot", {5}, [](Var x, Rng&) { return ops::dot(x, ops::exp(x)); }},
      {"matvec", {3, 4}, [](Var x, Rng& r) { return ops::matvec(x, x.tape->constant(oracle::random({4}, r))); }},
      {"log_softmax", {3, 5}, [](Var x, Rng&) { return ops::log_softmax(ops::scale(x, 3.0)); }},
      {"logsumexp", {6}, [](Var x, Rng&) { return ops::logsumexp(ops::scale(x, 4.0)); }},
      {"l2_normalize", {5}, [](Var x, Rng&) { return ops::l2_normalize(x); }},
      {"layer_norm", {3, 6}, [](Var x, Rng& r) {
         Tape& t = *x.tape;
         return ops::layer_norm(x, t.constant(oracle::random({6}, r)), t.constant(oracle::random({6}, r)));
       }},
      {"causal_attention", {4, 6}, [](Var x, Rng& r) {
         Tape& t = *x.tape;
         Var q = ops::matmul(x, t.constant(oracle::random({6, 6}, r, 0.5)));
         Var k = ops::matmul(x, t.constant(oracle::random({6, 6}, r, 0.5)));
         return ops::causal_attention(q, k, x, 2);
       }},
  };
  for (const auto& c : cases) {
    double worst = 0.0;
    for (std::uint64_t s = 0; s < 50; ++s) {
      Rng xr(105, {s});
      Tensor x = oracle::random(c.shape, xr);
      const std::uint64_t fseed = derive_seed(106, {s});
      worst = std::max(worst, oracle::grad_check(
                                  [&](Var v) {
                                    Rng r(fseed);
                                    return project(c.f(v, r), r);
                                  },
                                  x));
    }
    INFO(c.name);
    CHECK(worst < 1e-5);
  }
}

TEST_CASE("adamw closed forms") {
  SUBCASE("zero gradient without decay leaves params unchanged") {
    Tensor p = Tensor::vector({1.0, -2.0});
    p.set_requires_grad(true);
    p.ensure_grad();
    AdamW opt({0.1, 0.0, 0.9, 0.999, 1e-8});
    opt.step({&p});
    CHECK(p.values() == std::vector<double>{1.0, -2.0});
  }
  SUBCASE("single step with beta 0") {
    Tensor p = Tensor::vector({0.5});
    p.set_requires_grad(true);
    p.ensure_grad()[0] = 1.0;
    AdamW opt({0.1, 0.0, 0.0, 0.0, 1e-8});
    opt.step({&p});
    CHECK(std::abs(p[0] - (0.5 - 0.1 * 1.0 / (1.0 + 1e-8))) < 1e-15);
    CHECK(opt.steps() == 1);
  }
  SUBCASE("pure decay") {
    Tensor p = Tensor::vector({2.0, -4.0});
    p.set_requires_grad(true);
    p.ensure_grad();
    AdamW opt({0.1, 0.01, 0.9, 0.999, 1e-8});
    opt.step({&p});
    CHECK(p[0] == doctest::Approx(2.0 * (1 - 0.1 * 0.01)).epsilon(1e-14));
    CHECK(p[1] == doctest::Approx(-4.0 * (1 - 0.1 * 0.01)).epsilon(1e-14));
  }
  SUBCASE("two steps against a scalar re-derivation") {
    const double lr = 0.01, wd = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    Tensor p = Tensor::vector({0.3});
    p.set_requires_grad(true);
    AdamW opt({lr, wd, b1, b2, eps});
    double theta = 0.3, m = 0, v = 0;
    const double grads[] = {0.7, -0.2};
    for (int k = 1; k <= 2; ++k) {
      p.ensure_grad()[0] = grads[k - 1];
      opt.step({&p});
      m = b1 * m + (1 - b1) * grads[k - 1];
      v = b2 * v + (1 - b2) * grads[k - 1] * grads[k - 1];
      const double mh = m / (1 - std::pow(b1, k)), vh = v / (1 - std::pow(b2, k));
      theta -= lr * (mh / (std::sqrt(vh) + eps) + wd * theta);
    }
    CHECK(p[0] == doctest::Approx(theta).epsilon(1e-14));
    CHECK(opt.steps() == 2);
  }
  SUBCASE("missing gradient is a contract error") {
    Tensor p = Tensor::vector({1.0});
    AdamW opt;
    CHECK_THROWS_AS(opt.step({&p}), ContractError);
  }
}

TEST_CASE("clip_grad_norm") {
  Tensor a = Tensor::vector({3.0}), b = Tensor::vector({4.0});
  a.ensure_grad()[0] = 3.0;
  b.ensure_grad()[0] = 4.0;
  CHECK(clip_grad_norm({&a, &b}, 1.0) == doctest::Approx(5.0));
  CHECK(a.grad()[0] == doctest::Approx(0.6));
  CHECK(b.grad()[0] == doctest::Approx(0.8));
  CHECK(clip_grad_norm({&a, &b}, 10.0) == doctest::Approx(1.0));
  CHECK(a.grad()[0] == doctest::Approx(0.6));
}

TEST_CASE("derived seeds") {
  CHECK(derive_seed(1, {2, 3}) == derive_seed(1, {2, 3}));
  CHECK(derive_seed(1, {2, 3}) != derive_seed(1, {3, 2}));
  CHECK(derive_seed(1, {2}) != derive_seed(2, {2}));
  Rng a(5, {1}), b(5, {1});
  for (int i = 0; i < 10; ++i) CHECK(a.next() == b.next());
}

}  // TEST_SUITE
