#include <doctest.h>

#include <cmath>
#include <numeric>

#include "clipo/contrastive.hpp"
#include "clipo/error.hpp"
#include "oracles.hpp"

using namespace clipo;

namespace {

// Unit rows from raw 2-d or d-d vectors.
Tensor unit_rows(std::vector<std::vector<double>> rows) {
  const std::size_t G = rows.size(), d = rows[0].size();
  Tensor t({G, d});
  for (std::size_t i = 0; i < G; ++i) {
    double n = 0.0;
    for (double v : rows[i]) n += v * v;
    n = std::sqrt(n);
    for (std::size_t j = 0; j < d; ++j) t[i * d + j] = rows[i][j] / n;
  }
  return t;
}

Tensor random_unit_rows(std::size_t G, std::size_t d, Rng& rng) {
  Tensor t = oracle::random({G, d}, rng);
  for (std::size_t i = 0; i < G; ++i) {
    double n = 0.0;
    for (std::size_t j = 0; j < d; ++j) n += t[i * d + j] * t[i * d + j];
    n = std::sqrt(n);
    for (std::size_t j = 0; j < d; ++j) t[i * d + j] /= n;
  }
  return t;
}

double loss_value(LossKind kind, const Tensor& e, double tau, std::size_t anchor,
                  std::vector<std::size_t> positives, std::size_t partner, bool exclude_self = false) {
  Tape t;
  Var sim = similarity_matrix(t.constant(e), tau);
  switch (kind) {
    case LossKind::kInfoNce: return infonce_anchor_loss(sim, anchor, partner, exclude_self).item();
    case LossKind::kSupCon: return supcon_anchor_loss(sim, anchor, positives, exclude_self).item();
    case LossKind::kSoftNn: return softnn_anchor_loss(sim, anchor, positives, exclude_self).item();
  }
  return 0.0;
}

const Tensor& hand_embeddings() {
  static const Tensor e = unit_rows({{1, 0}, {1, 0}, {0, 1}, {-1, 0}});
  return e;
}

// -ln(e^2 / (e^2 + e^2 + e^0 + e^-2)) in extended precision.
double hand_loss() {
  const long double e2 = std::exp(2.0L);
  return static_cast<double>(-std::log(e2 / (e2 + e2 + 1.0L + std::exp(-2.0L))));
}

}  // namespace

TEST_SUITE("contrastive") {

TEST_CASE("pool") {
  Tape t;
  CHECK(pool(Tensor::matrix({{1, 2}, {1, 2}, {1, 2}})).values() == std::vector<double>{1, 2});
  CHECK(pool(Tensor::matrix({{7, -3, 2}})).values() == std::vector<double>{7, -3, 2});
  Rng rng(31, {0});
  const Tensor H = oracle::random({5, 3}, rng);
  const Tensor p = pool(H);
  const Tensor pv = pool(t.constant(H)).value();
  for (std::size_t j = 0; j < 3; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < 5; ++i) s += H[i * 3 + j];
    CHECK(std::abs(p[j] - s / 5) < 1e-12);
    CHECK(pv[j] == p[j]);
  }
  CHECK_THROWS_AS(pool(Tensor({0, 3})), ContractError);
}

TEST_CASE("embed") {
  Tape t;
  Tensor I({4, 4});
  for (std::size_t i = 0; i < 4; ++i) I[i * 4 + i] = 1.0;
  const Tensor e = embed(t.constant(I), t.constant(Tensor::vector({3, 4, 0, 0}))).value();
  CHECK(e[0] == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(e[1] == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(e[2] == 0.0);

  Rng rng(32, {0});
  const Tensor W = oracle::random({3, 5}, rng);
  const Tensor x = oracle::random({5}, rng);
  const Tensor got = embed(t.constant(W), t.constant(x)).value();
  const auto wx = oracle::matmul(W.values(), x.values(), 3, 5, 1);
  const double n = std::sqrt(wx[0] * wx[0] + wx[1] * wx[1] + wx[2] * wx[2]);
  for (std::size_t j = 0; j < 3; ++j) CHECK(std::abs(got[j] - wx[j] / n) < 1e-12);

  Tensor x10 = x;
  for (double& v : x10.values()) v *= 10.0;
  const Tensor scaled = embed(t.constant(W), t.constant(x10)).value();
  for (std::size_t j = 0; j < 3; ++j) CHECK(std::abs(scaled[j] - got[j]) < 1e-15);

  CHECK_THROWS_AS(embed(t.constant(W), t.constant(Tensor({5}))), NumericError);
}

TEST_CASE("similarity matrix") {
  Tape t;
  const Tensor s = similarity_matrix(t.constant(hand_embeddings()), 0.5).value();
  CHECK(s[0] == 2.0);
  CHECK(s[1] == 2.0);
  CHECK(s[2] == 0.0);
  CHECK(s[3] == -2.0);

  Rng rng(33, {0});
  const Tensor e = random_unit_rows(6, 4, rng);
  const Tensor m = similarity_matrix(t.constant(e), 0.05).value();
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(std::abs(m[i * 6 + i] - 20.0) < 1e-9);
    for (std::size_t j = 0; j < 6; ++j) {
      CHECK(m[i * 6 + j] == m[j * 6 + i]);
      CHECK(std::abs(m[i * 6 + j]) <= 20.0 + 1e-9);
    }
  }
  const Tensor orth = similarity_matrix(t.constant(unit_rows({{1, 0}, {0, 1}})), 0.3).value();
  CHECK(orth[1] == 0.0);
}

TEST_CASE("select_positive") {
  Rng rng(34, {0});
  const std::vector<std::size_t> two{0, 1};
  for (int i = 0; i < 100; ++i) CHECK(select_positive(0, two, rng) == 1);

  const std::vector<std::size_t> three{0, 1, 2};
  const int n = 100000;
  int ones = 0;
  for (int i = 0; i < n; ++i) ones += select_positive(0, three, rng) == 1 ? 1 : 0;
  CHECK(std::abs(ones - n / 2.0) <= 3 * std::sqrt(n * 0.25));

  CHECK_THROWS_AS(select_positive(3, three, rng), ContractError);
  CHECK_THROWS_AS(select_positive(0, std::vector<std::size_t>{0}, rng), ContractError);

  Rng a(35, {1}), b(35, {1});
  for (int i = 0; i < 50; ++i) CHECK(select_positive(1, three, a) == select_positive(1, three, b));
}

TEST_CASE("anchor loss hand case") {
  const Tensor& e = hand_embeddings();
  CHECK(std::abs(hand_loss() - 0.767164505306369) < 1e-12);
  CHECK(std::abs(loss_value(LossKind::kInfoNce, e, 0.5, 0, {}, 1) - hand_loss()) < 1e-12);
  CHECK(std::abs(loss_value(LossKind::kSupCon, e, 0.5, 0, {0, 1}, 0) - hand_loss()) < 1e-12);
  CHECK(std::abs(loss_value(LossKind::kSoftNn, e, 0.5, 0, {0, 1}, 0) - hand_loss()) < 1e-12);
  Tape t;
  Var sim = similarity_matrix(t.constant(e), 0.5);
  CHECK_THROWS_AS(infonce_anchor_loss(sim, 1, 1), ContractError);
  CHECK_THROWS_AS(supcon_anchor_loss(sim, 0, std::vector<std::size_t>{0}), ContractError);
}

TEST_CASE("identical embeddings give ln G") {
  for (std::size_t G : {2u, 4u, 16u, 32u}) {
    const Tensor e = unit_rows(std::vector<std::vector<double>>(G, {0.3, -0.2, 0.9}));
    const double lnG = std::log(static_cast<double>(G));
    CHECK(std::abs(loss_value(LossKind::kInfoNce, e, 0.05, 0, {}, 1) - lnG) < 1e-12);
    CHECK(std::abs(loss_value(LossKind::kSupCon, e, 0.05, 0, {0, 1}, 0) - lnG) < 1e-12);
    CHECK(std::abs(loss_value(LossKind::kSoftNn, e, 0.05, 0, {0, 1}, 0) - lnG) < 1e-12);
    if (G > 2) {
      std::vector<std::size_t> all_but_one(G - 1);
      std::iota(all_but_one.begin(), all_but_one.end(), 0);
      const double expect = -std::log(static_cast<double>(G - 2) / static_cast<double>(G));
      CHECK(std::abs(loss_value(LossKind::kSoftNn, e, 0.05, 0, all_but_one, 0) - expect) < 1e-12);
      CHECK(std::abs(loss_value(LossKind::kSupCon, e, 0.05, 0, all_but_one, 0) - lnG) < 1e-12);
    }
  }
}

TEST_CASE("single partner equivalence across the three losses") {
  Rng rng(36, {0});
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t G = static_cast<std::size_t>(rng.uniform_int(3, 12));
    const Tensor e = random_unit_rows(G, 4, rng);
    const std::size_t a = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(G) - 1));
    std::size_t p = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(G) - 2));
    if (p >= a) ++p;
    for (bool ex : {false, true}) {
      const double ref = loss_value(LossKind::kInfoNce, e, 0.1, a, {}, p, ex);
      CHECK(std::abs(loss_value(LossKind::kSupCon, e, 0.1, a, {a, p}, 0, ex) - ref) < 1e-12);
      CHECK(std::abs(loss_value(LossKind::kSoftNn, e, 0.1, a, {a, p}, 0, ex) - ref) < 1e-12);
    }
  }
}

TEST_CASE("loss gradients agree with finite differences") {
  Rng rng(37, {0});
  for (auto kind : {LossKind::kInfoNce, LossKind::kSupCon, LossKind::kSoftNn}) {
    for (bool ex : {false, true}) {
      const Tensor raw = oracle::random({5, 3}, rng);
      const std::vector<std::size_t> pos{0, 2, 3};
      const double err = oracle::grad_check(
          [&](Var x) {
            std::vector<Var> rows;
            for (std::size_t i = 0; i < 5; ++i) rows.push_back(ops::l2_normalize(ops::row(x, i)));
            Var s = similarity_matrix(ops::stack_rows(rows), 0.5);
            switch (kind) {
              case LossKind::kInfoNce: return infonce_anchor_loss(s, 0, 2, ex);
              case LossKind::kSupCon: return supcon_anchor_loss(s, 0, pos, ex);
              default: return softnn_anchor_loss(s, 0, pos, ex);
            }
          },
          raw);
      INFO(to_string(kind));
      CHECK(err < 1e-5);
    }
  }
}

TEST_CASE("head gradient agrees with finite differences") {
  Rng rng(38, {0});
  const Tensor pooled = oracle::random({6, 8}, rng);
  const std::vector<std::size_t> pos{1, 2, 4};
  const double err = oracle::grad_check(
      [&](Var W) {
        Tape& tp = *W.tape;
        std::vector<Var> rows;
        for (std::size_t i = 0; i < 6; ++i)
          rows.push_back(embed(W, ops::row(tp.constant_ref(pooled), i)));
        Var s = similarity_matrix(ops::stack_rows(rows), 0.2);
        return ops::scale(ops::add(supcon_anchor_loss(s, 1, pos), supcon_anchor_loss(s, 4, pos)), 0.5);
      },
      oracle::random({3, 8}, rng, 0.4));
  CHECK(err < 1e-5);
}

TEST_CASE("group gate") {
  CHECK_FALSE(group_gate(16, 16));
  CHECK_FALSE(group_gate(1, 16));
  CHECK_FALSE(group_gate(0, 16));
  CHECK(group_gate(2, 16));
  CHECK(group_gate(15, 16));
}

TEST_CASE("contrastive rewards") {
  ContrastiveConfig cfg;
  cfg.tau = 0.5;
  cfg.lambda = 0.2;
  cfg.loss_kind = LossKind::kInfoNce;
  Rng rng(39, {0});
  Tape t;

  SUBCASE("hand case") {
    const std::vector<int> r{1, 1, 0, 0};
    const auto gc = contrastive_rewards(r, t.constant(hand_embeddings()), cfg, rng);
    CHECK(gc.rewards.group_valid);
    CHECK(std::abs(gc.rewards.contrastive[0] - (-0.2 * hand_loss())) < 1e-12);
    CHECK(std::abs(gc.rewards.contrastive[0] - (-0.153432901061274)) < 1e-12);
    CHECK(gc.rewards.contrastive[2] == 0.0);
    CHECK(gc.rewards.contrastive[3] == 0.0);
    CHECK(gc.anchors == std::vector<std::size_t>{0, 1});
  }
  SUBCASE("identical embeddings clip at the floor") {
    cfg.tau = 0.05;
    std::vector<int> r(16, 0);
    r[0] = r[5] = 1;
    const Tensor e = unit_rows(std::vector<std::vector<double>>(16, {1, 1}));
    const auto gc = contrastive_rewards(r, t.constant(e), cfg, rng);
    CHECK(gc.rewards.contrastive[0] == -0.5);
    CHECK(gc.rewards.contrastive[5] == -0.5);
    CHECK(gc.rewards.clipped_mask[0]);
    CHECK(gc.rewards.total[0] == 0.5);
    CHECK(std::abs(gc.anchor_losses[0].item() - std::log(16.0)) < 1e-12);
  }
  SUBCASE("invalid groups stay untouched") {
    for (const std::vector<int>& r : {std::vector<int>{1, 1, 1, 1}, std::vector<int>{0, 1, 0, 0},
                                      std::vector<int>{0, 0, 0, 0}}) {
      Rng before = rng;
      const auto gc = contrastive_rewards(r, t.constant(hand_embeddings()), cfg, rng);
      CHECK_FALSE(gc.rewards.group_valid);
      CHECK(gc.anchor_losses.empty());
      for (std::size_t i = 0; i < 4; ++i) {
        CHECK(gc.rewards.contrastive[i] == 0.0);
        CHECK(gc.rewards.total[i] == static_cast<double>(r[i]));
      }
      CHECK(rng.next() == before.next());
    }
  }
}

TEST_CASE("shaped reward invariants under fuzzing") {
  Rng rng(40, {0});
  for (int trial = 0; trial < 100000; ++trial) {
    const std::size_t G = static_cast<std::size_t>(rng.uniform_int(2, 8));
    ContrastiveConfig cfg;
    cfg.loss_kind = static_cast<LossKind>(rng.uniform_int(0, 2));
    cfg.tau = 0.02 + 0.98 * rng.uniform();
    cfg.lambda = 2.0 * rng.uniform();
    cfg.clip_floor = -rng.uniform();
    cfg.exclude_self = rng.uniform() < 0.5;
    std::vector<int> r(G);
    for (int& x : r) x = rng.uniform() < 0.5 ? 1 : 0;
    Tape t;
    const auto gc = contrastive_rewards(r, t.constant(random_unit_rows(G, 3, rng)), cfg, rng);
    const auto& s = gc.rewards;
    const std::size_t npos = static_cast<std::size_t>(std::count(r.begin(), r.end(), 1));
    REQUIRE(s.group_valid == (npos > 1 && npos < G));
    for (std::size_t i = 0; i < G; ++i) {
      REQUIRE(s.contrastive[i] <= 0.0);
      REQUIRE(s.contrastive[i] >= cfg.clip_floor);
      REQUIRE(s.total[i] == static_cast<double>(s.base[i]) + s.contrastive[i]);
      if (r[i] == 0 || !s.group_valid) REQUIRE(s.contrastive[i] == 0.0);
    }
    if (cfg.loss_kind != LossKind::kInfoNce || cfg.exclude_self)
      continue;
    for (const Var& l : gc.anchor_losses)
      REQUIRE(mi_lower_bound(l.item(), G) <= std::log(static_cast<double>(G)) + 1e-12);
  }
}

TEST_CASE("losses ignore the order of negatives and follow relabeling") {
  Rng rng(41, {0});
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor e = random_unit_rows(6, 4, rng);
    const std::vector<std::size_t> pos{0, 1, 2};
    // Swap negatives 3 and 5.
    Tensor sw = e;
    for (std::size_t j = 0; j < 4; ++j) std::swap(sw[3 * 4 + j], sw[5 * 4 + j]);
    for (auto kind : {LossKind::kInfoNce, LossKind::kSupCon, LossKind::kSoftNn})
      CHECK(std::abs(loss_value(kind, e, 0.1, 0, pos, 1) - loss_value(kind, sw, 0.1, 0, pos, 1)) < 1e-12);

    // Relabel the whole group: rows reversed, anchor 0 -> 5, partner 1 -> 4.
    Tensor rev({6, 4});
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t j = 0; j < 4; ++j) rev[i * 4 + j] = e[(5 - i) * 4 + j];
    const std::vector<std::size_t> rpos{3, 4, 5};
    for (auto kind : {LossKind::kInfoNce, LossKind::kSupCon, LossKind::kSoftNn})
      CHECK(std::abs(loss_value(kind, e, 0.1, 0, pos, 1) - loss_value(kind, rev, 0.1, 5, rpos, 4)) < 1e-12);
  }
}

TEST_CASE("rewards are invariant to positive rescaling of pooled states") {
  Rng rng(42, {0});
  const Tensor W = oracle::random({3, 6}, rng);
  const Tensor pooled = oracle::random({5, 6}, rng);
  const std::vector<int> r{1, 0, 1, 1, 0};
  ContrastiveConfig cfg;
  cfg.loss_kind = LossKind::kSupCon;
  auto shaped = [&](double c, std::size_t which) {
    Tape t;
    Tensor p = pooled;
    for (std::size_t j = 0; j < 6; ++j) p[which * 6 + j] *= c;
    std::vector<Var> rows;
    for (std::size_t i = 0; i < 5; ++i) rows.push_back(embed(t.constant(W), ops::row(t.constant(p), i)));
    Rng g(1);
    return contrastive_rewards(r, ops::stack_rows(rows), cfg, g).rewards.contrastive;
  };
  const auto base = shaped(1.0, 0);
  for (double c : {0.01, 3.0, 250.0}) {
    const auto other = shaped(c, 2);
    for (std::size_t i = 0; i < 5; ++i) CHECK(std::abs(other[i] - base[i]) < 1e-12);
  }
}

TEST_CASE("head updates") {
  Rng rng(43, {0});
  SUBCASE("empty anchor list leaves W untouched") {
    auto head = make_head(4, 8, 1);
    const auto h = head.hash();
    const auto res = head_update(head, {});
    CHECK_FALSE(res.applied);
    CHECK(head.hash() == h);
  }
  SUBCASE("frozen head never moves") {
    auto head = make_head(4, 8, 2);
    head.frozen = true;
    const auto h = head.hash();
    for (int step = 0; step < 100; ++step) {
      Tape t;
      Var W = t.leaf(head.W);
      std::vector<Var> rows;
      for (std::size_t i = 0; i < 4; ++i)
        rows.push_back(embed(W, t.constant(oracle::random({8}, rng))));
      Var s = similarity_matrix(ops::stack_rows(rows), 0.1);
      std::vector<Var> losses{infonce_anchor_loss(s, 0, 1)};
      head_update(head, losses);
    }
    CHECK(head.hash() == h);
  }
  SUBCASE("a live head moves and lowers the loss") {
    auto head = make_head(4, 8, 3, 1e-2, 0.0);
    const Tensor pooled = oracle::random({6, 8}, rng);
    const std::vector<std::size_t> pos{0, 1, 2};
    auto step = [&]() {
      Tape t;
      Var W = t.leaf(head.W);
      std::vector<Var> rows;
      for (std::size_t i = 0; i < 6; ++i) rows.push_back(embed(W, ops::row(t.constant_ref(pooled), i)));
      Var s = similarity_matrix(ops::stack_rows(rows), 0.1);
      std::vector<Var> losses;
      for (std::size_t a : pos) losses.push_back(supcon_anchor_loss(s, a, pos));
      return head_update(head, losses);
    };
    const auto first = step();
    CHECK(first.applied);
    CHECK(first.anchors == 3);
    HeadUpdateResult last;
    for (int k = 0; k < 200; ++k) last = step();
    CHECK(last.mean_loss < first.mean_loss);
  }
}

TEST_CASE("mutual information bound") {
  CHECK(mi_lower_bound(std::log(8.0), 8) == doctest::Approx(0.0));
  CHECK(mi_lower_bound(0.0, 8) == doctest::Approx(std::log(8.0)));
  CHECK(std::abs(mi_lower_bound(hand_loss(), 4) - 0.619129855813522) < 1e-12);
  CHECK_THROWS_AS(mi_lower_bound(0.0, 1), ContractError);
}

TEST_CASE("pair cosines") {
  const Tensor e = unit_rows({{1, 0}, {1, 0}, {0, 1}});
  const auto c = pair_cosines(e, std::vector<int>{1, 1, 0});
  CHECK(c.pos_pairs == 1);
  CHECK(c.pos_pair_sum == doctest::Approx(1.0));
  CHECK(c.pos_neg_pairs == 2);
  CHECK(c.pos_neg_sum == doctest::Approx(0.0));
}

TEST_CASE("loss kind names round-trip") {
  for (auto k : {LossKind::kInfoNce, LossKind::kSupCon, LossKind::kSoftNn})
    CHECK(parse_loss_kind(to_string(k)) == k);
  CHECK_THROWS_AS(parse_loss_kind("triplet"), ConfigError);
}

}
