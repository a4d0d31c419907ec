// Copyright 2026 The cdvqa Authors
// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <random>

#include "cdvqa/errors.hpp"
#include "cdvqa/tcssm.hpp"
#include "doctest.h"

using namespace cdvqa;
using namespace cdvqa::tcssm;

namespace {

void fill_normal(Tensor& t, std::mt19937_64& rng, double s = 1.0) {
  std::normal_distribution<double> n(0.0, s);
  for (auto& v : t.values()) v = n(rng);
}

struct Case {
  StreamPair pair;
  ScanParams params;
};

Case random_case(std::mt19937_64& rng, std::size_t B, std::size_t L, std::size_t D, std::size_t N) {
  Case c{{Tensor({B, L, D}), Tensor({B, L, D})},
         {Tensor({D, N}), Tensor({B, L, D}), Tensor({B, L, D}), Tensor({B, L, N}), Tensor({B, L, N}),
          Tensor({B, L, N}), Tensor({B, L, N})}};
  std::uniform_real_distribution<double> u(0.0, 1.0);
  fill_normal(c.pair.x, rng);
  fill_normal(c.pair.x_prime, rng);
  fill_normal(c.params.b, rng);
  fill_normal(c.params.b_prime, rng);
  fill_normal(c.params.c, rng);
  fill_normal(c.params.c_prime, rng);
  for (auto& v : c.params.a_log.values()) v = std::log(1.0 + 15.0 * u(rng));
  for (Tensor* t : {&c.params.delta, &c.params.delta_prime}) {
    for (auto& v : t->values()) v = std::exp(std::log(0.001) + u(rng) * std::log(100.0));
  }
  return c;
}

// Literal per-element recurrence, mean step, Euler input term.
ScanOutput naive_scan(const StreamPair& sp, const ScanParams& p) {
  const auto B = p.delta.dim(0), L = p.delta.dim(1), D = p.delta.dim(2), N = p.b.dim(2);
  ScanOutput o{Tensor({B, L, D}), Tensor({B, L, D}), Tensor({B, D, N})};
  for (std::size_t bi = 0; bi < B; ++bi) {
    for (std::size_t d = 0; d < D; ++d) {
      for (std::size_t n = 0; n < N; ++n) {
        double h = 0.0;
        for (std::size_t t = 0; t < L; ++t) {
          const double A = -std::exp(p.a_log(d, n));
          const double abar = std::exp(0.5 * (p.delta(bi, t, d) + p.delta_prime(bi, t, d)) * A);
          const double pre = p.delta(bi, t, d) * p.b(bi, t, n) * sp.x(bi, t, d);
          const double post = p.delta_prime(bi, t, d) * p.b_prime(bi, t, n) * sp.x_prime(bi, t, d);
          h = abar * h + std::fabs(post - pre);
          o.y(bi, t, d) += p.c(bi, t, n) * h;
          o.y_prime(bi, t, d) += p.c_prime(bi, t, n) * h;
        }
        o.h_last(bi, d, n) = h;
      }
    }
  }
  return o;
}

double rel_err(const Tensor& a, const Tensor& ref) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num = std::max(num, std::abs(a[i] - ref[i]));
    den = std::max(den, std::abs(ref[i]));
  }
  return den > 0 ? num / den : num;
}

}  // namespace

TEST_CASE("zoh_discretize") {
  Tensor a_log({1, 1}, 0.0);  // A = -1
  Tensor delta({1, 1, 1}, std::log(2.0));
  Tensor b({1, 1, 1}, 3.0);
  const auto d = zoh_discretize(a_log, delta, b);
  CHECK(d.a_bar[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(d.b_bar[0] == doctest::Approx(3.0 * std::log(2.0)));

  delta[0] = 1e-12;
  const auto small = zoh_discretize(a_log, delta, b);
  CHECK(small.a_bar[0] == doctest::Approx(1.0));
  CHECK(std::abs(small.b_bar[0]) < 1e-11);

  delta[0] = 0.0;
  CHECK_THROWS_AS(zoh_discretize(a_log, delta, b), ValidationError);
}

TEST_CASE("exact ZOH and Euler input terms differ by delta^2 A b / 2") {
  std::mt19937_64 rng(21);
  Tensor a_log({2, 3}), b({1, 1, 3});
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (auto& v : a_log.values()) v = u(rng);
  fill_normal(b, rng);
  for (double dt : {1e-2, 1e-3}) {
    Tensor delta({1, 1, 2}, dt);
    const auto euler = zoh_discretize(a_log, delta, b, InputDiscretization::Euler);
    const auto exact = zoh_discretize(a_log, delta, b, InputDiscretization::ExactZoh);
    for (std::size_t d = 0; d < 2; ++d) {
      for (std::size_t n = 0; n < 3; ++n) {
        const double A = -std::exp(a_log(d, n));
        // Series: expm1(dA)/A = d + d^2 A / 2 + d^3 A^2 / 6 + ...
        const double leading = dt * dt * A * b(0, 0, n) / 2.0;
        const double diff = exact.b_bar(0, 0, d, n) - euler.b_bar(0, 0, d, n);
        CHECK(std::abs(diff - leading) <= std::abs(dt * dt * dt * A * A * b(0, 0, n)) / 6.0 * 1.01);
      }
    }
  }
}

TEST_CASE("single-step arithmetic") {
  // delta x = 2, b = 1; delta' x' = 5, b' = 1; c = 2 => u = 3, y = 6.
  StreamPair sp{Tensor({1, 1, 1}, 2.0), Tensor({1, 1, 1}, 5.0)};
  ScanParams p{Tensor({1, 1}, 0.0),    Tensor({1, 1, 1}, 1.0), Tensor({1, 1, 1}, 1.0),
               Tensor({1, 1, 1}, 1.0), Tensor({1, 1, 1}, 1.0), Tensor({1, 1, 1}, 2.0),
               Tensor({1, 1, 1}, 1.0)};
  const auto o = change_scan_ref(sp, p);
  CHECK(o.y[0] == 6.0);
  CHECK(o.y_prime[0] == 3.0);
  CHECK(o.h_last[0] == 3.0);
}

TEST_CASE("equal streams give zero output") {
  std::mt19937_64 rng(3);
  auto c = random_case(rng, 2, 9, 3, 4);
  c.pair.x_prime = c.pair.x;
  c.params.b_prime = c.params.b;
  c.params.delta_prime = c.params.delta;
  const auto o = change_scan_ref(c.pair, c.params);
  for (double v : o.y.values()) CHECK(v == 0.0);
  for (double v : o.y_prime.values()) CHECK(v == 0.0);
}

TEST_CASE("reference scan matches the naive loop oracle") {
  std::mt19937_64 rng(17);
  const auto c = random_case(rng, 2, 16, 4, 3);
  const auto ref = change_scan_ref(c.pair, c.params);
  const auto naive = naive_scan(c.pair, c.params);
  CHECK(rel_err(ref.y, naive.y) <= 1e-12);
  CHECK(rel_err(ref.y_prime, naive.y_prime) <= 1e-12);
  CHECK(rel_err(ref.h_last, naive.h_last) <= 1e-12);
}

TEST_CASE("chunked scan matches the reference") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    std::uniform_int_distribution<std::size_t> bd(1, 3), ld(1, 300), dd(1, 6), nd(1, 6), cd(1, 70);
    const auto c = random_case(rng, bd(rng), ld(rng), dd(rng), nd(rng));
    for (auto opts : {ScanOptions{}, ScanOptions{InputDiscretization::ExactZoh, EvolutionStep::Post}}) {
      const auto ref = change_scan_ref(c.pair, c.params, opts);
      const auto fast = change_scan_fast(c.pair, c.params, opts, cd(rng));
      CHECK(rel_err(fast.y, ref.y) <= 1e-10);
      CHECK(rel_err(fast.y_prime, ref.y_prime) <= 1e-10);
      CHECK(rel_err(fast.h_last, ref.h_last) <= 1e-10);
    }
  }
}

TEST_CASE("L = 1 chunked scan is bit-identical") {
  std::mt19937_64 rng(6);
  const auto c = random_case(rng, 3, 1, 5, 7);
  const auto ref = change_scan_ref(c.pair, c.params);
  const auto fast = change_scan_fast(c.pair, c.params);
  CHECK(ref.y == fast.y);
  CHECK(ref.y_prime == fast.y_prime);
  CHECK(ref.h_last == fast.h_last);
}

TEST_CASE("scan combiner is associative") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 1000; ++i) {
    const ScanElement p{u(rng), u(rng)}, q{u(rng), u(rng)}, r{u(rng), u(rng)};
    const auto left = combine(combine(p, q), r), right = combine(p, combine(q, r));
    CHECK(std::abs(left.a - right.a) <= 1e-12);
    CHECK(std::abs(left.u - right.u) <= 1e-12);
  }
  // Folding the elements reproduces the recurrence from h = 0.
  double h = 0.0;
  ScanElement acc;
  for (int t = 0; t < 10; ++t) {
    const ScanElement e{u(rng), u(rng)};
    h = e.a * h + e.u;
    acc = combine(acc, e);
  }
  CHECK(acc.u == doctest::Approx(h));
}

TEST_CASE("state is nonnegative and bounded by the summed input terms") {
  std::mt19937_64 rng(12);
  const auto c = random_case(rng, 1, 40, 3, 3);
  const auto d_pre = zoh_discretize(c.params.a_log, c.params.delta, c.params.b);
  const auto d_post = zoh_discretize(c.params.a_log, c.params.delta_prime, c.params.b_prime);
  for (std::size_t d = 0; d < 3; ++d) {
    for (std::size_t n = 0; n < 3; ++n) {
      double bound = 0.0;
      for (std::size_t t = 0; t < 40; ++t) {
        bound += std::abs(d_post.b_bar(0, t, d, n) * c.pair.x_prime(0, t, d) -
                          d_pre.b_bar(0, t, d, n) * c.pair.x(0, t, d));
        CHECK(d_pre.a_bar(0, t, d, n) > 0.0);
        CHECK(d_pre.a_bar(0, t, d, n) < 1.0);
      }
      const double h = change_scan_ref(c.pair, c.params).h_last(0, d, n);
      CHECK(h >= 0.0);
      CHECK(h <= bound * (1 + 1e-12));
    }
  }
}

TEST_CASE("swapping streams under tied parameters leaves the output unchanged") {
  std::mt19937_64 rng(13);
  auto c = random_case(rng, 1, 12, 3, 2);
  c.params.b_prime = c.params.b;
  c.params.delta_prime = c.params.delta;
  const auto o1 = change_scan_ref(c.pair, c.params);
  StreamPair swapped{c.pair.x_prime, c.pair.x};
  const auto o2 = change_scan_ref(swapped, c.params);
  CHECK(o1.y == o2.y);
  CHECK(o1.y_prime == o2.y_prime);
}

TEST_CASE("backward with zero upstream gradient is zero") {
  std::mt19937_64 rng(14);
  const auto c = random_case(rng, 2, 6, 3, 2);
  const Tensor zero({2, 6, 3});
  const auto g = change_scan_backward(c.pair, c.params, zero, zero);
  for (const Tensor* t : {&g.x, &g.x_prime, &g.b, &g.b_prime, &g.c, &g.c_prime, &g.delta,
                          &g.delta_prime, &g.a_log}) {
    for (double v : t->values()) CHECK(v == 0.0);
  }
}

TEST_CASE("parameter prediction matches a straight-line oracle") {
  const std::size_t B = 2, L = 5, D = 3, N = 2;
  std::mt19937_64 rng(31);
  FusionInputs in{Tensor({B, L, D}), Tensor({B, L, D}), Tensor({B, D})};
  fill_normal(in.f_pre, rng);
  fill_normal(in.f_post, rng);
  fill_normal(in.f_text, rng);
  const auto w = BlockWeights::init(D, N, 77);
  const auto pred = predict_params(in, w);

  auto silu = [](double s) { return s / (1.0 + std::exp(-s)); };
  auto softplus = [](double s) { return std::log(1.0 + std::exp(s)); };
  for (int side = 0; side < 2; ++side) {
    const StreamWeights& sw = side == 0 ? w.pre : w.post;
    const Tensor& f = side == 0 ? in.f_pre : in.f_post;
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t l = 0; l < L; ++l) {
        double g[D];
        for (std::size_t d = 0; d < D; ++d) {
          g[d] = in.f_pre(b, l, d) * in.f_post(b, l, d) * in.f_text(b, d) + f(b, l, d);
        }
        for (std::size_t n = 0; n < N; ++n) {
          double bb = 0, cc = 0;
          for (std::size_t d = 0; d < D; ++d) {
            bb += g[d] * sw.w_b(d, n);
            cc += g[d] * sw.w_c(d, n);
          }
          CHECK((side ? pred.params.b_prime : pred.params.b)(b, l, n) == doctest::Approx(bb));
          CHECK((side ? pred.params.c_prime : pred.params.c)(b, l, n) == doctest::Approx(cc));
        }
        for (std::size_t j = 0; j < D; ++j) {
          double raw = sw.delta_bias[j];
          for (std::size_t d = 0; d < D; ++d) raw += g[d] * sw.w_delta(d, j);
          CHECK((side ? pred.params.delta_prime : pred.params.delta)(b, l, j) ==
                doctest::Approx(softplus(raw)));
          // depthwise conv over the projected neighbours
          double s = sw.conv_bias[j];
          for (int k = -1; k <= 1; ++k) {
            const long ll = static_cast<long>(l) + k;
            if (ll < 0 || ll >= static_cast<long>(L)) continue;
            double z = 0;
            for (std::size_t d = 0; d < D; ++d) z += f(b, ll, d) * sw.in_proj(d, j);
            s += sw.conv(j, k + 1) * z;
          }
          CHECK((side ? pred.pair.x_prime : pred.pair.x)(b, l, j) == doctest::Approx(silu(s)));
        }
      }
    }
  }
  CHECK_THROWS_AS(predict_params(FusionInputs{in.f_pre, in.f_post, Tensor({B, D + 1})}, w), ValidationError);
}

TEST_CASE("symmetric inputs and tied weights give symmetric parameters and zero output") {
  std::mt19937_64 rng(32);
  for (int trial = 0; trial < 10; ++trial) {
    FusionInputs in{Tensor({2, 7, 4}), Tensor(), Tensor({2, 4})};
    fill_normal(in.f_pre, rng);
    in.f_post = in.f_pre;
    fill_normal(in.f_text, rng);
    auto w = BlockWeights::init(4, 3, rng());
    w.tie_post_to_pre();
    const auto f = block_forward(in, w);
    CHECK(f.pred.params.b == f.pred.params.b_prime);
    CHECK(f.pred.params.c == f.pred.params.c_prime);
    CHECK(f.pred.params.delta == f.pred.params.delta_prime);
    CHECK(f.pred.pair.x == f.pred.pair.x_prime);
    for (double v : f.out.y.values()) CHECK(v == 0.0);
    for (double v : f.out.y_prime.values()) CHECK(v == 0.0);
  }
}

TEST_CASE("zero text embedding reduces to the unfused projections") {
  std::mt19937_64 rng(33);
  FusionInputs in{Tensor({1, 6, 3}), Tensor({1, 6, 3}), Tensor({1, 3}, 0.0)};
  fill_normal(in.f_pre, rng);
  fill_normal(in.f_post, rng);
  const auto w = BlockWeights::init(3, 2, 5);
  const auto with_zero = predict_params(in, w);
  const auto ablated = predict_params(in, w, PredictOptions{false});
  CHECK(with_zero.cache.g_pre == in.f_pre);
  CHECK(with_zero.cache.g_post == in.f_post);
  CHECK(with_zero.params.b == ablated.params.b);
  CHECK(with_zero.params.delta_prime == ablated.params.delta_prime);
}

TEST_CASE("text ablation removes the text gradient") {
  std::mt19937_64 rng(34);
  FusionInputs in{Tensor({1, 5, 3}), Tensor({1, 5, 3}), Tensor({1, 3})};
  fill_normal(in.f_pre, rng);
  fill_normal(in.f_post, rng);
  fill_normal(in.f_text, rng);
  const auto w = BlockWeights::init(3, 2, 6);
  Tensor gy({1, 5, 3}), gyp({1, 5, 3});
  fill_normal(gy, rng);
  fill_normal(gyp, rng);
  const PredictOptions ablate{false};
  const auto f = block_forward(in, w, ablate);
  const auto g = block_backward(in, w, f, gy, gyp, ablate);
  for (double v : g.f_text.values()) CHECK(v == 0.0);
  const auto f2 = block_forward(in, w);
  const auto g2 = block_backward(in, w, f2, gy, gyp);
  double norm = 0;
  for (double v : g2.f_text.values()) norm += std::abs(v);
  CHECK(norm > 0.0);
}

TEST_CASE("gradcheck passes at the default dims") {
  const auto rep = gradcheck({1, 8, 3, 4}, 0);
  for (const auto& g : rep.groups) CHECK_MESSAGE(g.pass, g.name << " " << g.max_rel_error);
  CHECK(rep.pass());
  CHECK(rep.min_margin >= 1e-3);
  CHECK(rep.groups.size() == 9 + 4 + 14);
}

TEST_CASE("gradcheck covers the exact-ZOH and single-step variants") {
  for (auto mode : {EvolutionStep::Pre, EvolutionStep::Post}) {
    GradcheckOptions o;
    o.scan = {InputDiscretization::ExactZoh, mode};
    const auto rep = gradcheck({2, 5, 2, 3}, 4, o);
    for (const auto& g : rep.groups) CHECK_MESSAGE(g.pass, g.name << " " << g.max_rel_error);
  }
}

TEST_CASE("gradcheck flags a perturbed analytic gradient") {
  GradcheckOptions o;
  o.analytic_scale = 1.01;
  o.include_block = false;
  const auto rep = gradcheck({1, 8, 3, 4}, 0, o);
  CHECK_FALSE(rep.pass());
  for (const auto& g : rep.groups) CHECK(g.max_rel_error > 9e-3);
}
