// Copyright 2026 The cdvqa Authors
// SPDX-License-Identifier: Apache-2.0
#include "cdvqa/tcssm.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <random>
#include <sstream>
#include <tuple>

#include <Eigen/Core>

namespace cdvqa::tcssm {

namespace {

using Row = Eigen::Map<Eigen::ArrayXd>;
using ConstRow = Eigen::Map<const Eigen::ArrayXd>;

inline double sigmoid(double v) {
  return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
}
inline double softplus(double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); }
inline double sign_of(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

// Input coefficient bbar / B for one (delta, A) pair.
inline double input_gain(double delta, double a, InputDiscretization mode) {
  return mode == InputDiscretization::Euler ? delta : std::expm1(delta * a) / a;
}

inline double evolution_step(double delta, double delta_prime, EvolutionStep mode) {
  switch (mode) {
    case EvolutionStep::Pre: return delta;
    case EvolutionStep::Post: return delta_prime;
    case EvolutionStep::Mean: break;
  }
  return 0.5 * (delta + delta_prime);
}

Tensor evolution_matrix(const Tensor& a_log) {
  Tensor a(a_log.shape());
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = -std::exp(a_log[i]);
  return a;
}

void check_pair(const StreamPair& pair, const ScanDims& d) {
  require_shape(pair.x, {d.batch, d.length, d.width}, "x");
  require_shape(pair.x_prime, {d.batch, d.length, d.width}, "x_prime");
}

}  // namespace

ScanDims ScanParams::dims() const {
  if (delta.rank() != 3 || b.rank() != 3) throw ValidationError("scan parameters are not rank 3");
  return ScanDims{delta.dim(0), delta.dim(1), delta.dim(2), b.dim(2)};
}

void ScanParams::validate() const {
  const ScanDims d = dims();
  if (d.batch == 0 || d.length == 0 || d.width == 0 || d.state == 0) {
    throw ValidationError("scan dimensions must all be at least 1");
  }
  require_shape(a_log, {d.width, d.state}, "a_log");
  require_shape(delta_prime, {d.batch, d.length, d.width}, "delta_prime");
  for (const Tensor* t : {&b, &b_prime, &c, &c_prime}) {
    require_shape(*t, {d.batch, d.length, d.state}, "B/C parameter");
  }
  for (const Tensor* t : {&delta, &delta_prime}) {
    for (double v : t->values()) {
      if (!(v > 0.0) || !std::isfinite(v)) throw ValidationError("delta must be positive and finite");
    }
  }
  for (double v : a_log.values()) {
    if (!std::isfinite(v)) throw ValidationError("a_log must be finite");
  }
}

Discretized zoh_discretize(const Tensor& a_log, const Tensor& delta, const Tensor& b,
                           InputDiscretization input) {
  if (delta.rank() != 3 || b.rank() != 3 || a_log.rank() != 2) {
    throw ValidationError("zoh_discretize expects a_log (D,N), delta (B,L,D), b (B,L,N)");
  }
  const std::size_t B = delta.dim(0), L = delta.dim(1), D = delta.dim(2), N = b.dim(2);
  require_shape(a_log, {D, N}, "a_log");
  require_shape(b, {B, L, N}, "b");
  for (double v : delta.values()) {
    if (!(v > 0.0)) throw ValidationError("delta must be positive");
  }
  const Tensor a = evolution_matrix(a_log);
  Discretized out{Tensor({B, L, D, N}), Tensor({B, L, D, N})};
  for (std::size_t bi = 0; bi < B; ++bi) {
    for (std::size_t t = 0; t < L; ++t) {
      for (std::size_t d = 0; d < D; ++d) {
        const double dt = delta(bi, t, d);
        for (std::size_t n = 0; n < N; ++n) {
          out.a_bar(bi, t, d, n) = std::exp(dt * a(d, n));
          out.b_bar(bi, t, d, n) = input_gain(dt, a(d, n), input) * b(bi, t, n);
        }
      }
    }
  }
  return out;
}

ScanOutput change_scan_ref(const StreamPair& pair, const ScanParams& p, const ScanOptions& opts) {
  p.validate();
  const ScanDims dm = p.dims();
  check_pair(pair, dm);
  const std::size_t B = dm.batch, L = dm.length, D = dm.width, N = dm.state;
  const Tensor a = evolution_matrix(p.a_log);

  ScanOutput out{Tensor({B, L, D}), Tensor({B, L, D}), Tensor({B, D, N})};
  std::vector<double> h(D * N);
  for (std::size_t bi = 0; bi < B; ++bi) {
    std::fill(h.begin(), h.end(), 0.0);
    for (std::size_t t = 0; t < L; ++t) {
      for (std::size_t d = 0; d < D; ++d) {
        const double dt = p.delta(bi, t, d), dtp = p.delta_prime(bi, t, d);
        const double step = evolution_step(dt, dtp, opts.evolution);
        const double x = pair.x(bi, t, d), xp = pair.x_prime(bi, t, d);
        double y = 0.0, yp = 0.0;
        for (std::size_t n = 0; n < N; ++n) {
          const double an = a(d, n);
          const double v = input_gain(dtp, an, opts.input) * p.b_prime(bi, t, n) * xp -
                           input_gain(dt, an, opts.input) * p.b(bi, t, n) * x;
          double& hn = h[d * N + n];
          hn = std::exp(step * an) * hn + std::abs(v);
          y += p.c(bi, t, n) * hn;
          yp += p.c_prime(bi, t, n) * hn;
        }
        out.y(bi, t, d) = y;
        out.y_prime(bi, t, d) = yp;
      }
    }
    std::copy(h.begin(), h.end(), out.h_last.data() + bi * D * N);
  }
  return out;
}

ScanOutput change_scan_fast(const StreamPair& pair, const ScanParams& p, const ScanOptions& opts,
                            std::size_t chunk) {
  p.validate();
  const ScanDims dm = p.dims();
  check_pair(pair, dm);
  if (chunk == 0) throw ValidationError("chunk size must be positive");
  const std::size_t B = dm.batch, L = dm.length, D = dm.width, N = dm.state, S = D * N;
  const Tensor a = evolution_matrix(p.a_log);
  const double* av = a.data();
  const bool euler = opts.input == InputDiscretization::Euler;
  const std::size_t T = std::min(chunk, L);

  ScanOutput out{Tensor({B, L, D}), Tensor({B, L, D}), Tensor({B, D, N})};
  // Chunk-local buffers: decay[t] holds abar_t, then the in-chunk cumulative
  // product; h[t] holds u_t, then the chunk-local state, then the global one.
  std::vector<double> decay(T * S), h(T * S), carry(S), step_row(S), gain(S), gain_p(S);
  for (std::size_t bi = 0; bi < B; ++bi) {
    std::fill(carry.begin(), carry.end(), 0.0);
    for (std::size_t s0 = 0; s0 < L; s0 += chunk) {
      const std::size_t len = std::min(L, s0 + chunk) - s0;
      // Elements (abar_t, u_t) of every token in the chunk.
      for (std::size_t i = 0; i < len; ++i) {
        const std::size_t t = s0 + i;
        const double* dt = p.delta.data() + (bi * L + t) * D;
        const double* dtp = p.delta_prime.data() + (bi * L + t) * D;
        const double* x = pair.x.data() + (bi * L + t) * D;
        const double* xp = pair.x_prime.data() + (bi * L + t) * D;
        const double* bb = p.b.data() + (bi * L + t) * N;
        const double* bp = p.b_prime.data() + (bi * L + t) * N;
        double* at = decay.data() + i * S;
        double* ut = h.data() + i * S;
        for (std::size_t d = 0; d < D; ++d) {
          const double step = evolution_step(dt[d], dtp[d], opts.evolution);
          for (std::size_t n = 0; n < N; ++n) step_row[d * N + n] = step;
          if (euler) {
            for (std::size_t n = 0; n < N; ++n) {
              ut[d * N + n] = dtp[d] * bp[n] * xp[d] - dt[d] * bb[n] * x[d];
            }
          } else {
            for (std::size_t n = 0; n < N; ++n) {
              gain[d * N + n] = dt[d] * av[d * N + n];
              gain_p[d * N + n] = dtp[d] * av[d * N + n];
            }
          }
        }
        // Eigen's packet exp keeps this row vectorised.
        Row(at, S) = (ConstRow(step_row.data(), S) * ConstRow(av, S)).exp();
        if (euler) {
          Row(ut, S) = Row(ut, S).abs();
        } else {
          for (std::size_t k = 0; k < S; ++k) {
            gain[k] = std::expm1(gain[k]) / av[k];
            gain_p[k] = std::expm1(gain_p[k]) / av[k];
          }
          for (std::size_t d = 0; d < D; ++d) {
            for (std::size_t n = 0; n < N; ++n) {
              const std::size_t k = d * N + n;
              ut[k] = std::abs(gain_p[k] * bp[n] * xp[d] - gain[k] * bb[n] * x[d]);
            }
          }
        }
      }
      // Scan the chunk from a zero carry, tracking the running decay.
      for (std::size_t i = 1; i < len; ++i) {
        double* ht = h.data() + i * S;
        const double* hprev = h.data() + (i - 1) * S;
        double* at = decay.data() + i * S;
        const double* aprev = decay.data() + (i - 1) * S;
        for (std::size_t k = 0; k < S; ++k) {
          ht[k] = at[k] * hprev[k] + ht[k];
          at[k] *= aprev[k];
        }
      }
      // Combine with the carry of all preceding chunks, then read out.
      for (std::size_t i = 0; i < len; ++i) {
        const std::size_t t = s0 + i;
        double* ht = h.data() + i * S;
        const double* pt = decay.data() + i * S;
        for (std::size_t k = 0; k < S; ++k) ht[k] += pt[k] * carry[k];
        const double* c = p.c.data() + (bi * L + t) * N;
        const double* cp = p.c_prime.data() + (bi * L + t) * N;
        double* y = out.y.data() + (bi * L + t) * D;
        double* yp = out.y_prime.data() + (bi * L + t) * D;
        for (std::size_t d = 0; d < D; ++d) {
          double acc = 0.0, acc_p = 0.0;
          for (std::size_t n = 0; n < N; ++n) {
            acc += c[n] * ht[d * N + n];
            acc_p += cp[n] * ht[d * N + n];
          }
          y[d] = acc;
          yp[d] = acc_p;
        }
      }
      std::copy(h.begin() + (len - 1) * S, h.begin() + len * S, carry.begin());
    }
    std::copy(carry.begin(), carry.end(), out.h_last.data() + bi * S);
  }
  return out;
}

ScanGrads change_scan_backward(const StreamPair& pair, const ScanParams& p, const Tensor& grad_y,
                               const Tensor& grad_y_prime, const ScanOptions& opts) {
  p.validate();
  const ScanDims dm = p.dims();
  check_pair(pair, dm);
  const std::size_t B = dm.batch, L = dm.length, D = dm.width, N = dm.state, S = D * N;
  require_shape(grad_y, {B, L, D}, "grad_y");
  require_shape(grad_y_prime, {B, L, D}, "grad_y_prime");
  const Tensor a = evolution_matrix(p.a_log);

  ScanGrads g{Tensor({B, L, D}), Tensor({B, L, D}), Tensor({B, L, N}), Tensor({B, L, N}),
              Tensor({B, L, N}), Tensor({B, L, N}), Tensor({B, L, D}), Tensor({B, L, D}),
              Tensor({D, N})};
  Tensor grad_a({D, N});

  // hist[t + 1] = h_t, hist[0] = h_0 = 0.
  std::vector<double> hist((L + 1) * S), abar(L * S), v(L * S), carry(S);
  for (std::size_t bi = 0; bi < B; ++bi) {
    std::fill(hist.begin(), hist.begin() + S, 0.0);
    for (std::size_t t = 0; t < L; ++t) {
      for (std::size_t d = 0; d < D; ++d) {
        const double dt = p.delta(bi, t, d), dtp = p.delta_prime(bi, t, d);
        const double step = evolution_step(dt, dtp, opts.evolution);
        for (std::size_t n = 0; n < N; ++n) {
          const std::size_t k = d * N + n;
          const double an = a(d, n);
          const double vv = input_gain(dtp, an, opts.input) * p.b_prime(bi, t, n) * pair.x_prime(bi, t, d) -
                            input_gain(dt, an, opts.input) * p.b(bi, t, n) * pair.x(bi, t, d);
          v[t * S + k] = vv;
          abar[t * S + k] = std::exp(step * an);
          hist[(t + 1) * S + k] = abar[t * S + k] * hist[t * S + k] + std::abs(vv);
        }
      }
    }

    std::fill(carry.begin(), carry.end(), 0.0);
    for (std::size_t t = L; t-- > 0;) {
      const double* ht = hist.data() + (t + 1) * S;
      const double* hprev = hist.data() + t * S;
      for (std::size_t d = 0; d < D; ++d) {
        const double gy = grad_y(bi, t, d), gyp = grad_y_prime(bi, t, d);
        const double dt = p.delta(bi, t, d), dtp = p.delta_prime(bi, t, d);
        const double step = evolution_step(dt, dtp, opts.evolution);
        const double x = pair.x(bi, t, d), xp = pair.x_prime(bi, t, d);
        double g_step = 0.0, g_dt = 0.0, g_dtp = 0.0, g_x = 0.0, g_xp = 0.0;
        for (std::size_t n = 0; n < N; ++n) {
          const std::size_t k = d * N + n;
          const double an = a(d, n);
          const double ab = abar[t * S + k];
          g.c(bi, t, n) += gy * ht[k];
          g.c_prime(bi, t, n) += gyp * ht[k];
          const double gh = p.c(bi, t, n) * gy + p.c_prime(bi, t, n) * gyp + carry[k];
          carry[k] = ab * gh;

          // abar = exp(step * A)
          const double g_ab = gh * hprev[k];
          g_step += g_ab * an * ab;
          grad_a(d, n) += g_ab * step * ab;

          // u = |v|, v = beta' x' - beta x with beta = gain(delta, A) * b
          const double gv = sign_of(v[t * S + k]) * gh;
          const double bp = p.b_prime(bi, t, n), bb = p.b(bi, t, n);
          const double gain_p = input_gain(dtp, an, opts.input);
          const double gain = input_gain(dt, an, opts.input);
          g_xp += gv * gain_p * bp;
          g_x -= gv * gain * bb;
          const double g_beta_p = gv * xp, g_beta = -gv * x;
          g.b_prime(bi, t, n) += g_beta_p * gain_p;
          g.b(bi, t, n) += g_beta * gain;
          if (opts.input == InputDiscretization::Euler) {
            g_dtp += g_beta_p * bp;
            g_dt += g_beta * bb;
          } else {
            // d/d delta [expm1(delta A)/A] = exp(delta A)
            // d/dA     [expm1(delta A)/A] = (delta A exp(delta A) - expm1(delta A)) / A^2
            const double ep = std::exp(dtp * an), e = std::exp(dt * an);
            g_dtp += g_beta_p * bp * ep;
            g_dt += g_beta * bb * e;
            grad_a(d, n) += g_beta_p * bp * (dtp * an * ep - std::expm1(dtp * an)) / (an * an);
            grad_a(d, n) += g_beta * bb * (dt * an * e - std::expm1(dt * an)) / (an * an);
          }
        }
        switch (opts.evolution) {
          case EvolutionStep::Mean:
            g_dt += 0.5 * g_step;
            g_dtp += 0.5 * g_step;
            break;
          case EvolutionStep::Pre: g_dt += g_step; break;
          case EvolutionStep::Post: g_dtp += g_step; break;
        }
        g.delta(bi, t, d) += g_dt;
        g.delta_prime(bi, t, d) += g_dtp;
        g.x(bi, t, d) += g_x;
        g.x_prime(bi, t, d) += g_xp;
      }
    }
  }
  // A = -exp(a_log) => dA/da_log = A.
  for (std::size_t i = 0; i < g.a_log.size(); ++i) g.a_log[i] = grad_a[i] * a[i];
  return g;
}

double min_abs_difference(const StreamPair& pair, const ScanParams& p, const ScanOptions& opts) {
  p.validate();
  const ScanDims dm = p.dims();
  check_pair(pair, dm);
  const Tensor a = evolution_matrix(p.a_log);
  double m = std::numeric_limits<double>::infinity();
  for (std::size_t bi = 0; bi < dm.batch; ++bi) {
    for (std::size_t t = 0; t < dm.length; ++t) {
      for (std::size_t d = 0; d < dm.width; ++d) {
        for (std::size_t n = 0; n < dm.state; ++n) {
          const double an = a(d, n);
          const double v =
              input_gain(p.delta_prime(bi, t, d), an, opts.input) * p.b_prime(bi, t, n) *
                  pair.x_prime(bi, t, d) -
              input_gain(p.delta(bi, t, d), an, opts.input) * p.b(bi, t, n) * pair.x(bi, t, d);
          m = std::min(m, std::abs(v));
        }
      }
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Parameter prediction

BlockWeights BlockWeights::init(std::size_t D, std::size_t N, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double scale = 1.0 / std::sqrt(static_cast<double>(D));

  auto stream = [&]() {
    StreamWeights w{Tensor({D, D}), Tensor({D, 3}), Tensor({D}), Tensor({D, N}),
                    Tensor({D, N}), Tensor({D, D}), Tensor({D})};
    for (auto& v : w.in_proj.values()) v = normal(rng) * scale;
    for (auto& v : w.conv.values()) v = normal(rng) / std::sqrt(3.0);
    for (auto& v : w.w_b.values()) v = normal(rng) * scale;
    for (auto& v : w.w_c.values()) v = normal(rng) * scale;
    for (auto& v : w.w_delta.values()) v = normal(rng) * 0.1 * scale;
    for (auto& v : w.delta_bias.values()) {
      // Inverse softplus of a step drawn log-uniformly from [0.01, 0.1].
      const double dt = std::exp(std::log(0.01) + unit(rng) * (std::log(0.1) - std::log(0.01)));
      v = dt + std::log(-std::expm1(-dt));
    }
    return w;
  };
  BlockWeights bw{stream(), stream(), Tensor({D, N})};
  for (std::size_t d = 0; d < D; ++d) {
    for (std::size_t n = 0; n < N; ++n) bw.a_log(d, n) = std::log(static_cast<double>(n + 1));
  }
  return bw;
}

namespace {

void check_stream_weights(const StreamWeights& w, std::size_t D, std::size_t N) {
  require_shape(w.in_proj, {D, D}, "in_proj");
  require_shape(w.conv, {D, 3}, "conv");
  require_shape(w.conv_bias, {D}, "conv_bias");
  require_shape(w.w_b, {D, N}, "w_b");
  require_shape(w.w_c, {D, N}, "w_c");
  require_shape(w.w_delta, {D, D}, "w_delta");
  require_shape(w.delta_bias, {D}, "delta_bias");
}

// out[r, :] = in[r, :] * W for rows r of a (rows, K) view.
void matmul_rows(const double* in, std::size_t rows, std::size_t k, const Tensor& w, double* out) {
  const std::size_t m = w.dim(1);
  for (std::size_t r = 0; r < rows; ++r) {
    double* o = out + r * m;
    std::fill(o, o + m, 0.0);
    const double* x = in + r * k;
    for (std::size_t i = 0; i < k; ++i) {
      const double xi = x[i];
      const double* wr = w.data() + i * m;
      for (std::size_t j = 0; j < m; ++j) o[j] += xi * wr[j];
    }
  }
}

struct StreamForward {
  Tensor z, s, x, b, c, draw, delta;
};

StreamForward stream_forward(const Tensor& f, const Tensor& g, const StreamWeights& w,
                             std::size_t B, std::size_t L, std::size_t D, std::size_t N) {
  StreamForward o{Tensor({B, L, D}), Tensor({B, L, D}), Tensor({B, L, D}), Tensor({B, L, N}),
                  Tensor({B, L, N}), Tensor({B, L, D}), Tensor({B, L, D})};
  matmul_rows(f.data(), B * L, D, w.in_proj, o.z.data());
  for (std::size_t bi = 0; bi < B; ++bi) {
    for (std::size_t l = 0; l < L; ++l) {
      for (std::size_t d = 0; d < D; ++d) {
        double s = w.conv_bias[d];
        for (std::size_t k = 0; k < 3; ++k) {
          const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(l + k) - 1;
          if (src < 0 || src >= static_cast<std::ptrdiff_t>(L)) continue;
          s += w.conv(d, k) * o.z(bi, static_cast<std::size_t>(src), d);
        }
        o.s(bi, l, d) = s;
        o.x(bi, l, d) = s * sigmoid(s);
      }
    }
  }
  matmul_rows(g.data(), B * L, D, w.w_b, o.b.data());
  matmul_rows(g.data(), B * L, D, w.w_c, o.c.data());
  matmul_rows(g.data(), B * L, D, w.w_delta, o.draw.data());
  for (std::size_t i = 0; i < o.draw.size(); ++i) {
    o.draw[i] += w.delta_bias[i % D];
    o.delta[i] = softplus(o.draw[i]);
  }
  return o;
}

}  // namespace

Prediction predict_params(const FusionInputs& in, const BlockWeights& w, const PredictOptions& opts) {
  if (in.f_pre.rank() != 3) throw ValidationError("f_pre must be (B, L, D)");
  const std::size_t B = in.f_pre.dim(0), L = in.f_pre.dim(1), D = in.f_pre.dim(2);
  const std::size_t N = w.a_log.rank() == 2 ? w.a_log.dim(1) : 0;
  if (B == 0 || L == 0 || D == 0 || N == 0) throw ValidationError("empty fusion inputs");
  require_shape(in.f_post, {B, L, D}, "f_post");
  require_shape(in.f_text, {B, D}, "f_text");
  require_shape(w.a_log, {D, N}, "a_log");
  check_stream_weights(w.pre, D, N);
  check_stream_weights(w.post, D, N);

  Prediction p;
  p.cache.fused = Tensor({B, L, D});
  if (opts.text_conditioning) {
    for (std::size_t bi = 0; bi < B; ++bi) {
      for (std::size_t l = 0; l < L; ++l) {
        for (std::size_t d = 0; d < D; ++d) {
          p.cache.fused(bi, l, d) = in.f_pre(bi, l, d) * in.f_post(bi, l, d) * in.f_text(bi, d);
        }
      }
    }
  }
  p.cache.g_pre = in.f_pre;
  p.cache.g_post = in.f_post;
  for (std::size_t i = 0; i < p.cache.fused.size(); ++i) {
    p.cache.g_pre[i] += p.cache.fused[i];
    p.cache.g_post[i] += p.cache.fused[i];
  }

  StreamForward pre = stream_forward(in.f_pre, p.cache.g_pre, w.pre, B, L, D, N);
  StreamForward post = stream_forward(in.f_post, p.cache.g_post, w.post, B, L, D, N);

  p.params.a_log = w.a_log;
  p.params.delta = std::move(pre.delta);
  p.params.delta_prime = std::move(post.delta);
  p.params.b = std::move(pre.b);
  p.params.b_prime = std::move(post.b);
  p.params.c = std::move(pre.c);
  p.params.c_prime = std::move(post.c);
  p.pair.x = std::move(pre.x);
  p.pair.x_prime = std::move(post.x);
  p.cache.z_pre = std::move(pre.z);
  p.cache.z_post = std::move(post.z);
  p.cache.s_pre = std::move(pre.s);
  p.cache.s_post = std::move(post.s);
  p.cache.draw_pre = std::move(pre.draw);
  p.cache.draw_post = std::move(post.draw);
  return p;
}

StreamWeightGrads StreamWeightGrads::zeros_like(const StreamWeights& w) {
  return {Tensor(w.in_proj.shape()), Tensor(w.conv.shape()),  Tensor(w.conv_bias.shape()),
          Tensor(w.w_b.shape()),     Tensor(w.w_c.shape()),   Tensor(w.w_delta.shape()),
          Tensor(w.delta_bias.shape())};
}

namespace {

// Gradients for one stream. Writes the gradient w.r.t. its f input (via the
// in_proj path) to grad_f and w.r.t. its G input to grad_g.
void stream_backward(const Tensor& f, const Tensor& g, const Tensor& z, const Tensor& s,
                     const Tensor& draw, const StreamWeights& w, const Tensor& gx,
                     const Tensor& gb, const Tensor& gc, const Tensor& gdelta,
                     StreamWeightGrads& gw, Tensor& grad_f, Tensor& grad_g) {
  const std::size_t B = f.dim(0), L = f.dim(1), D = f.dim(2), N = gb.dim(2);

  // delta = softplus(draw)
  Tensor gdraw(draw.shape());
  for (std::size_t i = 0; i < draw.size(); ++i) gdraw[i] = gdelta[i] * sigmoid(draw[i]);

  grad_g = Tensor({B, L, D});
  for (std::size_t r = 0; r < B * L; ++r) {
    const double* gr = g.data() + r * D;
    double* ggr = grad_g.data() + r * D;
    for (std::size_t i = 0; i < D; ++i) {
      double acc = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const double gbn = gb[r * N + n], gcn = gc[r * N + n];
        acc += gbn * w.w_b(i, n) + gcn * w.w_c(i, n);
        gw.w_b(i, n) += gr[i] * gbn;
        gw.w_c(i, n) += gr[i] * gcn;
      }
      for (std::size_t j = 0; j < D; ++j) {
        const double gd = gdraw[r * D + j];
        acc += gd * w.w_delta(i, j);
        gw.w_delta(i, j) += gr[i] * gd;
      }
      ggr[i] = acc;
    }
    for (std::size_t j = 0; j < D; ++j) gw.delta_bias[j] += gdraw[r * D + j];
  }

  // x = silu(s), s = conv_bias + depthwise conv over l of z.
  Tensor gz({B, L, D});
  for (std::size_t bi = 0; bi < B; ++bi) {
    for (std::size_t l = 0; l < L; ++l) {
      for (std::size_t d = 0; d < D; ++d) {
        const double sv = s(bi, l, d), sg = sigmoid(sv);
        const double gs = gx(bi, l, d) * sg * (1.0 + sv * (1.0 - sg));
        gw.conv_bias[d] += gs;
        for (std::size_t k = 0; k < 3; ++k) {
          const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(l + k) - 1;
          if (src < 0 || src >= static_cast<std::ptrdiff_t>(L)) continue;
          const auto sl = static_cast<std::size_t>(src);
          gw.conv(d, k) += gs * z(bi, sl, d);
          gz(bi, sl, d) += gs * w.conv(d, k);
        }
      }
    }
  }
  // z = f * in_proj
  grad_f = Tensor({B, L, D});
  for (std::size_t r = 0; r < B * L; ++r) {
    const double* fr = f.data() + r * D;
    const double* gzr = gz.data() + r * D;
    double* gfr = grad_f.data() + r * D;
    for (std::size_t i = 0; i < D; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < D; ++j) {
        acc += gzr[j] * w.in_proj(i, j);
        gw.in_proj(i, j) += fr[i] * gzr[j];
      }
      gfr[i] = acc;
    }
  }
}

}  // namespace

BlockGrads predict_params_backward(const FusionInputs& in, const BlockWeights& w,
                                   const Prediction& pred, const ScanGrads& sg,
                                   const PredictOptions& opts) {
  const std::size_t B = in.f_pre.dim(0), L = in.f_pre.dim(1), D = in.f_pre.dim(2);
  BlockGrads g;
  g.pre = StreamWeightGrads::zeros_like(w.pre);
  g.post = StreamWeightGrads::zeros_like(w.post);
  g.a_log = sg.a_log;

  Tensor gf_pre, gg_pre, gf_post, gg_post;
  stream_backward(in.f_pre, pred.cache.g_pre, pred.cache.z_pre, pred.cache.s_pre,
                  pred.cache.draw_pre, w.pre, sg.x, sg.b, sg.c, sg.delta, g.pre, gf_pre, gg_pre);
  stream_backward(in.f_post, pred.cache.g_post, pred.cache.z_post, pred.cache.s_post,
                  pred.cache.draw_post, w.post, sg.x_prime, sg.b_prime, sg.c_prime,
                  sg.delta_prime, g.post, gf_post, gg_post);

  // G_pre = fused + f_pre, G_post = fused + f_post.
  g.f_pre = gf_pre;
  g.f_post = gf_post;
  g.f_text = Tensor({B, D});
  for (std::size_t i = 0; i < g.f_pre.size(); ++i) {
    g.f_pre[i] += gg_pre[i];
    g.f_post[i] += gg_post[i];
  }
  if (opts.text_conditioning) {
    for (std::size_t bi = 0; bi < B; ++bi) {
      for (std::size_t l = 0; l < L; ++l) {
        for (std::size_t d = 0; d < D; ++d) {
          const double gfused = gg_pre(bi, l, d) + gg_post(bi, l, d);
          const double fp = in.f_pre(bi, l, d), fq = in.f_post(bi, l, d), ft = in.f_text(bi, d);
          g.f_pre(bi, l, d) += gfused * fq * ft;
          g.f_post(bi, l, d) += gfused * fp * ft;
          g.f_text(bi, d) += gfused * fp * fq;
        }
      }
    }
  }
  return g;
}

BlockForward block_forward(const FusionInputs& inputs, const BlockWeights& weights,
                           const PredictOptions& popts, const ScanOptions& sopts) {
  BlockForward f;
  f.pred = predict_params(inputs, weights, popts);
  f.out = change_scan_fast(f.pred.pair, f.pred.params, sopts);
  return f;
}

BlockGrads block_backward(const FusionInputs& inputs, const BlockWeights& weights,
                          const BlockForward& fwd, const Tensor& grad_y,
                          const Tensor& grad_y_prime, const PredictOptions& popts,
                          const ScanOptions& sopts) {
  const ScanGrads sg =
      change_scan_backward(fwd.pred.pair, fwd.pred.params, grad_y, grad_y_prime, sopts);
  return predict_params_backward(inputs, weights, fwd.pred, sg, popts);
}

// ---------------------------------------------------------------------------
// Gradient verification

bool GradcheckReport::pass() const {
  if (groups.empty()) return false;
  return std::all_of(groups.begin(), groups.end(), [](const auto& g) { return g.pass; });
}

double max_relative_error(const Tensor& analytic, const Tensor& numeric, double floor) {
  if (!analytic.same_shape(numeric)) throw ValidationError("gradient shapes differ");
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double a = analytic[i], n = numeric[i];
    const double denom = std::max({std::abs(a), std::abs(n), floor});
    worst = std::max(worst, std::abs(a - n) / denom);
  }
  return worst;
}

namespace {

double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

void fill_normal(Tensor& t, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  for (auto& v : t.values()) v = normal(rng);
}

// Central differences of `loss` w.r.t. every element of `target`.
Tensor numeric_gradient(Tensor& target, double step, const std::function<double()>& loss) {
  Tensor g(target.shape());
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double saved = target[i];
    target[i] = saved + step;
    const double up = loss();
    target[i] = saved - step;
    const double down = loss();
    target[i] = saved;
    g[i] = (up - down) / (2.0 * step);
  }
  return g;
}

Tensor scaled(const Tensor& t, double s) {
  Tensor o = t;
  for (auto& v : o.values()) v *= s;
  return o;
}

}  // namespace

GradcheckReport gradcheck(const ScanDims& dims, std::uint64_t seed, const GradcheckOptions& opts) {
  if (dims.batch == 0 || dims.length == 0 || dims.width == 0 || dims.state == 0) {
    throw ValidationError("gradcheck dimensions must all be at least 1");
  }
  const std::size_t B = dims.batch, L = dims.length, D = dims.width, N = dims.state;
  GradcheckReport rep;
  rep.dims = dims;
  rep.seed = seed;
  rep.threshold = opts.threshold;
  rep.step = opts.step;

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto add_group = [&](std::string name, const Tensor& analytic, const Tensor& numeric) {
    const double err = max_relative_error(scaled(analytic, opts.analytic_scale), numeric);
    rep.groups.push_back({std::move(name), analytic.size(), err, err <= opts.threshold});
  };

  // Scan-level groups on directly sampled parameters.
  StreamPair pair{Tensor({B, L, D}), Tensor({B, L, D})};
  ScanParams p{Tensor({D, N}),    Tensor({B, L, D}), Tensor({B, L, D}), Tensor({B, L, N}),
               Tensor({B, L, N}), Tensor({B, L, N}), Tensor({B, L, N})};
  int attempts = 0;
  double margin = 0.0;
  do {
    if (++attempts > opts.max_attempts) {
      throw ValidationError("could not sample scan inputs satisfying the |v| margin");
    }
    fill_normal(pair.x, rng);
    fill_normal(pair.x_prime, rng);
    fill_normal(p.b, rng);
    fill_normal(p.b_prime, rng);
    fill_normal(p.c, rng);
    fill_normal(p.c_prime, rng);
    for (auto& v : p.a_log.values()) v = -1.0 + 2.0 * unit(rng);
    for (Tensor* t : {&p.delta, &p.delta_prime}) {
      for (auto& v : t->values()) v = std::exp(std::log(0.05) + unit(rng) * (0.0 - std::log(0.05)));
    }
    margin = min_abs_difference(pair, p, opts.scan);
  } while (margin < opts.margin);

  Tensor gy({B, L, D}), gyp({B, L, D});
  fill_normal(gy, rng);
  fill_normal(gyp, rng);
  auto scan_loss = [&]() {
    const ScanOutput o = change_scan_ref(pair, p, opts.scan);
    return dot(gy, o.y) + dot(gyp, o.y_prime);
  };
  const ScanGrads sg = change_scan_backward(pair, p, gy, gyp, opts.scan);
  add_group("scan.x", sg.x, numeric_gradient(pair.x, opts.step, scan_loss));
  add_group("scan.x_prime", sg.x_prime, numeric_gradient(pair.x_prime, opts.step, scan_loss));
  add_group("scan.b", sg.b, numeric_gradient(p.b, opts.step, scan_loss));
  add_group("scan.b_prime", sg.b_prime, numeric_gradient(p.b_prime, opts.step, scan_loss));
  add_group("scan.c", sg.c, numeric_gradient(p.c, opts.step, scan_loss));
  add_group("scan.c_prime", sg.c_prime, numeric_gradient(p.c_prime, opts.step, scan_loss));
  add_group("scan.delta", sg.delta, numeric_gradient(p.delta, opts.step, scan_loss));
  add_group("scan.delta_prime", sg.delta_prime, numeric_gradient(p.delta_prime, opts.step, scan_loss));
  add_group("scan.a_log", sg.a_log, numeric_gradient(p.a_log, opts.step, scan_loss));
  rep.min_margin = margin;
  rep.attempts = attempts;

  if (!opts.include_block) return rep;

  // Block-level groups: text-conditioned prediction followed by the scan.
  FusionInputs in{Tensor({B, L, D}), Tensor({B, L, D}), Tensor({B, D})};
  BlockWeights w;
  do {
    if (++attempts > opts.max_attempts) {
      throw ValidationError("could not sample block inputs satisfying the |v| margin");
    }
    fill_normal(in.f_pre, rng);
    fill_normal(in.f_post, rng);
    fill_normal(in.f_text, rng);
    w = BlockWeights::init(D, N, rng());
    // Larger steps than the training initialisation keep |v| clear of zero.
    for (StreamWeights* sw : {&w.pre, &w.post}) {
      for (auto& v : sw->delta_bias.values()) v = 0.5 * unit(rng);
      fill_normal(sw->conv_bias, rng, 0.5);
    }
    const Prediction pred = predict_params(in, w);
    margin = min_abs_difference(pred.pair, pred.params, opts.scan);
  } while (margin < opts.margin);
  rep.min_margin = std::min(rep.min_margin, margin);
  rep.attempts = attempts;

  auto block_loss = [&]() {
    const BlockForward f = block_forward(in, w, {}, opts.scan);
    return dot(gy, f.out.y) + dot(gyp, f.out.y_prime);
  };
  const BlockForward fwd = block_forward(in, w, {}, opts.scan);
  const BlockGrads bg = block_backward(in, w, fwd, gy, gyp, {}, opts.scan);
  add_group("block.f_pre", bg.f_pre, numeric_gradient(in.f_pre, opts.step, block_loss));
  add_group("block.f_post", bg.f_post, numeric_gradient(in.f_post, opts.step, block_loss));
  add_group("block.f_text", bg.f_text, numeric_gradient(in.f_text, opts.step, block_loss));
  add_group("block.a_log", bg.a_log, numeric_gradient(w.a_log, opts.step, block_loss));
  for (auto [side, sw, gw] : {std::tuple{"pre", &w.pre, &bg.pre}, std::tuple{"post", &w.post, &bg.post}}) {
    const std::string pfx = std::string("block.") + side + ".";
    add_group(pfx + "in_proj", gw->in_proj, numeric_gradient(sw->in_proj, opts.step, block_loss));
    add_group(pfx + "conv", gw->conv, numeric_gradient(sw->conv, opts.step, block_loss));
    add_group(pfx + "conv_bias", gw->conv_bias, numeric_gradient(sw->conv_bias, opts.step, block_loss));
    add_group(pfx + "w_b", gw->w_b, numeric_gradient(sw->w_b, opts.step, block_loss));
    add_group(pfx + "w_c", gw->w_c, numeric_gradient(sw->w_c, opts.step, block_loss));
    add_group(pfx + "w_delta", gw->w_delta, numeric_gradient(sw->w_delta, opts.step, block_loss));
    add_group(pfx + "delta_bias", gw->delta_bias,
              numeric_gradient(sw->delta_bias, opts.step, block_loss));
  }
  return rep;
}

std::string report_to_json(const GradcheckReport& r) {
  std::ostringstream os;
  char buf[64];
  os << "{\n";
  os << "  \"dims\": {\"B\": " << r.dims.batch << ", \"L\": " << r.dims.length
     << ", \"D\": " << r.dims.width << ", \"N\": " << r.dims.state << "},\n";
  os << "  \"seed\": " << r.seed << ",\n";
  std::snprintf(buf, sizeof(buf), "%.3e", r.step);
  os << "  \"step\": " << buf << ",\n";
  std::snprintf(buf, sizeof(buf), "%.3e", r.threshold);
  os << "  \"threshold\": " << buf << ",\n";
  std::snprintf(buf, sizeof(buf), "%.6e", r.min_margin);
  os << "  \"min_margin\": " << buf << ",\n";
  os << "  \"attempts\": " << r.attempts << ",\n";
  os << "  \"pass\": " << (r.pass() ? "true" : "false") << ",\n";
  os << "  \"groups\": [";
  for (std::size_t i = 0; i < r.groups.size(); ++i) {
    const auto& g = r.groups[i];
    std::snprintf(buf, sizeof(buf), "%.6e", g.max_rel_error);
    os << (i ? ",\n" : "\n") << "    {\"name\": \"" << g.name << "\", \"elements\": " << g.elements
       << ", \"max_rel_error\": " << buf << ", \"pass\": " << (g.pass ? "true" : "false") << "}";
  }
  os << "\n  ]\n}\n";
  return os.str();
}

}  // namespace cdvqa::tcssm
