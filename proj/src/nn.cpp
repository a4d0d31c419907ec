// Copyright 2026 The cdvqa Authors
// SPDX-License-Identifier: Apache-2.0
#include "cdvqa/nn.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <limits>

namespace cdvqa::nn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

void require_rank4(const Tensor& x, const char* what) {
  if (x.rank() != 4) throw ValidationError(std::string(what) + " expects a (B,C,H,W) tensor");
}

// (Cin*9, H*W) patch matrix of one image.
void im2col(const double* img, std::size_t C, std::size_t H, std::size_t W, RowMat& col) {
  col.setZero(static_cast<Eigen::Index>(C * 9), static_cast<Eigen::Index>(H * W));
  for (std::size_t c = 0; c < C; ++c) {
    const double* plane = img + c * H * W;
    for (std::size_t ky = 0; ky < 3; ++ky) {
      for (std::size_t kx = 0; kx < 3; ++kx) {
        double* row = col.row(static_cast<Eigen::Index>((c * 3 + ky) * 3 + kx)).data();
        for (std::size_t y = 0; y < H; ++y) {
          const long sy = static_cast<long>(y + ky) - 1;
          if (sy < 0 || sy >= static_cast<long>(H)) continue;
          for (std::size_t x = 0; x < W; ++x) {
            const long sx = static_cast<long>(x + kx) - 1;
            if (sx < 0 || sx >= static_cast<long>(W)) continue;
            row[y * W + x] = plane[sy * W + sx];
          }
        }
      }
    }
  }
}

void col2im(const RowMat& col, std::size_t C, std::size_t H, std::size_t W, double* img) {
  for (std::size_t c = 0; c < C; ++c) {
    double* plane = img + c * H * W;
    for (std::size_t ky = 0; ky < 3; ++ky) {
      for (std::size_t kx = 0; kx < 3; ++kx) {
        const double* row = col.row(static_cast<Eigen::Index>((c * 3 + ky) * 3 + kx)).data();
        for (std::size_t y = 0; y < H; ++y) {
          const long sy = static_cast<long>(y + ky) - 1;
          if (sy < 0 || sy >= static_cast<long>(H)) continue;
          for (std::size_t x = 0; x < W; ++x) {
            const long sx = static_cast<long>(x + kx) - 1;
            if (sx < 0 || sx >= static_cast<long>(W)) continue;
            plane[sy * W + sx] += row[y * W + x];
          }
        }
      }
    }
  }
}

}  // namespace

void zero_grads(const std::vector<ParamRef>& params) {
  for (const auto& p : params) p.grad->fill(0.0);
}

Conv3x3 Conv3x3::init(std::size_t cin, std::size_t cout, std::mt19937_64& rng, bool with_bias) {
  Conv3x3 c{Tensor({cout, cin * 9}), Tensor({cout, cin * 9}), Tensor(), Tensor()};
  if (with_bias) c.bias = c.bias_grad = Tensor({cout});
  std::normal_distribution<double> n(0.0, std::sqrt(2.0 / static_cast<double>(cin * 9)));
  for (auto& v : c.weight.values()) v = n(rng);
  return c;
}

Tensor Conv3x3::forward(const Tensor& x) const {
  require_rank4(x, "conv3x3");
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), K = out_channels();
  if (C != in_channels()) throw ValidationError("conv3x3 input has " + std::to_string(C) + " channels");
  Tensor y({B, K, H, W});
  ConstMapMat w(weight.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(C * 9));
  RowMat col;
  for (std::size_t i = 0; i < B; ++i) {
    im2col(x.data() + i * C * H * W, C, H, W, col);
    MapMat out(y.data() + i * K * H * W, static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(H * W));
    out.noalias() = w * col;
    if (!bias.empty()) out.colwise() += Eigen::Map<const Eigen::VectorXd>(bias.data(), static_cast<Eigen::Index>(K));
  }
  return y;
}

Tensor Conv3x3::backward(const Tensor& x, const Tensor& grad_y) {
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), K = out_channels();
  require_shape(grad_y, {B, K, H, W}, "conv3x3 grad");
  Tensor gx(x.shape());
  ConstMapMat w(weight.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(C * 9));
  MapMat gw(weight_grad.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(C * 9));
  RowMat col, gcol;
  for (std::size_t i = 0; i < B; ++i) {
    im2col(x.data() + i * C * H * W, C, H, W, col);
    ConstMapMat gy(grad_y.data() + i * K * H * W, static_cast<Eigen::Index>(K),
                   static_cast<Eigen::Index>(H * W));
    gw.noalias() += gy * col.transpose();
    if (!bias.empty()) {
      for (std::size_t k = 0; k < K; ++k) bias_grad[k] += gy.row(static_cast<Eigen::Index>(k)).sum();
    }
    gcol.noalias() = w.transpose() * gy;
    col2im(gcol, C, H, W, gx.data() + i * C * H * W);
  }
  return gx;
}

void Conv3x3::append_params(const std::string& prefix, std::vector<ParamRef>& out) {
  out.push_back({prefix + ".weight", &weight, &weight_grad});
  if (!bias.empty()) out.push_back({prefix + ".bias", &bias, &bias_grad});
}

BatchNorm2d BatchNorm2d::init(std::size_t channels) {
  return BatchNorm2d{Tensor({channels}, 1.0), Tensor({channels}), Tensor({channels}), Tensor({channels}),
                     Tensor({channels}), Tensor({channels}, 1.0)};
}

Tensor BatchNorm2d::forward(const Tensor& x, BatchNormCache& cache, bool training, bool update_running) {
  require_rank4(x, "batchnorm");
  const std::size_t B = x.dim(0), C = x.dim(1), S = x.dim(2) * x.dim(3);
  if (C != gamma.size()) throw ValidationError("batchnorm channel mismatch");
  const double m = static_cast<double>(B * S);
  if (training && B * S < 2) throw ValidationError("batchnorm needs at least two values per channel");
  cache.training = training;
  cache.x_hat = Tensor(x.shape());
  cache.inv_std.assign(C, 0.0);
  Tensor y(x.shape());
  for (std::size_t c = 0; c < C; ++c) {
    double mean = running_mean[c], var = running_var[c];
    if (training) {
      double s = 0.0;
      for (std::size_t b = 0; b < B; ++b) {
        const double* p = x.data() + (b * C + c) * S;
        for (std::size_t i = 0; i < S; ++i) s += p[i];
      }
      mean = s / m;
      double ss = 0.0;
      for (std::size_t b = 0; b < B; ++b) {
        const double* p = x.data() + (b * C + c) * S;
        for (std::size_t i = 0; i < S; ++i) ss += (p[i] - mean) * (p[i] - mean);
      }
      var = ss / m;
      if (update_running) {
        running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * mean;
        running_var[c] = (1.0 - momentum) * running_var[c] + momentum * ss / (m - 1.0);
      }
    }
    const double inv = 1.0 / std::sqrt(var + eps);
    cache.inv_std[c] = inv;
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t off = (b * C + c) * S;
      for (std::size_t i = 0; i < S; ++i) {
        const double xh = (x[off + i] - mean) * inv;
        cache.x_hat[off + i] = xh;
        y[off + i] = gamma[c] * xh + beta[c];
      }
    }
  }
  return y;
}

Tensor BatchNorm2d::backward(const BatchNormCache& cache, const Tensor& grad_y) {
  const auto& shape = cache.x_hat.shape();
  require_shape(grad_y, shape, "batchnorm grad");
  const std::size_t B = shape[0], C = shape[1], S = shape[2] * shape[3];
  const double m = static_cast<double>(B * S);
  Tensor gx(shape);
  for (std::size_t c = 0; c < C; ++c) {
    double sum_g = 0.0, sum_gx = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t off = (b * C + c) * S;
      for (std::size_t i = 0; i < S; ++i) {
        sum_g += grad_y[off + i];
        sum_gx += grad_y[off + i] * cache.x_hat[off + i];
      }
    }
    beta_grad[c] += sum_g;
    gamma_grad[c] += sum_gx;
    const double k = gamma[c] * cache.inv_std[c];
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t off = (b * C + c) * S;
      for (std::size_t i = 0; i < S; ++i) {
        gx[off + i] = cache.training
                          ? k * (grad_y[off + i] - sum_g / m - cache.x_hat[off + i] * sum_gx / m)
                          : k * grad_y[off + i];
      }
    }
  }
  return gx;
}

void BatchNorm2d::append_params(const std::string& prefix, std::vector<ParamRef>& out) {
  out.push_back({prefix + ".gamma", &gamma, &gamma_grad});
  out.push_back({prefix + ".beta", &beta, &beta_grad});
}

Tensor relu(const Tensor& x) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
  return y;
}

Tensor relu_backward(const Tensor& y, const Tensor& grad_y) {
  Tensor g(y.shape());
  for (std::size_t i = 0; i < y.size(); ++i) g[i] = y[i] > 0.0 ? grad_y[i] : 0.0;
  return g;
}

Tensor maxpool2(const Tensor& x, std::vector<std::size_t>& argmax) {
  require_rank4(x, "maxpool2");
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % 2 || W % 2) throw ValidationError("maxpool2 needs even spatial dims, got " + shape_string(x.shape()));
  const std::size_t h = H / 2, w = W / 2;
  Tensor y({B, C, h, w});
  argmax.assign(y.size(), 0);
  for (std::size_t p = 0; p < B * C; ++p) {
    for (std::size_t oy = 0; oy < h; ++oy) {
      for (std::size_t ox = 0; ox < w; ++ox) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t at = 0;
        for (std::size_t dy = 0; dy < 2; ++dy) {
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = (p * H + 2 * oy + dy) * W + 2 * ox + dx;
            if (x[idx] > best) {
              best = x[idx];
              at = idx;
            }
          }
        }
        const std::size_t o = (p * h + oy) * w + ox;
        y[o] = best;
        argmax[o] = at;
      }
    }
  }
  return y;
}

Tensor maxpool2_backward(const std::vector<std::size_t>& argmax, const std::vector<std::size_t>& in_shape,
                         const Tensor& grad_y) {
  Tensor g(in_shape);
  for (std::size_t o = 0; o < argmax.size(); ++o) g[argmax[o]] += grad_y[o];
  return g;
}

Linear Linear::init(std::size_t in, std::size_t out, std::mt19937_64& rng, bool zero) {
  Linear l{Tensor({out, in}), Tensor({out, in}), Tensor({out}), Tensor({out})};
  if (!zero) {
    std::normal_distribution<double> n(0.0, std::sqrt(2.0 / static_cast<double>(in)));
    for (auto& v : l.weight.values()) v = n(rng);
  }
  return l;
}

Tensor Linear::forward(const Tensor& x) const {
  const std::size_t out = weight.dim(0), in = weight.dim(1);
  if (x.rank() != 2 || x.dim(1) != in) {
    throw ValidationError("linear expects (B," + std::to_string(in) + "), got " + shape_string(x.shape()));
  }
  const std::size_t B = x.dim(0);
  Tensor y({B, out});
  ConstMapMat X(x.data(), static_cast<Eigen::Index>(B), static_cast<Eigen::Index>(in));
  ConstMapMat Wm(weight.data(), static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(in));
  MapMat Y(y.data(), static_cast<Eigen::Index>(B), static_cast<Eigen::Index>(out));
  Y.noalias() = X * Wm.transpose();
  Y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.data(), static_cast<Eigen::Index>(out));
  return y;
}

Tensor Linear::backward(const Tensor& x, const Tensor& grad_y) {
  const std::size_t out = weight.dim(0), in = weight.dim(1), B = x.dim(0);
  require_shape(grad_y, {B, out}, "linear grad");
  ConstMapMat X(x.data(), static_cast<Eigen::Index>(B), static_cast<Eigen::Index>(in));
  ConstMapMat G(grad_y.data(), static_cast<Eigen::Index>(B), static_cast<Eigen::Index>(out));
  ConstMapMat Wm(weight.data(), static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(in));
  MapMat(weight_grad.data(), static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(in)).noalias() +=
      G.transpose() * X;
  Eigen::Map<Eigen::RowVectorXd>(bias_grad.data(), static_cast<Eigen::Index>(out)) += G.colwise().sum();
  Tensor gx({B, in});
  MapMat(gx.data(), static_cast<Eigen::Index>(B), static_cast<Eigen::Index>(in)).noalias() = G * Wm;
  return gx;
}

void Linear::append_params(const std::string& prefix, std::vector<ParamRef>& out) {
  out.push_back({prefix + ".weight", &weight, &weight_grad});
  out.push_back({prefix + ".bias", &bias, &bias_grad});
}

CrossEntropy softmax_cross_entropy(const Tensor& logits, const std::vector<std::size_t>& gold) {
  if (logits.rank() != 2 || logits.dim(0) != gold.size() || gold.empty()) {
    throw ValidationError("cross-entropy expects (B,V) logits with B gold indices");
  }
  const std::size_t B = logits.dim(0), V = logits.dim(1);
  CrossEntropy ce{0.0, Tensor({B, V})};
  for (std::size_t i = 0; i < B; ++i) {
    if (gold[i] >= V) {
      throw ValidationError("gold index " + std::to_string(gold[i]) + " outside vocabulary of " +
                            std::to_string(V));
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < V; ++k) mx = std::max(mx, logits(i, k));
    double z = 0.0;
    for (std::size_t k = 0; k < V; ++k) z += std::exp(logits(i, k) - mx);
    const double lse = mx + std::log(z);
    ce.loss += lse - logits(i, gold[i]);
    for (std::size_t k = 0; k < V; ++k) {
      ce.grad(i, k) = (std::exp(logits(i, k) - lse) - (k == gold[i] ? 1.0 : 0.0)) / static_cast<double>(B);
    }
  }
  ce.loss /= static_cast<double>(B);
  return ce;
}

Adam::Adam(std::vector<ParamRef> params, double lr, double weight_decay, double beta1, double beta2,
           double eps)
    : params_(std::move(params)), lr_(lr), weight_decay_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params_) {
    m_.emplace_back(p.value->shape());
    v_.emplace_back(p.value->shape());
  }
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, t_), c2 = 1.0 - std::pow(beta2_, t_);
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor& w = *params_[k].value;
    const Tensor& g = *params_[k].grad;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i] + weight_decay_ * w[i];
      m_[k][i] = beta1_ * m_[k][i] + (1.0 - beta1_) * gi;
      v_[k][i] = beta2_ * v_[k][i] + (1.0 - beta2_) * gi * gi;
      w[i] -= lr_ * (m_[k][i] / c1) / (std::sqrt(v_[k][i] / c2) + eps_);
    }
  }
}

}  // namespace cdvqa::nn
