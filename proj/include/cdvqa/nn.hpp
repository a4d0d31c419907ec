// Copyright 2026 The cdvqa Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once
//
// Small double-precision layers with explicit caches and hand-written
// backward passes. Images are (B, C, H, W) tensors; feature rows are (B, F).
//
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "cdvqa/tensor.hpp"

namespace cdvqa::nn {

// A trainable tensor and its gradient accumulator, addressed by name.
struct ParamRef {
  std::string name;
  Tensor* value = nullptr;
  Tensor* grad = nullptr;
};

void zero_grads(const std::vector<ParamRef>& params);

// 3x3 convolution, stride 1, zero padding 1.
struct Conv3x3 {
  Tensor weight, weight_grad;  // (Cout, Cin * 9), column index = (c * 3 + ky) * 3 + kx
  Tensor bias, bias_grad;      // (Cout), or empty when the layer has no bias

  // Convolutions feeding batch norm should pass with_bias = false: the
  // normalisation cancels a per-channel bias exactly.
  static Conv3x3 init(std::size_t cin, std::size_t cout, std::mt19937_64& rng, bool with_bias = true);
  std::size_t in_channels() const { return weight.dim(1) / 9; }
  std::size_t out_channels() const { return weight.dim(0); }

  Tensor forward(const Tensor& x) const;
  // Accumulates parameter gradients; returns dL/dx.
  Tensor backward(const Tensor& x, const Tensor& grad_y);
  void append_params(const std::string& prefix, std::vector<ParamRef>& out);
};

struct BatchNormCache {
  Tensor x_hat;
  std::vector<double> inv_std;
  bool training = true;
};

struct BatchNorm2d {
  Tensor gamma, gamma_grad;
  Tensor beta, beta_grad;
  Tensor running_mean, running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  static BatchNorm2d init(std::size_t channels);
  // Training mode normalises with batch statistics (biased variance) and
  // updates the running estimates (unbiased variance) unless `update_running`
  // is false.
  Tensor forward(const Tensor& x, BatchNormCache& cache, bool training, bool update_running = true);
  Tensor backward(const BatchNormCache& cache, const Tensor& grad_y);
  void append_params(const std::string& prefix, std::vector<ParamRef>& out);
};

Tensor relu(const Tensor& x);
// grad_y masked by y > 0.
Tensor relu_backward(const Tensor& y, const Tensor& grad_y);

// 2x2 max-pool, stride 2. H and W must be even. `argmax` receives the flat
// input index of each output's winner (first maximum in scan order).
Tensor maxpool2(const Tensor& x, std::vector<std::size_t>& argmax);
Tensor maxpool2_backward(const std::vector<std::size_t>& argmax, const std::vector<std::size_t>& in_shape,
                         const Tensor& grad_y);

struct Linear {
  Tensor weight, weight_grad;  // (out, in)
  Tensor bias, bias_grad;      // (out)

  // He-normal weights; zero bias. `zero` gives all-zero weights.
  static Linear init(std::size_t in, std::size_t out, std::mt19937_64& rng, bool zero = false);
  Tensor forward(const Tensor& x) const;  // (B, in) -> (B, out)
  Tensor backward(const Tensor& x, const Tensor& grad_y);
  void append_params(const std::string& prefix, std::vector<ParamRef>& out);
};

struct CrossEntropy {
  double loss = 0.0;  // mean over rows
  Tensor grad;        // dloss/dlogits, (B, V)
};

// Log-softmax cross-entropy averaged over rows. Throws ValidationError for a
// gold index outside [0, V).
CrossEntropy softmax_cross_entropy(const Tensor& logits, const std::vector<std::size_t>& gold);

// Adam with coupled L2 weight decay (decay added to the gradient).
class Adam {
 public:
  Adam(std::vector<ParamRef> params, double lr, double weight_decay, double beta1 = 0.9,
       double beta2 = 0.999, double eps = 1e-8);
  void step();
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  int steps() const { return t_; }

 private:
  std::vector<ParamRef> params_;
  std::vector<Tensor> m_, v_;
  double lr_, weight_decay_, beta1_, beta2_, eps_;
  int t_ = 0;
};

}  // namespace cdvqa::nn
