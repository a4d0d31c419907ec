// Copyright 2026 The cdvqa Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once
//
// Text-conditioned change scan.
//
// Two token streams x (pre-event) and x' (post-event) drive one shared hidden
// state through the elementwise L1 difference of their discretised inputs:
//
//   h_t  = abar_t * h_{t-1} + | bbar'_t x'_t - bbar_t x_t |
//   y_t  = C_t  h_t
//   y'_t = C'_t h_t
//
// with diagonal dynamics A = -exp(a_log) of shape (D, N). The per-token
// parameters (B, C, delta and their primed twins) are predicted from the two
// visual feature streams after a Hadamard interaction with a text embedding.
//
#include <cstdint>
#include <string>
#include <vector>

#include "cdvqa/tensor.hpp"

namespace cdvqa::tcssm {

struct ScanDims {
  std::size_t batch = 1;   // B
  std::size_t length = 1;  // L, flattened spatial tokens
  std::size_t width = 1;   // D, channels
  std::size_t state = 1;   // N
};

// How the input matrix is discretised.
//   Euler:    bbar = delta * B           (selective-SSM simplification)
//   ExactZoh: bbar = (exp(delta A) - 1) / A * B
enum class InputDiscretization : std::uint8_t { Euler, ExactZoh };

// Which step size discretises the shared evolution abar = exp(delta_A * A).
enum class EvolutionStep : std::uint8_t { Mean, Pre, Post };

struct ScanOptions {
  InputDiscretization input = InputDiscretization::Euler;
  EvolutionStep evolution = EvolutionStep::Mean;
};

struct ScanParams {
  Tensor a_log;        // (D, N); A = -exp(a_log)
  Tensor delta;        // (B, L, D), > 0
  Tensor delta_prime;  // (B, L, D), > 0
  Tensor b;            // (B, L, N)
  Tensor b_prime;      // (B, L, N)
  Tensor c;            // (B, L, N)
  Tensor c_prime;      // (B, L, N)

  ScanDims dims() const;
  // Shapes, positivity of both step tensors, finiteness of a_log.
  void validate() const;
};

struct StreamPair {
  Tensor x;        // (B, L, D)
  Tensor x_prime;  // (B, L, D)
};

struct ScanOutput {
  Tensor y;        // (B, L, D)
  Tensor y_prime;  // (B, L, D)
  Tensor h_last;   // (B, D, N)
};

struct Discretized {
  Tensor a_bar;  // (B, L, D, N)
  Tensor b_bar;  // (B, L, D, N), multiplies x_t[d]
};

// Zero-order-hold evolution plus the chosen input discretisation for one
// stream. Throws ValidationError for non-positive delta.
Discretized zoh_discretize(const Tensor& a_log, const Tensor& delta, const Tensor& b,
                           InputDiscretization input = InputDiscretization::Euler);

// Straight sequential recurrence, h_0 = 0.
ScanOutput change_scan_ref(const StreamPair& pair, const ScanParams& params,
                           const ScanOptions& opts = {});

// Same recurrence evaluated as a chunked first-order linear scan: the L1 input
// terms are formed up front, then each chunk is scanned from a zero carry and
// the carries are combined in sequence.
ScanOutput change_scan_fast(const StreamPair& pair, const ScanParams& params,
                            const ScanOptions& opts = {}, std::size_t chunk = 64);

// Element of the linear-recurrence monoid: h -> a * h + u.
struct ScanElement {
  double a = 1.0;
  double u = 0.0;
};
// Apply `first`, then `second`.
inline ScanElement combine(const ScanElement& first, const ScanElement& second) {
  return {first.a * second.a, second.a * first.u + second.u};
}

struct ScanGrads {
  Tensor x, x_prime;
  Tensor b, b_prime;
  Tensor c, c_prime;
  Tensor delta, delta_prime;
  Tensor a_log;
};

// Reverse-time adjoint of change_scan_ref. The forward states are recomputed.
// The subgradient of |v| at v = 0 is taken as 0.
ScanGrads change_scan_backward(const StreamPair& pair, const ScanParams& params,
                               const Tensor& grad_y, const Tensor& grad_y_prime,
                               const ScanOptions& opts = {});

// Smallest |bbar'x' - bbar x| over all (b, t, d, n); the finite-difference
// check is only meaningful away from the kink of |.|.
double min_abs_difference(const StreamPair& pair, const ScanParams& params,
                          const ScanOptions& opts = {});

// ---------------------------------------------------------------------------
// Text-conditioned parameter prediction

struct FusionInputs {
  Tensor f_pre;   // (B, L, D)
  Tensor f_post;  // (B, L, D)
  Tensor f_text;  // (B, D), broadcast over L
};

// Projection weights for one stream.
struct StreamWeights {
  Tensor in_proj;     // (D, D)   token -> stream input
  Tensor conv;        // (D, 3)   depthwise, same padding, taps at l-1, l, l+1
  Tensor conv_bias;   // (D)
  Tensor w_b;         // (D, N)
  Tensor w_c;         // (D, N)
  Tensor w_delta;     // (D, D)
  Tensor delta_bias;  // (D)
};

struct BlockWeights {
  StreamWeights pre;
  StreamWeights post;
  Tensor a_log;  // (D, N)

  // Random initialisation. a_log[d][n] = log(n + 1) so A spans -1..-N; delta
  // biases give softplus outputs log-uniform in [0.01, 0.1].
  static BlockWeights init(std::size_t width, std::size_t state, std::uint64_t seed);
  std::size_t width() const { return a_log.dim(0); }
  std::size_t state() const { return a_log.dim(1); }
  void tie_post_to_pre() { post = pre; }
};

struct PredictOptions {
  // false removes the text interaction from the graph: G_pre = f_pre,
  // G_post = f_post and f_text receives no gradient.
  bool text_conditioning = true;
};

// Intermediate values kept for the backward pass.
struct PredictCache {
  Tensor fused;                 // f_pre * f_post * f_text
  Tensor g_pre, g_post;         // fused + f
  Tensor z_pre, z_post;         // in_proj outputs
  Tensor s_pre, s_post;         // conv outputs (SiLU inputs)
  Tensor draw_pre, draw_post;   // delta pre-activations incl. bias
};

struct Prediction {
  ScanParams params;
  StreamPair pair;
  PredictCache cache;
};

// Throws ValidationError on shape mismatches.
Prediction predict_params(const FusionInputs& inputs, const BlockWeights& weights,
                          const PredictOptions& opts = {});

struct StreamWeightGrads {
  Tensor in_proj, conv, conv_bias, w_b, w_c, w_delta, delta_bias;
  static StreamWeightGrads zeros_like(const StreamWeights& w);
};

struct BlockGrads {
  Tensor f_pre, f_post, f_text;
  StreamWeightGrads pre, post;
  Tensor a_log;
};

// Chains scan gradients back through the prediction. `scan_grads.a_log` is
// copied into the result.
BlockGrads predict_params_backward(const FusionInputs& inputs, const BlockWeights& weights,
                                   const Prediction& pred, const ScanGrads& scan_grads,
                                   const PredictOptions& opts = {});

// predict_params followed by the change scan.
struct BlockForward {
  Prediction pred;
  ScanOutput out;
};
BlockForward block_forward(const FusionInputs& inputs, const BlockWeights& weights,
                           const PredictOptions& popts = {}, const ScanOptions& sopts = {});
BlockGrads block_backward(const FusionInputs& inputs, const BlockWeights& weights,
                          const BlockForward& fwd, const Tensor& grad_y,
                          const Tensor& grad_y_prime, const PredictOptions& popts = {},
                          const ScanOptions& sopts = {});

// ---------------------------------------------------------------------------
// Gradient verification

struct GradcheckOptions {
  double step = 1e-5;
  double threshold = 1e-4;
  double margin = 1e-3;
  // Multiplies every analytic gradient before comparison (fault injection).
  double analytic_scale = 1.0;
  ScanOptions scan;
  bool include_block = true;
  int max_attempts = 10000;
};

struct GradcheckGroup {
  std::string name;
  std::size_t elements = 0;
  double max_rel_error = 0.0;
  bool pass = false;
};

struct GradcheckReport {
  ScanDims dims;
  std::uint64_t seed = 0;
  double threshold = 0.0;
  double step = 0.0;
  double min_margin = 0.0;
  int attempts = 0;
  std::vector<GradcheckGroup> groups;
  bool pass() const;
};

// Elementwise |a - n| / max(|a|, |n|, floor), maximised over the group. The
// floor keeps finite-difference round-off on near-zero entries from dominating.
double max_relative_error(const Tensor& analytic, const Tensor& numeric, double floor = 1e-6);

// Compares every analytic gradient of the scan (and, optionally, of the whole
// block) with central finite differences of L = <gy, y> + <gy', y'> for random
// upstream gradients. Inputs are resampled until the |v| margin holds.
GradcheckReport gradcheck(const ScanDims& dims, std::uint64_t seed,
                          const GradcheckOptions& opts = {});

std::string report_to_json(const GradcheckReport& report);

}  // namespace cdvqa::tcssm
