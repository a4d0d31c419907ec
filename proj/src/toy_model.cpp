// Copyright 2026 The cdvqa Authors
// SPDX-License-Identifier: Apache-2.0
#include "cdvqa/toy_model.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <thread>

#include "json.hpp"

namespace cdvqa::toy {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// (I, D, h, w) -> (I, h*w, D)
Tensor to_tokens(const Tensor& f) {
  const std::size_t I = f.dim(0), D = f.dim(1), L = f.dim(2) * f.dim(3);
  Tensor t({I, L, D});
  for (std::size_t i = 0; i < I; ++i) {
    for (std::size_t d = 0; d < D; ++d) {
      for (std::size_t l = 0; l < L; ++l) t(i, l, d) = f[(i * D + d) * L + l];
    }
  }
  return t;
}

Tensor from_tokens(const Tensor& t, const std::vector<std::size_t>& shape) {
  Tensor f(shape);
  const std::size_t I = shape[0], D = shape[1], L = shape[2] * shape[3];
  for (std::size_t i = 0; i < I; ++i) {
    for (std::size_t d = 0; d < D; ++d) {
      for (std::size_t l = 0; l < L; ++l) f[(i * D + d) * L + l] = t(i, l, d);
    }
  }
  return f;
}

void add_into(Tensor& dst, const Tensor& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void add_stream(tcssm::StreamWeights& dst, const tcssm::StreamWeightGrads& g) {
  add_into(dst.in_proj, g.in_proj);
  add_into(dst.conv, g.conv);
  add_into(dst.conv_bias, g.conv_bias);
  add_into(dst.w_b, g.w_b);
  add_into(dst.w_c, g.w_c);
  add_into(dst.w_delta, g.w_delta);
  add_into(dst.delta_bias, g.delta_bias);
}

tcssm::StreamWeights zeros_stream(const tcssm::StreamWeights& w) {
  return {Tensor(w.in_proj.shape()), Tensor(w.conv.shape()),   Tensor(w.conv_bias.shape()),
          Tensor(w.w_b.shape()),     Tensor(w.w_c.shape()),    Tensor(w.w_delta.shape()),
          Tensor(w.delta_bias.shape())};
}

void append_stream(const std::string& prefix, tcssm::StreamWeights& w, tcssm::StreamWeights& g,
                   std::vector<nn::ParamRef>& out) {
  out.push_back({prefix + ".in_proj", &w.in_proj, &g.in_proj});
  out.push_back({prefix + ".conv", &w.conv, &g.conv});
  out.push_back({prefix + ".conv_bias", &w.conv_bias, &g.conv_bias});
  out.push_back({prefix + ".w_b", &w.w_b, &g.w_b});
  out.push_back({prefix + ".w_c", &w.w_c, &g.w_c});
  out.push_back({prefix + ".w_delta", &w.w_delta, &g.w_delta});
  out.push_back({prefix + ".delta_bias", &w.delta_bias, &g.delta_bias});
}

// Parameter-free RMS normalisation over the last dimension.
Tensor rms_rows(const Tensor& x, std::vector<double>& scale) {
  const std::size_t D = x.shape().back(), R = x.size() / D;
  Tensor out(x.shape());
  scale.assign(R, 0.0);
  for (std::size_t r = 0; r < R; ++r) {
    double ss = 0.0;
    for (std::size_t d = 0; d < D; ++d) ss += x[r * D + d] * x[r * D + d];
    scale[r] = std::sqrt(ss / static_cast<double>(D) + 1e-8);
    for (std::size_t d = 0; d < D; ++d) out[r * D + d] = x[r * D + d] / scale[r];
  }
  return out;
}

Tensor rms_rows_backward(const Tensor& out, const std::vector<double>& scale, const Tensor& grad_out) {
  const std::size_t D = out.shape().back(), R = out.size() / D;
  Tensor g(out.shape());
  for (std::size_t r = 0; r < R; ++r) {
    double dot = 0.0;
    for (std::size_t d = 0; d < D; ++d) dot += grad_out[r * D + d] * out[r * D + d];
    dot /= static_cast<double>(D);
    for (std::size_t d = 0; d < D; ++d) g[r * D + d] = (grad_out[r * D + d] - out[r * D + d] * dot) / scale[r];
  }
  return g;
}

std::vector<std::vector<std::uint32_t>> tokenize_all(const std::vector<std::string>& texts,
                                                     const ModelConfig& c) {
  std::vector<std::vector<std::uint32_t>> ids;
  ids.reserve(texts.size());
  for (const auto& t : texts) ids.push_back(hash_tokens(t, c.hash_buckets, c.hash_seed));
  return ids;
}

}  // namespace

// ---------------------------------------------------------------------------
// CNN

void CnnSpec::validate() const {
  if (channels.size() < 2) throw ValidationError("cnn needs at least one block");
  if (channels.front() != 3) throw ValidationError("cnn input must have 3 channels");
  for (auto c : channels) {
    if (c == 0) throw ValidationError("cnn channel counts must be positive");
  }
}

Cnn Cnn::init(const CnnSpec& spec, std::mt19937_64& rng) {
  spec.validate();
  Cnn cnn;
  for (std::size_t i = 0; i + 1 < spec.channels.size(); ++i) {
    const auto cin = spec.channels[i], cout = spec.channels[i + 1];
    Block b{nn::Conv3x3::init(cin, cout, rng, false), nn::BatchNorm2d::init(cout),
            nn::Conv3x3::init(cout, cout, rng, false), nn::BatchNorm2d::init(cout)};
    cnn.blocks.push_back(std::move(b));
  }
  return cnn;
}

Tensor Cnn::forward(const Tensor& images, Cache& cache, bool training, bool update_running) {
  cache.assign(blocks.size(), BlockCache{});
  Tensor x = images;
  for (std::size_t k = 0; k < blocks.size(); ++k) {
    auto& b = blocks[k];
    auto& c = cache[k];
    c.in = std::move(x);
    c.a1 = nn::relu(b.bn1.forward(b.conv1.forward(c.in), c.bn1, training, update_running));
    c.a2 = nn::relu(b.bn2.forward(b.conv2.forward(c.a1), c.bn2, training, update_running));
    x = nn::maxpool2(c.a2, c.argmax);
  }
  return x;
}

void Cnn::backward(const Cache& cache, const Tensor& grad_out) {
  Tensor g = grad_out;
  for (std::size_t k = blocks.size(); k-- > 0;) {
    auto& b = blocks[k];
    const auto& c = cache[k];
    g = nn::maxpool2_backward(c.argmax, c.a2.shape(), g);
    g = b.conv2.backward(c.a1, b.bn2.backward(c.bn2, nn::relu_backward(c.a2, g)));
    g = b.conv1.backward(c.in, b.bn1.backward(c.bn1, nn::relu_backward(c.a1, g)));
  }
}

void Cnn::append_params(const std::string& prefix, std::vector<nn::ParamRef>& out) {
  for (std::size_t k = 0; k < blocks.size(); ++k) {
    const std::string p = prefix + ".block" + std::to_string(k);
    blocks[k].conv1.append_params(p + ".conv1", out);
    blocks[k].bn1.append_params(p + ".bn1", out);
    blocks[k].conv2.append_params(p + ".conv2", out);
    blocks[k].bn2.append_params(p + ".bn2", out);
  }
}

double Cnn::kink_margin(const Cache& cache) const {
  double m = std::numeric_limits<double>::infinity();
  auto relu_inputs = [&](const nn::BatchNorm2d& bn, const nn::BatchNormCache& c) {
    const auto& shape = c.x_hat.shape();
    const std::size_t C = shape[1], S = shape[2] * shape[3];
    for (std::size_t i = 0; i < c.x_hat.size(); ++i) {
      const std::size_t ch = (i / S) % C;
      m = std::min(m, std::abs(bn.gamma[ch] * c.x_hat[i] + bn.beta[ch]));
    }
  };
  for (std::size_t k = 0; k < blocks.size(); ++k) {
    const auto& c = cache[k];
    relu_inputs(blocks[k].bn1, c.bn1);
    relu_inputs(blocks[k].bn2, c.bn2);
    const auto& a = c.a2;
    const std::size_t W = a.dim(3), w = W / 2, h = a.dim(2) / 2;
    for (std::size_t o = 0; o < c.argmax.size(); ++o) {
      const double best = a[c.argmax[o]];
      if (best <= 0.0) continue;
      const std::size_t p = o / (h * w), oy = (o / w) % h, ox = o % w;
      for (std::size_t dy = 0; dy < 2; ++dy) {
        for (std::size_t dx = 0; dx < 2; ++dx) {
          const std::size_t idx = (p * a.dim(2) + 2 * oy + dy) * W + 2 * ox + dx;
          if (idx != c.argmax[o]) m = std::min(m, best - a[idx]);
        }
      }
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Text

std::vector<std::uint32_t> hash_tokens(std::string_view text, std::size_t buckets, std::uint64_t seed) {
  if (buckets == 0) throw ValidationError("hash bucket count must be positive");
  std::vector<std::uint32_t> ids;
  std::string word;
  auto flush = [&]() {
    if (word.empty()) return;
    std::uint64_t h = 14695981039346656037ULL;
    for (int i = 0; i < 8; ++i) {
      h ^= (seed >> (8 * i)) & 0xff;
      h *= 1099511628211ULL;
    }
    for (unsigned char ch : word) {
      h ^= ch;
      h *= 1099511628211ULL;
    }
    ids.push_back(static_cast<std::uint32_t>(h % buckets));
    word.clear();
  };
  for (char ch : text) {
    const auto u = static_cast<unsigned char>(ch);
    if (std::isalnum(u)) {
      word.push_back(static_cast<char>(std::tolower(u)));
    } else {
      flush();
    }
  }
  flush();
  return ids;
}

BagEmbedder BagEmbedder::init(std::size_t buckets, std::size_t dim, std::mt19937_64& rng) {
  BagEmbedder e{Tensor({buckets, dim}), Tensor({buckets, dim}), nn::Linear::init(dim, dim, rng)};
  std::normal_distribution<double> n(0.0, 1.0);
  for (auto& v : e.table.values()) v = n(rng);
  return e;
}

Tensor BagEmbedder::forward(const std::vector<std::vector<std::uint32_t>>& ids, Cache& cache) const {
  const std::size_t D = table.dim(1);
  cache.ids = ids;
  cache.bag = Tensor({ids.size(), D});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    for (auto id : ids[i]) {
      if (id >= table.dim(0)) throw ValidationError("token id outside the embedding table");
      for (std::size_t d = 0; d < D; ++d) cache.bag(i, d) += table(id, d);
    }
  }
  cache.out = nn::relu(proj.forward(cache.bag));
  return cache.out;
}

void BagEmbedder::backward(const Cache& cache, const Tensor& grad_out) {
  const Tensor gbag = proj.backward(cache.bag, nn::relu_backward(cache.out, grad_out));
  const std::size_t D = table.dim(1);
  for (std::size_t i = 0; i < cache.ids.size(); ++i) {
    for (auto id : cache.ids[i]) {
      for (std::size_t d = 0; d < D; ++d) table_grad(id, d) += gbag(i, d);
    }
  }
}

void BagEmbedder::append_params(const std::string& prefix, std::vector<nn::ParamRef>& out) {
  out.push_back({prefix + ".table", &table, &table_grad});
  proj.append_params(prefix + ".proj", out);
}

// ---------------------------------------------------------------------------
// Fusion

std::string_view fusion_name(Fusion f) {
  switch (f) {
    case Fusion::Mul: return "mul";
    case Fusion::Sum: return "sum";
    case Fusion::Concat: return "concat";
    case Fusion::Sub: return "sub";
    case Fusion::NSub: return "nsub";
  }
  return "?";
}

std::optional<Fusion> fusion_from_name(std::string_view name) {
  for (Fusion f : {Fusion::Mul, Fusion::Sum, Fusion::Concat, Fusion::Sub, Fusion::NSub}) {
    if (fusion_name(f) == name) return f;
  }
  return std::nullopt;
}

std::size_t fused_width(Fusion f, std::size_t dim) { return f == Fusion::Concat ? 2 * dim : dim; }

namespace {
constexpr double kNormEps = 1e-12;

double row_norm(const Tensor& t, std::size_t s) {
  double n = kNormEps;
  for (std::size_t d = 0; d < t.dim(1); ++d) n += t(s, d) * t(s, d);
  return std::sqrt(n);
}

// g/n - v (v.g) / n^3 for u = v / n.
void unit_backward(const Tensor& v, std::size_t s, double sign, const Tensor& gz, Tensor& gv) {
  const std::size_t D = v.dim(1);
  const double n = row_norm(v, s);
  double vg = 0.0;
  for (std::size_t d = 0; d < D; ++d) vg += v(s, d) * gz(s, d);
  for (std::size_t d = 0; d < D; ++d) gv(s, d) = sign * (gz(s, d) / n - v(s, d) * vg / (n * n * n));
}
}  // namespace

Tensor fuse(Fusion f, const Tensor& v, const Tensor& q) {
  if (v.rank() != 2 || !v.same_shape(q)) {
    throw ValidationError("fusion expects equal (S,D) inputs, got " + shape_string(v.shape()) + " and " +
                          shape_string(q.shape()));
  }
  const std::size_t S = v.dim(0), D = v.dim(1);
  Tensor z({S, fused_width(f, D)});
  for (std::size_t s = 0; s < S; ++s) {
    const double nv = f == Fusion::NSub ? row_norm(v, s) : 1.0;
    const double nq = f == Fusion::NSub ? row_norm(q, s) : 1.0;
    for (std::size_t d = 0; d < D; ++d) {
      switch (f) {
        case Fusion::Mul: z(s, d) = v(s, d) * q(s, d); break;
        case Fusion::Sum: z(s, d) = v(s, d) + q(s, d); break;
        case Fusion::Sub: z(s, d) = v(s, d) - q(s, d); break;
        case Fusion::NSub: z(s, d) = v(s, d) / nv - q(s, d) / nq; break;
        case Fusion::Concat:
          z(s, d) = v(s, d);
          z(s, D + d) = q(s, d);
          break;
      }
    }
  }
  return z;
}

void fuse_backward(Fusion f, const Tensor& v, const Tensor& q, const Tensor& grad_z, Tensor& grad_v,
                   Tensor& grad_q) {
  const std::size_t S = v.dim(0), D = v.dim(1);
  require_shape(grad_z, {S, fused_width(f, D)}, "fusion grad");
  grad_v = Tensor(v.shape());
  grad_q = Tensor(q.shape());
  for (std::size_t s = 0; s < S; ++s) {
    if (f == Fusion::NSub) {
      unit_backward(v, s, 1.0, grad_z, grad_v);
      unit_backward(q, s, -1.0, grad_z, grad_q);
      continue;
    }
    for (std::size_t d = 0; d < D; ++d) {
      switch (f) {
        case Fusion::Mul:
          grad_v(s, d) = grad_z(s, d) * q(s, d);
          grad_q(s, d) = grad_z(s, d) * v(s, d);
          break;
        case Fusion::Sum:
          grad_v(s, d) = grad_z(s, d);
          grad_q(s, d) = grad_z(s, d);
          break;
        case Fusion::Sub:
          grad_v(s, d) = grad_z(s, d);
          grad_q(s, d) = -grad_z(s, d);
          break;
        case Fusion::Concat:
          grad_v(s, d) = grad_z(s, d);
          grad_q(s, d) = grad_z(s, D + d);
          break;
        case Fusion::NSub: break;
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Model

void ModelConfig::validate() const {
  cnn.validate();
  if (state == 0 || layers == 0 || head_hidden == 0 || vocab_size == 0 || hash_buckets == 0 || batch == 0) {
    throw ValidationError("model sizes must be positive");
  }
  if (epochs < 0 || decay_every < 1 || !(lr > 0.0) || weight_decay < 0.0 || !(decay_factor > 0.0)) {
    throw ValidationError("invalid optimiser settings");
  }
}

ToyModel::ToyModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const std::size_t D = config_.width();
  cnn_pre = Cnn::init(config_.cnn, rng);
  cnn_post = Cnn::init(config_.cnn, rng);
  desc_embed = BagEmbedder::init(config_.hash_buckets, D, rng);
  question_embed = BagEmbedder::init(config_.hash_buckets, D, rng);
  for (std::size_t k = 0; k < config_.layers; ++k) {
    blocks.push_back(tcssm::BlockWeights::init(D, config_.state, rng()));
    const auto& b = blocks.back();
    block_grads.push_back({zeros_stream(b.pre), zeros_stream(b.post), Tensor(b.a_log.shape())});
  }
  head1 = nn::Linear::init(fused_width(config_.fusion, D), config_.head_hidden, rng);
  head2 = nn::Linear::init(config_.head_hidden, config_.vocab_size, rng, /*zero=*/true);
  sync_tied();
}

void ToyModel::sync_tied() {
  if (!config_.tie_streams) return;
  for (auto& b : blocks) b.tie_post_to_pre();
}

std::vector<nn::ParamRef> ToyModel::parameters() {
  std::vector<nn::ParamRef> out;
  cnn_pre.append_params("cnn_pre", out);
  if (!config_.tie_streams) cnn_post.append_params("cnn_post", out);
  desc_embed.append_params("desc_embed", out);
  question_embed.append_params("question_embed", out);
  for (std::size_t k = 0; k < blocks.size(); ++k) {
    const std::string p = "layer" + std::to_string(k);
    append_stream(p + ".pre", blocks[k].pre, block_grads[k].pre, out);
    if (!config_.tie_streams) append_stream(p + ".post", blocks[k].post, block_grads[k].post, out);
    out.push_back({p + ".a_log", &blocks[k].a_log, &block_grads[k].a_log});
  }
  head1.append_params("head1", out);
  head2.append_params("head2", out);
  return out;
}

Tensor ToyModel::forward(const ModelInput& in, bool training, bool update_running) {
  if (in.pre.rank() != 4 || in.pre.dim(1) != 3) {
    throw ValidationError("pre images must be (I,3,H,W), got " + shape_string(in.pre.shape()));
  }
  require_shape(in.post, in.pre.shape(), "post images");
  const std::size_t I = in.pre.dim(0), H = in.pre.dim(2), W = in.pre.dim(3);
  const std::size_t f = config_.cnn.downsample();
  if (H % f || W % f || H == 0 || W == 0) {
    throw ValidationError("image size " + std::to_string(H) + "x" + std::to_string(W) + " is not a multiple of " +
                          std::to_string(f));
  }
  if (in.descriptions.size() != I) throw ValidationError("one description per image is required");
  if (in.questions.size() != in.image_of.size() || in.questions.empty()) {
    throw ValidationError("questions and image_of must be non-empty and of equal length");
  }
  for (auto i : in.image_of) {
    if (i >= I) throw ValidationError("question refers to image " + std::to_string(i));
  }

  sync_tied();
  Cache& c = cache_;
  c = Cache{};
  c.training = training;
  const Tensor fp = cnn_pre.forward(in.pre, c.cnn_pre, training, update_running);
  Cnn& post_cnn = config_.tie_streams ? cnn_pre : cnn_post;
  const Tensor fq = post_cnn.forward(in.post, c.cnn_post, training, update_running);
  c.feature_shape = fp.shape();
  const std::size_t D = config_.width(), L = fp.dim(2) * fp.dim(3);

  const Tensor text = rms_rows(desc_embed.forward(tokenize_all(in.descriptions, config_), c.desc), c.text_scale);
  const tcssm::PredictOptions popts{!config_.ablate_text};
  Tensor a = to_tokens(fp), b = to_tokens(fq);
  c.pre_scale.resize(blocks.size());
  c.post_scale.resize(blocks.size());
  for (std::size_t k = 0; k < blocks.size(); ++k) {
    c.layer_in.push_back({rms_rows(a, c.pre_scale[k]), rms_rows(b, c.post_scale[k]), text});
    c.layer_fwd.push_back(tcssm::block_forward(c.layer_in.back(), blocks[k], popts, config_.scan));
    const auto& out = c.layer_fwd.back().out;
    add_into(a, out.y);
    add_into(b, out.y_prime);
  }
  const auto& last = c.layer_fwd.back().out;
  c.visual = Tensor({I, D});
  for (std::size_t i = 0; i < I; ++i) {
    for (std::size_t l = 0; l < L; ++l) {
      for (std::size_t d = 0; d < D; ++d) c.visual(i, d) += (last.y(i, l, d) + last.y_prime(i, l, d)) / L;
    }
  }
  const std::size_t S = in.questions.size();
  c.visual_row = Tensor({S, D});
  for (std::size_t s = 0; s < S; ++s) {
    for (std::size_t d = 0; d < D; ++d) c.visual_row(s, d) = c.visual(in.image_of[s], d);
  }
  const Tensor q = question_embed.forward(tokenize_all(in.questions, config_), c.question);
  c.fused = fuse(config_.fusion, c.visual_row, q);
  c.hidden_pre = head1.forward(c.fused);
  c.hidden = nn::relu(c.hidden_pre);
  c.image_of = in.image_of;
  return head2.forward(c.hidden);
}

void ToyModel::backward(const Tensor& grad_logits) {
  Cache& c = cache_;
  if (!c.training) throw ValidationError("backward requires a training-mode forward");
  const Tensor g_hidden = head2.backward(c.hidden, grad_logits);
  const Tensor g_fused = head1.backward(c.fused, nn::relu_backward(c.hidden, g_hidden));
  Tensor g_vrow, g_q;
  fuse_backward(config_.fusion, c.visual_row, c.question.out, g_fused, g_vrow, g_q);
  question_embed.backward(c.question, g_q);

  const std::size_t I = c.feature_shape[0], D = config_.width(), L = c.feature_shape[2] * c.feature_shape[3];
  Tensor g_visual({I, D});
  for (std::size_t s = 0; s < c.image_of.size(); ++s) {
    for (std::size_t d = 0; d < D; ++d) g_visual(c.image_of[s], d) += g_vrow(s, d);
  }
  // dL/dy of the last layer: mean-pool of y and y'.
  Tensor g_pool({I, L, D});
  for (std::size_t i = 0; i < I; ++i) {
    for (std::size_t l = 0; l < L; ++l) {
      for (std::size_t d = 0; d < D; ++d) g_pool(i, l, d) = g_visual(i, d) / static_cast<double>(L);
    }
  }
  // ga/gb carry dL/da_{k+1}, dL/db_{k+1}; a_{k+1} = a_k + y_k.
  Tensor ga({I, L, D}), gb({I, L, D}), g_text({I, D});
  const tcssm::PredictOptions popts{!config_.ablate_text};
  for (std::size_t k = blocks.size(); k-- > 0;) {
    Tensor gy = ga, gyp = gb;
    if (k + 1 == blocks.size()) {
      add_into(gy, g_pool);
      add_into(gyp, g_pool);
    }
    const auto& lin = c.layer_in[k];
    const auto g = tcssm::block_backward(lin, blocks[k], c.layer_fwd[k], gy, gyp, popts, config_.scan);
    add_into(ga, rms_rows_backward(lin.f_pre, c.pre_scale[k], g.f_pre));
    add_into(gb, rms_rows_backward(lin.f_post, c.post_scale[k], g.f_post));
    add_into(g_text, g.f_text);
    auto& bg = block_grads[k];
    add_stream(bg.pre, g.pre);
    add_stream(config_.tie_streams ? bg.pre : bg.post, g.post);
    add_into(bg.a_log, g.a_log);
  }
  desc_embed.backward(c.desc, rms_rows_backward(c.layer_in.front().f_text, c.text_scale, g_text));
  cnn_pre.backward(c.cnn_pre, from_tokens(ga, c.feature_shape));
  (config_.tie_streams ? cnn_pre : cnn_post).backward(c.cnn_post, from_tokens(gb, c.feature_shape));
}


// ---------------------------------------------------------------------------
// Synthetic task

const std::vector<Region>& example_regions() {
  static const std::vector<Region> regions = {
      {"Bata", "Bata, Equatorial Guinea. Explosions at a military barracks flattened nearby homes."},
      {"Beirut", "Beirut, Lebanon. A warehouse blast at the port tore through dense city blocks."},
      {"Goma", "Goma, Democratic Republic of the Congo. Lava from a nearby volcano reached the northern districts."},
      {"Les Cayes", "Les Cayes, Haiti. A strong earthquake brought down houses along the southern coast."},
      {"Hawaii", "Maui, Hawaii. Wildfires driven by high winds burned through a coastal town."},
      {"La Palma", "La Palma, Canary Islands. A volcanic eruption buried villages under lava."},
      {"Derna", "Derna, Libya. Two dams failed after a storm and floodwater swept through the city."},
      {"Marshall", "Marshall, Colorado. A grass fire spread into suburban neighbourhoods."},
      {"Moulay Brahim", "Moulay Brahim, Morocco. An earthquake in the mountains damaged village houses."},
      {"Antakya", "Antakya, Turkey. A sequence of large earthquakes destroyed many buildings."},
  };
  return regions;
}

SemanticMask synthetic_mask(std::mt19937_64& rng, std::size_t size) {
  if (size < 4) throw ValidationError("synthetic masks need size >= 4");
  auto mask = SemanticMask::filled(size, size, Label::Background);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> count(0, 12);
  double w[3];
  for (double& v : w) v = unit(rng) < 0.3 ? 0.0 : unit(rng);
  if (w[0] + w[1] + w[2] == 0.0) w[0] = 1.0;
  std::discrete_distribution<int> label({w[0], w[1], w[2]});
  std::uniform_int_distribution<std::size_t> extent(3, std::max<std::size_t>(3, size / 4));
  const int n = count(rng);
  for (int k = 0; k < n; ++k) {
    const std::size_t bw = extent(rng), bh = extent(rng);
    const std::size_t x0 = std::uniform_int_distribution<std::size_t>(0, size - std::min(bw, size))(rng);
    const std::size_t y0 = std::uniform_int_distribution<std::size_t>(0, size - std::min(bh, size))(rng);
    const auto l = static_cast<Label>(1 + label(rng));
    for (std::size_t y = y0; y < std::min(size, y0 + bh); ++y) {
      for (std::size_t x = x0; x < std::min(size, x0 + bw); ++x) mask.set(x, y, l);
    }
  }
  return mask;
}

namespace {
double noisy(double base, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 0.02);
  return std::clamp(base + n(rng), 0.0, 1.0);
}
}  // namespace

Tensor render_pre(const SemanticMask& mask, std::mt19937_64& rng) {
  const std::size_t H = mask.height(), W = mask.width();
  static constexpr double kGround[3] = {0.12, 0.15, 0.10};
  Tensor img({3, H, W});
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      const bool building = mask.at(x, y) != Label::Background;
      for (std::size_t ch = 0; ch < 3; ++ch) img(ch, y, x) = noisy(building ? 0.62 : kGround[ch], rng);
    }
  }
  return img;
}

Tensor render_post(const SemanticMask& mask, std::mt19937_64& rng) {
  const std::size_t H = mask.height(), W = mask.width();
  std::bernoulli_distribution coin(0.5);
  Tensor img({1, H, W});
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      double base = 0.12;
      switch (mask.at(x, y)) {
        case Label::Background: break;
        case Label::Intact: base = 0.62; break;
        case Label::Damaged: base = 0.31; break;
        case Label::Destroyed: base = coin(rng) ? 0.9 : 0.05; break;
      }
      img(0, y, x) = noisy(base, rng);
    }
  }
  return img;
}

Tensor replicate_channels(const Tensor& single) {
  if (single.rank() != 3 || single.dim(0) != 1) {
    throw ValidationError("expected a (1,H,W) image, got " + shape_string(single.shape()));
  }
  const std::size_t HW = single.dim(1) * single.dim(2);
  Tensor out({3, single.dim(1), single.dim(2)});
  for (std::size_t ch = 0; ch < 3; ++ch) std::copy_n(single.data(), HW, out.data() + ch * HW);
  return out;
}

SyntheticTask SyntheticTask::generate(const TaskOptions& o) {
  if (o.questions_per_image == 0 || o.questions_per_image > template_registry().size()) {
    throw ValidationError("questions per image must be in [1, 40]");
  }
  SyntheticTask task;
  task.options = o;
  const auto& regions = example_regions();
  const auto& vocab = AnswerVocabulary::standard();
  auto make_split = [&](std::size_t samples, std::uint64_t split, const char* prefix, std::vector<Scene>& scenes,
                        std::vector<Sample>& out) {
    const std::size_t n = (samples + o.questions_per_image - 1) / o.questions_per_image;
    std::vector<std::optional<Scene>> built(n);
    auto build = [&](std::size_t i) {
      std::seed_seq seq{o.seed, split, static_cast<std::uint64_t>(i)};
      std::mt19937_64 rng(seq);
      char id[32];
      std::snprintf(id, sizeof id, "%s_%04zu", prefix, i);
      auto mask = synthetic_mask(rng, o.mask_size);
      Tensor pre = render_pre(mask, rng);
      Tensor post = replicate_channels(render_post(mask, rng));
      const Region& r = regions[i % regions.size()];
      built[i] = Scene{id, r.name, r.description, std::move(mask), std::move(pre), std::move(post)};
    };
    const unsigned threads = std::max(1u, std::min<unsigned>(o.threads, static_cast<unsigned>(n)));
    {
      std::vector<std::jthread> pool;
      for (unsigned t = 0; t < threads; ++t) {
        pool.emplace_back([&, t]() {
          for (std::size_t i = t; i < n; i += threads) build(i);
        });
      }
    }
    scenes.clear();
    for (auto& sc : built) scenes.push_back(std::move(*sc));
    for (std::size_t i = 0; i < n && out.size() < samples; ++i) {
      const auto items = generate_all(scenes[i].mask, scenes[i].image_id);
      std::vector<std::size_t> pick(items.size());
      std::iota(pick.begin(), pick.end(), 0);
      std::seed_seq seq{o.seed, split, static_cast<std::uint64_t>(i), std::uint64_t{1}};
      std::mt19937_64 rng(seq);
      std::shuffle(pick.begin(), pick.end(), rng);
      pick.resize(std::min(o.questions_per_image, samples - out.size()));
      std::sort(pick.begin(), pick.end());
      for (auto k : pick) out.push_back({i, items[k], *vocab.index_of(items[k].answer)});
    }
  };
  make_split(o.train_samples, 0, "train", task.train_scenes, task.train);
  make_split(o.heldout_samples, 1, "heldout", task.heldout_scenes, task.heldout);
  return task;
}

// ---------------------------------------------------------------------------
// Training

namespace {

struct Batch {
  ModelInput input;
  std::vector<std::size_t> gold;
  std::vector<const Sample*> samples;
};

Batch make_batch(const std::vector<Scene>& scenes, const std::vector<const Sample*>& samples) {
  Batch b;
  std::map<std::size_t, std::size_t> slot;
  std::vector<std::size_t> order;
  for (const Sample* s : samples) {
    if (slot.emplace(s->scene, order.size()).second) order.push_back(s->scene);
  }
  const auto& shape = scenes[order.front()].pre.shape();
  const std::size_t I = order.size(), per = scenes[order.front()].pre.size();
  b.input.pre = Tensor({I, shape[0], shape[1], shape[2]});
  b.input.post = Tensor({I, shape[0], shape[1], shape[2]});
  for (std::size_t i = 0; i < I; ++i) {
    const Scene& sc = scenes[order[i]];
    std::copy_n(sc.pre.data(), per, b.input.pre.data() + i * per);
    std::copy_n(sc.post.data(), per, b.input.post.data() + i * per);
    b.input.descriptions.push_back(sc.description);
  }
  for (const Sample* s : samples) {
    b.input.questions.push_back(s->item.question);
    b.input.image_of.push_back(slot[s->scene]);
    b.gold.push_back(s->answer_index);
    b.samples.push_back(s);
  }
  return b;
}

std::vector<std::vector<const Sample*>> chunk(const std::vector<const Sample*>& all, std::size_t size) {
  std::vector<std::vector<const Sample*>> out;
  for (std::size_t i = 0; i < all.size(); i += size) {
    out.emplace_back(all.begin() + static_cast<long>(i), all.begin() + static_cast<long>(std::min(all.size(), i + size)));
  }
  return out;
}

void randomise(Tensor& t, std::mt19937_64& rng, double scale) {
  std::normal_distribution<double> n(0.0, scale);
  for (auto& v : t.values()) v = n(rng);
}

}  // namespace

SplitScores evaluate(ToyModel& model, const SyntheticTask& task, bool heldout, std::size_t batch) {
  const auto& scenes = heldout ? task.heldout_scenes : task.train_scenes;
  const auto& samples = heldout ? task.heldout : task.train;
  if (samples.empty()) throw ValidationError("cannot evaluate an empty split");
  std::vector<const Sample*> ptrs;
  for (const auto& s : samples) ptrs.push_back(&s);
  const auto& vocab = AnswerVocabulary::standard();
  SplitScores out;
  PredictionSet preds;
  std::vector<QAItem> gold;
  double loss_sum = 0.0;
  for (const auto& group : chunk(ptrs, batch)) {
    const Batch b = make_batch(scenes, group);
    const Tensor logits = model.forward(b.input, /*training=*/false);
    loss_sum += nn::softmax_cross_entropy(logits, b.gold).loss * static_cast<double>(group.size());
    for (std::size_t s = 0; s < group.size(); ++s) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < logits.dim(1); ++k) {
        if (logits(s, k) > logits(s, best)) best = k;
      }
      preds.add(group[s]->item.image_id, group[s]->item.template_id, vocab.token(best), vocab);
      gold.push_back(group[s]->item);
    }
  }
  out.loss = loss_sum / static_cast<double>(samples.size());
  out.report = score(gold, preds, vocab);
  return out;
}

ModelConfig gradcheck_config(const ModelConfig& base) {
  ModelConfig c = base;
  c.cnn.channels = {3, 2, 2, 2, 3};
  c.state = 3;
  c.head_hidden = 6;
  c.hash_buckets = 16;
  return c;
}

tcssm::GradcheckReport model_gradcheck(const ModelConfig& config, std::uint64_t seed,
                                       const ModelGradcheckOptions& opts, std::size_t image_height,
                                       std::size_t image_width) {
  ToyModel model(config, seed);
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  // Zero-initialised or unit parameters would hide whole gradient paths.
  for (auto& p : model.parameters()) randomise(*p.value, rng, 0.5);
  std::uniform_real_distribution<double> mag(0.5, 1.5), shift(-0.5, 0.5);
  for (Cnn* cnn : {&model.cnn_pre, &model.cnn_post}) {
    for (auto& b : cnn->blocks) {
      for (auto* bn : {&b.bn1, &b.bn2}) {
        for (auto& v : bn->gamma.values()) v = (rng() & 1 ? 1.0 : -1.0) * mag(rng);
        for (auto& v : bn->beta.values()) v = shift(rng);
      }
    }
  }
  for (auto& b : model.blocks) {
    std::uniform_real_distribution<double> u(-1.0, 0.5);
    for (auto* w : {&b.pre, &b.post}) {
      for (auto& v : w->delta_bias.values()) v = u(rng);
    }
    std::uniform_real_distribution<double> al(-1.0, 1.0);
    for (auto& v : b.a_log.values()) v = al(rng);
  }

  const std::size_t I = 2;
  const std::vector<std::string> questions = {"Are there any destroyed buildings", "What share is intact",
                                              "Is damage concentrated in one area"};
  ModelInput in;
  std::vector<std::size_t> gold;
  const auto& regions = example_regions();
  int attempts = 0;
  double margin = 0.0;
  for (;;) {
    if (++attempts > opts.max_attempts) throw ValidationError("model gradcheck could not meet the |v| margin");
    in.pre = Tensor({I, 3, image_height, image_width});
    in.post = Tensor({I, 3, image_height, image_width});
    std::uniform_real_distribution<double> px(0.0, 1.0);
    for (auto& v : in.pre.values()) v = px(rng);
    for (auto& v : in.post.values()) v = px(rng);
    in.descriptions = {regions[rng() % regions.size()].description, regions[rng() % regions.size()].description};
    in.questions = questions;
    in.image_of = {0, 1, 1};
    gold.clear();
    for (std::size_t s = 0; s < questions.size(); ++s) gold.push_back(rng() % config.vocab_size);
    model.forward(in, true, false);
    margin = std::numeric_limits<double>::infinity();
    for (const auto& f : model.cache().layer_fwd) {
      margin = std::min(margin, tcssm::min_abs_difference(f.pred.pair, f.pred.params, config.scan));
    }
    const double kink = std::min(model.cnn_pre.kink_margin(model.cache().cnn_pre),
                                 (config.tie_streams ? model.cnn_pre : model.cnn_post).kink_margin(model.cache().cnn_post));
    if (margin >= opts.margin && kink >= opts.kink_margin) break;
  }

  auto loss = [&]() { return nn::softmax_cross_entropy(model.forward(in, true, false), gold).loss; };
  auto params = model.parameters();
  nn::zero_grads(params);
  const auto ce = nn::softmax_cross_entropy(model.forward(in, true, false), gold);
  model.backward(ce.grad);

  tcssm::GradcheckReport rep;
  const auto& fs = model.cache().feature_shape;
  rep.dims = {I, fs[2] * fs[3], config.width(), config.state};
  rep.seed = seed;
  rep.threshold = opts.threshold;
  rep.step = opts.step;
  rep.min_margin = margin;
  rep.attempts = attempts;
  for (auto& p : params) {
    Tensor numeric(p.value->shape());
    for (std::size_t i = 0; i < p.value->size(); ++i) {
      const double keep = (*p.value)[i];
      (*p.value)[i] = keep + opts.step;
      const double up = loss();
      (*p.value)[i] = keep - opts.step;
      const double down = loss();
      (*p.value)[i] = keep;
      numeric[i] = (up - down) / (2.0 * opts.step);
    }
    const double err = tcssm::max_relative_error(*p.grad, numeric, opts.floor);
    rep.groups.push_back({p.name, p.value->size(), err, err <= opts.threshold});
  }
  return rep;
}

TrainRun train_once(const ModelConfig& config, const SyntheticTask& task, std::uint64_t seed) {
  const auto t0 = Clock::now();
  if (task.train.empty() || task.heldout.empty()) throw ValidationError("synthetic task has an empty split");
  ToyModel model(config, seed);
  TrainRun run;
  run.ablate_text = config.ablate_text;
  run.initial_loss = evaluate(model, task, false).loss;

  auto params = model.parameters();
  nn::Adam adam(params, config.lr, config.weight_decay);
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> scene_order(task.train_scenes.size());
  std::iota(scene_order.begin(), scene_order.end(), 0);
  std::vector<std::vector<const Sample*>> by_scene(task.train_scenes.size());
  for (const auto& s : task.train) by_scene[s.scene].push_back(&s);

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    adam.set_lr(config.lr * std::pow(config.decay_factor, epoch / config.decay_every));
    std::shuffle(scene_order.begin(), scene_order.end(), rng);
    std::vector<const Sample*> order;
    for (auto i : scene_order) order.insert(order.end(), by_scene[i].begin(), by_scene[i].end());
    double epoch_sum = 0.0;
    for (const auto& group : chunk(order, config.batch)) {
      const Batch b = make_batch(task.train_scenes, group);
      nn::zero_grads(params);
      const auto ce = nn::softmax_cross_entropy(model.forward(b.input, true), b.gold);
      if (!std::isfinite(ce.loss)) {
        char msg[160];
        std::snprintf(msg, sizeof msg, "training diverged: loss %g at epoch %d, step %zu", ce.loss, epoch,
                      run.step_losses.size());
        throw TrainingDiverged(msg);
      }
      model.backward(ce.grad);
      adam.step();
      run.step_losses.push_back(ce.loss);
      epoch_sum += ce.loss * static_cast<double>(group.size());
    }
    run.epoch_losses.push_back(epoch_sum / static_cast<double>(order.size()));
  }
  run.final_loss = evaluate(model, task, false).loss;
  if (!std::isfinite(run.final_loss)) throw TrainingDiverged("training diverged: final loss is not finite");
  run.heldout = evaluate(model, task, true);
  run.seconds = seconds_since(t0);
  return run;
}

TrainReport train_toy(const ModelConfig& config, const SyntheticTask& task, const TrainOptions& opts) {
  const auto t0 = Clock::now();
  config.validate();
  TrainReport rep;
  rep.config = config;
  rep.task = task.options;
  rep.seed = opts.seed;
  if (opts.gate_gradcheck) {
    rep.gradcheck = model_gradcheck(gradcheck_config(config), opts.seed);
    for (const auto& g : rep.gradcheck->groups) {
      if (!g.pass) {
        char msg[200];
        std::snprintf(msg, sizeof msg, "gradcheck gate failed for %s: max relative error %.3g", g.name.c_str(),
                      g.max_rel_error);
        throw ValidationError(msg);
      }
    }
  }
  const auto& vocab = AnswerVocabulary::standard();
  std::vector<std::size_t> freq(vocab.size(), 0);
  for (const auto& s : task.train) ++freq[s.answer_index];
  const auto majority = static_cast<std::size_t>(std::max_element(freq.begin(), freq.end()) - freq.begin());
  rep.majority_answer = vocab.token(majority);
  std::size_t hits = 0;
  for (const auto& s : task.heldout) hits += s.answer_index == majority;
  rep.baseline_oa = task.heldout.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(task.heldout.size());

  rep.run = train_once(config, task, opts.seed);
  if (opts.paired_ablation) {
    ModelConfig flipped = config;
    flipped.ablate_text = !config.ablate_text;
    rep.paired = train_once(flipped, task, opts.seed);
  }
  rep.seconds = seconds_since(t0);
  return rep;
}

namespace {

nlohmann::json run_json(const TrainRun& r) {
  nlohmann::json j;
  j["ablate_text"] = r.ablate_text;
  j["initial_loss"] = r.initial_loss;
  j["final_loss"] = r.final_loss;
  j["loss_ratio"] = r.final_loss / r.initial_loss;
  j["step_losses"] = r.step_losses;
  j["epoch_losses"] = r.epoch_losses;
  j["heldout_loss"] = r.heldout.loss;
  j["heldout"] = nlohmann::json::parse(report_to_json(r.heldout.report));
  j["seconds"] = r.seconds;
  return j;
}

}  // namespace

std::string report_to_json(const TrainReport& rep) {
  nlohmann::json j;
  const auto& c = rep.config;
  j["config"] = {{"channels", c.cnn.channels},
                 {"state", c.state},
                 {"layers", c.layers},
                 {"fusion", std::string(fusion_name(c.fusion))},
                 {"head_hidden", c.head_hidden},
                 {"vocab_size", c.vocab_size},
                 {"hash_buckets", c.hash_buckets},
                 {"tie_streams", c.tie_streams},
                 {"ablate_text", c.ablate_text},
                 {"lr", c.lr},
                 {"weight_decay", c.weight_decay},
                 {"batch", c.batch},
                 {"epochs", c.epochs},
                 {"decay_every", c.decay_every},
                 {"decay_factor", c.decay_factor}};
  j["task"] = {{"seed", rep.task.seed},
               {"mask_size", rep.task.mask_size},
               {"train_samples", rep.task.train_samples},
               {"heldout_samples", rep.task.heldout_samples},
               {"questions_per_image", rep.task.questions_per_image}};
  j["seed"] = rep.seed;
  if (rep.gradcheck) j["gradcheck"] = nlohmann::json::parse(tcssm::report_to_json(*rep.gradcheck));
  j["majority_answer"] = rep.majority_answer;
  j["baseline_oa"] = rep.baseline_oa;
  j["run"] = run_json(rep.run);
  j["beats_baseline"] = rep.run.heldout.report.overall_accuracy > rep.baseline_oa;
  if (rep.paired) {
    j["paired"] = run_json(*rep.paired);
    const TrainRun& with_text = rep.run.ablate_text ? *rep.paired : rep.run;
    const TrainRun& without = rep.run.ablate_text ? rep.run : *rep.paired;
    j["text_oa_gap"] = with_text.heldout.report.overall_accuracy - without.heldout.report.overall_accuracy;
  }
  j["seconds"] = rep.seconds;
  return j.dump(2) + "\n";
}

}  // namespace cdvqa::toy
