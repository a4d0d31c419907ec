// Copyright 2026 The cdvqa Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once
//
// Toy end-to-end change VQA model: twin CNN encoders, hashed bag-of-tokens
// text embedders, a stack of text-conditioned change-scan blocks, question
// fusion and an MLP answer head, trained with Adam on synthetic scenes.
//
#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "cdvqa/mask.hpp"
#include "cdvqa/metrics.hpp"
#include "cdvqa/nn.hpp"
#include "cdvqa/qa.hpp"
#include "cdvqa/tcssm.hpp"

namespace cdvqa::toy {

// Conv blocks: [conv3x3, BN, ReLU] x 2 then 2x2 max-pool, one block per
// channel transition.
struct CnnSpec {
  std::vector<std::size_t> channels{3, 16, 32, 64, 128};

  std::size_t blocks() const { return channels.size() - 1; }
  std::size_t out_channels() const { return channels.back(); }
  std::size_t downsample() const { return std::size_t{1} << blocks(); }
  void validate() const;
};

class Cnn {
 public:
  struct Block {
    nn::Conv3x3 conv1;
    nn::BatchNorm2d bn1;
    nn::Conv3x3 conv2;
    nn::BatchNorm2d bn2;
  };
  struct BlockCache {
    Tensor in, a1, a2;  // inputs of conv1, conv2 and the pool
    nn::BatchNormCache bn1, bn2;
    std::vector<std::size_t> argmax;
  };
  using Cache = std::vector<BlockCache>;

  static Cnn init(const CnnSpec& spec, std::mt19937_64& rng);
  // (B, C0, H, W) -> (B, C_last, H / 2^k, W / 2^k).
  Tensor forward(const Tensor& images, Cache& cache, bool training, bool update_running = true);
  // Accumulates parameter gradients.
  void backward(const Cache& cache, const Tensor& grad_out);
  void append_params(const std::string& prefix, std::vector<nn::ParamRef>& out);
  // Distance of the cached forward from the nearest ReLU or max-pool switch:
  // min |ReLU input| and min gap between a positive pool winner and the
  // runner-up.
  double kink_margin(const Cache& cache) const;

  std::vector<Block> blocks;
};

// Lower-cased alphanumeric words hashed (FNV-1a, seeded) into `buckets`.
std::vector<std::uint32_t> hash_tokens(std::string_view text, std::size_t buckets, std::uint64_t seed);

// Sum of learned bucket embeddings followed by a dense layer and ReLU.
struct BagEmbedder {
  Tensor table, table_grad;  // (buckets, D)
  nn::Linear proj;           // D -> D

  struct Cache {
    std::vector<std::vector<std::uint32_t>> ids;
    Tensor bag, out;
  };

  static BagEmbedder init(std::size_t buckets, std::size_t dim, std::mt19937_64& rng);
  Tensor forward(const std::vector<std::vector<std::uint32_t>>& ids, Cache& cache) const;
  void backward(const Cache& cache, const Tensor& grad_out);
  void append_params(const std::string& prefix, std::vector<nn::ParamRef>& out);
};

enum class Fusion : std::uint8_t { Mul, Sum, Concat, Sub, NSub };
std::string_view fusion_name(Fusion f);
std::optional<Fusion> fusion_from_name(std::string_view name);
std::size_t fused_width(Fusion f, std::size_t dim);

// Row-wise fusion of visual (S, D) and question (S, D) features.
//   mul  v * q          sum  v + q        sub  v - q
//   concat [v, q]       nsub v/|v| - q/|q|
Tensor fuse(Fusion f, const Tensor& v, const Tensor& q);
void fuse_backward(Fusion f, const Tensor& v, const Tensor& q, const Tensor& grad_z, Tensor& grad_v,
                   Tensor& grad_q);

struct ModelConfig {
  CnnSpec cnn;
  std::size_t state = 16;  // N
  std::size_t layers = 2;
  Fusion fusion = Fusion::Mul;
  std::size_t head_hidden = 256;
  std::size_t vocab_size = 30;
  std::size_t hash_buckets = 4096;
  std::uint64_t hash_seed = 0x5eed;
  // Shares the CNN and block weights between the pre and post streams.
  bool tie_streams = false;
  // Replaces the description embedding by zeros inside the change scan.
  bool ablate_text = false;
  tcssm::ScanOptions scan;

  double lr = 1e-4;
  double weight_decay = 1e-5;
  std::size_t batch = 32;
  int epochs = 5;
  int decay_every = 5;
  double decay_factor = 0.1;

  std::size_t width() const { return cnn.out_channels(); }
  void validate() const;
};

// One forward batch: I images and S questions, each tied to an image.
struct ModelInput {
  Tensor pre;   // (I, 3, H, W)
  Tensor post;  // (I, 3, H, W)
  std::vector<std::string> descriptions;  // I
  std::vector<std::string> questions;     // S
  std::vector<std::size_t> image_of;      // S, index into the images
};

class ToyModel {
 public:
  struct Cache {
    Cnn::Cache cnn_pre, cnn_post;
    std::vector<std::size_t> feature_shape;  // (I, D, h, w)
    BagEmbedder::Cache desc, question;
    // Block inputs after RMS normalisation, with the per-row scales.
    std::vector<tcssm::FusionInputs> layer_in;
    std::vector<std::vector<double>> pre_scale, post_scale;
    std::vector<double> text_scale;
    std::vector<tcssm::BlockForward> layer_fwd;
    std::vector<std::size_t> image_of;
    Tensor visual;      // (I, D)
    Tensor visual_row;  // (S, D)
    Tensor fused, hidden_pre, hidden;
    bool training = false;
  };

  ToyModel(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  // Logits (S, vocab_size). The cache of the latest call feeds backward().
  Tensor forward(const ModelInput& input, bool training, bool update_running = true);
  void backward(const Tensor& grad_logits);
  std::vector<nn::ParamRef> parameters();
  const Cache& cache() const { return cache_; }
  void set_ablate_text(bool on) { config_.ablate_text = on; }

  Cnn cnn_pre, cnn_post;
  BagEmbedder desc_embed, question_embed;
  std::vector<tcssm::BlockWeights> blocks;
  std::vector<tcssm::BlockWeights> block_grads;
  nn::Linear head1, head2;

 private:
  void sync_tied();
  ModelConfig config_;
  Cache cache_;
};

// ---------------------------------------------------------------------------
// Synthetic task

struct Region {
  std::string name;
  std::string description;
};
// Ten example regions with short invented descriptions.
const std::vector<Region>& example_regions();

// Rectangular buildings with a per-scene damage mix.
SemanticMask synthetic_mask(std::mt19937_64& rng, std::size_t size);

// Pre-event rendering: every building drawn intact. (3, H, W).
Tensor render_pre(const SemanticMask& mask, std::mt19937_64& rng);
// Post-event rendering: single channel; intact gray, damaged half intensity,
// destroyed speckle, background dark. (1, H, W).
Tensor render_post(const SemanticMask& mask, std::mt19937_64& rng);
// (1, H, W) -> (3, H, W).
Tensor replicate_channels(const Tensor& single);

struct Scene {
  std::string image_id;
  std::string region;
  std::string description;
  SemanticMask mask;
  Tensor pre;   // (3, H, W)
  Tensor post;  // (3, H, W)
};

struct Sample {
  std::size_t scene = 0;
  QAItem item;
  std::size_t answer_index = 0;
};

struct TaskOptions {
  std::uint64_t seed = 0;
  std::size_t mask_size = 64;
  std::size_t train_samples = 512;
  std::size_t heldout_samples = 256;
  std::size_t questions_per_image = 8;
  unsigned threads = 1;
};

struct SyntheticTask {
  TaskOptions options;
  std::vector<Scene> train_scenes, heldout_scenes;
  std::vector<Sample> train, heldout;

  // Scenes are rendered in parallel; output does not depend on `threads`.
  static SyntheticTask generate(const TaskOptions& options);
};

// ---------------------------------------------------------------------------
// Training

// Inputs are resampled until every ReLU and pooling switch sits at least 50
// steps away, as well as the |v| kink inside the scans.
struct ModelGradcheckOptions {
  double step = 1e-5;
  double threshold = 1e-4;
  double margin = 1e-4;       // on |v| inside every scan
  double kink_margin = 5e-4;  // see Cnn::kink_margin
  // Denominator floor of the relative error. The model loss passes through
  // thousands of operations, so difference quotients of near-zero entries
  // carry ~1e-9 of round-off.
  double floor = 1e-4;
  int max_attempts = 20000;
};

// Finite-difference check of every parameter group on the mean cross-entropy
// of a random batch. Training-mode batch norm.
tcssm::GradcheckReport model_gradcheck(const ModelConfig& config, std::uint64_t seed,
                                       const ModelGradcheckOptions& opts = {},
                                       std::size_t image_height = 16, std::size_t image_width = 32);

// Configuration used by model_gradcheck for `base`: same fusion, layer count,
// tying and ablation, tiny widths.
ModelConfig gradcheck_config(const ModelConfig& base);

struct TrainingDiverged : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct SplitScores {
  double loss = 0.0;
  EvalReport report;
};

struct TrainRun {
  bool ablate_text = false;
  double initial_loss = 0.0;  // mean training loss before the first step
  double final_loss = 0.0;    // mean training loss after the last step
  std::vector<double> step_losses;
  std::vector<double> epoch_losses;
  SplitScores heldout;
  double seconds = 0.0;
};

struct TrainOptions {
  std::uint64_t seed = 0;
  bool gate_gradcheck = true;
  bool paired_ablation = true;
};

struct TrainReport {
  ModelConfig config;
  TaskOptions task;
  std::uint64_t seed = 0;
  std::optional<tcssm::GradcheckReport> gradcheck;
  std::string majority_answer;
  double baseline_oa = 0.0;
  TrainRun run;
  std::optional<TrainRun> paired;
  double seconds = 0.0;
};

// Mean loss and scores on a split, batch norm in inference mode.
SplitScores evaluate(ToyModel& model, const SyntheticTask& task, bool heldout, std::size_t batch = 64);

// Trains one model. Throws TrainingDiverged when the loss stops being finite.
TrainRun train_once(const ModelConfig& config, const SyntheticTask& task, std::uint64_t seed);

// Gated gradcheck, the configured run and (optionally) the run with the text
// setting flipped. Throws TrainingDiverged, or ValidationError when the gate
// fails.
TrainReport train_toy(const ModelConfig& config, const SyntheticTask& task, const TrainOptions& opts = {});

std::string report_to_json(const TrainReport& report);

}  // namespace cdvqa::toy
