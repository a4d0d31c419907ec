// Copyright 2026 The cdvqa Authors
// SPDX-License-Identifier: Apache-2.0
//
// cdvqa: QA generation, statistics, evaluation and scan tooling.
// Exit codes: 0 ok, 1 validation error, 2 I/O error.
//
#include <chrono>
#include <cstdio>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cdvqa/errors.hpp"
#include "cdvqa/io.hpp"
#include "cdvqa/mask.hpp"
#include "cdvqa/metrics.hpp"
#include "cdvqa/qa.hpp"
#include "cdvqa/tcssm.hpp"
#include "cdvqa/toy_model.hpp"

namespace {

using namespace cdvqa;

std::optional<io::Size> parse_resize(const std::string& s) {
  if (s.empty()) return std::nullopt;
  int w = 0, h = 0;
  char x = 0, extra = 0;
  if (std::sscanf(s.c_str(), "%d%c%d%c", &w, &x, &h, &extra) != 3 || (x != 'x' && x != 'X') || w < 1 || h < 1) {
    throw ValidationError("--resize expects WIDTHxHEIGHT, got '" + s + "'");
  }
  return io::Size{w, h};
}

tcssm::ScanDims parse_dims(const std::string& s) {
  std::size_t v[4];
  char extra = 0;
  if (std::sscanf(s.c_str(), "%zu,%zu,%zu,%zu%c", &v[0], &v[1], &v[2], &v[3], &extra) != 4) {
    throw ValidationError("--dims expects B,L,D,N, got '" + s + "'");
  }
  for (auto d : v) {
    if (d == 0) throw ValidationError("--dims entries must be positive");
  }
  return {v[0], v[1], v[2], v[3]};
}

void emit(const std::string& path, const std::string& content) {
  if (path.empty() || path == "-") {
    std::cout << content;
  } else {
    io::write_text(path, content);
  }
}

tcssm::ScanOptions scan_options(bool exact_zoh, const std::string& evolution) {
  tcssm::ScanOptions o;
  o.input = exact_zoh ? tcssm::InputDiscretization::ExactZoh : tcssm::InputDiscretization::Euler;
  if (evolution == "pre") {
    o.evolution = tcssm::EvolutionStep::Pre;
  } else if (evolution == "post") {
    o.evolution = tcssm::EvolutionStep::Post;
  } else if (evolution != "mean") {
    throw ValidationError("--evolution must be mean, pre or post");
  }
  return o;
}

// Random scan inputs with steps log-uniform in [1e-3, 1e-1].
std::pair<tcssm::StreamPair, tcssm::ScanParams> random_scan(const tcssm::ScanDims& d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const std::size_t B = d.batch, L = d.length, D = d.width, N = d.state;
  tcssm::StreamPair pair{Tensor({B, L, D}), Tensor({B, L, D})};
  tcssm::ScanParams p{Tensor({D, N}),    Tensor({B, L, D}), Tensor({B, L, D}), Tensor({B, L, N}),
                      Tensor({B, L, N}), Tensor({B, L, N}), Tensor({B, L, N})};
  for (Tensor* t : {&pair.x, &pair.x_prime, &p.b, &p.b_prime, &p.c, &p.c_prime}) {
    for (auto& v : t->values()) v = n(rng);
  }
  for (auto& v : p.a_log.values()) v = std::log(1.0 + 15.0 * u(rng));
  for (Tensor* t : {&p.delta, &p.delta_prime}) {
    for (auto& v : t->values()) v = std::exp(std::log(1e-3) + u(rng) * std::log(100.0));
  }
  return {std::move(pair), std::move(p)};
}

int run(int argc, char** argv) {
  CLI::App app{"Change-detection VQA toolkit: QA generation, evaluation and the change-scan kernel"};
  app.require_subcommand(1);

  // generate
  auto* gen = app.add_subcommand("generate", "Generate 40 QA records per mask listed in a manifest");
  std::string manifest, out_path, vocab_out, severity_out, resize, spread = "distance-std";
  unsigned threads = 1;
  gen->add_option("--manifest", manifest, "Dataset manifest (JSON array)")->required();
  gen->add_option("--out", out_path, "Output QA JSONL")->required();
  gen->add_option("--threads", threads, "Worker threads for loading and generation")->check(CLI::Range(1u, 256u));
  gen->add_option("--resize", resize, "Nearest-neighbour resize of every mask, WIDTHxHEIGHT");
  gen->add_option("--spread", spread, "Spatial spread measure: distance-std or rms-radius");
  gen->add_option("--vocab-out", vocab_out, "Write the answer vocabulary, one token per line");
  gen->add_option("--severity-out", severity_out, "Write per-image destruction percentages (JSONL)");

  // stats
  auto* stats = app.add_subcommand("stats", "Category totals, severity distribution and imbalance ratio");
  std::string stats_qa, stats_sev, stats_out;
  stats->add_option("--qa", stats_qa, "QA JSONL")->required();
  stats->add_option("--severity", stats_sev, "Per-image destruction percentages from generate --severity-out");
  stats->add_option("--out", stats_out, "Output JSON (default stdout)");

  // eval
  auto* ev = app.add_subcommand("eval", "Score predictions against gold QA records");
  std::string gold_path, pred_path, report_path;
  unsigned eval_threads = 1;
  ev->add_option("--gold", gold_path, "Gold QA JSONL")->required();
  ev->add_option("--pred", pred_path, "Predictions JSONL: image_id, template_id, answer")->required();
  ev->add_option("--report", report_path, "Output report JSON (default stdout)");
  ev->add_option("--threads", eval_threads, "Scoring threads")->check(CLI::Range(1u, 256u));

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of the change-scan gradients");
  std::string gc_dims = "1,8,3,4", gc_report, gc_evolution = "mean";
  std::uint64_t gc_seed = 0;
  int gc_seeds = 1;
  bool gc_exact = false, gc_scan_only = false;
  gc->add_option("--dims", gc_dims, "B,L,D,N");
  gc->add_option("--seed", gc_seed, "First seed");
  gc->add_option("--seeds", gc_seeds, "Number of consecutive seeds")->check(CLI::Range(1, 10000));
  gc->add_option("--report", gc_report, "Output JSON (array of per-seed reports)");
  gc->add_flag("--exact-zoh", gc_exact, "Exact zero-order-hold input discretisation");
  gc->add_option("--evolution", gc_evolution, "Step for the shared evolution: mean, pre or post");
  gc->add_flag("--scan-only", gc_scan_only, "Skip the parameter-prediction groups");

  // scan-bench
  auto* bench = app.add_subcommand("scan-bench", "Time the reference and chunked scans");
  std::string bench_dims = "4,4096,16,16";
  std::size_t chunk = 64;
  int repeat = 3;
  std::uint64_t bench_seed = 0;
  bench->add_option("--dims", bench_dims, "B,L,D,N");
  bench->add_option("--chunk", chunk, "Chunk length of the fast scan")->check(CLI::Range(std::size_t{1}, std::size_t{1} << 30));
  bench->add_option("--repeat", repeat, "Timed repetitions (best is reported)")->check(CLI::Range(1, 1000));
  bench->add_option("--seed", bench_seed, "Input seed");

  // train-toy
  auto* train = app.add_subcommand("train-toy", "Train the toy model on synthetic scenes");
  std::uint64_t train_seed = 0;
  int epochs = 5;
  std::string fusion = "mul", train_report;
  std::size_t layers = 2, samples = 512, heldout = 256;
  bool ablate = false, no_pair = false, no_gate = false, tie = false;
  unsigned train_threads = 1;
  train->add_option("--seed", train_seed, "Task and model seed");
  train->add_option("--epochs", epochs, "Epochs")->check(CLI::Range(0, 10000));
  train->add_option("--fusion", fusion, "Question fusion: mul, sum, concat, sub or nsub");
  train->add_option("--layers", layers, "Change-scan layers")->check(CLI::Range(std::size_t{1}, std::size_t{64}));
  train->add_flag("--ablate-text", ablate, "Zero the description embedding in the change scan");
  train->add_option("--samples", samples, "Training samples")->check(CLI::Range(std::size_t{1}, std::size_t{1} << 24));
  train->add_option("--heldout", heldout, "Held-out samples")->check(CLI::Range(std::size_t{1}, std::size_t{1} << 24));
  train->add_option("--threads", train_threads, "Scene rendering threads")->check(CLI::Range(1u, 256u));
  train->add_flag("--tie-streams", tie, "Share CNN and scan weights between pre and post streams");
  train->add_flag("--no-pair", no_pair, "Skip the paired run with the text setting flipped");
  train->add_flag("--no-gate", no_gate, "Skip the gradcheck gate");
  train->add_option("--report", train_report, "Output report JSON (default stdout)");

  // templates
  auto* tmpl = app.add_subcommand("templates", "Export the 40-template registry as JSON");
  std::string tmpl_out;
  tmpl->add_option("--out", tmpl_out, "Output JSON (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  if (*gen) {
    SpreadMeasure measure = SpreadMeasure::DistanceStdDev;
    if (spread == "rms-radius") {
      measure = SpreadMeasure::RmsRadius;
    } else if (spread != "distance-std") {
      throw ValidationError("--spread must be distance-std or rms-radius");
    }
    const auto size = parse_resize(resize);
    const auto entries = io::load_manifest(manifest);
    const auto corpus = io::load_corpus(entries, threads, size);
    const auto items = generate_dataset(corpus, threads, measure);
    io::write_qa_jsonl(out_path, items);
    if (!severity_out.empty()) {
      std::vector<std::pair<std::string, double>> os;
      for (const auto& [id, mask] : corpus) os.emplace_back(id, destruction_percentage(count_labels(mask)));
      std::sort(os.begin(), os.end());
      io::write_text(severity_out, io::severity_jsonl(os));
    }
    if (!vocab_out.empty()) {
      std::string v;
      for (const auto& t : AnswerVocabulary::standard().tokens()) v += t + "\n";
      io::write_text(vocab_out, v);
    }
    std::fprintf(stderr, "generate: %zu images, %zu records -> %s\n", corpus.size(), items.size(), out_path.c_str());
    return 0;
  }
  if (*stats) {
    const auto items = io::read_qa_jsonl(stats_qa);
    std::vector<double> os;
    if (!stats_sev.empty()) {
      for (const auto& [id, v] : io::read_severity_jsonl(stats_sev)) os.push_back(v);
    }
    emit(stats_out, io::stats_to_json(dataset_stats(items, os)));
    return 0;
  }
  if (*ev) {
    const auto gold = io::read_qa_jsonl(gold_path);
    const auto preds = io::read_predictions_jsonl(pred_path);
    const auto rep = score(gold, preds, AnswerVocabulary::standard(), eval_threads);
    emit(report_path, report_to_json(rep));
    if (!report_path.empty()) {
      std::fprintf(stderr, "eval: %lld items, OA %.4f, AA %.4f, macro-F1 %.4f\n", static_cast<long long>(rep.items),
                   rep.overall_accuracy, rep.average_accuracy, rep.macro_f1);
    }
    return 0;
  }
  if (*gc) {
    const auto dims = parse_dims(gc_dims);
    tcssm::GradcheckOptions o;
    o.scan = scan_options(gc_exact, gc_evolution);
    o.include_block = !gc_scan_only;
    bool ok = true;
    std::string json = "[\n";
    for (int k = 0; k < gc_seeds; ++k) {
      const auto rep = tcssm::gradcheck(dims, gc_seed + static_cast<std::uint64_t>(k), o);
      double worst = 0.0;
      for (const auto& g : rep.groups) worst = std::max(worst, g.max_rel_error);
      std::fprintf(stderr, "seed %llu: %s, %zu groups, max relative error %.3e, margin %.3e\n",
                   static_cast<unsigned long long>(rep.seed), rep.pass() ? "pass" : "FAIL", rep.groups.size(), worst,
                   rep.min_margin);
      for (const auto& g : rep.groups) {
        if (!g.pass) std::fprintf(stderr, "  %s: %.3e\n", g.name.c_str(), g.max_rel_error);
      }
      ok = ok && rep.pass();
      std::string one = tcssm::report_to_json(rep);
      while (!one.empty() && one.back() == '\n') one.pop_back();
      json += one + (k + 1 < gc_seeds ? ",\n" : "\n");
    }
    json += "]\n";
    if (!gc_report.empty()) io::write_text(gc_report, json);
    return ok ? 0 : 1;
  }
  if (*bench) {
    const auto dims = parse_dims(bench_dims);
    const auto [pair, params] = random_scan(dims, bench_seed);
    using Clock = std::chrono::steady_clock;
    double best_ref = 1e300, best_fast = 1e300;
    tcssm::ScanOutput ref, fast;
    for (int r = 0; r < repeat; ++r) {
      auto t0 = Clock::now();
      ref = tcssm::change_scan_ref(pair, params);
      best_ref = std::min(best_ref, std::chrono::duration<double>(Clock::now() - t0).count());
      t0 = Clock::now();
      fast = tcssm::change_scan_fast(pair, params, {}, chunk);
      best_fast = std::min(best_fast, std::chrono::duration<double>(Clock::now() - t0).count());
    }
    double num = 0.0, den = 0.0;
    for (const auto* t : {&ref.y, &ref.y_prime}) {
      const Tensor& other = t == &ref.y ? fast.y : fast.y_prime;
      for (std::size_t i = 0; i < t->size(); ++i) {
        num = std::max(num, std::abs((*t)[i] - other[i]));
        den = std::max(den, std::abs((*t)[i]));
      }
    }
    std::printf("dims B=%zu L=%zu D=%zu N=%zu chunk=%zu\n", dims.batch, dims.length, dims.width, dims.state, chunk);
    std::printf("reference %.4f s, fast %.4f s, ratio %.3f, max relative error %.3e\n", best_ref, best_fast,
                best_fast / best_ref, den > 0 ? num / den : num);
    return 0;
  }
  if (*train) {
    toy::ModelConfig cfg;
    const auto f = toy::fusion_from_name(fusion);
    if (!f) throw ValidationError("--fusion must be mul, sum, concat, sub or nsub");
    cfg.fusion = *f;
    cfg.layers = layers;
    cfg.epochs = epochs;
    cfg.ablate_text = ablate;
    cfg.tie_streams = tie;
    toy::TaskOptions to;
    to.seed = train_seed;
    to.train_samples = samples;
    to.heldout_samples = heldout;
    to.threads = train_threads;
    const auto task = toy::SyntheticTask::generate(to);
    toy::TrainOptions opts;
    opts.seed = train_seed;
    opts.gate_gradcheck = !no_gate;
    opts.paired_ablation = !no_pair;
    try {
      const auto rep = toy::train_toy(cfg, task, opts);
      emit(train_report, toy::report_to_json(rep));
      std::fprintf(stderr, "train-toy: loss %.4f -> %.4f, held-out OA %.4f (majority baseline %.4f)\n",
                   rep.run.initial_loss, rep.run.final_loss, rep.run.heldout.report.overall_accuracy, rep.baseline_oa);
    } catch (const toy::TrainingDiverged& e) {
      std::fprintf(stderr, "error: %s\n", e.what());
      return 1;
    }
    return 0;
  }
  if (*tmpl) {
    emit(tmpl_out, io::templates_to_json());
    return 0;
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const cdvqa::ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const cdvqa::IoError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
