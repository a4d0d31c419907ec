// Copyright 2026 The cdvqa Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once
//
// Scoring of predicted answers against the generated gold set: overall
// accuracy, per-category and average accuracy, and macro precision / recall /
// F1 over answer classes.
//
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cdvqa/qa.hpp"

namespace cdvqa {

using ItemKey = std::pair<std::string, std::string>;  // (image_id, template_id)

// One predicted answer per gold item.
class PredictionSet {
 public:
  // Throws ValidationError on duplicate keys or tokens outside the vocabulary.
  void add(std::string image_id, std::string template_id, std::string answer,
           const AnswerVocabulary& vocab = AnswerVocabulary::standard());
  const std::map<ItemKey, std::string>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

 private:
  std::map<ItemKey, std::string> entries_;
};

// Rows are gold classes, columns predicted classes.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes) : n_(classes), counts_(classes * classes, 0) {}

  void add(std::size_t gold, std::size_t pred, std::int64_t count = 1) {
    counts_.at(gold * n_ + pred) += count;
  }
  void merge(const ConfusionMatrix& other);

  std::size_t classes() const { return n_; }
  std::int64_t at(std::size_t gold, std::size_t pred) const { return counts_[gold * n_ + pred]; }
  std::int64_t total() const;
  std::int64_t true_positives(std::size_t c) const { return at(c, c); }
  std::int64_t false_positives(std::size_t c) const;
  std::int64_t false_negatives(std::size_t c) const;

 private:
  std::size_t n_;
  std::vector<std::int64_t> counts_;
};

struct EvalReport {
  std::int64_t items = 0;
  double overall_accuracy = 0.0;
  double average_accuracy = 0.0;
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  double macro_f1 = 0.0;
  std::map<QuestionCategory, double> per_category_accuracy;
  std::map<std::string, double> per_class_f1;
};

// Per-class precision/recall/F1 macro-averaged over classes that occur in gold
// or predictions. A zero denominator counts as 0.
struct MacroScores {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::map<std::size_t, double> per_class_f1;
};
MacroScores macro_scores(const ConfusionMatrix& cm);

// Accuracy restricted to each category; categories without items are omitted.
std::map<QuestionCategory, double> per_category_breakdown(std::span<const QAItem> gold,
                                                          const PredictionSet& preds);

// Throws ValidationError when key sets differ (listing missing and extra ids)
// or a token is outside the vocabulary. Counting is sharded across `threads`
// and merged; the result does not depend on the thread count.
EvalReport score(std::span<const QAItem> gold, const PredictionSet& preds,
                 const AnswerVocabulary& vocab = AnswerVocabulary::standard(),
                 unsigned threads = 1);

// Deterministic JSON rendering: sorted keys, four-decimal fixed floats.
std::string report_to_json(const EvalReport& report);

}  // namespace cdvqa
