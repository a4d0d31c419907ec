// Copyright 2026 The cdvqa Authors
// SPDX-License-Identifier: Apache-2.0
#include "cdvqa/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <set>
#include <sstream>
#include <thread>

#include "cdvqa/errors.hpp"

namespace cdvqa {

void PredictionSet::add(std::string image_id, std::string template_id, std::string answer,
                        const AnswerVocabulary& vocab) {
  if (!vocab.contains(answer)) {
    throw ValidationError("unknown answer token '" + answer + "' for (" + image_id + ", " +
                          template_id + ")");
  }
  ItemKey key{std::move(image_id), std::move(template_id)};
  if (entries_.count(key)) {
    throw ValidationError("duplicate prediction for (" + key.first + ", " + key.second + ")");
  }
  entries_.emplace(std::move(key), std::move(answer));
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.n_ != n_) throw ValidationError("confusion matrices differ in class count");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

std::int64_t ConfusionMatrix::total() const {
  std::int64_t t = 0;
  for (auto c : counts_) t += c;
  return t;
}

std::int64_t ConfusionMatrix::false_positives(std::size_t c) const {
  std::int64_t s = 0;
  for (std::size_t g = 0; g < n_; ++g) {
    if (g != c) s += at(g, c);
  }
  return s;
}

std::int64_t ConfusionMatrix::false_negatives(std::size_t c) const {
  std::int64_t s = 0;
  for (std::size_t p = 0; p < n_; ++p) {
    if (p != c) s += at(c, p);
  }
  return s;
}

MacroScores macro_scores(const ConfusionMatrix& cm) {
  MacroScores m;
  std::size_t supported = 0;
  for (std::size_t c = 0; c < cm.classes(); ++c) {
    const auto tp = cm.true_positives(c), fp = cm.false_positives(c), fn = cm.false_negatives(c);
    if (tp + fp + fn == 0) continue;
    const double p = tp + fp > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
    const double r = tp + fn > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
    const double f1 = p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
    m.precision += p;
    m.recall += r;
    m.f1 += f1;
    m.per_class_f1[c] = f1;
    ++supported;
  }
  if (supported > 0) {
    m.precision /= static_cast<double>(supported);
    m.recall /= static_cast<double>(supported);
    m.f1 /= static_cast<double>(supported);
  }
  return m;
}

namespace {

void check_keys(std::span<const QAItem> gold, const PredictionSet& preds) {
  std::set<ItemKey> gold_keys;
  std::vector<std::string> duplicate, missing, extra;
  for (const auto& q : gold) {
    if (!gold_keys.emplace(q.image_id, q.template_id).second) {
      duplicate.push_back(q.image_id + "/" + q.template_id);
    }
  }
  for (const auto& k : gold_keys) {
    if (!preds.entries().count(k)) missing.push_back(k.first + "/" + k.second);
  }
  for (const auto& [k, v] : preds.entries()) {
    if (!gold_keys.count(k)) extra.push_back(k.first + "/" + k.second);
  }
  if (duplicate.empty() && missing.empty() && extra.empty()) return;

  auto list = [](const std::vector<std::string>& v) {
    std::string s;
    const std::size_t shown = std::min<std::size_t>(v.size(), 20);
    for (std::size_t i = 0; i < shown; ++i) s += (i ? ", " : "") + v[i];
    if (v.size() > shown) s += ", ... (" + std::to_string(v.size() - shown) + " more)";
    return s;
  };
  std::string msg = "gold and prediction keys differ.";
  if (!duplicate.empty()) msg += " duplicate gold: [" + list(duplicate) + "].";
  if (!missing.empty()) msg += " missing predictions: [" + list(missing) + "].";
  if (!extra.empty()) msg += " extra predictions: [" + list(extra) + "].";
  throw ValidationError(msg);
}

struct Shard {
  explicit Shard(std::size_t classes) : cm(classes) {}
  ConfusionMatrix cm;
  std::array<std::int64_t, kNumCategories> correct{};
  std::array<std::int64_t, kNumCategories> total{};
  std::string error;
};

}  // namespace

std::map<QuestionCategory, double> per_category_breakdown(std::span<const QAItem> gold,
                                                          const PredictionSet& preds) {
  std::array<std::int64_t, kNumCategories> correct{}, total{};
  for (const auto& q : gold) {
    auto it = preds.entries().find({q.image_id, q.template_id});
    if (it == preds.entries().end()) {
      throw ValidationError("missing prediction for (" + q.image_id + ", " + q.template_id + ")");
    }
    const int c = static_cast<int>(q.category);
    ++total[c];
    if (it->second == q.answer) ++correct[c];
  }
  std::map<QuestionCategory, double> out;
  for (int c = 0; c < kNumCategories; ++c) {
    if (total[c] == 0) continue;
    out[static_cast<QuestionCategory>(c)] =
        static_cast<double>(correct[c]) / static_cast<double>(total[c]);
  }
  return out;
}

EvalReport score(std::span<const QAItem> gold, const PredictionSet& preds,
                 const AnswerVocabulary& vocab, unsigned threads) {
  check_keys(gold, preds);

  const unsigned n_shards =
      std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(gold.size(), 1))));
  std::vector<Shard> shards(n_shards, Shard(vocab.size()));
  auto work = [&](unsigned s) {
    Shard& sh = shards[s];
    const std::size_t lo = gold.size() * s / n_shards, hi = gold.size() * (s + 1) / n_shards;
    for (std::size_t i = lo; i < hi; ++i) {
      const QAItem& q = gold[i];
      const auto g = vocab.index_of(q.answer);
      if (!g) {
        sh.error = "unknown gold answer token '" + q.answer + "'";
        return;
      }
      const std::string& pred = preds.entries().at({q.image_id, q.template_id});
      const auto p = vocab.index_of(pred);
      if (!p) {
        sh.error = "unknown predicted answer token '" + pred + "'";
        return;
      }
      sh.cm.add(*g, *p);
      const int c = static_cast<int>(q.category);
      ++sh.total[c];
      if (*g == *p) ++sh.correct[c];
    }
  };
  if (n_shards == 1) {
    work(0);
  } else {
    std::vector<std::jthread> pool;
    for (unsigned s = 0; s < n_shards; ++s) pool.emplace_back(work, s);
  }

  Shard merged(vocab.size());
  for (const auto& sh : shards) {
    if (!sh.error.empty()) throw ValidationError(sh.error);
    merged.cm.merge(sh.cm);
    for (int c = 0; c < kNumCategories; ++c) {
      merged.correct[c] += sh.correct[c];
      merged.total[c] += sh.total[c];
    }
  }

  EvalReport r;
  r.items = merged.cm.total();
  std::int64_t correct = 0;
  for (std::size_t c = 0; c < vocab.size(); ++c) correct += merged.cm.true_positives(c);
  r.overall_accuracy = r.items > 0 ? static_cast<double>(correct) / static_cast<double>(r.items) : 0.0;

  double aa = 0.0;
  for (int c = 0; c < kNumCategories; ++c) {
    if (merged.total[c] == 0) continue;
    const double acc = static_cast<double>(merged.correct[c]) / static_cast<double>(merged.total[c]);
    r.per_category_accuracy[static_cast<QuestionCategory>(c)] = acc;
    aa += acc;
  }
  if (!r.per_category_accuracy.empty()) {
    r.average_accuracy = aa / static_cast<double>(r.per_category_accuracy.size());
  }

  const MacroScores m = macro_scores(merged.cm);
  r.macro_precision = m.precision;
  r.macro_recall = m.recall;
  r.macro_f1 = m.f1;
  for (const auto& [cls, f1] : m.per_class_f1) r.per_class_f1[vocab.token(cls)] = f1;
  return r;
}

namespace {

std::string fixed4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

std::string quoted(std::string_view s) {
  std::string out = "\"";
  for (char ch : s) {
    switch (ch) {
      case '"': out += "\\\""; break;
      case '\\': out += "\\\\"; break;
      case '\n': out += "\\n"; break;
      case '\t': out += "\\t"; break;
      default:
        if (static_cast<unsigned char>(ch) < 0x20) {
          char buf[8];
          std::snprintf(buf, sizeof(buf), "\\u%04x", ch);
          out += buf;
        } else {
          out += ch;
        }
    }
  }
  return out + "\"";
}

}  // namespace

std::string report_to_json(const EvalReport& r) {
  // Keys are emitted in lexicographic order at every level.
  std::map<std::string, double> per_cat;
  for (const auto& [c, acc] : r.per_category_accuracy) per_cat[std::string(category_name(c))] = acc;

  std::ostringstream os;
  auto emit_map = [&](const std::map<std::string, double>& m) {
    os << "{";
    bool first = true;
    for (const auto& [k, v] : m) {
      os << (first ? "\n" : ",\n") << "    " << quoted(k) << ": " << fixed4(v);
      first = false;
    }
    os << (m.empty() ? "}" : "\n  }");
  };
  os << "{\n";
  os << "  \"average_accuracy\": " << fixed4(r.average_accuracy) << ",\n";
  os << "  \"f1_averaging\": \"macro over answer classes with support\",\n";
  os << "  \"items\": " << r.items << ",\n";
  os << "  \"macro_f1\": " << fixed4(r.macro_f1) << ",\n";
  os << "  \"macro_precision\": " << fixed4(r.macro_precision) << ",\n";
  os << "  \"macro_recall\": " << fixed4(r.macro_recall) << ",\n";
  os << "  \"overall_accuracy\": " << fixed4(r.overall_accuracy) << ",\n";
  os << "  \"per_category_accuracy\": ";
  emit_map(per_cat);
  os << ",\n  \"per_class_f1\": ";
  emit_map(r.per_class_f1);
  os << "\n}\n";
  return os.str();
}

}  // namespace cdvqa
