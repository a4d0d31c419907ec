// Copyright 2026 The cdvqa Authors
// SPDX-License-Identifier: Apache-2.0
#include "cdvqa/qa.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <thread>

#include "cdvqa/errors.hpp"

namespace cdvqa {

namespace {

constexpr std::array<std::string_view, kNumCategories> kCategoryNames = {
    "damage_detection", "quantitative", "comparative", "severity",
    "spatial",          "contextual",   "threshold",   "recovery_assessment",
};
constexpr std::array<std::string_view, kNumCategories> kCategoryTitles = {
    "Damage Detection", "Quantitative", "Comparative", "Severity",
    "Spatial",          "Contextual",   "Threshold",   "Recovery Assessment",
};

constexpr std::array<std::string_view, kNumSeverityLevels> kSeverityNames = {
    "No damage", "Minor damage", "Moderate damage", "Severe damage", "Extensive damage",
};

using QC = QuestionCategory;
using AR = AnswerRule;

// Question wording is free; template ids are the stable keys.
constexpr std::array<QATemplate, kQuestionsPerImage> kRegistry = {{
    {"dd_intact_present", QC::DamageDetection, "Are there any intact buildings in the image?", AR::IntactPresent},
    {"dd_damaged_present", QC::DamageDetection, "Are there any damaged buildings in the image?", AR::DamagedPresent},
    {"dd_destroyed_present", QC::DamageDetection, "Are there any destroyed buildings in the image?", AR::DestroyedPresent},
    {"dd_buildings_present", QC::DamageDetection, "Are there any buildings in the image?", AR::BuildingsPresent},
    {"dd_damage_evidence", QC::DamageDetection, "Is there any evidence of structural damage in the area?", AR::DamageEvidence},
    {"dd_all_intact", QC::DamageDetection, "Are all buildings in the image intact?", AR::AllBuildingsIntact},

    {"qt_intact_share_image", QC::Quantitative, "What percentage of the image is covered by intact buildings?", AR::IntactShareOfImage},
    {"qt_damaged_share_image", QC::Quantitative, "What percentage of the image is covered by damaged buildings?", AR::DamagedShareOfImage},
    {"qt_destroyed_share_image", QC::Quantitative, "What percentage of the image is covered by destroyed buildings?", AR::DestroyedShareOfImage},
    {"qt_background_share_image", QC::Quantitative, "What percentage of the image is background?", AR::BackgroundShareOfImage},
    {"qt_intact_share_buildings", QC::Quantitative, "What percentage of the buildings are intact?", AR::IntactShareOfBuildings},
    {"qt_damaged_share_buildings", QC::Quantitative, "What percentage of the buildings are damaged?", AR::DamagedShareOfBuildings},
    {"qt_destroyed_share_buildings", QC::Quantitative, "What percentage of the buildings are destroyed?", AR::DestroyedShareOfBuildings},
    {"qt_building_share_image", QC::Quantitative, "What percentage of the image is covered by buildings?", AR::BuildingShareOfImage},

    {"cmp_dominant_destruction", QC::Comparative, "Which destruction type is dominant, damaged or destroyed?", AR::DominantDestruction},
    {"cmp_intact_vs_affected", QC::Comparative, "Are there more intact or affected building areas?", AR::IntactVsAffected},
    {"cmp_damaged_gt_destroyed", QC::Comparative, "Are there more damaged than destroyed building areas?", AR::MoreDamagedThanDestroyed},
    {"cmp_intact_gt_damaged", QC::Comparative, "Are there more intact than damaged building areas?", AR::MoreIntactThanDamaged},
    {"cmp_intact_gt_destroyed", QC::Comparative, "Are there more intact than destroyed building areas?", AR::MoreIntactThanDestroyed},
    {"cmp_affected_gt_intact", QC::Comparative, "Is the affected building area larger than the intact building area?", AR::MoreAffectedThanIntact},

    {"sev_overall_level", QC::Severity, "What is the overall severity of the damage?", AR::SeverityLevelName},
    {"sev_widely_affected", QC::Severity, "Is the area widely affected by the disaster?", AR::WidelyAffected},
    {"sev_catastrophic", QC::Severity, "Is the area catastrophically affected?", AR::CatastrophicallyAffected},
    {"sev_affected_share", QC::Severity, "What share of the area is affected by damage or destruction?", AR::AffectedAreaBucket},

    {"sp_pattern", QC::Spatial, "How is the destruction distributed across the image?", AR::SpatialPatternName},
    {"sp_concentrated", QC::Spatial, "Is the destruction concentrated in one area?", AR::DestructionConcentrated},

    {"ctx_resilience_class", QC::Contextual, "How resilient were the structures in this area?", AR::ResilienceClass},
    {"ctx_majority_intact", QC::Contextual, "Did the majority of buildings remain intact?", AR::MajorityIntact},
    {"ctx_buildings_exist", QC::Contextual, "Does the scene contain built-up structures?", AR::AnyBuildings},
    {"ctx_surviving_share", QC::Contextual, "What share of the structures survived intact?", AR::IntactBuildingBucket},

    {"thr_below_5", QC::Threshold, "Is less than 5% of the area damaged or destroyed?", AR::DestructionBelowThreshold, 5},
    {"thr_below_10", QC::Threshold, "Is less than 10% of the area damaged or destroyed?", AR::DestructionBelowThreshold, 10},
    {"thr_above_25", QC::Threshold, "Is more than 25% of the area damaged or destroyed?", AR::DestructionAboveThreshold, 25},
    {"thr_above_50", QC::Threshold, "Is more than 50% of the area damaged or destroyed?", AR::DestructionAboveThreshold, 50},
    {"thr_above_75", QC::Threshold, "Is more than 75% of the area damaged or destroyed?", AR::DestructionAboveThreshold, 75},
    {"thr_above_90", QC::Threshold, "Is more than 90% of the area damaged or destroyed?", AR::DestructionAboveThreshold, 90},

    {"rec_reconstruction", QC::RecoveryAssessment, "Does the area need reconstruction?", AR::ReconstructionNeeded},
    {"rec_emergency", QC::RecoveryAssessment, "Are emergency services required in this area?", AR::EmergencyServicesNeeded},
    {"rec_habitable", QC::RecoveryAssessment, "Is the area still habitable?", AR::Habitable},
    {"rec_response_scale", QC::RecoveryAssessment, "What scale of recovery response is required?", AR::ResponseScale},
}};

std::vector<std::string> standard_tokens() {
  std::vector<std::string> t = {
      std::string(answer::kYes),      std::string(answer::kNo),
      std::string(answer::kIntact),   std::string(answer::kAffected),
      std::string(answer::kDamaged),  std::string(answer::kDestroyed),
  };
  for (auto s : kSeverityNames) t.emplace_back(s);
  for (int k = 0; k < 10; ++k) t.push_back(PercentBucket{k}.token());
  for (auto s : {answer::kConcentrated, answer::kSpread, answer::kNoDestruction,
                 answer::kHighResilience, answer::kModerateResilience, answer::kLowResilience,
                 answer::kMajorResponse, answer::kMinorResponse, answer::kNoBuildings}) {
    t.emplace_back(s);
  }
  return t;
}

void require_nonempty(const ClassCounts& counts) {
  if (counts.n_total <= 0) throw ValidationError("class counts describe an empty mask");
}

std::string bucket_or_none(std::optional<int> p) {
  return p ? bucket(*p).token() : std::string(answer::kNoBuildings);
}

std::vector<QAItem> gen_category(QuestionCategory cat, const SceneFacts& facts,
                                 std::string_view image_id) {
  require_nonempty(facts.counts);
  std::vector<QAItem> out;
  for (const auto& t : kRegistry) {
    if (t.category != cat) continue;
    out.push_back(QAItem{std::string(image_id), std::string(t.template_id), t.category,
                         std::string(t.question), answer_for(t, facts)});
  }
  return out;
}

}  // namespace

std::string_view category_name(QuestionCategory c) { return kCategoryNames[static_cast<int>(c)]; }
std::string_view category_title(QuestionCategory c) { return kCategoryTitles[static_cast<int>(c)]; }

QuestionCategory category_from_name(std::string_view name) {
  for (int i = 0; i < kNumCategories; ++i) {
    if (kCategoryNames[i] == name) return static_cast<QuestionCategory>(i);
  }
  throw ValidationError("unknown question category '" + std::string(name) + "'");
}

AnswerVocabulary::AnswerVocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], i).second) {
      throw ValidationError("duplicate answer token '" + tokens_[i] + "'");
    }
  }
}

const AnswerVocabulary& AnswerVocabulary::standard() {
  static const AnswerVocabulary vocab(standard_tokens());
  return vocab;
}

std::optional<std::size_t> AnswerVocabulary::index_of(std::string_view token) const {
  auto it = index_.find(token);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::string_view severity_name(SeverityLevel s) { return kSeverityNames[static_cast<int>(s)]; }

SeverityLevel severity_level(double os) {
  if (!(os >= 0.0 && os <= 100.0)) {
    throw ValidationError("overall severity percentage out of [0,100]");
  }
  if (os == 0.0) return SeverityLevel::NoDamage;
  if (os < 10.0) return SeverityLevel::Minor;
  if (os < 30.0) return SeverityLevel::Moderate;
  if (os < 60.0) return SeverityLevel::Severe;
  return SeverityLevel::Extensive;
}

int percent_of_total(const ClassCounts& counts, Label l) {
  require_nonempty(counts);
  return static_cast<int>((100 * counts.of(l)) / counts.n_total);
}

std::optional<int> percent_of_buildings(const ClassCounts& counts, Label l) {
  if (l == Label::Background) {
    throw ValidationError("building percentage requested for the background label");
  }
  const std::int64_t denom = counts.buildings();
  if (denom == 0) return std::nullopt;
  return static_cast<int>((100 * counts.of(l)) / denom);
}

std::string PercentBucket::token() const {
  return std::to_string(10 * decile) + "-" + std::to_string(10 * decile + 10) + "%";
}

PercentBucket bucket(int percent) {
  if (percent < 0 || percent > 100) {
    throw ValidationError("percentage " + std::to_string(percent) + " outside [0,100]");
  }
  return PercentBucket{std::min(percent / 10, 9)};
}

std::string_view spatial_name(SpatialPattern p) {
  switch (p) {
    case SpatialPattern::ConcentratedInOneArea: return answer::kConcentrated;
    case SpatialPattern::SpreadThroughout: return answer::kSpread;
    case SpatialPattern::NoDestruction: return answer::kNoDestruction;
  }
  return answer::kNoDestruction;
}

SpatialPattern spatial_pattern(std::span<const PixelCoord> pts, SpreadMeasure measure) {
  if (pts.empty()) return SpatialPattern::NoDestruction;
  const double n = static_cast<double>(pts.size());
  double sx = 0.0, sy = 0.0;
  for (const auto& p : pts) {
    sx += p.x;
    sy += p.y;
  }
  const double cx = sx / n, cy = sy / n;

  std::vector<double> dist(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) {
    dist[i] = std::hypot(pts[i].x - cx, pts[i].y - cy);
  }
  double spread = 0.0;
  if (measure == SpreadMeasure::DistanceStdDev) {
    double mean = 0.0;
    for (double d : dist) mean += d;
    mean /= n;
    double var = 0.0;
    for (double d : dist) var += (d - mean) * (d - mean);
    spread = std::sqrt(var / n);
  } else {
    double ms = 0.0;
    for (double d : dist) ms += d * d;
    spread = std::sqrt(ms / n);
  }
  const auto within = std::count_if(dist.begin(), dist.end(), [&](double d) { return d < spread; });
  // within / N_d > 0.7, kept in integers.
  return 10 * static_cast<std::int64_t>(within) > 7 * static_cast<std::int64_t>(pts.size())
             ? SpatialPattern::ConcentratedInOneArea
             : SpatialPattern::SpreadThroughout;
}

SpatialPattern spatial_pattern(const SemanticMask& mask, SpreadMeasure measure) {
  const auto pts = destruction_pixels(mask);
  return spatial_pattern(std::span<const PixelCoord>(pts), measure);
}

std::optional<double> resilience_ratio(const ClassCounts& counts) {
  const std::int64_t denom = counts.buildings();
  if (denom == 0) return std::nullopt;
  return static_cast<double>(counts.n_intact) / static_cast<double>(denom);
}

bool threshold_answer(double p, int threshold) {
  switch (threshold) {
    case 5:
    case 10:
      return p < threshold;
    case 25:
    case 50:
    case 75:
    case 90:
      return p > threshold;
    default:
      throw ValidationError("threshold " + std::to_string(threshold) +
                            " is not one of {5,10,25,50,75,90}");
  }
}

std::string_view rule_name(AnswerRule r) {
  static constexpr std::array<std::string_view, 36> kNames = {
      "intact_present",        "damaged_present",          "destroyed_present",
      "buildings_present",     "damage_evidence",          "all_buildings_intact",
      "intact_share_of_image", "damaged_share_of_image",   "destroyed_share_of_image",
      "background_share_of_image", "intact_share_of_buildings", "damaged_share_of_buildings",
      "destroyed_share_of_buildings", "building_share_of_image", "dominant_destruction",
      "intact_vs_affected",    "more_damaged_than_destroyed", "more_intact_than_damaged",
      "more_intact_than_destroyed", "more_affected_than_intact", "severity_level",
      "widely_affected",       "catastrophically_affected", "affected_area_bucket",
      "spatial_pattern",       "destruction_concentrated", "resilience_class",
      "majority_intact",       "any_buildings",            "intact_building_bucket",
      "destruction_below_threshold", "destruction_above_threshold", "reconstruction_needed",
      "emergency_services_needed", "habitable",           "response_scale",
  };
  return kNames[static_cast<int>(r)];
}

std::span<const QATemplate> template_registry() { return kRegistry; }

std::optional<std::size_t> template_index(std::string_view template_id) {
  for (std::size_t i = 0; i < kRegistry.size(); ++i) {
    if (kRegistry[i].template_id == template_id) return i;
  }
  return std::nullopt;
}

SceneFacts scene_facts(const SemanticMask& mask, SpreadMeasure measure) {
  return SceneFacts{count_labels(mask), spatial_pattern(mask, measure)};
}

std::string answer_for(const QATemplate& tmpl, const SceneFacts& facts) {
  const ClassCounts& c = facts.counts;
  require_nonempty(c);
  const std::int64_t n1 = c.n_intact, n2 = c.n_damaged, n3 = c.n_destroyed;
  const double p = destruction_percentage(c);
  const int p_floor = static_cast<int>((100 * c.destruction()) / c.n_total);

  switch (tmpl.rule) {
    case AR::IntactPresent: return std::string(yes_no(n1 > 0));
    case AR::DamagedPresent: return std::string(yes_no(n2 > 0));
    case AR::DestroyedPresent: return std::string(yes_no(n3 > 0));
    case AR::BuildingsPresent: return std::string(yes_no(c.buildings() > 0));
    case AR::DamageEvidence: return std::string(yes_no(n2 + n3 > 0));
    case AR::AllBuildingsIntact: return std::string(yes_no(n1 > 0 && n2 + n3 == 0));

    case AR::IntactShareOfImage: return bucket(percent_of_total(c, Label::Intact)).token();
    case AR::DamagedShareOfImage: return bucket(percent_of_total(c, Label::Damaged)).token();
    case AR::DestroyedShareOfImage: return bucket(percent_of_total(c, Label::Destroyed)).token();
    case AR::BackgroundShareOfImage: return bucket(percent_of_total(c, Label::Background)).token();
    case AR::IntactShareOfBuildings: return bucket_or_none(percent_of_buildings(c, Label::Intact));
    case AR::DamagedShareOfBuildings: return bucket_or_none(percent_of_buildings(c, Label::Damaged));
    case AR::DestroyedShareOfBuildings:
      return bucket_or_none(percent_of_buildings(c, Label::Destroyed));
    case AR::BuildingShareOfImage:
      return bucket(static_cast<int>((100 * c.buildings()) / c.n_total)).token();

    // Equality falls through to the second case, as written in the rule.
    case AR::DominantDestruction:
      return std::string(n2 > n3 ? answer::kDamaged : answer::kDestroyed);
    case AR::IntactVsAffected:
      return std::string(n1 > n2 + n3 ? answer::kIntact : answer::kAffected);
    case AR::MoreDamagedThanDestroyed: return std::string(yes_no(n2 > n3));
    case AR::MoreIntactThanDamaged: return std::string(yes_no(n1 > n2));
    case AR::MoreIntactThanDestroyed: return std::string(yes_no(n1 > n3));
    case AR::MoreAffectedThanIntact: return std::string(yes_no(n2 + n3 > n1));

    case AR::SeverityLevelName: return std::string(severity_name(severity_level(p)));
    case AR::WidelyAffected: return std::string(yes_no(p >= 30.0));
    case AR::CatastrophicallyAffected: return std::string(yes_no(p >= 60.0));
    case AR::AffectedAreaBucket: return bucket(p_floor).token();

    case AR::SpatialPatternName: return std::string(spatial_name(facts.spatial));
    case AR::DestructionConcentrated:
      return std::string(yes_no(facts.spatial == SpatialPattern::ConcentratedInOneArea));

    case AR::ResilienceClass: {
      const auto r = resilience_ratio(c);
      if (!r) return std::string(answer::kNoBuildings);
      if (*r >= kHighResilience) return std::string(answer::kHighResilience);
      if (*r >= kModerateResilience) return std::string(answer::kModerateResilience);
      return std::string(answer::kLowResilience);
    }
    case AR::MajorityIntact: {
      const auto r = resilience_ratio(c);
      if (!r) return std::string(answer::kNoBuildings);
      return std::string(yes_no(*r > 0.5));
    }
    case AR::AnyBuildings: return std::string(yes_no(c.buildings() > 0));
    case AR::IntactBuildingBucket: return bucket_or_none(percent_of_buildings(c, Label::Intact));

    case AR::DestructionBelowThreshold:
    case AR::DestructionAboveThreshold:
      return std::string(yes_no(threshold_answer(p, tmpl.threshold)));

    case AR::ReconstructionNeeded:
    case AR::EmergencyServicesNeeded:
      return std::string(yes_no(p > kReconstructionThreshold));
    case AR::Habitable: return std::string(yes_no(p <= kReconstructionThreshold));
    case AR::ResponseScale:
      return std::string(p > kReconstructionThreshold ? answer::kMajorResponse
                                                      : answer::kMinorResponse);
  }
  throw ValidationError("unhandled answer rule");
}

std::vector<QAItem> gen_damage_detection(const ClassCounts& counts, std::string_view image_id) {
  return gen_category(QC::DamageDetection, {counts}, image_id);
}
std::vector<QAItem> gen_quantitative(const ClassCounts& counts, std::string_view image_id) {
  return gen_category(QC::Quantitative, {counts}, image_id);
}
std::vector<QAItem> gen_comparative(const ClassCounts& counts, std::string_view image_id) {
  return gen_category(QC::Comparative, {counts}, image_id);
}
std::vector<QAItem> gen_severity(const ClassCounts& counts, std::string_view image_id) {
  return gen_category(QC::Severity, {counts}, image_id);
}
std::vector<QAItem> gen_spatial(const SemanticMask& mask, std::string_view image_id,
                                SpreadMeasure measure) {
  return gen_category(QC::Spatial, scene_facts(mask, measure), image_id);
}
std::vector<QAItem> gen_contextual(const ClassCounts& counts, std::string_view image_id) {
  return gen_category(QC::Contextual, {counts}, image_id);
}
std::vector<QAItem> gen_threshold(const ClassCounts& counts, std::string_view image_id) {
  return gen_category(QC::Threshold, {counts}, image_id);
}
std::vector<QAItem> gen_recovery(const ClassCounts& counts, std::string_view image_id) {
  return gen_category(QC::RecoveryAssessment, {counts}, image_id);
}

std::vector<QAItem> generate_all(const SemanticMask& mask, std::string_view image_id,
                                 SpreadMeasure measure) {
  const SceneFacts facts = scene_facts(mask, measure);
  std::vector<QAItem> out;
  out.reserve(kRegistry.size());
  for (const auto& t : kRegistry) {
    out.push_back(QAItem{std::string(image_id), std::string(t.template_id), t.category,
                         std::string(t.question), answer_for(t, facts)});
  }
  return out;
}

void sort_items(std::vector<QAItem>& items) {
  auto key = [](const QAItem& q) { return template_index(q.template_id).value_or(kRegistry.size()); };
  std::stable_sort(items.begin(), items.end(), [&](const QAItem& a, const QAItem& b) {
    if (a.image_id != b.image_id) return a.image_id < b.image_id;
    return key(a) < key(b);
  });
}

std::vector<QAItem> generate_dataset(std::span<const std::pair<std::string, SemanticMask>> masks,
                                     unsigned threads, SpreadMeasure measure) {
  std::set<std::string_view> seen;
  for (const auto& [id, mask] : masks) {
    if (!seen.insert(id).second) throw ValidationError("duplicate image id '" + id + "'");
  }
  // Sort indices by image id so the output order is independent of input and threads.
  std::vector<std::size_t> order(masks.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return masks[a].first < masks[b].first; });

  std::vector<std::vector<QAItem>> per_image(masks.size());
  const unsigned n_threads = std::max(1u, std::min<unsigned>(threads, masks.size()));
  auto work = [&](unsigned tid) {
    for (std::size_t k = tid; k < order.size(); k += n_threads) {
      const auto& [id, mask] = masks[order[k]];
      per_image[k] = generate_all(mask, id, measure);
    }
  };
  if (n_threads == 1) {
    work(0);
  } else {
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < n_threads; ++t) pool.emplace_back(work, t);
  }

  std::vector<QAItem> out;
  out.reserve(masks.size() * kRegistry.size());
  for (auto& v : per_image) {
    for (auto& q : v) out.push_back(std::move(q));
  }
  return out;
}

std::optional<double> imbalance_ratio(std::span<const double> f) {
  if (f.empty()) return std::nullopt;
  const auto [lo, hi] = std::minmax_element(f.begin(), f.end());
  if (!(*lo > 0.0)) return std::nullopt;
  return *hi / *lo;
}

DatasetStats dataset_stats(std::span<const QAItem> items, std::span<const double> os_values) {
  if (items.empty()) throw ValidationError("dataset statistics need at least one item");
  DatasetStats s;
  std::set<std::string_view> images;
  std::array<std::int64_t, kNumSeverityLevels> sev_counts{};
  std::int64_t sev_total = 0;
  for (const auto& q : items) {
    images.insert(q.image_id);
    ++s.category_totals[static_cast<int>(q.category)];
    if (q.template_id == "sp_pattern") ++s.spatial_counts[q.answer];
    if (q.template_id == "rec_reconstruction") {
      (q.answer == answer::kYes ? s.reconstruction_needed : s.reconstruction_not_needed)++;
    }
    if (os_values.empty() && q.template_id == "sev_overall_level") {
      const auto it = std::find(kSeverityNames.begin(), kSeverityNames.end(), q.answer);
      if (it == kSeverityNames.end()) {
        throw ValidationError("unknown severity answer '" + q.answer + "'");
      }
      ++sev_counts[it - kSeverityNames.begin()];
      ++sev_total;
    }
  }
  for (double os : os_values) {
    ++sev_counts[static_cast<int>(severity_level(os))];
    ++sev_total;
  }
  s.images = static_cast<std::int64_t>(images.size());
  s.questions = static_cast<std::int64_t>(items.size());
  if (sev_total > 0) {
    for (int i = 0; i < kNumSeverityLevels; ++i) {
      s.severity_frequencies[i] = static_cast<double>(sev_counts[i]) / static_cast<double>(sev_total);
    }
    s.imbalance_ratio = imbalance_ratio(s.severity_frequencies);
  }
  return s;
}

}  // namespace cdvqa
