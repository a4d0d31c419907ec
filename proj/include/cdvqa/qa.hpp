// Copyright 2026 The cdvqa Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once
//
// Question-answer generation from semantic change masks.
//
// Every image receives the same fixed schedule of 40 templated questions in
// eight categories. Answers are pure functions of the mask: the label counts
// for most rules, and the destruction pixel geometry for the spatial rule.
//
#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cdvqa/mask.hpp"

namespace cdvqa {

enum class QuestionCategory : std::uint8_t {
  DamageDetection,
  Quantitative,
  Comparative,
  Severity,
  Spatial,
  Contextual,
  Threshold,
  RecoveryAssessment,
};

inline constexpr int kNumCategories = 8;
inline constexpr int kQuestionsPerImage = 40;
inline constexpr std::array<QuestionCategory, kNumCategories> kAllCategories = {
    QuestionCategory::DamageDetection, QuestionCategory::Quantitative,
    QuestionCategory::Comparative,     QuestionCategory::Severity,
    QuestionCategory::Spatial,         QuestionCategory::Contextual,
    QuestionCategory::Threshold,       QuestionCategory::RecoveryAssessment,
};
// Indexed by QuestionCategory.
inline constexpr std::array<int, kNumCategories> kQuestionsPerCategory = {6, 8, 6, 4, 2, 4, 6, 4};

// snake_case identifier used in files ("damage_detection").
std::string_view category_name(QuestionCategory c);
// Human-readable title ("Damage Detection").
std::string_view category_title(QuestionCategory c);
// Throws ValidationError for unknown names.
QuestionCategory category_from_name(std::string_view name);

// ---------------------------------------------------------------------------
// Answer tokens

namespace answer {
inline constexpr std::string_view kYes = "Yes";
inline constexpr std::string_view kNo = "No";
inline constexpr std::string_view kIntact = "Intact";
inline constexpr std::string_view kAffected = "Affected";
inline constexpr std::string_view kDamaged = "Damaged";
inline constexpr std::string_view kDestroyed = "Destroyed";
inline constexpr std::string_view kConcentrated = "Concentrated in one area";
inline constexpr std::string_view kSpread = "Spread throughout";
inline constexpr std::string_view kNoDestruction = "No destruction";
inline constexpr std::string_view kHighResilience = "High resilience";
inline constexpr std::string_view kModerateResilience = "Moderate resilience";
inline constexpr std::string_view kLowResilience = "Low resilience";
inline constexpr std::string_view kMajorResponse = "Major response";
inline constexpr std::string_view kMinorResponse = "Minor response";
inline constexpr std::string_view kNoBuildings = "No buildings";
}  // namespace answer

inline std::string_view yes_no(bool b) { return b ? answer::kYes : answer::kNo; }

// Closed set of every token the rules can emit, in a fixed order. Class
// indices are positions in that order.
class AnswerVocabulary {
 public:
  explicit AnswerVocabulary(std::vector<std::string> tokens);
  static const AnswerVocabulary& standard();

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(std::size_t index) const { return tokens_.at(index); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  std::optional<std::size_t> index_of(std::string_view token) const;
  bool contains(std::string_view token) const { return index_of(token).has_value(); }

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

// ---------------------------------------------------------------------------
// Rules

enum class SeverityLevel : std::uint8_t { NoDamage, Minor, Moderate, Severe, Extensive };
inline constexpr int kNumSeverityLevels = 5;
std::string_view severity_name(SeverityLevel s);
// Requires 0 <= os <= 100.
SeverityLevel severity_level(double os);

// floor(100 * N_l / N_total).
int percent_of_total(const ClassCounts& counts, Label l);
// floor(100 * N_l / N_building) for a building label; nullopt when the scene
// has no building pixels. Throws ValidationError for Label::Background.
std::optional<int> percent_of_buildings(const ClassCounts& counts, Label l);

// Half-open decile [10k, 10k+10); 100 lands in the top bucket.
struct PercentBucket {
  int decile = 0;
  std::string token() const;
  friend bool operator==(const PercentBucket&, const PercentBucket&) = default;
};
PercentBucket bucket(int percent);

enum class SpatialPattern : std::uint8_t { ConcentratedInOneArea, SpreadThroughout, NoDestruction };
std::string_view spatial_name(SpatialPattern p);

// Spread reference the centroid distances are compared against.
//   DistanceStdDev: population standard deviation of the distances (default).
//   RmsRadius:      root-mean-square distance from the centroid.
enum class SpreadMeasure : std::uint8_t { DistanceStdDev, RmsRadius };

SpatialPattern spatial_pattern(const SemanticMask& mask,
                               SpreadMeasure measure = SpreadMeasure::DistanceStdDev);
SpatialPattern spatial_pattern(std::span<const PixelCoord> destruction,
                               SpreadMeasure measure = SpreadMeasure::DistanceStdDev);

// N_intact / N_building; nullopt when there are no building pixels.
std::optional<double> resilience_ratio(const ClassCounts& counts);

// Thresholds accepted by threshold_answer.
inline constexpr std::array<int, 6> kDestructionThresholds = {5, 10, 25, 50, 75, 90};
// T in {5,10}: p < T. T in {25,50,75,90}: p > T. Throws ValidationError for
// any other T.
bool threshold_answer(double p, int threshold);

// Destruction share above which reconstruction is needed.
inline constexpr double kReconstructionThreshold = 40.0;
// Resilience cut-offs for the contextual class question.
inline constexpr double kHighResilience = 0.8;
inline constexpr double kModerateResilience = 0.5;

// ---------------------------------------------------------------------------
// Template registry

enum class AnswerRule : std::uint8_t {
  IntactPresent,
  DamagedPresent,
  DestroyedPresent,
  BuildingsPresent,
  DamageEvidence,
  AllBuildingsIntact,
  IntactShareOfImage,
  DamagedShareOfImage,
  DestroyedShareOfImage,
  BackgroundShareOfImage,
  IntactShareOfBuildings,
  DamagedShareOfBuildings,
  DestroyedShareOfBuildings,
  BuildingShareOfImage,
  DominantDestruction,
  IntactVsAffected,
  MoreDamagedThanDestroyed,
  MoreIntactThanDamaged,
  MoreIntactThanDestroyed,
  MoreAffectedThanIntact,
  SeverityLevelName,
  WidelyAffected,
  CatastrophicallyAffected,
  AffectedAreaBucket,
  SpatialPatternName,
  DestructionConcentrated,
  ResilienceClass,
  MajorityIntact,
  AnyBuildings,
  IntactBuildingBucket,
  DestructionBelowThreshold,
  DestructionAboveThreshold,
  ReconstructionNeeded,
  EmergencyServicesNeeded,
  Habitable,
  ResponseScale,
};
std::string_view rule_name(AnswerRule r);

struct QATemplate {
  std::string_view template_id;
  QuestionCategory category;
  std::string_view question;
  AnswerRule rule;
  int threshold = 0;  // only for the two threshold rules
};

// The 40 templates in schedule order, grouped by category.
std::span<const QATemplate> template_registry();
// Position in the registry, or nullopt.
std::optional<std::size_t> template_index(std::string_view template_id);

// Mask-derived quantities every rule reads from.
struct SceneFacts {
  ClassCounts counts;
  SpatialPattern spatial = SpatialPattern::NoDestruction;
};
SceneFacts scene_facts(const SemanticMask& mask,
                       SpreadMeasure measure = SpreadMeasure::DistanceStdDev);

std::string answer_for(const QATemplate& tmpl, const SceneFacts& facts);

struct QAItem {
  std::string image_id;
  std::string template_id;
  QuestionCategory category = QuestionCategory::DamageDetection;
  std::string question;
  std::string answer;
  friend bool operator==(const QAItem&, const QAItem&) = default;
};

// Per-category generators. Each returns the category's registry slice in
// order. Requires n_total > 0.
std::vector<QAItem> gen_damage_detection(const ClassCounts& counts, std::string_view image_id = {});
std::vector<QAItem> gen_quantitative(const ClassCounts& counts, std::string_view image_id = {});
std::vector<QAItem> gen_comparative(const ClassCounts& counts, std::string_view image_id = {});
std::vector<QAItem> gen_severity(const ClassCounts& counts, std::string_view image_id = {});
std::vector<QAItem> gen_spatial(const SemanticMask& mask, std::string_view image_id = {},
                                SpreadMeasure measure = SpreadMeasure::DistanceStdDev);
std::vector<QAItem> gen_contextual(const ClassCounts& counts, std::string_view image_id = {});
std::vector<QAItem> gen_threshold(const ClassCounts& counts, std::string_view image_id = {});
std::vector<QAItem> gen_recovery(const ClassCounts& counts, std::string_view image_id = {});

// All 40 items for one mask, in registry order.
std::vector<QAItem> generate_all(const SemanticMask& mask, std::string_view image_id,
                                 SpreadMeasure measure = SpreadMeasure::DistanceStdDev);

// Generates a whole corpus. Output is ordered by (image_id, registry order)
// regardless of thread count. Throws ValidationError on duplicate image ids.
std::vector<QAItem> generate_dataset(std::span<const std::pair<std::string, SemanticMask>> masks,
                                     unsigned threads = 1,
                                     SpreadMeasure measure = SpreadMeasure::DistanceStdDev);

// Orders items by (image_id, registry position).
void sort_items(std::vector<QAItem>& items);

// ---------------------------------------------------------------------------
// Corpus statistics

// max(f) / min(f); nullopt when f is empty or some f_i is zero.
std::optional<double> imbalance_ratio(std::span<const double> frequencies);

struct DatasetStats {
  std::int64_t images = 0;
  std::int64_t questions = 0;
  std::array<std::int64_t, kNumCategories> category_totals{};
  std::array<double, kNumSeverityLevels> severity_frequencies{};
  std::optional<double> imbalance_ratio;
  std::map<std::string, std::int64_t> spatial_counts;
  std::int64_t reconstruction_needed = 0;
  std::int64_t reconstruction_not_needed = 0;
};

// os_values holds one destruction percentage per image. When it is empty the
// severity classes are read from the severity-level answers instead.
// Throws ValidationError on an empty item list.
DatasetStats dataset_stats(std::span<const QAItem> items, std::span<const double> os_values = {});

}  // namespace cdvqa
