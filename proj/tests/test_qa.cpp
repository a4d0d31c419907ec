// Copyright 2026 The cdvqa Authors
// SPDX-License-Identifier: Apache-2.0
#include <map>
#include <random>
#include <set>

#include "cdvqa/errors.hpp"
#include "cdvqa/qa.hpp"
#include "doctest.h"
#include "oracle/qa_oracle.hpp"

using namespace cdvqa;

namespace {

std::map<std::string, std::string> by_template(const std::vector<QAItem>& items) {
  std::map<std::string, std::string> m;
  for (const auto& q : items) m[q.template_id] = q.answer;
  return m;
}

SemanticMask mask_from_points(int w, int h, const std::vector<PixelCoord>& pts, Label l = Label::Destroyed) {
  auto m = SemanticMask::filled(w, h, Label::Background);
  for (auto p : pts) m.set(p.x, p.y, l);
  return m;
}

}  // namespace

TEST_CASE("registry holds the fixed 40-question schedule") {
  const auto reg = template_registry();
  REQUIRE(reg.size() == 40);
  std::array<int, kNumCategories> per_cat{};
  std::set<std::string_view> ids;
  for (const auto& t : reg) {
    ++per_cat[static_cast<int>(t.category)];
    CHECK(ids.insert(t.template_id).second);
    if (t.category == QuestionCategory::Threshold) {
      CHECK(std::find(kDestructionThresholds.begin(), kDestructionThresholds.end(), t.threshold) !=
            kDestructionThresholds.end());
    }
  }
  CHECK(per_cat == kQuestionsPerCategory);
  // Category blocks appear contiguously in declaration order.
  for (std::size_t i = 1; i < reg.size(); ++i) CHECK(reg[i - 1].category <= reg[i].category);
}

TEST_CASE("answer vocabulary") {
  const auto& v = AnswerVocabulary::standard();
  for (auto tok : {"Yes", "No", "Damaged", "Destroyed", "Intact", "Affected", "No damage",
                   "Extensive damage", "0-10%", "90-100%", "Concentrated in one area",
                   "Spread throughout", "No buildings", "No destruction"}) {
    CHECK(v.contains(tok));
  }
  for (std::size_t i = 0; i < v.size(); ++i) CHECK(v.index_of(v.token(i)) == i);
  CHECK_THROWS_AS(AnswerVocabulary({"a", "a"}), ValidationError);
}

TEST_CASE("damage detection") {
  auto a = by_template(gen_damage_detection(make_counts(100, 0, 0, 0)));
  CHECK(a.size() == 6);
  CHECK(a["dd_damaged_present"] == "No");
  CHECK(a["dd_destroyed_present"] == "No");
  CHECK(a["dd_intact_present"] == "No");
  CHECK(a["dd_buildings_present"] == "No");

  a = by_template(gen_damage_detection(make_counts(0, 10, 5, 0)));
  CHECK(a["dd_damaged_present"] == "Yes");
  CHECK(a["dd_destroyed_present"] == "No");
  CHECK(a["dd_damage_evidence"] == "Yes");
  CHECK(a["dd_all_intact"] == "No");
  CHECK(by_template(gen_damage_detection(make_counts(3, 10, 0, 0)))["dd_all_intact"] == "Yes");
}

TEST_CASE("percentages and buckets") {
  CHECK(percent_of_total(ClassCounts{2, 1, 0, 0, 3}, Label::Intact) == 33);
  CHECK(percent_of_total(make_counts(5, 0, 0, 0), Label::Damaged) == 0);
  CHECK(percent_of_total(ClassCounts{1, 999, 0, 0, 1000}, Label::Intact) == 99);

  CHECK(percent_of_buildings(make_counts(0, 1, 1, 2), Label::Destroyed) == 50);
  CHECK_FALSE(percent_of_buildings(make_counts(100, 0, 0, 0), Label::Intact).has_value());
  CHECK(percent_of_buildings(make_counts(10, 7, 2, 1), Label::Intact) == 70);
  CHECK_THROWS_AS(percent_of_buildings(make_counts(1, 1, 0, 0), Label::Background), ValidationError);

  CHECK(bucket(0).token() == "0-10%");
  CHECK(bucket(9).token() == "0-10%");
  CHECK(bucket(10).token() == "10-20%");
  CHECK(bucket(100).token() == "90-100%");
  CHECK_THROWS_AS(bucket(101), ValidationError);
  CHECK_THROWS_AS(bucket(-1), ValidationError);
}

TEST_CASE("quantitative propagates the no-buildings sentinel") {
  auto a = by_template(gen_quantitative(make_counts(100, 0, 0, 0)));
  CHECK(a.size() == 8);
  CHECK(a["qt_background_share_image"] == "90-100%");
  CHECK(a["qt_intact_share_buildings"] == "No buildings");
  CHECK(a["qt_destroyed_share_buildings"] == "No buildings");
  CHECK(a["qt_building_share_image"] == "0-10%");

  a = by_template(gen_quantitative(make_counts(10, 7, 2, 1)));
  CHECK(a["qt_intact_share_buildings"] == "70-80%");
  CHECK(a["qt_intact_share_image"] == "30-40%");
}

TEST_CASE("comparative rules and ties") {
  CHECK(by_template(gen_comparative(make_counts(0, 0, 5, 5)))["cmp_dominant_destruction"] == "Destroyed");
  CHECK(by_template(gen_comparative(make_counts(0, 0, 6, 5)))["cmp_dominant_destruction"] == "Damaged");
  CHECK(by_template(gen_comparative(make_counts(0, 10, 4, 5)))["cmp_intact_vs_affected"] == "Intact");
  CHECK(by_template(gen_comparative(make_counts(0, 9, 4, 5)))["cmp_intact_vs_affected"] == "Affected");
}

TEST_CASE("severity levels") {
  CHECK(severity_level(0) == SeverityLevel::NoDamage);
  CHECK(severity_level(1e-9) == SeverityLevel::Minor);
  CHECK(severity_level(45) == SeverityLevel::Severe);
  CHECK(severity_level(10) == SeverityLevel::Moderate);
  CHECK(severity_level(100) == SeverityLevel::Extensive);
  CHECK_THROWS_AS(severity_level(-1), ValidationError);
  CHECK_THROWS_AS(severity_level(100.5), ValidationError);

  const auto a = gen_severity(make_counts(40, 0, 30, 30));
  REQUIRE(a.size() == 4);
  CHECK(a[0].answer == "Extensive damage");
  CHECK(a[1].answer == "Yes");
  CHECK(a[2].answer == "Yes");
  CHECK(a[3].answer == "60-70%");
}

TEST_CASE("spatial pattern") {
  CHECK(spatial_pattern(SemanticMask::filled(8, 8, Label::Intact)) == SpatialPattern::NoDestruction);

  // centroid (2.4, 2.4); 3 of 5 points closer than sigma of the distances.
  const auto five = mask_from_points(12, 12, {{0, 0}, {0, 1}, {1, 0}, {1, 1}, {10, 10}});
  CHECK(spatial_pattern(five) == SpatialPattern::SpreadThroughout);

  std::vector<PixelCoord> clusters;
  for (int dy = 0; dy < 2; ++dy) {
    for (int dx = 0; dx < 2; ++dx) {
      clusters.push_back({2 + dx, 2 + dy});
      clusters.push_back({52 + dx, 2 + dy});
    }
  }
  CHECK(spatial_pattern(mask_from_points(60, 8, clusters)) == SpatialPattern::SpreadThroughout);

  // One tight cluster plus sparse outliers: the outliers inflate sigma so
  // most cluster pixels fall within it.
  std::vector<PixelCoord> blob;
  for (int y = 20; y < 24; ++y)
    for (int x = 20; x < 24; ++x) blob.push_back({x, y});
  blob.push_back({0, 0});
  blob.push_back({47, 47});
  CHECK(spatial_pattern(mask_from_points(48, 48, blob)) == SpatialPattern::ConcentratedInOneArea);

  // A uniform filled square is "spread" under both readings: only about half
  // of its pixels lie inside the RMS radius.
  std::vector<PixelCoord> square;
  for (int y = 0; y < 10; ++y)
    for (int x = 0; x < 10; ++x) square.push_back({x, y});
  const auto sq = mask_from_points(10, 10, square, Label::Damaged);
  CHECK(spatial_pattern(sq) == SpatialPattern::SpreadThroughout);
  CHECK(spatial_pattern(sq, SpreadMeasure::RmsRadius) == SpatialPattern::SpreadThroughout);

  const auto items = gen_spatial(five);
  REQUIRE(items.size() == 2);
  CHECK(items[0].answer == "Spread throughout");
  CHECK(items[1].answer == "No");
}

TEST_CASE("resilience and contextual") {
  CHECK(resilience_ratio(make_counts(0, 8, 1, 1)) == doctest::Approx(0.8));
  CHECK_FALSE(resilience_ratio(make_counts(5, 0, 0, 0)).has_value());
  CHECK(resilience_ratio(make_counts(0, 3, 3, 3)) == doctest::Approx(1.0 / 3.0));

  const auto a = gen_contextual(make_counts(0, 8, 1, 1));
  REQUIRE(a.size() == 4);
  CHECK(a[0].answer == "High resilience");
  CHECK(a[1].answer == "Yes");
  CHECK(a[2].answer == "Yes");
  CHECK(a[3].answer == "80-90%");

  const auto none = gen_contextual(make_counts(9, 0, 0, 0));
  CHECK(none[0].answer == "No buildings");
  CHECK(none[2].answer == "No");
}

TEST_CASE("threshold answers") {
  CHECK_FALSE(threshold_answer(7, 5));
  CHECK(threshold_answer(7, 10));
  CHECK_FALSE(threshold_answer(25, 25));
  CHECK(threshold_answer(25.01, 25));
  CHECK_THROWS_AS(threshold_answer(10, 20), ValidationError);
  for (int p = 0; p <= 100; ++p) {
    if (threshold_answer(p, 5)) CHECK(threshold_answer(p, 10));
  }
  CHECK(gen_threshold(make_counts(93, 0, 4, 3)).size() == 6);
}

TEST_CASE("recovery at p = 41") {
  const auto a = gen_recovery(make_counts(59, 0, 41, 0));
  REQUIRE(a.size() == 4);
  CHECK(a[0].answer == "Yes");
  CHECK(a[1].answer == "Yes");
  CHECK(a[2].answer == "No");
  CHECK(a[3].answer == "Major response");
  CHECK(gen_recovery(make_counts(60, 0, 40, 0))[0].answer == "No");
}

TEST_CASE("generate_all on the seed-7 mask agrees with the oracle") {
  std::mt19937_64 rng(7);
  const auto raw = oracle::random_mask(rng, 16, 16);
  const auto items = generate_all(SemanticMask::from_codes(16, 16, raw.codes), "seed7");
  REQUIRE(items.size() == 40);
  const auto expected = oracle::derive_answers(raw);
  for (const auto& q : items) {
    CHECK(q.image_id == "seed7");
    CHECK_MESSAGE(q.answer == expected.at(q.template_id), q.template_id);
  }
}

TEST_CASE("generated answers always belong to the vocabulary, even for degenerate scenes") {
  std::mt19937_64 rng(3);
  const auto& vocab = AnswerVocabulary::standard();
  for (int i = 0; i < 100; ++i) {
    std::uniform_int_distribution<int> side(1, 24);
    const auto raw = oracle::random_mask(rng, side(rng), side(rng));
    for (const auto& q : generate_all(SemanticMask::from_codes(raw.width, raw.height, raw.codes), "x")) {
      CHECK_MESSAGE(vocab.contains(q.answer), q.answer);
    }
  }
}

TEST_CASE("monotonicity in destruction with fixed total") {
  // Walk N_2 + N_3 from 0 to 200 over a 200-pixel scene.
  std::string prev_sev = "No damage";
  std::map<std::string, std::string> prev;
  for (int k = 0; k <= 200; ++k) {
    const auto c = make_counts(0, 200 - k, k / 2, k - k / 2);
    SceneFacts facts{c};
    std::map<std::string, std::string> cur;
    for (const auto& t : template_registry()) cur[std::string(t.template_id)] = answer_for(t, facts);
    const int sev_now = static_cast<int>(severity_level(destruction_percentage(c)));
    if (k > 0) {
      const int sev_prev = static_cast<int>(severity_level(destruction_percentage(
          make_counts(0, 200 - (k - 1), (k - 1) / 2, (k - 1) - (k - 1) / 2))));
      CHECK(sev_now >= sev_prev);
      for (auto id : {"thr_above_25", "thr_above_50", "thr_above_75", "thr_above_90",
                      "rec_reconstruction"}) {
        if (prev[id] == "Yes") CHECK(cur[id] == "Yes");
      }
    }
    prev = cur;
  }
}

TEST_CASE("percent buckets survive integer upscaling") {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 30; ++i) {
    const auto raw = oracle::random_mask(rng, 9, 7);
    const auto mask = SemanticMask::from_codes(9, 7, raw.codes);
    for (int k : {2, 3}) {
      const auto up = mask.resized_nearest(9 * k, 7 * k);
      const auto c0 = count_labels(mask), c1 = count_labels(up);
      for (Label l : {Label::Background, Label::Intact, Label::Damaged, Label::Destroyed}) {
        CHECK(c1.of(l) == c0.of(l) * k * k);
        CHECK(bucket(percent_of_total(c1, l)) == bucket(percent_of_total(c0, l)));
      }
    }
  }
}

TEST_CASE("generate_dataset ordering and thread independence") {
  std::mt19937_64 rng(9);
  std::vector<std::pair<std::string, SemanticMask>> masks;
  for (int i = 0; i < 25; ++i) {
    const auto raw = oracle::random_mask(rng, 12, 12);
    masks.emplace_back("img_" + std::to_string(24 - i), SemanticMask::from_codes(12, 12, raw.codes));
  }
  const auto one = generate_dataset(masks, 1);
  const auto four = generate_dataset(masks, 4);
  CHECK(one == four);
  REQUIRE(one.size() == 25 * 40);
  CHECK(one.front().image_id == "img_0");
  CHECK(one.front().template_id == "dd_intact_present");

  masks.push_back(masks.front());
  CHECK_THROWS_AS(generate_dataset(masks, 1), ValidationError);
}

TEST_CASE("dataset statistics") {
  const std::array<double, 5> f = {0.18, 0.22, 0.28, 0.21, 0.11};
  CHECK(*imbalance_ratio(f) == doctest::Approx(28.0 / 11.0));
  const std::array<double, 5> uniform = {0.2, 0.2, 0.2, 0.2, 0.2};
  CHECK(*imbalance_ratio(uniform) == 1.0);
  const std::array<double, 3> with_zero = {0.5, 0.5, 0.0};
  CHECK_FALSE(imbalance_ratio(with_zero).has_value());

  std::vector<std::pair<std::string, SemanticMask>> masks;
  std::mt19937_64 rng(1);
  for (int i = 0; i < 100; ++i) {
    const auto raw = oracle::random_mask(rng, 10, 10);
    masks.emplace_back("m" + std::to_string(i), SemanticMask::from_codes(10, 10, raw.codes));
  }
  const auto items = generate_dataset(masks, 1);
  const auto s = dataset_stats(items);
  CHECK(s.images == 100);
  CHECK(s.category_totals == std::array<std::int64_t, 8>{600, 800, 600, 400, 200, 400, 600, 400});
  CHECK(s.reconstruction_needed + s.reconstruction_not_needed == 100);
  double fsum = 0;
  for (double x : s.severity_frequencies) fsum += x;
  CHECK(fsum == doctest::Approx(1.0));
  CHECK_THROWS_AS(dataset_stats(std::vector<QAItem>{}), ValidationError);

  // Severity frequencies from explicit per-image percentages.
  std::vector<double> os;
  const double reps[5] = {0.0, 5.0, 20.0, 45.0, 75.0};
  const int counts[5] = {18, 22, 28, 21, 11};
  for (int k = 0; k < 5; ++k)
    for (int j = 0; j < counts[k]; ++j) os.push_back(reps[k]);
  const auto s2 = dataset_stats(items, os);
  CHECK(s2.severity_frequencies[2] == doctest::Approx(0.28));
  CHECK(*s2.imbalance_ratio == doctest::Approx(2.5454545));
}
