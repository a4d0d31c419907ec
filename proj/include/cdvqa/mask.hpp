// Copyright 2026 The cdvqa Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once
//
// Semantic change masks and the pixel statistics that every generated
// answer is derived from.
//
#include <cstdint>
#include <span>
#include <vector>

namespace cdvqa {

enum class Label : std::uint8_t {
  Background = 0,
  Intact = 1,
  Damaged = 2,
  Destroyed = 3,
};

inline constexpr int kNumLabels = 4;

// Throws ValidationError for codes outside 0..3.
Label label_from_code(int code);

struct PixelCoord {
  int x = 0;  // column
  int y = 0;  // row
  friend bool operator==(const PixelCoord&, const PixelCoord&) = default;
};

// Row-major H x W grid of labels. Construction validates every cell, so a
// SemanticMask in hand is always well formed.
class SemanticMask {
 public:
  SemanticMask(int width, int height, std::vector<Label> labels);
  // Builds from raw integer codes; rejects anything outside 0..3 and names
  // the offending coordinate.
  static SemanticMask from_codes(int width, int height, std::span<const std::uint8_t> codes);
  static SemanticMask filled(int width, int height, Label value);

  int width() const { return width_; }
  int height() const { return height_; }
  std::int64_t size() const { return static_cast<std::int64_t>(width_) * height_; }

  Label at(int x, int y) const { return labels_[static_cast<std::size_t>(y) * width_ + x]; }
  void set(int x, int y, Label value) { labels_[static_cast<std::size_t>(y) * width_ + x] = value; }
  std::span<const Label> labels() const { return labels_; }

  // Nearest-neighbour resampling; the only interpolation that keeps labels valid.
  SemanticMask resized_nearest(int new_width, int new_height) const;

  friend bool operator==(const SemanticMask&, const SemanticMask&) = default;

 private:
  int width_;
  int height_;
  std::vector<Label> labels_;
};

struct ClassCounts {
  std::int64_t n_background = 0;
  std::int64_t n_intact = 0;
  std::int64_t n_damaged = 0;
  std::int64_t n_destroyed = 0;
  std::int64_t n_total = 0;

  std::int64_t of(Label l) const;
  std::int64_t buildings() const { return n_intact + n_damaged + n_destroyed; }
  std::int64_t destruction() const { return n_damaged + n_destroyed; }

  friend bool operator==(const ClassCounts&, const ClassCounts&) = default;
};

// Convenience for tests and examples: (background, intact, damaged, destroyed),
// n_total is the sum.
ClassCounts make_counts(std::int64_t bg, std::int64_t intact, std::int64_t damaged,
                        std::int64_t destroyed);

ClassCounts count_labels(const SemanticMask& mask);

// 100 * (N_damaged + N_destroyed) / N_total, unfloored. Requires n_total > 0.
double destruction_percentage(const ClassCounts& counts);

// Cells labelled Damaged or Destroyed, row-major order.
std::vector<PixelCoord> destruction_pixels(const SemanticMask& mask);

}  // namespace cdvqa
