// Copyright 2026 The cdvqa Authors
// SPDX-License-Identifier: Apache-2.0
#include "cdvqa/mask.hpp"

#include <algorithm>
#include <string>
#include <utility>

#include "cdvqa/errors.hpp"

namespace cdvqa {

Label label_from_code(int code) {
  if (code < 0 || code >= kNumLabels) {
    throw ValidationError("label code " + std::to_string(code) + " outside {0,1,2,3}");
  }
  return static_cast<Label>(code);
}

SemanticMask::SemanticMask(int width, int height, std::vector<Label> labels)
    : width_(width), height_(height), labels_(std::move(labels)) {
  if (width < 1 || height < 1) {
    throw ValidationError("mask dimensions must be positive, got " + std::to_string(width) +
                          "x" + std::to_string(height));
  }
  if (labels_.size() != static_cast<std::size_t>(width) * static_cast<std::size_t>(height)) {
    throw ValidationError("mask has " + std::to_string(labels_.size()) + " cells, expected " +
                          std::to_string(static_cast<std::size_t>(width) * height));
  }
  for (std::size_t i = 0; i < labels_.size(); ++i) {
    if (static_cast<int>(labels_[i]) >= kNumLabels) {
      throw ValidationError("invalid label " + std::to_string(static_cast<int>(labels_[i])) +
                            " at (x=" + std::to_string(i % width) +
                            ", y=" + std::to_string(i / width) + ")");
    }
  }
}

SemanticMask SemanticMask::from_codes(int width, int height,
                                      std::span<const std::uint8_t> codes) {
  if (width < 1 || height < 1 ||
      codes.size() != static_cast<std::size_t>(width) * static_cast<std::size_t>(height)) {
    throw ValidationError("mask code buffer does not match " + std::to_string(width) + "x" +
                          std::to_string(height));
  }
  std::vector<Label> labels(codes.size());
  for (std::size_t i = 0; i < codes.size(); ++i) {
    if (codes[i] >= kNumLabels) {
      throw ValidationError("pixel value " + std::to_string(codes[i]) + " at (x=" +
                            std::to_string(i % width) + ", y=" + std::to_string(i / width) +
                            ") is not a label in {0,1,2,3}");
    }
    labels[i] = static_cast<Label>(codes[i]);
  }
  return SemanticMask(width, height, std::move(labels));
}

SemanticMask SemanticMask::filled(int width, int height, Label value) {
  return SemanticMask(width, height,
                      std::vector<Label>(static_cast<std::size_t>(std::max(width, 0)) *
                                             static_cast<std::size_t>(std::max(height, 0)),
                                         value));
}

SemanticMask SemanticMask::resized_nearest(int new_width, int new_height) const {
  if (new_width < 1 || new_height < 1) {
    throw ValidationError("resize target must be positive");
  }
  std::vector<Label> out(static_cast<std::size_t>(new_width) * new_height);
  for (int y = 0; y < new_height; ++y) {
    // Pixel-centre sampling: source = floor((dst + 0.5) * src / dst), in integers.
    const int sy = static_cast<int>((2LL * y + 1) * height_ / (2LL * new_height));
    for (int x = 0; x < new_width; ++x) {
      const int sx = static_cast<int>((2LL * x + 1) * width_ / (2LL * new_width));
      out[static_cast<std::size_t>(y) * new_width + x] = at(sx, sy);
    }
  }
  return SemanticMask(new_width, new_height, std::move(out));
}

std::int64_t ClassCounts::of(Label l) const {
  switch (l) {
    case Label::Background: return n_background;
    case Label::Intact: return n_intact;
    case Label::Damaged: return n_damaged;
    case Label::Destroyed: return n_destroyed;
  }
  return 0;
}

ClassCounts make_counts(std::int64_t bg, std::int64_t intact, std::int64_t damaged,
                        std::int64_t destroyed) {
  return ClassCounts{bg, intact, damaged, destroyed, bg + intact + damaged + destroyed};
}

ClassCounts count_labels(const SemanticMask& mask) {
  std::int64_t n[kNumLabels] = {0, 0, 0, 0};
  for (Label l : mask.labels()) ++n[static_cast<int>(l)];
  return ClassCounts{n[0], n[1], n[2], n[3], mask.size()};
}

double destruction_percentage(const ClassCounts& counts) {
  return (100.0 * static_cast<double>(counts.destruction())) / static_cast<double>(counts.n_total);
}

std::vector<PixelCoord> destruction_pixels(const SemanticMask& mask) {
  std::vector<PixelCoord> out;
  for (int y = 0; y < mask.height(); ++y) {
    for (int x = 0; x < mask.width(); ++x) {
      const Label l = mask.at(x, y);
      if (l == Label::Damaged || l == Label::Destroyed) out.push_back({x, y});
    }
  }
  return out;
}

}  // namespace cdvqa
