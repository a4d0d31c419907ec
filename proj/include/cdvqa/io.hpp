// Copyright 2026 The cdvqa Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once
//
// File formats: label masks (PGM P2/P5, 8-bit grayscale PNG), dataset
// manifests, QA and prediction JSONL, per-image severity values.
//
// Missing, unreadable or truncated files raise IoError; well-formed files with
// bad content raise ValidationError.
//
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cdvqa/mask.hpp"
#include "cdvqa/metrics.hpp"
#include "cdvqa/qa.hpp"

namespace cdvqa::io {

namespace fs = std::filesystem;

struct Size {
  int width = 0;
  int height = 0;
};

// Decodes a mask from PGM or PNG (chosen by content, not extension). Pixel
// values must lie in {0,1,2,3}; with `resize` the grid is resampled by
// nearest neighbour after decoding.
SemanticMask load_mask(const fs::path& path, std::optional<Size> resize = std::nullopt);
SemanticMask decode_pgm(std::string_view bytes, const std::string& name);

// Writes label codes as raw pixel values: PNG for a .png extension, binary
// PGM otherwise.
void save_mask(const fs::path& path, const SemanticMask& mask);

struct ManifestEntry {
  std::string image_id;
  fs::path mask_path;  // resolved against the manifest's directory
  std::string region;
  std::optional<fs::path> description_path;
};

// JSON array of {"image_id", "mask_path", "region", "description_path"?}.
// Relative paths are resolved against the manifest's directory. Rejects
// duplicate ids and missing referenced files.
std::vector<ManifestEntry> load_manifest(const fs::path& path);

// Loads every mask, `threads` files at a time. Order follows the manifest.
std::vector<std::pair<std::string, SemanticMask>> load_corpus(const std::vector<ManifestEntry>& entries,
                                                              unsigned threads = 1,
                                                              std::optional<Size> resize = std::nullopt);

// One JSON object per line, fields in the order image_id, template_id,
// category, question, answer. No trailing newline.
std::string qa_record_line(const QAItem& item);
// Throws ValidationError naming `where` on malformed input.
QAItem parse_qa_record(std::string_view line, const std::string& where = "line");

void write_qa_jsonl(const fs::path& path, std::span<const QAItem> items);
std::string qa_jsonl(std::span<const QAItem> items);
std::vector<QAItem> read_qa_jsonl(const fs::path& path);

// {"image_id", "template_id", "answer"} per line.
std::string prediction_line(const std::string& image_id, const std::string& template_id,
                            const std::string& answer);
PredictionSet read_predictions_jsonl(const fs::path& path,
                                     const AnswerVocabulary& vocab = AnswerVocabulary::standard());

// {"image_id", "os"} per line, os = destruction percentage of the image.
std::string severity_jsonl(std::span<const std::pair<std::string, double>> values);
std::vector<std::pair<std::string, double>> read_severity_jsonl(const fs::path& path);

// Sorted-key JSON renderings.
std::string stats_to_json(const DatasetStats& stats);
std::string templates_to_json();

std::string read_text(const fs::path& path);
void write_text(const fs::path& path, std::string_view content);

}  // namespace cdvqa::io
