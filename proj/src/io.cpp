// Copyright 2026 The cdvqa Authors
// SPDX-License-Identifier: Apache-2.0
#include "cdvqa/io.hpp"

#include <png.h>

#include <cctype>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include "cdvqa/errors.hpp"
#include "json.hpp"

namespace cdvqa::io {

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

constexpr unsigned char kPngSignature[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};

bool is_png(std::string_view bytes) {
  return bytes.size() >= 8 && std::equal(kPngSignature, kPngSignature + 8, bytes.begin(),
                                         [](unsigned char a, char b) { return a == static_cast<unsigned char>(b); });
}

SemanticMask decode_png(std::string_view bytes, const std::string& name) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size())) {
    throw IoError(name + ": unreadable PNG: " + img.message);
  }
  const auto format = img.format;
  if (format & (PNG_FORMAT_FLAG_COLOR | PNG_FORMAT_FLAG_ALPHA)) {
    png_image_free(&img);
    throw ValidationError(name + ": expected a single-channel grayscale image, found " +
                          std::to_string(PNG_IMAGE_SAMPLE_CHANNELS(format)) + " channels");
  }
  if (format & PNG_FORMAT_FLAG_LINEAR) {
    png_image_free(&img);
    throw ValidationError(name + ": expected 8-bit samples");
  }
  img.format = PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> pixels(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, pixels.data(), 0, nullptr)) {
    throw IoError(name + ": truncated or corrupt PNG: " + img.message);
  }
  return SemanticMask::from_codes(static_cast<int>(img.width), static_cast<int>(img.height), pixels);
}

void skip_space_and_comments(std::string_view s, std::size_t& pos) {
  while (pos < s.size()) {
    if (std::isspace(static_cast<unsigned char>(s[pos]))) {
      ++pos;
    } else if (s[pos] == '#') {
      while (pos < s.size() && s[pos] != '\n') ++pos;
    } else {
      break;
    }
  }
}

std::optional<long> read_int(std::string_view s, std::size_t& pos) {
  skip_space_and_comments(s, pos);
  if (pos >= s.size() || !std::isdigit(static_cast<unsigned char>(s[pos]))) return std::nullopt;
  long v = 0;
  while (pos < s.size() && std::isdigit(static_cast<unsigned char>(s[pos]))) {
    v = v * 10 + (s[pos++] - '0');
    if (v > 1L << 30) return std::nullopt;
  }
  return v;
}

std::string json_string(const json& obj, const char* key, const std::string& where) {
  auto it = obj.find(key);
  if (it == obj.end()) throw ValidationError(where + ": missing field '" + key + "'");
  if (!it->is_string()) throw ValidationError(where + ": field '" + key + "' must be a string");
  return it->get<std::string>();
}

json parse_json(std::string_view text, const std::string& where) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ValidationError(where + ": invalid JSON: " + e.what());
  }
}

template <typename Fn>
void for_each_line(const fs::path& path, Fn fn) {
  const std::string text = read_text(path);
  std::size_t start = 0, lineno = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    ++lineno;
    std::string_view line(text.data() + start, end - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.find_first_not_of(" \t") != std::string_view::npos) {
      fn(line, path.string() + ":" + std::to_string(lineno));
    }
    start = end + 1;
  }
}

}  // namespace

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("error reading " + path.string());
  return ss.str();
}

void write_text(const fs::path& path, std::string_view content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  out.close();
  if (!out) throw IoError("error writing " + path.string());
}

SemanticMask decode_pgm(std::string_view s, const std::string& name) {
  if (s.size() < 2 || s[0] != 'P' || (s[1] != '2' && s[1] != '5')) {
    if (s.size() >= 2 && s[0] == 'P' && (s[1] == '3' || s[1] == '6')) {
      throw ValidationError(name + ": expected a single-channel graymap, found a 3-channel pixmap");
    }
    throw IoError(name + ": not a PGM or PNG file");
  }
  const bool binary = s[1] == '5';
  std::size_t pos = 2;
  const auto w = read_int(s, pos), h = read_int(s, pos), maxval = read_int(s, pos);
  if (!w || !h || !maxval) throw IoError(name + ": truncated or malformed PGM header");
  if (*w < 1 || *h < 1) throw ValidationError(name + ": image has zero size");
  if (*maxval < 1 || *maxval > 255) {
    throw ValidationError(name + ": expected 8-bit samples, maxval is " + std::to_string(*maxval));
  }
  const std::size_t n = static_cast<std::size_t>(*w) * static_cast<std::size_t>(*h);
  std::vector<std::uint8_t> codes(n);
  if (binary) {
    if (pos >= s.size() || !std::isspace(static_cast<unsigned char>(s[pos]))) {
      throw IoError(name + ": malformed PGM header");
    }
    ++pos;
    if (s.size() - pos < n) {
      throw IoError(name + ": truncated pixel data (" + std::to_string(s.size() - pos) + " of " +
                    std::to_string(n) + " bytes)");
    }
    std::copy_n(reinterpret_cast<const std::uint8_t*>(s.data() + pos), n, codes.begin());
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      const auto v = read_int(s, pos);
      if (!v) throw IoError(name + ": truncated pixel data (" + std::to_string(i) + " of " + std::to_string(n) + ")");
      if (*v > 255) {
        throw ValidationError(name + ": pixel value " + std::to_string(*v) + " at (x=" +
                              std::to_string(i % static_cast<std::size_t>(*w)) +
                              ", y=" + std::to_string(i / static_cast<std::size_t>(*w)) + ") is not a label");
      }
      codes[i] = static_cast<std::uint8_t>(*v);
    }
  }
  try {
    return SemanticMask::from_codes(static_cast<int>(*w), static_cast<int>(*h), codes);
  } catch (const ValidationError& e) {
    throw ValidationError(name + ": " + e.what());
  }
}

SemanticMask load_mask(const fs::path& path, std::optional<Size> resize) {
  const std::string bytes = read_text(path);
  const std::string name = path.string();
  SemanticMask mask = [&]() {
    if (!is_png(bytes)) return decode_pgm(bytes, name);
    try {
      return decode_png(bytes, name);
    } catch (const ValidationError& e) {
      const std::string msg = e.what();
      throw ValidationError(msg.rfind(name, 0) == 0 ? msg : name + ": " + msg);
    }
  }();
  if (resize) {
    if (resize->width < 1 || resize->height < 1) throw ValidationError("resize target must be positive");
    mask = mask.resized_nearest(resize->width, resize->height);
  }
  return mask;
}

void save_mask(const fs::path& path, const SemanticMask& mask) {
  std::vector<std::uint8_t> codes;
  codes.reserve(static_cast<std::size_t>(mask.width()) * static_cast<std::size_t>(mask.height()));
  for (Label l : mask.labels()) codes.push_back(static_cast<std::uint8_t>(l));
  if (path.extension() == ".png") {
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(mask.width());
    img.height = static_cast<png_uint_32>(mask.height());
    img.format = PNG_FORMAT_GRAY;
    if (!png_image_write_to_file(&img, path.c_str(), 0, codes.data(), 0, nullptr)) {
      throw IoError("cannot write " + path.string() + ": " + img.message);
    }
    return;
  }
  std::string out = "P5\n" + std::to_string(mask.width()) + " " + std::to_string(mask.height()) + "\n255\n";
  out.append(codes.begin(), codes.end());
  write_text(path, out);
}

std::vector<ManifestEntry> load_manifest(const fs::path& path) {
  const json doc = parse_json(read_text(path), path.string());
  if (!doc.is_array()) throw ValidationError(path.string() + ": manifest must be a JSON array");
  const fs::path base = path.parent_path();
  auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : base / p; };
  std::vector<ManifestEntry> entries;
  std::set<std::string> seen;
  for (std::size_t i = 0; i < doc.size(); ++i) {
    const std::string where = path.string() + " entry " + std::to_string(i);
    const json& e = doc[i];
    if (!e.is_object()) throw ValidationError(where + ": expected an object");
    ManifestEntry m;
    m.image_id = json_string(e, "image_id", where);
    if (m.image_id.empty()) throw ValidationError(where + ": empty image_id");
    if (!seen.insert(m.image_id).second) throw ValidationError(where + ": duplicate image_id '" + m.image_id + "'");
    m.mask_path = resolve(json_string(e, "mask_path", where));
    m.region = json_string(e, "region", where);
    if (e.contains("description_path") && !e["description_path"].is_null()) {
      m.description_path = resolve(json_string(e, "description_path", where));
    }
    for (const fs::path* p : {&m.mask_path, m.description_path ? &*m.description_path : nullptr}) {
      if (p && !fs::is_regular_file(*p)) throw IoError(where + ": referenced file " + p->string() + " does not exist");
    }
    entries.push_back(std::move(m));
  }
  return entries;
}

std::vector<std::pair<std::string, SemanticMask>> load_corpus(const std::vector<ManifestEntry>& entries,
                                                              unsigned threads, std::optional<Size> resize) {
  const std::size_t n = entries.size();
  std::vector<std::optional<SemanticMask>> masks(n);
  std::vector<std::exception_ptr> errors(n);
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(n, 1))));
  {
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < threads; ++t) {
      pool.emplace_back([&, t]() {
        for (std::size_t i = t; i < n; i += threads) {
          try {
            masks[i] = load_mask(entries[i].mask_path, resize);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    }
  }
  std::vector<std::pair<std::string, SemanticMask>> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (errors[i]) std::rethrow_exception(errors[i]);  // first failure in manifest order
    out.emplace_back(entries[i].image_id, std::move(*masks[i]));
  }
  return out;
}

std::string qa_record_line(const QAItem& item) {
  ordered_json j;
  j["image_id"] = item.image_id;
  j["template_id"] = item.template_id;
  j["category"] = std::string(category_name(item.category));
  j["question"] = item.question;
  j["answer"] = item.answer;
  return j.dump();
}

QAItem parse_qa_record(std::string_view line, const std::string& where) {
  const json j = parse_json(line, where);
  if (!j.is_object()) throw ValidationError(where + ": expected a JSON object");
  QAItem item;
  item.image_id = json_string(j, "image_id", where);
  item.template_id = json_string(j, "template_id", where);
  const std::string cat = json_string(j, "category", where);
  try {
    item.category = category_from_name(cat);
  } catch (const ValidationError&) {
    throw ValidationError(where + ": unknown category '" + cat + "'");
  }
  const auto idx = template_index(item.template_id);
  if (!idx) throw ValidationError(where + ": unknown template_id '" + item.template_id + "'");
  if (template_registry()[*idx].category != item.category) {
    throw ValidationError(where + ": template '" + item.template_id + "' does not belong to category '" + cat + "'");
  }
  item.question = json_string(j, "question", where);
  item.answer = json_string(j, "answer", where);
  if (!AnswerVocabulary::standard().contains(item.answer)) {
    throw ValidationError(where + ": answer '" + item.answer + "' is not in the vocabulary");
  }
  return item;
}

std::string qa_jsonl(std::span<const QAItem> items) {
  std::string out;
  for (const auto& it : items) {
    out += qa_record_line(it);
    out += '\n';
  }
  return out;
}

void write_qa_jsonl(const fs::path& path, std::span<const QAItem> items) { write_text(path, qa_jsonl(items)); }

std::vector<QAItem> read_qa_jsonl(const fs::path& path) {
  std::vector<QAItem> items;
  for_each_line(path, [&](std::string_view line, const std::string& where) {
    items.push_back(parse_qa_record(line, where));
  });
  return items;
}

std::string prediction_line(const std::string& image_id, const std::string& template_id,
                            const std::string& answer) {
  ordered_json j;
  j["image_id"] = image_id;
  j["template_id"] = template_id;
  j["answer"] = answer;
  return j.dump();
}

PredictionSet read_predictions_jsonl(const fs::path& path, const AnswerVocabulary& vocab) {
  PredictionSet preds;
  for_each_line(path, [&](std::string_view line, const std::string& where) {
    const json j = parse_json(line, where);
    if (!j.is_object()) throw ValidationError(where + ": expected a JSON object");
    try {
      preds.add(json_string(j, "image_id", where), json_string(j, "template_id", where),
                json_string(j, "answer", where), vocab);
    } catch (const ValidationError& e) {
      const std::string msg = e.what();
      throw ValidationError(msg.rfind(where, 0) == 0 ? msg : where + ": " + msg);
    }
  });
  return preds;
}

std::string severity_jsonl(std::span<const std::pair<std::string, double>> values) {
  std::string out;
  for (const auto& [id, os] : values) {
    ordered_json j;
    j["image_id"] = id;
    j["os"] = os;
    out += j.dump();
    out += '\n';
  }
  return out;
}

std::vector<std::pair<std::string, double>> read_severity_jsonl(const fs::path& path) {
  std::vector<std::pair<std::string, double>> out;
  for_each_line(path, [&](std::string_view line, const std::string& where) {
    const json j = parse_json(line, where);
    if (!j.is_object()) throw ValidationError(where + ": expected a JSON object");
    const std::string id = json_string(j, "image_id", where);
    auto it = j.find("os");
    if (it == j.end() || !it->is_number()) throw ValidationError(where + ": field 'os' must be a number");
    const double os = it->get<double>();
    if (!(os >= 0.0 && os <= 100.0)) throw ValidationError(where + ": os must lie in [0, 100]");
    out.emplace_back(id, os);
  });
  return out;
}

std::string stats_to_json(const DatasetStats& st) {
  json j;
  j["images"] = st.images;
  j["questions"] = st.questions;
  json cats = json::object();
  for (int c = 0; c < kNumCategories; ++c) {
    cats[std::string(category_name(static_cast<QuestionCategory>(c)))] = st.category_totals[static_cast<std::size_t>(c)];
  }
  j["category_totals"] = cats;
  json sev = json::object();
  for (int k = 0; k < kNumSeverityLevels; ++k) {
    sev[std::string(severity_name(static_cast<SeverityLevel>(k)))] = st.severity_frequencies[static_cast<std::size_t>(k)];
  }
  j["severity_frequencies"] = sev;
  j["imbalance_ratio"] = st.imbalance_ratio ? json(*st.imbalance_ratio) : json(nullptr);
  j["spatial_counts"] = st.spatial_counts;
  j["reconstruction_needed"] = st.reconstruction_needed;
  j["reconstruction_not_needed"] = st.reconstruction_not_needed;
  return j.dump(2) + "\n";
}

std::string templates_to_json() {
  json arr = json::array();
  for (const auto& t : template_registry()) {
    json j;
    j["template_id"] = std::string(t.template_id);
    j["category"] = std::string(category_name(t.category));
    j["question"] = std::string(t.question);
    j["rule"] = std::string(rule_name(t.rule));
    if (t.threshold) j["threshold"] = t.threshold;
    arr.push_back(j);
  }
  return arr.dump(2) + "\n";
}

}  // namespace cdvqa::io
