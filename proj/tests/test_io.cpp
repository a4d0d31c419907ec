// Copyright 2026 The cdvqa Authors
// SPDX-License-Identifier: Apache-2.0
#include <png.h>

#include <atomic>
#include <cstdio>
#include <filesystem>
#include <random>
#include <string>

#include "cdvqa/errors.hpp"
#include "cdvqa/io.hpp"
#include "doctest.h"

using namespace cdvqa;
namespace fs = std::filesystem;

namespace {

// Fresh directory per test case, removed on exit.
struct TempDir {
  fs::path path;
  TempDir() {
    static std::atomic<int> counter{0};
    path = fs::temp_directory_path() /
           ("cdvqa_io_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  fs::path operator/(const std::string& name) const { return path / name; }
};

SemanticMask random_mask(std::mt19937_64& rng, int w, int h) {
  std::uniform_int_distribution<int> code(0, 3);
  std::vector<std::uint8_t> codes(static_cast<std::size_t>(w) * h);
  for (auto& c : codes) c = static_cast<std::uint8_t>(code(rng));
  return SemanticMask::from_codes(w, h, codes);
}

// RGB or RGBA PNG written straight through libpng.
void write_color_png(const fs::path& path, int channels) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = 2;
  img.height = 2;
  img.format = channels == 4 ? PNG_FORMAT_RGBA : PNG_FORMAT_RGB;
  std::vector<png_byte> px(static_cast<std::size_t>(4 * channels), 1);
  REQUIRE(png_image_write_to_file(&img, path.c_str(), 0, px.data(), 0, nullptr));
}

}  // namespace

TEST_CASE("four-pixel graymap decodes to the four labels") {
  const auto ascii = io::decode_pgm("P2\n# labels\n2 2\n3\n0 1\n2 3\n", "t.pgm");
  const std::string raw = std::string("P5\n2 2\n255\n") + std::string("\x00\x01\x02\x03", 4);
  const auto binary = io::decode_pgm(raw, "t.pgm");
  CHECK(ascii == binary);
  CHECK(ascii.width() == 2);
  CHECK(ascii.at(0, 0) == Label::Background);
  CHECK(ascii.at(1, 0) == Label::Intact);
  CHECK(ascii.at(0, 1) == Label::Damaged);
  CHECK(ascii.at(1, 1) == Label::Destroyed);
}

TEST_CASE("malformed graymaps raise the right error kind") {
  // Truncated payload and broken headers are read failures.
  CHECK_THROWS_AS(io::decode_pgm(std::string("P5\n2 2\n255\n\x00\x01", 13), "t"), IoError);
  CHECK_THROWS_AS(io::decode_pgm("P2\n2 2\n3\n0 1 2\n", "t"), IoError);
  CHECK_THROWS_AS(io::decode_pgm("P5\n2", "t"), IoError);
  CHECK_THROWS_AS(io::decode_pgm("", "t"), IoError);
  // Well-formed files with bad content are validation failures.
  CHECK_THROWS_AS(io::decode_pgm("P2\n2 1\n9\n0 7\n", "t"), ValidationError);
  CHECK_THROWS_AS(io::decode_pgm("P2\n1 1\n65535\n0\n", "t"), ValidationError);
  CHECK_THROWS_AS(io::decode_pgm("P3\n1 1\n255\n0 0 0\n", "t"), ValidationError);
  try {
    io::decode_pgm("P2\n2 1\n9\n0 7\n", "bad.pgm");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("bad.pgm") != std::string::npos);
  }
}

TEST_CASE("masks round-trip through PGM and PNG") {
  TempDir dir;
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    const auto m = random_mask(rng, 3 + trial * 7, 5 + trial * 3);
    io::save_mask(dir / "m.pgm", m);
    io::save_mask(dir / "m.png", m);
    CHECK(io::load_mask(dir / "m.pgm") == m);
    CHECK(io::load_mask(dir / "m.png") == m);
  }
  // Format follows content, not the extension.
  const auto m = random_mask(rng, 4, 4);
  io::save_mask(dir / "m.png", m);
  fs::copy_file(dir / "m.png", dir / "really_png.pgm");
  CHECK(io::load_mask(dir / "really_png.pgm") == m);
  const auto r = io::load_mask(dir / "m.png", io::Size{8, 2});
  CHECK(r == m.resized_nearest(8, 2));
}

TEST_CASE("color PNGs are rejected with the channel count") {
  TempDir dir;
  for (int channels : {3, 4}) {
    write_color_png(dir / "c.png", channels);
    try {
      io::load_mask(dir / "c.png");
      FAIL("expected a validation error");
    } catch (const ValidationError& e) {
      CHECK(std::string(e.what()).find(std::to_string(channels)) != std::string::npos);
    }
  }
  CHECK_THROWS_AS(io::load_mask(dir / "missing.png"), IoError);
}

TEST_CASE("manifests resolve paths and reject duplicates and missing files") {
  TempDir dir;
  fs::create_directories(dir / "masks");
  std::mt19937_64 rng(9);
  io::save_mask(dir / "masks/a.pgm", random_mask(rng, 4, 4));
  io::save_mask(dir / "masks/b.png", random_mask(rng, 6, 2));
  io::write_text(dir / "a.txt", "coastal town");
  io::write_text(dir / "ok.json", R"([
    {"image_id": "b", "mask_path": "masks/b.png", "region": "R2"},
    {"image_id": "a", "mask_path": "masks/a.pgm", "region": "R1", "description_path": "a.txt"}
  ])");
  const auto entries = io::load_manifest(dir / "ok.json");
  REQUIRE(entries.size() == 2);
  CHECK(entries[1].mask_path == dir / "masks/a.pgm");
  CHECK(entries[1].description_path == dir / "a.txt");
  CHECK_FALSE(entries[0].description_path.has_value());
  const auto serial = io::load_corpus(entries, 1);
  const auto parallel = io::load_corpus(entries, 4);
  CHECK(serial == parallel);
  CHECK(serial[0].first == "b");

  io::write_text(dir / "dup.json", R"([{"image_id": "a", "mask_path": "masks/a.pgm", "region": "R"},
                                       {"image_id": "a", "mask_path": "masks/b.png", "region": "R"}])");
  CHECK_THROWS_AS(io::load_manifest(dir / "dup.json"), ValidationError);
  io::write_text(dir / "gone.json", R"([{"image_id": "a", "mask_path": "masks/zz.pgm", "region": "R"}])");
  CHECK_THROWS_AS(io::load_manifest(dir / "gone.json"), IoError);
  io::write_text(dir / "notarray.json", R"({"image_id": "a"})");
  CHECK_THROWS_AS(io::load_manifest(dir / "notarray.json"), ValidationError);
  CHECK_THROWS_AS(io::load_manifest(dir / "absent.json"), IoError);
}

TEST_CASE("QA JSONL round-trips and reports the failing line") {
  TempDir dir;
  const std::vector<std::uint8_t> codes{0, 1, 2, 3};
  const auto items = generate_all(SemanticMask::from_codes(2, 2, codes), "img_1");
  REQUIRE(items.size() == 40);
  io::write_qa_jsonl(dir / "qa.jsonl", items);
  CHECK(io::read_qa_jsonl(dir / "qa.jsonl") == items);
  const std::string line = io::qa_record_line(items[0]);
  CHECK(line.rfind("{\"image_id\":\"img_1\",\"template_id\":", 0) == 0);
  CHECK(io::parse_qa_record(line) == items[0]);

  std::string text = io::qa_jsonl(items);
  text += "{\"image_id\":\"x\",\"template_id\":\"nope\",\"category\":\"quantitative\",\"question\":\"q\","
          "\"answer\":\"Yes\"}\n";
  io::write_text(dir / "bad.jsonl", text);
  try {
    io::read_qa_jsonl(dir / "bad.jsonl");
    FAIL("expected a validation error");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find(":41") != std::string::npos);
  }
  CHECK_THROWS_AS(io::parse_qa_record("{not json"), ValidationError);
  std::string off = line;
  off.replace(off.find("\"answer\":\"") + 10, items[0].answer.size(), "Maybe");
  CHECK_THROWS_AS(io::parse_qa_record(off), ValidationError);
  std::string wrong_cat = line;
  const std::string cat(category_name(items[0].category));
  wrong_cat.replace(wrong_cat.find(cat), cat.size(), "recovery_assessment");
  CHECK_THROWS_AS(io::parse_qa_record(wrong_cat), ValidationError);
  CHECK_THROWS_AS(io::read_qa_jsonl(dir / "none.jsonl"), IoError);
}

TEST_CASE("predictions and severity values round-trip") {
  TempDir dir;
  io::write_text(dir / "p.jsonl", io::prediction_line("a", "dd_intact_present", "Yes") + "\n\n" +
                                      io::prediction_line("b", "dd_damaged_present", "No") + "\n");
  const auto preds = io::read_predictions_jsonl(dir / "p.jsonl");
  CHECK(preds.size() == 2);
  io::write_text(dir / "dup.jsonl", io::prediction_line("a", "dd_intact_present", "Yes") + "\n" +
                                        io::prediction_line("a", "dd_intact_present", "No") + "\n");
  CHECK_THROWS_AS(io::read_predictions_jsonl(dir / "dup.jsonl"), ValidationError);
  io::write_text(dir / "oov.jsonl", io::prediction_line("a", "dd_intact_present", "Perhaps") + "\n");
  CHECK_THROWS_AS(io::read_predictions_jsonl(dir / "oov.jsonl"), ValidationError);

  const std::vector<std::pair<std::string, double>> sev{{"a", 0.0}, {"b", 29.9}, {"c", 100.0}};
  io::write_text(dir / "s.jsonl", io::severity_jsonl(sev));
  CHECK(io::read_severity_jsonl(dir / "s.jsonl") == sev);
  io::write_text(dir / "s_bad.jsonl", "{\"image_id\":\"a\",\"os\":101}\n");
  CHECK_THROWS_AS(io::read_severity_jsonl(dir / "s_bad.jsonl"), ValidationError);
}

TEST_CASE("template export lists the registry") {
  const std::string json = io::templates_to_json();
  CHECK(json.find("\"dd_intact_present\"") != std::string::npos);
  std::size_t n = 0;
  for (std::size_t pos = 0; (pos = json.find("\"template_id\"", pos)) != std::string::npos; ++pos) ++n;
  CHECK(n == 40);
}
