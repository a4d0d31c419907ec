// Copyright 2026 The cdvqa Authors
// SPDX-License-Identifier: Apache-2.0
#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <random>
#include <sstream>
#include <string>

#include "cdvqa/io.hpp"
#include "doctest.h"
#include "json.hpp"

using namespace cdvqa;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("cdvqa_cli_" + std::to_string(::getpid()));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  fs::path operator/(const std::string& name) const { return path / name; }
};

// Runs the CLI with stdout and stderr silenced; returns the exit status.
int cli(const std::string& args) {
  const std::string cmd = std::string(CDVQA_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::size_t line_count(const fs::path& p) {
  std::istringstream in(io::read_text(p));
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) n += !line.empty();
  return n;
}

void three_image_manifest(const TempDir& dir) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> code(0, 3);
  std::string json = "[";
  for (int i = 0; i < 3; ++i) {
    std::vector<std::uint8_t> codes(64);
    for (auto& c : codes) c = static_cast<std::uint8_t>(code(rng));
    const std::string name = "m" + std::to_string(i) + ".pgm";
    io::save_mask(dir / name, SemanticMask::from_codes(8, 8, codes));
    json += std::string(i ? "," : "") + R"({"image_id":"img_)" + std::to_string(i) + R"(","mask_path":")" + name +
            R"(","region":"R"})";
  }
  io::write_text(dir / "manifest.json", json + "]");
}

}  // namespace

TEST_CASE("generate writes 40 records per image") {
  TempDir dir;
  three_image_manifest(dir);
  const std::string m = (dir / "manifest.json").string();
  REQUIRE(cli("generate --manifest " + m + " --out " + (dir / "qa.jsonl").string() + " --severity-out " +
              (dir / "sev.jsonl").string()) == 0);
  CHECK(line_count(dir / "qa.jsonl") == 120);
  CHECK(line_count(dir / "sev.jsonl") == 3);
  REQUIRE(cli("generate --threads 3 --manifest " + m + " --out " + (dir / "qa3.jsonl").string()) == 0);
  CHECK(io::read_text(dir / "qa.jsonl") == io::read_text(dir / "qa3.jsonl"));
  REQUIRE(cli("stats --qa " + (dir / "qa.jsonl").string() + " --severity " + (dir / "sev.jsonl").string() +
              " --out " + (dir / "stats.json").string()) == 0);
  const auto stats = nlohmann::json::parse(io::read_text(dir / "stats.json"));
  CHECK(stats["questions"] == 120);
  CHECK(stats["category_totals"]["quantitative"] == 24);
}

TEST_CASE("eval of the gold answers scores 1.0") {
  TempDir dir;
  three_image_manifest(dir);
  REQUIRE(cli("generate --manifest " + (dir / "manifest.json").string() + " --out " + (dir / "qa.jsonl").string()) ==
          0);
  std::string preds;
  for (const auto& it : io::read_qa_jsonl(dir / "qa.jsonl")) {
    preds += io::prediction_line(it.image_id, it.template_id, it.answer) + "\n";
  }
  io::write_text(dir / "pred.jsonl", preds);
  REQUIRE(cli("eval --gold " + (dir / "qa.jsonl").string() + " --pred " + (dir / "pred.jsonl").string() +
              " --report " + (dir / "r.json").string()) == 0);
  const auto rep = nlohmann::json::parse(io::read_text(dir / "r.json"));
  CHECK(rep["overall_accuracy"].get<double>() == 1.0);
  // Missing predictions are a validation error.
  io::write_text(dir / "short.jsonl", preds.substr(0, preds.find('\n') + 1));
  CHECK(cli("eval --gold " + (dir / "qa.jsonl").string() + " --pred " + (dir / "short.jsonl").string()) == 1);
}

TEST_CASE("exit codes separate validation and I/O failures") {
  TempDir dir;
  CHECK(cli("generate --manifest " + (dir / "absent.json").string() + " --out " + (dir / "x").string()) == 2);
  io::write_text(dir / "bad.pgm", "P2\n1 1\n9\n7\n");
  io::write_text(dir / "m.json", R"([{"image_id":"a","mask_path":"bad.pgm","region":"R"}])");
  CHECK(cli("generate --manifest " + (dir / "m.json").string() + " --out " + (dir / "x").string()) == 1);
  CHECK(cli("generate --resize 10 --manifest " + (dir / "m.json").string() + " --out x") == 1);
  CHECK(cli("no-such-command") == 1);
  CHECK(cli("gradcheck --dims 1,8,3") == 1);
  CHECK(cli("train-toy --fusion max --no-gate") == 1);
  CHECK(cli("--help") == 0);
}

TEST_CASE("gradcheck, scan-bench and templates run") {
  TempDir dir;
  CHECK(cli("gradcheck --dims 1,6,2,3 --seeds 2 --report " + (dir / "g.json").string()) == 0);
  const auto g = nlohmann::json::parse(io::read_text(dir / "g.json"));
  CHECK(g.size() == 2);
  CHECK(cli("gradcheck --dims 1,5,2,2 --exact-zoh --evolution post") == 0);
  CHECK(cli("scan-bench --dims 1,64,2,2 --chunk 8 --repeat 1") == 0);
  CHECK(cli("templates --out " + (dir / "t.json").string()) == 0);
  CHECK(nlohmann::json::parse(io::read_text(dir / "t.json")).size() == 40);
}
