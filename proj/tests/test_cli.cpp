#include "helpers.hpp"

#include <doctest.h>

#include <json.hpp>

#include <fstream>
#include <sys/wait.h>

namespace fs = std::filesystem;

namespace {
int cli(const fs::path& dir, const std::string& args) {
  const std::string cmd = "cd '" + dir.string() + "' && '" SSF_CLI_PATH "' " + args + " >/dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  return nlohmann::json::parse(in);
}

const char* kData = "gen-data --n-lat 8 --n-lon 8 --months 72 --train-end 48 --val-end 60 --seed 2 --output-dir data";
}  // namespace

TEST_CASE("cli rejects bad configurations without writing") {
  testutil::TempDir dir("cli_bad");
  REQUIRE(cli(dir.path(), kData) == 0);
  CHECK(cli(dir.path(), "train --data data --model logistic --task regression --output-dir out1") == 2);
  CHECK_FALSE(fs::exists(dir / "out1"));
  CHECK(cli(dir.path(), "train --data data --model nope --output-dir out2") == 2);
  CHECK(cli(dir.path(), "train --data data --model qrf --task quantile --alpha 2 --output-dir out3") == 2);
  CHECK_FALSE(fs::exists(dir / "out3"));
  CHECK(cli(dir.path(), "train --data missing --model lr --output-dir out4") != 0);
  CHECK(cli(dir.path(), "frobnicate") == 2);
}

TEST_CASE("cli manifest and thread independence") {
  testutil::TempDir dir("cli_ok");
  REQUIRE(cli(dir.path(), kData) == 0);
  const auto gen = read_json(dir / "data/run_manifest.json");
  CHECK(gen["command"] == "gen-data");
  CHECK(gen["deterministic"] == true);
  REQUIRE(cli(dir.path(), "train --data data --model rf --n-trees 6 --threads 1 --output-dir a") == 0);
  REQUIRE(cli(dir.path(), "train --data data --model rf --n-trees 6 --threads 2 --output-dir b") == 0);
  const auto a = read_json(dir / "a/run_manifest.json"), b = read_json(dir / "b/run_manifest.json");
  // config and model metadata record the thread count; fitted trees must not depend on it
  CHECK(a["outputs"]["model/forest_0000.bin"] == b["outputs"]["model/forest_0000.bin"]);
  CHECK(a["inputs"] == b["inputs"]);
  CHECK(cli(dir.path(), "rerun --manifest a/run_manifest.json --output-dir c") == 0);
  CHECK(cli(dir.path(), "evaluate --data data --model-dir a/model --output-dir e") == 0);
  CHECK(fs::exists(dir / "e/summary.json"));
}
