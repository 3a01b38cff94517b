#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "codetect/eval.hpp"
#include "codetect/plot.hpp"
#include "codetect/runlog.hpp"

namespace fs = std::filesystem;

namespace {

const char* cli() { return CODETECT_CLI_PATH; }

int run(const std::string& args) {
  const std::string cmd = std::string(cli()) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return status < 0 ? status : WEXITSTATUS(status);
}

fs::path work_dir() {
  static const fs::path p = [] {
    const fs::path dir = fs::temp_directory_path() / "codetect_tests" / "cli";
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
  }();
  return p;
}

}  // namespace

TEST_CASE("cli: help and argument errors") {
  CHECK(run("--help") == 0);
  CHECK(run("") != 0);                  // a subcommand is required
  CHECK(run("no-such-subcommand") != 0);
  CHECK(run("eval --checkpoint x") != 0);  // missing required flags
}

TEST_CASE("cli: end-to-end gen-data / train / eval / plot round trip") {
  const fs::path data = work_dir() / "data";
  const fs::path out = work_dir() / "run";
  REQUIRE(run("gen-data --out " + data.string() + " --seed 9 --images 24 --train 18 --classes 3") ==
          0);
  CHECK(fs::exists(data / "manifest.txt"));
  CHECK(fs::exists(data / "images/img_00000.rgb"));

  REQUIRE(run("train --mode weak_only --data " + data.string() + " --out " + out.string() +
              " --epochs 1 --eval-every 1 --seed 2") == 0);
  CHECK(fs::exists(out / "checkpoint.ckpt"));
  CHECK(fs::exists(out / "runlog.csv"));
  CHECK(fs::exists(out / "train_metrics.csv"));
  const codetect::RunLog log = codetect::read_runlog_csv(out / "runlog.csv");
  REQUIRE(!log.rows.empty());
  CHECK(log.rows[0].tag == "I_W");

  const fs::path eval_out = work_dir() / "eval";
  REQUIRE(run("eval --checkpoint " + (out / "checkpoint.ckpt").string() + " --data " +
              data.string() + " --split test --out " + eval_out.string()) == 0);
  CHECK(fs::exists(eval_out / "detections_I_W_test.csv"));
  CHECK(!codetect::read_detections_csv(eval_out / "detections_I_W_test.csv").empty());

  const fs::path svg = work_dir() / "map.svg";
  REQUIRE(run("plot --runlog " + (out / "runlog.csv").string() + " --out " + svg.string()) == 0);
  CHECK(fs::exists(svg));
  CHECK(!codetect::parse_plot_points(svg).empty());
  CHECK(fs::exists(work_dir() / "map.csv"));

  // training against a missing dataset is a categorized failure
  CHECK(run("train --mode weak_only --data " + (work_dir() / "nope").string() + " --out " +
            (work_dir() / "r2").string() + " --epochs 1") != 0);
}

TEST_CASE("cli: config file feeds train, flags take precedence") {
  const fs::path data = work_dir() / "data";  // produced by the round-trip case
  REQUIRE(fs::exists(data / "manifest.txt"));
  const fs::path cfg_file = work_dir() / "run.cfg";
  {
    std::ofstream os(cfg_file);
    os << "mode = weak_only\n";
    os << "epochs = 1\n";
    os << "eval_every = 1\n";
    os << "seed = 5\n";
    os << "data_dir = " << data.string() << "\n";
  }
  const fs::path out = work_dir() / "run_cfg";
  REQUIRE(run("train --config " + cfg_file.string() + " --out " + out.string()) == 0);
  CHECK(fs::exists(out / "checkpoint.ckpt"));

  // bad config key is a configuration error
  const fs::path bad = work_dir() / "bad.cfg";
  {
    std::ofstream os(bad);
    os << "bogus = 1\n";
  }
  CHECK(run("train --config " + bad.string() + " --out " + (work_dir() / "r3").string()) != 0);
}

TEST_CASE("cli: gradcheck subcommand") {
  CHECK(run("gradcheck --instances 4 --seed 7") == 0);
}
