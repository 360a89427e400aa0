#include <catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "zsg/cli.hpp"

namespace fs = std::filesystem;
using zsg::cli::run;

namespace {

struct Outcome {
  int status;
  std::string out, err;
};

Outcome call(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int rc = run(args, out, err);
  return {rc, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("zsg_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write(const fs::path& p, const std::string& text) {
  std::ofstream f(p);
  f << text;
}

}  // namespace

TEST_CASE("usage and config errors are one classified line", "[cli][errors]") {
  auto r = call({});
  REQUIRE(r.status == 2);
  REQUIRE(r.err.rfind("error: usage_error: ", 0) == 0);
  r = call({"train", "--no-such-flag"});
  REQUIRE(r.status == 2);

  const auto dir = scratch("cfg");
  write(dir / "typo.json", R"({"trian": {"epochs": 3}})");
  r = call({"train", "--config", (dir / "typo.json").string(), "--out", (dir / "o").string()});
  REQUIRE(r.status == 1);
  REQUIRE(r.err == "error: config_error: unknown config key 'trian'\n");

  r = call({"train", "--out", (dir / "o").string()});
  REQUIRE(r.status == 1);
  REQUIRE(r.err.rfind("error: config_error: missing data", 0) == 0);

  r = call({"eval", "--data", (dir / "nothing").string(), "--model", (dir / "none.ckpt").string(), "--out",
            (dir / "o").string()});
  REQUIRE(r.status == 1);
  REQUIRE(r.err.rfind("error: io_error: ", 0) == 0);
}

TEST_CASE("split case1 without 'other' annotations fails with a configuration error", "[cli][split]") {
  const auto dir = scratch("split");
  std::vector<zsg::AnnotationRecord> rs;
  for (int i = 0; i < 3; ++i)
    rs.push_back({"im" + std::to_string(i), {64, 64}, {{"a man", {1, 1, 9, 9}, std::string("people"), {}}}, {}});
  zsg::write_annotations(rs, (dir / "dump.jsonl").string());
  const auto r = call({"split", "case1", "--input", (dir / "dump.jsonl").string(), "--out", (dir / "o").string()});
  REQUIRE(r.status != 0);
  REQUIRE(r.err.rfind("error: config_error: ", 0) == 0);
  REQUIRE(std::count(r.err.begin(), r.err.end(), '\n') == 1);
}

TEST_CASE("gradcheck passes on fresh initialisation", "[cli][gradcheck]") {
  const auto r = call({"gradcheck", "--seed", "3"});
  INFO(r.out << r.err);
  REQUIRE(r.status == 0);
  REQUIRE(r.out.find("FAIL") == std::string::npos);
}

TEST_CASE("train and eval are reproducible from flags and from the snapshot", "[cli][determinism]") {
  const auto dir = scratch("repro");
  write(dir / "small.json", R"({"synth": {"train": 96, "val": 24, "case0": 16, "case1": 16, "case2": 16, "case3": 16},
                                "train": {"epochs": 2}})");
  const std::string cfg = (dir / "small.json").string();
  REQUIRE(call({"synth-gen", "--config", cfg, "--out", (dir / "bm").string()}).status == 0);
  REQUIRE(fs::exists(dir / "bm" / "annotations.jsonl"));

  for (const char* run_name : {"a", "b"}) {
    const auto tr = dir / (std::string("train_") + run_name), ev = dir / (std::string("eval_") + run_name);
    REQUIRE(call({"train", "--config", cfg, "--data", (dir / "bm").string(), "--out", tr.string(), "--seed", "7",
                  "--threads", "1"})
                .status == 0);
    REQUIRE(call({"eval", "--config", cfg, "--data", (dir / "bm").string(), "--model", (tr / "model.ckpt").string(),
                  "--out", ev.string(), "--seed", "7"})
                .status == 0);
  }
  const std::string metrics = slurp(dir / "train_a" / "metrics.csv");
  REQUIRE(metrics.rfind("epoch,l_pred,l_reg,val_accuracy\n", 0) == 0);
  REQUIRE(metrics == slurp(dir / "train_b" / "metrics.csv"));
  REQUIRE(slurp(dir / "train_a" / "model.ckpt") == slurp(dir / "train_b" / "model.ckpt"));
  for (const char* f : {"eval_metrics.csv", "eval_val.json", "eval_case2.csv"})
    REQUIRE(slurp(dir / "eval_a" / f) == slurp(dir / "eval_b" / f));

  // the resolved snapshot alone reproduces the run
  const auto snap = nlohmann::json::parse(slurp(dir / "train_a" / "resolved_config.json"));
  REQUIRE(snap.at("seed") == 7);
  auto again = snap;
  again["out"] = (dir / "train_c").string();
  write(dir / "again.json", again.dump());
  REQUIRE(call({"train", "--config", (dir / "again.json").string()}).status == 0);
  REQUIRE(slurp(dir / "train_c" / "metrics.csv") == metrics);

  const auto img = *fs::directory_iterator(dir / "bm" / "images" / "val");
  const auto p = call({"predict", "--model", (dir / "train_a" / "model.ckpt").string(), "--data",
                       (dir / "bm").string(), "--image", img.path().string(), "--query", "red disk"});
  INFO(p.err);
  REQUIRE(p.status == 0);
  const auto j = nlohmann::json::parse(p.out);
  REQUIRE(j.at("box").size() == 4);

  const auto bad = call({"split", "case23", "--input", (dir / "bm" / "annotations.jsonl").string(), "--out",
                         (dir / "s").string()});
  REQUIRE(bad.status == 1);
  REQUIRE(bad.err.rfind("error: config_error: missing embeddings", 0) == 0);
  const auto ok = call({"split", "case23", "--input", (dir / "bm" / "annotations.jsonl").string(), "--embeddings",
                        (dir / "bm" / "embeddings.txt").string(), "--out", (dir / "s").string()});
  INFO(ok.err);
  REQUIRE(ok.status == 0);
  REQUIRE(slurp(dir / "s" / "report.txt").find("FAIL") == std::string::npos);
}
