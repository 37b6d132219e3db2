#include <gtest/gtest.h>

#include <cstdio>
#include <fstream>
#include <iterator>
#include <sstream>

#include "cli.hpp"
#include "mirrormamba/synth.hpp"
#include "test_util.hpp"

using mmtest::TempDir;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = mm::run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

std::size_t count_lines(const std::string& s) { return std::size_t(std::count(s.begin(), s.end(), '\n')); }

// One small dataset and model shared by the end-to-end cases.
class CliPipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("cli");
    auto r = cli({"gen", "--n-train", "4", "--n-test", "3", "--size", "32", "--seed", "5", "--out", data()});
    ASSERT_EQ(r.code, 0) << r.err;
    r = cli({"train", "--data", data(), "--out", run(), "--epochs", "1", "--batch", "4", "--base-channels", "4",
             "--d-state", "2"});
    ASSERT_EQ(r.code, 0) << r.err;
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }
  static std::string data() { return (dir_->path() / "data").string(); }
  static std::string run() { return (dir_->path() / "run").string(); }
  static std::string ckpt() { return (dir_->path() / "run" / "model.mmck").string(); }
  static TempDir* dir_;
};

TempDir* CliPipeline::dir_ = nullptr;

}  // namespace

TEST(Cli, HelpMatchesGolden) {
  const std::vector<std::pair<std::string, std::vector<std::string>>> cases = {
      {"top", {"--help"}},           {"gen", {"gen", "--help"}},
      {"train", {"train", "--help"}}, {"eval", {"eval", "--help"}},
      {"predict", {"predict", "--help"}}, {"gradcheck", {"gradcheck", "--help"}},
      {"bench", {"bench", "--help"}}, {"ablate", {"ablate", "--help"}},
  };
  for (const auto& [name, args] : cases) {
    const auto r = cli(args);
    EXPECT_EQ(r.code, 0) << name;
    const auto golden = std::filesystem::path(MM_TEST_DATA_DIR) / "golden" / (name + "_help.txt");
    ASSERT_TRUE(std::filesystem::exists(golden)) << golden;
    EXPECT_EQ(r.out, slurp(golden)) << name;
  }
}

TEST(Cli, UsageErrorsAreOneLine) {
  for (const auto& args : std::vector<std::vector<std::string>>{
           {"gen", "--bogus", "1"}, {}, {"gen"}, {"frobnicate"}, {"bench", "--lengths", "12,x"}}) {
    const auto r = cli(args);
    EXPECT_NE(r.code, 0);
    EXPECT_EQ(count_lines(r.err), 1u) << r.err;
    EXPECT_EQ(r.err.rfind("error: ", 0), 0u) << r.err;
  }
}

TEST(Cli, BenchCsv) {
  const auto r = cli({"bench", "--lengths", "64,128", "--repeats", "1", "--channels", "4", "--d-state", "2"});
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream lines(r.out);
  std::string line;
  std::getline(lines, line);
  EXPECT_EQ(line, "length,median_seconds,ratio_vs_half");
  std::vector<std::string> lens;
  while (std::getline(lines, line)) {
    ASSERT_EQ(std::count(line.begin(), line.end(), ','), 2) << line;
    lens.push_back(line.substr(0, line.find(',')));
    EXPECT_GT(std::stod(line.substr(line.find(',') + 1)), 0.0);
  }
  EXPECT_EQ(lens, (std::vector<std::string>{"64", "128"}));
}

TEST(Cli, GradcheckSubset) {
  const auto r = cli({"gradcheck", "--filter", "sigmoid", "--seeds", "1"});
  EXPECT_EQ(r.code, 0) << r.out << r.err;
  EXPECT_NE(r.out.find("all cases passed"), std::string::npos);
  EXPECT_NE(cli({"gradcheck", "--filter", "no-such-op"}).code, 0);
}

TEST_F(CliPipeline, GenWritesManifest) {
  const auto ds = mm::Dataset::open(data());
  ASSERT_EQ(ds.entries.size(), 7u);
  EXPECT_EQ(ds.split_indices("train").size(), 4u);
  EXPECT_EQ(ds.split_indices("test").size(), 3u);
  for (const auto& e : ds.entries) EXPECT_EQ(e.spec.height, 32u);
}

TEST_F(CliPipeline, TrainOutputs) {
  for (const char* f : {"checkpoint.mmck", "model.mmck", "train.json", "train_log.jsonl"})
    EXPECT_TRUE(std::filesystem::exists(std::filesystem::path(run()) / f)) << f;
  EXPECT_EQ(count_lines(slurp(std::filesystem::path(run()) / "train_log.jsonl")), 1u);
}

TEST_F(CliPipeline, EvalJson) {
  const auto json_path = (dir_->path() / "eval.json").string();
  const auto r = cli({"eval", "--ckpt", ckpt(), "--data", data(), "--json", json_path, "--per-sample"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("IoU"), std::string::npos);
  const auto j = nlohmann::json::parse(slurp(json_path));
  for (const char* k : {"iou", "f_beta", "mae", "accuracy"}) {
    ASSERT_TRUE(j.contains(k)) << k;
    EXPECT_GE(j[k].get<double>(), 0.0);
    EXPECT_LE(j[k].get<double>(), 1.0);
  }
  EXPECT_EQ(j.at("split"), "test");
  EXPECT_EQ(j.at("per_sample").size(), 3u);
}

TEST_F(CliPipeline, PredictWritesPgms) {
  const auto out = dir_->path() / "pred";
  const auto r = cli({"predict", "--ckpt", ckpt(), "--data", data(), "--out", out.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto ds = mm::Dataset::open(data());
  for (auto i : ds.split_indices("test")) {
    const auto& id = ds.entries[i].id;
    for (const char* suffix : {"_prob.pgm", "_bin.pgm"}) {
      std::size_t h = 0, w = 0;
      const auto px = mm::read_pgm(out / (id + suffix), h, w);
      EXPECT_EQ(h, 32u);
      EXPECT_EQ(w, 32u);
      EXPECT_EQ(px.size(), 32u * 32u);
    }
  }
}

TEST_F(CliPipeline, MissingCheckpointFails) {
  const auto r = cli({"eval", "--ckpt", (dir_->path() / "nope.mmck").string(), "--data", data()});
  EXPECT_NE(r.code, 0);
  EXPECT_EQ(count_lines(r.err), 1u);
  EXPECT_NE(r.err.find("nope.mmck"), std::string::npos) << r.err;
}

TEST_F(CliPipeline, ResumeAppendsLog) {
  const auto ck = (std::filesystem::path(run()) / "checkpoint.mmck").string();
  // The run already finished its single epoch, so resuming trains nothing.
  const auto r = cli({"train", "--data", data(), "--out", run(), "--resume", ck});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("trained 0 steps"), std::string::npos) << r.out;
}

TEST(Cli, BinaryRunsAndReportsErrors) {
  const std::string cmd = std::string(MM_CLI_BINARY) + " eval --ckpt /nonexistent/x.mmck --data /nonexistent 2>&1";
  FILE* p = popen(cmd.c_str(), "r");
  ASSERT_NE(p, nullptr);
  std::string text;
  char buf[256];
  while (fgets(buf, sizeof buf, p)) text += buf;
  const int status = pclose(p);
  EXPECT_NE(status, 0);
  EXPECT_EQ(count_lines(text), 1u) << text;
}
