#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "amr/app.hpp"
#include "amr/errors.hpp"
#include "test_util.hpp"

using namespace amr;
using amr::test::TempDir;

namespace {

int cli(std::vector<std::string> args) {
  args.insert(args.begin(), "amr");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(cli({}), kExitUsage);
  EXPECT_EQ(cli({"bogus"}), kExitUsage);
  EXPECT_EQ(cli({"dump-arch", "--model", "resnet"}), kExitUsage);
  EXPECT_EQ(cli({"dump-arch", "--model", "ocr", "--scale", "3"}), kExitUsage);
  EXPECT_EQ(cli({"eval", "--annotations", "a.json"}), kExitUsage);
  EXPECT_EQ(cli({"--help"}), kExitOk);
}

TEST(Cli, DumpArchWritesCsv) {
  TempDir dir("cli");
  const auto out = dir.path() / "ocr.csv";
  ASSERT_EQ(cli({"dump-arch", "--model", "ocr", "--out", out.string()}), kExitOk);
  const auto csv = read_text(out);
  EXPECT_EQ(csv.rfind("index,kind,in_shape,out_shape,bflop\n", 0), 0u);
  EXPECT_EQ(count_lines(csv), 23u);  // header and 22 layers
  EXPECT_NE(csv.find("19,conv,48x16x512,48x16x512,3.624"), std::string::npos);
}

TEST(Cli, ParseSweep) {
  EXPECT_EQ(parse_sweep("0,5,10"), (std::vector<double>{0.0, 0.05, 0.1}));
  EXPECT_THROW(parse_sweep("0,x"), ParameterError);
  EXPECT_THROW(parse_sweep("100"), ParameterError);
  EXPECT_THROW(parse_sweep(""), ParameterError);
  const std::vector<RejectionPoint> curve{{0.0, 0.9, 10}, {0.05, 0.95, 9}};
  EXPECT_EQ(sweep_row_csv(curve), "0%,5%\n0.9000,0.9500\n");
}

TEST(Cli, PlotCsvOfLossLog) {
  TempDir dir("cli");
  const auto log = dir.path() / "loss.csv";
  std::ofstream(log) << "step,component,value\n0,total,5\n1,total,4\n0,box,1\n1,box,0.5\n";
  const auto out = dir.path() / "series.csv";
  ASSERT_EQ(cli({"plot", "--input", log.string(), "--format", "csv", "--out", out.string()}), kExitOk);
  const auto csv = read_text(out);
  EXPECT_EQ(csv.rfind("series,x,y\n", 0), 0u);
  EXPECT_NE(csv.find("total,1,4"), std::string::npos);
  EXPECT_NE(csv.find("box,1,0.5"), std::string::npos);
  ASSERT_EQ(cli({"plot", "--input", log.string(), "--out", (dir.path() / "p.png").string()}), kExitOk);
  EXPECT_TRUE(std::filesystem::exists(dir.path() / "p.png"));

  std::ofstream(dir.path() / "bad.csv") << "alpha,beta\n1,2\n";
  EXPECT_EQ(cli({"plot", "--input", (dir.path() / "bad.csv").string()}), kExitFailure);
}

TEST(Cli, MissingInputsExitOne) {
  TempDir dir("cli");
  EXPECT_EQ(cli({"infer", "--models", dir.path().string(), "--images", dir.path().string()}), kExitFailure);
  EXPECT_EQ(cli({"plot", "--input", (dir.path() / "nope.csv").string()}), kExitFailure);
}

TEST(Cli, GenerateTrainInferEval) {
  TempDir dir("cli");
  const auto data = dir.path() / "data";
  const auto models = dir.path() / "models";
  ASSERT_EQ(cli({"generate", "--out", data.string(), "--count", "30", "--seed", "4"}), kExitOk);
  ASSERT_TRUE(std::filesystem::exists(data / "annotations.json"));
  EXPECT_EQ(load_annotations(data / "annotations.json").size(), 30u);

  ASSERT_EQ(cli({"train", "--model", "detector", "--data", data.string(), "--out", models.string(), "--iterations",
                 "0", "--scale", "0.125"}),
            kExitOk);
  ASSERT_EQ(cli({"train", "--model", "cdcc", "--data", data.string(), "--out", models.string(), "--epochs", "0",
                 "--scale", "0.125"}),
            kExitOk);
  ASSERT_EQ(cli({"train", "--model", "ocr", "--data", data.string(), "--out", models.string(), "--iterations", "0",
                 "--scale", "0.125"}),
            kExitOk);

  const auto pred = dir.path() / "pred.jsonl";
  ASSERT_EQ(cli({"infer", "--models", models.string(), "--annotations", data.string(), "--split", "test", "--out",
                 pred.string()}),
            kExitOk);
  EXPECT_EQ(count_lines(read_text(pred)), 12u);

  const auto report = dir.path() / "report";
  ASSERT_EQ(cli({"eval", "--annotations", data.string(), "--predictions", pred.string(), "--split", "test", "--sweep",
                 "0,5,10", "--out", report.string()}),
            kExitOk);
  EXPECT_TRUE(std::filesystem::exists(report / "summary.json"));
  EXPECT_EQ(read_text(report / "sweep.csv").rfind("0%,5%,10%\n", 0), 0u);

  // Predictions for a different subset cannot be paired.
  EXPECT_EQ(cli({"eval", "--annotations", data.string(), "--predictions", pred.string(), "--split", "train"}),
            kExitFailure);

  // An empty image directory yields no records.
  const auto empty = dir.path() / "empty";
  std::filesystem::create_directories(empty);
  const auto none = dir.path() / "none.jsonl";
  ASSERT_EQ(cli({"infer", "--models", models.string(), "--images", empty.string(), "--out", none.string()}), kExitOk);
  EXPECT_EQ(read_text(none), "");
}
