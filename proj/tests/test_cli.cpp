#include <gtest/gtest.h>

#include "support.hpp"

using namespace cbs;
using testing_support::CliResult;
using testing_support::run_cli;
using testing_support::snapshot;
using testing_support::TempDir;

namespace {

// Small enough that the whole pipeline runs in a few seconds.
nlohmann::json small_config(const std::string& out) {
  return {{"out", out},
          {"n_total", 120},
          {"permutations", 199},
          {"plot_stories", 2},
          {"synth", {{"n_stories", 60}, {"hidden_dim", 16}}}};
}

std::string write_config(const TempDir& dir, const nlohmann::json& j, const std::string& name = "config.json") {
  const auto path = dir / name;
  io::write_file(path, j.dump(2));
  return path.string();
}

CliResult cmd(const std::string& sub, const std::string& config, std::vector<std::string> extra = {}) {
  std::vector<std::string> args{sub, "--config", config};
  args.insert(args.end(), extra.begin(), extra.end());
  return run_cli(args);
}

void run_pipeline(const std::string& config, std::vector<std::string> steer_extra = {}) {
  for (const char* sub : {"synth-gen", "probe", "manifold", "geometry"}) {
    const auto r = cmd(sub, config);
    ASSERT_EQ(r.code, 0) << sub << ": " << r.err;
  }
  const auto s = cmd("steer", config, steer_extra);
  ASSERT_EQ(s.code, 0) << s.err;
  const auto p = cmd("export-plots", config);
  ASSERT_EQ(p.code, 0) << p.err;
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

} // namespace

TEST(Cli, ArgumentErrors) {
  EXPECT_EQ(run_cli({}).code, 2);
  EXPECT_EQ(run_cli({"frobnicate"}).code, 2);
  EXPECT_EQ(run_cli({"probe", "--bogus"}).code, 2);
  EXPECT_EQ(run_cli({"probe", "--seed", "abc"}).code, 2);
  const auto help = run_cli({"--help"});
  EXPECT_EQ(help.code, 0);
  EXPECT_NE(help.out.find("synth-gen"), std::string::npos);
}

TEST(Cli, ConfigErrorsExitTwo) {
  TempDir dir("cfg");
  auto base = small_config((dir / "out").string());

  auto bad = base;
  bad["colour"] = "blue";
  auto r = cmd("synth-gen", write_config(dir, bad));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("colour"), std::string::npos) << r.err;

  bad = base;
  bad["synth"]["sigma"] = -0.1;
  r = cmd("synth-gen", write_config(dir, bad));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("sigma"), std::string::npos) << r.err;
  EXPECT_FALSE(std::filesystem::exists(dir / "out"));

  bad = base;
  bad["reducer"] = "umap";
  EXPECT_EQ(cmd("synth-gen", write_config(dir, bad)).code, 2);

  bad = base;
  bad["steering"] = {{"method", "vibes"}};
  EXPECT_EQ(cmd("synth-gen", write_config(dir, bad)).code, 2);

  io::write_file(dir / "broken.json", "{\"out\": ");
  EXPECT_EQ(cmd("synth-gen", (dir / "broken.json").string()).code, 2);
  EXPECT_EQ(cmd("synth-gen", (dir / "absent.json").string()).code, 2);
}

TEST(Cli, StagesNeedTheirInputs) {
  TempDir dir("stages");
  const auto config = write_config(dir, small_config((dir / "out").string()));
  auto r = cmd("probe", config);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("synth-gen"), std::string::npos) << r.err;
  ASSERT_EQ(cmd("synth-gen", config).code, 0);
  r = cmd("geometry", config);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("manifold"), std::string::npos) << r.err;
  r = cmd("steer", config);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("probe"), std::string::npos) << r.err;
}

TEST(Cli, BehaviorOnlyDatasetCannotBeProbed) {
  TempDir dir("lantern_probe");
  auto j = small_config((dir / "out").string());
  j["dataset"] = testing_support::fixture("lantern").string();
  const auto r = cmd("probe", write_config(dir, j));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("activation"), std::string::npos) << r.err;
}

TEST(Cli, UnwritableOutputIsARuntimeError) {
  TempDir dir("blocked");
  io::write_file(dir / "blocker", "not a directory");
  const auto config = write_config(dir, small_config((dir / "blocker" / "out").string()));
  EXPECT_EQ(cmd("synth-gen", config).code, 1);
}

TEST(Cli, FullPipelineWritesEveryArtifact) {
  TempDir dir("pipeline");
  const auto out = dir / "out";
  run_pipeline(write_config(dir, small_config(out.string())));
  for (const char* f : {"dataset/manifest.json", "ground_truth/oracle.json", "ground_truth/reference.json",
                        "probes/report.json", "manifold/behavior.json", "manifold/activations.json",
                        "manifold/selection.json", "geometry/correlation.json", "geometry/dendrogram_behavior.nwk",
                        "geometry/position_encoding.json", "geometry/ground_truth_alignment.json",
                        "steer/entanglement.json", "steer/prediction.json", "steer/clusters.json", "steer/sweep.json",
                        "steer/persistence.json", "steer/vectors/a1_probe-weights.json",
                        "steer/datasets/b2/manifest.json", "plots/s000_synthetic.csv", "plots/s001_synthetic.svg"})
    EXPECT_TRUE(std::filesystem::exists(out / f)) << f;

  // the steered dataset carries the manifest extension
  const auto m = nlohmann::json::parse(io::read_file(out / "steer/datasets/b2/manifest.json"));
  EXPECT_EQ(m.at("steered").at("concept"), "b2");
  EXPECT_EQ(m.at("steered").at("alpha"), 0.25);
  EXPECT_EQ(m.at("layers").size(), 0u);

  // probes exist, so plots carry the calibrated prediction next to the observed value
  const auto csv = io::read_file(out / "plots/s000_synthetic.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "t,concept,value,predicted,steered");

  // a reference file feeds the comparison output
  auto j = small_config(out.string());
  j["reference"] = (out / "ground_truth/reference.json").string();
  ASSERT_EQ(cmd("geometry", write_config(dir, j, "with_ref.json")).code, 0);
  const auto ref = nlohmann::json::parse(io::read_file(out / "geometry/reference_comparison.json"));
  EXPECT_LT(ref.at("behavior").at("procrustes_residual").get<double>(), 0.05);
}

TEST(Cli, SameSeedSameBytes) {
  TempDir dir("determinism");
  run_pipeline(write_config(dir, small_config((dir / "a").string()), "a.json"));
  run_pipeline(write_config(dir, small_config((dir / "b").string()), "b.json"));
  const auto a = snapshot(dir / "a"), b = snapshot(dir / "b");
  EXPECT_GT(a.size(), 40u);
  ASSERT_EQ(a.size(), b.size());
  for (const auto& [name, bytes] : a) EXPECT_TRUE(b.count(name) && b.at(name) == bytes) << name;

  const auto other = dir / "c";
  ASSERT_EQ(run_cli({"synth-gen", "--config", (dir / "a.json").string(), "--out", other.string(), "--seed", "3"}).code, 0);
  EXPECT_NE(io::read_file(other / "dataset/manifest.json"), a.at("dataset/manifest.json"));
}

TEST(Cli, ZeroMagnitudeGivesZeroEntanglement) {
  TempDir dir("alpha0");
  const auto out = dir / "out";
  run_pipeline(write_config(dir, small_config(out.string())), {"--alpha", "0"});
  const auto E = geometry::matrix_from_json(nlohmann::json::parse(io::read_file(out / "steer/entanglement.json")).at("effects"));
  EXPECT_EQ(E, Matrix::Zero(6, 6));
  const auto pred = nlohmann::json::parse(io::read_file(out / "steer/prediction.json"));
  EXPECT_TRUE(pred.contains("error"));
}

TEST(Cli, FixtureStoryPlots) {
  TempDir dir("lantern_plots");
  auto j = small_config((dir / "out").string());
  j["dataset"] = testing_support::fixture("lantern").string();
  j["stories"] = {"lantern"};
  const auto config = write_config(dir, j);
  ASSERT_EQ(cmd("export-plots", config).code, 0);
  const auto csv = io::read_file(dir / "out/plots/lantern_emotions.csv");
  EXPECT_EQ(count_lines(csv), 1u + 11u * 4u);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "t,concept,value");
  const auto svg = io::read_file(dir / "out/plots/lantern_emotions.svg");
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  ASSERT_EQ(cmd("export-plots", config).code, 0);
  EXPECT_EQ(io::read_file(dir / "out/plots/lantern_emotions.svg"), svg);

  const auto unknown = run_cli({"export-plots", "--config", config, "--story", "no-such-story"});
  EXPECT_EQ(unknown.code, 2);
}
