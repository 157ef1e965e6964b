#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "oracles/fixtures.hpp"

using namespace cf_test;

namespace {

struct CliResult {
  int code = -1;
  std::string err;
};

// Runs the CLI binary; `env` is a prefix such as "COHORT_FORGE_OUT=/x".
CliResult cli(const std::string& args, const std::string& env = "") {
  static int counter = 0;
  const fs::path err = fs::temp_directory_path() / ("cohort_forge_cli_err_" + std::to_string(counter++));
  const std::string cmd = (env.empty() ? "" : "env " + env + " ") + std::string(COHORT_FORGE_CLI) + " " + args +
                          " 2> " + err.string() + " > /dev/null";
  const int status = std::system(cmd.c_str());
  CliResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.err = read_file(err);
  fs::remove(err);
  return r;
}

// Writes a small synthetic run config under `dir` and returns its path.
fs::path small_run(const fs::path& dir, std::size_t n_subjects, nlohmann::json overrides = nlohmann::json::object()) {
  fs::create_directories(dir);
  auto synth = read_json(source_path("configs/synth.json"));
  synth["n_subjects"] = n_subjects;
  write_json(dir / "synth.json", synth);
  nlohmann::json run = read_json(source_path("configs/run.json"));
  run["paths"]["synth"] = (dir / "synth.json").string();
  run["paths"]["gem"] = source_path("data/gem.csv").string();
  run["paths"]["factors"] = source_path("data/unit_factors.csv").string();
  run["paths"]["tasks"] = source_path("configs/tasks").string();
  run["paths"]["output"] = (dir / "out").string();
  run["bootstrap_iterations"] = 20;
  run.merge_patch(overrides);
  write_json(dir / "run.json", run);
  return dir / "run.json";
}

std::map<std::string, std::string> tree_contents(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file() && e.path().filename() != "timings.json")
      out[fs::relative(e.path(), root).generic_string()] = read_file(e.path());
  return out;
}

const fs::path& full_run() {
  static const fs::path dir = [] {
    const auto d = scratch_dir("pipeline_all_" + std::to_string(::getpid()));
    const auto cfg = small_run(d, 400);
    const auto r = cli("all --config " + cfg.string());
    EXPECT_EQ(r.code, 0) << r.err;
    return d;
  }();
  return dir;
}

}  // namespace

TEST(Pipeline, StageBeforeItsInputsExitsWithTwo) {
  const auto d = scratch_dir("pipeline_order");
  const auto cfg = small_run(d, 50);
  const auto r = cli("cohort --config " + cfg.string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("`etl`"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(d / "out" / "cohorts"));
}

TEST(Pipeline, BadConfigExitsWithTwo) {
  const auto d = scratch_dir("pipeline_badcfg");
  EXPECT_EQ(cli("etl --config " + (d / "absent.json").string()).code, 2);
  const auto cfg = small_run(d, 50, {{"split", {{"train", 0.5}, {"tune", 0.1}, {"test", 0.1}}}});
  EXPECT_EQ(cli("synth --config " + cfg.string()).code, 2);
  EXPECT_EQ(cli("nonsense --config " + cfg.string()).code, 2);
}

TEST(Pipeline, AllStagesProduceEveryTaskReport) {
  const auto out = full_run() / "out";
  std::size_t reports = 0;
  for (const auto& t : shipped_tasks())
    for (const char* model : {"count", "windowed"}) {
      const auto f = out / "reports" / t.name / (std::string(model) + ".json");
      ASSERT_TRUE(fs::exists(f)) << f;
      const auto j = read_json(f);
      EXPECT_EQ(j["task"], t.name);
      ++reports;
    }
  EXPECT_EQ(reports, 28u);
  for (const char* f : {"auroc.csv", "brier.csv", "leaderboard.csv"}) EXPECT_TRUE(fs::exists(out / "reports" / f));
  const auto timings = read_json(out / "timings.json");
  for (const auto& s : stage_names()) EXPECT_TRUE(timings.contains(s)) << s;
}

TEST(Pipeline, ManifestsChainByHash) {
  const auto out = full_run() / "out";
  const auto& stages = stage_names();
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const auto m = read_json(out / "manifests" / (stages[i] + ".json"));
    EXPECT_EQ(m["stage"], stages[i]);
    for (const auto& o : m["outputs"])
      EXPECT_EQ(o["sha256"], sha256_file(out / o["path"].get<std::string>())) << o["path"];
    if (i == 0) continue;
    bool found = false;
    for (const auto& u : m["upstream"])
      if (u["stage"] == stages[i - 1]) {
        found = true;
        EXPECT_EQ(u["manifest_sha256"], sha256_file(out / "manifests" / (stages[i - 1] + ".json")));
      }
    EXPECT_TRUE(found) << stages[i];
  }
}

TEST(Pipeline, RerunIsByteIdentical) {
  const auto first = full_run() / "out";
  const auto d = scratch_dir("pipeline_rerun_" + std::to_string(::getpid()));
  const auto cfg = small_run(d, 400, {{"threads", 2}});
  ASSERT_EQ(cli("all --config " + cfg.string()).code, 0);
  const auto a = tree_contents(first);
  const auto b = tree_contents(d / "out");
  ASSERT_EQ(a.size(), b.size());
  for (const auto& [path, content] : a) EXPECT_TRUE(b.at(path) == content) << path;
}

TEST(Pipeline, OutputDirectoryOverride) {
  const auto d = scratch_dir("pipeline_env");
  const auto cfg = small_run(d, 30);
  const auto elsewhere = d / "elsewhere";
  const auto r = cli("synth --config " + cfg.string(), "COHORT_FORGE_OUT=" + elsewhere.string());
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(elsewhere / "manifests" / "synth.json"));
  EXPECT_FALSE(fs::exists(d / "out"));
}

TEST(Pipeline, EmbeddingsMissingRowsNeedTheFlag) {
  const auto d = scratch_dir("pipeline_emb");
  const auto emb = d / "emb";
  fs::create_directories(emb);
  write_file(emb / "toy.csv", "subject_id,prediction_time,d0,d1\n");
  write_file(emb / "toy.csv.json", "{\"dim\": 2}\n");
  const auto cfg = small_run(d, 300, {{"paths", {{"embeddings", emb.string()}}},
                                      {"models", {"count", "toy"}},
                                      {"tasks", {"death"}}});
  for (const char* s : {"synth", "etl", "cohort"}) ASSERT_EQ(cli(std::string(s) + " --config " + cfg.string()).code, 0);

  // Embed every sample but the first.
  const auto samples = read_cohort((d / "out" / "cohorts" / "death.csv").string());
  ASSERT_GT(samples.size(), 10u);
  std::ostringstream rows;
  rows << "subject_id,prediction_time,d0,d1\n";
  Rng rng(1);
  for (std::size_t i = 1; i < samples.size(); ++i)
    rows << samples[i].subject_id << "," << format_timestamp(samples[i].prediction_time) << "," << rng.normal()
         << "," << samples[i].label + rng.normal() << "\n";
  write_file(emb / "toy.csv", rows.str());

  const auto strict = cli("featurize --config " + cfg.string());
  EXPECT_EQ(strict.code, 2);
  EXPECT_NE(strict.err.find("--allow-missing-embeddings"), std::string::npos) << strict.err;

  const auto loose = cli("featurize --allow-missing-embeddings --config " + cfg.string());
  ASSERT_EQ(loose.code, 0) << loose.err;
  const auto space = read_json(d / "out" / "features" / "death" / "toy" / "space.json");
  EXPECT_EQ(space["missing"].size(), 1u);
  EXPECT_EQ(space["missing"][0]["subject_id"], samples[0].subject_id);
  for (const char* s : {"probe", "evaluate", "report"})
    ASSERT_EQ(cli(std::string(s) + " --allow-missing-embeddings --config " + cfg.string()).code, 0);
  EXPECT_TRUE(fs::exists(d / "out" / "reports" / "death" / "toy.json"));
}
