// Command-line driver: one subcommand per pipeline stage plus `all`.
//
// Exit status: 0 success, 2 invalid input or configuration (including a
// missing upstream artifact), 1 any other failure.

#include <cstdlib>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cohort_forge.hpp"

namespace cf = cohort_forge;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> threads;
  bool allow_missing_embeddings = false;
  std::string tasks;
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

int run(const std::string& stage, const Options& o) {
  auto cfg = cf::RunConfig::load(o.config);
  cf::apply_output_override(cfg);
  if (o.seed) cfg.seed = *o.seed;
  if (o.threads) cfg.threads = *o.threads;
  if (o.allow_missing_embeddings) cfg.allow_missing_embeddings = true;
  if (!o.tasks.empty()) cfg.tasks = split_list(o.tasks);
  cfg.validate();
  cf::Pipeline p(std::move(cfg));
  p.run(stage);
  std::cerr << stage << ": done, artifacts in " << p.out().string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cohort extraction and linear-probe benchmark pipeline"};
  app.require_subcommand(1);
  Options o;
  app.add_option("--config", o.config, "Run config JSON")->required();
  app.add_option("--seed", o.seed, "Global seed (overrides the config)");
  app.add_option("--threads", o.threads, "Worker threads")->check(CLI::PositiveNumber);
  app.add_flag("--allow-missing-embeddings", o.allow_missing_embeddings,
               "Drop samples that have no embedding instead of failing");
  app.add_option("--tasks", o.tasks, "Comma-separated subset of task names");

  const std::vector<std::pair<std::string, std::string>> stages = {
      {"synth", "Generate the synthetic dataset and ground truth"},
      {"etl", "Standardize events and split subjects"},
      {"cohort", "Extract labeled cohorts for every task"},
      {"featurize", "Build feature matrices"},
      {"probe", "Select lambda by CV and fit the probes"},
      {"evaluate", "Score the test split"},
      {"report", "Aggregate metric tables and the leaderboard"},
      {"all", "Run every stage in order"}};
  for (const auto& [name, help] : stages) app.add_subcommand(name, help)->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  const std::string stage = app.get_subcommands().front()->get_name();
  try {
    return run(stage, o);
  } catch (const cf::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
