#pragma once

// Stage orchestration: run config, on-disk artifacts and manifests.
//
// Layout under the output directory:
//   synth/        generated events and ground truth
//   etl/          standardized events, subject splits, ETL report
//   cohorts/      one sample CSV and one report per task
//   features/     per task and model: sample lists, matrices, column spaces
//   models/       fitted probes with their CV traces
//   predictions/  test-set probabilities
//   reports/      per (task, model) metric JSON plus aggregated tables
//   manifests/    one manifest per stage, chained by hash
//   timings.json  wall time per stage, kept apart so reports stay stable

#include <openssl/evp.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cohort_forge/cohort.hpp"
#include "cohort_forge/error.hpp"
#include "cohort_forge/event_store.hpp"
#include "cohort_forge/featurize.hpp"
#include "cohort_forge/matrix.hpp"
#include "cohort_forge/metrics.hpp"
#include "cohort_forge/probe.hpp"
#include "cohort_forge/standardize.hpp"
#include "cohort_forge/synthgen.hpp"
#include "cohort_forge/task.hpp"

namespace cohort_forge {

namespace fs = std::filesystem;

inline constexpr std::string_view kVersion = "cohort-forge 0.1.0";
inline constexpr std::string_view kOutputEnvVar = "COHORT_FORGE_OUT";

// A stage was asked to run before the stage that produces its inputs.
class MissingPrerequisite : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

inline const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> s = {"synth",  "etl",      "cohort", "featurize",
                                             "probe",  "evaluate", "report"};
  return s;
}

inline bool is_baseline_model(std::string_view m) { return m == "count" || m == "windowed"; }

// ---------------------------------------------------------------------------
// Hashing and small file helpers.

inline std::string sha256_hex(std::string_view data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw Error("SHA-256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::string sha256_file(const fs::path& p) { return sha256_hex(read_file(p)); }

inline void write_file(const fs::path& p, std::string_view content) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error("cannot write " + p.string());
  out << content;
}

inline void write_json(const fs::path& p, const nlohmann::ordered_json& j) { write_file(p, j.dump(2) + "\n"); }

inline nlohmann::json read_json(const fs::path& p) {
  try {
    return nlohmann::json::parse(read_file(p));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("bad JSON in " + p.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Run configuration.

struct RunConfig {
  struct Paths {
    fs::path synth;       // generator config; used when events is empty
    fs::path events;
    fs::path gem;
    fs::path factors;
    fs::path tasks;
    fs::path embeddings;  // optional directory of <model>.csv + <model>.csv.json
    fs::path output;
  } paths;
  std::uint64_t seed = 0;
  std::map<std::string, std::uint64_t> stage_seeds;
  SplitRatios split;
  std::size_t train_cap = kTrainCap;
  std::size_t eval_cap = kEvalCap;
  std::size_t probe_folds = kProbeFolds;
  std::size_t baseline_folds = kBaselineFolds;
  double lambda_min = 1e-4;
  double lambda_max = 1e4;
  std::size_t lambda_points = 9;
  std::size_t bootstrap_iterations = kBootstrapIterations;
  bool subject_bootstrap = false;
  std::vector<std::string> subgroups = subgroup_attributes();
  std::vector<std::string> models = {"count", "windowed"};
  int min_code_count = 10;
  bool include_demographics = false;
  unsigned threads = 1;
  std::vector<std::string> tasks;  // subset by name; empty = every config in paths.tasks
  bool allow_missing_embeddings = false;

  std::uint64_t stage_seed(const std::string& stage) const {
    if (auto it = stage_seeds.find(stage); it != stage_seeds.end()) return it->second;
    return derive_seed(seed, stage);
  }

  std::vector<double> lambda_grid() const { return log_grid(lambda_min, lambda_max, lambda_points); }

  FeatureSpec feature_spec(const std::string& model) const {
    FeatureSpec s = model == "windowed" ? FeatureSpec::windowed() : FeatureSpec::counts();
    s.min_code_count = min_code_count;
    s.include_demographics = include_demographics;
    return s;
  }

  // Everything that can influence artifacts; threads and the output path are
  // deliberately left out.
  nlohmann::ordered_json fingerprint() const {
    nlohmann::ordered_json j;
    j["seed"] = seed;
    j["stage_seeds"] = stage_seeds;
    j["split"] = {split.train, split.tune, split.test};
    j["caps"] = {train_cap, eval_cap};
    j["cv_folds"] = {probe_folds, baseline_folds};
    j["lambda_grid"] = lambda_grid();
    j["bootstrap_iterations"] = bootstrap_iterations;
    j["subject_bootstrap"] = subject_bootstrap;
    j["subgroups"] = subgroups;
    j["models"] = models;
    j["min_code_count"] = min_code_count;
    j["include_demographics"] = include_demographics;
    j["tasks"] = tasks;
    j["allow_missing_embeddings"] = allow_missing_embeddings;
    return j;
  }

  // Paths in the JSON are relative to `base`, normally the config's directory.
  static RunConfig from_json(const nlohmann::json& j, const fs::path& base = {}) {
    RunConfig c;
    auto path_of = [&](const nlohmann::json& p, const char* key) -> fs::path {
      if (!p.contains(key) || p[key].is_null()) return {};
      const fs::path v = p[key].get<std::string>();
      return v.is_absolute() ? v : base / v;
    };
    try {
      const auto& p = j.at("paths");
      for (const auto& [k, v] : p.items())
        if (!std::set<std::string>{"synth", "events", "gem", "factors", "tasks", "embeddings", "output"}.count(k))
          throw ValidationError("unknown path key '" + k + "'");
      c.paths = {path_of(p, "synth"),   path_of(p, "events"), path_of(p, "gem"),   path_of(p, "factors"),
                 path_of(p, "tasks"),   path_of(p, "embeddings"), path_of(p, "output")};
      c.seed = j.at("seed");
      c.stage_seeds = j.value("stage_seeds", std::map<std::string, std::uint64_t>{});
      if (j.contains("split")) {
        const auto& s = j["split"];
        c.split = {s.at("train"), s.at("tune"), s.at("test")};
      }
      if (j.contains("caps")) {
        c.train_cap = j["caps"].at("train");
        c.eval_cap = j["caps"].at("eval");
      }
      if (j.contains("cv_folds")) {
        c.probe_folds = j["cv_folds"].at("probe");
        c.baseline_folds = j["cv_folds"].at("baseline");
      }
      if (j.contains("lambda_grid")) {
        c.lambda_min = j["lambda_grid"].at("min");
        c.lambda_max = j["lambda_grid"].at("max");
        c.lambda_points = j["lambda_grid"].at("points");
      }
      c.bootstrap_iterations = j.value("bootstrap_iterations", c.bootstrap_iterations);
      c.subject_bootstrap = j.value("subject_bootstrap", false);
      c.subgroups = j.value("subgroups", c.subgroups);
      c.models = j.value("models", c.models);
      if (j.contains("features")) {
        c.min_code_count = j["features"].value("min_code_count", c.min_code_count);
        c.include_demographics = j["features"].value("include_demographics", false);
      }
      c.threads = j.value("threads", 1u);
      c.tasks = j.value("tasks", std::vector<std::string>{});
      c.allow_missing_embeddings = j.value("allow_missing_embeddings", false);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(std::string("bad run config: ") + e.what());
    }
    return c;
  }

  static RunConfig load(const fs::path& path) {
    if (!fs::exists(path)) throw ValidationError("run config not found: " + path.string());
    return from_json(read_json(path), path.parent_path());
  }

  void validate() const {
    auto must_exist = [](const fs::path& p, const char* what) {
      if (p.empty()) throw ValidationError(std::string("run config lacks paths.") + what);
      if (!fs::exists(p)) throw ValidationError(std::string("paths.") + what + " does not exist: " + p.string());
    };
    if (paths.events.empty()) must_exist(paths.synth, "synth");
    else must_exist(paths.events, "events");
    must_exist(paths.gem, "gem");
    must_exist(paths.factors, "factors");
    must_exist(paths.tasks, "tasks");
    if (!paths.embeddings.empty()) must_exist(paths.embeddings, "embeddings");
    if (paths.output.empty()) throw ValidationError("run config lacks paths.output");
    if (train_cap == 0 || eval_cap == 0) throw ValidationError("caps must be positive");
    if (probe_folds < 2 || baseline_folds < 2) throw ValidationError("cv folds must be >= 2");
    if (bootstrap_iterations < 2) throw ValidationError("bootstrap_iterations must be >= 2");
    if (threads == 0) throw ValidationError("threads must be >= 1");
    if (min_code_count < 0) throw ValidationError("min_code_count must be >= 0");
    lambda_grid();
    split_subjects(std::vector<SubjectId>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10}, split, 0);  // ratio check
    for (const auto& s : subgroups)
      if (std::find(subgroup_attributes().begin(), subgroup_attributes().end(), s) == subgroup_attributes().end())
        throw ValidationError("unknown subgroup attribute '" + s + "'");
    if (models.empty()) throw ValidationError("no models configured");
    std::set<std::string> seen;
    for (const auto& m : models) {
      if (!seen.insert(m).second) throw ValidationError("duplicate model '" + m + "'");
      if (is_baseline_model(m)) continue;
      if (paths.embeddings.empty())
        throw ValidationError("model '" + m + "' needs paths.embeddings");
      if (!fs::exists(paths.embeddings / (m + ".csv")))
        throw ValidationError("no embedding file for model '" + m + "' in " + paths.embeddings.string());
    }
  }
};

// Applies COHORT_FORGE_OUT when set.
inline void apply_output_override(RunConfig& c) {
  if (const char* v = std::getenv(std::string(kOutputEnvVar).c_str()); v && *v) c.paths.output = v;
}

// ---------------------------------------------------------------------------
// Manifests.

struct ManifestBuilder {
  std::string stage;
  std::uint64_t seed = 0;
  nlohmann::ordered_json inputs = nlohmann::ordered_json::array();
  nlohmann::ordered_json outputs = nlohmann::ordered_json::array();
  nlohmann::ordered_json upstream = nlohmann::ordered_json::array();

  void input(const std::string& label, const fs::path& p) {
    inputs.push_back({{"path", label}, {"sha256", sha256_file(p)}});
  }
  void output(const fs::path& root, const fs::path& p) {
    outputs.push_back({{"path", fs::relative(p, root).generic_string()}, {"sha256", sha256_file(p)}});
  }
};

class Pipeline {
 public:
  explicit Pipeline(RunConfig cfg) : cfg_(std::move(cfg)) {}

  const RunConfig& config() const { return cfg_; }
  const fs::path& out() const { return cfg_.paths.output; }
  fs::path manifest_path(const std::string& stage) const { return out() / "manifests" / (stage + ".json"); }

  void run(const std::string& stage) {
    const auto t0 = std::chrono::steady_clock::now();
    if (stage == "synth") synth();
    else if (stage == "etl") etl();
    else if (stage == "cohort") cohort();
    else if (stage == "featurize") featurize_stage();
    else if (stage == "probe") probe();
    else if (stage == "evaluate") evaluate_stage();
    else if (stage == "report") report();
    else if (stage == "all") {
      for (const auto& s : stage_names())
        if (s != "synth" || cfg_.paths.events.empty()) run(s);
      return;
    } else {
      throw ValidationError("unknown stage '" + stage + "'");
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    record_timing(stage, secs);
  }

  // Tasks in name order, restricted to the configured subset.
  std::vector<TaskDefinition> tasks() const {
    std::vector<TaskDefinition> out;
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(cfg_.paths.tasks))
      if (e.path().extension() == ".task") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    std::set<std::string> names;
    for (const auto& f : files) {
      auto t = load_task(f.string());
      if (!names.insert(t.name).second) throw ValidationError("duplicate task name '" + t.name + "'");
      if (cfg_.tasks.empty() || std::find(cfg_.tasks.begin(), cfg_.tasks.end(), t.name) != cfg_.tasks.end())
        out.push_back(std::move(t));
    }
    for (const auto& want : cfg_.tasks)
      if (!names.count(want)) throw ValidationError("unknown task '" + want + "'");
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
    return out;
  }

 private:
  RunConfig cfg_;

  void require(const std::string& stage) const {
    if (!fs::exists(manifest_path(stage)))
      throw MissingPrerequisite("missing output of stage '" + stage + "' in " + out().string() +
                                "; run `" + stage + "` first");
  }

  void require_file(const fs::path& p, const std::string& stage) const {
    if (!fs::exists(p))
      throw MissingPrerequisite("missing " + fs::relative(p, out()).generic_string() + "; run `" + stage +
                                "` first");
  }

  void finish(ManifestBuilder& m, const std::vector<std::string>& upstream) const {
    for (const auto& u : upstream)
      m.upstream.push_back({{"stage", u}, {"manifest_sha256", sha256_file(manifest_path(u))}});
    nlohmann::ordered_json j;
    j["stage"] = m.stage;
    j["version"] = kVersion;
    j["event_schema"] = kSchemaVersion;
    j["seed"] = m.seed;
    j["config_sha256"] = sha256_hex(cfg_.fingerprint().dump());
    j["upstream"] = m.upstream;
    j["inputs"] = m.inputs;
    j["outputs"] = m.outputs;
    write_json(manifest_path(m.stage), j);
  }

  void record_timing(const std::string& stage, double secs) const {
    const fs::path p = out() / "timings.json";
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    if (fs::exists(p)) j = nlohmann::ordered_json::parse(read_file(p));
    j[stage] = secs;
    write_json(p, j);
  }

  fs::path events_input() const { return cfg_.paths.events.empty() ? out() / "synth" / "events.csv" : cfg_.paths.events; }
  fs::path etl_events() const { return out() / "etl" / "events.csv"; }
  fs::path splits_path() const { return out() / "etl" / "splits.csv"; }

  Dataset load_etl_dataset() const { return load_events(etl_events().string()).dataset; }

  SplitAssignment load_splits() const {
    std::ifstream in(splits_path(), std::ios::binary);
    if (!in) throw MissingPrerequisite("missing etl/splits.csv; run `etl` first");
    return read_splits(in);
  }

  // -------------------------------------------------------------------------
  void synth() {
    if (cfg_.paths.synth.empty()) throw ValidationError("run config lacks paths.synth");
    auto gen = GeneratorConfig::load(cfg_.paths.synth.string());
    if (auto it = cfg_.stage_seeds.find("synth"); it != cfg_.stage_seeds.end()) gen.seed = it->second;
    const auto data = generate(gen, cfg_.threads);
    const fs::path dir = out() / "synth";
    fs::create_directories(dir / "ground_truth");
    ManifestBuilder m{"synth", gen.seed};
    m.input("synth_config", cfg_.paths.synth);
    write_events(data.dataset, (dir / "events.csv").string());
    m.output(out(), dir / "events.csv");
    nlohmann::ordered_json summary = nlohmann::ordered_json::object();
    for (const auto& p : gen.planted) {
      const auto& rows = data.truth.at(p.task);
      const fs::path f = dir / "ground_truth" / (p.task + ".csv");
      std::ofstream o(f, std::ios::binary);
      write_ground_truth(rows, o);
      o.close();
      m.output(out(), f);
      nlohmann::ordered_json coef = nlohmann::ordered_json::object();
      for (const auto& r : p.risk_codes) coef[r.code] = r.coef;
      double prevalence = 0.0;
      for (const auto& r : rows) prevalence += r.label;
      nlohmann::ordered_json bayes;
      try {
        bayes = oracle_bayes_auroc(rows);
      } catch (const UndefinedMetric&) {
      }
      summary[p.task] = {{"intercept", data.intercepts.at(p.task)},
                         {"coefficients", coef},
                         {"base_prevalence", p.base_prevalence},
                         {"anchors", rows.size()},
                         {"prevalence", rows.empty() ? 0.0 : prevalence / static_cast<double>(rows.size())},
                         {"bayes_auroc", bayes}};
    }
    write_json(dir / "ground_truth.json", summary);
    m.output(out(), dir / "ground_truth.json");
    finish(m, {});
  }

  void etl() {
    if (cfg_.paths.events.empty()) require("synth");
    const fs::path in = events_input();
    if (!fs::exists(in)) throw ValidationError("events file not found: " + in.string());
    ManifestBuilder m{"etl", cfg_.stage_seed("etl")};
    m.input(cfg_.paths.events.empty() ? "synth/events.csv" : cfg_.paths.events.filename().string(), in);
    m.input(cfg_.paths.gem.filename().string(), cfg_.paths.gem);
    m.input(cfg_.paths.factors.filename().string(), cfg_.paths.factors);
    const auto loaded = load_events(in.string());
    const auto result = run_etl(loaded.dataset, load_gem(cfg_.paths.gem.string()),
                                load_unit_factors(cfg_.paths.factors.string()), {}, {}, cfg_.threads);
    const fs::path dir = out() / "etl";
    fs::create_directories(dir);
    write_events(result.dataset, etl_events().string());
    m.output(out(), etl_events());
    const auto splits = split_subjects(result.dataset, cfg_.split, m.seed);
    {
      std::ofstream o(splits_path(), std::ios::binary);
      write_splits(splits, o);
    }
    m.output(out(), splits_path());
    nlohmann::ordered_json report = result.report.to_json();
    report["rows_read"] = loaded.report.rows;
    report["rows_rejected"] = loaded.report.rejected;
    report["demographics_retimed"] = loaded.report.demo_retimed;
    report["subjects"] = result.dataset.size();
    report["events"] = result.dataset.event_count();
    report["split_sizes"] = {{"train", splits.train.size()}, {"tune", splits.tune.size()}, {"test", splits.test.size()}};
    write_json(dir / "report.json", report);
    m.output(out(), dir / "report.json");
    finish(m, cfg_.paths.events.empty() ? std::vector<std::string>{"synth"} : std::vector<std::string>{});
  }

  void cohort() {
    require("etl");
    const auto d = load_etl_dataset();
    ManifestBuilder m{"cohort", cfg_.stage_seed("cohort")};
    m.input("etl/events.csv", etl_events());
    const fs::path dir = out() / "cohorts";
    fs::create_directories(dir);
    for (const auto& task : tasks()) {
      m.input("task:" + task.name, cfg_.paths.tasks / (task.name + ".task"));
      CohortOptions opt;
      opt.seed = m.seed;
      opt.threads = cfg_.threads;
      const auto r = build_cohort(d, task, nullptr, opt);
      write_cohort(r.samples, (dir / (task.name + ".csv")).string());
      nlohmann::ordered_json rep;
      rep["task"] = task.name;
      rep["definition"] = serialize_task(task);
      rep["samples"] = r.samples.size();
      rep["positives"] = r.report.positives;
      rep["negatives"] = r.report.negatives;
      rep["subjects_considered"] = r.report.subjects_considered;
      rep["subjects_with_samples"] = r.report.subjects_with_samples;
      rep["unmatched_admissions"] = r.report.unmatched_admissions;
      rep["excluded"] = r.report.excluded;
      rep["warnings"] = r.report.warnings;
      write_json(dir / (task.name + ".json"), rep);
      m.output(out(), dir / (task.name + ".csv"));
      m.output(out(), dir / (task.name + ".json"));
    }
    finish(m, {"etl"});
  }

  fs::path feature_dir(const std::string& task, const std::string& model) const {
    return out() / "features" / task / model;
  }

  void featurize_stage() {
    require("cohort");
    const auto d = load_etl_dataset();
    const auto splits = load_splits();
    ManifestBuilder m{"featurize", cfg_.stage_seed("featurize")};
    m.input("etl/events.csv", etl_events());
    m.input("etl/splits.csv", splits_path());
    std::map<std::string, EmbeddingTable> tables;
    for (const auto& model : cfg_.models)
      if (!is_baseline_model(model)) {
        const fs::path f = cfg_.paths.embeddings / (model + ".csv");
        m.input("embeddings:" + model, f);
        tables.emplace(model, load_embeddings(f.string()));
      }
    for (const auto& task : tasks()) {
      const fs::path cohort_csv = out() / "cohorts" / (task.name + ".csv");
      require_file(cohort_csv, "cohort");
      m.input("cohorts/" + task.name + ".csv", cohort_csv);
      const auto samples = read_cohort(cohort_csv.string());
      std::vector<CohortSample> train, test;
      for (const auto& s : samples) {
        const auto sp = splits.split_of(s.subject_id);
        if (sp == Split::kTrain) train.push_back(s);
        else if (sp == Split::kTest) test.push_back(s);
      }
      auto [train_c, test_c] = cap_samples(train, test, cfg_.train_cap, cfg_.eval_cap,
                                           hash_combine(m.seed, fnv1a64(task.name)));
      for (const auto& model : cfg_.models) {
        const fs::path dir = feature_dir(task.name, model);
        fs::create_directories(dir);
        std::vector<CohortSample> tr = train_c, te = test_c;
        SparseMatrix xtr, xte;
        nlohmann::ordered_json space;
        if (is_baseline_model(model)) {
          const auto fs_ = fit_feature_space(d, cfg_.feature_spec(model), tr);
          xtr = featurize(tr, d, fs_, cfg_.threads);
          xte = featurize(te, d, fs_, cfg_.threads);
          space = fs_.to_json();
        } else {
          const auto& table = tables.at(model);
          nlohmann::ordered_json missing = nlohmann::ordered_json::array();
          auto align = [&](std::vector<CohortSample>& s, const char* part) {
            AlignedEmbeddings a;
            try {
              a = align_embeddings(s, table, cfg_.allow_missing_embeddings);
            } catch (const ValidationError& e) {
              throw ValidationError("task " + task.name + ", model " + model + " (" + part + "): " + e.what() +
                                    "; pass --allow-missing-embeddings to drop them");
            }
            for (auto i : a.missing)
              missing.push_back({{"split", part}, {"subject_id", s[i].subject_id},
                                 {"prediction_time", format_timestamp(s[i].prediction_time)}});
            s = select(s, a.kept);
            return dense_to_sparse(a.matrix);
          };
          xtr = align(tr, "train");
          xte = align(te, "test");
          space = {{"mode", "EMBEDDING"}, {"dim", table.dim()}, {"missing", missing}};
        }
        write_cohort(tr, (dir / "train.samples.csv").string());
        write_cohort(te, (dir / "test.samples.csv").string());
        write_matrix(xtr, (dir / "train.matrix").string());
        write_matrix(xte, (dir / "test.matrix").string());
        write_json(dir / "space.json", space);
        for (const char* f : {"train.samples.csv", "test.samples.csv", "train.matrix", "test.matrix", "space.json"})
          m.output(out(), dir / f);
      }
    }
    finish(m, {"cohort", "etl"});
  }

  static SparseMatrix dense_to_sparse(const DenseMatrix& x) {
    std::vector<std::string> cols;
    for (std::size_t k = 0; k < x.cols(); ++k) cols.push_back("d" + std::to_string(k));
    std::vector<Triplet> t;
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t k = 0; k < x.cols(); ++k) t.push_back({i, k, x(i, k)});
    return SparseMatrix(x.rows(), std::move(cols), std::move(t));
  }

  std::vector<std::string> feature_columns(const fs::path& dir) const {
    const auto j = read_json(dir / "space.json");
    if (j.at("mode") == "EMBEDDING") {
      std::vector<std::string> cols;
      for (std::size_t k = 0; k < j.at("dim").get<std::size_t>(); ++k) cols.push_back("d" + std::to_string(k));
      return cols;
    }
    return FeatureSpace::from_json(j).columns();
  }

  SparseMatrix load_matrix(const fs::path& dir, const char* part) const {
    std::ifstream in(dir / (std::string(part) + ".matrix"), std::ios::binary);
    if (!in) throw MissingPrerequisite("missing " + (dir / part).string() + ".matrix; run `featurize` first");
    return read_matrix(in, feature_columns(dir));
  }

  void probe() {
    require("featurize");
    ManifestBuilder m{"probe", cfg_.stage_seed("probe")};
    for (const auto& task : tasks())
      for (const auto& model : cfg_.models) {
        const fs::path dir = feature_dir(task.name, model);
        require_file(dir / "space.json", "featurize");
        const auto x = load_matrix(dir, "train");
        const auto samples = read_cohort((dir / "train.samples.csv").string());
        m.input(fs::relative(dir / "train.matrix", out()).generic_string(), dir / "train.matrix");
        std::vector<int> y;
        for (const auto& s : samples) y.push_back(s.label);
        const std::size_t k = is_baseline_model(model) ? cfg_.baseline_folds : cfg_.probe_folds;
        nlohmann::ordered_json j;
        j["task"] = task.name;
        j["model"] = model;
        j["folds"] = k;
        try {
          const CsrMatrix csr(x);
          const auto cv = select_lambda(csr, y, cfg_.lambda_grid(), k,
                                        hash_combine(m.seed, fnv1a64(task.name), fnv1a64(model)), cfg_.threads);
          const auto fit = fit_logistic(csr, y, cv.best_lambda, x.columns());
          j["status"] = "fitted";
          j["model_fit"] = model_to_json(fit, x.columns());
          j["cv"] = cv_to_json(cv);
        } catch (const ValidationError& e) {
          j["status"] = "skipped";
          j["reason"] = e.what();
        }
        const fs::path f = out() / "models" / task.name / (model + ".json");
        write_json(f, j);
        m.output(out(), f);
      }
    finish(m, {"featurize"});
  }

  void evaluate_stage() {
    require("probe");
    const auto d = load_etl_dataset();
    ManifestBuilder m{"evaluate", cfg_.stage_seed("evaluate")};
    for (const auto& task : tasks())
      for (const auto& model : cfg_.models) {
        const fs::path dir = feature_dir(task.name, model);
        const fs::path model_file = out() / "models" / task.name / (model + ".json");
        require_file(model_file, "probe");
        m.input(fs::relative(model_file, out()).generic_string(), model_file);
        auto samples = read_cohort((dir / "test.samples.csv").string());
        const auto mj = read_json(model_file);
        EvaluationOptions opt;
        opt.bootstrap_iterations = cfg_.bootstrap_iterations;
        opt.seed = hash_combine(m.seed, fnv1a64(task.name), fnv1a64(model));
        opt.subject_bootstrap = cfg_.subject_bootstrap;
        opt.attributes = cfg_.subgroups;
        opt.threads = cfg_.threads;
        assign_utilization_tertiles(samples, d);
        MetricReport rep;
        if (mj.at("status") == "fitted") {
          const auto x = load_matrix(dir, "test");
          const auto pm = model_from_json(mj.at("model_fit"), x.columns());
          const auto probs = predict_proba(pm, CsrMatrix(x));
          const fs::path pf = out() / "predictions" / task.name / (model + ".csv");
          fs::create_directories(pf.parent_path());
          {
            std::ofstream o(pf, std::ios::binary);
            csv::write_row(o, {"subject_id", "prediction_time", "label", "probability"});
            for (std::size_t i = 0; i < samples.size(); ++i)
              csv::write_row(o, {std::to_string(samples[i].subject_id), format_timestamp(samples[i].prediction_time),
                                 std::to_string(samples[i].label), csv::format_double(probs[i])});
          }
          m.output(out(), pf);
          rep = evaluate(task.name, model, samples, probs, opt);
        } else {
          rep.task = task.name;
          rep.model = model;
          rep.n_eval = samples.size();
          for (const auto& s : samples) rep.prevalence += s.label;
          if (!samples.empty()) rep.prevalence /= static_cast<double>(samples.size());
          rep.warnings.push_back("probe not fitted: " + mj.value("reason", std::string("unknown")));
        }
        const fs::path rf = out() / "reports" / task.name / (model + ".json");
        write_json(rf, to_json(rep));
        m.output(out(), rf);
      }
    finish(m, {"probe"});
  }

  void report() {
    require("evaluate");
    ManifestBuilder m{"report", cfg_.stage_seed("report")};
    std::vector<MetricReport> reports;
    std::vector<std::string> task_names;
    for (const auto& task : tasks()) {
      task_names.push_back(task.name);
      for (const auto& model : cfg_.models) {
        const fs::path rf = out() / "reports" / task.name / (model + ".json");
        require_file(rf, "evaluate");
        m.input(fs::relative(rf, out()).generic_string(), rf);
        reports.push_back(summary_from_json(read_json(rf)));
      }
    }
    auto table = [&](bool auroc_metric) {
      std::ostringstream o;
      std::vector<std::string> header{"task"};
      header.insert(header.end(), cfg_.models.begin(), cfg_.models.end());
      csv::write_row(o, header);
      for (const auto& t : task_names) {
        std::vector<std::string> row{t};
        for (const auto& model : cfg_.models)
          for (const auto& r : reports)
            if (r.task == t && r.model == model) row.push_back(mean_std_cell(auroc_metric ? r.auroc : r.brier));
        csv::write_row(o, row);
      }
      return o.str();
    };
    const fs::path dir = out() / "reports";
    write_file(dir / "auroc.csv", table(true));
    write_file(dir / "brier.csv", table(false));
    const auto ra = average_ranks(reports, true);
    const auto rb = average_ranks(reports, false);
    std::ostringstream lb;
    csv::write_row(lb, {"model", "auroc_avg_rank", "auroc_tasks", "brier_avg_rank", "brier_tasks"});
    std::vector<std::string> order = cfg_.models;
    auto rank_of = [](const auto& ranks, const std::string& model) {
      auto it = ranks.find(model);
      return it == ranks.end() ? std::numeric_limits<double>::infinity() : it->second.first;
    };
    std::stable_sort(order.begin(), order.end(),
                     [&](const auto& a, const auto& b) { return rank_of(ra, a) < rank_of(ra, b); });
    auto cell = [](const auto& ranks, const std::string& model) -> std::pair<std::string, std::string> {
      auto it = ranks.find(model);
      if (it == ranks.end()) return {"NA", "0"};
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.3f", it->second.first);
      return {buf, std::to_string(it->second.second)};
    };
    for (const auto& model : order) {
      auto [a, na] = cell(ra, model);
      auto [b, nb] = cell(rb, model);
      csv::write_row(lb, {model, a, na, b, nb});
    }
    write_file(dir / "leaderboard.csv", lb.str());
    for (const char* f : {"auroc.csv", "brier.csv", "leaderboard.csv"}) m.output(out(), dir / f);
    finish(m, {"evaluate"});
  }

  // Just the headline metrics, enough for tables and ranks.
  static MetricReport summary_from_json(const nlohmann::json& j) {
    MetricReport r;
    r.task = j.at("task");
    r.model = j.at("model");
    r.n_eval = j.at("n_eval");
    r.prevalence = j.at("prevalence");
    auto metric = [](const nlohmann::json& m) {
      MetricSummary s;
      if (!m.at("point").is_null()) s.point = m["point"].get<double>();
      if (!m.at("boot_mean").is_null()) {
        BootstrapResult b;
        b.mean = m["boot_mean"];
        b.std = m["boot_std"];
        b.ci_lo = m["ci95"][0];
        b.ci_hi = m["ci95"][1];
        s.boot = b;
      }
      return s;
    };
    r.auroc = metric(j.at("auroc"));
    r.brier = metric(j.at("brier"));
    return r;
  }
};

}  // namespace cohort_forge
