#pragma once

// Shared builders for unit and acceptance tests.

#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "cohort_forge.hpp"

namespace cf_test {

using namespace cohort_forge;
namespace fs = std::filesystem;

inline fs::path source_path(const std::string& rel) { return fs::path(COHORT_FORGE_SOURCE_DIR) / rel; }

inline const Timestamp kEpoch = make_timestamp(2010, 1, 1);

// Midnight of day `d` counted from 2010-01-01, plus optional hours.
inline Timestamp day(std::int64_t d, std::int64_t h = 0) { return kEpoch + days(d) + hours(h); }

inline Event ev(SubjectId id, Timestamp t, std::string code, std::optional<double> value = std::nullopt,
                std::optional<std::string> unit = std::nullopt) {
  Event e;
  e.subject_id = id;
  e.time = t;
  e.code = std::move(code);
  e.numeric_value = value;
  e.unit = std::move(unit);
  return e;
}

inline Event birth(SubjectId id, Timestamp t, const std::string& date) {
  Event e = ev(id, t, "DEMO/birth");
  e.text_value = date;
  return e;
}

inline SubjectTimeline timeline(std::vector<Event> events) {
  SubjectTimeline t;
  t.subject_id = events.empty() ? 0 : events.front().subject_id;
  std::sort(events.begin(), events.end());
  t.events = std::move(events);
  return t;
}

inline Dataset dataset(std::vector<Event> events) { return Dataset::from_events(std::move(events)); }

inline std::vector<TaskDefinition> shipped_tasks() {
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(source_path("configs/tasks")))
    if (e.path().extension() == ".task") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<TaskDefinition> out;
  for (const auto& f : files) out.push_back(load_task(f.string()));
  return out;
}

inline TaskDefinition shipped_task(const std::string& name) {
  return load_task(source_path("configs/tasks/" + name + ".task").string());
}

inline GeneratorConfig shipped_generator(std::size_t n_subjects) {
  auto c = GeneratorConfig::load(source_path("configs/synth.json").string());
  c.n_subjects = n_subjects;
  return c;
}

inline EtlResult standardize_generated(const Dataset& raw) {
  return run_etl(raw, load_gem(source_path("data/gem.csv").string()),
                 load_unit_factors(source_path("data/unit_factors.csv").string()));
}

// Standardized shipped-config synthetic data, memoized per size.
inline const Dataset& etl_fixture(std::size_t n_subjects) {
  static std::mutex mu;
  static std::map<std::size_t, Dataset> cache;
  std::lock_guard lock(mu);
  auto it = cache.find(n_subjects);
  if (it == cache.end()) {
    auto raw = generate(shipped_generator(n_subjects));
    it = cache.emplace(n_subjects, standardize_generated(raw.dataset).dataset).first;
  }
  return it->second;
}

// Fresh scratch directory under the system temp dir.
inline fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("cohort_forge_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace cf_test
