#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "oracles/fixtures.hpp"
#include "oracles/oracles.hpp"

using namespace cf_test;

namespace {

nlohmann::json small_config(std::size_t n, std::uint64_t seed) {
  auto j = nlohmann::json::parse(R"({
    "n_subjects": 0, "seed": 0,
    "observation_years": [4, 6],
    "utilization_mixture": [{"weight": 0.5, "visits_per_year": 2}, {"weight": 0.5, "visits_per_year": 5}],
    "inpatient_per_year": 0.3,
    "demographics": {"sex": {"F": 0.5, "M": 0.5}, "race": {"A": 0.6, "B": 0.3, "": 0.1}},
    "vocabulary": [{"code": "X/common", "rate": 0.3}, {"code": "X/rare", "rate": 0.02},
                   {"code": "X/risk", "rate": 0.1}],
    "labs": [{"code": "LAB/hb", "rate": 0.2, "mean": 13, "sd": 1.5,
              "units": [{"unit": "g/dL", "scale": 1, "weight": 1}], "missing_rate": 0.1}],
    "planted_tasks": [
      {"task": "pheno", "kind": "phenotype", "base_prevalence": 0.1,
       "risk_codes": [{"code": "X/risk", "coef": 1.5}],
       "at_risk_codes": ["VISIT/outpatient", "VISIT/emergency"],
       "case_events": [{"code": "DX/case", "offset_days": 0}, {"code": "LAB/marker", "offset_days": 3, "value": 9.5}]},
      {"task": "die", "kind": "inpatient_death", "base_prevalence": 0.05,
       "risk_codes": [{"code": "X/risk", "coef": 0.5}]},
      {"task": "stay", "kind": "long_stay", "base_prevalence": 0.3}
    ]})");
  j["n_subjects"] = n;
  j["seed"] = seed;
  return j;
}

GeneratorConfig small(std::size_t n, std::uint64_t seed = 7) {
  return GeneratorConfig::from_json(small_config(n, seed));
}

std::string events_text(const Dataset& d) {
  std::ostringstream out;
  write_events(d, out);
  return out.str();
}

double label_mean(const std::vector<GroundTruthRow>& rows) {
  double s = 0.0;
  for (const auto& r : rows) s += r.label;
  return s / static_cast<double>(rows.size());
}

}  // namespace

TEST(Synthgen, ZeroSubjectsGivesEmptyDataset) {
  auto g = generate(small(0));
  EXPECT_EQ(g.dataset.timelines().size(), 0u);
  for (const auto& [task, rows] : g.truth) EXPECT_TRUE(rows.empty()) << task;
  EXPECT_EQ(g.truth.size(), 3u);
}

TEST(Synthgen, ByteIdenticalAcrossRunsAndThreads) {
  auto a = generate(small(300, 11), 1);
  auto b = generate(small(300, 11), 4);
  EXPECT_EQ(events_text(a.dataset), events_text(b.dataset));
  EXPECT_EQ(a.truth, b.truth);
  EXPECT_EQ(a.intercepts, b.intercepts);
  EXPECT_NE(events_text(generate(small(300, 12)).dataset), events_text(a.dataset));
}

TEST(Synthgen, SubjectsAreNumberedFromOne) {
  auto g = generate(small(50));
  ASSERT_EQ(g.dataset.timelines().size(), 50u);
  SubjectId expect = 1;
  for (const auto& t : g.dataset.timelines()) EXPECT_EQ(t.subject_id, expect++);
}

TEST(Synthgen, PlantedPrevalenceAtTenThousand) {
  auto g = generate(small(10000, 3));
  const auto& rows = g.truth.at("pheno");
  ASSERT_GT(rows.size(), 5000u);
  EXPECT_NEAR(label_mean(rows), 0.10, 0.01);
  // The intercept is fit on a pilot pass whose anchors differ slightly.
  double mean_p = 0.0;
  for (const auto& r : rows) mean_p += sigmoid(r.true_risk);
  EXPECT_NEAR(mean_p / static_cast<double>(rows.size()), 0.10, 0.002);
}

TEST(Synthgen, VocabularyRatesWithinThreeSigma) {
  auto g = generate(small(2000, 5));
  std::map<std::string, double> seen;
  for (const auto& t : g.dataset.timelines())
    for (const auto& e : t.events) seen[e.code] += 1;
  for (const auto& c : small(0).vocabulary) {
    const double n = static_cast<double>(g.visit_count_by_code.at(c.code));
    const double sd = std::sqrt(n * c.rate * (1 - c.rate));
    EXPECT_NEAR(seen[c.code], n * c.rate, 3 * sd) << c.code;
  }
}

TEST(Synthgen, LabelEventsNeverPrecedeAnchor) {
  auto g = generate(small(1500, 9));
  std::map<SubjectId, Timestamp> anchor;
  std::map<SubjectId, int> label;
  for (const auto& r : g.truth.at("pheno")) {
    anchor[r.subject_id] = r.anchor_time;
    label[r.subject_id] = r.label;
  }
  std::size_t cases = 0;
  for (const auto& t : g.dataset.timelines())
    for (const auto& e : t.events)
      if (e.code == "DX/case" || e.code == "LAB/marker") {
        ASSERT_TRUE(anchor.count(t.subject_id));
        EXPECT_EQ(label[t.subject_id], 1);
        EXPECT_GT(e.time, anchor[t.subject_id]);
        cases += e.code == "DX/case";
      }
  std::size_t positives = 0;
  for (const auto& [id, l] : label) positives += l;
  EXPECT_EQ(cases, positives);

  std::map<std::pair<SubjectId, Timestamp>, int> death_label;
  for (const auto& r : g.truth.at("die")) death_label[{r.subject_id, r.anchor_time}] = r.label;
  for (const auto& t : g.dataset.timelines()) {
    Timestamp last_prediction{};
    for (const auto& e : t.events) {
      if (e.code == "VISIT/inpatient-admission") last_prediction = e.time + hours(48);
      if (e.code == "DEATH/death") {
        EXPECT_GT(e.time, last_prediction);
        EXPECT_EQ(death_label.at({t.subject_id, last_prediction}), 1);
        EXPECT_EQ(e.time, t.events.back().time);
      }
    }
  }
}

TEST(Synthgen, LongStayLabelsMatchLengthOfStay) {
  auto g = generate(small(800, 13));
  std::map<std::pair<SubjectId, Timestamp>, int> want;
  for (const auto& r : g.truth.at("stay")) want[{r.subject_id, r.anchor_time}] = r.label;
  std::size_t checked = 0;
  for (const auto& t : g.dataset.timelines()) {
    auto ep = reconstruct_episodes(t);
    for (const auto& e : ep.episodes) {
      auto it = want.find({t.subject_id, e.admission + hours(48)});
      ASSERT_NE(it, want.end());
      EXPECT_EQ(it->second, e.discharge - e.admission > days(7) ? 1 : 0) << t.subject_id;
      ++checked;
    }
  }
  EXPECT_GT(checked, 100u);
}

TEST(Synthgen, OracleBayesAuroc) {
  EXPECT_EQ(oracle_bayes_auroc({{1, {}, 2.0, 1}, {2, {}, 1.0, 0}}), 1.0);
  EXPECT_EQ(oracle_bayes_auroc({{1, {}, 1.0, 1}, {2, {}, 2.0, 0}}), 0.0);
  auto g = generate(small(1000, 17));
  const auto& rows = g.truth.at("pheno");
  std::vector<int> y;
  std::vector<double> s;
  for (const auto& r : rows) {
    y.push_back(r.label);
    s.push_back(r.true_risk);
  }
  EXPECT_NEAR(oracle_bayes_auroc(rows), oracle::pairwise_auroc(y, s), 1e-12);
  EXPECT_GT(oracle_bayes_auroc(rows), 0.5);
}

TEST(Synthgen, GroundTruthRoundTrip) {
  auto g = generate(small(200, 19));
  std::stringstream buf;
  write_ground_truth(g.truth.at("pheno"), buf);
  auto back = read_ground_truth(buf);
  ASSERT_EQ(back.size(), g.truth.at("pheno").size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].subject_id, g.truth.at("pheno")[i].subject_id);
    EXPECT_EQ(back[i].label, g.truth.at("pheno")[i].label);
    EXPECT_NEAR(back[i].true_risk, g.truth.at("pheno")[i].true_risk, 1e-9);
  }
}

TEST(Synthgen, ConfigErrors) {
  auto j = small_config(10, 1);
  j.erase("seed");
  EXPECT_THROW(GeneratorConfig::from_json(j), ValidationError);
  j = small_config(10, 1);
  j["vocabulary"] = nlohmann::json::array();
  EXPECT_THROW(GeneratorConfig::from_json(j), ValidationError);
  j = small_config(10, 1);
  j["utilization_mixture"][0]["weight"] = 0.7;
  EXPECT_THROW(GeneratorConfig::from_json(j), ValidationError);
  j = small_config(10, 1);
  j["planted_tasks"][0]["base_prevalence"] = 1.0;
  EXPECT_THROW(GeneratorConfig::from_json(j), ValidationError);
  j = small_config(10, 1);
  j["planted_tasks"][2]["threshold_days"] = 20;
  EXPECT_THROW(GeneratorConfig::from_json(j), ValidationError);
}

TEST(Synthgen, ShippedConfigLoads) {
  auto c = shipped_generator(5);
  EXPECT_EQ(c.planted.size(), 14u);
  auto g = generate(c);
  EXPECT_EQ(g.dataset.timelines().size(), 5u);
}
