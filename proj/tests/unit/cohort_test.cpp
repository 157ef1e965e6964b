#include <gtest/gtest.h>

#include <sstream>

#include "oracles/cohort_oracle.hpp"
#include "oracles/fixtures.hpp"

using namespace cf_test;

namespace {

constexpr std::uint64_t kSeed = 42;

// Three years of history before day 1100.
std::vector<Event> history(SubjectId id) {
  return {birth(id, day(0), "1960-05-01"), ev(id, day(0), "DEMO/sex=F"), ev(id, day(0), "ICD10CM/Z00.0"),
          ev(id, day(500), "VISIT/outpatient")};
}

std::vector<Event> with(std::vector<Event> base, std::initializer_list<Event> more) {
  base.insert(base.end(), more.begin(), more.end());
  return base;
}

const char* kPhenotype =
    "name = toy\n"
    "kind = phenotype\n"
    "trigger = CODE_IN[VISIT/outpatient]\n"
    "min_prior_observation = 0d\n"
    "require_data_in_observation = true\n"
    "at_risk = CODE_IN[ICD10CM/R10]\n"
    "case = CODE_IN[ICD10CM/K90.0]\n"
    "prediction_horizon = 365d\n"
    "exclusions = [CASE_BEFORE_AT_RISK]\n";

std::set<SubjectId> subjects_of(const std::vector<CohortSample>& s) {
  std::set<SubjectId> out;
  for (const auto& x : s) out.insert(x.subject_id);
  return out;
}

}  // namespace

TEST(Washout, GreedyLeftToRight) {
  EXPECT_EQ(apply_washout({day(0), day(90), day(200)}, days(180)), (TimeSet{day(0), day(200)}));
  EXPECT_EQ(apply_washout({day(7)}, days(180)), (TimeSet{day(7)}));
  EXPECT_TRUE(apply_washout({}, days(180)).empty());
  EXPECT_EQ(apply_washout({day(0), day(180), day(359)}, days(180)), (TimeSet{day(0), day(180)}));
}

TEST(Episodes, PairsAdmissionsWithDischarges) {
  auto t = timeline({ev(1, day(0), "VISIT/inpatient-admission"), ev(1, day(3), "VISIT/inpatient-discharge"),
                     ev(1, day(3), "VISIT/inpatient-admission"), ev(1, day(9), "VISIT/inpatient-discharge"),
                     ev(1, day(20), "VISIT/inpatient-admission")});
  auto r = reconstruct_episodes(t);
  ASSERT_EQ(r.episodes.size(), 2u);
  EXPECT_EQ(r.episodes[0], (Episode{day(0), day(3)}));
  EXPECT_EQ(r.episodes[1], (Episode{day(3), day(9)}));
  EXPECT_EQ(r.unmatched_admissions, 1u);
}

TEST(OutcomeCohort, ShortStayAliveIsNegativeForDeathAndLongStay) {
  auto d = dataset(with(history(1), {ev(1, day(1100), "VISIT/inpatient-admission"),
                                     ev(1, day(1105), "VISIT/inpatient-discharge")}));
  auto death = build_cohort(d, shipped_task("death"));
  ASSERT_EQ(death.samples.size(), 1u);
  EXPECT_EQ(death.samples[0].prediction_time, day(1102));
  EXPECT_EQ(death.samples[0].label, 0);
  auto los = build_cohort(d, shipped_task("long_los"));
  ASSERT_EQ(los.samples.size(), 1u);
  EXPECT_EQ(los.samples[0].prediction_time, day(1102));
  EXPECT_EQ(los.samples[0].label, 0);
}

TEST(OutcomeCohort, LongStayAndInHospitalDeathArePositive) {
  auto d = dataset(with(history(1), {ev(1, day(1100), "VISIT/inpatient-admission"), ev(1, day(1110), "DEATH/death"),
                                     ev(1, day(1110), "VISIT/inpatient-discharge")}));
  EXPECT_EQ(build_cohort(d, shipped_task("death")).samples.at(0).label, 1);
  EXPECT_EQ(build_cohort(d, shipped_task("long_los")).samples.at(0).label, 1);
}

TEST(OutcomeCohort, StayEndingBeforeOffsetIsSkipped) {
  auto d = dataset(with(history(1), {ev(1, day(1100), "VISIT/inpatient-admission"),
                                     ev(1, day(1101), "VISIT/inpatient-discharge")}));
  auto r = build_cohort(d, shipped_task("death"));
  EXPECT_TRUE(r.samples.empty());
  EXPECT_EQ(r.report.excluded.at("episode_ends_before_prediction"), 1u);
}

TEST(OutcomeCohort, InsufficientPriorObservation) {
  auto d = dataset({ev(1, day(1000), "ICD10CM/Z00.0"), ev(1, day(1100), "VISIT/inpatient-admission"),
                    ev(1, day(1110), "VISIT/inpatient-discharge")});
  EXPECT_TRUE(build_cohort(d, shipped_task("death")).samples.empty());
}

TEST(OutcomeCohort, SameDayReadmissionIsExcluded) {
  auto d = dataset(with(history(1), {ev(1, day(1097), "VISIT/inpatient-admission"),
                                     ev(1, day(1100, 10), "VISIT/inpatient-discharge"),
                                     ev(1, day(1100, 18), "VISIT/inpatient-admission"),
                                     ev(1, day(1104), "VISIT/inpatient-discharge"),
                                     ev(1, day(1400), "VISIT/outpatient")}));
  auto r = build_cohort(d, shipped_task("readmission"));
  for (const auto& s : r.samples) EXPECT_NE(s.prediction_time, day(1100, 10));
  EXPECT_EQ(r.report.excluded.at("same_day_outcome"), 1u);
  ASSERT_EQ(r.samples.size(), 1u);
  EXPECT_EQ(r.samples[0].prediction_time, day(1104));
  EXPECT_EQ(r.samples[0].label, 0);
}

TEST(OutcomeCohort, ReadmissionWithinThirtyDaysIsPositive) {
  auto d = dataset(with(history(1), {ev(1, day(1097), "VISIT/inpatient-admission"),
                                     ev(1, day(1100), "VISIT/inpatient-discharge"),
                                     ev(1, day(1120), "VISIT/inpatient-admission"),
                                     ev(1, day(1124), "VISIT/inpatient-discharge"),
                                     ev(1, day(1400), "VISIT/outpatient")}));
  auto r = build_cohort(d, shipped_task("readmission"));
  ASSERT_EQ(r.samples.size(), 2u);
  EXPECT_EQ(r.samples[0].label, 1);
  EXPECT_EQ(r.samples[1].label, 0);
}

TEST(OutcomeCohort, CensoredWithinThirtyDaysIsExcluded) {
  auto d = dataset(with(history(1), {ev(1, day(1097), "VISIT/inpatient-admission"),
                                     ev(1, day(1100), "VISIT/inpatient-discharge"),
                                     ev(1, day(1110), "VISIT/outpatient")}));
  auto r = build_cohort(d, shipped_task("readmission"));
  EXPECT_TRUE(r.samples.empty());
  EXPECT_EQ(r.report.excluded.at("censored"), 1u);
}

TEST(PhenotypeCohort, CaseBeforeAtRiskExcludesSubject) {
  auto task = parse_task(kPhenotype);
  auto d = dataset({ev(1, day(0), "ICD10CM/Z00.0"), ev(1, day(50), "ICD10CM/K90.0"), ev(1, day(100), "ICD10CM/R10"),
                    ev(1, day(120), "VISIT/outpatient"), ev(1, day(200), "VISIT/outpatient")});
  auto r = build_cohort(d, task);
  EXPECT_TRUE(r.samples.empty());
  EXPECT_EQ(r.report.excluded.at("case_before_at_risk"), 1u);
}

TEST(PhenotypeCohort, CaseIndexIsLatestEncounterWithinYear) {
  auto task = parse_task(kPhenotype);
  auto d = dataset({ev(1, day(0), "ICD10CM/Z00.0"), ev(1, day(100), "ICD10CM/R10"), ev(1, day(120), "VISIT/outpatient"),
                    ev(1, day(300), "VISIT/outpatient"), ev(1, day(400), "ICD10CM/K90.0"),
                    ev(1, day(400), "VISIT/outpatient")});
  auto r = build_cohort(d, task);
  ASSERT_EQ(r.samples.size(), 1u);
  EXPECT_EQ(r.samples[0].prediction_time, day(300));
  EXPECT_EQ(r.samples[0].label, 1);
}

TEST(PhenotypeCohort, ControlIndexIsSeededChoice) {
  auto task = parse_task(kPhenotype);
  std::vector<Event> events{ev(1, day(0), "ICD10CM/Z00.0"), ev(1, day(10), "ICD10CM/R10")};
  for (int k = 1; k <= 8; ++k) events.push_back(ev(1, day(10 + 30 * k), "VISIT/outpatient"));
  auto d = dataset(events);
  CohortOptions opt;
  opt.seed = kSeed;
  auto r = build_cohort(d, task, nullptr, opt);
  ASSERT_EQ(r.samples.size(), 1u);
  EXPECT_EQ(r.samples[0].label, 0);
  const std::size_t pick = choose_control(8, kSeed, "toy", 1);
  EXPECT_EQ(r.samples[0].prediction_time, day(10 + 30 * static_cast<std::int64_t>(pick + 1)));
  EXPECT_EQ(build_cohort(d, task, nullptr, opt).samples, r.samples);
}

TEST(CohortReport, AbsentVocabularyAndSingleClassWarn) {
  auto task = parse_task(std::string(kPhenotype).replace(std::string(kPhenotype).find("ICD10CM/K90.0"), 13, "SNOMED/1"));
  auto d = dataset({ev(1, day(0), "ICD10CM/Z00.0"), ev(1, day(10), "ICD10CM/R10"), ev(1, day(40), "VISIT/outpatient")});
  auto r = build_cohort(d, task);
  EXPECT_TRUE(r.report.single_class);
  bool vocab = false;
  for (const auto& w : r.report.warnings) vocab = vocab || w.find("SNOMED") != std::string::npos;
  EXPECT_TRUE(vocab);
}

TEST(CohortFile, RoundTrip) {
  auto r = build_cohort(etl_fixture(300), shipped_task("readmission"));
  ASSERT_FALSE(r.samples.empty());
  std::stringstream buf;
  write_cohort(r.samples, buf);
  EXPECT_EQ(read_cohort(buf), r.samples);
}

TEST(CohortEngine, MatchesBruteForceOracleOnFixture) {
  const auto& d = etl_fixture(1000);
  CohortOptions opt;
  opt.seed = kSeed;
  for (const auto& task : shipped_tasks()) {
    auto got = oracle::triples(build_cohort(d, task, nullptr, opt).samples);
    auto want = oracle::cohort(d, task, kSeed);
    EXPECT_FALSE(want.empty()) << task.name;
    EXPECT_EQ(got, want) << task.name;
  }
}

TEST(CohortEngine, SamplesBelongToSplit) {
  const auto& d = etl_fixture(300);
  auto split = split_subjects(d, {}, 3);
  for (const auto* part : {&split.train, &split.tune, &split.test})
    for (const auto& task : shipped_tasks())
      for (const auto& s : build_cohort(d, task, part).samples) ASSERT_TRUE(part->count(s.subject_id));
}

TEST(CohortEngine, LargerMinPriorNeverAddsSamples) {
  const auto& d = etl_fixture(300);
  for (auto task : shipped_tasks()) {
    auto base = build_cohort(d, task).samples;
    task.min_prior_observation += days(365);
    auto stricter = build_cohort(d, task).samples;
    EXPECT_LE(stricter.size(), base.size()) << task.name;
    auto a = subjects_of(base);
    for (auto id : subjects_of(stricter)) EXPECT_TRUE(a.count(id)) << task.name;
    if (task.kind == TaskKind::kOutcome) {
      auto ta = oracle::triples(base);
      for (const auto& x : oracle::triples(stricter))
        EXPECT_TRUE(std::binary_search(ta.begin(), ta.end(), x)) << task.name;
    }
  }
}

TEST(CohortEngine, InvariantUnderRowPermutation) {
  const auto& d = etl_fixture(200);
  std::vector<Event> all;
  for (const auto& t : d.timelines()) all.insert(all.end(), t.events.begin(), t.events.end());
  Rng rng(9);
  for (std::size_t i = all.size() - 1; i > 0; --i) std::swap(all[i], all[rng.below(i + 1)]);
  auto shuffled = Dataset::from_events(all);
  ASSERT_EQ(shuffled, d);
  for (const auto& task : shipped_tasks())
    EXPECT_EQ(build_cohort(shuffled, task).samples, build_cohort(d, task).samples) << task.name;
}

TEST(CohortEngine, ThreadCountDoesNotMatter) {
  const auto& d = etl_fixture(300);
  CohortOptions four;
  four.threads = 4;
  for (const auto& task : shipped_tasks())
    EXPECT_EQ(build_cohort(d, task, nullptr, four).samples, build_cohort(d, task).samples) << task.name;
}

TEST(CohortEngine, LabelsIgnoreHistory) {
  const auto& d = etl_fixture(300);
  for (const auto& task : shipped_tasks()) {
    for (const auto& s : build_cohort(d, task).samples) {
      const auto& t = *d.find(s.subject_id);
      const EvalContext ctx{demographics_of(t).birth_date};
      SubjectTimeline future{t.subject_id, {}};
      for (const auto& e : t.events)
        if (e.time > s.prediction_time) future.events.push_back(e);
      ASSERT_EQ(compute_label(future, task, s.prediction_time, ctx), s.label) << task.name;
    }
  }
}

TEST(CohortEngine, PriorObservationHolds) {
  const auto& d = etl_fixture(300);
  for (const auto& task : shipped_tasks())
    for (const auto& s : build_cohort(d, task).samples)
      ASSERT_GE(s.prediction_time - d.find(s.subject_id)->observation_start(), task.min_prior_observation);
}
