#include <gtest/gtest.h>

#include <sstream>

#include "oracles/fixtures.hpp"
#include "oracles/oracles.hpp"

using namespace cf_test;

namespace {

CohortSample sample(SubjectId id, Timestamp pt, std::optional<double> age = std::nullopt) {
  CohortSample s;
  s.subject_id = id;
  s.prediction_time = pt;
  s.attributes.age = age;
  return s;
}

FeatureSpec counts_all() {
  auto s = FeatureSpec::counts();
  s.min_code_count = 1;
  return s;
}

FeatureSpec windowed_all() {
  auto s = FeatureSpec::windowed();
  s.min_code_count = 1;
  return s;
}

double cell(const SparseMatrix& m, std::size_t row, const std::string& col) {
  auto c = m.column(col);
  EXPECT_TRUE(c) << col;
  return c ? m.at(row, *c).value_or(0.0) : -1.0;
}

bool has_cell(const SparseMatrix& m, std::size_t row, const std::string& col) {
  auto c = m.column(col);
  return c && m.at(row, *c).has_value();
}

// Pairs every sample with a feature space fitted on the shipped 300-subject
// fixture and the readmission cohort.
struct Fixture {
  const Dataset& d = etl_fixture(300);
  std::vector<CohortSample> samples = build_cohort(d, shipped_task("readmission")).samples;
};

}  // namespace

TEST(CountFeatures, CountsHistory) {
  auto d = dataset({ev(1, day(1), "X/A"), ev(1, day(2), "X/A"), ev(1, day(3), "X/B"), ev(1, day(5, 1), "X/C")});
  std::vector<CohortSample> s{sample(1, day(5))};
  auto m = featurize(s, d, fit_feature_space(d, counts_all(), s));
  EXPECT_EQ(cell(m, 0, "X/A"), 2.0);
  EXPECT_EQ(cell(m, 0, "X/B"), 1.0);
  EXPECT_EQ(cell(m, 0, "X/C"), 0.0);
}

TEST(CountFeatures, EventOneSecondLaterIsExcluded) {
  auto d = dataset({ev(1, day(1), "X/A"), ev(1, day(5) + Duration{1}, "X/A")});
  std::vector<CohortSample> s{sample(1, day(5)), sample(1, day(5) + Duration{1})};
  auto m = featurize(s, d, fit_feature_space(d, counts_all(), s));
  EXPECT_EQ(cell(m, 0, "X/A"), 1.0);
  EXPECT_EQ(cell(m, 1, "X/A"), 2.0);
}

TEST(CountFeatures, VocabularyThresholdAndAgeColumn) {
  auto d = dataset({ev(1, day(1), "X/A"), ev(1, day(2), "X/A"), ev(1, day(3), "X/B"), ev(2, day(3), "X/A")});
  std::vector<CohortSample> s{sample(1, day(5), 40.0), sample(2, day(5), 60.0)};
  auto spec = FeatureSpec::counts();
  spec.min_code_count = 2;
  auto space = fit_feature_space(d, spec, s);
  EXPECT_EQ(space.columns(), (std::vector<std::string>{"X/A", "age"}));
  EXPECT_DOUBLE_EQ(space.age_mean, 50.0);
  EXPECT_DOUBLE_EQ(space.age_std, 10.0);
  auto m = featurize(s, d, space);
  EXPECT_DOUBLE_EQ(cell(m, 0, "age"), -1.0);
  EXPECT_DOUBLE_EQ(cell(m, 1, "age"), 1.0);
}

TEST(CountFeatures, EmptyHistoryGivesZeroRow) {
  auto d = dataset({ev(1, day(10), "X/A")});
  std::vector<CohortSample> s{sample(1, day(1))};
  auto m = featurize(s, d, fit_feature_space(d, counts_all(), s));
  ASSERT_EQ(m.nnz(), 1u);
  EXPECT_EQ(m.triplets()[0].col, *m.column("age"));
  EXPECT_EQ(m.triplets()[0].value, 0.0);
}

TEST(CountFeatures, MatchLinearScanOracle) {
  Fixture f;
  auto space = fit_feature_space(f.d, counts_all(), f.samples);
  auto m = featurize(f.samples, f.d, space);
  for (std::size_t r = 0; r < f.samples.size(); ++r) {
    auto want = oracle::scan_counts(*f.d.find(f.samples[r].subject_id), f.samples[r].prediction_time);
    for (const auto& [code, n] : want) ASSERT_EQ(cell(m, r, code), n) << code;
  }
  std::size_t nonzero_codes = 0;
  for (const auto& t : m.triplets()) nonzero_codes += t.col + 1 != m.cols();
  std::size_t expected = 0;
  for (const auto& s : f.samples) expected += oracle::scan_counts(*f.d.find(s.subject_id), s.prediction_time).size();
  EXPECT_EQ(nonzero_codes, expected);
}

TEST(WindowFeatures, WindowedAggregates) {
  auto d = dataset({ev(1, day(90), "LAB/x", 8.0, "u"), ev(1, day(98), "LAB/x", 2.0, "u"), ev(1, day(100), "X/a")});
  std::vector<CohortSample> s{sample(1, day(100))};
  auto m = featurize(s, d, fit_feature_space(d, windowed_all(), s));
  EXPECT_EQ(cell(m, 0, "LAB/x|7d|count"), 1.0);
  EXPECT_EQ(cell(m, 0, "LAB/x|7d|sum"), 2.0);
  EXPECT_EQ(cell(m, 0, "LAB/x|7d|min"), 2.0);
  EXPECT_EQ(cell(m, 0, "LAB/x|7d|max"), 2.0);
  EXPECT_EQ(cell(m, 0, "LAB/x|365d|count"), 2.0);
  EXPECT_EQ(cell(m, 0, "LAB/x|365d|sum"), 10.0);
  EXPECT_EQ(cell(m, 0, "LAB/x|365d|sum_sq"), 68.0);
  EXPECT_EQ(cell(m, 0, "LAB/x|365d|min"), 2.0);
  EXPECT_EQ(cell(m, 0, "LAB/x|365d|max"), 8.0);
  EXPECT_FALSE(has_cell(m, 0, "LAB/x|1d|min"));
  EXPECT_FALSE(m.column("X/a|7d|sum"));
  EXPECT_EQ(cell(m, 0, "X/a|1d|count"), 1.0);
}

TEST(WindowFeatures, WindowBoundaryIsClosed) {
  auto d = dataset({ev(1, day(93), "LAB/x", 4.0, "u")});
  std::vector<CohortSample> s{sample(1, day(100))};
  auto m = featurize(s, d, fit_feature_space(d, windowed_all(), s));
  EXPECT_EQ(cell(m, 0, "LAB/x|7d|count"), 1.0);
  EXPECT_EQ(cell(m, 0, "LAB/x|1d|count"), 0.0);
}

TEST(WindowFeatures, MissingValueCountsOnly) {
  auto missing = ev(1, day(99), "LAB/x");
  missing.value_missing = true;
  auto d = dataset({ev(1, day(98), "LAB/x", 3.0, "u"), missing});
  std::vector<CohortSample> s{sample(1, day(100))};
  auto m = featurize(s, d, fit_feature_space(d, windowed_all(), s));
  EXPECT_EQ(cell(m, 0, "LAB/x|7d|count"), 2.0);
  EXPECT_EQ(cell(m, 0, "LAB/x|7d|sum"), 3.0);
  EXPECT_EQ(cell(m, 0, "LAB/x|1d|count"), 1.0);
  EXPECT_FALSE(has_cell(m, 0, "LAB/x|1d|sum"));
  EXPECT_FALSE(has_cell(m, 0, "LAB/x|1d|max"));
}

TEST(WindowFeatures, FullWindowCountEqualsCountFeatures) {
  Fixture f;
  auto cspace = fit_feature_space(f.d, FeatureSpec::counts(), f.samples);
  auto wspace = fit_feature_space(f.d, FeatureSpec::windowed(), f.samples);
  ASSERT_EQ(cspace.codes, wspace.codes);
  auto cm = featurize(f.samples, f.d, cspace);
  auto wm = featurize(f.samples, f.d, wspace);
  std::vector<std::size_t> full(cspace.codes.size());
  for (std::size_t i = 0; i < cspace.codes.size(); ++i) full[i] = *wm.column(cspace.codes[i] + "|full|count");
  for (std::size_t r = 0; r < f.samples.size(); ++r)
    for (std::size_t i = 0; i < cspace.codes.size(); ++i) ASSERT_EQ(cm.at(r, i), wm.at(r, full[i]));
}

TEST(Features, FutureEventsDoNotChangeMatrix) {
  Fixture f;
  std::vector<Event> all;
  for (const auto& t : f.d.timelines()) all.insert(all.end(), t.events.begin(), t.events.end());
  std::map<SubjectId, Timestamp> last_pt;
  for (const auto& s : f.samples) last_pt[s.subject_id] = std::max(last_pt[s.subject_id], s.prediction_time);
  Rng rng(5);
  const auto codes = fit_feature_space(f.d, FeatureSpec::counts(), f.samples).codes;
  for (const auto& [id, pt] : last_pt)
    for (int k = 0; k < 5; ++k)
      all.push_back(ev(id, pt + Duration{1 + static_cast<std::int64_t>(rng.below(86400 * 30))},
                       codes[rng.below(codes.size())], rng.uniform(0, 100), "mg/dL"));
  auto mutated = Dataset::from_events(all);
  for (auto spec : {FeatureSpec::counts(), FeatureSpec::windowed()}) {
    auto space = fit_feature_space(f.d, spec, f.samples);
    EXPECT_EQ(featurize(f.samples, f.d, space), featurize(f.samples, mutated, space));
  }
}

TEST(Features, StableAcrossRunsAndThreads) {
  Fixture f;
  auto space = fit_feature_space(f.d, FeatureSpec::windowed(), f.samples);
  auto again = fit_feature_space(f.d, FeatureSpec::windowed(), f.samples);
  EXPECT_EQ(space.columns(), again.columns());
  EXPECT_EQ(featurize(f.samples, f.d, space, 1), featurize(f.samples, f.d, again, 4));
  auto restored = FeatureSpace::from_json(nlohmann::json::parse(space.to_json().dump()));
  EXPECT_EQ(restored.columns(), space.columns());
  EXPECT_EQ(featurize(f.samples, f.d, restored), featurize(f.samples, f.d, space));
}

TEST(Features, MatrixFileRoundTrip) {
  Fixture f;
  auto m = featurize(f.samples, f.d, fit_feature_space(f.d, FeatureSpec::windowed(), f.samples));
  std::stringstream buf;
  write_matrix(m, buf);
  EXPECT_EQ(read_matrix(buf, m.columns()), m);
}

TEST(Features, InvalidSpec) {
  auto s = FeatureSpec::windowed();
  s.windows.clear();
  EXPECT_THROW(s.validate(), ValidationError);
  s = FeatureSpec::windowed();
  s.windows.push_back(Duration{0});
  EXPECT_THROW(s.validate(), ValidationError);
}

TEST(Embeddings, ExactJoin) {
  EmbeddingTable table(2);
  table.add(1, day(5), {0.5, -1.0});
  table.add(2, day(7), {2.0, 3.0});
  std::vector<CohortSample> s{sample(2, day(7)), sample(1, day(5))};
  auto a = align_embeddings(s, table);
  ASSERT_EQ(a.matrix.rows(), 2u);
  EXPECT_EQ(a.matrix(0, 0), 2.0);
  EXPECT_EQ(a.matrix(1, 1), -1.0);
}

TEST(Embeddings, OffByOneSecondIsMissing) {
  EmbeddingTable table(1);
  table.add(1, day(5), {1.0});
  std::vector<CohortSample> s{sample(1, day(5) + Duration{1})};
  EXPECT_THROW(align_embeddings(s, table), ValidationError);
  auto a = align_embeddings(s, table, true);
  EXPECT_EQ(a.matrix.rows(), 0u);
  EXPECT_EQ(a.missing, (std::vector<std::size_t>{0}));
}

TEST(Embeddings, PermutedRowsGiveSameMatrix) {
  std::vector<std::string> lines;
  std::vector<CohortSample> s;
  for (int i = 0; i < 30; ++i) {
    s.push_back(sample(100 + i, day(i)));
    lines.push_back(std::to_string(100 + i) + "," + format_timestamp(day(i)) + "," + std::to_string(i * 0.5) + "," +
                    std::to_string(-i));
  }
  auto load = [&](const std::vector<std::string>& rows) {
    std::string text = "subject_id,prediction_time,d0,d1\n";
    for (const auto& r : rows) text += r + "\n";
    std::istringstream in(text);
    return read_embeddings(in, 2);
  };
  auto a = align_embeddings(s, load(lines));
  Rng rng(8);
  for (std::size_t i = lines.size() - 1; i > 0; --i) std::swap(lines[i], lines[rng.below(i + 1)]);
  auto b = align_embeddings(s, load(lines));
  for (std::size_t r = 0; r < s.size(); ++r) {
    EXPECT_EQ(a.matrix(r, 0), b.matrix(r, 0));
    EXPECT_EQ(a.matrix(r, 1), b.matrix(r, 1));
    EXPECT_EQ(a.matrix(r, 0), 0.5 * r);
  }
}

TEST(Embeddings, TableErrors) {
  EmbeddingTable table(2);
  EXPECT_THROW(table.add(1, day(0), {1.0}), ValidationError);
  table.add(1, day(0), {1.0, 2.0});
  EXPECT_THROW(table.add(1, day(0), {1.0, 2.0}), ValidationError);
  EXPECT_THROW(EmbeddingTable(0), ValidationError);
}

TEST(Caps, TrainAndEvalCaps) {
  EXPECT_EQ(kTrainCap, 100000u);
  EXPECT_EQ(kEvalCap, 50000u);
  std::vector<CohortSample> train, eval;
  for (SubjectId i = 0; i < 120000; ++i) train.push_back(sample(i, day(i % 1000)));
  for (SubjectId i = 0; i < 40000; ++i) eval.push_back(sample(500000 + i, day(i % 1000)));
  auto [t, e] = cap_samples(train, eval, kTrainCap, kEvalCap, 11);
  EXPECT_EQ(t.size(), 100000u);
  EXPECT_EQ(e, eval);
  auto [t2, e2] = cap_samples(train, eval, kTrainCap, kEvalCap, 11);
  EXPECT_EQ(t, t2);
  auto [t3, e3] = cap_samples(train, eval, kTrainCap, kEvalCap, 12);
  EXPECT_NE(t, t3);
  std::set<SubjectId> ids;
  for (const auto& x : t) ids.insert(x.subject_id);
  EXPECT_EQ(ids.size(), 100000u);
}

TEST(Caps, PreservesPrevalenceInExpectation) {
  std::vector<CohortSample> train;
  for (SubjectId i = 0; i < 20000; ++i) {
    train.push_back(sample(i, day(0)));
    train.back().label = i % 10 == 0;
  }
  double mean = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto kept = select(train, cap_indices(train, 5000, seed));
    double pos = 0.0;
    for (const auto& x : kept) pos += x.label;
    mean += pos / 5000.0 / 20.0;
  }
  EXPECT_NEAR(mean, 0.1, 0.005);
}
