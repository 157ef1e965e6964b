#pragma once

// Design matrices for cohort samples.
//
// Featurization is split in two: `fit_feature_space` fixes the column
// dictionary and the age normalization, `featurize` fills rows for any set
// of samples. A sample only ever sees events with time <= its prediction
// time.

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "cohort_forge/cohort.hpp"
#include "cohort_forge/csv.hpp"
#include "cohort_forge/error.hpp"
#include "cohort_forge/event_store.hpp"
#include "cohort_forge/matrix.hpp"
#include "cohort_forge/parallel.hpp"
#include "cohort_forge/random.hpp"
#include "cohort_forge/time.hpp"

namespace cohort_forge {

enum class FeatureMode { kCount, kWindowed, kEmbedding };

enum class Aggregation { kCount, kSum, kSumSq, kMin, kMax };

inline std::string_view aggregation_name(Aggregation a) {
  switch (a) {
    case Aggregation::kCount: return "count";
    case Aggregation::kSum: return "sum";
    case Aggregation::kSumSq: return "sum_sq";
    case Aggregation::kMin: return "min";
    case Aggregation::kMax: return "max";
  }
  return {};
}

inline Aggregation parse_aggregation(std::string_view s) {
  for (auto a : {Aggregation::kCount, Aggregation::kSum, Aggregation::kSumSq, Aggregation::kMin,
                 Aggregation::kMax})
    if (aggregation_name(a) == s) return a;
  throw ValidationError("unknown aggregation '" + std::string(s) + "'");
}

inline std::string_view mode_name(FeatureMode m) {
  switch (m) {
    case FeatureMode::kCount: return "COUNT";
    case FeatureMode::kWindowed: return "WINDOWED";
    case FeatureMode::kEmbedding: return "EMBEDDING";
  }
  return {};
}

struct FeatureSpec {
  FeatureMode mode = FeatureMode::kCount;
  std::vector<Duration> windows;  // WINDOWED; the full history is always added
  std::vector<Aggregation> aggregations;
  int min_code_count = 10;
  bool include_demographics = false;

  static FeatureSpec counts() { return {}; }
  static FeatureSpec windowed() {
    return {FeatureMode::kWindowed,
            {days(1), days(7), days(30), days(365)},
            {Aggregation::kCount, Aggregation::kSum, Aggregation::kSumSq, Aggregation::kMin,
             Aggregation::kMax},
            10,
            false};
  }

  void validate() const {
    if (min_code_count < 0) throw ValidationError("min_code_count must be >= 0");
    if (mode == FeatureMode::kWindowed && (windows.empty() || aggregations.empty()))
      throw ValidationError("windowed features need windows and aggregations");
    for (auto w : windows)
      if (w.count() <= 0) throw ValidationError("feature windows must be positive");
  }
};

// Code an event contributes to the vocabulary. Demographic indicators such
// as "DEMO/sex=F" only count when enabled; the birth date never does.
inline std::optional<std::string> feature_token(const Event& e, bool include_demographics) {
  if (!e.is_demographic()) return e.code;
  if (!include_demographics || e.code == kBirthCode) return std::nullopt;
  return e.code;
}

inline constexpr std::string_view kAgeColumn = "age";

// Fitted column dictionary plus normalization constants.
struct FeatureSpace {
  FeatureSpec spec;
  std::vector<std::string> codes;        // sorted
  std::set<std::string> numeric_codes;   // subset of codes with observed values
  double age_mean = 0.0;
  double age_std = 1.0;

  std::vector<std::string> columns() const {
    std::vector<std::string> out;
    if (spec.mode == FeatureMode::kCount) {
      out = codes;
    } else {
      for (const auto& c : codes) {
        const bool numeric = numeric_codes.count(c) > 0;
        for (std::size_t w = 0; w <= spec.windows.size(); ++w) {
          const std::string win = w < spec.windows.size() ? format_duration(spec.windows[w]) : "full";
          for (auto a : spec.aggregations) {
            if (a != Aggregation::kCount && !numeric) continue;
            out.push_back(c + "|" + win + "|" + std::string(aggregation_name(a)));
          }
        }
      }
    }
    out.emplace_back(kAgeColumn);
    return out;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["mode"] = mode_name(spec.mode);
    j["windows"] = nlohmann::json::array();
    for (auto w : spec.windows) j["windows"].push_back(format_duration(w));
    j["aggregations"] = nlohmann::json::array();
    for (auto a : spec.aggregations) j["aggregations"].push_back(aggregation_name(a));
    j["min_code_count"] = spec.min_code_count;
    j["include_demographics"] = spec.include_demographics;
    j["codes"] = codes;
    j["numeric_codes"] = numeric_codes;
    j["age_mean"] = age_mean;
    j["age_std"] = age_std;
    return j;
  }

  static FeatureSpace from_json(const nlohmann::json& j) {
    FeatureSpace s;
    const std::string mode = j.at("mode");
    if (mode == "COUNT") s.spec.mode = FeatureMode::kCount;
    else if (mode == "WINDOWED") s.spec.mode = FeatureMode::kWindowed;
    else throw ValidationError("unknown feature mode " + mode);
    for (const auto& w : j.at("windows")) s.spec.windows.push_back(parse_duration(w.get<std::string>()));
    for (const auto& a : j.at("aggregations")) s.spec.aggregations.push_back(parse_aggregation(a.get<std::string>()));
    s.spec.min_code_count = j.at("min_code_count");
    s.spec.include_demographics = j.at("include_demographics");
    s.codes = j.at("codes").get<std::vector<std::string>>();
    s.numeric_codes = j.at("numeric_codes").get<std::set<std::string>>();
    s.age_mean = j.at("age_mean");
    s.age_std = j.at("age_std");
    return s;
  }
};

// Vocabulary from dataset-wide code counts; age statistics from the training
// samples (population standard deviation, 1 when degenerate).
inline FeatureSpace fit_feature_space(const Dataset& d, const FeatureSpec& spec,
                                      const std::vector<CohortSample>& train) {
  spec.validate();
  if (spec.mode == FeatureMode::kEmbedding)
    throw ValidationError("embedding features are aligned, not fitted");
  std::map<std::string, long long> counts;
  std::set<std::string> numeric;
  for (const auto& t : d.timelines())
    for (const auto& e : t.events)
      if (auto tok = feature_token(e, spec.include_demographics)) {
        ++counts[*tok];
        if (e.numeric_value && !e.value_missing) numeric.insert(*tok);
      }
  FeatureSpace s;
  s.spec = spec;
  for (const auto& [code, n] : counts)
    if (n >= spec.min_code_count) {
      s.codes.push_back(code);
      if (numeric.count(code)) s.numeric_codes.insert(code);
    }
  double sum = 0.0;
  double sq = 0.0;
  std::size_t n = 0;
  for (const auto& x : train)
    if (x.attributes.age) {
      sum += *x.attributes.age;
      ++n;
    }
  if (n > 0) {
    s.age_mean = sum / static_cast<double>(n);
    for (const auto& x : train)
      if (x.attributes.age) sq += (*x.attributes.age - s.age_mean) * (*x.attributes.age - s.age_mean);
    const double sd = std::sqrt(sq / static_cast<double>(n));
    s.age_std = sd > 0.0 ? sd : 1.0;
  }
  return s;
}

namespace detail {

struct WindowAcc {
  double count = 0.0;
  double sum = 0.0;
  double sum_sq = 0.0;
  double min = 0.0;
  double max = 0.0;
  std::size_t values = 0;

  void add(const Event& e) {
    count += 1.0;
    if (!e.numeric_value || e.value_missing) return;
    const double v = *e.numeric_value;
    sum += v;
    sum_sq += v * v;
    if (values == 0 || v < min) min = v;
    if (values == 0 || v > max) max = v;
    ++values;
  }
};

}  // namespace detail

// One row per sample, in sample order.
inline SparseMatrix featurize(const std::vector<CohortSample>& samples, const Dataset& d,
                              const FeatureSpace& space, unsigned threads = 1) {
  const auto columns = space.columns();
  std::unordered_map<std::string, std::size_t> code_index;
  for (std::size_t i = 0; i < space.codes.size(); ++i) code_index.emplace(space.codes[i], i);
  const bool windowed = space.spec.mode == FeatureMode::kWindowed;
  const std::size_t n_windows = space.spec.windows.size() + 1;

  // First column of each code's block in the windowed layout.
  std::vector<std::size_t> block_start(space.codes.size(), 0);
  if (windowed) {
    std::size_t col = 0;
    for (std::size_t i = 0; i < space.codes.size(); ++i) {
      block_start[i] = col;
      const bool numeric = space.numeric_codes.count(space.codes[i]) > 0;
      std::size_t per_window = 0;
      for (auto a : space.spec.aggregations)
        if (a == Aggregation::kCount || numeric) ++per_window;
      col += per_window * n_windows;
    }
  }
  const std::size_t age_col = columns.size() - 1;

  std::vector<std::vector<Triplet>> rows(samples.size());
  parallel_for(samples.size(), threads, [&](std::size_t r) {
    const auto& s = samples[r];
    const SubjectTimeline* t = d.find(s.subject_id);
    if (!t) throw ValidationError("sample subject " + std::to_string(s.subject_id) + " not in dataset");
    const std::size_t visible = t->visible_count(s.prediction_time);
    auto& out = rows[r];
    if (!windowed) {
      std::map<std::size_t, double> counts;
      for (std::size_t k = 0; k < visible; ++k)
        if (auto tok = feature_token(t->events[k], space.spec.include_demographics))
          if (auto it = code_index.find(*tok); it != code_index.end()) counts[it->second] += 1.0;
      for (const auto& [c, v] : counts) out.push_back({r, c, v});
    } else {
      std::map<std::size_t, std::vector<detail::WindowAcc>> acc;
      for (std::size_t k = 0; k < visible; ++k) {
        const Event& e = t->events[k];
        auto tok = feature_token(e, space.spec.include_demographics);
        if (!tok) continue;
        auto it = code_index.find(*tok);
        if (it == code_index.end()) continue;
        auto& a = acc[it->second];
        if (a.empty()) a.resize(n_windows);
        const Duration age = s.prediction_time - e.time;
        for (std::size_t w = 0; w < space.spec.windows.size(); ++w)
          if (age <= space.spec.windows[w]) a[w].add(e);
        a[n_windows - 1].add(e);
      }
      for (const auto& [c, a] : acc) {
        const bool numeric = space.numeric_codes.count(space.codes[c]) > 0;
        std::size_t col = block_start[c];
        for (std::size_t w = 0; w < n_windows; ++w) {
          for (auto agg : space.spec.aggregations) {
            if (agg != Aggregation::kCount && !numeric) continue;
            const auto& x = a[w];
            switch (agg) {
              case Aggregation::kCount:
                if (x.count > 0) out.push_back({r, col, x.count});
                break;
              case Aggregation::kSum:
                if (x.values) out.push_back({r, col, x.sum});
                break;
              case Aggregation::kSumSq:
                if (x.values) out.push_back({r, col, x.sum_sq});
                break;
              case Aggregation::kMin:
                if (x.values) out.push_back({r, col, x.min});
                break;
              case Aggregation::kMax:
                if (x.values) out.push_back({r, col, x.max});
                break;
            }
            ++col;
          }
        }
      }
    }
    const double z = s.attributes.age ? (*s.attributes.age - space.age_mean) / space.age_std : 0.0;
    out.push_back({r, age_col, z});
  });

  std::vector<Triplet> all;
  for (auto& r : rows) all.insert(all.end(), r.begin(), r.end());
  return SparseMatrix(samples.size(), columns, std::move(all));
}

// ---------------------------------------------------------------------------
// Externally computed embeddings.

class EmbeddingTable {
 public:
  using Key = std::pair<SubjectId, Timestamp>;

  explicit EmbeddingTable(std::size_t dim) : dim_(dim) {
    if (dim == 0) throw ValidationError("embedding dimension must be positive");
  }

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return rows_.size(); }

  void add(SubjectId id, Timestamp t, std::vector<double> v) {
    if (v.size() != dim_) throw ValidationError("embedding row has wrong dimension");
    for (double x : v)
      if (!std::isfinite(x)) throw ValidationError("non-finite embedding value");
    if (!rows_.emplace(Key{id, t}, std::move(v)).second)
      throw ValidationError("duplicate embedding for subject " + std::to_string(id) + " at " +
                            format_timestamp(t));
  }

  const std::vector<double>* find(SubjectId id, Timestamp t) const {
    auto it = rows_.find({id, t});
    return it == rows_.end() ? nullptr : &it->second;
  }

 private:
  std::size_t dim_;
  std::map<Key, std::vector<double>> rows_;
};

// CSV `subject_id,prediction_time,d0..d{D-1}`; D is read from a sidecar JSON
// `{"dim": D}` at `<path>.json`.
inline EmbeddingTable read_embeddings(std::istream& in, std::size_t dim) {
  EmbeddingTable table(dim);
  csv::Reader reader(in);
  std::vector<std::string> row;
  if (!reader.next(row) || row.size() != dim + 2 || row[0] != "subject_id" || row[1] != "prediction_time")
    throw ParseError("embedding header must be subject_id,prediction_time,d0..d" + std::to_string(dim - 1), 1);
  for (std::size_t k = 0; k < dim; ++k)
    if (row[k + 2] != "d" + std::to_string(k)) throw ParseError("bad embedding column " + row[k + 2], 1);
  while (reader.next(row)) {
    if (row.size() == 1 && row[0].empty()) continue;
    if (row.size() != dim + 2) throw ParseError("embedding row has wrong width", reader.line());
    auto id = csv::parse_int(row[0]);
    auto t = parse_timestamp(row[1]);
    if (!id || !t) throw ParseError("bad embedding key", reader.line());
    std::vector<double> v(dim);
    for (std::size_t k = 0; k < dim; ++k) {
      auto x = csv::parse_double(row[k + 2]);
      if (!x) throw ParseError("bad embedding value", reader.line());
      v[k] = *x;
    }
    try {
      table.add(*id, *t, std::move(v));
    } catch (const ValidationError& e) {
      throw ParseError(e.what(), reader.line());
    }
  }
  return table;
}

inline EmbeddingTable load_embeddings(const std::string& path) {
  std::ifstream side(path + ".json");
  if (!side) throw ValidationError("missing embedding sidecar " + path + ".json");
  nlohmann::json meta;
  try {
    side >> meta;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("bad embedding sidecar " + path + ".json: " + e.what());
  }
  if (!meta.contains("dim") || !meta["dim"].is_number_unsigned())
    throw ValidationError("embedding sidecar needs an unsigned 'dim'");
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  return read_embeddings(in, meta["dim"].get<std::size_t>());
}

struct AlignedEmbeddings {
  DenseMatrix matrix;
  std::vector<std::size_t> kept;     // sample indices, one per matrix row
  std::vector<std::size_t> missing;  // sample indices without a vector
};

inline AlignedEmbeddings align_embeddings(const std::vector<CohortSample>& samples,
                                          const EmbeddingTable& table, bool allow_missing = false) {
  AlignedEmbeddings out;
  for (std::size_t i = 0; i < samples.size(); ++i)
    (table.find(samples[i].subject_id, samples[i].prediction_time) ? out.kept : out.missing).push_back(i);
  if (!out.missing.empty() && !allow_missing) {
    std::string msg = std::to_string(out.missing.size()) + " sample(s) have no embedding:";
    for (std::size_t k = 0; k < std::min<std::size_t>(out.missing.size(), 10); ++k) {
      const auto& s = samples[out.missing[k]];
      msg += " (" + std::to_string(s.subject_id) + ", " + format_timestamp(s.prediction_time) + ")";
    }
    throw ValidationError(msg);
  }
  out.matrix = DenseMatrix(out.kept.size(), table.dim());
  for (std::size_t r = 0; r < out.kept.size(); ++r) {
    const auto& s = samples[out.kept[r]];
    const auto* v = table.find(s.subject_id, s.prediction_time);
    for (std::size_t k = 0; k < v->size(); ++k) out.matrix(r, k) = (*v)[k];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sample caps.

inline constexpr std::size_t kTrainCap = 100000;
inline constexpr std::size_t kEvalCap = 50000;

// Indices of a uniform subsample of size min(cap, n), in original order. The
// subsample is the `cap` samples with the smallest seeded hash.
inline std::vector<std::size_t> cap_indices(const std::vector<CohortSample>& samples, std::size_t cap,
                                            std::uint64_t seed) {
  std::vector<std::size_t> idx(samples.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  if (samples.size() <= cap) return idx;
  auto key = [&](std::size_t i) {
    return std::pair{hash_combine(seed, static_cast<std::uint64_t>(samples[i].subject_id),
                                  static_cast<std::uint64_t>(epoch_seconds(samples[i].prediction_time))),
                     i};
  };
  std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(cap), idx.end(),
                   [&](std::size_t a, std::size_t b) { return key(a) < key(b); });
  idx.resize(cap);
  std::sort(idx.begin(), idx.end());
  return idx;
}

inline std::vector<CohortSample> select(const std::vector<CohortSample>& samples,
                                        const std::vector<std::size_t>& idx) {
  std::vector<CohortSample> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(samples[i]);
  return out;
}

inline std::pair<std::vector<CohortSample>, std::vector<CohortSample>> cap_samples(
    const std::vector<CohortSample>& train, const std::vector<CohortSample>& eval,
    std::size_t train_cap = kTrainCap, std::size_t eval_cap = kEvalCap, std::uint64_t seed = 0) {
  return {select(train, cap_indices(train, train_cap, derive_seed(seed, "cap/train"))),
          select(eval, cap_indices(eval, eval_cap, derive_seed(seed, "cap/eval")))};
}

}  // namespace cohort_forge
