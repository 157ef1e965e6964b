#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "cohort_forge/csv.hpp"
#include "cohort_forge/error.hpp"
#include "cohort_forge/random.hpp"
#include "cohort_forge/time.hpp"

namespace cohort_forge {

using SubjectId = std::int64_t;

inline constexpr std::string_view kSchemaVersion = "cohort-forge-events/1";
inline constexpr std::string_view kDemographicVocabulary = "DEMO";

// "VOCAB/identifier" with exactly one slash and both parts nonempty.
inline bool is_valid_code(std::string_view code) {
  const auto slash = code.find('/');
  return slash != std::string_view::npos && slash > 0 &&
         slash + 1 < code.size() &&
         code.find('/', slash + 1) == std::string_view::npos;
}

inline std::string_view vocabulary_of(std::string_view code) {
  return code.substr(0, code.find('/'));
}

inline std::string_view identifier_of(std::string_view code) {
  const auto slash = code.find('/');
  return slash == std::string_view::npos ? code : code.substr(slash + 1);
}

struct Event {
  SubjectId subject_id = 0;
  Timestamp time{};
  std::string code;
  std::optional<double> numeric_value;
  std::optional<std::string> text_value;
  std::optional<std::string> unit;
  bool value_missing = false;

  std::string_view vocabulary() const { return vocabulary_of(code); }
  bool is_demographic() const { return vocabulary() == kDemographicVocabulary; }

  // Total order: time, then code, then the payload fields. Used for the
  // deterministic tie-break inside a timestamp.
  friend bool operator<(const Event& a, const Event& b) {
    return std::tie(a.time, a.code, a.numeric_value, a.text_value, a.unit,
                    a.value_missing) <
           std::tie(b.time, b.code, b.numeric_value, b.text_value, b.unit,
                    b.value_missing);
  }
  friend bool operator==(const Event&, const Event&) = default;
};

struct SubjectTimeline {
  SubjectId subject_id = 0;
  std::vector<Event> events;  // sorted, never empty inside a Dataset

  Timestamp observation_start() const { return events.front().time; }
  Timestamp observation_end() const { return events.back().time; }

  // Number of events with time <= t (the visible prefix at t).
  std::size_t visible_count(Timestamp t) const {
    return static_cast<std::size_t>(
        std::upper_bound(events.begin(), events.end(), t,
                         [](Timestamp v, const Event& e) { return v < e.time; }) -
        events.begin());
  }

  friend bool operator==(const SubjectTimeline&, const SubjectTimeline&) = default;
};

// A numeric value that arrived without any concept code. Kept only so the
// ETL can count and drop it.
struct UncodedValue {
  SubjectId subject_id = 0;
  Timestamp time{};
  double value = 0.0;
  friend auto operator<=>(const UncodedValue&, const UncodedValue&) = default;
};

struct Provenance {
  std::string source;
  std::string schema_version{kSchemaVersion};
};

class Dataset {
 public:
  Dataset() = default;

  const std::vector<SubjectTimeline>& timelines() const { return timelines_; }
  const std::vector<UncodedValue>& uncoded_values() const { return uncoded_; }
  const Provenance& provenance() const { return provenance_; }
  void set_provenance(Provenance p) { provenance_ = std::move(p); }

  std::size_t size() const { return timelines_.size(); }
  bool empty() const { return timelines_.empty(); }

  std::size_t event_count() const {
    std::size_t n = 0;
    for (const auto& t : timelines_) n += t.events.size();
    return n;
  }

  const SubjectTimeline* find(SubjectId id) const {
    auto it = std::lower_bound(
        timelines_.begin(), timelines_.end(), id,
        [](const SubjectTimeline& t, SubjectId v) { return t.subject_id < v; });
    return it != timelines_.end() && it->subject_id == id ? &*it : nullptr;
  }

  std::vector<SubjectId> subject_ids() const {
    std::vector<SubjectId> ids;
    ids.reserve(timelines_.size());
    for (const auto& t : timelines_) ids.push_back(t.subject_id);
    return ids;
  }

  std::set<std::string> vocabularies() const {
    std::set<std::string> v;
    for (const auto& t : timelines_)
      for (const auto& e : t.events) v.emplace(e.vocabulary());
    return v;
  }

  friend bool operator==(const Dataset& a, const Dataset& b) {
    return a.timelines_ == b.timelines_ && a.uncoded_ == b.uncoded_;
  }

  // Groups events by subject, sorts every timeline and moves demographic
  // events to the subject's earliest timestamp. Returns the number of
  // demographic events that had to be moved.
  static Dataset from_events(std::vector<Event> events,
                             std::vector<UncodedValue> uncoded = {},
                             Provenance provenance = {},
                             std::size_t* demo_retimed = nullptr) {
    std::sort(events.begin(), events.end(), [](const Event& a, const Event& b) {
      return a.subject_id != b.subject_id ? a.subject_id < b.subject_id : a < b;
    });
    Dataset d;
    d.provenance_ = std::move(provenance);
    std::size_t moved = 0;
    for (std::size_t i = 0; i < events.size();) {
      std::size_t j = i;
      while (j < events.size() && events[j].subject_id == events[i].subject_id) ++j;
      SubjectTimeline t;
      t.subject_id = events[i].subject_id;
      t.events.assign(std::make_move_iterator(events.begin() + static_cast<std::ptrdiff_t>(i)),
                      std::make_move_iterator(events.begin() + static_cast<std::ptrdiff_t>(j)));
      const Timestamp earliest = t.events.front().time;
      bool retimed = false;
      for (auto& e : t.events) {
        if (e.is_demographic() && e.time != earliest) {
          e.time = earliest;
          ++moved;
          retimed = true;
        }
      }
      if (retimed) std::sort(t.events.begin(), t.events.end());
      d.timelines_.push_back(std::move(t));
      i = j;
    }
    std::sort(uncoded.begin(), uncoded.end());
    d.uncoded_ = std::move(uncoded);
    if (demo_retimed) *demo_retimed = moved;
    return d;
  }

  // Rebuilds from already-sorted timelines (used by transforms that keep
  // subjects and may reorder events).
  static Dataset from_timelines(std::vector<SubjectTimeline> timelines,
                                Provenance provenance,
                                std::vector<UncodedValue> uncoded = {}) {
    Dataset d;
    d.provenance_ = std::move(provenance);
    for (auto& t : timelines) {
      if (t.events.empty()) continue;
      std::sort(t.events.begin(), t.events.end());
      d.timelines_.push_back(std::move(t));
    }
    std::sort(d.timelines_.begin(), d.timelines_.end(),
              [](const SubjectTimeline& a, const SubjectTimeline& b) {
                return a.subject_id < b.subject_id;
              });
    d.uncoded_ = std::move(uncoded);
    std::sort(d.uncoded_.begin(), d.uncoded_.end());
    return d;
  }

 private:
  std::vector<SubjectTimeline> timelines_;
  std::vector<UncodedValue> uncoded_;
  Provenance provenance_;
};

// Maps logical fields to header names in the event file.
struct EventSchema {
  std::string subject_id = "subject_id";
  std::string time = "time";
  std::string code = "code";
  std::string numeric_value = "numeric_value";
  std::string text_value = "text_value";
  std::string unit = "unit";
  // Optional; written by this library after ETL.
  std::string value_missing = "value_missing";
};

struct Rejection {
  std::size_t line = 0;
  std::string reason;
};

struct LoadReport {
  std::size_t rows = 0;
  std::size_t events = 0;
  std::size_t uncoded_values = 0;
  std::size_t rejected = 0;
  std::size_t demo_retimed = 0;
  std::vector<Rejection> rejections;  // first kMaxListed only

  static constexpr std::size_t kMaxListed = 100;
};

struct LoadedDataset {
  Dataset dataset;
  LoadReport report;
};

// Fraction of rejected rows above which loading fails outright.
inline constexpr double kMaxRejectedFraction = 0.01;

inline LoadedDataset read_events(std::istream& in, const EventSchema& schema = {},
                                 std::string source = "<stream>") {
  csv::Reader reader(in);
  std::vector<std::string> header;
  if (!reader.next(header)) throw ParseError("event file is empty: " + source);
  const int c_subject = csv::column_index(header, schema.subject_id);
  const int c_time = csv::column_index(header, schema.time);
  const int c_code = csv::column_index(header, schema.code);
  const int c_numeric = csv::column_index(header, schema.numeric_value);
  const int c_text = csv::column_index(header, schema.text_value);
  const int c_unit = csv::column_index(header, schema.unit);
  const int c_missing = csv::column_index(header, schema.value_missing);
  for (auto [col, name] : {std::pair{c_subject, &schema.subject_id},
                           std::pair{c_time, &schema.time},
                           std::pair{c_code, &schema.code},
                           std::pair{c_numeric, &schema.numeric_value},
                           std::pair{c_text, &schema.text_value},
                           std::pair{c_unit, &schema.unit}}) {
    if (col < 0)
      throw ParseError("event file " + source + " lacks column '" + *name + "'", 1);
  }

  LoadReport report;
  std::vector<Event> events;
  std::vector<UncodedValue> uncoded;
  std::vector<std::string> row;
  auto reject = [&](std::string reason) {
    ++report.rejected;
    if (report.rejections.size() < LoadReport::kMaxListed)
      report.rejections.push_back({reader.line(), std::move(reason)});
  };
  auto field = [&](int col) -> const std::string& {
    static const std::string empty;
    return col >= 0 && static_cast<std::size_t>(col) < row.size() ? row[col] : empty;
  };

  while (reader.next(row)) {
    if (row.size() == 1 && row[0].empty()) continue;  // blank line
    ++report.rows;
    const auto subject = csv::parse_int(field(c_subject));
    if (!subject) {
      reject("missing or malformed subject_id");
      continue;
    }
    const auto time = parse_timestamp(field(c_time));
    if (!time) {
      reject("unparseable timestamp '" + field(c_time) + "'");
      continue;
    }
    std::optional<double> numeric;
    if (!field(c_numeric).empty()) {
      numeric = csv::parse_double(field(c_numeric));
      if (!numeric || !std::isfinite(*numeric)) {
        reject("malformed numeric_value '" + field(c_numeric) + "'");
        continue;
      }
    }
    const std::string& code = field(c_code);
    if (code.empty()) {
      if (numeric) {
        uncoded.push_back({*subject, *time, *numeric});
        ++report.uncoded_values;
      } else {
        reject("missing code");
      }
      continue;
    }
    if (!is_valid_code(code)) {
      reject("code '" + code + "' is not of the form VOCAB/identifier");
      continue;
    }
    Event e;
    e.subject_id = *subject;
    e.time = *time;
    e.code = code;
    e.numeric_value = numeric;
    if (!field(c_text).empty()) e.text_value = field(c_text);
    if (!field(c_unit).empty()) e.unit = field(c_unit);
    if (c_missing >= 0) {
      const auto& flag = field(c_missing);
      e.value_missing = flag == "1" || flag == "true";
      if (e.value_missing && e.numeric_value) {
        reject("value_missing set on a row carrying a numeric value");
        continue;
      }
    }
    events.push_back(std::move(e));
  }

  if (report.rows > 0 &&
      static_cast<double>(report.rejected) >
          kMaxRejectedFraction * static_cast<double>(report.rows)) {
    std::ostringstream msg;
    msg << source << ": " << report.rejected << " of " << report.rows
        << " rows rejected (limit 1%)";
    if (!report.rejections.empty())
      msg << "; first: line " << report.rejections.front().line << ": "
          << report.rejections.front().reason;
    throw ValidationError(msg.str());
  }
  report.events = events.size();
  LoadedDataset out;
  out.dataset = Dataset::from_events(std::move(events), std::move(uncoded),
                                     Provenance{source, std::string(kSchemaVersion)},
                                     &report.demo_retimed);
  out.report = std::move(report);
  return out;
}

inline LoadedDataset load_events(const std::string& path,
                                 const EventSchema& schema = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open event file: " + path);
  return read_events(in, schema, path);
}

inline void write_events(const Dataset& d, std::ostream& out) {
  out << "subject_id,time,code,numeric_value,text_value,unit,value_missing\n";
  std::vector<std::string> row(7);
  for (const auto& t : d.timelines()) {
    for (const auto& e : t.events) {
      row[0] = std::to_string(e.subject_id);
      row[1] = format_timestamp(e.time);
      row[2] = e.code;
      row[3] = e.numeric_value ? csv::format_double(*e.numeric_value) : "";
      row[4] = e.text_value.value_or("");
      row[5] = e.unit.value_or("");
      row[6] = e.value_missing ? "1" : "";
      csv::write_row(out, row);
    }
  }
  for (const auto& u : d.uncoded_values()) {
    row[0] = std::to_string(u.subject_id);
    row[1] = format_timestamp(u.time);
    row[2] = "";
    row[3] = csv::format_double(u.value);
    row[4] = row[5] = row[6] = "";
    csv::write_row(out, row);
  }
}

inline void write_events(const Dataset& d, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write event file: " + path);
  write_events(d, out);
}

// ---------------------------------------------------------------------------
// Subject-level splits.

enum class Split { kTrain, kTune, kTest };

inline std::string_view split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kTune: return "tune";
    case Split::kTest: return "test";
  }
  return "?";
}

inline std::optional<Split> parse_split(std::string_view s) {
  if (s == "train") return Split::kTrain;
  if (s == "tune") return Split::kTune;
  if (s == "test") return Split::kTest;
  return std::nullopt;
}

struct SplitRatios {
  double train = 0.60;
  double tune = 0.10;
  double test = 0.30;
};

struct SplitAssignment {
  std::set<SubjectId> train;
  std::set<SubjectId> tune;
  std::set<SubjectId> test;
  std::uint64_t seed = 0;

  const std::set<SubjectId>& of(Split s) const {
    switch (s) {
      case Split::kTrain: return train;
      case Split::kTune: return tune;
      case Split::kTest: return test;
    }
    return test;
  }

  std::optional<Split> split_of(SubjectId id) const {
    if (train.contains(id)) return Split::kTrain;
    if (tune.contains(id)) return Split::kTune;
    if (test.contains(id)) return Split::kTest;
    return std::nullopt;
  }

  friend bool operator==(const SplitAssignment&, const SplitAssignment&) = default;
};

inline constexpr std::size_t kMinSubjectsForSplit = 10;

// Each subject gets a seeded hash key; subjects are ranked by key and cut at
// round(ratio * n). The result depends only on the id set, the ratios and the
// seed.
inline SplitAssignment split_subjects(std::vector<SubjectId> ids,
                                      const SplitRatios& ratios,
                                      std::uint64_t seed) {
  if (ratios.train < 0 || ratios.tune < 0 || ratios.test < 0 ||
      std::abs(ratios.train + ratios.tune + ratios.test - 1.0) > 1e-9)
    throw ValidationError("split ratios must be nonnegative and sum to 1");
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  if (ids.size() < kMinSubjectsForSplit)
    throw ValidationError("cannot split fewer than 10 subjects (got " +
                          std::to_string(ids.size()) + ")");
  std::vector<std::pair<std::uint64_t, SubjectId>> keyed;
  keyed.reserve(ids.size());
  for (SubjectId id : ids)
    keyed.emplace_back(hash_combine(seed, static_cast<std::uint64_t>(id)), id);
  std::sort(keyed.begin(), keyed.end());

  const auto n = static_cast<double>(ids.size());
  const auto n_train = static_cast<std::size_t>(std::llround(ratios.train * n));
  const auto n_tune = std::min(
      ids.size() - n_train, static_cast<std::size_t>(std::llround(ratios.tune * n)));
  SplitAssignment s;
  s.seed = seed;
  for (std::size_t i = 0; i < keyed.size(); ++i) {
    if (i < n_train) s.train.insert(keyed[i].second);
    else if (i < n_train + n_tune) s.tune.insert(keyed[i].second);
    else s.test.insert(keyed[i].second);
  }
  return s;
}

inline SplitAssignment split_subjects(const Dataset& d, const SplitRatios& ratios,
                                      std::uint64_t seed) {
  return split_subjects(d.subject_ids(), ratios, seed);
}

inline void write_splits(const SplitAssignment& s, std::ostream& out) {
  std::map<SubjectId, Split> all;
  for (auto id : s.train) all[id] = Split::kTrain;
  for (auto id : s.tune) all[id] = Split::kTune;
  for (auto id : s.test) all[id] = Split::kTest;
  out << "subject_id,split\n";
  for (auto [id, split] : all) out << id << ',' << split_name(split) << '\n';
}

inline SplitAssignment read_splits(std::istream& in) {
  csv::Reader reader(in);
  std::vector<std::string> row;
  if (!reader.next(row) || row.size() < 2 || row[0] != "subject_id" || row[1] != "split")
    throw ParseError("split file must start with 'subject_id,split'", 1);
  SplitAssignment s;
  while (reader.next(row)) {
    if (row.size() == 1 && row[0].empty()) continue;
    if (row.size() != 2) throw ParseError("expected 2 columns", reader.line());
    auto id = csv::parse_int(row[0]);
    auto split = parse_split(row[1]);
    if (!id || !split) throw ParseError("malformed split row", reader.line());
    auto& target = split == Split::kTrain ? s.train : split == Split::kTune ? s.tune : s.test;
    if (s.split_of(*id)) throw ParseError("subject listed twice", reader.line());
    target.insert(*id);
  }
  return s;
}

// ---------------------------------------------------------------------------
// History slicing.

class EmptyHistory : public Error {
 public:
  using Error::Error;
};

// Events with time <= prediction_time. The input is left untouched.
inline SubjectTimeline slice_history(const SubjectTimeline& t, Timestamp prediction_time) {
  if (t.events.empty() || prediction_time < t.observation_start())
    throw EmptyHistory("prediction time " + format_timestamp(prediction_time) +
                       " precedes the observation start of subject " +
                       std::to_string(t.subject_id));
  SubjectTimeline out;
  out.subject_id = t.subject_id;
  out.events.assign(t.events.begin(),
                    t.events.begin() + static_cast<std::ptrdiff_t>(t.visible_count(prediction_time)));
  return out;
}

}  // namespace cohort_forge
