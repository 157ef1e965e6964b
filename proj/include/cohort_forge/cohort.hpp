#pragma once

// Labeled cohort extraction.
//
// Outcome tasks anchor on reconstructed inpatient episodes. Phenotype tasks
// follow at-risk entry, case onset, index date and exit. In both, the label
// of a sample is computed only from events strictly after its prediction
// time.

#include <algorithm>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "cohort_forge/csv.hpp"
#include "cohort_forge/error.hpp"
#include "cohort_forge/event_store.hpp"
#include "cohort_forge/parallel.hpp"
#include "cohort_forge/predicate.hpp"
#include "cohort_forge/random.hpp"
#include "cohort_forge/task.hpp"
#include "cohort_forge/time.hpp"

namespace cohort_forge {

inline constexpr std::string_view kBirthCode = "DEMO/birth";
inline constexpr std::string_view kSexPrefix = "DEMO/sex=";
inline constexpr std::string_view kRacePrefix = "DEMO/race=";

struct Demographics {
  std::optional<std::chrono::sys_days> birth_date;
  std::optional<std::string> sex;
  std::optional<std::string> race;
};

// Demographics are DEMO events: "DEMO/birth" with an ISO date text value,
// "DEMO/sex=<value>" and "DEMO/race=<value>". The first occurrence of each
// wins.
inline Demographics demographics_of(const SubjectTimeline& t) {
  Demographics d;
  for (const auto& e : t.events) {
    if (!e.is_demographic()) continue;
    const std::string_view code = e.code;
    if (code == kBirthCode && !d.birth_date && e.text_value) {
      if (auto ts = parse_timestamp(*e.text_value)) d.birth_date = calendar_day(*ts);
    } else if (code.starts_with(kSexPrefix) && !d.sex) {
      d.sex = std::string(code.substr(kSexPrefix.size()));
    } else if (code.starts_with(kRacePrefix) && !d.race) {
      d.race = std::string(code.substr(kRacePrefix.size()));
    }
  }
  return d;
}

// ---------------------------------------------------------------------------
// Inpatient episodes.

struct EpisodeCodes {
  std::string admission = "VISIT/inpatient-admission";
  std::string discharge = "VISIT/inpatient-discharge";
};

struct Episode {
  Timestamp admission;
  Timestamp discharge;
  friend bool operator==(const Episode&, const Episode&) = default;
};

struct EpisodeReconstruction {
  std::vector<Episode> episodes;
  std::size_t unmatched_admissions = 0;
  std::size_t unmatched_discharges = 0;
};

// Pairs each admission with the next discharge. At a shared timestamp the
// discharge is processed first, so a same-instant transfer closes the old
// stay before opening the new one. An admission that is followed by another
// admission before any discharge is dropped.
inline EpisodeReconstruction reconstruct_episodes(const SubjectTimeline& t,
                                                  const EpisodeCodes& codes = {}) {
  EpisodeReconstruction r;
  std::optional<Timestamp> open;
  const auto& ev = t.events;
  for (std::size_t i = 0; i < ev.size();) {
    std::size_t j = i;
    bool admit = false;
    bool discharge = false;
    while (j < ev.size() && ev[j].time == ev[i].time) {
      admit = admit || ev[j].code == codes.admission;
      discharge = discharge || ev[j].code == codes.discharge;
      ++j;
    }
    if (discharge) {
      if (open) {
        r.episodes.push_back({*open, ev[i].time});
        open.reset();
      } else {
        ++r.unmatched_discharges;
      }
    }
    if (admit) {
      if (open) ++r.unmatched_admissions;
      open = ev[i].time;
    }
    i = j;
  }
  if (open) ++r.unmatched_admissions;
  return r;
}

// Greedy left-to-right: keep a time only if it is at least `washout` after
// the last kept time.
inline TimeSet apply_washout(const TimeSet& times, Duration washout) {
  TimeSet out;
  for (Timestamp t : times)
    if (out.empty() || t - out.back() >= washout) out.push_back(t);
  return out;
}

// ---------------------------------------------------------------------------
// Samples.

struct SampleAttributes {
  std::optional<std::string> sex;
  std::optional<std::string> race;
  std::optional<int> utilization_tertile;
  std::optional<double> age;  // fractional years at prediction time

  friend bool operator==(const SampleAttributes&, const SampleAttributes&) = default;
};

struct CohortSample {
  SubjectId subject_id = 0;
  Timestamp prediction_time{};
  int label = 0;
  SampleAttributes attributes;

  friend bool operator==(const CohortSample&, const CohortSample&) = default;
};

struct CohortOptions {
  std::uint64_t seed = 0;
  EpisodeCodes episode_codes;
  unsigned threads = 1;
};

struct CohortReport {
  std::size_t subjects_considered = 0;
  std::size_t subjects_with_samples = 0;
  std::size_t positives = 0;
  std::size_t negatives = 0;
  std::size_t unmatched_admissions = 0;
  std::map<std::string, std::size_t> excluded;  // reason -> count
  std::vector<std::string> warnings;
  bool single_class = false;
};

struct CohortResult {
  std::vector<CohortSample> samples;
  CohortReport report;
};

namespace detail {

inline std::span<const Event> events_in(const SubjectTimeline& t, std::optional<Timestamp> after,
                                        std::optional<Timestamp> up_to) {
  auto first = t.events.begin();
  if (after)
    first = std::upper_bound(t.events.begin(), t.events.end(), *after,
                             [](Timestamp v, const Event& e) { return v < e.time; });
  auto last = t.events.end();
  if (up_to)
    last = std::upper_bound(first, t.events.end(), *up_to,
                            [](Timestamp v, const Event& e) { return v < e.time; });
  return {t.events.data() + (first - t.events.begin()), static_cast<std::size_t>(last - first)};
}

inline std::optional<Timestamp> next_code_after(const SubjectTimeline& t, Timestamp after,
                                                std::string_view code) {
  for (const auto& e : events_in(t, after, std::nullopt))
    if (e.code == code) return e.time;
  return std::nullopt;
}

inline bool has_nondemographic_at_or_before(const SubjectTimeline& t, Timestamp at) {
  for (const auto& e : t.events) {
    if (e.time > at) return false;
    if (!e.is_demographic()) return true;
  }
  return false;
}

}  // namespace detail

// Label for a sample at `prediction_time`, using only events after it.
inline int compute_label(const SubjectTimeline& t, const TaskDefinition& task,
                         Timestamp prediction_time, const EvalContext& ctx,
                         const EpisodeCodes& codes = {}) {
  if (task.label == LabelRule::kStayLongerThan) {
    const auto end = detail::next_code_after(t, prediction_time, codes.discharge);
    const Timestamp anchor = prediction_time - task.prediction_offset;
    return (!end || *end > anchor + task.stay_threshold) ? 1 : 0;
  }
  std::optional<Timestamp> window_end;
  if (task.prediction_horizon) window_end = prediction_time + *task.prediction_horizon;
  else window_end = detail::next_code_after(t, prediction_time, codes.discharge);
  auto view = detail::events_in(t, prediction_time, window_end);
  return find_entry(view, task.case_, ctx) ? 1 : 0;
}

// Seeded choice of a control index among `n` qualifying encounters.
inline std::size_t choose_control(std::size_t n, std::uint64_t seed, std::string_view task,
                                  SubjectId subject) {
  Rng rng(hash_combine(seed, fnv1a64(task), static_cast<std::uint64_t>(subject)));
  return static_cast<std::size_t>(rng.below(n));
}

struct SubjectExtraction {
  std::vector<CohortSample> samples;
  std::map<std::string, std::size_t> excluded;
  std::size_t unmatched_admissions = 0;
};

namespace detail {

inline SampleAttributes attributes_at(const Demographics& demo, Timestamp pt) {
  SampleAttributes a;
  a.sex = demo.sex;
  a.race = demo.race;
  if (demo.birth_date) a.age = fractional_years(*demo.birth_date, pt);
  return a;
}

inline bool subject_excluded_outright(const SubjectTimeline& t, const TaskDefinition& task,
                                      const EvalContext& ctx) {
  for (const auto& x : task.exclusions)
    if (x.kind == Exclusion::Kind::kSubjectHas && find_entry(t, x.predicate.front(), ctx))
      return true;
  return false;
}

inline SubjectExtraction extract_outcome(const SubjectTimeline& t, const TaskDefinition& task,
                                         const CohortOptions& opt, const Demographics& demo,
                                         const EvalContext& ctx) {
  SubjectExtraction out;
  auto rec = reconstruct_episodes(t, opt.episode_codes);
  out.unmatched_admissions = rec.unmatched_admissions;
  const TimeSet trigger = match_times(task.trigger, t.events, ctx);
  auto triggered = [&](Timestamp x) { return std::binary_search(trigger.begin(), trigger.end(), x); };
  std::optional<Timestamp> at_risk_entry;
  if (task.at_risk) at_risk_entry = find_entry(t, *task.at_risk, ctx);

  for (const auto& ep : rec.episodes) {
    Timestamp anchor;
    bool admission_anchored = false;
    if (triggered(ep.admission)) {
      anchor = ep.admission;
      admission_anchored = true;
    } else if (triggered(ep.discharge)) {
      anchor = ep.discharge;
    } else {
      continue;
    }
    const Timestamp pt = anchor + task.prediction_offset;
    auto skip = [&](const char* reason) { ++out.excluded[reason]; };
    if (admission_anchored && pt >= ep.discharge) {
      skip("episode_ends_before_prediction");
      continue;
    }
    if (pt < t.observation_start() || pt - t.observation_start() < task.min_prior_observation) {
      skip("insufficient_prior_observation");
      continue;
    }
    if (task.require_data_in_observation && !has_nondemographic_at_or_before(t, pt)) {
      skip("no_data_in_observation");
      continue;
    }
    if (task.at_risk && (!at_risk_entry || *at_risk_entry > pt)) {
      skip("not_at_risk");
      continue;
    }
    if (task.index_filter && !holds_at(*task.index_filter, events_in(t, std::nullopt, pt), pt, ctx)) {
      skip("index_filter");
      continue;
    }
    const int label = compute_label(t, task, pt, ctx, opt.episode_codes);
    if (task.has_exclusion(Exclusion::Kind::kSameDayOutcome)) {
      const auto view = events_in(t, pt - Duration{1}, std::nullopt);
      if (auto first = find_entry(view, task.case_, ctx); first && calendar_day(*first) == calendar_day(pt)) {
        skip("same_day_outcome");
        continue;
      }
    }
    bool censored = false;
    for (const auto& x : task.exclusions)
      if (x.kind == Exclusion::Kind::kCensoredWithin && label == 0 &&
          t.observation_end() < pt + x.duration)
        censored = true;
    if (censored) {
      skip("censored");
      continue;
    }
    if (!out.samples.empty() && out.samples.back().prediction_time >= pt) {
      skip("duplicate_prediction_time");
      continue;
    }
    out.samples.push_back({t.subject_id, pt, label, attributes_at(demo, pt)});
  }
  return out;
}

inline SubjectExtraction extract_phenotype(const SubjectTimeline& t, const TaskDefinition& task,
                                           const CohortOptions& opt, const Demographics& demo,
                                           const EvalContext& ctx) {
  SubjectExtraction out;
  auto exclude = [&](const char* reason) {
    ++out.excluded[reason];
    return out;
  };
  const auto entry = find_entry(t, *task.at_risk, ctx);
  if (!entry) return exclude("not_at_risk");

  const TimeSet raw_cases = match_times(task.case_, t.events, ctx);
  const TimeSet cases = task.washout ? apply_washout(raw_cases, *task.washout) : raw_cases;
  for (const auto& x : task.exclusions) {
    if (x.kind == Exclusion::Kind::kCaseBeforeAtRisk &&
        std::any_of(cases.begin(), cases.end(), [&](Timestamp c) { return c <= *entry; }))
      return exclude("case_before_at_risk");
    if (x.kind == Exclusion::Kind::kCaseWithinDaysBeforeAtRisk &&
        std::any_of(cases.begin(), cases.end(),
                    [&](Timestamp c) { return c > *entry - x.duration && c <= *entry; }))
      return exclude("case_within_days_before_at_risk");
  }
  std::optional<Timestamp> onset;
  if (auto it = std::upper_bound(cases.begin(), cases.end(), *entry); it != cases.end()) onset = *it;

  const Duration horizon = *task.prediction_horizon;
  auto qualifies = [&](Timestamp e) {
    if (e < *entry || e < t.observation_start()) return false;
    if (e - t.observation_start() < task.min_prior_observation) return false;
    if (task.require_data_in_observation && !has_nondemographic_at_or_before(t, e)) return false;
    if (task.index_filter && !holds_at(*task.index_filter, events_in(t, std::nullopt, e), e, ctx))
      return false;
    return true;
  };
  // A monotone case predicate can only lose matches on the future-only view,
  // so a window without any full-timeline match is certainly negative.
  const bool monotone = is_monotone(task.case_);
  auto label_at = [&](Timestamp e) {
    if (monotone) {
      auto it = std::upper_bound(raw_cases.begin(), raw_cases.end(), e);
      if (it == raw_cases.end() || *it > e + horizon) return 0;
    }
    return compute_label(t, task, e, ctx, opt.episode_codes);
  };
  auto emit = [&](Timestamp e, int label) {
    out.samples.push_back({t.subject_id, e, label, attributes_at(demo, e)});
    return out;
  };

  if (task.censor_gap) {
    const Timestamp exit = onset ? *onset : t.observation_end();
    const Timestamp e = exit - *task.censor_gap;
    if (!qualifies(e)) return exclude("no_qualifying_index");
    return emit(e, label_at(e));
  }

  std::vector<Timestamp> candidates;
  for (Timestamp e : match_times(task.trigger, t.events, ctx))
    if (qualifies(e)) candidates.push_back(e);
  if (candidates.empty()) return exclude("no_qualifying_index");

  if (onset) {
    for (auto it = candidates.rbegin(); it != candidates.rend(); ++it) {
      const Timestamp e = *it;
      if (e >= *onset) continue;
      if (e < *onset - horizon) break;
      if (label_at(e) == 1) return emit(e, 1);
    }
    // An incident case is never used as a control.
    return exclude("no_case_index");
  }
  std::vector<Timestamp> controls;
  for (Timestamp e : candidates)
    if (label_at(e) == 0) controls.push_back(e);
  if (controls.empty()) return exclude("no_qualifying_index");
  const std::size_t pick = task.control_index == ControlIndex::kLatest
                               ? controls.size() - 1
                               : choose_control(controls.size(), opt.seed, task.name, t.subject_id);
  return emit(controls[pick], 0);
}

}  // namespace detail

inline SubjectExtraction extract_subject(const SubjectTimeline& t, const TaskDefinition& task,
                                         const CohortOptions& opt = {}) {
  const Demographics demo = demographics_of(t);
  const EvalContext ctx{demo.birth_date};
  if (detail::subject_excluded_outright(t, task, ctx)) {
    SubjectExtraction out;
    ++out.excluded["subject_has"];
    return out;
  }
  return task.kind == TaskKind::kOutcome ? detail::extract_outcome(t, task, opt, demo, ctx)
                                         : detail::extract_phenotype(t, task, opt, demo, ctx);
}

// Extracts samples for every subject in `split` (all subjects when null).
// Output is sorted by (subject_id, prediction_time).
inline CohortResult build_cohort(const Dataset& d, const TaskDefinition& task,
                                 const std::set<SubjectId>* split = nullptr,
                                 const CohortOptions& opt = {}) {
  std::vector<const SubjectTimeline*> subjects;
  for (const auto& t : d.timelines())
    if (!split || split->count(t.subject_id)) subjects.push_back(&t);

  std::vector<SubjectExtraction> per_subject(subjects.size());
  parallel_for(subjects.size(), opt.threads,
               [&](std::size_t i) { per_subject[i] = extract_subject(*subjects[i], task, opt); });

  CohortResult r;
  r.report.subjects_considered = subjects.size();
  for (auto& s : per_subject) {
    if (!s.samples.empty()) ++r.report.subjects_with_samples;
    r.report.unmatched_admissions += s.unmatched_admissions;
    for (const auto& [reason, n] : s.excluded) r.report.excluded[reason] += n;
    for (auto& sample : s.samples) r.samples.push_back(std::move(sample));
  }
  std::sort(r.samples.begin(), r.samples.end(), [](const CohortSample& a, const CohortSample& b) {
    return std::tie(a.subject_id, a.prediction_time) < std::tie(b.subject_id, b.prediction_time);
  });
  for (const auto& s : r.samples) (s.label ? r.report.positives : r.report.negatives)++;

  const auto present = d.vocabularies();
  for (const auto& v : task.vocabularies())
    if (!present.count(v))
      r.report.warnings.push_back("task '" + task.name + "' references vocabulary '" + v +
                                  "' absent from the dataset; its codes match nothing");
  if (r.report.unmatched_admissions)
    r.report.warnings.push_back(std::to_string(r.report.unmatched_admissions) +
                                " unmatched inpatient admission(s) dropped");
  if (r.report.positives == 0 || r.report.negatives == 0) {
    r.report.single_class = true;
    r.report.warnings.push_back("task '" + task.name + "' cohort has " +
                                (r.report.positives == 0 ? "no positive" : "no negative") +
                                " labels");
  }
  return r;
}

// ---------------------------------------------------------------------------
// Cohort CSV.

inline const std::vector<std::string>& cohort_header() {
  static const std::vector<std::string> h = {"subject_id", "prediction_time", "label", "sex",
                                             "race", "utilization_tertile", "age"};
  return h;
}

inline void write_cohort(const std::vector<CohortSample>& samples, std::ostream& out) {
  csv::write_row(out, cohort_header());
  for (const auto& s : samples) {
    const auto& a = s.attributes;
    csv::write_row(out, {std::to_string(s.subject_id), format_timestamp(s.prediction_time),
                         std::to_string(s.label), a.sex.value_or(""), a.race.value_or(""),
                         a.utilization_tertile ? std::to_string(*a.utilization_tertile) : "",
                         a.age ? csv::format_double(*a.age) : ""});
  }
}

inline void write_cohort(const std::vector<CohortSample>& samples, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  write_cohort(samples, out);
}

inline std::vector<CohortSample> read_cohort(std::istream& in) {
  csv::Reader reader(in);
  std::vector<std::string> row;
  if (!reader.next(row) || row != cohort_header()) throw ParseError("bad cohort header", 1);
  std::vector<CohortSample> out;
  while (reader.next(row)) {
    if (row.size() == 1 && row[0].empty()) continue;
    if (row.size() != 7) throw ParseError("expected 7 columns", reader.line());
    CohortSample s;
    auto id = csv::parse_int(row[0]);
    auto pt = parse_timestamp(row[1]);
    if (!id || !pt || (row[2] != "0" && row[2] != "1"))
      throw ParseError("malformed cohort row", reader.line());
    s.subject_id = *id;
    s.prediction_time = *pt;
    s.label = row[2] == "1" ? 1 : 0;
    if (!row[3].empty()) s.attributes.sex = row[3];
    if (!row[4].empty()) s.attributes.race = row[4];
    if (!row[5].empty()) {
      auto tert = csv::parse_int(row[5]);
      if (!tert) throw ParseError("malformed utilization tertile", reader.line());
      s.attributes.utilization_tertile = static_cast<int>(*tert);
    }
    if (!row[6].empty()) {
      auto age = csv::parse_double(row[6]);
      if (!age) throw ParseError("malformed age", reader.line());
      s.attributes.age = *age;
    }
    out.push_back(std::move(s));
  }
  return out;
}

inline std::vector<CohortSample> read_cohort(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open cohort " + path);
  return read_cohort(in);
}

}  // namespace cohort_forge
