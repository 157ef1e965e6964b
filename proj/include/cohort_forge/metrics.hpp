#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cohort_forge/cohort.hpp"
#include "cohort_forge/error.hpp"
#include "cohort_forge/event_store.hpp"
#include "cohort_forge/parallel.hpp"
#include "cohort_forge/random.hpp"

namespace cohort_forge {

// Mann-Whitney form: average ranks over tied scores, so ties count 1/2.
inline double auroc(const std::vector<int>& labels, const std::vector<double>& scores) {
  if (labels.size() != scores.size()) throw ValidationError("labels and scores differ in length");
  const std::size_t n = labels.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0.0;
  double n_pos = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]]) {
        pos_rank_sum += avg_rank;
        n_pos += 1.0;
      }
    i = j;
  }
  const double n_neg = static_cast<double>(n) - n_pos;
  if (n_pos == 0.0 || n_neg == 0.0) throw UndefinedMetric("AUROC needs both classes");
  return (pos_rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
}

inline double brier(const std::vector<int>& labels, const std::vector<double>& probs) {
  if (labels.size() != probs.size()) throw ValidationError("labels and probabilities differ in length");
  if (labels.empty()) throw UndefinedMetric("Brier score of an empty set");
  double s = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (!(probs[i] >= 0.0 && probs[i] <= 1.0)) throw ValidationError("probability outside [0, 1]");
    const double d = probs[i] - labels[i];
    s += d * d;
  }
  return s / static_cast<double>(labels.size());
}

using MetricFn = std::function<double(const std::vector<int>&, const std::vector<double>&)>;

// Linear interpolation between order statistics (position q * (n - 1)).
inline double percentile(std::vector<double> v, double q) {
  if (v.empty()) throw Error("percentile of empty set");
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

struct BootstrapResult {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation over defined iterations
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  std::size_t defined = 0;
  std::size_t undefined = 0;
  std::vector<double> values;  // per defined iteration, in iteration order
};

inline constexpr std::size_t kBootstrapIterations = 100;

// Iteration i draws from Rng(seed + i). With `clusters` (one id per row) the
// resampling unit is the cluster: as many clusters as there are distinct ids
// are drawn with replacement and all their rows kept.
inline BootstrapResult bootstrap(const MetricFn& metric, const std::vector<int>& labels,
                                 const std::vector<double>& scores,
                                 std::size_t n_iter = kBootstrapIterations, std::uint64_t seed = 0,
                                 unsigned threads = 1,
                                 const std::vector<SubjectId>* clusters = nullptr) {
  if (n_iter < 2) throw ValidationError("bootstrap needs at least 2 iterations");
  if (labels.size() != scores.size() || labels.empty())
    throw ValidationError("bootstrap needs equal-length, non-empty inputs");
  std::vector<std::vector<std::size_t>> members;
  if (clusters) {
    if (clusters->size() != labels.size()) throw ValidationError("cluster ids differ in length");
    std::map<SubjectId, std::vector<std::size_t>> by_id;
    for (std::size_t i = 0; i < clusters->size(); ++i) by_id[(*clusters)[i]].push_back(i);
    for (auto& [id, rows] : by_id) members.push_back(std::move(rows));
  }
  std::vector<std::optional<double>> out(n_iter);
  parallel_for(n_iter, threads, [&](std::size_t it) {
    Rng rng(seed + it);
    std::vector<int> l;
    std::vector<double> s;
    if (clusters) {
      for (std::size_t k = 0; k < members.size(); ++k)
        for (auto i : members[rng.below(members.size())]) {
          l.push_back(labels[i]);
          s.push_back(scores[i]);
        }
    } else {
      l.resize(labels.size());
      s.resize(labels.size());
      for (std::size_t k = 0; k < labels.size(); ++k) {
        const auto i = rng.below(labels.size());
        l[k] = labels[i];
        s[k] = scores[i];
      }
    }
    try {
      out[it] = metric(l, s);
    } catch (const UndefinedMetric&) {
    }
  });
  BootstrapResult r;
  for (const auto& v : out) {
    if (v) r.values.push_back(*v);
    else ++r.undefined;
  }
  r.defined = r.values.size();
  if (2 * r.undefined > n_iter)
    throw UndefinedMetric(std::to_string(r.undefined) + " of " + std::to_string(n_iter) +
                          " bootstrap iterations were undefined");
  double sum = 0.0;
  for (double v : r.values) sum += v;
  r.mean = sum / static_cast<double>(r.defined);
  double sq = 0.0;
  for (double v : r.values) sq += (v - r.mean) * (v - r.mean);
  r.std = std::sqrt(sq / static_cast<double>(r.defined));
  r.ci_lo = percentile(r.values, 0.025);
  r.ci_hi = percentile(r.values, 0.975);
  return r;
}

// ---------------------------------------------------------------------------
// Healthcare utilization.

// Distinct calendar days with any event per year of observation. The span is
// floored at one day.
inline double utilization_rate(const SubjectTimeline& t) {
  std::set<std::chrono::sys_days> days_seen;
  for (const auto& e : t.events) days_seen.insert(calendar_day(e.time));
  const double span_days = std::max(1.0, static_cast<double>((t.observation_end() - t.observation_start()).count()) /
                                              static_cast<double>(kDay.count()));
  return static_cast<double>(days_seen.size()) / (span_days / 365.0);
}

struct TertileCuts {
  double lower = 0.0;
  double upper = 0.0;
  int tertile_of(double v) const { return v <= lower ? 1 : (v <= upper ? 2 : 3); }
};

// Cut points are the values at ranks ceil(n/3) and ceil(2n/3); a value equal
// to a cut falls in the lower tertile.
inline TertileCuts tertile_cuts(std::vector<double> values) {
  if (values.empty()) throw ValidationError("tertiles of an empty set");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return {values[(n + 2) / 3 - 1], values[(2 * n + 2) / 3 - 1]};
}

// Sets utilization_tertile on every sample. Cuts are computed over the
// distinct subjects of `samples`.
inline TertileCuts assign_utilization_tertiles(std::vector<CohortSample>& samples, const Dataset& d) {
  std::map<SubjectId, double> rate;
  for (const auto& s : samples) {
    if (rate.count(s.subject_id)) continue;
    const SubjectTimeline* t = d.find(s.subject_id);
    if (!t) throw ValidationError("sample subject " + std::to_string(s.subject_id) + " not in dataset");
    rate[s.subject_id] = utilization_rate(*t);
  }
  if (rate.empty()) return {};
  std::vector<double> values;
  for (const auto& [id, r] : rate) values.push_back(r);
  const TertileCuts cuts = tertile_cuts(values);
  for (auto& s : samples) s.attributes.utilization_tertile = cuts.tertile_of(rate[s.subject_id]);
  return cuts;
}

// ---------------------------------------------------------------------------
// Subgroups and the fairness gap.

inline const std::vector<std::string>& subgroup_attributes() {
  static const std::vector<std::string> a = {"sex", "race", "utilization"};
  return a;
}

inline std::optional<std::string> attribute_value(const SampleAttributes& a, std::string_view attr) {
  if (attr == "sex") return a.sex;
  if (attr == "race") return a.race;
  if (attr == "utilization") {
    if (!a.utilization_tertile) return std::nullopt;
    return std::to_string(*a.utilization_tertile);
  }
  throw ValidationError("unknown subgroup attribute '" + std::string(attr) + "'");
}

struct GroupMetrics {
  std::size_t n = 0;
  std::optional<double> auroc;
  std::optional<double> brier;
  std::optional<double> complement_auroc;
  std::optional<double> complement_brier;
};

struct Gap {
  std::optional<double> delta_auroc;
  std::optional<std::string> argmax_auroc;
  std::optional<double> delta_brier;
  std::optional<std::string> argmax_brier;
  std::vector<std::string> skipped;  // groups whose metric or complement is undefined
};

struct SubgroupAnalysis {
  std::map<std::string, GroupMetrics> groups;
  std::size_t excluded_missing = 0;
  Gap gap;
};

namespace detail {

inline std::optional<double> try_metric(const MetricFn& f, const std::vector<int>& l,
                                        const std::vector<double>& s) {
  try {
    return f(l, s);
  } catch (const UndefinedMetric&) {
    return std::nullopt;
  }
}

}  // namespace detail

// max over groups of |d_g - d_not_g|, the complement being every other sample
// with the attribute present.
inline std::pair<std::optional<double>, std::optional<std::string>> fairness_gap(
    const std::map<std::string, std::pair<std::optional<double>, std::optional<double>>>& group_and_complement,
    std::vector<std::string>* skipped = nullptr) {
  std::optional<double> best;
  std::optional<std::string> arg;
  for (const auto& [g, dc] : group_and_complement) {
    if (!dc.first || !dc.second) {
      if (skipped) skipped->push_back(g);
      continue;
    }
    const double d = std::abs(*dc.first - *dc.second);
    if (!best || d > *best) {
      best = d;
      arg = g;
    }
  }
  return {best, arg};
}

inline SubgroupAnalysis analyze_subgroups(const std::vector<CohortSample>& samples,
                                          const std::vector<double>& probs, std::string_view attr) {
  SubgroupAnalysis out;
  std::map<std::string, std::vector<std::size_t>> members;
  std::vector<std::size_t> present;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    auto v = attribute_value(samples[i].attributes, attr);
    if (!v) {
      ++out.excluded_missing;
      continue;
    }
    members[*v].push_back(i);
    present.push_back(i);
  }
  auto gather = [&](auto pred) {
    std::pair<std::vector<int>, std::vector<double>> r;
    for (auto i : present)
      if (pred(i)) {
        r.first.push_back(samples[i].label);
        r.second.push_back(probs[i]);
      }
    return r;
  };
  std::map<std::string, std::pair<std::optional<double>, std::optional<double>>> a_pairs, b_pairs;
  for (const auto& [g, idx] : members) {
    std::set<std::size_t> in(idx.begin(), idx.end());
    auto [lg, sg] = gather([&](std::size_t i) { return in.count(i) > 0; });
    auto [lc, sc] = gather([&](std::size_t i) { return in.count(i) == 0; });
    GroupMetrics m;
    m.n = idx.size();
    m.auroc = detail::try_metric(auroc, lg, sg);
    m.brier = detail::try_metric(brier, lg, sg);
    m.complement_auroc = detail::try_metric(auroc, lc, sc);
    m.complement_brier = detail::try_metric(brier, lc, sc);
    a_pairs[g] = {m.auroc, m.complement_auroc};
    b_pairs[g] = {m.brier, m.complement_brier};
    out.groups[g] = m;
  }
  std::tie(out.gap.delta_auroc, out.gap.argmax_auroc) = fairness_gap(a_pairs, &out.gap.skipped);
  std::tie(out.gap.delta_brier, out.gap.argmax_brier) = fairness_gap(b_pairs);
  return out;
}

// ---------------------------------------------------------------------------
// Reports.

struct MetricSummary {
  std::optional<double> point;
  std::optional<BootstrapResult> boot;
};

struct MetricReport {
  std::string task;
  std::string model;
  std::size_t n_eval = 0;
  double prevalence = 0.0;
  MetricSummary auroc;
  MetricSummary brier;
  std::map<std::string, SubgroupAnalysis> subgroups;
  std::vector<std::string> warnings;
};

struct EvaluationOptions {
  std::size_t bootstrap_iterations = kBootstrapIterations;
  std::uint64_t seed = 0;
  bool subject_bootstrap = false;
  std::vector<std::string> attributes = subgroup_attributes();
  unsigned threads = 1;
};

inline MetricReport evaluate(const std::string& task, const std::string& model,
                             const std::vector<CohortSample>& samples, const std::vector<double>& probs,
                             const EvaluationOptions& opt = {}) {
  if (samples.size() != probs.size()) throw ValidationError("samples and predictions differ in length");
  MetricReport r;
  r.task = task;
  r.model = model;
  r.n_eval = samples.size();
  std::vector<int> labels;
  std::vector<SubjectId> subjects;
  for (const auto& s : samples) {
    labels.push_back(s.label);
    subjects.push_back(s.subject_id);
    r.prevalence += s.label;
  }
  if (!samples.empty()) r.prevalence /= static_cast<double>(samples.size());
  auto summarize = [&](const MetricFn& f, const char* name) {
    MetricSummary m;
    m.point = detail::try_metric(f, labels, probs);
    if (!m.point) {
      r.warnings.push_back(std::string(name) + " undefined on the evaluation set");
      return m;
    }
    try {
      m.boot = bootstrap(f, labels, probs, opt.bootstrap_iterations, opt.seed, opt.threads,
                         opt.subject_bootstrap ? &subjects : nullptr);
      if (m.boot->undefined)
        r.warnings.push_back(std::string(name) + ": " + std::to_string(m.boot->undefined) +
                             " undefined bootstrap iteration(s) skipped");
    } catch (const UndefinedMetric& e) {
      r.warnings.push_back(std::string(name) + ": " + e.what());
    }
    return m;
  };
  r.auroc = summarize(auroc, "auroc");
  r.brier = summarize(brier, "brier");
  for (const auto& a : opt.attributes) r.subgroups[a] = analyze_subgroups(samples, probs, a);
  return r;
}

inline nlohmann::ordered_json to_json(const MetricReport& r) {
  using J = nlohmann::ordered_json;
  auto opt = [](const std::optional<double>& v) { return v ? J(*v) : J(); };
  auto summary = [&](const MetricSummary& m) {
    J j;
    j["point"] = opt(m.point);
    if (m.boot) {
      j["boot_mean"] = m.boot->mean;
      j["boot_std"] = m.boot->std;
      j["ci95"] = {m.boot->ci_lo, m.boot->ci_hi};
      j["boot_undefined"] = m.boot->undefined;
    } else {
      j["boot_mean"] = J();
      j["boot_std"] = J();
      j["ci95"] = J();
      j["boot_undefined"] = J();
    }
    return j;
  };
  J j;
  j["task"] = r.task;
  j["model"] = r.model;
  j["n_eval"] = r.n_eval;
  j["prevalence"] = r.prevalence;
  j["auroc"] = summary(r.auroc);
  j["brier"] = summary(r.brier);
  J sub = J::object();
  J gaps = J::object();
  for (const auto& [attr, a] : r.subgroups) {
    J groups = J::object();
    for (const auto& [g, m] : a.groups)
      groups[g] = {{"n", m.n},
                   {"auroc", opt(m.auroc)},
                   {"brier", opt(m.brier)},
                   {"complement_auroc", opt(m.complement_auroc)},
                   {"complement_brier", opt(m.complement_brier)}};
    sub[attr] = {{"groups", groups}, {"excluded_missing", a.excluded_missing}};
    gaps[attr] = {{"delta_auroc", opt(a.gap.delta_auroc)},
                  {"argmax_group_auroc", a.gap.argmax_auroc ? J(*a.gap.argmax_auroc) : J()},
                  {"delta_brier", opt(a.gap.delta_brier)},
                  {"argmax_group_brier", a.gap.argmax_brier ? J(*a.gap.argmax_brier) : J()},
                  {"skipped_groups", a.gap.skipped}};
  }
  j["subgroup_metrics"] = sub;
  j["gaps"] = gaps;
  j["warnings"] = r.warnings;
  return j;
}

// Table cell "mean (std)" from the bootstrap, "NA" when undefined.
inline std::string mean_std_cell(const MetricSummary& m) {
  if (!m.boot) return "NA";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f (%.3f)", m.boot->mean, m.boot->std);
  return buf;
}

// Average rank of each model across tasks for one metric. Within a task,
// better values rank first and ties share the mean rank; tasks where the
// metric is undefined for any model are skipped.
inline std::map<std::string, std::pair<double, std::size_t>> average_ranks(
    const std::vector<MetricReport>& reports, bool auroc_metric) {
  std::map<std::string, std::vector<const MetricReport*>> by_task;
  for (const auto& r : reports) by_task[r.task].push_back(&r);
  std::map<std::string, std::pair<double, std::size_t>> out;
  for (const auto& [task, rs] : by_task) {
    std::vector<std::pair<double, std::string>> vals;
    bool complete = true;
    for (const auto* r : rs) {
      const auto& m = auroc_metric ? r->auroc : r->brier;
      if (!m.point) {
        complete = false;
        break;
      }
      vals.push_back({auroc_metric ? -*m.point : *m.point, r->model});
    }
    if (!complete) continue;
    std::sort(vals.begin(), vals.end());
    for (std::size_t i = 0; i < vals.size();) {
      std::size_t j = i;
      while (j < vals.size() && vals[j].first == vals[i].first) ++j;
      const double rank = 0.5 * static_cast<double>(i + 1 + j);
      for (std::size_t k = i; k < j; ++k) {
        out[vals[k].second].first += rank;
        ++out[vals[k].second].second;
      }
      i = j;
    }
  }
  for (auto& [model, v] : out) v.first /= static_cast<double>(v.second);
  return out;
}

}  // namespace cohort_forge
