#pragma once

// Seeded synthetic event data with planted, known risk.
//
// Each subject gets an observation span, demographics and a visit process
// whose rate comes from a three-component utilization mixture. Visits emit
// vocabulary codes and labs at configured per-visit rates. Planted tasks then
// draw labels from sigmoid(intercept + sum_k coef_k * log(1 + n_k)), with n_k
// the count of risk code k visible at the anchor, and inject the outcome
// events that the matching task config will find.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cohort_forge/cohort.hpp"
#include "cohort_forge/csv.hpp"
#include "cohort_forge/error.hpp"
#include "cohort_forge/event_store.hpp"
#include "cohort_forge/metrics.hpp"
#include "cohort_forge/parallel.hpp"
#include "cohort_forge/probe.hpp"
#include "cohort_forge/random.hpp"
#include "cohort_forge/time.hpp"

namespace cohort_forge {

struct CodeRate {
  std::string code;
  double rate = 0.0;  // probability per visit
};

struct LabUnit {
  std::string unit;
  double scale = 1.0;  // emitted value = value * scale
  double weight = 1.0;
};

struct LabSpec {
  std::string code;
  double rate = 0.0;
  double mean = 0.0;
  double sd = 1.0;
  std::vector<LabUnit> units;
  double missing_rate = 0.0;   // lab recorded without a value
  double unitless_rate = 0.0;  // value recorded without a unit
};

struct MixtureComponent {
  double weight = 0.0;
  double visits_per_year = 0.0;
};

struct RiskCode {
  std::string code;
  double coef = 0.0;
};

enum class PlantedKind { kInpatientDeath, kLongStay, kReadmission, kPhenotype };

struct CaseEvent {
  std::string code;
  double offset_days = 0.0;
  std::optional<double> value;
};

struct PlantedTask {
  std::string task;
  PlantedKind kind = PlantedKind::kPhenotype;
  double base_prevalence = 0.1;
  std::vector<RiskCode> risk_codes;
  std::string outcome_code = "DEATH/death";  // inpatient death
  double threshold_days = 7.0;               // long stay
  double window_days = 30.0;                 // readmission
  std::vector<std::string> at_risk_codes;    // phenotype
  std::vector<CaseEvent> case_events;        // phenotype, offsets from onset
  double onset_max_days = 300.0;             // phenotype onset drawn in (anchor, anchor + this]
};

struct GeneratorConfig {
  std::size_t n_subjects = 0;
  std::uint64_t seed = 0;
  Timestamp start = make_timestamp(2008, 1, 1);
  double years_span = 14.0;
  double observation_years_min = 3.0;
  double observation_years_max = 12.0;
  double age_min = 5.0;
  double age_max = 85.0;
  std::vector<MixtureComponent> utilization;
  double emergency_fraction = 0.1;
  double inpatient_per_year = 0.1;
  double los_min_days = 3.0;
  double los_max_days = 14.0;
  double years_before_inpatient = 2.0;
  std::map<std::string, double> sex;   // "" is the missing mass
  std::map<std::string, double> race;
  std::vector<CodeRate> vocabulary;
  std::vector<LabSpec> labs;
  double uncoded_value_rate = 0.0;
  std::vector<PlantedTask> planted;

  void validate() const {
    auto sums_to_one = [](double s) { return std::abs(s - 1.0) < 1e-9; };
    auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
    if (vocabulary.empty()) throw ValidationError("generator vocabulary is empty");
    if (utilization.empty()) throw ValidationError("utilization mixture is empty");
    double w = 0.0;
    for (const auto& c : utilization) {
      if (c.weight < 0 || c.visits_per_year < 0) throw ValidationError("negative utilization parameter");
      w += c.weight;
    }
    if (!sums_to_one(w)) throw ValidationError("utilization weights must sum to 1");
    for (const auto* cat : {&sex, &race}) {
      double s = 0.0;
      for (const auto& [k, p] : *cat) {
        if (!prob(p)) throw ValidationError("demographic probability outside [0, 1]");
        s += p;
      }
      if (!sums_to_one(s)) throw ValidationError("demographic probabilities must sum to 1");
    }
    for (const auto& c : vocabulary) {
      if (!is_valid_code(c.code)) throw ValidationError("malformed vocabulary code " + c.code);
      if (!prob(c.rate)) throw ValidationError("rate outside [0, 1] for " + c.code);
    }
    for (const auto& l : labs) {
      if (!is_valid_code(l.code) || !prob(l.rate) || !prob(l.missing_rate) || !prob(l.unitless_rate) ||
          l.units.empty() || l.sd < 0)
        throw ValidationError("bad lab spec " + l.code);
    }
    if (!prob(emergency_fraction) || !prob(uncoded_value_rate) || inpatient_per_year < 0)
      throw ValidationError("bad visit parameters");
    if (!(observation_years_min > 0) || observation_years_max < observation_years_min ||
        observation_years_max > years_span)
      throw ValidationError("bad observation span");
    if (age_max < age_min || age_min < 0) throw ValidationError("bad age range");
    if (!(los_min_days > 2.0) || los_max_days <= los_min_days)
      throw ValidationError("length of stay must exceed 48h");
    for (const auto& p : planted) {
      if (!(p.base_prevalence > 0.0 && p.base_prevalence < 1.0))
        throw ValidationError("base_prevalence must be in (0, 1) for " + p.task);
      for (const auto& r : p.risk_codes)
        if (!is_valid_code(r.code)) throw ValidationError("malformed risk code " + r.code);
      if (p.kind == PlantedKind::kPhenotype && (p.case_events.empty() || p.at_risk_codes.empty()))
        throw ValidationError("phenotype " + p.task + " needs at_risk_codes and case_events");
      if (p.kind == PlantedKind::kLongStay &&
          !(p.threshold_days > los_min_days && p.threshold_days < los_max_days))
        throw ValidationError("long-stay threshold must lie inside the length-of-stay range");
    }
  }

  static GeneratorConfig from_json(const nlohmann::json& j) {
    GeneratorConfig c;
    try {
      if (!j.contains("seed")) throw ValidationError("generator config needs a seed");
      c.n_subjects = j.at("n_subjects");
      c.seed = j.at("seed");
      if (j.contains("start_date")) {
        auto t = parse_timestamp(j["start_date"].get<std::string>());
        if (!t) throw ValidationError("bad start_date");
        c.start = *t;
      }
      c.years_span = j.value("years_span", c.years_span);
      if (j.contains("observation_years")) {
        c.observation_years_min = j["observation_years"].at(0);
        c.observation_years_max = j["observation_years"].at(1);
      }
      if (j.contains("age_at_start")) {
        c.age_min = j["age_at_start"].at(0);
        c.age_max = j["age_at_start"].at(1);
      }
      for (const auto& m : j.at("utilization_mixture"))
        c.utilization.push_back({m.at("weight"), m.at("visits_per_year")});
      c.emergency_fraction = j.value("emergency_fraction", c.emergency_fraction);
      c.inpatient_per_year = j.value("inpatient_per_year", c.inpatient_per_year);
      if (j.contains("los_days")) {
        c.los_min_days = j["los_days"].at(0);
        c.los_max_days = j["los_days"].at(1);
      }
      c.years_before_inpatient = j.value("years_before_inpatient", c.years_before_inpatient);
      c.sex = j.at("demographics").at("sex").get<std::map<std::string, double>>();
      c.race = j.at("demographics").at("race").get<std::map<std::string, double>>();
      for (const auto& v : j.at("vocabulary")) c.vocabulary.push_back({v.at("code"), v.at("rate")});
      for (const auto& l : j.value("labs", nlohmann::json::array())) {
        LabSpec s{l.at("code"), l.at("rate"), l.at("mean"), l.at("sd"), {},
                  l.value("missing_rate", 0.0), l.value("unitless_rate", 0.0)};
        for (const auto& u : l.at("units")) s.units.push_back({u.at("unit"), u.at("scale"), u.at("weight")});
        c.labs.push_back(std::move(s));
      }
      c.uncoded_value_rate = j.value("uncoded_value_rate", 0.0);
      for (const auto& p : j.value("planted_tasks", nlohmann::json::array())) {
        PlantedTask t;
        t.task = p.at("task");
        const std::string kind = p.at("kind");
        if (kind == "inpatient_death") t.kind = PlantedKind::kInpatientDeath;
        else if (kind == "long_stay") t.kind = PlantedKind::kLongStay;
        else if (kind == "readmission") t.kind = PlantedKind::kReadmission;
        else if (kind == "phenotype") t.kind = PlantedKind::kPhenotype;
        else throw ValidationError("unknown planted kind " + kind);
        t.base_prevalence = p.at("base_prevalence");
        for (const auto& r : p.value("risk_codes", nlohmann::json::array()))
          t.risk_codes.push_back({r.at("code"), r.at("coef")});
        t.outcome_code = p.value("outcome_code", t.outcome_code);
        t.threshold_days = p.value("threshold_days", t.threshold_days);
        t.window_days = p.value("window_days", t.window_days);
        t.at_risk_codes = p.value("at_risk_codes", std::vector<std::string>{});
        for (const auto& e : p.value("case_events", nlohmann::json::array())) {
          CaseEvent ce{e.at("code"), e.value("offset_days", 0.0), std::nullopt};
          if (e.contains("value")) ce.value = e["value"].get<double>();
          t.case_events.push_back(std::move(ce));
        }
        t.onset_max_days = p.value("onset_max_days", t.onset_max_days);
        c.planted.push_back(std::move(t));
      }
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(std::string("bad generator config: ") + e.what());
    }
    c.validate();
    return c;
  }

  static GeneratorConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open generator config " + path);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("bad generator config " + path + ": " + e.what());
    }
    return from_json(j);
  }
};

struct GroundTruthRow {
  SubjectId subject_id = 0;
  Timestamp anchor_time{};  // the prediction time of the planted sample
  double true_risk = 0.0;   // linear predictor, intercept included
  int label = 0;
  friend bool operator==(const GroundTruthRow&, const GroundTruthRow&) = default;
};

struct GeneratedData {
  Dataset dataset;
  std::map<std::string, std::vector<GroundTruthRow>> truth;
  std::map<std::string, double> intercepts;
  std::map<std::string, std::size_t> visit_count_by_code;  // visits at which each vocabulary code could fire
};

namespace detail {

struct SubjectDraw {
  std::vector<Event> events;
  std::vector<UncodedValue> uncoded;
  std::map<std::string, std::vector<GroundTruthRow>> truth;
  std::map<std::string, std::vector<double>> risk_without_intercept;
  std::size_t visits = 0;
};

inline Duration fractional_days(double d) {
  return Duration{static_cast<std::int64_t>(std::llround(d * 86400.0))};
}

inline std::string pick(Rng& rng, const std::map<std::string, double>& probs) {
  std::vector<double> w;
  std::vector<std::string> keys;
  for (const auto& [k, p] : probs) {
    keys.push_back(k);
    w.push_back(p);
  }
  return keys[rng.categorical(w)];
}

class RiskCounter {
 public:
  RiskCounter(const std::vector<Event>& events, const PlantedTask& task) : events_(events), task_(task) {}
  double at(Timestamp t) const {
    double x = 0.0;
    for (const auto& r : task_.risk_codes) {
      double n = 0.0;
      for (const auto& e : events_)
        if (e.time <= t && e.code == r.code) n += 1.0;
      x += r.coef * std::log1p(n);
    }
    return x;
  }

 private:
  const std::vector<Event>& events_;
  const PlantedTask& task_;
};

inline SubjectDraw draw_subject(const GeneratorConfig& cfg, SubjectId id,
                                const std::map<std::string, double>& intercepts) {
  SubjectDraw out;
  Rng rng(hash_combine(cfg.seed, static_cast<std::uint64_t>(id)));
  auto& ev = out.events;
  auto emit = [&](Timestamp t, std::string code) {
    Event e;
    e.subject_id = id;
    e.time = t;
    e.code = std::move(code);
    ev.push_back(std::move(e));
    return ev.size() - 1;
  };
  auto years = [](double y) { return fractional_days(y * 365.0); };

  const double obs_years = rng.uniform(cfg.observation_years_min, cfg.observation_years_max);
  const Timestamp obs_start = cfg.start + years(rng.uniform(0.0, cfg.years_span - obs_years));
  Timestamp obs_end = obs_start + years(obs_years);
  const double age = rng.uniform(cfg.age_min, cfg.age_max);
  const auto birth = calendar_day(obs_start - years(age));
  const std::string sex = pick(rng, cfg.sex);
  const std::string race = pick(rng, cfg.race);
  emit(obs_start, std::string(kBirthCode));
  ev.back().text_value = format_date(birth);
  if (!sex.empty()) emit(obs_start, std::string(kSexPrefix) + sex);
  if (!race.empty()) emit(obs_start, std::string(kRacePrefix) + race);

  // Background visits.
  std::vector<double> weights;
  for (const auto& c : cfg.utilization) weights.push_back(c.weight);
  const double rate = cfg.utilization[rng.categorical(weights)].visits_per_year;
  const auto n_visits = rng.poisson(rate * obs_years);
  std::vector<Timestamp> visits{obs_start, obs_end};
  for (std::uint64_t k = 0; k < n_visits; ++k)
    visits.push_back(obs_start + years(rng.uniform(0.0, obs_years)));
  std::sort(visits.begin(), visits.end());
  for (Timestamp v : visits) {
    ++out.visits;
    emit(v, rng.bernoulli(cfg.emergency_fraction) ? "VISIT/emergency" : "VISIT/outpatient");
    for (const auto& c : cfg.vocabulary)
      if (rng.bernoulli(c.rate)) emit(v, c.code);
    for (const auto& l : cfg.labs) {
      if (!rng.bernoulli(l.rate)) continue;
      const double value = rng.normal(l.mean, l.sd);
      std::vector<double> uw;
      for (const auto& u : l.units) uw.push_back(u.weight);
      const auto& unit = l.units[rng.categorical(uw)];
      emit(v, l.code);
      if (rng.bernoulli(l.missing_rate)) {
        ev.back().unit = unit.unit;
      } else if (rng.bernoulli(l.unitless_rate)) {
        ev.back().numeric_value = value;
      } else {
        ev.back().numeric_value = value * unit.scale;
        ev.back().unit = unit.unit;
      }
    }
    if (rng.bernoulli(cfg.uncoded_value_rate)) out.uncoded.push_back({id, v, rng.normal(0.0, 1.0)});
  }

  auto planted_of = [&](PlantedKind k) -> const PlantedTask* {
    for (const auto& p : cfg.planted)
      if (p.kind == k) return &p;
    return nullptr;
  };
  auto draw_label = [&](const PlantedTask& p, Timestamp anchor, Timestamp visible_at) {
    const double x = RiskCounter(ev, p).at(visible_at);
    const double risk = intercepts.at(p.task) + x;
    const int label = rng.bernoulli(sigmoid(risk)) ? 1 : 0;
    out.truth[p.task].push_back({id, anchor, risk, label});
    out.risk_without_intercept[p.task].push_back(x);
    return label;
  };

  // Inpatient episodes.
  const PlantedTask* death = planted_of(PlantedKind::kInpatientDeath);
  const PlantedTask* long_stay = planted_of(PlantedKind::kLongStay);
  const PlantedTask* readmit = planted_of(PlantedKind::kReadmission);
  const Duration los_max = fractional_days(cfg.los_max_days);
  auto gap = [&] {
    return cfg.inpatient_per_year > 0 ? years(rng.exponential(cfg.inpatient_per_year)) : years(1e6);
  };
  Timestamp t = obs_start + years(cfg.years_before_inpatient) + gap();
  std::vector<std::size_t> readmission_rows;
  while (t + los_max < obs_end) {
    const Timestamp admission = t;
    const Timestamp pt = admission + hours(48);
    double los_days;
    int is_long = 0;
    if (long_stay) {
      is_long = draw_label(*long_stay, pt, pt);
      los_days = is_long ? rng.uniform(long_stay->threshold_days + 0.05, cfg.los_max_days)
                         : rng.uniform(cfg.los_min_days, long_stay->threshold_days - 0.05);
    } else {
      los_days = rng.uniform(cfg.los_min_days, cfg.los_max_days);
    }
    Timestamp discharge = admission + fractional_days(los_days);
    emit(admission, "VISIT/inpatient-admission");
    if (death && draw_label(*death, pt, pt)) {
      // A death never moves the stay across the long-stay threshold.
      const Timestamp earliest = is_long ? admission + fractional_days(long_stay->threshold_days) : pt;
      const Timestamp when =
          earliest + fractional_days(rng.uniform(1.0 / 24.0, (discharge - earliest).count() / 86400.0));
      emit(when, death->outcome_code);
      emit(when, "VISIT/inpatient-discharge");
      obs_end = when;
      break;
    }
    emit(discharge, "VISIT/inpatient-discharge");
    const double window = readmit ? readmit->window_days : 30.0;
    if (readmit) {
      readmission_rows.push_back(out.truth[readmit->task].size());
      if (draw_label(*readmit, discharge, discharge)) {
        t = discharge + fractional_days(rng.uniform(1.05, window - 0.05));
        obs_end = std::max(obs_end, t + los_max + kDay);
        continue;
      }
    }
    t = discharge + fractional_days(window + 0.05) + gap();
  }
  std::erase_if(ev, [&](const Event& e) { return e.time > obs_end; });
  if (readmit) {
    // Keep only discharges followed by a full observed window.
    auto& rows = out.truth[readmit->task];
    auto& xs = out.risk_without_intercept[readmit->task];
    std::vector<GroundTruthRow> kept_rows;
    std::vector<double> kept_x;
    for (std::size_t i = 0; i < rows.size(); ++i)
      if (rows[i].anchor_time + fractional_days(readmit->window_days) <= obs_end) {
        kept_rows.push_back(rows[i]);
        kept_x.push_back(xs[i]);
      }
    rows = std::move(kept_rows);
    xs = std::move(kept_x);
  }

  // Phenotype onsets.
  for (const auto& p : cfg.planted) {
    if (p.kind != PlantedKind::kPhenotype) continue;
    double max_offset = 0.0;
    for (const auto& c : p.case_events) max_offset = std::max(max_offset, c.offset_days);
    std::vector<Timestamp> anchors;
    for (Timestamp v : visits)
      if (v >= obs_start + years(2.0) && v + fractional_days(p.onset_max_days + max_offset) <= obs_end)
        anchors.push_back(v);
    if (anchors.empty()) continue;
    const Timestamp anchor = anchors[rng.below(anchors.size())];
    bool at_risk = false;
    for (const auto& e : ev)
      if (e.time <= anchor &&
          std::find(p.at_risk_codes.begin(), p.at_risk_codes.end(), e.code) != p.at_risk_codes.end())
        at_risk = true;
    if (!at_risk) continue;
    if (!draw_label(p, anchor, anchor)) continue;
    const Timestamp onset = anchor + fractional_days(rng.uniform(1.0, p.onset_max_days));
    for (const auto& c : p.case_events) {
      emit(onset + fractional_days(c.offset_days), c.code);
      if (c.value) ev.back().numeric_value = *c.value;
    }
  }
  std::sort(ev.begin(), ev.end());
  return out;
}

// Intercept b with mean sigmoid(b + x_i) equal to the target prevalence.
inline double calibrate_intercept(const std::vector<double>& x, double prevalence) {
  if (x.empty()) return logit(prevalence);
  double lo = -50.0;
  double hi = 50.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    double m = 0.0;
    for (double v : x) m += sigmoid(mid + v);
    m /= static_cast<double>(x.size());
    (m < prevalence ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

}  // namespace detail

// Subjects are numbered 1..n. A pilot pass with intercepts logit(prevalence)
// fixes each task's intercept so that the mean planted probability over its
// anchors equals the configured prevalence; the final pass uses it.
inline GeneratedData generate(const GeneratorConfig& cfg, unsigned threads = 1) {
  cfg.validate();
  std::map<std::string, double> intercepts;
  for (const auto& p : cfg.planted) intercepts[p.task] = logit(p.base_prevalence);

  auto run = [&](const std::map<std::string, double>& b) {
    std::vector<detail::SubjectDraw> draws(cfg.n_subjects);
    parallel_for(cfg.n_subjects, threads, [&](std::size_t i) {
      draws[i] = detail::draw_subject(cfg, static_cast<SubjectId>(i + 1), b);
    });
    return draws;
  };
  if (!cfg.planted.empty() && cfg.n_subjects > 0) {
    const auto pilot = run(intercepts);
    for (const auto& p : cfg.planted) {
      std::vector<double> x;
      for (const auto& d : pilot)
        if (auto it = d.risk_without_intercept.find(p.task); it != d.risk_without_intercept.end())
          x.insert(x.end(), it->second.begin(), it->second.end());
      intercepts[p.task] = detail::calibrate_intercept(x, p.base_prevalence);
    }
  }
  auto draws = run(intercepts);

  GeneratedData out;
  out.intercepts = intercepts;
  std::vector<Event> events;
  std::vector<UncodedValue> uncoded;
  std::size_t visits = 0;
  for (auto& d : draws) {
    events.insert(events.end(), std::make_move_iterator(d.events.begin()), std::make_move_iterator(d.events.end()));
    uncoded.insert(uncoded.end(), d.uncoded.begin(), d.uncoded.end());
    for (auto& [task, rows] : d.truth) {
      auto& dst = out.truth[task];
      dst.insert(dst.end(), rows.begin(), rows.end());
    }
    visits += d.visits;
  }
  for (const auto& p : cfg.planted) out.truth[p.task];  // every planted task has a (possibly empty) table
  for (const auto& c : cfg.vocabulary) out.visit_count_by_code[c.code] = visits;
  out.dataset = Dataset::from_events(std::move(events), std::move(uncoded),
                                     Provenance{"synthetic seed=" + std::to_string(cfg.seed)});
  return out;
}

// AUROC of the planted risk against the sampled labels.
inline double oracle_bayes_auroc(const std::vector<GroundTruthRow>& rows) {
  std::vector<int> labels;
  std::vector<double> risk;
  for (const auto& r : rows) {
    labels.push_back(r.label);
    risk.push_back(r.true_risk);
  }
  return auroc(labels, risk);
}

inline void write_ground_truth(const std::vector<GroundTruthRow>& rows, std::ostream& out) {
  csv::write_row(out, {"subject_id", "anchor_time", "true_risk", "label"});
  for (const auto& r : rows)
    csv::write_row(out, {std::to_string(r.subject_id), format_timestamp(r.anchor_time),
                         csv::format_double(r.true_risk), std::to_string(r.label)});
}

inline std::vector<GroundTruthRow> read_ground_truth(std::istream& in) {
  csv::Reader reader(in);
  std::vector<std::string> row;
  if (!reader.next(row) || row != std::vector<std::string>{"subject_id", "anchor_time", "true_risk", "label"})
    throw ParseError("bad ground truth header", 1);
  std::vector<GroundTruthRow> out;
  while (reader.next(row)) {
    if (row.size() == 1 && row[0].empty()) continue;
    auto id = csv::parse_int(row.at(0));
    auto t = parse_timestamp(row.at(1));
    auto r = csv::parse_double(row.at(2));
    if (row.size() != 4 || !id || !t || !r || (row[3] != "0" && row[3] != "1"))
      throw ParseError("bad ground truth row", reader.line());
    out.push_back({*id, *t, *r, row[3] == "1" ? 1 : 0});
  }
  return out;
}

}  // namespace cohort_forge
