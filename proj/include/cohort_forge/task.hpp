#pragma once

// Declarative task definitions and their text format.
//
// A task file is a list of `key = value` lines. Blank lines and lines whose
// first non-blank character is '#' are ignored. A value continues onto the
// following lines while it has unclosed brackets or parentheses.

#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cohort_forge/error.hpp"
#include "cohort_forge/predicate.hpp"
#include "cohort_forge/time.hpp"

namespace cohort_forge {

enum class TaskKind { kOutcome, kPhenotype };

enum class LabelRule {
  kCaseInWindow,    // 1 iff `case` first matches inside the prediction window
  kStayLongerThan,  // 1 iff the episode ends later than anchor + threshold
};

enum class ControlIndex {
  kRandom,  // seeded uniform choice among qualifying encounters
  kLatest,  // latest qualifying encounter
};

struct Exclusion {
  enum class Kind {
    kSameDayOutcome,
    kCensoredWithin,
    kCaseBeforeAtRisk,
    kCaseWithinDaysBeforeAtRisk,
    kSubjectHas,
  };
  Kind kind = Kind::kSameDayOutcome;
  Duration duration{0};                // CENSORED_WITHIN, CASE_WITHIN_DAYS_BEFORE_AT_RISK
  std::vector<Predicate> predicate;    // SUBJECT_HAS: exactly one element

  friend bool operator==(const Exclusion&, const Exclusion&) = default;
};

struct TaskDefinition {
  std::string name;
  TaskKind kind = TaskKind::kOutcome;
  Predicate trigger;
  Duration prediction_offset{0};
  Duration min_prior_observation{0};
  bool require_data_in_observation = false;
  std::optional<Predicate> at_risk;
  Predicate case_;
  std::optional<Duration> prediction_horizon;  // nullopt = END_OF_EPISODE
  LabelRule label = LabelRule::kCaseInWindow;
  Duration stay_threshold{0};
  std::optional<Duration> washout;
  std::optional<Duration> censor_gap;
  std::optional<Predicate> index_filter;
  ControlIndex control_index = ControlIndex::kRandom;
  std::vector<Exclusion> exclusions;

  bool end_of_episode() const { return !prediction_horizon.has_value(); }
  bool has_exclusion(Exclusion::Kind k) const {
    for (const auto& e : exclusions)
      if (e.kind == k) return true;
    return false;
  }

  std::set<std::string> vocabularies() const {
    std::set<std::string> v;
    collect_vocabularies(trigger, v);
    collect_vocabularies(case_, v);
    if (at_risk) collect_vocabularies(*at_risk, v);
    if (index_filter) collect_vocabularies(*index_filter, v);
    for (const auto& e : exclusions)
      for (const auto& p : e.predicate) collect_vocabularies(p, v);
    return v;
  }

  friend bool operator==(const TaskDefinition&, const TaskDefinition&) = default;
};

// Canonical key order, also the order used by the serializer.
inline const std::vector<std::string>& task_keys() {
  static const std::vector<std::string> keys = {
      "name",         "kind",          "trigger",      "prediction_offset",
      "min_prior_observation",         "require_data_in_observation",
      "at_risk",      "case",          "prediction_horizon", "label",
      "washout",      "censor_gap",    "index_filter", "control_index",
      "exclusions"};
  return keys;
}

namespace detail {

struct ConfigEntry {
  std::string value;
  std::size_t line = 0;
};

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline int bracket_balance(std::string_view s) {
  int depth = 0;
  for (char c : s) {
    if (c == '(' || c == '[') ++depth;
    if (c == ')' || c == ']') --depth;
  }
  return depth;
}

inline std::map<std::string, ConfigEntry> read_config_entries(std::string_view text) {
  std::map<std::string, ConfigEntry> out;
  std::istringstream in{std::string(text)};
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string line = trim(raw);
    if (line.empty() || line.front() == '#') continue;
    const std::size_t start_line = line_no;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("expected 'key = value'", start_line);
    std::string key = trim(std::string_view(line).substr(0, eq));
    std::string value = trim(std::string_view(line).substr(eq + 1));
    while (bracket_balance(value) > 0) {
      if (!std::getline(in, raw)) throw ParseError("unclosed bracket in '" + key + "'", start_line);
      ++line_no;
      std::string more = trim(raw);
      if (more.empty() || more.front() == '#') continue;
      value += " " + more;
    }
    if (bracket_balance(value) < 0) throw ParseError("unbalanced brackets in '" + key + "'", start_line);
    if (key.empty()) throw ParseError("empty key", start_line);
    if (std::find(task_keys().begin(), task_keys().end(), key) == task_keys().end())
      throw ParseError("unknown key '" + key + "'", start_line);
    if (value.empty()) throw ParseError("empty value for '" + key + "'", start_line);
    if (!out.emplace(key, ConfigEntry{value, start_line}).second)
      throw ParseError("duplicate key '" + key + "'", start_line);
  }
  return out;
}

inline Duration parse_config_duration(const ConfigEntry& e, const std::string& key,
                                      bool allow_negative = false) {
  try {
    return parse_duration(e.value, allow_negative);
  } catch (const ValidationError& err) {
    throw ParseError(key + ": " + err.what(), e.line);
  }
}

inline Predicate parse_config_predicate(const ConfigEntry& e, const std::string& key) {
  try {
    return parse_predicate(e.value);
  } catch (const ValidationError& err) {
    throw ParseError(key + ": " + err.what(), e.line);
  }
}

inline Exclusion exclusion_from_term(const Term& t) {
  auto single_duration = [&]() {
    if (!t.args || t.args->size() != 1 || !t.args->front().raw || t.args->front().key)
      throw ParseError(t.name + " takes one duration");
    return parse_duration(*t.args->front().raw);
  };
  auto no_args = [&]() {
    if (t.args || t.list) throw ParseError(t.name + " takes no arguments");
  };
  Exclusion x;
  if (t.name == "SAME_DAY_OUTCOME") {
    no_args();
    x.kind = Exclusion::Kind::kSameDayOutcome;
  } else if (t.name == "CENSORED_WITHIN") {
    x.kind = Exclusion::Kind::kCensoredWithin;
    x.duration = single_duration();
  } else if (t.name == "CASE_BEFORE_AT_RISK") {
    no_args();
    x.kind = Exclusion::Kind::kCaseBeforeAtRisk;
  } else if (t.name == "CASE_WITHIN_DAYS_BEFORE_AT_RISK") {
    x.kind = Exclusion::Kind::kCaseWithinDaysBeforeAtRisk;
    x.duration = single_duration();
  } else if (t.name == "SUBJECT_HAS") {
    if (!t.args || t.args->size() != 1 || t.args->front().term.empty())
      throw ParseError("SUBJECT_HAS takes one predicate");
    x.kind = Exclusion::Kind::kSubjectHas;
    x.predicate.push_back(predicate_from_term(t.args->front().term.front()));
  } else {
    throw ParseError("unknown exclusion '" + t.name + "'");
  }
  return x;
}

}  // namespace detail

inline TaskDefinition parse_task(std::string_view text) {
  using detail::ConfigEntry;
  const auto entries = detail::read_config_entries(text);
  auto get = [&](const std::string& key) -> const ConfigEntry* {
    auto it = entries.find(key);
    return it == entries.end() ? nullptr : &it->second;
  };
  auto require = [&](const std::string& key) -> const ConfigEntry& {
    const ConfigEntry* e = get(key);
    if (!e) throw ParseError("missing required field '" + key + "'");
    return *e;
  };

  TaskDefinition t;
  t.name = require("name").value;
  for (char c : t.name)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-'))
      throw ParseError("task name may only contain letters, digits, '_' and '-'", require("name").line);

  const auto& kind = require("kind");
  if (kind.value == "outcome") t.kind = TaskKind::kOutcome;
  else if (kind.value == "phenotype") t.kind = TaskKind::kPhenotype;
  else throw ParseError("kind must be 'outcome' or 'phenotype'", kind.line);
  const bool phenotype = t.kind == TaskKind::kPhenotype;

  t.trigger = detail::parse_config_predicate(require("trigger"), "trigger");
  t.case_ = detail::parse_config_predicate(require("case"), "case");
  if (const auto* e = get("prediction_offset"))
    t.prediction_offset = detail::parse_config_duration(*e, "prediction_offset", true);
  if (const auto* e = get("min_prior_observation"))
    t.min_prior_observation = detail::parse_config_duration(*e, "min_prior_observation");
  if (const auto* e = get("require_data_in_observation")) {
    if (e->value == "true") t.require_data_in_observation = true;
    else if (e->value == "false") t.require_data_in_observation = false;
    else throw ParseError("require_data_in_observation must be true or false", e->line);
  }
  if (const auto* e = get("at_risk")) t.at_risk = detail::parse_config_predicate(*e, "at_risk");
  if (phenotype && !t.at_risk) throw ParseError("phenotype task requires 'at_risk'");

  const auto& horizon = require("prediction_horizon");
  if (horizon.value == "END_OF_EPISODE") {
    if (phenotype) throw ParseError("END_OF_EPISODE only applies to outcome tasks", horizon.line);
  } else {
    t.prediction_horizon = detail::parse_config_duration(horizon, "prediction_horizon");
    if (t.prediction_horizon->count() <= 0)
      throw ParseError("prediction_horizon must be positive", horizon.line);
  }

  if (const auto* e = get("label")) {
    if (e->value == "CASE_IN_WINDOW") {
      t.label = LabelRule::kCaseInWindow;
    } else {
      try {
        TermParser p(e->value);
        Term term = p.parse_term();
        p.expect_end();
        if (term.name != "STAY_LONGER_THAN" || !term.args || term.args->size() != 1 ||
            !term.args->front().raw || term.args->front().key || term.list)
          throw ParseError("label must be CASE_IN_WINDOW or STAY_LONGER_THAN(duration)");
        t.label = LabelRule::kStayLongerThan;
        t.stay_threshold = parse_duration(*term.args->front().raw);
      } catch (const ValidationError& err) {
        throw ParseError(std::string("label: ") + err.what(), e->line);
      }
      if (phenotype) throw ParseError("STAY_LONGER_THAN only applies to outcome tasks", e->line);
    }
  }

  if (const auto* e = get("washout")) t.washout = detail::parse_config_duration(*e, "washout");
  if (const auto* e = get("censor_gap")) {
    if (!phenotype) throw ParseError("censor_gap only applies to phenotype tasks", e->line);
    t.censor_gap = detail::parse_config_duration(*e, "censor_gap");
  }
  if (const auto* e = get("index_filter"))
    t.index_filter = detail::parse_config_predicate(*e, "index_filter");
  if (const auto* e = get("control_index")) {
    if (!phenotype) throw ParseError("control_index only applies to phenotype tasks", e->line);
    if (e->value == "RANDOM") t.control_index = ControlIndex::kRandom;
    else if (e->value == "LATEST") t.control_index = ControlIndex::kLatest;
    else throw ParseError("control_index must be RANDOM or LATEST", e->line);
  }
  if (const auto* e = get("exclusions")) {
    try {
      TermParser p(e->value);
      for (const auto& term : p.parse_term_list()) t.exclusions.push_back(detail::exclusion_from_term(term));
      p.expect_end();
    } catch (const ValidationError& err) {
      throw ParseError(std::string("exclusions: ") + err.what(), e->line);
    }
    for (const auto& x : t.exclusions) {
      const bool phenotype_only = x.kind == Exclusion::Kind::kCaseBeforeAtRisk ||
                                  x.kind == Exclusion::Kind::kCaseWithinDaysBeforeAtRisk;
      const bool outcome_only = x.kind == Exclusion::Kind::kSameDayOutcome ||
                                x.kind == Exclusion::Kind::kCensoredWithin;
      if (phenotype_only && !phenotype)
        throw ParseError("at-risk exclusions only apply to phenotype tasks", e->line);
      if (outcome_only && phenotype)
        throw ParseError("SAME_DAY_OUTCOME and CENSORED_WITHIN only apply to outcome tasks", e->line);
    }
  }
  return t;
}

inline TaskDefinition load_task(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open task config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_task(ss.str());
  } catch (const ParseError& e) {
    throw ParseError(path + ": " + e.what());
  }
}

inline std::string to_string(const Exclusion& x) {
  switch (x.kind) {
    case Exclusion::Kind::kSameDayOutcome: return "SAME_DAY_OUTCOME";
    case Exclusion::Kind::kCensoredWithin: return "CENSORED_WITHIN(" + format_duration(x.duration) + ")";
    case Exclusion::Kind::kCaseBeforeAtRisk: return "CASE_BEFORE_AT_RISK";
    case Exclusion::Kind::kCaseWithinDaysBeforeAtRisk:
      return "CASE_WITHIN_DAYS_BEFORE_AT_RISK(" + format_duration(x.duration) + ")";
    case Exclusion::Kind::kSubjectHas: return "SUBJECT_HAS(" + to_string(x.predicate.front()) + ")";
  }
  return {};
}

// Canonical text: keys in task_keys() order, optional fields only when set,
// one line per key.
inline std::string serialize_task(const TaskDefinition& t) {
  const bool phenotype = t.kind == TaskKind::kPhenotype;
  std::string out;
  auto line = [&](const std::string& k, const std::string& v) { out += k + " = " + v + "\n"; };
  line("name", t.name);
  line("kind", phenotype ? "phenotype" : "outcome");
  line("trigger", to_string(t.trigger));
  line("prediction_offset", format_duration(t.prediction_offset, true));
  line("min_prior_observation", format_duration(t.min_prior_observation));
  line("require_data_in_observation", t.require_data_in_observation ? "true" : "false");
  if (t.at_risk) line("at_risk", to_string(*t.at_risk));
  line("case", to_string(t.case_));
  line("prediction_horizon", t.prediction_horizon ? format_duration(*t.prediction_horizon) : "END_OF_EPISODE");
  line("label", t.label == LabelRule::kCaseInWindow
                    ? "CASE_IN_WINDOW"
                    : "STAY_LONGER_THAN(" + format_duration(t.stay_threshold) + ")");
  if (t.washout) line("washout", format_duration(*t.washout));
  if (t.censor_gap) line("censor_gap", format_duration(*t.censor_gap));
  if (t.index_filter) line("index_filter", to_string(*t.index_filter));
  if (phenotype) line("control_index", t.control_index == ControlIndex::kRandom ? "RANDOM" : "LATEST");
  std::string ex = "[";
  for (std::size_t i = 0; i < t.exclusions.size(); ++i) {
    if (i) ex += ", ";
    ex += to_string(t.exclusions[i]);
  }
  line("exclusions", ex + "]");
  return out;
}

}  // namespace cohort_forge
