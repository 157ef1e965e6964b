#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "cohort_forge/csv.hpp"
#include "cohort_forge/error.hpp"
#include "cohort_forge/event_store.hpp"
#include "cohort_forge/parallel.hpp"

namespace cohort_forge {

inline constexpr std::string_view kIcd9Vocabulary = "ICD9CM";
inline constexpr std::string_view kIcd10Vocabulary = "ICD10CM";

// ---------------------------------------------------------------------------
// Units.

struct UnitConversionTable {
  std::map<std::string, std::string> canonical_unit;  // lab code -> unit
  std::map<std::pair<std::string, std::string>, double> factors;

  std::optional<double> factor(const std::string& from, const std::string& to) const {
    if (from == to) return 1.0;
    auto it = factors.find({from, to});
    if (it == factors.end()) return std::nullopt;
    return it->second;
  }

  // Adds a conversion and its inverse. Non-positive factors and inconsistent
  // inverse pairs are configuration errors.
  void add_factor(const std::string& from, const std::string& to, double f) {
    if (!(f > 0.0) || !std::isfinite(f))
      throw ValidationError("unit factor " + from + " -> " + to + " must be positive");
    if (from == to) {
      if (f != 1.0) throw ValidationError("unit factor " + from + " -> " + from + " must be 1");
      return;
    }
    auto check = [&](const std::pair<std::string, std::string>& key, double v) {
      auto [it, inserted] = factors.emplace(key, v);
      if (!inserted && std::abs(it->second - v) > 1e-9 * std::max(std::abs(v), 1.0))
        throw ValidationError("inconsistent unit factors for " + key.first + " <-> " + key.second);
    };
    check({from, to}, f);
    check({to, from}, 1.0 / f);
  }
};

inline UnitConversionTable read_unit_factors(std::istream& in) {
  csv::Reader reader(in);
  std::vector<std::string> row;
  if (!reader.next(row) || row.size() < 3 || row[0] != "unit_from" ||
      row[1] != "unit_to" || row[2] != "factor")
    throw ParseError("factor table must start with 'unit_from,unit_to,factor'", 1);
  UnitConversionTable t;
  while (reader.next(row)) {
    if (row.size() == 1 && row[0].empty()) continue;
    if (row.size() != 3) throw ParseError("expected 3 columns", reader.line());
    auto f = csv::parse_double(row[2]);
    if (!f) throw ParseError("malformed factor '" + row[2] + "'", reader.line());
    t.add_factor(row[0], row[1], *f);
  }
  return t;
}

inline UnitConversionTable load_unit_factors(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open factor table: " + path);
  return read_unit_factors(in);
}

// Modal unit per code over unit-bearing events; ties go to the
// lexicographically smallest unit. Factors are copied from `factors`.
inline UnitConversionTable infer_canonical_units(const Dataset& d,
                                                 const UnitConversionTable& factors = {}) {
  std::map<std::string, std::map<std::string, std::size_t>> counts;
  for (const auto& t : d.timelines())
    for (const auto& e : t.events)
      if (e.unit) ++counts[e.code][*e.unit];
  UnitConversionTable out;
  out.factors = factors.factors;
  for (const auto& [code, units] : counts) {
    const std::string* best = nullptr;
    std::size_t best_n = 0;
    for (const auto& [unit, n] : units) {  // map order = lexicographic
      if (n > best_n) {
        best = &unit;
        best_n = n;
      }
    }
    out.canonical_unit.emplace(code, *best);
  }
  return out;
}

struct ConversionCounts {
  std::size_t converted = 0;
  std::size_t unconvertible = 0;
};

inline ConversionCounts convert_timeline_units(SubjectTimeline& t,
                                               const UnitConversionTable& table) {
  ConversionCounts c;
  for (auto& e : t.events) {
    if (!e.unit) continue;
    auto it = table.canonical_unit.find(e.code);
    if (it == table.canonical_unit.end() || *e.unit == it->second) continue;
    auto f = table.factor(*e.unit, it->second);
    if (!f) {
      ++c.unconvertible;
      continue;
    }
    if (e.numeric_value) e.numeric_value = *e.numeric_value * *f;
    e.unit = it->second;
    ++c.converted;
  }
  return c;
}

struct ConversionResult {
  Dataset dataset;
  ConversionCounts counts;
};

inline ConversionResult convert_units(const Dataset& d, const UnitConversionTable& table,
                                      unsigned threads = 1) {
  for (const auto& [key, f] : table.factors)
    if (!(f > 0.0)) throw ValidationError("non-positive unit factor " + key.first + " -> " + key.second);
  std::vector<SubjectTimeline> timelines = d.timelines();
  std::vector<ConversionCounts> per(timelines.size());
  parallel_for(timelines.size(), threads,
               [&](std::size_t i) { per[i] = convert_timeline_units(timelines[i], table); });
  ConversionResult r;
  for (const auto& c : per) {
    r.counts.converted += c.converted;
    r.counts.unconvertible += c.unconvertible;
  }
  r.dataset = Dataset::from_timelines(std::move(timelines), d.provenance(), d.uncoded_values());
  return r;
}

// ---------------------------------------------------------------------------
// ICD-9 -> ICD-10.

namespace detail {
inline bool all_digits(std::string_view s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; });
}
inline bool all_alnum(std::string_view s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](unsigned char c) {
    return std::isdigit(c) || std::isupper(c);
  });
}
inline std::string upper(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return out;
}
}  // namespace detail

// Dotted canonical form ("5790" -> "579.0", "E8800" -> "E880.0"), or nullopt
// when the string is not a syntactically valid ICD-9-CM diagnosis code.
inline std::optional<std::string> normalize_icd9(std::string_view raw) {
  std::string s = detail::upper(raw);
  const std::size_t head = !s.empty() && s[0] == 'E' ? 4 : 3;
  if (s.find('.') == std::string::npos && s.size() > head) s.insert(head, ".");
  const auto dot = s.find('.');
  std::string_view stem = std::string_view(s).substr(0, dot);
  std::string_view tail = dot == std::string::npos ? std::string_view{} : std::string_view(s).substr(dot + 1);
  if (dot != std::string::npos && !detail::all_digits(tail)) return std::nullopt;
  if (stem.size() == 3 && detail::all_digits(stem)) {
    if (tail.size() > 2) return std::nullopt;
  } else if (stem.size() == 3 && stem[0] == 'V' && detail::all_digits(stem.substr(1))) {
    if (tail.size() > 2) return std::nullopt;
  } else if (stem.size() == 4 && stem[0] == 'E' && detail::all_digits(stem.substr(1))) {
    if (tail.size() > 1) return std::nullopt;
  } else {
    return std::nullopt;
  }
  return s;
}

// Dotted canonical ICD-10-CM form ("K900" -> "K90.0").
inline std::optional<std::string> normalize_icd10(std::string_view raw) {
  std::string s = detail::upper(raw);
  if (s.find('.') == std::string::npos && s.size() > 3) s.insert(3, ".");
  const auto dot = s.find('.');
  std::string_view stem = std::string_view(s).substr(0, dot);
  if (stem.size() != 3 || !std::isupper(static_cast<unsigned char>(stem[0])) ||
      !detail::all_alnum(stem.substr(1)))
    return std::nullopt;
  if (dot != std::string::npos) {
    std::string_view tail = std::string_view(s).substr(dot + 1);
    if (tail.size() > 4 || !detail::all_alnum(tail)) return std::nullopt;
  }
  return s;
}

struct GemMappingTable {
  std::map<std::string, std::vector<std::string>> rows;  // icd9 -> candidates

  const std::vector<std::string>* candidates(const std::string& icd9) const {
    auto it = rows.find(icd9);
    return it == rows.end() ? nullptr : &it->second;
  }
};

// CSV `icd9,icd10,flags`; flags are ignored, "NoDx" targets are skipped.
inline GemMappingTable read_gem(std::istream& in) {
  csv::Reader reader(in);
  std::vector<std::string> row;
  if (!reader.next(row) || row.size() < 2 || row[0] != "icd9" || row[1] != "icd10")
    throw ParseError("GEM file must start with 'icd9,icd10,flags'", 1);
  GemMappingTable g;
  while (reader.next(row)) {
    if (row.size() == 1 && row[0].empty()) continue;
    if (row.size() < 2) throw ParseError("expected at least 2 columns", reader.line());
    if (row[1] == "NoDx") continue;
    auto icd9 = normalize_icd9(row[0]);
    auto icd10 = normalize_icd10(row[1]);
    if (!icd9 || !icd10) throw ParseError("malformed GEM row", reader.line());
    auto& c = g.rows[*icd9];
    if (std::find(c.begin(), c.end(), *icd10) == c.end()) c.push_back(*icd10);
  }
  return g;
}

inline GemMappingTable load_gem(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open GEM file: " + path);
  return read_gem(in);
}

// ICD-10 parent relation. By default a code's parent is its character-prefix
// truncation (K90.41 -> K90.4 -> K90); explicit overrides must map to a
// strictly shorter code, which keeps every chain finite.
class CodeHierarchy {
 public:
  CodeHierarchy() = default;
  explicit CodeHierarchy(std::map<std::string, std::string> overrides)
      : overrides_(std::move(overrides)) {
    for (const auto& [child, parent] : overrides_)
      if (parent.size() >= child.size() || parent.size() < 3)
        throw ValidationError("hierarchy override " + child + " -> " + parent +
                              " must shorten the code and stay at >= 3 characters");
  }

  std::optional<std::string> parent(const std::string& code) const {
    if (auto it = overrides_.find(code); it != overrides_.end()) return it->second;
    if (code.size() <= 3) return std::nullopt;
    std::string p = code.substr(0, code.size() - 1);
    if (!p.empty() && p.back() == '.') p.pop_back();
    return p;
  }

  static std::string root(const std::string& code) { return code.substr(0, 3); }

 private:
  std::map<std::string, std::string> overrides_;
};

enum class MapStatus { kMapped, kDropped, kMalformed };

struct Icd9MapResult {
  MapStatus status = MapStatus::kDropped;
  std::string icd10;  // set when kMapped
};

using CodeFrequencies = std::map<std::string, std::size_t>;

// Native ICD-10 identifier counts, e.g. {"K90.0": 17}.
inline CodeFrequencies icd10_frequencies(const Dataset& d) {
  CodeFrequencies f;
  for (const auto& t : d.timelines())
    for (const auto& e : t.events)
      if (e.vocabulary() == kIcd10Vocabulary) {
        auto norm = normalize_icd10(identifier_of(e.code));
        ++f[norm ? *norm : std::string(identifier_of(e.code))];
      }
  return f;
}

inline Icd9MapResult map_icd9(std::string_view code, const GemMappingTable& gem,
                              const CodeFrequencies& freq, const CodeHierarchy& h) {
  auto norm = normalize_icd9(code);
  if (!norm) return {MapStatus::kMalformed, {}};
  const auto* cands = gem.candidates(*norm);
  if (!cands || cands->empty()) return {MapStatus::kDropped, {}};
  auto count = [&](const std::string& c) -> std::size_t {
    auto it = freq.find(c);
    return it == freq.end() ? 0 : it->second;
  };
  const std::string* best = nullptr;
  for (const auto& c : *cands) {
    if (!best || count(c) > count(*best) || (count(c) == count(*best) && c < *best))
      best = &c;
  }
  if (count(*best) > 0) return {MapStatus::kMapped, *best};
  std::string cur = *best;
  while (auto p = h.parent(cur)) {
    if (count(*p) > 0) return {MapStatus::kMapped, *p};
    cur = *p;
  }
  return {MapStatus::kMapped, CodeHierarchy::root(*best)};
}

// ---------------------------------------------------------------------------
// Missingness.

struct EtlOptions {
  std::set<std::string> lab_vocabularies{"LOINC", "LAB"};
  // Lab values with no unit are treated as missing values.
  bool unitless_values_missing = true;
};

struct MissingnessCounts {
  std::size_t value_missing_flagged = 0;
  std::size_t unitless_flagged = 0;  // subset of value_missing_flagged
  std::size_t dropped_no_code = 0;
};

inline MissingnessCounts flag_timeline_missingness(SubjectTimeline& t, const EtlOptions& opt) {
  MissingnessCounts c;
  for (auto& e : t.events) {
    if (!opt.lab_vocabularies.contains(std::string(e.vocabulary())) || e.value_missing) continue;
    if (!e.numeric_value) {
      e.value_missing = true;
      ++c.value_missing_flagged;
    } else if (!e.unit && opt.unitless_values_missing) {
      e.numeric_value.reset();
      e.value_missing = true;
      ++c.value_missing_flagged;
      ++c.unitless_flagged;
    }
  }
  return c;
}

struct MissingnessResult {
  Dataset dataset;
  MissingnessCounts counts;
};

inline MissingnessResult handle_missingness(const Dataset& d, const EtlOptions& opt = {}) {
  std::vector<SubjectTimeline> timelines = d.timelines();
  MissingnessResult r;
  for (auto& t : timelines) {
    auto c = flag_timeline_missingness(t, opt);
    r.counts.value_missing_flagged += c.value_missing_flagged;
    r.counts.unitless_flagged += c.unitless_flagged;
  }
  r.counts.dropped_no_code = d.uncoded_values().size();
  // Flagging can reorder events that share (time, code).
  r.dataset = Dataset::from_timelines(std::move(timelines), d.provenance());
  return r;
}

// ---------------------------------------------------------------------------
// Full ETL pass.

struct EtlReport {
  std::size_t converted = 0;
  std::size_t unconvertible = 0;
  std::size_t value_missing_flagged = 0;
  std::size_t dropped_no_code = 0;
  std::size_t dropped_no_gem = 0;
  std::size_t unitless_flagged = 0;
  std::size_t icd9_mapped = 0;
  std::size_t rejected_malformed_icd9 = 0;

  nlohmann::ordered_json to_json() const {
    return {{"converted", converted},
            {"unconvertible", unconvertible},
            {"value_missing_flagged", value_missing_flagged},
            {"dropped_no_code", dropped_no_code},
            {"dropped_no_gem", dropped_no_gem},
            {"unitless_flagged", unitless_flagged},
            {"icd9_mapped", icd9_mapped},
            {"rejected_malformed_icd9", rejected_malformed_icd9}};
  }
};

struct EtlResult {
  Dataset dataset;
  EtlReport report;
  UnitConversionTable units;
};

struct Icd9Counts {
  std::size_t mapped = 0, dropped = 0, malformed = 0;
};

inline Icd9Counts remap_timeline_icd9(SubjectTimeline& t, const GemMappingTable& gem,
                                      const CodeFrequencies& freq, const CodeHierarchy& h) {
  Icd9Counts c;
  std::vector<Event> kept;
  kept.reserve(t.events.size());
  for (auto& e : t.events) {
    if (e.vocabulary() != kIcd9Vocabulary) {
      kept.push_back(std::move(e));
      continue;
    }
    auto r = map_icd9(identifier_of(e.code), gem, freq, h);
    switch (r.status) {
      case MapStatus::kMapped:
        e.code = std::string(kIcd10Vocabulary) + "/" + r.icd10;
        kept.push_back(std::move(e));
        ++c.mapped;
        break;
      case MapStatus::kDropped: ++c.dropped; break;
      case MapStatus::kMalformed: ++c.malformed; break;
    }
  }
  t.events = std::move(kept);
  std::sort(t.events.begin(), t.events.end());
  return c;
}

// Missingness, then ICD-9 mapping (frequencies measured on the native ICD-10
// events before mapping), then unit inference and conversion.
inline EtlResult run_etl(const Dataset& raw, const GemMappingTable& gem,
                         const UnitConversionTable& factors,
                         const CodeHierarchy& hierarchy = {},
                         const EtlOptions& opt = {}, unsigned threads = 1) {
  EtlResult out;
  auto miss = handle_missingness(raw, opt);
  out.report.value_missing_flagged = miss.counts.value_missing_flagged;
  out.report.unitless_flagged = miss.counts.unitless_flagged;
  out.report.dropped_no_code = miss.counts.dropped_no_code;

  const CodeFrequencies freq = icd10_frequencies(miss.dataset);
  std::vector<SubjectTimeline> timelines = miss.dataset.timelines();
  std::vector<Icd9Counts> per(timelines.size());
  parallel_for(timelines.size(), threads, [&](std::size_t i) {
    per[i] = remap_timeline_icd9(timelines[i], gem, freq, hierarchy);
  });
  for (const auto& c : per) {
    out.report.icd9_mapped += c.mapped;
    out.report.dropped_no_gem += c.dropped;
    out.report.rejected_malformed_icd9 += c.malformed;
  }
  Dataset mapped = Dataset::from_timelines(std::move(timelines), raw.provenance());

  out.units = infer_canonical_units(mapped, factors);
  auto conv = convert_units(mapped, out.units, threads);
  out.report.converted = conv.counts.converted;
  out.report.unconvertible = conv.counts.unconvertible;
  out.dataset = std::move(conv.dataset);
  return out;
}

}  // namespace cohort_forge
