#pragma once

// Independent reference implementations for metric, mapping and feature
// tests. Each one follows the textbook definition as literally as possible.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "cohort_forge.hpp"

namespace cf_test::oracle {

using namespace cohort_forge;

// Fraction of (positive, negative) pairs ranked correctly, ties counting 1/2.
inline double pairwise_auroc(const std::vector<int>& y, const std::vector<double>& s) {
  double good = 0.0;
  double pairs = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i)
    for (std::size_t j = 0; j < y.size(); ++j) {
      if (y[i] != 1 || y[j] != 0) continue;
      pairs += 1.0;
      if (s[i] > s[j]) good += 1.0;
      else if (s[i] == s[j]) good += 0.5;
    }
  return good / pairs;
}

inline double direct_brier(const std::vector<int>& y, const std::vector<double>& p) {
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += (p[i] - y[i]) * (p[i] - y[i]);
  return s / static_cast<double>(y.size());
}

// max over groups g of |metric(g) - metric(everything else)|, recomputed
// from scratch for each group.
inline double complement_loop_gap(const std::vector<std::string>& group, const std::vector<int>& y,
                                  const std::vector<double>& s, bool use_auroc) {
  std::set<std::string> names(group.begin(), group.end());
  double best = 0.0;
  for (const auto& g : names) {
    std::vector<int> yi, yo;
    std::vector<double> si, so;
    for (std::size_t i = 0; i < y.size(); ++i) {
      if (group[i] == g) {
        yi.push_back(y[i]);
        si.push_back(s[i]);
      } else {
        yo.push_back(y[i]);
        so.push_back(s[i]);
      }
    }
    const double a = use_auroc ? pairwise_auroc(yi, si) : direct_brier(yi, si);
    const double b = use_auroc ? pairwise_auroc(yo, so) : direct_brier(yo, so);
    best = std::max(best, std::abs(a - b));
  }
  return best;
}

// Tertile by rank: sort subjects by rate, split the ranking into thirds of
// size ceil(n/3), ceil(2n/3) - ceil(n/3), rest; equal rates share the lowest
// tertile any of them reaches.
inline std::map<SubjectId, int> sort_tertiles(const std::map<SubjectId, double>& rate) {
  std::vector<std::pair<double, SubjectId>> order;
  for (const auto& [id, r] : rate) order.emplace_back(r, id);
  std::sort(order.begin(), order.end());
  const std::size_t n = order.size();
  const std::size_t a = (n + 2) / 3;
  const std::size_t b = (2 * n + 2) / 3;
  std::map<double, int> lowest;
  for (std::size_t i = 0; i < n; ++i) {
    const int t = i < a ? 1 : (i < b ? 2 : 3);
    auto [it, fresh] = lowest.emplace(order[i].first, t);
    if (!fresh) it->second = std::min(it->second, t);
  }
  std::map<SubjectId, int> out;
  for (const auto& [r, id] : order) out[id] = lowest[r];
  return out;
}

// ICD-9 to ICD-10 by walking the candidate's character prefixes.
inline std::optional<std::string> hierarchy_walk(const std::string& icd9, const GemMappingTable& gem,
                                                 const std::map<std::string, std::size_t>& freq) {
  const auto* cands = gem.candidates(icd9);
  if (!cands) return std::nullopt;
  auto f = [&](const std::string& c) { return freq.count(c) ? freq.at(c) : 0; };
  std::vector<std::string> sorted = *cands;
  std::sort(sorted.begin(), sorted.end(), [&](const std::string& a, const std::string& b) {
    return f(a) != f(b) ? f(a) > f(b) : a < b;
  });
  const std::string chosen = sorted.front();
  std::string undotted;
  for (char c : chosen)
    if (c != '.') undotted += c;
  for (std::size_t len = undotted.size(); len >= 3; --len) {
    std::string p = undotted.substr(0, len);
    if (p.size() > 3) p.insert(3, ".");
    if (f(p) > 0) return p;
  }
  return chosen.substr(0, 3);
}

// Per-sample count of each code among events at or before prediction time.
inline std::map<std::string, double> scan_counts(const SubjectTimeline& t, Timestamp pt) {
  std::map<std::string, double> c;
  for (const auto& e : t.events)
    if (e.time <= pt && !e.is_demographic()) c[e.code] += 1.0;
  return c;
}

}  // namespace cf_test::oracle
