#pragma once

// Temporal predicate algebra over a subject's events.
//
// Every predicate denotes a set of *match times*: distinct event timestamps
// at which the predicate is satisfied by the events up to and including that
// time. Because membership of t only depends on events with time <= t, the
// earliest match time is the moment the predicate first becomes true.
//
//   CODE_IN[codes](lo..hi)   times of events whose code is in the set
//                            (trailing '*' = prefix match) and, when a range
//                            is given, whose numeric value lies in [lo, hi]
//   ANY(p, ...)              union
//   ALL_WITHIN(p, ..., within=w)
//                            times t matched by some child such that every
//                            child has a match in [t - w, t]; no window means
//                            unbounded
//   SEQUENCE(first, then, within=w, min_gap=g)
//                            matches t of `then` with a match f of `first`,
//                            g <= t - f <= w
//   COUNT_DISTINCT_DAYS(p, k=n)
//                            matches of p from the first one that falls on
//                            the n-th distinct calendar day onwards
//   AGE_BETWEEN(lo, hi)      event times at which completed age in years is
//                            in [lo, hi]
//   NOT(p)                   event times strictly before p's first match

#include <algorithm>
#include <cctype>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "cohort_forge/csv.hpp"
#include "cohort_forge/error.hpp"
#include "cohort_forge/event_store.hpp"
#include "cohort_forge/time.hpp"

namespace cohort_forge {

// Owning pointer with value semantics, for recursive variants.
template <typename T>
class Box {
 public:
  Box(T value) : ptr_(std::make_unique<T>(std::move(value))) {}
  Box(const Box& o) : ptr_(std::make_unique<T>(*o.ptr_)) {}
  Box(Box&&) noexcept = default;
  Box& operator=(const Box& o) {
    if (this != &o) ptr_ = std::make_unique<T>(*o.ptr_);
    return *this;
  }
  Box& operator=(Box&&) noexcept = default;

  const T& operator*() const { return *ptr_; }
  const T* operator->() const { return ptr_.get(); }

  friend bool operator==(const Box& a, const Box& b) { return *a == *b; }

 private:
  std::unique_ptr<T> ptr_;
};

// Exact codes plus "VOCAB/prefix*" wildcards.
class CodeSet {
 public:
  CodeSet() = default;
  explicit CodeSet(std::vector<std::string> codes) : codes_(std::move(codes)) {
    if (codes_.empty()) throw ValidationError("empty code set");
    for (const auto& c : codes_) {
      const bool wildcard = !c.empty() && c.back() == '*';
      std::string_view body(c.data(), c.size() - (wildcard ? 1 : 0));
      if (wildcard ? body.find('/') == std::string_view::npos ||
                         body.find('/') == 0 ||
                         body.find('/', body.find('/') + 1) != std::string_view::npos
                   : !is_valid_code(body))
        throw ValidationError("malformed code '" + c + "' in code set");
      if (wildcard) prefixes_.emplace_back(body);
      else exact_.insert(c);
    }
  }

  bool contains(std::string_view code) const {
    if (exact_.find(code) != exact_.end()) return true;
    for (const auto& p : prefixes_)
      if (code.substr(0, p.size()) == p) return true;
    return false;
  }

  const std::vector<std::string>& codes() const { return codes_; }

  friend bool operator==(const CodeSet& a, const CodeSet& b) { return a.codes_ == b.codes_; }

 private:
  std::vector<std::string> codes_;
  std::set<std::string, std::less<>> exact_;
  std::vector<std::string> prefixes_;
};

struct ValueRange {
  double lo = 0.0;
  double hi = 0.0;
  friend bool operator==(const ValueRange&, const ValueRange&) = default;
};

struct Predicate;

struct CodeIn {
  CodeSet codes;
  std::optional<ValueRange> range;
  friend bool operator==(const CodeIn&, const CodeIn&) = default;
};
struct AnyOf {
  std::vector<Predicate> children;
  friend bool operator==(const AnyOf&, const AnyOf&);
};
struct AllWithin {
  std::vector<Predicate> children;
  std::optional<Duration> within;
  friend bool operator==(const AllWithin&, const AllWithin&);
};
struct Sequence {
  Box<Predicate> first;
  Box<Predicate> then;
  std::optional<Duration> within;
  Duration min_gap{0};
  friend bool operator==(const Sequence&, const Sequence&) = default;
};
struct CountDistinctDays {
  Box<Predicate> inner;
  int k = 1;
  friend bool operator==(const CountDistinctDays&, const CountDistinctDays&) = default;
};
struct AgeBetween {
  int min_years = 0;
  int max_years = 0;
  friend bool operator==(const AgeBetween&, const AgeBetween&) = default;
};
struct Not {
  Box<Predicate> inner;
  friend bool operator==(const Not&, const Not&) = default;
};

struct Predicate {
  std::variant<CodeIn, AnyOf, AllWithin, Sequence, CountDistinctDays, AgeBetween, Not> node;
  friend bool operator==(const Predicate&, const Predicate&) = default;
};

inline bool operator==(const AnyOf& a, const AnyOf& b) { return a.children == b.children; }
inline bool operator==(const AllWithin& a, const AllWithin& b) {
  return a.children == b.children && a.within == b.within;
}

// Vocabularies named anywhere in the predicate.
inline void collect_vocabularies(const Predicate& p, std::set<std::string>& out) {
  std::visit(
      [&](const auto& n) {
        using T = std::decay_t<decltype(n)>;
        if constexpr (std::is_same_v<T, CodeIn>) {
          for (const auto& c : n.codes.codes()) out.emplace(vocabulary_of(c));
        } else if constexpr (std::is_same_v<T, AnyOf> || std::is_same_v<T, AllWithin>) {
          for (const auto& c : n.children) collect_vocabularies(c, out);
        } else if constexpr (std::is_same_v<T, Sequence>) {
          collect_vocabularies(*n.first, out);
          collect_vocabularies(*n.then, out);
        } else if constexpr (std::is_same_v<T, CountDistinctDays> || std::is_same_v<T, Not>) {
          collect_vocabularies(*n.inner, out);
        }
      },
      p.node);
}

// True when removing events can only remove matches (no NOT inside).
inline bool is_monotone(const Predicate& p) {
  return std::visit(
      [](const auto& n) -> bool {
        using T = std::decay_t<decltype(n)>;
        if constexpr (std::is_same_v<T, Not>) return false;
        else if constexpr (std::is_same_v<T, AnyOf> || std::is_same_v<T, AllWithin>)
          return std::all_of(n.children.begin(), n.children.end(),
                             [](const Predicate& c) { return is_monotone(c); });
        else if constexpr (std::is_same_v<T, Sequence>) return is_monotone(*n.first) && is_monotone(*n.then);
        else if constexpr (std::is_same_v<T, CountDistinctDays>) return is_monotone(*n.inner);
        else return true;
      },
      p.node);
}

// ---------------------------------------------------------------------------
// Expression syntax. The same generic term grammar backs predicates and the
// structured values in task configs:
//
//   term := NAME ['[' raw (',' raw)* ']'] ['(' arg (',' arg)* ')']
//   arg  := NAME '=' raw | term | raw

struct Term;

struct TermArg {
  std::optional<std::string> key;
  std::optional<std::string> raw;  // keyword value or positional literal
  std::vector<Term> term;          // 0 or 1 element
};

struct Term {
  std::string name;
  std::optional<std::vector<std::string>> list;
  std::optional<std::vector<TermArg>> args;
};

class TermParser {
 public:
  explicit TermParser(std::string_view text) : s_(text) {}

  Term parse_term() {
    skip_ws();
    Term t;
    t.name = identifier();
    if (t.name.empty()) fail("expected a name");
    skip_ws();
    if (peek() == '[') {
      ++pos_;
      t.list.emplace();
      for (;;) {
        std::string item = raw_until(",]");
        if (item.empty()) fail("empty list item");
        t.list->push_back(std::move(item));
        if (peek() == ',') {
          ++pos_;
          continue;
        }
        expect(']');
        break;
      }
      skip_ws();
    }
    if (peek() == '(') {
      ++pos_;
      t.args.emplace();
      skip_ws();
      if (peek() == ')') {
        ++pos_;
        return t;
      }
      for (;;) {
        t.args->push_back(parse_arg());
        skip_ws();
        if (peek() == ',') {
          ++pos_;
          continue;
        }
        expect(')');
        break;
      }
    }
    return t;
  }

  // '[' term (',' term)* ']' or '[]'
  std::vector<Term> parse_term_list() {
    skip_ws();
    expect('[');
    std::vector<Term> out;
    skip_ws();
    if (peek() == ']') {
      ++pos_;
      return out;
    }
    for (;;) {
      out.push_back(parse_term());
      skip_ws();
      if (peek() == ',') {
        ++pos_;
        continue;
      }
      expect(']');
      break;
    }
    return out;
  }

  void expect_end() {
    skip_ws();
    if (pos_ != s_.size()) fail("unexpected trailing text");
  }

 private:
  TermArg parse_arg() {
    skip_ws();
    TermArg a;
    if (std::isalpha(static_cast<unsigned char>(peek())) || peek() == '_') {
      const std::size_t save = pos_;
      std::string name = identifier();
      skip_ws();
      if (peek() == '=') {
        ++pos_;
        a.key = std::move(name);
        a.raw = raw_until(",)");
        if (a.raw->empty()) fail("missing value for '" + *a.key + "'");
        return a;
      }
      pos_ = save;
      a.term.push_back(parse_term());
      return a;
    }
    a.raw = raw_until(",)");
    if (a.raw->empty()) fail("empty argument");
    return a;
  }

  std::string identifier() {
    const std::size_t start = pos_;
    while (pos_ < s_.size() &&
           (std::isalnum(static_cast<unsigned char>(s_[pos_])) || s_[pos_] == '_'))
      ++pos_;
    return std::string(s_.substr(start, pos_ - start));
  }

  std::string raw_until(std::string_view stops) {
    skip_ws();
    const std::size_t start = pos_;
    while (pos_ < s_.size() && stops.find(s_[pos_]) == std::string_view::npos &&
           s_[pos_] != '(' && s_[pos_] != '[')
      ++pos_;
    std::string out(s_.substr(start, pos_ - start));
    while (!out.empty() && std::isspace(static_cast<unsigned char>(out.back()))) out.pop_back();
    if (pos_ >= s_.size()) fail("unexpected end of expression");
    return out;
  }

  char peek() const { return pos_ < s_.size() ? s_[pos_] : '\0'; }
  void skip_ws() {
    while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) ++pos_;
  }
  void expect(char c) {
    skip_ws();
    if (peek() != c) fail(std::string("expected '") + c + "'");
    ++pos_;
  }
  [[noreturn]] void fail(const std::string& what) const {
    throw ParseError(what + " at offset " + std::to_string(pos_) + " in '" +
                     std::string(s_) + "'");
  }

  std::string_view s_;
  std::size_t pos_ = 0;
};

namespace detail {

inline int parse_int_literal(const std::string& raw, const std::string& ctx) {
  auto v = csv::parse_int(raw);
  if (!v || *v < 0 || *v > 100000) throw ParseError("bad integer '" + raw + "' in " + ctx);
  return static_cast<int>(*v);
}

inline ValueRange parse_range(const std::string& raw) {
  const auto dots = raw.find("..");
  if (dots == std::string::npos) throw ParseError("value range must be 'lo..hi', got '" + raw + "'");
  auto lo = csv::parse_double(raw.substr(0, dots));
  auto hi = csv::parse_double(raw.substr(dots + 2));
  if (!lo || !hi || *lo > *hi) throw ParseError("bad value range '" + raw + "'");
  return {*lo, *hi};
}

}  // namespace detail

inline Predicate predicate_from_term(const Term& t) {
  auto need_args = [&] {
    if (!t.args) throw ParseError(t.name + " needs an argument list");
    return *t.args;
  };
  auto children = [&](const std::vector<TermArg>& args, std::size_t min) {
    std::vector<Predicate> out;
    for (const auto& a : args)
      if (!a.term.empty()) out.push_back(predicate_from_term(a.term.front()));
    if (out.size() < min)
      throw ParseError(t.name + " needs at least " + std::to_string(min) + " predicate(s)");
    return out;
  };
  auto keyword = [&](const std::vector<TermArg>& args, std::string_view key) -> std::optional<std::string> {
    for (const auto& a : args)
      if (a.key && *a.key == key) return a.raw;
    return std::nullopt;
  };
  auto check_keys = [&](const std::vector<TermArg>& args, std::initializer_list<std::string_view> allowed) {
    for (const auto& a : args) {
      if (a.key && std::find(allowed.begin(), allowed.end(), *a.key) == allowed.end())
        throw ParseError("unknown argument '" + *a.key + "' for " + t.name);
      if (!a.key && a.raw && t.name != "AGE_BETWEEN" && t.name != "CODE_IN")
        throw ParseError("unexpected literal '" + *a.raw + "' in " + t.name);
    }
  };

  if (t.list && t.name != "CODE_IN") throw ParseError("only CODE_IN takes a code list");
  if (t.name == "CODE_IN") {
    if (!t.list) throw ParseError("CODE_IN needs a code list");
    CodeIn c{CodeSet(*t.list), std::nullopt};
    if (t.args) {
      if (t.args->size() != 1 || !t.args->front().raw || t.args->front().key)
        throw ParseError("CODE_IN takes a single value range 'lo..hi'");
      c.range = detail::parse_range(*t.args->front().raw);
    }
    return {c};
  }
  if (t.name == "ANY") {
    const auto& args = need_args();
    check_keys(args, {});
    return {AnyOf{children(args, 1)}};
  }
  if (t.name == "ALL_WITHIN") {
    const auto& args = need_args();
    check_keys(args, {"within"});
    AllWithin a{children(args, 1), std::nullopt};
    if (auto w = keyword(args, "within")) a.within = parse_duration(*w);
    return {std::move(a)};
  }
  if (t.name == "SEQUENCE") {
    const auto& args = need_args();
    check_keys(args, {"within", "min_gap"});
    auto kids = children(args, 2);
    if (kids.size() != 2) throw ParseError("SEQUENCE takes exactly two predicates");
    Sequence s{Box<Predicate>(std::move(kids[0])), Box<Predicate>(std::move(kids[1])), std::nullopt, Duration{0}};
    if (auto w = keyword(args, "within")) s.within = parse_duration(*w);
    if (auto g = keyword(args, "min_gap")) s.min_gap = parse_duration(*g);
    if (s.within && *s.within < s.min_gap)
      throw ParseError("SEQUENCE within must be >= min_gap");
    return {std::move(s)};
  }
  if (t.name == "COUNT_DISTINCT_DAYS") {
    const auto& args = need_args();
    check_keys(args, {"k"});
    auto kids = children(args, 1);
    auto k = keyword(args, "k");
    if (kids.size() != 1 || !k) throw ParseError("COUNT_DISTINCT_DAYS takes one predicate and k=");
    const int kv = detail::parse_int_literal(*k, t.name);
    if (kv < 1) throw ParseError("COUNT_DISTINCT_DAYS needs k >= 1");
    return {CountDistinctDays{Box<Predicate>(std::move(kids[0])), kv}};
  }
  if (t.name == "AGE_BETWEEN") {
    const auto& args = need_args();
    check_keys(args, {});
    if (args.size() != 2 || !args[0].raw || !args[1].raw)
      throw ParseError("AGE_BETWEEN takes two integer ages");
    AgeBetween a{detail::parse_int_literal(*args[0].raw, t.name),
                 detail::parse_int_literal(*args[1].raw, t.name)};
    if (a.min_years > a.max_years) throw ParseError("AGE_BETWEEN min exceeds max");
    return {a};
  }
  if (t.name == "NOT") {
    const auto& args = need_args();
    check_keys(args, {});
    auto kids = children(args, 1);
    if (kids.size() != 1) throw ParseError("NOT takes one predicate");
    return {Not{Box<Predicate>(std::move(kids[0]))}};
  }
  throw ParseError("unknown predicate '" + t.name + "'");
}

inline Predicate parse_predicate(std::string_view text) {
  TermParser p(text);
  Term t = p.parse_term();
  p.expect_end();
  return predicate_from_term(t);
}

inline std::string to_string(const Predicate& p) {
  return std::visit(
      [](const auto& n) -> std::string {
        using T = std::decay_t<decltype(n)>;
        auto join = [](const std::vector<Predicate>& kids) {
          std::string out;
          for (std::size_t i = 0; i < kids.size(); ++i) {
            if (i) out += ", ";
            out += to_string(kids[i]);
          }
          return out;
        };
        if constexpr (std::is_same_v<T, CodeIn>) {
          std::string out = "CODE_IN[";
          const auto& codes = n.codes.codes();
          for (std::size_t i = 0; i < codes.size(); ++i) {
            if (i) out += ", ";
            out += codes[i];
          }
          out += "]";
          if (n.range)
            out += "(" + csv::format_double(n.range->lo) + ".." + csv::format_double(n.range->hi) + ")";
          return out;
        } else if constexpr (std::is_same_v<T, AnyOf>) {
          return "ANY(" + join(n.children) + ")";
        } else if constexpr (std::is_same_v<T, AllWithin>) {
          std::string out = "ALL_WITHIN(" + join(n.children);
          if (n.within) out += ", within=" + format_duration(*n.within);
          return out + ")";
        } else if constexpr (std::is_same_v<T, Sequence>) {
          std::string out = "SEQUENCE(" + to_string(*n.first) + ", " + to_string(*n.then);
          if (n.within) out += ", within=" + format_duration(*n.within);
          if (n.min_gap.count() != 0) out += ", min_gap=" + format_duration(n.min_gap);
          return out + ")";
        } else if constexpr (std::is_same_v<T, CountDistinctDays>) {
          return "COUNT_DISTINCT_DAYS(" + to_string(*n.inner) + ", k=" + std::to_string(n.k) + ")";
        } else if constexpr (std::is_same_v<T, AgeBetween>) {
          return "AGE_BETWEEN(" + std::to_string(n.min_years) + ", " + std::to_string(n.max_years) + ")";
        } else {
          return "NOT(" + to_string(*n.inner) + ")";
        }
      },
      p.node);
}

// ---------------------------------------------------------------------------
// Evaluation.

// Subject-level facts that are not time-varying events.
struct EvalContext {
  std::optional<std::chrono::sys_days> birth_date;
};

using TimeSet = std::vector<Timestamp>;  // sorted, unique

namespace detail {

inline TimeSet distinct_times(std::span<const Event> events) {
  TimeSet out;
  for (const auto& e : events)
    if (out.empty() || out.back() != e.time) out.push_back(e.time);
  return out;
}

// Latest element <= t, if any.
inline const Timestamp* latest_at_or_before(const TimeSet& s, Timestamp t) {
  auto it = std::upper_bound(s.begin(), s.end(), t);
  return it == s.begin() ? nullptr : &*(it - 1);
}

}  // namespace detail

inline TimeSet match_times(const Predicate& p, std::span<const Event> events,
                           const EvalContext& ctx) {
  return std::visit(
      [&](const auto& n) -> TimeSet {
        using T = std::decay_t<decltype(n)>;
        TimeSet out;
        if constexpr (std::is_same_v<T, CodeIn>) {
          for (const auto& e : events) {
            if (!n.codes.contains(e.code)) continue;
            if (n.range && (!e.numeric_value || *e.numeric_value < n.range->lo ||
                            *e.numeric_value > n.range->hi))
              continue;
            if (out.empty() || out.back() != e.time) out.push_back(e.time);
          }
        } else if constexpr (std::is_same_v<T, AnyOf>) {
          for (const auto& c : n.children) {
            TimeSet m = match_times(c, events, ctx);
            TimeSet merged;
            std::set_union(out.begin(), out.end(), m.begin(), m.end(), std::back_inserter(merged));
            out = std::move(merged);
          }
        } else if constexpr (std::is_same_v<T, AllWithin>) {
          std::vector<TimeSet> kids;
          TimeSet candidates;
          for (const auto& c : n.children) {
            kids.push_back(match_times(c, events, ctx));
            TimeSet merged;
            std::set_union(candidates.begin(), candidates.end(), kids.back().begin(),
                           kids.back().end(), std::back_inserter(merged));
            candidates = std::move(merged);
          }
          for (Timestamp t : candidates) {
            bool ok = true;
            for (const auto& k : kids) {
              const Timestamp* m = detail::latest_at_or_before(k, t);
              if (!m || (n.within && *m < t - *n.within)) {
                ok = false;
                break;
              }
            }
            if (ok) out.push_back(t);
          }
        } else if constexpr (std::is_same_v<T, Sequence>) {
          const TimeSet first = match_times(*n.first, events, ctx);
          const TimeSet then = match_times(*n.then, events, ctx);
          for (Timestamp t : then) {
            const Timestamp* f = detail::latest_at_or_before(first, t - n.min_gap);
            if (f && (!n.within || *f >= t - *n.within)) out.push_back(t);
          }
        } else if constexpr (std::is_same_v<T, CountDistinctDays>) {
          const TimeSet inner = match_times(*n.inner, events, ctx);
          int days = 0;
          std::optional<std::chrono::sys_days> last_day;
          for (Timestamp t : inner) {
            const auto d = calendar_day(t);
            if (d != last_day) {
              ++days;
              last_day = d;
            }
            if (days >= n.k) out.push_back(t);
          }
        } else if constexpr (std::is_same_v<T, AgeBetween>) {
          if (!ctx.birth_date) return out;
          for (Timestamp t : detail::distinct_times(events)) {
            const int age = completed_years(*ctx.birth_date, t);
            if (age >= n.min_years && age <= n.max_years) out.push_back(t);
          }
        } else {
          const TimeSet inner = match_times(*n.inner, events, ctx);
          for (Timestamp t : detail::distinct_times(events)) {
            if (!inner.empty() && inner.front() <= t) break;
            out.push_back(t);
          }
        }
        return out;
      },
      p.node);
}

inline std::optional<Timestamp> find_entry(std::span<const Event> events, const Predicate& p,
                                           const EvalContext& ctx = {}) {
  TimeSet m = match_times(p, events, ctx);
  if (m.empty()) return std::nullopt;
  return m.front();
}

inline std::optional<Timestamp> find_entry(const SubjectTimeline& t, const Predicate& p,
                                           const EvalContext& ctx = {}) {
  return find_entry(std::span<const Event>(t.events), p, ctx);
}

// Whether `p` holds at an arbitrary instant `at` (not necessarily an event
// time), given the events visible at that instant. AGE_BETWEEN is evaluated
// at `at` itself; NOT/ANY/ALL_WITHIN combine their children's values; every
// other predicate holds once it has matched at least once.
inline bool holds_at(const Predicate& p, std::span<const Event> events, Timestamp at,
                     const EvalContext& ctx) {
  return std::visit(
      [&](const auto& n) -> bool {
        using T = std::decay_t<decltype(n)>;
        if constexpr (std::is_same_v<T, AgeBetween>) {
          if (!ctx.birth_date) return false;
          const int age = completed_years(*ctx.birth_date, at);
          return age >= n.min_years && age <= n.max_years;
        } else if constexpr (std::is_same_v<T, Not>) {
          return !holds_at(*n.inner, events, at, ctx);
        } else if constexpr (std::is_same_v<T, AnyOf>) {
          return std::any_of(n.children.begin(), n.children.end(),
                             [&](const Predicate& c) { return holds_at(c, events, at, ctx); });
        } else if constexpr (std::is_same_v<T, AllWithin>) {
          return std::all_of(n.children.begin(), n.children.end(),
                             [&](const Predicate& c) { return holds_at(c, events, at, ctx); });
        } else {
          auto end = std::upper_bound(events.begin(), events.end(), at,
                                      [](Timestamp v, const Event& e) { return v < e.time; });
          auto prefix = events.subspan(0, static_cast<std::size_t>(end - events.begin()));
          return find_entry(prefix, p, ctx).has_value();
        }
      },
      p.node);
}

}  // namespace cohort_forge
