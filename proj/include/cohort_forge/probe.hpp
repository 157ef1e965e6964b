#pragma once

// L2-regularized logistic regression with an unpenalized intercept, fitted by
// a truncated Newton method, and k-fold selection of the penalty.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cohort_forge/error.hpp"
#include "cohort_forge/matrix.hpp"
#include "cohort_forge/parallel.hpp"
#include "cohort_forge/random.hpp"

namespace cohort_forge {

struct TrainMeta {
  std::size_t n = 0;
  double prevalence = 0.0;
  bool converged = false;
  int iterations = 0;
};

struct ProbeModel {
  std::vector<double> weights;
  double bias = 0.0;
  double lambda = 0.0;
  TrainMeta train_meta;
  std::vector<double> objective_trace;  // objective after each accepted step, starting at w = 0
};

struct FitOptions {
  double rel_tol = 1e-8;
  double grad_tol = 1e-6;
  int max_iter = 1000;
};

inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline double logit(double p) { return std::log(p / (1.0 - p)); }

// log(1 + exp(x)) without overflow.
inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

inline constexpr double kProbClamp = 1e-12;

// Mean log-loss with probabilities clamped to [1e-12, 1 - 1e-12].
inline double log_loss(const std::vector<int>& y, const std::vector<double>& p) {
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double q = std::clamp(p[i], kProbClamp, 1.0 - kProbClamp);
    s -= y[i] ? std::log(q) : std::log(1.0 - q);
  }
  return s / static_cast<double>(y.size());
}

// Objective, gradient and Hessian-vector products at a point.
template <typename Matrix>
class LogisticObjective {
 public:
  LogisticObjective(const Matrix& x, const std::vector<int>& y, double lambda)
      : x_(x), y_(y), lambda_(lambda), n_(static_cast<double>(y.size())) {}

  // Evaluates at (w, b) and caches the per-row curvature for hvp().
  double value(const std::vector<double>& w, double b) {
    x_.multiply(w, z_);
    double loss = 0.0;
    for (std::size_t i = 0; i < z_.size(); ++i) {
      z_[i] += b;
      loss += y_[i] ? softplus(-z_[i]) : softplus(z_[i]);
    }
    return loss / n_ + 0.5 * lambda_ * dot(w, w);
  }

  // Gradient at the point last passed to value().
  void gradient(const std::vector<double>& w, std::vector<double>& gw, double& gb) {
    r_.resize(z_.size());
    d_.resize(z_.size());
    gb = 0.0;
    for (std::size_t i = 0; i < z_.size(); ++i) {
      const double p = sigmoid(z_[i]);
      r_[i] = (p - y_[i]) / n_;
      d_[i] = p * (1.0 - p) / n_;
      gb += r_[i];
    }
    x_.multiply_transpose(r_, gw);
    for (std::size_t j = 0; j < gw.size(); ++j) gw[j] += lambda_ * w[j];
  }

  // H [vw; vb] at the point last passed to gradient().
  void hvp(const std::vector<double>& vw, double vb, std::vector<double>& hw, double& hb) {
    x_.multiply(vw, t_);
    hb = 0.0;
    for (std::size_t i = 0; i < t_.size(); ++i) {
      t_[i] = d_[i] * (t_[i] + vb);
      hb += t_[i];
    }
    x_.multiply_transpose(t_, hw);
    for (std::size_t j = 0; j < hw.size(); ++j) hw[j] += lambda_ * vw[j];
  }

  void diagonal(std::vector<double>& dw, double& db) {
    x_.weighted_column_squares(d_, dw);
    db = 0.0;
    for (double v : d_) db += v;
    for (double& v : dw) v += lambda_;
  }

  static double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
  }

 private:
  const Matrix& x_;
  const std::vector<int>& y_;
  double lambda_;
  double n_;
  std::vector<double> z_, r_, d_, t_;
};

inline void check_labels(const std::vector<int>& y) {
  bool pos = false;
  bool neg = false;
  for (int v : y) {
    if (v != 0 && v != 1) throw ValidationError("labels must be 0 or 1");
    (v ? pos : neg) = true;
  }
  if (!pos || !neg) throw ValidationError("logistic fit needs both classes");
}

template <typename Matrix>
ProbeModel fit_logistic(const Matrix& x, const std::vector<int>& y, double lambda,
                        const std::vector<std::string>& column_names = {},
                        const FitOptions& opt = {}) {
  if (x.rows() != y.size()) throw ValidationError("feature rows and labels differ in length");
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ValidationError("lambda must be finite and >= 0");
  check_labels(y);
  if (auto c = x.nonfinite_column())
    throw ValidationError("non-finite value in feature column " +
                          (*c < column_names.size() ? column_names[*c] : std::to_string(*c)));

  const std::size_t dim = x.cols();
  double positives = 0.0;
  for (int v : y) positives += v;
  const double prevalence = positives / static_cast<double>(y.size());

  ProbeModel m;
  m.lambda = lambda;
  m.weights.assign(dim, 0.0);
  m.bias = logit(prevalence);
  m.train_meta.n = y.size();
  m.train_meta.prevalence = prevalence;

  LogisticObjective<Matrix> obj(x, y, lambda);
  std::vector<double> gw, hw, dw, sw(dim), rw(dim), zw(dim), pw(dim), trial(dim);
  double gb = 0.0, hb = 0.0, db = 0.0;
  double f = obj.value(m.weights, m.bias);
  m.objective_trace.push_back(f);

  for (int iter = 0; iter < opt.max_iter; ++iter) {
    obj.gradient(m.weights, gw, gb);
    double gmax = std::abs(gb);
    for (double v : gw) gmax = std::max(gmax, std::abs(v));
    if (gmax < opt.grad_tol) {
      m.train_meta.converged = true;
      break;
    }
    obj.diagonal(dw, db);

    // Preconditioned conjugate gradient on H s = -g.
    std::fill(sw.begin(), sw.end(), 0.0);
    double sb = 0.0;
    for (std::size_t j = 0; j < dim; ++j) rw[j] = -gw[j];
    double rb = -gb;
    auto precondition = [&] {
      for (std::size_t j = 0; j < dim; ++j) zw[j] = rw[j] / std::max(dw[j], 1e-12);
      return rb / std::max(db, 1e-12);
    };
    double zb = precondition();
    pw = zw;
    double pb = zb;
    double rz = LogisticObjective<Matrix>::dot(rw, zw) + rb * zb;
    const double gnorm = std::sqrt(LogisticObjective<Matrix>::dot(gw, gw) + gb * gb);
    const double cg_tol = std::min(0.5, std::sqrt(gnorm)) * gnorm;
    for (std::size_t k = 0; k < std::max<std::size_t>(dim + 1, 10) && k < 250; ++k) {
      obj.hvp(pw, pb, hw, hb);
      const double php = LogisticObjective<Matrix>::dot(pw, hw) + pb * hb;
      if (php <= 0.0) break;
      const double alpha = rz / php;
      for (std::size_t j = 0; j < dim; ++j) {
        sw[j] += alpha * pw[j];
        rw[j] -= alpha * hw[j];
      }
      sb += alpha * pb;
      rb -= alpha * hb;
      const double rnorm = std::sqrt(LogisticObjective<Matrix>::dot(rw, rw) + rb * rb);
      if (rnorm <= cg_tol) break;
      zb = precondition();
      const double rz_new = LogisticObjective<Matrix>::dot(rw, zw) + rb * zb;
      const double beta = rz_new / rz;
      rz = rz_new;
      for (std::size_t j = 0; j < dim; ++j) pw[j] = zw[j] + beta * pw[j];
      pb = zb + beta * pb;
    }
    double slope = LogisticObjective<Matrix>::dot(gw, sw) + gb * sb;
    if (!(slope < 0.0)) {  // fall back to steepest descent
      for (std::size_t j = 0; j < dim; ++j) sw[j] = -gw[j];
      sb = -gb;
      slope = -(gnorm * gnorm);
    }

    // Armijo backtracking.
    double step = 1.0;
    double f_new = f;
    bool accepted = false;
    for (int ls = 0; ls < 60; ++ls) {
      for (std::size_t j = 0; j < dim; ++j) trial[j] = m.weights[j] + step * sw[j];
      f_new = obj.value(trial, m.bias + step * sb);
      if (f_new <= f + 1e-4 * step * slope) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      obj.value(m.weights, m.bias);
      m.train_meta.converged = true;  // no further decrease representable
      break;
    }
    m.weights.swap(trial);
    m.bias += step * sb;
    m.train_meta.iterations = iter + 1;
    const double change = std::abs(f - f_new) / std::max(std::abs(f), 1e-300);
    f = f_new;
    m.objective_trace.push_back(f);
    if (change < opt.rel_tol) {
      m.train_meta.converged = true;
      break;
    }
  }
  for (double w : m.weights)
    if (!std::isfinite(w)) throw Error("logistic fit diverged");
  return m;
}

template <typename Matrix>
std::vector<double> predict_proba(const ProbeModel& m, const Matrix& x) {
  if (x.cols() != m.weights.size())
    throw ValidationError("feature dimension " + std::to_string(x.cols()) + " does not match model " +
                          std::to_string(m.weights.size()));
  std::vector<double> z;
  x.multiply(m.weights, z);
  for (double& v : z) v = sigmoid(v + m.bias);
  return z;
}

// ---------------------------------------------------------------------------
// Penalty selection.

inline std::vector<double> log_grid(double lo = 1e-4, double hi = 1e4, std::size_t points = 9) {
  if (points < 2 || !(lo > 0) || !(hi > lo)) throw ValidationError("bad lambda grid");
  std::vector<double> g(points);
  const double a = std::log10(lo);
  const double b = std::log10(hi);
  for (std::size_t i = 0; i < points; ++i)
    g[i] = std::pow(10.0, a + (b - a) * static_cast<double>(i) / static_cast<double>(points - 1));
  return g;
}

inline constexpr std::size_t kProbeFolds = 5;
inline constexpr std::size_t kBaselineFolds = 10;
// Mean validation losses within this distance of the best count as tied.
inline constexpr double kLambdaTieTolerance = 1e-4;

// Fold of each row: rows ranked by a seeded hash, rank modulo k.
inline std::vector<std::size_t> assign_folds(std::size_t n, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ValidationError("need at least 2 folds");
  if (n < k) throw ValidationError("fewer rows than folds");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::pair{hash_combine(seed, a), a} < std::pair{hash_combine(seed, b), b};
  });
  std::vector<std::size_t> fold(n);
  for (std::size_t r = 0; r < n; ++r) fold[order[r]] = r % k;
  return fold;
}

struct CVResult {
  std::vector<double> grid;
  std::vector<std::vector<std::optional<double>>> fold_scores;  // [lambda][fold]; nullopt = excluded
  std::vector<double> mean_scores;
  std::vector<bool> fold_excluded;
  double best_lambda = 0.0;
};

template <typename Matrix>
CVResult select_lambda(const Matrix& x, const std::vector<int>& y, std::vector<double> grid,
                       std::size_t k, std::uint64_t seed, unsigned threads = 1,
                       const FitOptions& opt = {}) {
  if (grid.empty()) throw ValidationError("empty lambda grid");
  std::sort(grid.begin(), grid.end());
  check_labels(y);
  const auto fold = assign_folds(y.size(), k, seed);

  CVResult r;
  r.grid = grid;
  r.fold_excluded.assign(k, false);
  std::vector<std::vector<std::size_t>> train_idx(k), val_idx(k);
  for (std::size_t i = 0; i < y.size(); ++i)
    for (std::size_t f = 0; f < k; ++f) (fold[i] == f ? val_idx[f] : train_idx[f]).push_back(i);
  auto single_class = [&](const std::vector<std::size_t>& idx) {
    bool pos = false, neg = false;
    for (auto i : idx) (y[i] ? pos : neg) = true;
    return !(pos && neg);
  };
  for (std::size_t f = 0; f < k; ++f)
    r.fold_excluded[f] = single_class(val_idx[f]) || single_class(train_idx[f]);
  if (std::all_of(r.fold_excluded.begin(), r.fold_excluded.end(), [](bool b) { return b; }))
    throw ValidationError("every cross-validation fold is single-class");

  r.fold_scores.assign(grid.size(), std::vector<std::optional<double>>(k));
  parallel_for(grid.size() * k, threads, [&](std::size_t job) {
    const std::size_t g = job / k;
    const std::size_t f = job % k;
    if (r.fold_excluded[f]) return;
    const Matrix xt = x.select_rows(train_idx[f]);
    const Matrix xv = x.select_rows(val_idx[f]);
    std::vector<int> yt, yv;
    for (auto i : train_idx[f]) yt.push_back(y[i]);
    for (auto i : val_idx[f]) yv.push_back(y[i]);
    const ProbeModel m = fit_logistic(xt, yt, grid[g], {}, opt);
    r.fold_scores[g][f] = log_loss(yv, predict_proba(m, xv));
  });

  double best = std::numeric_limits<double>::infinity();
  for (const auto& row : r.fold_scores) {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& v : row)
      if (v) {
        s += *v;
        ++n;
      }
    r.mean_scores.push_back(s / static_cast<double>(n));
    best = std::min(best, r.mean_scores.back());
  }
  for (std::size_t g = grid.size(); g-- > 0;)
    if (r.mean_scores[g] <= best + kLambdaTieTolerance) {
      r.best_lambda = grid[g];
      break;
    }
  return r;
}

inline nlohmann::ordered_json cv_to_json(const CVResult& r) {
  nlohmann::ordered_json j;
  j["grid"] = r.grid;
  j["mean_scores"] = r.mean_scores;
  auto scores = nlohmann::ordered_json::array();
  for (const auto& row : r.fold_scores) {
    auto jr = nlohmann::ordered_json::array();
    for (const auto& v : row) jr.push_back(v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json());
    scores.push_back(jr);
  }
  j["fold_scores"] = scores;
  j["fold_excluded"] = r.fold_excluded;
  j["best_lambda"] = r.best_lambda;
  return j;
}

inline nlohmann::ordered_json model_to_json(const ProbeModel& m, const std::vector<std::string>& columns) {
  if (columns.size() != m.weights.size()) throw Error("column names do not match model weights");
  nlohmann::ordered_json j;
  j["lambda"] = m.lambda;
  j["bias"] = m.bias;
  nlohmann::ordered_json w = nlohmann::ordered_json::object();
  for (std::size_t i = 0; i < columns.size(); ++i) w[columns[i]] = m.weights[i];
  j["weights"] = w;
  j["train_meta"] = {{"n", m.train_meta.n},
                     {"prevalence", m.train_meta.prevalence},
                     {"converged", m.train_meta.converged},
                     {"iterations", m.train_meta.iterations}};
  return j;
}

inline ProbeModel model_from_json(const nlohmann::json& j, const std::vector<std::string>& columns) {
  ProbeModel m;
  m.lambda = j.at("lambda");
  m.bias = j.at("bias");
  const auto& w = j.at("weights");
  if (w.size() != columns.size()) throw ValidationError("model has " + std::to_string(w.size()) +
                                                        " weights, features have " +
                                                        std::to_string(columns.size()) + " columns");
  for (const auto& c : columns) {
    if (!w.contains(c)) throw ValidationError("model lacks weight for column " + c);
    m.weights.push_back(w.at(c));
  }
  const auto& meta = j.at("train_meta");
  m.train_meta = {meta.at("n"), meta.at("prevalence"), meta.at("converged"), meta.at("iterations")};
  return m;
}

}  // namespace cohort_forge
