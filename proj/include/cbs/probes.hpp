#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cbs/core/dataset_io.hpp"
#include "cbs/core/format.hpp"
#include "cbs/core/types.hpp"

// Linear probes from activations to elicited beliefs, with isotonic calibration.
namespace cbs::probes {

// Per-feature centering and scaling. Scale is the sample standard deviation
// (ddof = 1); constant features get scale 1.
struct Standardization {
  Vector mean;
  Vector scale;

  static Standardization fit(const Matrix& Z) {
    Standardization s;
    const auto n = Z.rows();
    s.mean = Z.colwise().mean().transpose();
    s.scale.resize(Z.cols());
    for (Eigen::Index j = 0; j < Z.cols(); ++j) {
      double ss = (Z.col(j).array() - s.mean(j)).square().sum();
      double sd = n > 1 ? std::sqrt(ss / static_cast<double>(n - 1)) : 0.0;
      s.scale(j) = sd > 0.0 ? sd : 1.0;
    }
    return s;
  }

  Matrix apply(const Matrix& Z) const {
    return (Z.rowwise() - mean.transpose()).array().rowwise() / scale.transpose().array();
  }
};

struct LinearProbe {
  int layer = 0;
  std::string concept_name;
  Vector weights; // in the standardized basis
  double bias = 0.0;
  double lambda = 0.0;
  Standardization standardization;
  bool pseudoinverse = false; // set when lambda = 0 and the design was rank deficient

  Eigen::Index dim() const { return weights.size(); }

  // theta in the raw activation basis and the matching intercept.
  Vector raw_weights() const { return weights.array() / standardization.scale.array(); }
  double raw_bias() const { return bias - raw_weights().dot(standardization.mean); }

  double raw_output(const Eigen::Ref<const Vector>& z) const {
    if (z.size() != dim())
      throw ValidationError("probe expects " + std::to_string(dim()) + " features, got " + std::to_string(z.size()));
    return ((z - standardization.mean).array() / standardization.scale.array()).matrix().dot(weights) + bias;
  }

  Vector raw_outputs(const Matrix& Z) const {
    if (Z.cols() != dim())
      throw ValidationError("probe expects " + std::to_string(dim()) + " features, got " + std::to_string(Z.cols()));
    return standardization.apply(Z) * weights + Vector::Constant(Z.rows(), bias);
  }

  void validate() const {
    if (standardization.mean.size() != weights.size() || standardization.scale.size() != weights.size())
      throw ValidationError("probe standardization does not match weight length");
    if (!(lambda >= 0.0)) throw ValidationError("probe lambda must be >= 0");
    if ((standardization.scale.array() <= 0.0).any()) throw ValidationError("probe scale entries must be > 0");
  }
};

inline void check_finite(const Matrix& Z, const Vector& y) {
  if (!Z.allFinite() || !y.allFinite()) throw ValidationError("ridge input contains non-finite values");
}

// Standardized design cached for repeated solves with different targets or penalties.
class RidgeSystem {
public:
  explicit RidgeSystem(const Matrix& Z) : standardization_(Standardization::fit(Z)) {
    if (Z.rows() < 2) throw ValidationError("ridge fit needs at least 2 rows");
    if (!Z.allFinite()) throw ValidationError("ridge input contains non-finite values");
    X_ = standardization_.apply(Z);
    gram_ = X_.transpose() * X_;
  }

  const Standardization& standardization() const { return standardization_; }
  const Matrix& design() const { return X_; }

  LinearProbe solve(const Vector& y, double lambda) const {
    if (y.size() != X_.rows()) throw ValidationError("ridge target length does not match rows");
    if (!y.allFinite()) throw ValidationError("ridge input contains non-finite values");
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ValidationError("ridge lambda must be finite and >= 0");
    LinearProbe p;
    p.lambda = lambda;
    p.standardization = standardization_;
    const double ybar = y.mean();
    const Vector yc = y.array() - ybar;
    if (lambda > 0.0) {
      Matrix A = gram_;
      A.diagonal().array() += lambda;
      Eigen::LDLT<Matrix> ldlt(A);
      if (ldlt.info() != Eigen::Success) throw Error("ridge normal equations could not be factorized");
      p.weights = ldlt.solve(X_.transpose() * yc);
    } else {
      Eigen::CompleteOrthogonalDecomposition<Matrix> cod(X_);
      p.pseudoinverse = cod.rank() < X_.cols();
      p.weights = cod.solve(yc);
    }
    p.bias = ybar;
    return p;
  }

private:
  Standardization standardization_;
  Matrix X_;
  Matrix gram_;
};

// Minimizes sum (theta^T x_n + theta0 - y_n)^2 + lambda |theta|^2 over standardized
// features x_n, intercept unpenalized. lambda = 0 on a rank-deficient design falls back
// to the minimum-norm least-squares solution and sets LinearProbe::pseudoinverse.
inline LinearProbe fit_ridge(const Matrix& Z, const Vector& y, double lambda) {
  if (Z.rows() != y.size()) throw ValidationError("ridge: Z has " + std::to_string(Z.rows()) + " rows, y has " +
                                                  std::to_string(y.size()));
  if (Z.rows() < 2) throw ValidationError("ridge fit needs at least 2 rows");
  check_finite(Z, y);
  return RidgeSystem(Z).solve(y, lambda);
}

// ---------------------------------------------------------------------------
// isotonic calibration

// Weighted pool-adjacent-violators on y in the given order. Returns the
// non-decreasing sequence minimizing sum w_n (f_n - y_n)^2.
inline Vector pava(const Vector& y, const Vector& w) {
  const auto n = y.size();
  if (w.size() != n) throw ValidationError("pava: weights length does not match values");
  if (n == 0) throw ValidationError("pava needs at least one value");
  if ((w.array() <= 0.0).any() || !w.allFinite()) throw ValidationError("pava: weights must be positive");
  if (!y.allFinite()) throw ValidationError("pava: values must be finite");

  struct Block {
    double value, weight;
    Eigen::Index count;
  };
  std::vector<Block> stack;
  stack.reserve(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    stack.push_back({y(i), w(i), 1});
    while (stack.size() > 1 && stack[stack.size() - 2].value > stack.back().value) {
      Block top = stack.back();
      stack.pop_back();
      Block& prev = stack.back();
      double total = prev.weight + top.weight;
      prev.value = (prev.weight * prev.value + top.weight * top.value) / total;
      prev.weight = total;
      prev.count += top.count;
    }
  }
  Vector out(n);
  Eigen::Index pos = 0;
  for (const auto& b : stack)
    for (Eigen::Index j = 0; j < b.count; ++j) out(pos++) = b.value;
  return out;
}

struct CalibrationMap {
  std::vector<double> x; // strictly increasing
  std::vector<double> y; // non-decreasing, within [0,1]

  static CalibrationMap identity() { return {{0.0, 1.0}, {0.0, 1.0}}; }
  static CalibrationMap constant(double v) { return {{0.0}, {v}}; }

  void validate() const {
    if (x.empty() || x.size() != y.size()) throw ValidationError("calibration map needs matching, non-empty knots");
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (!std::isfinite(x[i]) || !std::isfinite(y[i])) throw ValidationError("calibration knots must be finite");
      if (y[i] < 0.0 || y[i] > 1.0) throw ValidationError("calibration values must lie in [0,1]");
      if (i > 0 && !(x[i] > x[i - 1])) throw ValidationError("calibration breakpoints must be strictly increasing");
      if (i > 0 && y[i] < y[i - 1]) throw ValidationError("calibration values must be non-decreasing");
    }
  }

  // Linear interpolation between knots, clamped to the end values outside.
  double operator()(double v) const {
    if (x.empty()) throw ValidationError("empty calibration map");
    if (v <= x.front()) return y.front();
    if (v >= x.back()) return y.back();
    auto it = std::upper_bound(x.begin(), x.end(), v);
    auto hi = static_cast<std::size_t>(it - x.begin());
    auto lo = hi - 1;
    double f = (v - x[lo]) / (x[hi] - x[lo]);
    return y[lo] + f * (y[hi] - y[lo]);
  }

  friend bool operator==(const CalibrationMap&, const CalibrationMap&) = default;
};

namespace detail {
struct PooledPoints {
  std::vector<double> x, y, w;
  std::vector<std::size_t> group_of; // original index -> unique-x group
};

inline PooledPoints pool_ties(const Vector& x, const Vector& y, const Vector& w) {
  const auto n = static_cast<std::size_t>(x.size());
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return x(a) < x(b); });
  PooledPoints p;
  p.group_of.resize(n);
  for (auto i : order) {
    if (p.x.empty() || x(i) != p.x.back()) {
      p.x.push_back(x(i));
      p.y.push_back(0.0);
      p.w.push_back(0.0);
    }
    p.y.back() += w(i) * y(i);
    p.w.back() += w(i);
    p.group_of[i] = p.x.size() - 1;
  }
  for (std::size_t g = 0; g < p.x.size(); ++g) p.y[g] /= p.w[g];
  return p;
}

inline void check_isotonic_input(const Vector& x, const Vector& y, const Vector& w) {
  if (x.size() == 0) throw ValidationError("isotonic regression needs at least one point");
  if (y.size() != x.size() || w.size() != x.size())
    throw ValidationError("isotonic regression inputs must have equal length");
  if ((w.array() <= 0.0).any()) throw ValidationError("isotonic regression weights must be positive");
  if (!x.allFinite() || !y.allFinite() || !w.allFinite())
    throw ValidationError("isotonic regression inputs must be finite");
}
} // namespace detail

// Isotonic least-squares fit of y on x, returned in the original point order, unclipped.
// Tied x values are pooled first so they share one fitted value.
inline Vector isotonic_fit(const Vector& x, const Vector& y, const Vector& w) {
  detail::check_isotonic_input(x, y, w);
  auto p = detail::pool_ties(x, y, w);
  Vector fitted = pava(Eigen::Map<const Vector>(p.y.data(), static_cast<Eigen::Index>(p.y.size())),
                       Eigen::Map<const Vector>(p.w.data(), static_cast<Eigen::Index>(p.w.size())));
  Vector out(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) out(i) = fitted(static_cast<Eigen::Index>(p.group_of[static_cast<std::size_t>(i)]));
  return out;
}

inline Vector isotonic_fit(const Vector& x, const Vector& y) {
  return isotonic_fit(x, y, Vector::Ones(x.size()));
}

// Calibration map from isotonic regression, values clipped to [0,1]. Each pooled
// block contributes its first and last breakpoint.
inline CalibrationMap pava_isotonic(const Vector& x, const Vector& y, const Vector& w) {
  detail::check_isotonic_input(x, y, w);
  auto p = detail::pool_ties(x, y, w);
  Vector fitted = pava(Eigen::Map<const Vector>(p.y.data(), static_cast<Eigen::Index>(p.y.size())),
                       Eigen::Map<const Vector>(p.w.data(), static_cast<Eigen::Index>(p.w.size())));
  CalibrationMap map;
  const auto m = p.x.size();
  for (std::size_t g = 0; g < m; ++g) {
    bool block_start = g == 0 || fitted(static_cast<Eigen::Index>(g)) != fitted(static_cast<Eigen::Index>(g - 1));
    bool block_end = g + 1 == m || fitted(static_cast<Eigen::Index>(g)) != fitted(static_cast<Eigen::Index>(g + 1));
    if (block_start || block_end) {
      map.x.push_back(p.x[g]);
      map.y.push_back(std::clamp(fitted(static_cast<Eigen::Index>(g)), 0.0, 1.0));
    }
  }
  map.validate();
  return map;
}

inline CalibrationMap pava_isotonic(const Vector& x, const Vector& y) {
  return pava_isotonic(x, y, Vector::Ones(x.size()));
}

// ---------------------------------------------------------------------------
// prediction and evaluation

inline double predict(const LinearProbe& probe, const CalibrationMap& calibration, const Vector& z) {
  return std::clamp(calibration(probe.raw_output(z)), 0.0, 1.0);
}

inline Vector predict(const LinearProbe& probe, const CalibrationMap& calibration, const Matrix& Z) {
  Vector raw = probe.raw_outputs(Z);
  for (Eigen::Index i = 0; i < raw.size(); ++i) raw(i) = std::clamp(calibration(raw(i)), 0.0, 1.0);
  return raw;
}

inline double rmse(const Vector& predicted, const Vector& target) {
  if (predicted.size() == 0) throw ValidationError("RMSE of an empty test set");
  if (predicted.size() != target.size()) throw ValidationError("RMSE: prediction and target lengths differ");
  return std::sqrt((predicted - target).squaredNorm() / static_cast<double>(predicted.size()));
}

inline double evaluate_rmse(const LinearProbe& probe, const CalibrationMap& calibration, const Matrix& Z_test,
                            const Vector& y_test) {
  if (Z_test.rows() == 0) throw ValidationError("RMSE of an empty test set");
  if (Z_test.rows() != y_test.size()) throw ValidationError("test activations and targets are misaligned");
  return rmse(predict(probe, calibration, Z_test), y_test);
}

// ---------------------------------------------------------------------------
// story-level splits and lambda selection

enum class Part { train, calibration, test };

struct StorySplit {
  std::map<std::string, Part> part;

  Part of(const std::string& story) const {
    auto it = part.find(story);
    if (it == part.end()) throw ValidationError("story '" + story + "' is not in the split");
    return it->second;
  }
  std::vector<std::string> stories(Part p) const {
    std::vector<std::string> out;
    for (const auto& [s, q] : part)
      if (q == p) out.push_back(s);
    return out;
  }
};

// Splits by story id, never by sentence. Each part gets at least one story when n >= 3.
inline StorySplit split_stories(std::vector<std::string> ids, double train_frac, double cal_frac, std::uint64_t seed) {
  if (ids.size() < 3) throw ValidationError("need at least 3 stories for a train/calibration/test split");
  if (train_frac <= 0 || cal_frac <= 0 || train_frac + cal_frac >= 1)
    throw ValidationError("split fractions must be positive and leave room for a test part");
  std::sort(ids.begin(), ids.end());
  std::mt19937_64 rng(seed);
  std::shuffle(ids.begin(), ids.end(), rng);
  const auto n = ids.size();
  auto n_train = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(train_frac * static_cast<double>(n))));
  auto n_cal = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(cal_frac * static_cast<double>(n))));
  while (n_train + n_cal >= n) {
    if (n_train > n_cal) --n_train;
    else --n_cal;
  }
  StorySplit s;
  for (std::size_t i = 0; i < n; ++i)
    s.part[ids[i]] = i < n_train ? Part::train : (i < n_train + n_cal ? Part::calibration : Part::test);
  return s;
}

inline std::vector<double> default_lambda_grid() { return {1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3}; }

// K-fold cross-validated lambda per target. Folds group rows by `groups` (story index).
// Returns the grid value with the lowest mean held-out squared error; ties go to the smaller lambda.
inline std::vector<double> cross_validate_lambda(const Matrix& Z, const std::vector<Vector>& targets,
                                                 const std::vector<int>& groups, const std::vector<double>& grid,
                                                 int folds, std::uint64_t seed) {
  if (grid.empty()) throw ValidationError("lambda grid is empty");
  if (folds < 2) throw ValidationError("cross-validation needs at least 2 folds");
  std::vector<int> uniq(groups.begin(), groups.end());
  std::sort(uniq.begin(), uniq.end());
  uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
  if (static_cast<int>(uniq.size()) < folds) throw ValidationError("fewer stories than cross-validation folds");
  std::mt19937_64 rng(seed);
  std::shuffle(uniq.begin(), uniq.end(), rng);
  std::map<int, int> fold_of;
  for (std::size_t i = 0; i < uniq.size(); ++i) fold_of[uniq[i]] = static_cast<int>(i % static_cast<std::size_t>(folds));

  Matrix sse = Matrix::Zero(static_cast<Eigen::Index>(targets.size()), static_cast<Eigen::Index>(grid.size()));
  for (int f = 0; f < folds; ++f) {
    std::vector<Eigen::Index> tr, te;
    for (std::size_t i = 0; i < groups.size(); ++i)
      (fold_of[groups[i]] == f ? te : tr).push_back(static_cast<Eigen::Index>(i));
    if (tr.size() < 2 || te.empty()) continue;
    Matrix Ztr = Z(tr, Eigen::all);
    auto stdz = Standardization::fit(Ztr);
    Matrix Xtr = stdz.apply(Ztr);
    Matrix Xte = stdz.apply(Z(te, Eigen::all));
    Eigen::SelfAdjointEigenSolver<Matrix> eig(Xtr.transpose() * Xtr);
    const Matrix& V = eig.eigenvectors();
    const Vector D = eig.eigenvalues().cwiseMax(0.0);
    Matrix XteV = Xte * V;
    for (std::size_t ti = 0; ti < targets.size(); ++ti) {
      const Vector& y = targets[ti];
      Vector ytr = y(tr);
      Vector yte = y(te);
      double ybar = ytr.mean();
      Vector proj = V.transpose() * (Xtr.transpose() * (ytr.array() - ybar).matrix());
      for (std::size_t li = 0; li < grid.size(); ++li) {
        Vector coef = proj.array() / (D.array() + grid[li]);
        Vector pred = (XteV * coef).array() + ybar;
        sse(static_cast<Eigen::Index>(ti), static_cast<Eigen::Index>(li)) += (pred - yte).squaredNorm();
      }
    }
  }
  std::vector<double> out;
  for (Eigen::Index ti = 0; ti < sse.rows(); ++ti) {
    Eigen::Index best = 0;
    for (Eigen::Index li = 1; li < sse.cols(); ++li)
      if (sse(ti, li) < sse(ti, best)) best = li;
    out.push_back(grid[static_cast<std::size_t>(best)]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// layer sweep

struct SweepOptions {
  std::optional<double> lambda; // fixed lambda; cross-validated when empty
  std::vector<double> lambda_grid = default_lambda_grid();
  int folds = 5;
  double train_fraction = 0.70;
  double calibration_fraction = 0.15;
  std::uint64_t seed = 0;
};

struct ProbeEntry {
  LinearProbe probe;
  CalibrationMap calibration;
  double train_rmse = 0.0;
  double test_rmse = 0.0;
};

struct ProbeReport {
  std::string domain;
  std::vector<std::string> concepts;
  std::vector<int> layers;
  std::vector<ProbeEntry> entries; // layer-major, concept-minor
  std::vector<double> mean_test_rmse; // per layer
  int selected_layer = 0;
  StorySplit split;

  const ProbeEntry& at(int layer, const std::string& concept_name) const {
    for (const auto& e : entries)
      if (e.probe.layer == layer && e.probe.concept_name == concept_name) return e;
    throw ValidationError("no probe for layer " + std::to_string(layer) + ", concept '" + concept_name + "'");
  }
};

// Fits and calibrates one probe per (layer, concept), scores on held-out stories, and
// picks the layer with the lowest mean test RMSE (lowest layer index on ties).
inline ProbeReport layer_sweep(const std::vector<ActivationDataset>& layers,
                               const std::vector<BeliefTrajectory>& trajectories, const ConceptDomain& domain,
                               const SweepOptions& opts = {}) {
  if (layers.empty()) throw ValidationError("layer sweep needs at least one layer");
  if (trajectories.empty()) throw ValidationError("layer sweep needs trajectories");

  ProbeReport report;
  report.domain = domain.name;
  report.concepts = domain.concepts;
  std::vector<std::string> ids;
  for (const auto& tr : trajectories) ids.push_back(tr.story_id);
  report.split = split_stories(ids, opts.train_fraction, opts.calibration_fraction, opts.seed);

  std::vector<RecordKey> keys;
  Matrix Y = stack_values(trajectories, &keys);
  if (static_cast<std::size_t>(Y.cols()) != domain.size())
    throw ValidationError("trajectories do not match domain '" + domain.name + "'");

  std::map<std::string, int> story_index;
  for (std::size_t i = 0; i < ids.size(); ++i) story_index[ids[i]] = static_cast<int>(i);
  std::vector<Eigen::Index> tr_rows, cal_rows, te_rows;
  for (std::size_t i = 0; i < keys.size(); ++i) {
    auto part = report.split.of(keys[i].story_id);
    (part == Part::train ? tr_rows : part == Part::calibration ? cal_rows : te_rows)
        .push_back(static_cast<Eigen::Index>(i));
  }
  std::vector<int> groups;
  for (auto r : tr_rows) groups.push_back(story_index[keys[static_cast<std::size_t>(r)].story_id]);

  std::vector<Vector> targets_tr;
  for (Eigen::Index c = 0; c < Y.cols(); ++c) targets_tr.push_back(Y(tr_rows, c));

  for (const auto& acts : layers) {
    report.layers.push_back(acts.layer);
    Matrix Z = gather_rows(acts, keys);
    Matrix Ztr = Z(tr_rows, Eigen::all);
    Matrix Zcal = Z(cal_rows, Eigen::all);
    Matrix Zte = Z(te_rows, Eigen::all);
    std::vector<double> lambdas = opts.lambda
                                      ? std::vector<double>(domain.size(), *opts.lambda)
                                      : cross_validate_lambda(Ztr, targets_tr, groups, opts.lambda_grid, opts.folds,
                                                              opts.seed + 1);
    RidgeSystem system(Ztr);
    double total = 0.0;
    for (std::size_t c = 0; c < domain.size(); ++c) {
      const auto ci = static_cast<Eigen::Index>(c);
      ProbeEntry e;
      e.probe = system.solve(targets_tr[c], lambdas[c]);
      e.probe.layer = acts.layer;
      e.probe.concept_name = domain.concepts[c];
      Vector ycal = Y(cal_rows, ci);
      e.calibration = pava_isotonic(e.probe.raw_outputs(Zcal), ycal);
      e.train_rmse = evaluate_rmse(e.probe, e.calibration, Ztr, targets_tr[c]);
      e.test_rmse = evaluate_rmse(e.probe, e.calibration, Zte, Y(te_rows, ci));
      total += e.test_rmse;
      report.entries.push_back(std::move(e));
    }
    report.mean_test_rmse.push_back(total / static_cast<double>(domain.size()));
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < report.layers.size(); ++i) {
    double a = report.mean_test_rmse[i], b = report.mean_test_rmse[best];
    if (a < b || (a == b && report.layers[i] < report.layers[best])) best = i;
  }
  report.selected_layer = report.layers[best];
  return report;
}

// ---------------------------------------------------------------------------
// probe bundle files: JSON header + float32 weight vector

inline std::string probe_basename(int layer, const std::string& concept_name) {
  return "probe_layer" + std::to_string(layer) + "_" + concept_name;
}

inline void write_probe_bundle(const std::filesystem::path& dir, const ProbeEntry& e) {
  std::filesystem::create_directories(dir);
  const auto base = probe_basename(e.probe.layer, e.probe.concept_name);
  std::vector<float> w(static_cast<std::size_t>(e.probe.weights.size()));
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<float>(e.probe.weights(static_cast<Eigen::Index>(i)));
  io::write_file(dir / (base + ".f32"), io::encode_f32(w.data(), w.size()));
  nlohmann::json j = {
      {"layer", e.probe.layer},
      {"concept", e.probe.concept_name},
      {"lambda", e.probe.lambda},
      {"pseudoinverse", e.probe.pseudoinverse},
      {"bias", e.probe.bias},
      {"standardization",
       {{"mean", std::vector<double>(e.probe.standardization.mean.begin(), e.probe.standardization.mean.end())},
        {"scale", std::vector<double>(e.probe.standardization.scale.begin(), e.probe.standardization.scale.end())}}},
      {"weights_file", base + ".f32"},
      {"calibration", {{"x", e.calibration.x}, {"y", e.calibration.y}}},
      {"train_rmse", e.train_rmse},
      {"test_rmse", e.test_rmse}};
  io::write_file(dir / (base + ".json"), j.dump(2) + "\n");
}

inline ProbeEntry read_probe_bundle(const std::filesystem::path& json_path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_file(json_path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(json_path.string() + ": " + e.what());
  }
  const auto where = json_path.filename().string();
  ProbeEntry e;
  e.probe.layer = io::required<int>(j, "layer", where);
  e.probe.concept_name = io::required<std::string>(j, "concept", where);
  e.probe.lambda = io::required<double>(j, "lambda", where);
  e.probe.bias = io::required<double>(j, "bias", where);
  e.probe.pseudoinverse = j.value("pseudoinverse", false);
  auto mean = io::required<std::vector<double>>(j.at("standardization"), "mean", where);
  auto scale = io::required<std::vector<double>>(j.at("standardization"), "scale", where);
  e.probe.standardization.mean = Eigen::Map<Vector>(mean.data(), static_cast<Eigen::Index>(mean.size()));
  e.probe.standardization.scale = Eigen::Map<Vector>(scale.data(), static_cast<Eigen::Index>(scale.size()));
  auto w = io::decode_f32(io::read_file(json_path.parent_path() / io::required<std::string>(j, "weights_file", where)));
  e.probe.weights = Eigen::Map<Eigen::VectorXf>(w.data(), static_cast<Eigen::Index>(w.size())).cast<double>();
  e.calibration.x = io::required<std::vector<double>>(j.at("calibration"), "x", where);
  e.calibration.y = io::required<std::vector<double>>(j.at("calibration"), "y", where);
  e.train_rmse = j.value("train_rmse", 0.0);
  e.test_rmse = j.value("test_rmse", 0.0);
  e.probe.validate();
  e.calibration.validate();
  return e;
}

// ---------------------------------------------------------------------------
// sweep report: report.json plus one bundle per (layer, concept)

inline const char* to_string(Part p) {
  return p == Part::train ? "train" : p == Part::calibration ? "calibration" : "test";
}

inline void write_probe_report(const std::filesystem::path& dir, const ProbeReport& r) {
  std::filesystem::create_directories(dir);
  nlohmann::json probes = nlohmann::json::array();
  std::string csv = "layer,concept,lambda,train_rmse,test_rmse\n";
  for (const auto& e : r.entries) {
    write_probe_bundle(dir, e);
    probes.push_back({{"layer", e.probe.layer},
                      {"concept", e.probe.concept_name},
                      {"file", probe_basename(e.probe.layer, e.probe.concept_name) + ".json"},
                      {"lambda", e.probe.lambda},
                      {"pseudoinverse", e.probe.pseudoinverse},
                      {"train_rmse", e.train_rmse},
                      {"test_rmse", e.test_rmse}});
    csv += std::to_string(e.probe.layer) + "," + csv_escape(e.probe.concept_name) + "," + fmt_double(e.probe.lambda) + "," +
           fmt_double(e.train_rmse) + "," + fmt_double(e.test_rmse) + "\n";
  }
  nlohmann::json split = nlohmann::json::object();
  for (Part p : {Part::train, Part::calibration, Part::test}) split[to_string(p)] = r.split.stories(p);
  nlohmann::json j = {{"domain", r.domain},
                      {"concepts", r.concepts},
                      {"layers", r.layers},
                      {"mean_test_rmse", r.mean_test_rmse},
                      {"selected_layer", r.selected_layer},
                      {"probes", probes},
                      {"split", split}};
  io::write_file(dir / "report.json", j.dump(2) + "\n");
  io::write_file(dir / "rmse.csv", csv);
}

inline ProbeReport read_probe_report(const std::filesystem::path& dir) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_file(dir / "report.json"));
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError("report.json: " + std::string(e.what()));
  }
  const std::string where = "report.json";
  ProbeReport r;
  r.domain = io::required<std::string>(j, "domain", where);
  r.concepts = io::required<std::vector<std::string>>(j, "concepts", where);
  r.layers = io::required<std::vector<int>>(j, "layers", where);
  r.mean_test_rmse = io::required<std::vector<double>>(j, "mean_test_rmse", where);
  r.selected_layer = io::required<int>(j, "selected_layer", where);
  for (const auto& p : io::required<nlohmann::json>(j, "probes", where))
    r.entries.push_back(read_probe_bundle(dir / io::required<std::string>(p, "file", where)));
  const auto split = io::required<nlohmann::json>(j, "split", where);
  for (Part p : {Part::train, Part::calibration, Part::test})
    for (const auto& id : io::required<std::vector<std::string>>(split, to_string(p), where)) r.split.part[id] = p;
  if (r.entries.size() != r.layers.size() * r.concepts.size())
    throw ValidationError("report.json: expected one probe per (layer, concept)");
  return r;
}

} // namespace cbs::probes
