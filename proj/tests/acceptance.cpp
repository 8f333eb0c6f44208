// Acceptance run: one PASS/FAIL line per criterion, with timing and the measured
// values. Exit status is 1 if any criterion fails.

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <sstream>

#include "support.hpp"

using namespace cbs;
namespace fs = std::filesystem;
using testing_support::random_matrix;
using testing_support::random_vector;
using testing_support::run_cli;
using testing_support::snapshot;
using testing_support::TempDir;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void check(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

int failures = 0;

void criterion(const std::string& name, double budget_s, const std::function<void(Outcome&)>& body) {
  Outcome o;
  const auto start = std::chrono::steady_clock::now();
  try {
    body(o);
  } catch (const std::exception& e) {
    o.pass = false;
    o.detail << " [exception: " << e.what() << "]";
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (budget_s > 0.0) o.check(secs < budget_s, "runtime over " + std::to_string(budget_s) + " s");
  if (!o.pass) ++failures;
  std::printf("%s %-24s %7.2fs %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), secs, o.detail.str().c_str());
  std::fflush(stdout);
}

// ---------------------------------------------------------------------------
// independent references

Rating11 random_simplex(std::mt19937_64& gen) {
  std::exponential_distribution<double> e(1.0);
  Rating11 p{};
  double s = 0.0;
  for (auto& v : p) s += (v = e(gen));
  for (auto& v : p) v /= s;
  return p;
}

double hand_rating(const Rating11& p) {
  double acc = 0.0;
  for (int i = 0; i < 11; ++i) acc += p[static_cast<std::size_t>(i)] * (i / 10.0);
  return acc;
}

// Ridge with its own standardization and an explicit intercept column, solved by LU.
std::pair<Vector, double> normal_equation_ridge(const Matrix& Z, const Vector& y, double lambda) {
  const auto n = Z.rows(), q = Z.cols();
  Matrix X(n, q + 1);
  for (Eigen::Index j = 0; j < q; ++j) {
    const double mean = Z.col(j).mean();
    double sd = std::sqrt((Z.col(j).array() - mean).square().sum() / static_cast<double>(n - 1));
    if (sd == 0.0) sd = 1.0;
    X.col(j) = (Z.col(j).array() - mean) / sd;
  }
  X.col(q).setOnes();
  Matrix A = X.transpose() * X;
  A.diagonal().head(q).array() += lambda;
  const Vector sol = A.fullPivLu().solve(X.transpose() * y);
  return {sol.head(q), sol(q)};
}

// Exact minimum of the weighted squared error over non-decreasing sequences whose
// values lie on the grid {0, step, ..., 1}; dynamic program over levels.
Vector grid_monotone_min(const Vector& y, const Vector& w, double step) {
  const int levels = static_cast<int>(std::lround(1.0 / step)) + 1;
  const auto n = y.size();
  std::vector<std::vector<double>> cost(static_cast<std::size_t>(n), std::vector<double>(levels));
  std::vector<std::vector<int>> from(static_cast<std::size_t>(n), std::vector<int>(levels));
  for (Eigen::Index i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    int arg = 0;
    for (int v = 0; v < levels; ++v) {
      if (i > 0 && cost[static_cast<std::size_t>(i - 1)][v] < best) {
        best = cost[static_cast<std::size_t>(i - 1)][v];
        arg = v;
      }
      const double d = v * step - y(i);
      cost[static_cast<std::size_t>(i)][v] = w(i) * d * d + (i > 0 ? best : 0.0);
      from[static_cast<std::size_t>(i)][v] = arg;
    }
  }
  const auto& last = cost.back();
  int v = static_cast<int>(std::min_element(last.begin(), last.end()) - last.begin());
  Vector out(n);
  for (Eigen::Index i = n - 1; i >= 0; --i) {
    out(i) = v * step;
    v = from[static_cast<std::size_t>(i)][v];
  }
  return out;
}

double weighted_sse(const Vector& f, const Vector& y, const Vector& w) {
  return (w.array() * (f - y).array().square()).sum();
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(io::read_file(p)); }

bool run_pipeline(const fs::path& out, Outcome& o) {
  for (const char* sub : {"synth-gen", "probe", "manifold", "geometry", "steer", "export-plots"}) {
    const auto r = run_cli({sub, "--out", out.string()});
    if (r.code != 0) {
      o.check(false, std::string(sub) + " exited " + std::to_string(r.code) + ": " + r.err);
      return false;
    }
  }
  return true;
}

Vector positions(const ActivationDataset& a) {
  Vector t(static_cast<Eigen::Index>(a.size()));
  for (std::size_t i = 0; i < a.size(); ++i) t(static_cast<Eigen::Index>(i)) = a.index[i].t;
  return t;
}

double position_r2(bool planted) {
  oracle::SpaceConfig cfg;
  cfg.position_planted = planted;
  const auto g = oracle::generate(cfg, 0);
  const auto& a = g.dataset.layer(cfg.signal_layer());
  const Matrix rows = a.rows.cast<double>();
  return geometry::position_encoding_check(manifold::project(manifold::fit_pca(rows, 2), rows), positions(a));
}

} // namespace

int main() {
  TempDir work("acceptance");
  const auto run_a = work / "a";

  criterion("elicitation", 1.0, [](Outcome& o) {
    int bad = 0;
    for (int k = 0; k <= 10; ++k) {
      Rating11 p{};
      p[static_cast<std::size_t>(k)] = 1.0;
      bad += std::abs(elicitation::expected_rating(p) - k / 10.0) > 1e-12;
    }
    Rating11 u;
    u.fill(1.0 / 11.0);
    bad += std::abs(elicitation::expected_rating(u) - 0.5) > 1e-12;
    for (int i = 0; i <= 10; ++i)
      for (int j = i + 1; j <= 10; ++j)
        for (double m : {0.1, 0.25, 0.5, 0.9}) {
          Rating11 p{};
          p[static_cast<std::size_t>(i)] = m;
          p[static_cast<std::size_t>(j)] = 1.0 - m;
          bad += std::abs(elicitation::expected_rating(p) - (m * i + (1.0 - m) * j) / 10.0) > 1e-12;
        }
    std::mt19937_64 gen(1);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::uniform_int_distribution<int> idx(0, 10);
    int linear_bad = 0, monotone_bad = 0;
    for (int n = 0; n < 1000; ++n) {
      const auto p = random_simplex(gen), q = random_simplex(gen);
      const double lam = u01(gen);
      Rating11 mix{};
      for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = lam * p[i] + (1.0 - lam) * q[i];
      const double ep = elicitation::expected_rating(p), eq = elicitation::expected_rating(q);
      linear_bad += std::abs(elicitation::expected_rating(mix) - (lam * ep + (1.0 - lam) * eq)) > 1e-12;
      linear_bad += std::abs(ep - hand_rating(p)) > 1e-12;
      auto moved = p;
      int i = idx(gen), j = idx(gen);
      if (i > j) std::swap(i, j);
      const double m = u01(gen) * moved[static_cast<std::size_t>(i)];
      moved[static_cast<std::size_t>(i)] -= m;
      moved[static_cast<std::size_t>(j)] += m;
      monotone_bad += elicitation::expected_rating(moved) < ep - 1e-15;
    }
    o.detail << "hand-arithmetic mismatches " << bad << ", linearity " << linear_bad << ", monotonicity "
             << monotone_bad << " (1000 draws)";
    o.check(bad == 0 && linear_bad == 0 && monotone_bad == 0, "property violations");
  });

  criterion("ridge", 10.0, [](Outcome& o) {
    std::mt19937_64 gen(2);
    std::uniform_int_distribution<int> nd(2, 100), qd(1, 32);
    std::uniform_real_distribution<double> ld(-3.0, 3.0);
    double worst_rel = 0.0, worst_grad = 0.0;
    for (int inst = 0; inst < 200; ++inst) {
      const int n = nd(gen), q = qd(gen);
      const double lambda = std::pow(10.0, ld(gen));
      Matrix Z = random_matrix(gen, n, q, 2.0);
      Z.rowwise() += random_vector(gen, q, 3.0).transpose();
      const Vector y = random_vector(gen, n);
      const auto p = probes::fit_ridge(Z, y, lambda);
      const auto [theta, theta0] = normal_equation_ridge(Z, y, lambda);
      const double rel = (p.weights - theta).norm() / std::max(1.0, theta.norm());
      worst_rel = std::max({worst_rel, rel, std::abs(p.bias - theta0) / std::max(1.0, std::abs(theta0))});
      const Matrix X = p.standardization.apply(Z);
      const Vector r = X * p.weights + Vector::Constant(n, p.bias) - y;
      const Vector grad = 2.0 * X.transpose() * r + 2.0 * lambda * p.weights;
      worst_grad = std::max({worst_grad, grad.norm() / std::max(1.0, (2.0 * X.transpose() * y).norm()),
                             std::abs(2.0 * r.sum()) / std::max(1.0, 2.0 * y.cwiseAbs().sum())});
    }
    o.detail << "200 instances, worst relative error " << worst_rel << ", worst scaled gradient " << worst_grad;
    o.check(worst_rel <= 1e-8, "solution mismatch");
    o.check(worst_grad <= 1e-5, "gradient");
  });

  criterion("pava", 30.0, [](Outcome& o) {
    std::mt19937_64 gen(3);
    std::uniform_int_distribution<int> nd(1, 6), level(0, 100);
    std::uniform_real_distribution<double> wd(0.1, 3.0);
    const double step = 0.01;
    int instances = 0, not_monotone = 0, off_grid = 0, worse = 0;
    for (int inst = 0; inst < 20000; ++inst, ++instances) {
      const int n = nd(gen);
      Vector y(n), w(n);
      for (int i = 0; i < n; ++i) {
        y(i) = level(gen) * step;
        w(i) = inst % 2 ? wd(gen) : 1.0;
      }
      const Vector f = probes::pava(y, w);
      for (int i = 1; i < n; ++i) not_monotone += f(i - 1) > f(i);
      const Vector g = grid_monotone_min(y, w, step);
      off_grid += (f - g).cwiseAbs().maxCoeff() > step + 1e-9;
      worse += weighted_sse(f, y, w) > weighted_sse(g, y, w) + 1e-12;
    }
    o.detail << instances << " instances, non-monotone " << not_monotone << ", beyond grid resolution " << off_grid
             << ", worse than grid optimum " << worse;
    o.check(not_monotone == 0 && off_grid == 0 && worse == 0, "mismatch against brute force");
  });

  // The default pipeline run feeds the probe, geometry and steering criteria.
  bool have_run = false;
  criterion("oracle probe recovery", 60.0, [&](Outcome& o) {
    for (const char* sub : {"synth-gen", "probe"}) {
      const auto r = run_cli({sub, "--out", run_a.string()});
      o.check(r.code == 0, std::string(sub) + " failed: " + r.err);
      if (r.code != 0) return;
    }
    const auto report = probes::read_probe_report(run_a / "probes");
    const oracle::SpaceConfig space;
    double worst = 0.0;
    for (const auto& c : report.concepts) worst = std::max(worst, report.at(report.selected_layer, c).test_rmse);
    o.detail << "selected layer " << report.selected_layer << " (planted " << space.signal_layer()
             << "), worst calibrated test RMSE " << worst << " (limit " << space.sigma + 0.02 << ")";
    o.check(report.selected_layer == space.signal_layer(), "wrong layer");
    o.check(worst <= space.sigma + 0.02, "RMSE");
  });

  criterion("geometry recovery", 30.0, [&](Outcome& o) {
    for (const char* sub : {"manifold", "geometry"}) {
      const auto r = run_cli({sub, "--out", run_a.string()});
      o.check(r.code == 0, std::string(sub) + " failed: " + r.err);
      if (r.code != 0) return;
    }
    const auto g = run_a / "geometry";
    const double residual = read_json(g / "ground_truth_alignment.json").at("activations").at("residual").get<double>();
    const double r = read_json(g / "correlation.json").at("behavior_vs_activations").at("r").get<double>();
    const std::set<std::string> a{"a1", "a2", "a3"}, b{"b1", "b2", "b3"};
    bool split_ok = true;
    for (const char* name : {"dendrogram_behavior.json", "dendrogram_activations.json"}) {
      const auto s = geometry::top_level_split(geometry::dendrogram_from_json(read_json(g / name)));
      const std::set<std::string> s0(s[0].begin(), s[0].end()), s1(s[1].begin(), s[1].end());
      split_ok = split_ok && ((s0 == a && s1 == b) || (s0 == b && s1 == a));
    }
    o.detail << "activation centroid Procrustes residual " << residual << ", r(My, Mz) " << r << ", Ward split "
             << (split_ok ? "3+3 as planted" : "wrong");
    o.check(residual < 0.05, "residual");
    o.check(r >= 0.9, "distance correlation");
    o.check(split_ok, "Ward split");
    have_run = true;
  });

  criterion("steering", 60.0, [&](Outcome& o) {
    o.check(have_run, "needs the geometry stage");
    if (!have_run) return;
    auto r = run_cli({"steer", "--out", run_a.string()});
    o.check(r.code == 0, "steer failed: " + r.err);
    if (r.code != 0) return;
    const auto s = run_a / "steer";
    const Matrix E = geometry::matrix_from_json(read_json(s / "entanglement.json").at("effects"));
    bool diag_ok = true;
    double min_margin = std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < E.rows(); ++i) {
      const double off = (E.row(i).sum() - E(i, i)) / static_cast<double>(E.cols() - 1);
      min_margin = std::min(min_margin, E(i, i) - off);
      diag_ok = diag_ok && E(i, i) > off;
    }
    const double r_dist = read_json(s / "prediction.json").at("r_distance").get<double>();

    double worst_single = 0.0, worst_multi = std::numeric_limits<double>::infinity();
    const auto persistence = read_json(s / "persistence.json");
    for (const auto& entry : persistence) {
      const auto single = entry.at("single").at("relative").get<std::vector<double>>();
      const auto multi = entry.at("multi").at("relative").get<std::vector<double>>();
      worst_single = std::max(worst_single, std::abs(single.at(std::min<std::size_t>(3, single.size() - 1))));
      worst_multi = std::min(worst_multi, multi.back());
    }

    // alpha = 0 on a copy of the run
    const auto zero = work / "alpha0";
    fs::copy(run_a, zero, fs::copy_options::recursive);
    r = run_cli({"steer", "--out", zero.string(), "--alpha", "0"});
    o.check(r.code == 0, "alpha 0 steer failed: " + r.err);
    const Matrix E0 = geometry::matrix_from_json(read_json(zero / "steer/entanglement.json").at("effects"));

    o.detail << "min diagonal margin over mean off-diagonal " << min_margin << ", r(entanglement, distance) " << r_dist
             << ", alpha=0 max |effect| " << E0.cwiseAbs().maxCoeff() << ", single-layer relative after 3 layers <= "
             << worst_single << ", multi-span relative at last layer >= " << worst_multi;
    o.check(diag_ok, "diagonal dominance");
    o.check(std::abs(r_dist) >= 0.8, "|r| >= 0.8");
    o.check((E0.array() == 0.0).all(), "alpha 0 effect not exactly zero");
    o.check(worst_single < 0.2, "single-layer decay");
    o.check(worst_multi >= 0.8, "multi-span persistence");
  });

  criterion("position encoding", 0.0, [](Outcome& o) {
    const double planted = position_r2(true), random = position_r2(false);
    o.detail << "planted R2 " << planted << ", t-independent R2 " << random << " (200 stories)";
    o.check(planted >= 0.8, "planted");
    o.check(random < 0.05, "t-independent");
  });

  criterion("determinism", 180.0, [&](Outcome& o) {
    const auto x = work / "x", y = work / "y";
    if (!run_pipeline(x, o) || !run_pipeline(y, o)) return;
    const auto sx = snapshot(x), sy = snapshot(y);
    std::size_t differing = 0;
    for (const auto& [name, bytes] : sx) differing += !sy.count(name) || sy.at(name) != bytes;
    o.detail << sx.size() << " files vs " << sy.size() << ", " << differing << " differ";
    o.check(sx.size() == sy.size() && differing == 0, "trees differ");
  });

  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << "\n";
  return failures == 0 ? 0 : 1;
}
