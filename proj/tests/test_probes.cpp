#include <gtest/gtest.h>

#include <limits>

#include "support.hpp"

using namespace cbs;
using namespace cbs::probes;
using testing_support::random_matrix;
using testing_support::random_vector;

namespace {

// Independent ridge solve: own standardization (ddof 1), augmented design with an
// unpenalized intercept column, normal equations via full-pivot LU.
struct Reference {
  Vector theta;
  double theta0;
};

Reference normal_equation_ridge(const Matrix& Z, const Vector& y, double lambda) {
  const auto n = Z.rows(), q = Z.cols();
  Matrix X(n, q + 1);
  for (Eigen::Index j = 0; j < q; ++j) {
    double mean = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) mean += Z(i, j);
    mean /= static_cast<double>(n);
    double ss = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) ss += (Z(i, j) - mean) * (Z(i, j) - mean);
    double sd = std::sqrt(ss / static_cast<double>(n - 1));
    if (sd == 0.0) sd = 1.0;
    for (Eigen::Index i = 0; i < n; ++i) X(i, j) = (Z(i, j) - mean) / sd;
  }
  X.col(q).setOnes();
  Matrix A = X.transpose() * X;
  for (Eigen::Index j = 0; j < q; ++j) A(j, j) += lambda;
  Vector sol = A.fullPivLu().solve(X.transpose() * y);
  return {sol.head(q), sol(q)};
}

double relative_error(const Vector& a, const Vector& b) { return (a - b).norm() / std::max(1.0, b.norm()); }

// Grid dynamic program: minimum of sum w (f - y)^2 over non-decreasing f on {0, step, ..., 1}.
Vector grid_monotone_min(const Vector& y, const Vector& w, double step) {
  const int G = static_cast<int>(std::lround(1.0 / step)) + 1;
  const auto n = y.size();
  std::vector<std::vector<double>> cost(static_cast<std::size_t>(n), std::vector<double>(static_cast<std::size_t>(G)));
  std::vector<std::vector<int>> arg(static_cast<std::size_t>(n), std::vector<int>(static_cast<std::size_t>(G)));
  for (Eigen::Index i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    int best_g = 0;
    for (int g = 0; g < G; ++g) {
      if (i > 0 && cost[static_cast<std::size_t>(i - 1)][static_cast<std::size_t>(g)] < best) {
        best = cost[static_cast<std::size_t>(i - 1)][static_cast<std::size_t>(g)];
        best_g = g;
      }
      const double v = g * step;
      cost[static_cast<std::size_t>(i)][static_cast<std::size_t>(g)] = (i > 0 ? best : 0.0) + w(i) * (v - y(i)) * (v - y(i));
      arg[static_cast<std::size_t>(i)][static_cast<std::size_t>(g)] = best_g;
    }
  }
  int g = 0;
  for (int h = 1; h < G; ++h)
    if (cost[static_cast<std::size_t>(n - 1)][static_cast<std::size_t>(h)] <
        cost[static_cast<std::size_t>(n - 1)][static_cast<std::size_t>(g)])
      g = h;
  Vector f(n);
  for (Eigen::Index i = n - 1; i >= 0; --i) {
    f(i) = g * step;
    g = arg[static_cast<std::size_t>(i)][static_cast<std::size_t>(g)];
  }
  return f;
}

double weighted_sse(const Vector& f, const Vector& y, const Vector& w) {
  return (w.array() * (f - y).array().square()).sum();
}

} // namespace

TEST(Ridge, ExactLinearData) {
  Matrix Z(3, 1);
  Z << 1, 2, 3;
  Vector y(3);
  y << 2, 4, 6;
  const auto p = fit_ridge(Z, y, 0.0);
  EXPECT_NEAR(p.raw_weights()(0), 2.0, 1e-12);
  EXPECT_NEAR(p.raw_bias(), 0.0, 1e-12);
  EXPECT_LT((p.raw_outputs(Z) - y).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_FALSE(p.pseudoinverse);
}

TEST(Ridge, ShrunkSlopeMatchesClosedForm) {
  // The sample sd of {1,2,3} is 1, so the standardized design equals the centered one.
  Matrix Z(3, 1);
  Z << 1, 2, 3;
  Vector y(3);
  y << 2, 4, 6;
  const auto p = fit_ridge(Z, y, 2.0);
  const double sxy = 4.0, sxx = 2.0;
  EXPECT_NEAR(p.raw_weights()(0), sxy / (sxx + 2.0), 1e-12);
  EXPECT_NEAR(p.raw_weights()(0), 1.0, 1e-12);
  EXPECT_NEAR(p.raw_bias(), 2.0, 1e-12);
}

TEST(Ridge, RandomInstanceMatchesNormalEquations) {
  std::mt19937_64 gen(50);
  const Matrix Z = random_matrix(gen, 50, 8);
  const Vector y = random_vector(gen, 50);
  const auto p = fit_ridge(Z, y, 0.7);
  const auto ref = normal_equation_ridge(Z, y, 0.7);
  EXPECT_LT(relative_error(p.weights, ref.theta), 1e-8);
  EXPECT_NEAR(p.bias, ref.theta0, 1e-8 * std::max(1.0, std::abs(ref.theta0)));
}

TEST(Ridge, TwoHundredRandomInstances) {
  std::mt19937_64 gen(2024);
  std::uniform_int_distribution<int> nd(2, 100), qd(1, 32);
  std::uniform_real_distribution<double> ld(-3.0, 3.0);
  for (int inst = 0; inst < 200; ++inst) {
    const int n = nd(gen), q = qd(gen);
    const double lambda = std::pow(10.0, ld(gen));
    Matrix Z = random_matrix(gen, n, q, 2.0);
    Z.rowwise() += random_vector(gen, q, 3.0).transpose();
    const Vector y = random_vector(gen, n);
    const auto p = fit_ridge(Z, y, lambda);
    const auto ref = normal_equation_ridge(Z, y, lambda);
    EXPECT_LT(relative_error(p.weights, ref.theta), 1e-8) << "instance " << inst << " n=" << n << " q=" << q;
    EXPECT_NEAR(p.bias, ref.theta0, 1e-8 * std::max(1.0, std::abs(ref.theta0)));

    // gradient of the objective in the standardized basis
    const Matrix X = p.standardization.apply(Z);
    const Vector r = X * p.weights + Vector::Constant(n, p.bias) - y;
    const Vector grad = 2.0 * X.transpose() * r + 2.0 * lambda * p.weights;
    const double scale = std::max(1.0, (2.0 * X.transpose() * y).norm());
    EXPECT_LE(grad.norm() / scale, 1e-5) << "instance " << inst;
    EXPECT_LE(std::abs(2.0 * r.sum()) / std::max(1.0, 2.0 * y.cwiseAbs().sum()), 1e-5);
  }
}

TEST(Ridge, NormShrinksWithLambda) {
  std::mt19937_64 gen(8);
  const Matrix Z = random_matrix(gen, 40, 6);
  const Vector y = random_vector(gen, 40);
  RidgeSystem sys(Z);
  double prev = std::numeric_limits<double>::infinity();
  for (double lambda : {0.0, 1e-3, 1e-2, 0.1, 1.0, 10.0, 100.0, 1000.0}) {
    const double n = sys.solve(y, lambda).weights.norm();
    EXPECT_LE(n, prev + 1e-12);
    prev = n;
  }
}

TEST(Ridge, PredictionsIgnoreExternalStandardization) {
  std::mt19937_64 gen(9);
  Matrix Z = random_matrix(gen, 30, 5, 3.0);
  Z.rowwise() += random_vector(gen, 5, 10.0).transpose();
  const Vector y = random_vector(gen, 30);
  const auto s = Standardization::fit(Z);
  const Matrix Zs = s.apply(Z);
  const auto a = fit_ridge(Z, y, 0.5);
  const auto b = fit_ridge(Zs, y, 0.5);
  EXPECT_LT((a.raw_outputs(Z) - b.raw_outputs(Zs)).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Ridge, RankDeficientAtZeroLambdaUsesPseudoinverse) {
  Matrix Z(4, 2);
  Z << 1, 1, 2, 2, 3, 3, 4, 4;
  Vector y(4);
  y << 1, 2, 3, 4;
  const auto p = fit_ridge(Z, y, 0.0);
  EXPECT_TRUE(p.pseudoinverse);
  EXPECT_LT((p.raw_outputs(Z) - y).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_NEAR(p.weights(0), p.weights(1), 1e-10); // minimum-norm split
}

TEST(Ridge, InputErrors) {
  Matrix one(1, 2);
  one << 1, 2;
  EXPECT_THROW(fit_ridge(one, Vector::Ones(1), 1.0), ValidationError);
  Matrix Z = Matrix::Ones(3, 2);
  Vector y = Vector::Ones(3);
  Z(1, 1) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(fit_ridge(Z, y, 1.0), ValidationError);
  EXPECT_THROW(fit_ridge(Matrix::Ones(3, 2), y, -1.0), ValidationError);
  EXPECT_THROW(fit_ridge(Matrix::Ones(3, 2), Vector::Ones(4), 1.0), ValidationError);
}

TEST(Pava, AlreadyMonotoneIsUnchanged) {
  Vector y(5);
  y << 0.1, 0.2, 0.2, 0.5, 0.9;
  EXPECT_EQ(pava(y, Vector::Ones(5)), y);
}

TEST(Pava, PoolsAdjacentViolators) {
  Vector x(3), y(3);
  x << 1, 2, 3;
  y << 1, 3, 2;
  const Vector f = isotonic_fit(x, y);
  EXPECT_NEAR(f(0), 1.0, 1e-15);
  EXPECT_NEAR(f(1), 2.5, 1e-15);
  EXPECT_NEAR(f(2), 2.5, 1e-15);
  // grid oracle on the rescaled problem (values / 4 stay inside [0,1])
  const Vector g = grid_monotone_min(y / 4.0, Vector::Ones(3), 1e-3);
  EXPECT_NEAR(g(1) * 4.0, 2.5, 4e-3);
  // the calibration map clips to [0,1]
  const auto map = pava_isotonic(x, y);
  for (double v : map.y) EXPECT_EQ(v, 1.0);
}

TEST(Pava, ConstantInputGivesConstantMap) {
  Vector x(4), y = Vector::Constant(4, 0.3);
  x << 0.1, 0.7, 0.2, 0.5;
  const auto map = pava_isotonic(x, y);
  for (double q : {-5.0, 0.0, 0.15, 0.33, 0.9, 9.0}) EXPECT_NEAR(map(q), 0.3, 1e-15);
}

TEST(Pava, MatchesGridBruteForceOnSmallInstances) {
  std::mt19937_64 gen(99);
  std::uniform_int_distribution<int> nd(1, 6), level(0, 100);
  std::uniform_real_distribution<double> wd(0.1, 3.0);
  const double step = 0.01;
  for (int inst = 0; inst < 3000; ++inst) {
    const int n = nd(gen);
    Vector y(n), w(n);
    for (int i = 0; i < n; ++i) {
      y(i) = level(gen) * step;
      w(i) = inst % 2 ? wd(gen) : 1.0;
    }
    const Vector f = pava(y, w);
    for (int i = 1; i < n; ++i) EXPECT_LE(f(i - 1), f(i));
    const Vector g = grid_monotone_min(y, w, step);
    EXPECT_LE((f - g).cwiseAbs().maxCoeff(), step + 1e-9) << "instance " << inst;
    EXPECT_LE(weighted_sse(f, y, w), weighted_sse(g, y, w) + 1e-12);
  }
}

TEST(Pava, RejectsNonPositiveWeights) {
  Vector y = Vector::Ones(3), w = Vector::Ones(3);
  w(1) = 0.0;
  EXPECT_THROW(pava(y, w), ValidationError);
  EXPECT_THROW(pava_isotonic(Vector::LinSpaced(3, 0, 1), y, w), ValidationError);
}

TEST(Calibration, InterpolatesAndClamps) {
  CalibrationMap m{{0.0, 1.0, 3.0}, {0.1, 0.3, 0.9}};
  m.validate();
  EXPECT_NEAR(m(0.5), 0.2, 1e-15);
  EXPECT_NEAR(m(2.0), 0.6, 1e-15);
  EXPECT_EQ(m(-1.0), 0.1);
  EXPECT_EQ(m(10.0), 0.9);
  EXPECT_THROW((CalibrationMap{{0.0, 0.0}, {0.1, 0.2}}.validate()), ValidationError);
  EXPECT_THROW((CalibrationMap{{0.0, 1.0}, {0.3, 0.2}}.validate()), ValidationError);
}

TEST(Calibration, NeverWorsensTrainingError) {
  std::mt19937_64 gen(4);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> n01(0.0, 1.0);
  for (int inst = 0; inst < 50; ++inst) {
    const int n = 20 + inst;
    Vector x(n), y(n);
    for (int i = 0; i < n; ++i) {
      x(i) = n01(gen);
      y(i) = std::clamp(0.5 + 0.2 * x(i) + 0.1 * n01(gen), 0.0, 1.0);
    }
    const auto map = pava_isotonic(x, y);
    Vector cal(n), raw(n);
    for (int i = 0; i < n; ++i) {
      cal(i) = map(x(i));
      raw(i) = std::clamp(x(i), 0.0, 1.0);
    }
    EXPECT_LE((cal - y).squaredNorm(), (raw - y).squaredNorm() + 1e-12);
  }
}

TEST(Predict, IdentityCalibrationClampsToScale) {
  Matrix Z(3, 1);
  Z << 1, 2, 3;
  Vector y(3);
  y << 2, 4, 6;
  const auto p = fit_ridge(Z, y, 0.0);
  Vector z(1);
  z << 2;
  EXPECT_NEAR(p.raw_output(z), 4.0, 1e-12);
  EXPECT_EQ(predict(p, CalibrationMap::identity(), z), 1.0);
  EXPECT_EQ(predict(p, CalibrationMap::constant(0.37), z), 0.37);
  Vector bad(2);
  EXPECT_THROW(predict(p, CalibrationMap::identity(), bad), ValidationError);
}

TEST(Predict, RmseExamples) {
  Matrix Z(4, 1);
  Z << 0, 1, 2, 3;
  Vector y(4);
  y << 0, 1, 0, 1;
  const auto p = fit_ridge(Z, y, 1.0);
  EXPECT_NEAR(evaluate_rmse(p, CalibrationMap::constant(0.5), Z, y), 0.5, 1e-15);
  Vector yy(4);
  yy << 0.1, 0.2, 0.3, 0.4;
  const auto exact = fit_ridge(Z, yy, 0.0);
  EXPECT_NEAR(evaluate_rmse(exact, CalibrationMap::identity(), Z, yy), 0.0, 1e-12);
  EXPECT_THROW(evaluate_rmse(p, CalibrationMap::identity(), Matrix(0, 1), Vector(0)), ValidationError);
}

TEST(Split, ByStoryWithSeventyFifteenFifteen) {
  std::vector<std::string> ids;
  for (int i = 0; i < 200; ++i) ids.push_back(oracle::story_name(i, 200));
  const auto s = split_stories(ids, 0.70, 0.15, 3);
  EXPECT_EQ(s.stories(Part::train).size(), 140u);
  EXPECT_EQ(s.stories(Part::calibration).size(), 30u);
  EXPECT_EQ(s.stories(Part::test).size(), 30u);
  EXPECT_EQ(s.part.size(), 200u);
  auto shuffled = ids;
  std::reverse(shuffled.begin(), shuffled.end());
  EXPECT_EQ(split_stories(shuffled, 0.70, 0.15, 3).part, s.part); // input order does not matter
  EXPECT_THROW(split_stories({"a", "b"}, 0.7, 0.15, 0), ValidationError);
}

TEST(Sweep, SingleLayerIsSelected) {
  auto g = oracle::generate(testing_support::small_space(30), 5);
  const auto domain = g.truth.space.config.concept_domain();
  const auto r = layer_sweep({g.dataset.layer(1)}, g.dataset.domain_trajectories(domain.name), domain, {1.0});
  EXPECT_EQ(r.selected_layer, 1);
  EXPECT_EQ(r.entries.size(), domain.size());
}

TEST(Sweep, IdenticalLayersPickLowerIndex) {
  auto g = oracle::generate(testing_support::small_space(30), 5);
  const auto domain = g.truth.space.config.concept_domain();
  ActivationDataset a = g.dataset.layer(2), b = a;
  a.layer = 7;
  b.layer = 3;
  const auto r = layer_sweep({a, b}, g.dataset.domain_trajectories(domain.name), domain, {1.0});
  EXPECT_EQ(r.mean_test_rmse[0], r.mean_test_rmse[1]);
  EXPECT_EQ(r.selected_layer, 3);
}

TEST(Sweep, FindsPlantedSignalLayerAndMeetsNoiseFloor) {
  auto cfg = testing_support::small_space(120);
  cfg.layers = {0, 1, 2};
  cfg.gains = {0.02, 0.05, 1.0};
  auto g = oracle::generate(cfg, 17);
  const auto domain = cfg.concept_domain();
  const auto r = layer_sweep(g.dataset.activations, g.dataset.domain_trajectories(domain.name), domain);
  EXPECT_EQ(r.selected_layer, 2);
  for (const auto& c : domain.concepts) EXPECT_LE(r.at(2, c).test_rmse, cfg.sigma + 0.02) << c;
  EXPECT_EQ(r.entries.size(), 3 * domain.size());
}

TEST(Sweep, CrossValidationPrefersSmallLambdaOnCleanData) {
  std::mt19937_64 gen(12);
  const int n = 200;
  const Matrix Z = random_matrix(gen, n, 4);
  Vector y = Z.col(0) * 0.3 + Z.col(1) * 0.1;
  std::vector<int> groups;
  for (int i = 0; i < n; ++i) groups.push_back(i / 5);
  const auto l = cross_validate_lambda(Z, {y}, groups, default_lambda_grid(), 5, 1);
  EXPECT_EQ(l[0], 1e-3);
}

TEST(ProbeFiles, BundleAndReportRoundTrip) {
  auto g = oracle::generate(testing_support::small_space(20), 8);
  const auto domain = g.truth.space.config.concept_domain();
  const auto r = layer_sweep(g.dataset.activations, g.dataset.domain_trajectories(domain.name), domain, {10.0});
  testing_support::TempDir dir("probes");
  write_probe_report(dir.path(), r);
  const auto back = read_probe_report(dir.path());
  EXPECT_EQ(back.selected_layer, r.selected_layer);
  EXPECT_EQ(back.layers, r.layers);
  EXPECT_EQ(back.split.part, r.split.part);
  ASSERT_EQ(back.entries.size(), r.entries.size());
  for (std::size_t i = 0; i < r.entries.size(); ++i) {
    const auto& a = r.entries[i];
    const auto& b = back.entries[i];
    EXPECT_EQ(a.probe.layer, b.probe.layer);
    EXPECT_EQ(a.probe.concept_name, b.probe.concept_name);
    EXPECT_EQ(a.calibration, b.calibration);
    EXPECT_EQ(a.probe.bias, b.probe.bias);
    EXPECT_LT((a.probe.weights - b.probe.weights).cwiseAbs().maxCoeff(), 1e-6 * (1.0 + a.probe.weights.cwiseAbs().maxCoeff()));
  }
  const auto j = nlohmann::json::parse(io::read_file(dir / ("probe_layer0_" + domain.concepts[0] + ".json")));
  for (const char* key : {"layer", "concept", "lambda", "bias", "standardization", "weights_file", "calibration"})
    EXPECT_TRUE(j.contains(key)) << key;
}
