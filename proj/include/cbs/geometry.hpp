#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cbs/core/dataset_io.hpp"
#include "cbs/core/format.hpp"
#include "cbs/core/types.hpp"

// Concept geometry: centroids, distance matrices, Ward hierarchies, and
// correlations between geometries.
namespace cbs::geometry {

struct CentroidSet {
  std::vector<std::string> concepts;
  Matrix points; // k x d
  std::vector<int> counts;

  Eigen::Index size() const { return points.rows(); }
};

// Mean embedded coordinate of every concept's points.
inline CentroidSet centroids(const Matrix& coords, const std::vector<std::string>& labels,
                             const std::vector<std::string>& concepts) {
  if (static_cast<std::size_t>(coords.rows()) != labels.size())
    throw ValidationError("centroids: " + std::to_string(coords.rows()) + " points but " +
                          std::to_string(labels.size()) + " labels");
  CentroidSet out;
  out.concepts = concepts;
  out.points = Matrix::Zero(static_cast<Eigen::Index>(concepts.size()), coords.cols());
  out.counts.assign(concepts.size(), 0);
  std::map<std::string, std::size_t> pos;
  for (std::size_t i = 0; i < concepts.size(); ++i) pos[concepts[i]] = i;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto it = pos.find(labels[i]);
    if (it == pos.end()) continue;
    out.points.row(static_cast<Eigen::Index>(it->second)) += coords.row(static_cast<Eigen::Index>(i));
    ++out.counts[it->second];
  }
  for (std::size_t c = 0; c < concepts.size(); ++c) {
    if (out.counts[c] == 0) throw ValidationError("concept '" + concepts[c] + "' has no points");
    out.points.row(static_cast<Eigen::Index>(c)) /= out.counts[c];
  }
  if (!out.points.allFinite()) throw ValidationError("centroids are not finite");
  return out;
}

struct DistanceMatrix {
  std::vector<std::string> concepts;
  Matrix values; // k x k

  Eigen::Index size() const { return values.rows(); }

  // Entries above the diagonal, row-major.
  Vector upper_triangle() const {
    const auto k = values.rows();
    Vector out(k * (k - 1) / 2);
    Eigen::Index n = 0;
    for (Eigen::Index i = 0; i < k; ++i)
      for (Eigen::Index j = i + 1; j < k; ++j) out(n++) = values(i, j);
    return out;
  }

  void validate() const {
    const auto k = values.rows();
    if (values.cols() != k || static_cast<std::size_t>(k) != concepts.size())
      throw ValidationError("distance matrix shape does not match its concepts");
    if (!values.allFinite()) throw ValidationError("distance matrix has non-finite entries");
    for (Eigen::Index i = 0; i < k; ++i) {
      if (values(i, i) != 0.0) throw ValidationError("distance matrix diagonal must be zero");
      for (Eigen::Index j = 0; j < k; ++j) {
        if (values(i, j) < 0.0) throw ValidationError("distance matrix has negative entries");
        if (values(i, j) != values(j, i)) throw ValidationError("distance matrix is not symmetric");
      }
    }
  }
};

inline DistanceMatrix distance_matrix(const Matrix& points, const std::vector<std::string>& concepts) {
  const auto k = points.rows();
  if (k < 2) throw ValidationError("distance matrix needs at least 2 concepts");
  DistanceMatrix out{concepts, Matrix::Zero(k, k)};
  for (Eigen::Index i = 0; i < k; ++i)
    for (Eigen::Index j = i + 1; j < k; ++j) out.values(i, j) = out.values(j, i) = (points.row(i) - points.row(j)).norm();
  out.validate();
  return out;
}

inline DistanceMatrix distance_matrix(const CentroidSet& c) { return distance_matrix(c.points, c.concepts); }

// ---------------------------------------------------------------------------
// Ward agglomerative clustering

struct Merge {
  int a = 0, b = 0; // cluster ids: leaves 0..k-1, merge i creates id k+i
  double height = 0.0;
  int size = 0;
  friend bool operator==(const Merge&, const Merge&) = default;
};

struct Dendrogram {
  std::vector<std::string> leaves;
  std::vector<Merge> merges;
  std::vector<int> leaf_order;

  int leaf_count() const { return static_cast<int>(leaves.size()); }

  std::vector<int> members(int id) const {
    const int k = leaf_count();
    if (id < k) return {id};
    const auto& m = merges.at(static_cast<std::size_t>(id - k));
    auto left = members(m.a);
    auto right = members(m.b);
    left.insert(left.end(), right.begin(), right.end());
    return left;
  }
};

// Lance-Williams Ward update on Euclidean distances (merge height for two
// singletons equals their distance). Ties go to the lowest (a, b) cluster ids.
inline Dendrogram ward_cluster(const DistanceMatrix& dm) {
  const auto k = static_cast<int>(dm.size());
  if (k < 2) throw ValidationError("Ward clustering needs at least 2 items");
  if (!dm.values.allFinite()) throw ValidationError("Ward clustering got non-finite distances");
  dm.validate();

  const int total = 2 * k - 1;
  Matrix d = Matrix::Zero(total, total);
  d.topLeftCorner(k, k) = dm.values;
  std::vector<int> size(static_cast<std::size_t>(total), 1);
  std::vector<int> active(static_cast<std::size_t>(k));
  std::iota(active.begin(), active.end(), 0);

  Dendrogram out;
  out.leaves = dm.concepts;
  for (int step = 0; step < k - 1; ++step) {
    std::size_t bi = 0, bj = 1;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < active.size(); ++i)
      for (std::size_t j = i + 1; j < active.size(); ++j)
        if (d(active[i], active[j]) < best) {
          best = d(active[i], active[j]);
          bi = i;
          bj = j;
        }
    const int a = active[bi], b = active[bj], n = k + step;
    size[static_cast<std::size_t>(n)] = size[static_cast<std::size_t>(a)] + size[static_cast<std::size_t>(b)];
    for (int c : active) {
      if (c == a || c == b) continue;
      const double na = size[static_cast<std::size_t>(a)], nb = size[static_cast<std::size_t>(b)],
                   nc = size[static_cast<std::size_t>(c)];
      const double t = na + nb + nc;
      double sq = ((na + nc) * d(a, c) * d(a, c) + (nb + nc) * d(b, c) * d(b, c) - nc * best * best) / t;
      d(n, c) = d(c, n) = std::sqrt(std::max(sq, 0.0));
    }
    out.merges.push_back({a, b, best, size[static_cast<std::size_t>(n)]});
    active.erase(active.begin() + static_cast<std::ptrdiff_t>(bj));
    active.erase(active.begin() + static_cast<std::ptrdiff_t>(bi));
    active.push_back(n);
  }
  out.leaf_order = out.members(total - 1);
  return out;
}

inline Dendrogram ward_cluster(const Matrix& points, const std::vector<std::string>& names) {
  return ward_cluster(distance_matrix(points, names));
}

// The two clusters joined by the final merge, as concept names in leaf index order.
inline std::array<std::vector<std::string>, 2> top_level_split(const Dendrogram& dg) {
  if (dg.leaf_count() < 2 || dg.merges.empty()) throw ValidationError("dendrogram has no merges");
  const auto& root = dg.merges.back();
  std::array<std::vector<std::string>, 2> out;
  for (int side = 0; side < 2; ++side) {
    auto ids = dg.members(side == 0 ? root.a : root.b);
    std::sort(ids.begin(), ids.end());
    for (int id : ids) out[static_cast<std::size_t>(side)].push_back(dg.leaves[static_cast<std::size_t>(id)]);
  }
  // Stable labelling: the cluster holding leaf 0 comes first.
  if (std::find(out[1].begin(), out[1].end(), dg.leaves.front()) != out[1].end()) std::swap(out[0], out[1]);
  return out;
}

inline std::string newick(const Dendrogram& dg) {
  const int k = dg.leaf_count();
  auto height = [&](int id) { return id < k ? 0.0 : dg.merges[static_cast<std::size_t>(id - k)].height; };
  std::function<std::string(int)> node = [&](int id) -> std::string {
    if (id < k) return dg.leaves[static_cast<std::size_t>(id)];
    const auto& m = dg.merges[static_cast<std::size_t>(id - k)];
    return "(" + node(m.a) + ":" + fmt_double(m.height - height(m.a)) + "," + node(m.b) + ":" +
           fmt_double(m.height - height(m.b)) + ")";
  };
  return node(2 * k - 2) + ";";
}

// ---------------------------------------------------------------------------
// correlations

inline double pearson(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) throw ValidationError("correlation inputs differ in length");
  if (a.size() < 2) throw ValidationError("correlation needs at least 2 values");
  Vector ca = a.array() - a.mean();
  Vector cb = b.array() - b.mean();
  double na = ca.norm(), nb = cb.norm();
  if (na == 0.0 || nb == 0.0) throw ValidationError("correlation undefined: zero variance");
  return std::clamp(ca.dot(cb) / (na * nb), -1.0, 1.0);
}

struct CorrelationResult {
  double r = 0.0;
  double p_value = 1.0; // one-sided, fraction of label permutations with r_perm >= r
  int permutations = 0;
  std::uint64_t seed = 0;
};

inline constexpr int kDefaultPermutations = 9999;

// Pearson r between upper triangles, with a Mantel permutation test that shuffles
// concept labels jointly over rows and columns of B.
inline CorrelationResult matrix_correlation(const DistanceMatrix& A, const DistanceMatrix& B,
                                            int permutations = kDefaultPermutations, std::uint64_t seed = 0) {
  if (A.concepts != B.concepts) throw ValidationError("distance matrices cover different concepts or orders");
  if (A.size() < 3) throw ValidationError("matrix correlation needs at least 3 concepts");
  CorrelationResult res;
  res.seed = seed;
  res.permutations = permutations;
  const Vector ua = A.upper_triangle();
  res.r = pearson(ua, B.upper_triangle());
  if (permutations <= 0) return res;

  const auto k = B.size();
  std::vector<Eigen::Index> perm(static_cast<std::size_t>(k));
  std::mt19937_64 rng(seed);
  Vector ub(ua.size());
  int at_least = 0;
  for (int p = 0; p < permutations; ++p) {
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Eigen::Index n = 0;
    for (Eigen::Index i = 0; i < k; ++i)
      for (Eigen::Index j = i + 1; j < k; ++j)
        ub(n++) = B.values(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
    if (pearson(ua, ub) >= res.r - 1e-12) ++at_least;
  }
  res.p_value = (1.0 + at_least) / (1.0 + permutations);
  return res;
}

// k x k Pearson matrix over pooled y_{t,c}.
inline Matrix behavior_correlations(const std::vector<BeliefTrajectory>& trajectories, const ConceptDomain& domain) {
  Matrix Y = stack_values(trajectories);
  if (Y.rows() < 2) throw ValidationError("behavior correlations need at least 2 pooled points");
  if (static_cast<std::size_t>(Y.cols()) != domain.size()) throw ValidationError("trajectories do not match domain");
  const auto k = Y.cols();
  for (Eigen::Index c = 0; c < k; ++c)
    if ((Y.col(c).array() == Y(0, c)).all())
      throw ValidationError("concept '" + domain.concepts[static_cast<std::size_t>(c)] + "' is constant");
  Matrix out = Matrix::Identity(k, k);
  for (Eigen::Index i = 0; i < k; ++i)
    for (Eigen::Index j = i + 1; j < k; ++j) out(i, j) = out(j, i) = pearson(Y.col(i), Y.col(j));
  return out;
}

// In-sample R^2 of an OLS fit of t on the manifold coordinates (with intercept).
inline double position_encoding_check(const Matrix& coords, const Vector& t) {
  if (coords.rows() != t.size()) throw ValidationError("position check: coordinates and labels differ in length");
  if (coords.rows() < 3) throw ValidationError("position check needs at least 3 points");
  Matrix X(coords.rows(), coords.cols() + 1);
  X.col(0).setOnes();
  X.rightCols(coords.cols()) = coords;
  Eigen::CompleteOrthogonalDecomposition<Matrix> cod(X);
  if (cod.rank() < X.cols()) throw ValidationError("position check: degenerate design");
  const double sst = (t.array() - t.mean()).square().sum();
  if (sst == 0.0) throw ValidationError("position check: sentence index is constant");
  Vector beta = cod.solve(t);
  return 1.0 - (t - X * beta).squaredNorm() / sst;
}

// ---------------------------------------------------------------------------
// Procrustes and reference comparison

struct ProcrustesResult {
  double disparity = 0.0; // sum of squared residuals, both configurations at unit Frobenius norm
  double scale = 1.0;
  Matrix rotation;
  Matrix aligned; // points after alignment, in the reference's standardized frame
};

// Optimal similarity alignment of `points` onto `reference`. Reflections are allowed by
// default because PCA axis signs are conventions.
inline ProcrustesResult procrustes(const Matrix& reference, const Matrix& points, bool allow_reflection = true) {
  if (reference.rows() != points.rows()) throw ValidationError("procrustes: configurations differ in point count");
  if (reference.rows() < 2) throw ValidationError("procrustes needs at least 2 points");
  Matrix A = reference, B = points;
  const auto d = std::max(A.cols(), B.cols());
  A.conservativeResize(Eigen::NoChange, d);
  B.conservativeResize(Eigen::NoChange, d);
  if (reference.cols() < d) A.rightCols(d - reference.cols()).setZero();
  if (points.cols() < d) B.rightCols(d - points.cols()).setZero();
  A = A.rowwise() - A.colwise().mean();
  B = B.rowwise() - B.colwise().mean();
  const double na = A.norm(), nb = B.norm();
  if (na == 0.0 || nb == 0.0) throw ValidationError("procrustes: a configuration has no spread");
  A /= na;
  B /= nb;
  Eigen::JacobiSVD<Matrix> svd(B.transpose() * A, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Matrix U = svd.matrixU(), V = svd.matrixV();
  Vector s = svd.singularValues();
  if (!allow_reflection && (U * V.transpose()).determinant() < 0) {
    U.col(d - 1) *= -1.0;
    s(d - 1) *= -1.0;
  }
  ProcrustesResult res;
  res.rotation = U * V.transpose();
  res.scale = s.sum();
  res.aligned = res.scale * B * res.rotation;
  res.disparity = (A - res.aligned).squaredNorm();
  return res;
}

struct ReferenceSpace {
  std::string name;
  std::vector<std::string> concepts;
  Matrix coords; // one row per concept

  std::optional<Eigen::Index> find(const std::string& c) const {
    auto it = std::find(concepts.begin(), concepts.end(), c);
    if (it == concepts.end()) return std::nullopt;
    return static_cast<Eigen::Index>(it - concepts.begin());
  }
};

// {"name": ..., "coordinates": {concept: [x, y, ...]}}
inline ReferenceSpace reference_from_json(const nlohmann::json& j) {
  ReferenceSpace ref;
  ref.name = j.value("name", std::string("reference"));
  if (!j.contains("coordinates") || !j.at("coordinates").is_object())
    throw ValidationError("reference space needs a 'coordinates' object");
  std::vector<std::vector<double>> rows;
  for (const auto& [concept_name, v] : j.at("coordinates").items()) {
    ref.concepts.push_back(concept_name);
    try {
      rows.push_back(v.get<std::vector<double>>());
    } catch (const nlohmann::json::exception&) {
      throw ValidationError("reference coordinates for '" + concept_name + "' must be numbers");
    }
  }
  if (rows.empty()) throw ValidationError("reference space is empty");
  const auto dim = rows.front().size();
  ref.coords.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != dim) throw ValidationError("reference coordinates have inconsistent dimension");
    for (std::size_t j = 0; j < dim; ++j) ref.coords(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  }
  return ref;
}

inline nlohmann::json reference_to_json(const ReferenceSpace& ref) {
  nlohmann::json coords = nlohmann::json::object();
  for (std::size_t i = 0; i < ref.concepts.size(); ++i) {
    std::vector<double> row(ref.coords.row(static_cast<Eigen::Index>(i)).begin(),
                            ref.coords.row(static_cast<Eigen::Index>(i)).end());
    coords[ref.concepts[i]] = row;
  }
  return {{"name", ref.name}, {"coordinates", coords}};
}

struct ReferenceComparison {
  std::vector<std::string> concepts;
  double procrustes_residual = 0.0;
  CorrelationResult correlation;
};

inline ReferenceComparison compare_to_reference(const CentroidSet& c, const ReferenceSpace& ref,
                                                int permutations = kDefaultPermutations, std::uint64_t seed = 0) {
  if (ref.coords.cols() > c.points.cols())
    throw ValidationError("reference dimension exceeds manifold dimension");
  std::vector<Eigen::Index> ci, ri;
  ReferenceComparison out;
  for (std::size_t i = 0; i < c.concepts.size(); ++i)
    if (auto r = ref.find(c.concepts[i])) {
      ci.push_back(static_cast<Eigen::Index>(i));
      ri.push_back(*r);
      out.concepts.push_back(c.concepts[i]);
    }
  if (out.concepts.size() < 3)
    throw ValidationError("reference comparison needs at least 3 shared concepts, found " +
                          std::to_string(out.concepts.size()));
  Matrix cp = c.points(ci, Eigen::all);
  Matrix rp = ref.coords(ri, Eigen::all);
  out.procrustes_residual = procrustes(rp, cp).disparity;
  out.correlation = matrix_correlation(distance_matrix(cp, out.concepts), distance_matrix(rp, out.concepts),
                                       permutations, seed);
  return out;
}

// ---------------------------------------------------------------------------
// exports

inline std::string matrix_csv(const std::vector<std::string>& names, const Matrix& m) {
  std::string out = "concept";
  for (const auto& n : names) out += "," + csv_escape(n);
  out += "\n";
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    out += csv_escape(names[static_cast<std::size_t>(i)]);
    for (Eigen::Index j = 0; j < m.cols(); ++j) out += "," + fmt_double(m(i, j));
    out += "\n";
  }
  return out;
}

inline nlohmann::json matrix_json(const Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    std::vector<double> row(m.row(i).begin(), m.row(i).end());
    rows.push_back(row);
  }
  return rows;
}

inline Matrix matrix_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.empty()) throw ValidationError("expected a non-empty matrix");
  Matrix m(static_cast<Eigen::Index>(j.size()), static_cast<Eigen::Index>(j.at(0).size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (j[i].size() != static_cast<std::size_t>(m.cols())) throw ValidationError("ragged matrix");
    for (std::size_t k = 0; k < j[i].size(); ++k)
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = j[i][k].get<double>();
  }
  return m;
}

inline nlohmann::json to_json(const DistanceMatrix& dm) {
  return {{"concepts", dm.concepts}, {"distances", matrix_json(dm.values)}};
}

inline DistanceMatrix distance_matrix_from_json(const nlohmann::json& j) {
  DistanceMatrix dm;
  dm.concepts = io::required<std::vector<std::string>>(j, "concepts", "distance matrix");
  dm.values = matrix_from_json(j.at("distances"));
  dm.validate();
  return dm;
}

inline nlohmann::json to_json(const Dendrogram& dg) {
  nlohmann::json merges = nlohmann::json::array();
  for (const auto& m : dg.merges) merges.push_back({{"a", m.a}, {"b", m.b}, {"height", m.height}, {"size", m.size}});
  auto split = top_level_split(dg);
  return {{"leaves", dg.leaves},
          {"merges", merges},
          {"leaf_order", dg.leaf_order},
          {"newick", newick(dg)},
          {"top_level_split", {split[0], split[1]}}};
}

inline Dendrogram dendrogram_from_json(const nlohmann::json& j) {
  Dendrogram dg;
  dg.leaves = io::required<std::vector<std::string>>(j, "leaves", "dendrogram");
  for (const auto& m : j.at("merges"))
    dg.merges.push_back({m.at("a").get<int>(), m.at("b").get<int>(), m.at("height").get<double>(), m.at("size").get<int>()});
  dg.leaf_order = io::required<std::vector<int>>(j, "leaf_order", "dendrogram");
  if (dg.merges.size() + 1 != dg.leaves.size()) throw ValidationError("dendrogram needs k-1 merges");
  return dg;
}

inline nlohmann::json to_json(const CorrelationResult& c) {
  return {{"r", c.r}, {"p_value", c.p_value}, {"permutations", c.permutations}, {"seed", c.seed}};
}

inline nlohmann::json to_json(const CentroidSet& c) {
  return {{"concepts", c.concepts}, {"centroids", matrix_json(c.points)}, {"counts", c.counts}};
}

} // namespace cbs::geometry
