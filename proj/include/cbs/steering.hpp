#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cbs/core/dataset_io.hpp"
#include "cbs/core/format.hpp"
#include "cbs/core/types.hpp"
#include "cbs/geometry.hpp"
#include "cbs/manifold.hpp"
#include "cbs/probes.hpp"

// Steering directions, additive interventions, and entanglement measurements.
namespace cbs::steering {

enum class Method { probe_weights, diff_in_means };

inline const char* to_string(Method m) { return m == Method::probe_weights ? "probe-weights" : "diff-in-means"; }

inline Method parse_method(const std::string& s) {
  if (s == "probe-weights") return Method::probe_weights;
  if (s == "diff-in-means") return Method::diff_in_means;
  throw ValidationError("unknown steering method '" + s + "' (expected probe-weights or diff-in-means)");
}

inline constexpr double kUnitTolerance = 1e-5;

struct SteeringVector {
  std::string concept_name;
  Method method = Method::probe_weights;
  std::vector<int> layers;        // contiguous, increasing
  std::vector<Vector> directions; // unit norm, one per layer
  std::vector<double> norms;      // norm of each direction before normalization

  const Vector& at(int layer) const {
    for (std::size_t i = 0; i < layers.size(); ++i)
      if (layers[i] == layer) return directions[i];
    throw ValidationError("steering vector for '" + concept_name + "' has no layer " + std::to_string(layer));
  }

  void validate() const {
    if (layers.empty()) throw ValidationError("steering vector has an empty layer span");
    if (directions.size() != layers.size() || norms.size() != layers.size())
      throw ValidationError("steering vector has mismatched layers and directions");
    for (std::size_t i = 1; i < layers.size(); ++i)
      if (layers[i] != layers[i - 1] + 1) throw ValidationError("steering layer span must be contiguous");
    for (const auto& d : directions) {
      if (!d.allFinite()) throw ValidationError("steering direction is not finite");
      if (std::abs(d.norm() - 1.0) > kUnitTolerance) throw ValidationError("steering direction is not unit norm");
      if (d.size() != directions.front().size()) throw ValidationError("steering directions differ in dimension");
    }
  }
};

inline Vector unit_direction(const Vector& v, const std::string& what) {
  if (!v.allFinite()) throw ValidationError(what + " is not finite");
  const double n = v.norm();
  if (n == 0.0) throw ValidationError(what + " is the zero vector");
  return v / n;
}

// theta / |theta| in the raw activation basis.
inline Vector vector_from_probe(const probes::LinearProbe& p) {
  return unit_direction(p.raw_weights(), "zero-weight probe: direction");
}

inline Vector vector_diff_in_means(const Matrix& pos, const Matrix& neg) {
  if (pos.rows() == 0 || neg.rows() == 0) throw ValidationError("diff-in-means needs non-empty positive and negative sets");
  if (pos.cols() != neg.cols()) throw ValidationError("diff-in-means sets differ in dimension");
  Vector diff = pos.colwise().mean().transpose() - neg.colwise().mean().transpose();
  return unit_direction(diff, "diff-in-means: equal means, direction");
}

// Probe directions for `concept` over up to `span` contiguous probe layers starting at `start_layer`.
inline SteeringVector probe_steering_vector(const probes::ProbeReport& report, const std::string& concept_name,
                                            int start_layer, int span = 7) {
  if (span < 1) throw ValidationError("steering span must be >= 1");
  SteeringVector sv;
  sv.concept_name = concept_name;
  sv.method = Method::probe_weights;
  auto it = std::find(report.layers.begin(), report.layers.end(), start_layer);
  if (it == report.layers.end()) throw ValidationError("no probes for steering start layer " + std::to_string(start_layer));
  for (; it != report.layers.end() && static_cast<int>(sv.layers.size()) < span; ++it) {
    if (!sv.layers.empty() && *it != sv.layers.back() + 1) break;
    const auto& probe = report.at(*it, concept_name).probe;
    sv.layers.push_back(*it);
    sv.norms.push_back(probe.raw_weights().norm());
    sv.directions.push_back(vector_from_probe(probe));
  }
  sv.validate();
  return sv;
}

// Contrast of the max- and min-activating sentences for `concept` at one layer.
inline SteeringVector dim_steering_vector(const ActivationDataset& acts, const std::vector<BeliefTrajectory>& trajectories,
                                          const ConceptDomain& domain, const std::string& concept_name,
                                          int n_total = manifold::kDefaultTotal,
                                          int per_story_cap = manifold::kDefaultPerStoryCap) {
  auto pos = manifold::select_max_activating(trajectories, domain, concept_name, n_total, per_story_cap);
  auto neg = manifold::select_min_activating(trajectories, domain, concept_name,
                                             static_cast<int>(pos.entries.size()), per_story_cap);
  auto keys = [](const manifold::MaxActivatingSet& s) {
    std::vector<RecordKey> out;
    for (const auto& e : s.entries) out.push_back(e.key);
    return out;
  };
  Matrix zp = gather_rows(acts, keys(pos)), zn = gather_rows(acts, keys(neg));
  SteeringVector sv;
  sv.concept_name = concept_name;
  sv.method = Method::diff_in_means;
  sv.layers = {acts.layer};
  sv.norms = {(zp.colwise().mean() - zn.colwise().mean()).norm()};
  sv.directions = {vector_diff_in_means(zp, zn)};
  sv.validate();
  return sv;
}

// ---------------------------------------------------------------------------
// interventions

struct SteeringConfig {
  std::string concept_name;
  double alpha = 0.0;
  std::vector<int> layers;

  void validate(const std::vector<int>& available) const {
    if (!std::isfinite(alpha)) throw ValidationError("steering magnitude must be finite");
    if (layers.empty()) throw ValidationError("steering span is empty");
    for (int l : layers)
      if (std::find(available.begin(), available.end(), l) == available.end())
        throw ValidationError("steering layer " + std::to_string(l) + " is not available");
  }
};

inline Vector apply_steering(const Vector& z, const Vector& v, double alpha) {
  if (z.size() != v.size())
    throw ValidationError("steering dimension mismatch: z has " + std::to_string(z.size()) + ", v has " +
                          std::to_string(v.size()));
  if (!std::isfinite(alpha)) throw ValidationError("steering magnitude must be finite");
  if (alpha == 0.0) return z;
  return z + alpha * v;
}

// Row-wise z + alpha v on a stored layer.
inline ActivationDataset apply_steering(const ActivationDataset& acts, const Vector& v, double alpha) {
  if (acts.rows.cols() != v.size())
    throw ValidationError("steering dimension mismatch: layer " + std::to_string(acts.layer) + " has " +
                          std::to_string(acts.rows.cols()) + " features, v has " + std::to_string(v.size()));
  if (!std::isfinite(alpha)) throw ValidationError("steering magnitude must be finite");
  ActivationDataset out = acts;
  if (alpha == 0.0) return out;
  const Eigen::RowVectorXd offset = alpha * v.transpose();
  for (Eigen::Index i = 0; i < out.rows.rows(); ++i)
    out.rows.row(i) = (acts.rows.row(i).cast<double>() + offset).cast<float>();
  return out;
}

// Additive offset per layer.
struct Intervention {
  std::map<int, Vector> offsets;
};

inline Intervention make_intervention(const SteeringVector& sv, double alpha) {
  if (!std::isfinite(alpha)) throw ValidationError("steering magnitude must be finite");
  Intervention iv;
  for (std::size_t i = 0; i < sv.layers.size(); ++i) iv.offsets[sv.layers[i]] = alpha * sv.directions[i];
  return iv;
}

// Maps an intervention to beliefs (N x k) over a fixed record set; the empty
// intervention yields the unsteered beliefs.
using EffectOracle = std::function<Matrix(const Intervention&)>;

inline Vector mean_difference(const Matrix& base, const Matrix& steered) {
  if (base.rows() != steered.rows() || base.cols() != steered.cols())
    throw ValidationError("base and steered beliefs cover different records");
  if (base.rows() == 0) throw ValidationError("no records to measure steering effect on");
  return (steered - base).colwise().mean().transpose();
}

// Mean change in y_{t,c'} for every queried concept c'.
inline Vector steering_effect(const EffectOracle& oracle, const Intervention& iv) {
  return mean_difference(oracle(Intervention{}), oracle(iv));
}

// Real-model route: base and steered behavior datasets over the same records.
inline Vector steering_effect(const std::vector<BeliefTrajectory>& base, const std::vector<BeliefTrajectory>& steered) {
  if (base.size() != steered.size()) throw ValidationError("mismatched record sets: story counts differ");
  for (std::size_t i = 0; i < base.size(); ++i)
    if (base[i].story_id != steered[i].story_id || base[i].length() != steered[i].length() ||
        base[i].concepts() != steered[i].concepts())
      throw ValidationError("mismatched record sets at story '" + base[i].story_id + "'");
  return mean_difference(stack_values(base), stack_values(steered));
}

struct EntanglementMatrix {
  std::vector<std::string> concepts;
  Matrix values;              // rows: steered concept, cols: queried concept
  Eigen::MatrixXi counts;     // records averaged per cell

  Eigen::Index size() const { return values.rows(); }
};

inline EntanglementMatrix entanglement_matrix(const std::vector<BeliefTrajectory>& base,
                                              const std::map<std::string, std::vector<BeliefTrajectory>>& steered,
                                              const ConceptDomain& domain) {
  const auto k = static_cast<Eigen::Index>(domain.size());
  EntanglementMatrix E{domain.concepts, Matrix::Zero(k, k), Eigen::MatrixXi::Zero(k, k)};
  Eigen::Index n = 0;
  for (const auto& tr : base) n += tr.length();
  for (std::size_t c = 0; c < domain.size(); ++c) {
    auto it = steered.find(domain.concepts[c]);
    if (it == steered.end()) throw ValidationError("missing steered dataset for target '" + domain.concepts[c] + "'");
    E.values.row(static_cast<Eigen::Index>(c)) = steering_effect(base, it->second).transpose();
    E.counts.row(static_cast<Eigen::Index>(c)).setConstant(static_cast<int>(n));
  }
  return E;
}

inline EntanglementMatrix entanglement_matrix(const EffectOracle& oracle, const std::map<std::string, Intervention>& targets,
                                              const ConceptDomain& domain) {
  const auto k = static_cast<Eigen::Index>(domain.size());
  EntanglementMatrix E{domain.concepts, Matrix::Zero(k, k), Eigen::MatrixXi::Zero(k, k)};
  const Matrix base = oracle(Intervention{});
  for (std::size_t c = 0; c < domain.size(); ++c) {
    auto it = targets.find(domain.concepts[c]);
    if (it == targets.end()) throw ValidationError("missing intervention for target '" + domain.concepts[c] + "'");
    E.values.row(static_cast<Eigen::Index>(c)) = mean_difference(base, oracle(it->second)).transpose();
    E.counts.row(static_cast<Eigen::Index>(c)).setConstant(static_cast<int>(base.rows()));
  }
  return E;
}

// ---------------------------------------------------------------------------
// geometry-based prediction

struct LinearFit {
  double intercept = 0.0;
  double slope = 0.0;
};

inline LinearFit fit_line(const Vector& x, const Vector& y) {
  const double mx = x.mean(), my = y.mean();
  const double sxx = (x.array() - mx).square().sum();
  if (sxx == 0.0) throw ValidationError("degenerate variance in distances");
  const double slope = ((x.array() - mx) * (y.array() - my)).sum() / sxx;
  return {my - slope * mx, slope};
}

struct EntanglementPrediction {
  double r_distance = 0.0;          // corr(E[c][c'], d(c, c'))
  double r_negative_distance = 0.0; // corr(E[c][c'], -d(c, c')); positive when closer concepts co-move
  LinearFit fit;                    // E ~ intercept + slope * d over all off-diagonal cells
  Matrix loo_predictions;           // row c predicted from a fit on the other rows; NaN diagonal
  double loo_rmse = 0.0;
  double loo_r = 0.0;
  int pairs = 0;
};

inline EntanglementPrediction predict_entanglement(const EntanglementMatrix& E, const geometry::DistanceMatrix& D) {
  if (E.concepts != D.concepts) throw ValidationError("entanglement and distance matrices cover different concepts");
  const auto k = E.size();
  if (k < 3) throw ValidationError("entanglement prediction needs at least 3 concepts");
  std::vector<double> xs, ys;
  std::vector<Eigen::Index> row_of;
  for (Eigen::Index i = 0; i < k; ++i)
    for (Eigen::Index j = 0; j < k; ++j)
      if (i != j) {
        xs.push_back(D.values(i, j));
        ys.push_back(E.values(i, j));
        row_of.push_back(i);
      }
  const Vector x = Eigen::Map<Vector>(xs.data(), static_cast<Eigen::Index>(xs.size()));
  const Vector y = Eigen::Map<Vector>(ys.data(), static_cast<Eigen::Index>(ys.size()));
  if ((y.array() == y(0)).all()) throw ValidationError("degenerate variance: off-diagonal entanglement is constant");

  EntanglementPrediction out;
  out.pairs = static_cast<int>(x.size());
  out.r_distance = geometry::pearson(y, x);
  out.r_negative_distance = -out.r_distance;
  out.fit = fit_line(x, y);
  out.loo_predictions = Matrix::Constant(k, k, std::numeric_limits<double>::quiet_NaN());
  std::vector<double> pred(xs.size());
  for (Eigen::Index held = 0; held < k; ++held) {
    std::vector<double> tx, ty;
    for (std::size_t n = 0; n < xs.size(); ++n)
      if (row_of[n] != held) {
        tx.push_back(xs[n]);
        ty.push_back(ys[n]);
      }
    LinearFit f = fit_line(Eigen::Map<Vector>(tx.data(), static_cast<Eigen::Index>(tx.size())),
                           Eigen::Map<Vector>(ty.data(), static_cast<Eigen::Index>(ty.size())));
    for (std::size_t n = 0; n < xs.size(); ++n)
      if (row_of[n] == held) pred[n] = f.intercept + f.slope * xs[n];
  }
  std::size_t n = 0;
  for (Eigen::Index i = 0; i < k; ++i)
    for (Eigen::Index j = 0; j < k; ++j)
      if (i != j) out.loo_predictions(i, j) = pred[n++];
  const Vector p = Eigen::Map<Vector>(pred.data(), static_cast<Eigen::Index>(pred.size()));
  out.loo_rmse = std::sqrt((p - y).squaredNorm() / static_cast<double>(y.size()));
  const bool flat = (p.array() == p(0)).all();
  out.loo_r = flat ? 0.0 : geometry::pearson(p, y);
  return out;
}

struct GroupMean {
  double mean = 0.0;
  int count = 0;
};

struct ClusterEffects {
  GroupMean on_target;
  std::optional<GroupMean> within_cluster; // empty when both clusters are singletons
  GroupMean cross_cluster;
  double epsilon = 0.0;
  bool cross_indistinguishable_from_zero = false;
};

inline ClusterEffects cluster_effect_analysis(const EntanglementMatrix& E,
                                              const std::array<std::vector<std::string>, 2>& split,
                                              double epsilon = 0.02) {
  if (split[0].empty() || split[1].empty()) throw ValidationError("cluster split has an empty cluster");
  std::map<std::string, int> cluster;
  for (int s = 0; s < 2; ++s)
    for (const auto& c : split[static_cast<std::size_t>(s)]) {
      if (!cluster.emplace(c, s).second) throw ValidationError("concept '" + c + "' appears in both clusters");
    }
  for (const auto& c : E.concepts)
    if (!cluster.count(c)) throw ValidationError("cluster split does not cover concept '" + c + "'");
  if (cluster.size() != E.concepts.size()) throw ValidationError("cluster split names concepts not in the matrix");

  double on = 0, within = 0, cross = 0;
  int n_on = 0, n_within = 0, n_cross = 0;
  const auto k = E.size();
  for (Eigen::Index i = 0; i < k; ++i)
    for (Eigen::Index j = 0; j < k; ++j) {
      const double v = E.values(i, j);
      if (i == j) {
        on += v;
        ++n_on;
      } else if (cluster[E.concepts[static_cast<std::size_t>(i)]] == cluster[E.concepts[static_cast<std::size_t>(j)]]) {
        within += v;
        ++n_within;
      } else {
        cross += v;
        ++n_cross;
      }
    }
  ClusterEffects out;
  out.epsilon = epsilon;
  out.on_target = {on / n_on, n_on};
  if (n_within > 0) out.within_cluster = GroupMean{within / n_within, n_within};
  out.cross_cluster = {cross / n_cross, n_cross};
  out.cross_indistinguishable_from_zero = std::abs(out.cross_cluster.mean) < epsilon;
  return out;
}

// ---------------------------------------------------------------------------
// sweeps and persistence

struct SweepPoint {
  double alpha = 0.0;
  Vector effect; // per queried concept
};

inline std::vector<SweepPoint> magnitude_sweep(const EffectOracle& oracle, const SteeringVector& sv,
                                               const std::vector<double>& grid) {
  if (grid.empty()) throw ValidationError("magnitude grid is empty");
  for (double a : grid)
    if (!std::isfinite(a)) throw ValidationError("magnitude grid contains a non-finite value");
  const Matrix base = oracle(Intervention{});
  std::vector<SweepPoint> out;
  for (double a : grid) out.push_back({a, mean_difference(base, oracle(make_intervention(sv, a)))});
  return out;
}

struct PersistenceCurve {
  std::string concept_name;
  std::vector<int> layers;
  std::vector<double> base;    // mean calibrated probe prediction per layer
  std::vector<double> steered;
  std::vector<double> delta;
  std::vector<double> relative; // delta relative to the delta at the first injected layer
  int reference_layer = 0;
};

// Per-layer mean calibrated prediction of `concept` on base and steered rows.
inline PersistenceCurve layer_persistence(const std::map<int, probes::ProbeEntry>& probes_by_layer,
                                          const std::vector<ActivationDataset>& base,
                                          const std::vector<ActivationDataset>& steered, const std::string& concept_name,
                                          int reference_layer) {
  if (base.size() != steered.size()) throw ValidationError("base and steered runs record different layers");
  PersistenceCurve out;
  out.concept_name = concept_name;
  out.reference_layer = reference_layer;
  std::optional<double> ref_delta;
  for (std::size_t i = 0; i < base.size(); ++i) {
    const int l = base[i].layer;
    if (steered[i].layer != l) throw ValidationError("base and steered runs record different layers");
    if (base[i].index != steered[i].index) throw ValidationError("mismatched record sets at layer " + std::to_string(l));
    auto it = probes_by_layer.find(l);
    if (it == probes_by_layer.end()) throw ValidationError("missing probe for layer " + std::to_string(l));
    const auto& e = it->second;
    const double mb = probes::predict(e.probe, e.calibration, Matrix(base[i].rows.cast<double>())).mean();
    const double ms = probes::predict(e.probe, e.calibration, Matrix(steered[i].rows.cast<double>())).mean();
    out.layers.push_back(l);
    out.base.push_back(mb);
    out.steered.push_back(ms);
    out.delta.push_back(ms - mb);
    if (l == reference_layer) ref_delta = ms - mb;
  }
  if (!ref_delta) throw ValidationError("reference layer " + std::to_string(reference_layer) + " was not recorded");
  for (double d : out.delta) out.relative.push_back(*ref_delta == 0.0 ? 0.0 : d / *ref_delta);
  return out;
}

// ---------------------------------------------------------------------------
// files

inline std::string bundle_basename(const SteeringVector& sv) { return sv.concept_name + "_" + to_string(sv.method); }

inline void write_steering_bundle(const std::filesystem::path& dir, const SteeringVector& sv) {
  sv.validate();
  std::filesystem::create_directories(dir);
  const auto base = bundle_basename(sv);
  nlohmann::json files = nlohmann::json::array();
  for (std::size_t i = 0; i < sv.layers.size(); ++i) {
    const std::string name = base + "_layer" + std::to_string(sv.layers[i]) + ".f32";
    const Eigen::VectorXf f = sv.directions[i].cast<float>();
    io::write_file(dir / name, io::encode_f32(f.data(), static_cast<std::size_t>(f.size())));
    files.push_back(name);
  }
  nlohmann::json j = {{"concept", sv.concept_name},
                      {"method", to_string(sv.method)},
                      {"layers", sv.layers},
                      {"hidden_dim", sv.directions.front().size()},
                      {"norms", sv.norms},
                      {"direction_files", files}};
  io::write_file(dir / (base + ".json"), j.dump(2) + "\n");
}

inline SteeringVector read_steering_bundle(const std::filesystem::path& json_path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_file(json_path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(json_path.string() + ": " + e.what());
  }
  const auto where = json_path.filename().string();
  SteeringVector sv;
  sv.concept_name = io::required<std::string>(j, "concept", where);
  sv.method = parse_method(io::required<std::string>(j, "method", where));
  sv.layers = io::required<std::vector<int>>(j, "layers", where);
  sv.norms = io::required<std::vector<double>>(j, "norms", where);
  const auto q = io::required<Eigen::Index>(j, "hidden_dim", where);
  const auto files = io::required<std::vector<std::string>>(j, "direction_files", where);
  if (files.size() != sv.layers.size()) throw ValidationError(where + ": one direction file per layer expected");
  for (const auto& f : files) {
    auto v = io::decode_f32(io::read_file(json_path.parent_path() / f));
    if (static_cast<Eigen::Index>(v.size()) != q)
      throw ValidationError(where + ": " + f + " holds " + std::to_string(v.size()) + " floats, expected " +
                            std::to_string(q));
    sv.directions.push_back(Eigen::Map<Eigen::VectorXf>(v.data(), q).cast<double>());
  }
  sv.validate();
  return sv;
}

inline nlohmann::json to_json(const EntanglementMatrix& E) {
  nlohmann::json counts = nlohmann::json::array();
  for (Eigen::Index i = 0; i < E.counts.rows(); ++i) {
    std::vector<int> row(E.counts.row(i).begin(), E.counts.row(i).end());
    counts.push_back(row);
  }
  return {{"concepts", E.concepts}, {"rows", "steered"}, {"cols", "queried"}, {"effects", geometry::matrix_json(E.values)},
          {"counts", counts}};
}

inline nlohmann::json to_json(const EntanglementPrediction& p) {
  nlohmann::json loo = nlohmann::json::array();
  for (Eigen::Index i = 0; i < p.loo_predictions.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index j = 0; j < p.loo_predictions.cols(); ++j)
      row.push_back(i == j ? nlohmann::json(nullptr) : nlohmann::json(p.loo_predictions(i, j)));
    loo.push_back(row);
  }
  return {{"r_distance", p.r_distance},
          {"r_negative_distance", p.r_negative_distance},
          {"sign_convention", "r_negative_distance > 0 means closer concepts receive larger co-effects"},
          {"fit", {{"intercept", p.fit.intercept}, {"slope", p.fit.slope}}},
          {"loo_predictions", loo},
          {"loo_rmse", p.loo_rmse},
          {"loo_r", p.loo_r},
          {"pairs", p.pairs}};
}

inline nlohmann::json to_json(const ClusterEffects& c) {
  auto g = [](const GroupMean& m) { return nlohmann::json{{"mean", m.mean}, {"count", m.count}}; };
  return {{"on_target", g(c.on_target)},
          {"within_cluster", c.within_cluster ? g(*c.within_cluster) : nlohmann::json(nullptr)},
          {"cross_cluster", g(c.cross_cluster)},
          {"epsilon", c.epsilon},
          {"cross_indistinguishable_from_zero", c.cross_indistinguishable_from_zero}};
}

inline std::string sweep_csv(const std::vector<SweepPoint>& sweep, const std::vector<std::string>& concepts) {
  std::string out = "alpha";
  for (const auto& c : concepts) out += "," + csv_escape(c);
  out += "\n";
  for (const auto& p : sweep) {
    out += fmt_double(p.alpha);
    for (Eigen::Index i = 0; i < p.effect.size(); ++i) out += "," + fmt_double(p.effect(i));
    out += "\n";
  }
  return out;
}

inline nlohmann::json to_json(const PersistenceCurve& c) {
  return {{"concept", c.concept_name}, {"layers", c.layers},     {"base", c.base},
          {"steered", c.steered}, {"delta", c.delta},       {"relative", c.relative},
          {"reference_layer", c.reference_layer}};
}

} // namespace cbs::steering
