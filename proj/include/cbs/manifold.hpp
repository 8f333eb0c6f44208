#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cbs/core/dataset_io.hpp"
#include "cbs/core/format.hpp"
#include "cbs/core/types.hpp"

// Max-activating selection, PCA manifolds, and projection of trajectories.
namespace cbs::manifold {

struct Selection {
  RecordKey key;
  double score = 0.0;
  friend bool operator==(const Selection&, const Selection&) = default;
};

struct MaxActivatingSet {
  std::string concept_name;
  std::vector<Selection> entries; // by descending score (ascending for lowest-activating sets)
};

inline constexpr int kDefaultTotal = 1000;
inline constexpr int kDefaultPerStoryCap = 3;

namespace detail {
inline MaxActivatingSet select_extreme(const std::vector<BeliefTrajectory>& trajectories, const ConceptDomain& domain,
                                       const std::string& concept_name, int n_total, int per_story_cap, bool highest) {
  if (n_total < 1) throw ValidationError("n_total must be >= 1");
  if (per_story_cap < 1) throw ValidationError("per_story_cap must be >= 1");
  const auto c = static_cast<Eigen::Index>(domain.index_of(concept_name));
  std::vector<Selection> all;
  for (const auto& tr : trajectories) {
    if (tr.domain != domain.name) throw ValidationError("trajectory for '" + tr.story_id + "' is not in domain " + domain.name);
    for (Eigen::Index t = 0; t < tr.values.rows(); ++t)
      all.push_back({{tr.story_id, static_cast<int>(t) + 1}, tr.values(t, c)});
  }
  std::sort(all.begin(), all.end(), [highest](const Selection& a, const Selection& b) {
    if (a.score != b.score) return highest ? a.score > b.score : a.score < b.score;
    return a.key < b.key;
  });
  MaxActivatingSet out{concept_name, {}};
  std::map<std::string, int> taken;
  for (const auto& s : all) {
    if (static_cast<int>(out.entries.size()) >= n_total) break;
    int& n = taken[s.key.story_id];
    if (n >= per_story_cap) continue;
    ++n;
    out.entries.push_back(s);
  }
  return out;
}
} // namespace detail

// Top sentences by y_{t,c}, at most per_story_cap per story; ties by (story_id, t).
inline MaxActivatingSet select_max_activating(const std::vector<BeliefTrajectory>& trajectories,
                                              const ConceptDomain& domain, const std::string& concept_name,
                                              int n_total = kDefaultTotal, int per_story_cap = kDefaultPerStoryCap) {
  return detail::select_extreme(trajectories, domain, concept_name, n_total, per_story_cap, true);
}

// Mirror of select_max_activating: the lowest-scoring sentences for a concept.
inline MaxActivatingSet select_min_activating(const std::vector<BeliefTrajectory>& trajectories,
                                              const ConceptDomain& domain, const std::string& concept_name,
                                              int n_total = kDefaultTotal, int per_story_cap = kDefaultPerStoryCap) {
  return detail::select_extreme(trajectories, domain, concept_name, n_total, per_story_cap, false);
}

// ---------------------------------------------------------------------------
// PCA

struct Pca {
  Vector mean;                     // p
  Matrix axes;                     // d x p, orthonormal rows
  Vector explained_variance;       // d, non-increasing
  Vector explained_variance_ratio; // d
  std::vector<std::string> warnings;

  Eigen::Index input_dim() const { return axes.cols(); }
  Eigen::Index dims() const { return axes.rows(); }
};

// Principal axes of the centered data by SVD. Each axis is signed so that its
// largest-magnitude loading is positive.
inline Pca fit_pca(const Matrix& X, int d) {
  const auto m = X.rows(), p = X.cols();
  if (d < 1) throw ValidationError("PCA target dimension must be >= 1");
  if (d >= p) throw ValidationError("PCA target dimension " + std::to_string(d) + " must be below input dimension " +
                                    std::to_string(p));
  if (m < d + 1) throw ValidationError("PCA needs at least d+1 = " + std::to_string(d + 1) + " rows, got " +
                                       std::to_string(m));
  if (!X.allFinite()) throw ValidationError("PCA input contains non-finite values");

  Pca pca;
  pca.mean = X.colwise().mean().transpose();
  Matrix centered = X.rowwise() - pca.mean.transpose();
  Eigen::JacobiSVD<Matrix> svd(centered, Eigen::ComputeThinV);
  const Vector& sv = svd.singularValues();
  const double denom = static_cast<double>(m - 1);
  const double total = centered.squaredNorm() / denom;
  pca.axes = svd.matrixV().leftCols(d).transpose();
  pca.explained_variance.resize(d);
  pca.explained_variance_ratio.resize(d);
  for (int i = 0; i < d; ++i) {
    Eigen::Index arg;
    pca.axes.row(i).cwiseAbs().maxCoeff(&arg);
    if (pca.axes(i, arg) < 0) pca.axes.row(i) *= -1.0;
    double var = i < sv.size() ? sv(i) * sv(i) / denom : 0.0;
    pca.explained_variance(i) = var;
    pca.explained_variance_ratio(i) = total > 0 ? var / total : 0.0;
    if (total <= 0 || var <= 1e-12 * total)
      pca.warnings.push_back("component " + std::to_string(i) + " has (near) zero variance: input is rank deficient");
  }
  return pca;
}

inline Matrix project(const Pca& pca, const Matrix& X) {
  if (X.cols() != pca.input_dim())
    throw ValidationError("projection expects " + std::to_string(pca.input_dim()) + " features, got " +
                          std::to_string(X.cols()));
  return (X.rowwise() - pca.mean.transpose()) * pca.axes.transpose();
}

// ---------------------------------------------------------------------------
// manifolds over behavior or activations

enum class Source { behavior, activations };

inline const char* to_string(Source s) { return s == Source::behavior ? "behavior" : "activations"; }

struct Manifold {
  Source source = Source::behavior;
  int layer = -1; // activations only
  std::string domain;
  std::string kind = "pca";
  Pca pca;
  // Training points in selection order, with the concept each was selected for.
  std::vector<RecordKey> training_keys;
  std::vector<std::string> training_labels;
  Matrix training_embedding;

  int dims() const { return static_cast<int>(pca.dims()); }
};

struct EmbeddedTrajectory {
  std::string story_id;
  Matrix coords; // T x d
};

inline void collect_selection(const std::vector<MaxActivatingSet>& sets, std::vector<RecordKey>& keys,
                              std::vector<std::string>& labels) {
  for (const auto& s : sets)
    for (const auto& e : s.entries) {
      keys.push_back(e.key);
      labels.push_back(s.concept_name);
    }
}

inline Matrix behavior_rows(const std::vector<BeliefTrajectory>& trajectories, const std::vector<RecordKey>& keys) {
  std::map<std::string, const BeliefTrajectory*> by_story;
  for (const auto& tr : trajectories) by_story[tr.story_id] = &tr;
  if (trajectories.empty()) throw ValidationError("no trajectories");
  Matrix out(static_cast<Eigen::Index>(keys.size()), trajectories.front().values.cols());
  for (std::size_t i = 0; i < keys.size(); ++i) {
    auto it = by_story.find(keys[i].story_id);
    if (it == by_story.end() || keys[i].t < 1 || keys[i].t > it->second->length())
      throw ValidationError("no behavior row for " + to_string(keys[i]));
    out.row(static_cast<Eigen::Index>(i)) = it->second->values.row(keys[i].t - 1);
  }
  return out;
}

// Fits M_y on the behavior rows of the selected sentences.
inline Manifold fit_behavior_manifold(const std::vector<BeliefTrajectory>& trajectories, const std::string& domain,
                                      const std::vector<MaxActivatingSet>& sets, int d = 2) {
  Manifold m;
  m.source = Source::behavior;
  m.domain = domain;
  collect_selection(sets, m.training_keys, m.training_labels);
  Matrix X = behavior_rows(trajectories, m.training_keys);
  m.pca = fit_pca(X, d);
  m.training_embedding = project(m.pca, X);
  return m;
}

// Fits M_z on the layer activations of the selected sentences.
inline Manifold fit_activation_manifold(const ActivationDataset& acts, const std::string& domain,
                                        const std::vector<MaxActivatingSet>& sets, int d = 2) {
  Manifold m;
  m.source = Source::activations;
  m.layer = acts.layer;
  m.domain = domain;
  collect_selection(sets, m.training_keys, m.training_labels);
  Matrix X = gather_rows(acts, m.training_keys);
  m.pca = fit_pca(X, d);
  m.training_embedding = project(m.pca, X);
  return m;
}

inline EmbeddedTrajectory embed_trajectory(const Manifold& m, const BeliefTrajectory& tr) {
  if (m.source != Source::behavior) throw ValidationError("activation manifold cannot embed a behavior trajectory");
  if (tr.domain != m.domain) throw ValidationError("trajectory domain '" + tr.domain + "' does not match manifold domain");
  return {tr.story_id, project(m.pca, tr.values)};
}

// Rows of one story from an activation tensor, ordered by t.
inline EmbeddedTrajectory embed_trajectory(const Manifold& m, const ActivationDataset& acts, const std::string& story_id) {
  if (m.source != Source::activations) throw ValidationError("behavior manifold cannot embed activations");
  if (acts.layer != m.layer)
    throw ValidationError("manifold was fitted on layer " + std::to_string(m.layer) + ", got layer " +
                          std::to_string(acts.layer));
  std::vector<RecordKey> keys;
  for (const auto& k : acts.index)
    if (k.story_id == story_id) keys.push_back(k);
  if (keys.empty()) throw ValidationError("no activation rows for story '" + story_id + "'");
  std::sort(keys.begin(), keys.end());
  return {story_id, project(m.pca, gather_rows(acts, keys))};
}

// ---------------------------------------------------------------------------
// files: JSON header + float32 axes (d x p, row-major), embedded points as CSV

inline void write_manifold(const std::filesystem::path& dir, const std::string& name, const Manifold& m) {
  std::filesystem::create_directories(dir);
  const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> axes = m.pca.axes.cast<float>();
  io::write_file(dir / (name + ".axes.f32"), io::encode_f32(axes.data(), static_cast<std::size_t>(axes.size())));
  nlohmann::json keys = nlohmann::json::array();
  for (std::size_t i = 0; i < m.training_keys.size(); ++i)
    keys.push_back({m.training_keys[i].story_id, m.training_keys[i].t, m.training_labels[i]});
  nlohmann::json j = {{"source", to_string(m.source)},
                      {"kind", m.kind},
                      {"d", m.dims()},
                      {"domain", m.domain},
                      {"input_dim", m.pca.input_dim()},
                      {"mean", std::vector<double>(m.pca.mean.begin(), m.pca.mean.end())},
                      {"explained_variance",
                       std::vector<double>(m.pca.explained_variance.begin(), m.pca.explained_variance.end())},
                      {"explained_variance_ratio", std::vector<double>(m.pca.explained_variance_ratio.begin(),
                                                                       m.pca.explained_variance_ratio.end())},
                      {"warnings", m.pca.warnings},
                      {"axes_file", name + ".axes.f32"},
                      {"training_points", keys}};
  if (m.source == Source::activations) j["layer"] = m.layer;
  io::write_file(dir / (name + ".json"), j.dump(2) + "\n");
}

// Training embedding is recomputed from the stored axes; needs the source rows.
inline Manifold read_manifold(const std::filesystem::path& json_path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_file(json_path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(json_path.string() + ": " + e.what());
  }
  const auto where = json_path.filename().string();
  Manifold m;
  auto source = io::required<std::string>(j, "source", where);
  if (source != "behavior" && source != "activations") throw ValidationError(where + ": unknown source '" + source + "'");
  m.source = source == "behavior" ? Source::behavior : Source::activations;
  m.kind = io::required<std::string>(j, "kind", where);
  if (m.kind != "pca") throw ValidationError(where + ": unsupported reducer kind '" + m.kind + "'");
  m.domain = io::required<std::string>(j, "domain", where);
  m.layer = j.value("layer", -1);
  const int d = io::required<int>(j, "d", where);
  auto mean = io::required<std::vector<double>>(j, "mean", where);
  const auto p = static_cast<Eigen::Index>(mean.size());
  m.pca.mean = Eigen::Map<Vector>(mean.data(), p);
  auto axes = io::decode_f32(io::read_file(json_path.parent_path() / io::required<std::string>(j, "axes_file", where)));
  if (static_cast<Eigen::Index>(axes.size()) != d * p) throw ValidationError(where + ": axes file has the wrong size");
  m.pca.axes = Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(axes.data(), d, p)
                   .cast<double>();
  auto ev = io::required<std::vector<double>>(j, "explained_variance", where);
  auto evr = io::required<std::vector<double>>(j, "explained_variance_ratio", where);
  m.pca.explained_variance = Eigen::Map<Vector>(ev.data(), static_cast<Eigen::Index>(ev.size()));
  m.pca.explained_variance_ratio = Eigen::Map<Vector>(evr.data(), static_cast<Eigen::Index>(evr.size()));
  m.pca.warnings = j.value("warnings", std::vector<std::string>{});
  for (const auto& e : io::required<nlohmann::json>(j, "training_points", where)) {
    m.training_keys.push_back({e.at(0).get<std::string>(), e.at(1).get<int>()});
    m.training_labels.push_back(e.at(2).get<std::string>());
  }
  return m;
}

// story_id,t,dim_0..dim_{d-1},label
inline std::string embedding_csv(const std::vector<RecordKey>& keys, const Matrix& coords,
                                 const std::vector<std::string>& labels) {
  std::string out = "story_id,t";
  for (Eigen::Index j = 0; j < coords.cols(); ++j) out += ",dim_" + std::to_string(j);
  out += ",label\n";
  for (std::size_t i = 0; i < keys.size(); ++i) {
    out += csv_escape(keys[i].story_id) + "," + std::to_string(keys[i].t);
    for (Eigen::Index j = 0; j < coords.cols(); ++j) out += "," + fmt_double(coords(static_cast<Eigen::Index>(i), j));
    out += "," + csv_escape(i < labels.size() ? labels[i] : std::string()) + "\n";
  }
  return out;
}

} // namespace cbs::manifold
