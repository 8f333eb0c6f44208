#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <compare>
#include <cstddef>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cbs/error.hpp"

namespace cbs {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using FloatRows = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Ratings are integers 0..10.
inline constexpr int kRatingLevels = 11;
using Rating11 = std::array<double, kRatingLevels>;

// One sentence position inside one story. Sentence index t is 1-based.
struct RecordKey {
  std::string story_id;
  int t = 0;

  friend auto operator<=>(const RecordKey&, const RecordKey&) = default;
  friend bool operator==(const RecordKey&, const RecordKey&) = default;
};

inline std::string to_string(const RecordKey& key) {
  return "(" + key.story_id + ", t=" + std::to_string(key.t) + ")";
}

struct ConceptDomain {
  std::string name;
  std::vector<std::string> concepts;

  std::size_t size() const { return concepts.size(); }

  std::optional<std::size_t> find(const std::string& concept_name) const {
    auto it = std::find(concepts.begin(), concepts.end(), concept_name);
    if (it == concepts.end()) return std::nullopt;
    return static_cast<std::size_t>(it - concepts.begin());
  }

  std::size_t index_of(const std::string& concept_name) const {
    if (auto i = find(concept_name)) return *i;
    throw ValidationError("concept '" + concept_name + "' is not part of domain '" + name + "'");
  }

  void validate() const {
    if (name.empty()) throw ValidationError("concept domain has an empty name");
    if (concepts.size() < 2)
      throw ValidationError("domain '" + name + "' needs at least 2 concepts");
    std::set<std::string> seen;
    for (const auto& c : concepts) {
      if (c.empty()) throw ValidationError("domain '" + name + "' has an empty concept name");
      if (!seen.insert(c).second)
        throw ValidationError("domain '" + name + "' lists concept '" + c + "' twice");
    }
  }

  friend bool operator==(const ConceptDomain&, const ConceptDomain&) = default;
};

struct StoryRecord {
  std::string story_id;
  std::vector<std::string> sentences;
  std::optional<std::string> style;

  int length() const { return static_cast<int>(sentences.size()); }

  friend bool operator==(const StoryRecord&, const StoryRecord&) = default;
};

// y_{t,c} for one story and one domain. values is T x k, row t-1 holds sentence t.
struct BeliefTrajectory {
  std::string story_id;
  std::string domain;
  Matrix values;
  // Optional rating distributions, row-major over (t, c): raw[(t-1) * k + c].
  std::optional<std::vector<Rating11>> raw;

  int length() const { return static_cast<int>(values.rows()); }
  int concepts() const { return static_cast<int>(values.cols()); }

  const Rating11& raw_at(int t, std::size_t c) const {
    return raw->at(static_cast<std::size_t>(t - 1) * static_cast<std::size_t>(concepts()) + c);
  }

  friend bool operator==(const BeliefTrajectory& a, const BeliefTrajectory& b) {
    return a.story_id == b.story_id && a.domain == b.domain &&
           a.values.rows() == b.values.rows() && a.values.cols() == b.values.cols() &&
           a.values == b.values && a.raw == b.raw;
  }
};

// Residual activations for one layer; row i belongs to index[i].
struct ActivationDataset {
  int layer = 0;
  FloatRows rows;
  std::vector<RecordKey> index;

  std::size_t size() const { return index.size(); }
  int hidden_dim() const { return static_cast<int>(rows.cols()); }

  void validate() const {
    if (static_cast<std::size_t>(rows.rows()) != index.size())
      throw ValidationError("layer " + std::to_string(layer) + ": " + std::to_string(rows.rows()) +
                            " activation rows but " + std::to_string(index.size()) + " index entries");
    std::set<RecordKey> seen;
    for (const auto& key : index)
      if (!seen.insert(key).second)
        throw ValidationError("layer " + std::to_string(layer) + ": duplicate index entry " +
                              to_string(key));
  }

  // Row lookup table (story_id, t) -> row.
  std::map<RecordKey, Eigen::Index> row_lookup() const {
    std::map<RecordKey, Eigen::Index> out;
    for (std::size_t i = 0; i < index.size(); ++i) out.emplace(index[i], static_cast<Eigen::Index>(i));
    return out;
  }

  friend bool operator==(const ActivationDataset& a, const ActivationDataset& b) {
    return a.layer == b.layer && a.index == b.index && a.rows.rows() == b.rows.rows() &&
           a.rows.cols() == b.rows.cols() && a.rows == b.rows;
  }
};

// Manifest extension for datasets captured under an intervention.
struct SteeredTag {
  std::string concept_name;
  double alpha = 0.0;
  std::string method;

  friend bool operator==(const SteeredTag&, const SteeredTag&) = default;
};

struct DatasetManifest {
  std::string format_version = "1";
  std::string model_id;
  int hidden_dim = 0;
  std::vector<int> layers;
  std::vector<ConceptDomain> domains; // sorted by name
  int n_stories = 0;
  std::string split = "train";
  std::map<std::string, std::string> checksums; // filename -> crc32 hex
  std::optional<SteeredTag> steered;

  const ConceptDomain& domain(const std::string& name) const {
    for (const auto& d : domains)
      if (d.name == name) return d;
    throw ValidationError("dataset has no domain named '" + name + "'");
  }

  bool has_layer(int layer) const {
    return std::find(layers.begin(), layers.end(), layer) != layers.end();
  }

  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<StoryRecord> stories;
  // domain name -> one trajectory per story, in story order
  std::map<std::string, std::vector<BeliefTrajectory>> trajectories;
  std::vector<ActivationDataset> activations; // in manifest layer order

  const std::vector<BeliefTrajectory>& domain_trajectories(const std::string& domain) const {
    auto it = trajectories.find(domain);
    if (it == trajectories.end()) throw ValidationError("no trajectories for domain '" + domain + "'");
    return it->second;
  }

  const ActivationDataset& layer(int layer) const {
    for (const auto& a : activations)
      if (a.layer == layer) return a;
    throw ValidationError("dataset has no activations for layer " + std::to_string(layer));
  }

  const StoryRecord& story(const std::string& id) const {
    for (const auto& s : stories)
      if (s.story_id == id) return s;
    throw ValidationError("unknown story_id '" + id + "'");
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

// Stacks trajectory rows into an N x k matrix with matching keys, in trajectory order.
inline Matrix stack_values(const std::vector<BeliefTrajectory>& trajectories,
                           std::vector<RecordKey>* keys = nullptr) {
  Eigen::Index n = 0, k = 0;
  for (const auto& tr : trajectories) {
    n += tr.values.rows();
    k = tr.values.cols();
  }
  Matrix out(n, k);
  if (keys) keys->clear();
  Eigen::Index row = 0;
  for (const auto& tr : trajectories) {
    for (Eigen::Index t = 0; t < tr.values.rows(); ++t) {
      if (tr.values.cols() != k) throw ValidationError("trajectories disagree on concept count");
      out.row(row++) = tr.values.row(t);
      if (keys) keys->push_back({tr.story_id, static_cast<int>(t) + 1});
    }
  }
  return out;
}

// Gathers activation rows for the given keys, as doubles.
inline Matrix gather_rows(const ActivationDataset& acts, const std::vector<RecordKey>& keys) {
  const auto lookup = acts.row_lookup();
  Matrix out(static_cast<Eigen::Index>(keys.size()), acts.rows.cols());
  for (std::size_t i = 0; i < keys.size(); ++i) {
    auto it = lookup.find(keys[i]);
    if (it == lookup.end())
      throw ValidationError("layer " + std::to_string(acts.layer) + " has no activation row for " +
                            to_string(keys[i]));
    out.row(static_cast<Eigen::Index>(i)) = acts.rows.row(it->second).cast<double>();
  }
  return out;
}

} // namespace cbs
