#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cbs/core/dataset_io.hpp"
#include "cbs/core/types.hpp"
#include "cbs/elicitation.hpp"
#include "cbs/geometry.hpp"
#include "cbs/probes.hpp"
#include "cbs/steering.hpp"

// Synthetic generative model with a planted 2-D latent belief space. Stands in for
// the language model: behavior and activations are both functions of the latent walk.
namespace cbs::oracle {

struct Anchor {
  std::string concept_name;
  double x = 0.0, y = 0.0;
  friend bool operator==(const Anchor&, const Anchor&) = default;
};

// Two families of three concepts on the unit circle, 60 degrees apart at the closest.
inline std::vector<Anchor> default_anchors() {
  auto at = [](const char* name, double deg) {
    const double r = deg * std::numbers::pi / 180.0;
    return Anchor{name, std::cos(r), std::sin(r)};
  };
  return {at("a1", -15), at("a2", 0), at("a3", 15), at("b1", 75), at("b2", 90), at("b3", 105)};
}

struct SpaceConfig {
  std::string domain = "synthetic";
  std::string model_id = "synthetic-oracle";
  std::vector<Anchor> anchors = default_anchors();
  double beta = 2.0;       // readout sharpness
  double sigma = 0.05;     // behavior noise
  double sigma_z = 0.05;   // activation noise
  double rho = 0.5;        // per-layer carry-over of injected offsets
  double radius = 1.0;     // latent walks stay inside this disk
  double step_scale = 0.15; // step std as a fraction of the box width (2 * radius)
  int hidden_dim = 64;
  std::vector<int> layers = {0, 1, 2, 3};
  std::vector<double> gains = {0.35, 0.6, 1.0, 0.7};
  int n_stories = 200;
  int t_min = 8;
  int t_max = 15;
  bool position_planted = false; // first latent coordinate tracks the sentence index

  int signal_layer() const {
    auto it = std::max_element(gains.begin(), gains.end());
    return layers.at(static_cast<std::size_t>(it - gains.begin()));
  }

  void validate() const {
    auto finite = [](double v) { return std::isfinite(v); };
    if (domain.empty()) throw ValidationError("synth: domain name is empty");
    if (anchors.size() < 2) throw ValidationError("synth: need at least 2 anchors");
    std::vector<std::string> names;
    for (const auto& a : anchors) {
      if (!finite(a.x) || !finite(a.y)) throw ValidationError("synth: anchor '" + a.concept_name + "' is not finite");
      if (a.x == 0.0 && a.y == 0.0) throw ValidationError("synth: anchor '" + a.concept_name + "' sits at the origin");
      names.push_back(a.concept_name);
    }
    ConceptDomain{domain, names}.validate();
    if (!finite(beta) || beta <= 0.0) throw ValidationError("synth: beta must be > 0");
    if (!finite(sigma) || sigma < 0.0) throw ValidationError("synth: sigma must be >= 0, got " + std::to_string(sigma));
    if (!finite(sigma_z) || sigma_z < 0.0)
      throw ValidationError("synth: sigma_z must be >= 0, got " + std::to_string(sigma_z));
    if (!finite(rho) || rho < 0.0 || rho > 1.0) throw ValidationError("synth: rho must lie in [0,1]");
    if (!finite(radius) || radius <= 0.0) throw ValidationError("synth: radius must be > 0");
    if (!finite(step_scale) || step_scale <= 0.0) throw ValidationError("synth: step_scale must be > 0");
    if (hidden_dim < 2) throw ValidationError("synth: hidden_dim must be >= 2");
    if (layers.empty()) throw ValidationError("synth: need at least one layer");
    for (std::size_t i = 1; i < layers.size(); ++i)
      if (layers[i] <= layers[i - 1]) throw ValidationError("synth: layers must be strictly increasing");
    if (gains.size() != layers.size()) throw ValidationError("synth: one gain per layer expected");
    for (double g : gains)
      if (!finite(g) || g <= 0.0) throw ValidationError("synth: layer gains must be > 0");
    if (n_stories < 1) throw ValidationError("synth: n_stories must be >= 1");
    if (t_min < 1 || t_max < t_min) throw ValidationError("synth: need 1 <= t_min <= t_max");
  }

  ConceptDomain concept_domain() const {
    ConceptDomain d{domain, {}};
    for (const auto& a : anchors) d.concepts.push_back(a.concept_name);
    return d;
  }
};

inline nlohmann::json to_json(const SpaceConfig& c) {
  nlohmann::json anchors = nlohmann::json::object();
  nlohmann::json order = nlohmann::json::array();
  for (const auto& a : c.anchors) {
    anchors[a.concept_name] = {a.x, a.y};
    order.push_back(a.concept_name);
  }
  return {{"domain", c.domain},         {"model_id", c.model_id}, {"concepts", order},
          {"anchors", anchors},         {"beta", c.beta},         {"sigma", c.sigma},
          {"sigma_z", c.sigma_z},       {"rho", c.rho},           {"radius", c.radius},
          {"step_scale", c.step_scale}, {"hidden_dim", c.hidden_dim}, {"layers", c.layers},
          {"gains", c.gains},           {"n_stories", c.n_stories}, {"t_min", c.t_min},
          {"t_max", c.t_max},           {"position_planted", c.position_planted}};
}

// Missing keys keep their defaults; unknown keys are rejected.
inline SpaceConfig space_config_from_json(const nlohmann::json& j, SpaceConfig c = {}) {
  static const std::vector<std::string> kKeys = {"domain", "model_id", "concepts", "anchors", "beta", "sigma",
                                                 "sigma_z", "rho", "radius", "step_scale", "hidden_dim", "layers",
                                                 "gains", "n_stories", "t_min", "t_max", "position_planted"};
  if (!j.is_object()) throw ValidationError("synth config must be an object");
  for (const auto& [key, _] : j.items())
    if (std::find(kKeys.begin(), kKeys.end(), key) == kKeys.end())
      throw ValidationError("synth config: unknown key '" + key + "'");
  const std::string where = "synth config";
  auto opt = [&](const char* key, auto& field) {
    if (j.contains(key)) field = io::required<std::decay_t<decltype(field)>>(j, key, where);
  };
  opt("domain", c.domain);
  opt("model_id", c.model_id);
  opt("beta", c.beta);
  opt("sigma", c.sigma);
  opt("sigma_z", c.sigma_z);
  opt("rho", c.rho);
  opt("radius", c.radius);
  opt("step_scale", c.step_scale);
  opt("hidden_dim", c.hidden_dim);
  opt("layers", c.layers);
  opt("gains", c.gains);
  opt("n_stories", c.n_stories);
  opt("t_min", c.t_min);
  opt("t_max", c.t_max);
  opt("position_planted", c.position_planted);
  if (j.contains("anchors")) {
    const auto& a = j.at("anchors");
    if (!a.is_object()) throw ValidationError("synth config: anchors must map concept -> [x, y]");
    std::vector<std::string> order;
    if (j.contains("concepts")) order = io::required<std::vector<std::string>>(j, "concepts", where);
    else
      for (const auto& [name, _] : a.items()) order.push_back(name);
    c.anchors.clear();
    for (const auto& name : order) {
      if (!a.contains(name)) throw ValidationError("synth config: no anchor for concept '" + name + "'");
      auto xy = io::required<std::vector<double>>(a, name.c_str(), where);
      if (xy.size() != 2) throw ValidationError("synth config: anchor '" + name + "' must have 2 coordinates");
      c.anchors.push_back({name, xy[0], xy[1]});
    }
    if (order.size() != a.size()) throw ValidationError("synth config: concepts and anchors disagree");
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// planted space

struct PlantedSpace {
  SpaceConfig config;
  std::uint64_t seed = 0;
  Matrix anchors;      // k x 2
  Matrix directions;   // k x 2, unit anchor directions
  std::vector<Matrix> W;    // per layer, q x 2
  std::vector<Matrix> Wpinv; // per layer, 2 x q

  std::size_t layer_pos(int layer) const {
    auto it = std::find(config.layers.begin(), config.layers.end(), layer);
    if (it == config.layers.end()) throw ValidationError("planted space has no layer " + std::to_string(layer));
    return static_cast<std::size_t>(it - config.layers.begin());
  }
  const Matrix& embedding(int layer) const { return W[layer_pos(layer)]; }
  const Matrix& pinv(int layer) const { return Wpinv[layer_pos(layer)]; }
  Eigen::Index k() const { return anchors.rows(); }
};

namespace detail {
enum Stream : std::uint64_t { walk = 0, behavior = 1, activations = 2, embedding = 1000 };

inline std::mt19937_64 rng(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b)};
  return std::mt19937_64(seq);
}
} // namespace detail

inline PlantedSpace make_space(const SpaceConfig& config, std::uint64_t seed) {
  config.validate();
  PlantedSpace s;
  s.config = config;
  s.seed = seed;
  const auto k = static_cast<Eigen::Index>(config.anchors.size());
  s.anchors.resize(k, 2);
  for (Eigen::Index c = 0; c < k; ++c) {
    s.anchors(c, 0) = config.anchors[static_cast<std::size_t>(c)].x;
    s.anchors(c, 1) = config.anchors[static_cast<std::size_t>(c)].y;
  }
  s.directions = s.anchors.rowwise().normalized();
  for (std::size_t l = 0; l < config.layers.size(); ++l) {
    auto gen = detail::rng(seed, detail::embedding, l);
    std::normal_distribution<double> n01(0.0, 1.0);
    Matrix G(config.hidden_dim, 2);
    for (Eigen::Index i = 0; i < G.rows(); ++i)
      for (Eigen::Index j = 0; j < 2; ++j) G(i, j) = n01(gen);
    Eigen::HouseholderQR<Matrix> qr(G);
    Matrix Q = qr.householderQ() * Matrix::Identity(config.hidden_dim, 2);
    Matrix W = config.gains[l] * Q;
    s.W.push_back(W);
    s.Wpinv.push_back((W.transpose() * W).ldlt().solve(W.transpose()));
  }
  return s;
}

// Beliefs before clamping: linearized logistic of the signed projection onto each anchor axis.
inline Vector readout_unclamped(const PlantedSpace& s, const Eigen::Ref<const Vector>& b) {
  if (b.size() != 2) throw ValidationError("latent state must be 2-D");
  return (0.5 + (s.config.beta / 4.0) * (s.directions * b).array()).matrix();
}

inline Vector readout(const PlantedSpace& s, const Eigen::Ref<const Vector>& b) {
  return readout_unclamped(s, b).cwiseMax(0.0).cwiseMin(1.0);
}

// Beliefs implied by an activation vector at one layer: b_hat = pinv(W_l) z.
inline Vector oracle_readout(const PlantedSpace& s, const Eigen::Ref<const Vector>& z, int layer) {
  const auto& P = s.pinv(layer);
  if (z.size() != P.cols())
    throw ValidationError("oracle readout expects " + std::to_string(P.cols()) + " features, got " +
                          std::to_string(z.size()));
  return readout(s, P * z);
}

// Direction in activation space along which belief in concept c rises fastest at a layer.
inline Vector planted_axis(const PlantedSpace& s, std::size_t concept_name, int layer) {
  Vector v = s.pinv(layer).transpose() * s.directions.row(static_cast<Eigen::Index>(concept_name)).transpose();
  return v.normalized();
}

// ---------------------------------------------------------------------------
// generation

struct GroundTruth {
  PlantedSpace space;
  std::vector<std::string> story_ids;
  std::vector<Matrix> latents; // per story, T x 2
};

struct Generated {
  Dataset dataset;
  GroundTruth truth;
};

inline std::string story_name(int i, int n) {
  std::string digits = std::to_string(i);
  const std::size_t width = std::max<std::size_t>(3, std::to_string(std::max(n - 1, 0)).size());
  return "s" + std::string(width - std::min(width, digits.size()), '0') + digits;
}

inline Matrix latent_walk(const SpaceConfig& c, std::uint64_t seed, int story) {
  auto gen = detail::rng(seed, detail::walk, static_cast<std::uint64_t>(story));
  std::uniform_int_distribution<int> length(c.t_min, c.t_max);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> n01(0.0, 1.0);
  const int T = length(gen);
  const double R = c.radius;
  Matrix b(T, 2);
  if (c.position_planted) {
    const double half = 0.6 * R;
    const double step = c.step_scale * 2.0 * half;
    double b2 = half * (2.0 * u01(gen) - 1.0);
    for (int t = 1; t <= T; ++t) {
      const double frac = c.t_max > 1 ? static_cast<double>(t - 1) / (c.t_max - 1) : 0.0;
      const double b1 = std::clamp(R * (-0.8 + 1.6 * frac) + 0.02 * R * n01(gen), -0.8 * R, 0.8 * R);
      if (t > 1) {
        b2 += step * n01(gen);
        while (b2 > half || b2 < -half) b2 = b2 > half ? 2 * half - b2 : -2 * half - b2;
      }
      b(t - 1, 0) = b1;
      b(t - 1, 1) = b2;
    }
    return b;
  }
  const double r0 = R * std::sqrt(u01(gen)), phi = 2.0 * std::numbers::pi * u01(gen);
  Eigen::Vector2d cur(r0 * std::cos(phi), r0 * std::sin(phi));
  const double step = c.step_scale * 2.0 * R;
  for (int t = 1; t <= T; ++t) {
    if (t > 1) {
      cur += step * Eigen::Vector2d(n01(gen), n01(gen));
      for (double n = cur.norm(); n > R; n = cur.norm()) cur *= (2.0 * R - n) / n; // reflect radially
    }
    b.row(t - 1) = cur.transpose();
  }
  return b;
}

// Noise added to each (t, c) cell of one story, row-major.
inline Matrix behavior_noise(const PlantedSpace& s, int story, Eigen::Index T) {
  auto gen = detail::rng(s.seed, detail::behavior, static_cast<std::uint64_t>(story));
  std::normal_distribution<double> n01(0.0, 1.0);
  Matrix e(T, s.k());
  for (Eigen::Index t = 0; t < T; ++t)
    for (Eigen::Index c = 0; c < s.k(); ++c) e(t, c) = s.config.sigma * n01(gen);
  return e;
}

// Two-point rating distribution on floor(10y), ceil(10y) whose mean is y.
inline Rating11 discretize(double y) {
  Rating11 p{};
  const double v = 10.0 * std::clamp(y, 0.0, 1.0);
  const int lo = std::min(static_cast<int>(std::floor(v)), 10);
  const double hi = v - lo;
  if (lo == 10 || hi == 0.0) {
    p[static_cast<std::size_t>(lo)] = 1.0;
  } else {
    p[static_cast<std::size_t>(lo)] = 1.0 - hi;
    p[static_cast<std::size_t>(lo + 1)] = hi;
  }
  return p;
}

// Behavior for one story given (possibly shifted) latents; identical noise for identical story.
inline BeliefTrajectory story_behavior(const PlantedSpace& s, int story, const std::string& id, const Matrix& latents,
                                       bool with_raw) {
  const Matrix noise = behavior_noise(s, story, latents.rows());
  BeliefTrajectory tr;
  tr.story_id = id;
  tr.domain = s.config.domain;
  tr.values.resize(latents.rows(), s.k());
  if (with_raw) tr.raw.emplace();
  for (Eigen::Index t = 0; t < latents.rows(); ++t) {
    const Vector u = readout_unclamped(s, latents.row(t).transpose());
    for (Eigen::Index c = 0; c < s.k(); ++c) {
      const Rating11 p = discretize(u(c) + noise(t, c));
      tr.values(t, c) = elicitation::expected_rating(std::span<const double>(p));
      if (with_raw) tr.raw->push_back(p);
    }
  }
  return tr;
}

inline Generated generate(const SpaceConfig& config, std::uint64_t seed) {
  Generated g;
  g.truth.space = make_space(config, seed);
  const auto& s = g.truth.space;
  const ConceptDomain domain = config.concept_domain();
  Dataset& ds = g.dataset;
  ds.manifest.model_id = config.model_id;
  ds.manifest.hidden_dim = config.hidden_dim;
  ds.manifest.layers = config.layers;
  ds.manifest.domains = {domain};
  ds.manifest.n_stories = config.n_stories;
  ds.manifest.split = "train";

  auto& trajectories = ds.trajectories[domain.name];
  std::vector<RecordKey> index;
  for (int i = 0; i < config.n_stories; ++i) {
    const std::string id = story_name(i, config.n_stories);
    Matrix b = latent_walk(config, seed, i);
    StoryRecord story{id, {}, std::nullopt};
    for (Eigen::Index t = 1; t <= b.rows(); ++t)
      story.sentences.push_back("Sentence " + std::to_string(t) + " of synthetic story " + id + ".");
    ds.stories.push_back(std::move(story));
    trajectories.push_back(story_behavior(s, i, id, b, true));
    for (int t = 1; t <= b.rows(); ++t) index.push_back({id, t});
    g.truth.story_ids.push_back(id);
    g.truth.latents.push_back(std::move(b));
  }

  const auto n = static_cast<Eigen::Index>(index.size());
  for (std::size_t l = 0; l < config.layers.size(); ++l) {
    ActivationDataset acts;
    acts.layer = config.layers[l];
    acts.index = index;
    acts.rows.resize(n, config.hidden_dim);
    std::normal_distribution<double> n01(0.0, 1.0);
    Eigen::Index row = 0;
    for (int i = 0; i < config.n_stories; ++i) {
      auto gen = detail::rng(seed, detail::activations + 16 * l, static_cast<std::uint64_t>(i));
      const Matrix& b = g.truth.latents[static_cast<std::size_t>(i)];
      for (Eigen::Index t = 0; t < b.rows(); ++t, ++row) {
        Vector z = s.W[l] * b.row(t).transpose();
        for (Eigen::Index j = 0; j < z.size(); ++j) z(j) += config.sigma_z * n01(gen);
        acts.rows.row(row) = z.transpose().cast<float>();
      }
    }
    ds.activations.push_back(std::move(acts));
  }
  io::refresh_checksums(ds);
  return g;
}

// ---------------------------------------------------------------------------
// interventions

// Latent displacement carried at every layer: d_l = rho * d_{l-1} + pinv(W_l) * offset_l.
inline std::vector<Vector> latent_shifts(const PlantedSpace& s, const steering::Intervention& iv) {
  for (const auto& [layer, offset] : iv.offsets) {
    s.layer_pos(layer);
    if (offset.size() != s.config.hidden_dim)
      throw ValidationError("intervention at layer " + std::to_string(layer) + " has dimension " +
                            std::to_string(offset.size()) + ", expected " + std::to_string(s.config.hidden_dim));
  }
  std::vector<Vector> out;
  Vector d = Vector::Zero(2);
  for (std::size_t l = 0; l < s.config.layers.size(); ++l) {
    d = s.config.rho * d;
    if (auto it = iv.offsets.find(s.config.layers[l]); it != iv.offsets.end()) d += s.Wpinv[l] * it->second;
    out.push_back(d);
  }
  return out;
}

// Behavior under the intervention: the latent shift at the last layer is read out with
// the base noise draws, so an empty or zero intervention reproduces the base run.
inline std::vector<BeliefTrajectory> steered_behavior(const GroundTruth& truth, const steering::Intervention& iv) {
  const auto& s = truth.space;
  const Vector final_shift = latent_shifts(s, iv).back();
  std::vector<BeliefTrajectory> out;
  for (std::size_t i = 0; i < truth.story_ids.size(); ++i) {
    Matrix b = truth.latents[i];
    b.rowwise() += final_shift.transpose();
    out.push_back(story_behavior(s, static_cast<int>(i), truth.story_ids[i], b, false));
  }
  return out;
}

// Dataset as it would have been recorded under the intervention. Activations gain
// W_l d_l at every layer plus the out-of-span part of the offset at the layer where it
// is injected.
inline Dataset steered_dataset(const GroundTruth& truth, const Dataset& base, const steering::Intervention& iv,
                               const std::optional<SteeredTag>& tag, bool with_activations) {
  const auto& s = truth.space;
  if (base.stories.size() != truth.story_ids.size()) throw ValidationError("dataset does not match the ground truth");
  for (std::size_t i = 0; i < truth.story_ids.size(); ++i)
    if (base.stories[i].story_id != truth.story_ids[i]) throw ValidationError("dataset does not match the ground truth");
  const auto shifts = latent_shifts(s, iv);
  Dataset out;
  out.manifest = base.manifest;
  out.manifest.steered = tag;
  out.stories = base.stories;
  out.trajectories[s.config.domain] = steered_behavior(truth, iv);
  if (with_activations) {
    if (base.activations.size() != s.config.layers.size()) throw ValidationError("base activations are not loaded");
    for (const auto& acts : base.activations) {
      const auto l = s.layer_pos(acts.layer);
      Vector offset = s.W[l] * shifts[l];
      if (auto it = iv.offsets.find(acts.layer); it != iv.offsets.end())
        offset += it->second - s.W[l] * (s.Wpinv[l] * it->second);
      ActivationDataset a = acts;
      if (!offset.isZero(0.0)) {
        const Eigen::RowVectorXd o = offset.transpose();
        for (Eigen::Index r = 0; r < a.rows.rows(); ++r) a.rows.row(r) = (acts.rows.row(r).cast<double>() + o).cast<float>();
      }
      out.activations.push_back(std::move(a));
    }
  } else {
    out.manifest.layers.clear();
  }
  io::refresh_checksums(out);
  return out;
}

// Effect oracle over all records in story order.
inline steering::EffectOracle effect_oracle(const GroundTruth& truth) {
  return [&truth](const steering::Intervention& iv) { return stack_values(steered_behavior(truth, iv)); };
}

// d(mean y_c)/d(alpha) at alpha = 0 for a unit intervention, averaged over records;
// records whose noisy readout sits outside (0, 1) contribute zero.
inline Vector analytic_effect_gradient(const GroundTruth& truth, const steering::Intervention& unit) {
  const auto& s = truth.space;
  const Vector d = latent_shifts(s, unit).back();
  const Vector slope = (s.config.beta / 4.0) * (s.directions * d);
  Vector acc = Vector::Zero(s.k());
  Eigen::Index n = 0;
  for (std::size_t i = 0; i < truth.latents.size(); ++i) {
    const Matrix& b = truth.latents[i];
    const Matrix noise = behavior_noise(s, static_cast<int>(i), b.rows());
    for (Eigen::Index t = 0; t < b.rows(); ++t, ++n) {
      const Vector u = readout_unclamped(s, b.row(t).transpose()) + noise.row(t).transpose();
      for (Eigen::Index c = 0; c < s.k(); ++c)
        if (u(c) > 0.0 && u(c) < 1.0) acc(c) += slope(c);
    }
  }
  return acc / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// ground truth files

inline geometry::ReferenceSpace anchor_reference(const PlantedSpace& s) {
  geometry::ReferenceSpace ref;
  ref.name = "planted-anchors";
  for (const auto& a : s.config.anchors) ref.concepts.push_back(a.concept_name);
  ref.coords = s.anchors;
  return ref;
}

inline void write_ground_truth(const std::filesystem::path& dir, const GroundTruth& truth) {
  std::filesystem::create_directories(dir);
  const auto& s = truth.space;
  nlohmann::json files = nlohmann::json::object();
  for (std::size_t l = 0; l < s.W.size(); ++l) {
    const FloatRows W = s.W[l].cast<float>();
    const std::string name = "W_" + std::to_string(s.config.layers[l]) + ".f32";
    io::write_file(dir / name, io::encode_f32(W.data(), static_cast<std::size_t>(W.size())));
    files[std::to_string(s.config.layers[l])] = name;
  }
  std::vector<float> lat;
  nlohmann::json lengths = nlohmann::json::array();
  for (std::size_t i = 0; i < truth.latents.size(); ++i) {
    const FloatRows b = truth.latents[i].cast<float>();
    lat.insert(lat.end(), b.data(), b.data() + b.size());
    lengths.push_back({truth.story_ids[i], b.rows()});
  }
  io::write_file(dir / "latents.f32", io::encode_f32(lat.data(), lat.size()));
  nlohmann::json j = {{"seed", s.seed},
                      {"space", to_json(s.config)},
                      {"signal_layer", s.config.signal_layer()},
                      {"embedding_files", files},
                      {"embedding_shape", {s.config.hidden_dim, 2}},
                      {"latents_file", "latents.f32"},
                      {"story_lengths", lengths}};
  io::write_file(dir / "oracle.json", j.dump(2) + "\n");
  io::write_file(dir / "reference.json", geometry::reference_to_json(anchor_reference(s)).dump(2) + "\n");
}

// Rebuilds the ground truth from its seed and configuration; the float32 sidecars are
// for inspection and are cross-checked against the rebuild.
inline GroundTruth read_ground_truth(const std::filesystem::path& dir) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_file(dir / "oracle.json"));
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError("oracle.json: " + std::string(e.what()));
  }
  const auto seed = io::required<std::uint64_t>(j, "seed", "oracle.json");
  const auto config = space_config_from_json(io::required<nlohmann::json>(j, "space", "oracle.json"));
  GroundTruth truth = generate(config, seed).truth;
  const auto files = io::required<nlohmann::json>(j, "embedding_files", "oracle.json");
  for (std::size_t l = 0; l < config.layers.size(); ++l) {
    const auto key = std::to_string(config.layers[l]);
    if (!files.contains(key)) throw ValidationError("oracle.json: no embedding file for layer " + key);
    auto w = io::decode_f32(io::read_file(dir / files.at(key).get<std::string>()));
    const FloatRows expect = truth.space.W[l].cast<float>();
    if (w.size() != static_cast<std::size_t>(expect.size()) || !std::equal(w.begin(), w.end(), expect.data()))
      throw ValidationError("ground truth embedding for layer " + key + " does not match its seed");
  }
  return truth;
}

// ---------------------------------------------------------------------------
// comparison of fitted artifacts with the planted truth

struct AlignmentReport {
  std::string artifact;
  double residual = 0.0;       // Procrustes disparity or 1 - cosine
  double chance_baseline = 0.0; // mean residual under shuffled concept labels (reported only)
  std::map<std::string, double> details;
};

// Procrustes residual of recovered centroids against the planted anchors.
inline AlignmentReport compare_centroids(const geometry::CentroidSet& c, const GroundTruth& truth,
                                         int shuffles = 200, std::uint64_t seed = 0) {
  const auto ref = anchor_reference(truth.space);
  if (c.concepts != ref.concepts) throw ValidationError("centroid concepts do not match the planted anchors");
  AlignmentReport r;
  r.artifact = "centroids";
  r.residual = geometry::procrustes(ref.coords, c.points).disparity;
  std::mt19937_64 gen(seed);
  std::vector<Eigen::Index> perm(static_cast<std::size_t>(c.points.rows()));
  double acc = 0.0;
  for (int i = 0; i < shuffles; ++i) {
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), gen);
    acc += geometry::procrustes(ref.coords, c.points(perm, Eigen::all)).disparity;
  }
  r.chance_baseline = shuffles > 0 ? acc / shuffles : 0.0;
  return r;
}

// Cosine of each per-layer steering direction with the planted concept axis image.
inline AlignmentReport compare_direction(const steering::SteeringVector& sv, const GroundTruth& truth) {
  const auto domain = truth.space.config.concept_domain();
  const auto c = domain.index_of(sv.concept_name);
  AlignmentReport r;
  r.artifact = "steering:" + sv.concept_name;
  double worst = 1.0;
  double baseline = 0.0;
  for (std::size_t i = 0; i < sv.layers.size(); ++i) {
    if (sv.directions[i].size() != truth.space.config.hidden_dim)
      throw ValidationError("steering vector dimension does not match the planted space");
    const double cos = sv.directions[i].dot(planted_axis(truth.space, c, sv.layers[i]));
    r.details["cosine_layer" + std::to_string(sv.layers[i])] = cos;
    worst = std::min(worst, cos);
  }
  // A random unit direction in q dimensions has |cosine| around 1/sqrt(q).
  baseline = 1.0 - 1.0 / std::sqrt(static_cast<double>(truth.space.config.hidden_dim));
  r.residual = 1.0 - worst;
  r.chance_baseline = baseline;
  return r;
}

inline nlohmann::json to_json(const AlignmentReport& r) {
  return {{"artifact", r.artifact}, {"residual", r.residual}, {"chance_baseline", r.chance_baseline},
          {"details", r.details}};
}

} // namespace cbs::oracle
