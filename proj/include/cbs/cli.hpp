#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <tuple>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cbs/core/dataset_io.hpp"
#include "cbs/core/format.hpp"
#include "cbs/core/types.hpp"
#include "cbs/error.hpp"
#include "cbs/geometry.hpp"
#include "cbs/manifold.hpp"
#include "cbs/oracle.hpp"
#include "cbs/plots.hpp"
#include "cbs/probes.hpp"
#include "cbs/steering.hpp"

// Pipeline commands: synth-gen -> probe -> manifold -> geometry -> steer -> export-plots.
namespace cbs::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitConfig = 2;

struct SteeringSettings {
  std::string method = "probe-weights";
  double alpha = 0.25;
  std::optional<int> span; // 7 for probe-weights, 1 for diff-in-means
  double epsilon = 0.02;
  std::vector<double> alpha_grid = {-0.1, -0.05, 0.0, 0.05, 0.1};
  double persistence_alpha = 0.1;
  std::optional<int> persistence_layer; // first recorded layer by default
  std::string effect_source = "oracle"; // or "datasets"
  std::map<std::string, std::string> steered_datasets;
  std::optional<std::string> plot_concept;

  int resolved_span() const { return span ? *span : (method == "probe-weights" ? 7 : 1); }
};

struct PipelineConfig {
  fs::path out = "out";
  std::uint64_t seed = 0;
  std::optional<fs::path> dataset;
  std::optional<fs::path> ground_truth;
  std::optional<fs::path> reference;
  std::optional<std::string> domain;
  std::vector<int> layers; // empty: every recorded layer
  std::string reducer = "pca";
  int dims = 2;
  std::optional<double> lambda; // cross-validated when empty
  int n_total = manifold::kDefaultTotal;
  int per_story_cap = manifold::kDefaultPerStoryCap;
  int permutations = geometry::kDefaultPermutations;
  std::vector<std::string> stories; // export-plots; first few stories when empty
  int plot_stories = 5;
  SteeringSettings steering;
  oracle::SpaceConfig synth;

  fs::path dataset_dir() const { return dataset ? *dataset : out / "dataset"; }
  fs::path truth_dir() const { return ground_truth ? *ground_truth : out / "ground_truth"; }
  fs::path stage(const char* name) const { return out / name; }

  void validate() const {
    if (reducer != "pca")
      throw ValidationError("reducer '" + reducer + "' is not available; the only implemented reducer is 'pca'");
    if (dims < 1) throw ValidationError("dims must be >= 1");
    if (lambda && (!std::isfinite(*lambda) || *lambda < 0.0)) throw ValidationError("lambda must be finite and >= 0");
    if (n_total < 1 || per_story_cap < 1) throw ValidationError("n_total and per_story_cap must be >= 1");
    if (permutations < 0) throw ValidationError("permutations must be >= 0");
    if (plot_stories < 1) throw ValidationError("plot_stories must be >= 1");
    steering::parse_method(steering.method);
    if (!std::isfinite(steering.alpha)) throw ValidationError("steering.alpha must be finite");
    if (steering.span && *steering.span < 1) throw ValidationError("steering.span must be >= 1");
    if (!(steering.epsilon >= 0.0)) throw ValidationError("steering.epsilon must be >= 0");
    if (steering.alpha_grid.empty()) throw ValidationError("steering.alpha_grid is empty");
    for (double a : steering.alpha_grid)
      if (!std::isfinite(a)) throw ValidationError("steering.alpha_grid must be finite");
    if (!std::isfinite(steering.persistence_alpha)) throw ValidationError("steering.persistence_alpha must be finite");
    if (steering.effect_source != "oracle" && steering.effect_source != "datasets")
      throw ValidationError("steering.effect_source must be 'oracle' or 'datasets'");
    synth.validate();
  }
};

namespace detail {
inline void reject_unknown(const json& j, const std::vector<std::string>& keys, const std::string& where) {
  if (!j.is_object()) throw ValidationError(where + " must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (std::find(keys.begin(), keys.end(), key) == keys.end())
      throw ValidationError(where + ": unknown key '" + key + "'");
}

template <class T>
void opt(const json& j, const char* key, T& field, const std::string& where) {
  if (j.contains(key) && !j.at(key).is_null()) field = io::required<T>(j, key, where);
}

template <class T>
void opt(const json& j, const char* key, std::optional<T>& field, const std::string& where) {
  if (j.contains(key) && !j.at(key).is_null()) field = io::required<T>(j, key, where);
}
} // namespace detail

inline PipelineConfig config_from_json(const json& j) {
  using detail::opt;
  detail::reject_unknown(j,
                         {"out", "seed", "dataset", "ground_truth", "reference", "domain", "layers", "reducer", "dims",
                          "lambda", "n_total", "per_story_cap", "permutations", "stories", "plot_stories", "steering",
                          "synth"},
                         "config");
  PipelineConfig c;
  const std::string w = "config";
  std::optional<std::string> s;
  if (opt(j, "out", s, w), s) c.out = *s;
  opt(j, "seed", c.seed, w);
  if (s.reset(), opt(j, "dataset", s, w), s) c.dataset = *s;
  if (s.reset(), opt(j, "ground_truth", s, w), s) c.ground_truth = *s;
  if (s.reset(), opt(j, "reference", s, w), s) c.reference = *s;
  opt(j, "domain", c.domain, w);
  opt(j, "layers", c.layers, w);
  opt(j, "reducer", c.reducer, w);
  opt(j, "dims", c.dims, w);
  opt(j, "lambda", c.lambda, w);
  opt(j, "n_total", c.n_total, w);
  opt(j, "per_story_cap", c.per_story_cap, w);
  opt(j, "permutations", c.permutations, w);
  opt(j, "stories", c.stories, w);
  opt(j, "plot_stories", c.plot_stories, w);
  if (j.contains("steering")) {
    const auto& st = j.at("steering");
    const std::string sw = "config.steering";
    detail::reject_unknown(st,
                           {"method", "alpha", "span", "epsilon", "alpha_grid", "persistence_alpha",
                            "persistence_layer", "effect_source", "steered_datasets", "plot_concept"},
                           sw);
    auto& S = c.steering;
    opt(st, "method", S.method, sw);
    opt(st, "alpha", S.alpha, sw);
    opt(st, "span", S.span, sw);
    opt(st, "epsilon", S.epsilon, sw);
    opt(st, "alpha_grid", S.alpha_grid, sw);
    opt(st, "persistence_alpha", S.persistence_alpha, sw);
    opt(st, "persistence_layer", S.persistence_layer, sw);
    opt(st, "effect_source", S.effect_source, sw);
    opt(st, "steered_datasets", S.steered_datasets, sw);
    opt(st, "plot_concept", S.plot_concept, sw);
  }
  if (j.contains("synth")) c.synth = oracle::space_config_from_json(j.at("synth"));
  c.validate();
  return c;
}

inline PipelineConfig load_config(const fs::path& path) {
  json j;
  try {
    j = json::parse(io::read_file(path));
  } catch (const json::parse_error& e) {
    throw ValidationError("config " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

// ---------------------------------------------------------------------------
// shared helpers

inline void write_json(const fs::path& path, const json& j) { io::write_file(path, j.dump(2) + "\n"); }

inline json read_json(const fs::path& path) {
  try {
    return json::parse(io::read_file(path));
  } catch (const json::parse_error& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

inline void require_stage(const fs::path& file, const std::string& command, const std::string& producer) {
  if (!fs::exists(file))
    throw ValidationError(command + " needs " + file.string() + "; run `" + producer + "` first");
}

inline Dataset open_dataset(const PipelineConfig& c, bool activations) {
  const auto dir = c.dataset_dir();
  if (!fs::exists(dir / "manifest.json"))
    throw ValidationError("no dataset at " + dir.string() + "; run `synth-gen` or point `dataset` at one");
  return io::load_dataset(dir, io::LoadOptions{activations, true});
}

inline ConceptDomain resolve_domain(const PipelineConfig& c, const DatasetManifest& m) {
  return c.domain ? m.domain(*c.domain) : m.domains.front();
}

inline std::vector<ActivationDataset> select_layers(const PipelineConfig& c, const Dataset& ds) {
  if (ds.manifest.layers.empty()) throw ValidationError("dataset has no activation tensors");
  if (c.layers.empty()) return ds.activations;
  std::vector<ActivationDataset> out;
  for (int l : c.layers) {
    if (!ds.manifest.has_layer(l)) throw ValidationError("configured layer " + std::to_string(l) + " is not in the dataset");
    out.push_back(ds.layer(l));
  }
  return out;
}

inline json vec_json(const Vector& v) { return std::vector<double>(v.begin(), v.end()); }

// ---------------------------------------------------------------------------
// commands

inline void cmd_synth_gen(const PipelineConfig& c, std::ostream& log) {
  auto g = oracle::generate(c.synth, c.seed);
  io::write_dataset(c.dataset_dir(), g.dataset);
  oracle::write_ground_truth(c.truth_dir(), g.truth);
  log << "synth-gen: " << g.dataset.stories.size() << " stories, " << g.dataset.activations.size() << " layers -> "
      << c.dataset_dir().string() << "\n";
}

inline void cmd_probe(const PipelineConfig& c, std::ostream& log) {
  const auto ds = open_dataset(c, true);
  if (ds.manifest.layers.empty()) throw ValidationError("probe: dataset has no activation tensors");
  const auto domain = resolve_domain(c, ds.manifest);
  probes::SweepOptions opts;
  opts.lambda = c.lambda;
  opts.seed = c.seed;
  const auto report = probes::layer_sweep(select_layers(c, ds), ds.domain_trajectories(domain.name), domain, opts);
  probes::write_probe_report(c.stage("probes"), report);
  log << "probe: selected layer " << report.selected_layer << "\n";
}

inline void cmd_manifold(const PipelineConfig& c, std::ostream& log) {
  require_stage(c.stage("probes") / "report.json", "manifold", "probe");
  const auto report = probes::read_probe_report(c.stage("probes"));
  const auto ds = open_dataset(c, true);
  const auto domain = ds.manifest.domain(report.domain);
  const auto& trajs = ds.domain_trajectories(domain.name);
  std::vector<manifold::MaxActivatingSet> sets;
  json selection = json::object();
  for (const auto& concept_name : domain.concepts) {
    sets.push_back(manifold::select_max_activating(trajs, domain, concept_name, c.n_total, c.per_story_cap));
    json e = json::array();
    for (const auto& s : sets.back().entries) e.push_back({s.key.story_id, s.key.t, s.score});
    selection[concept_name] = e;
  }
  const auto& acts = ds.layer(report.selected_layer);
  const auto my = manifold::fit_behavior_manifold(trajs, domain.name, sets, c.dims);
  const auto mz = manifold::fit_activation_manifold(acts, domain.name, sets, c.dims);
  const auto dir = c.stage("manifold");
  manifold::write_manifold(dir, "behavior", my);
  manifold::write_manifold(dir, "activations", mz);
  write_json(dir / "selection.json", selection);
  io::write_file(dir / "behavior_points.csv", manifold::embedding_csv(my.training_keys, my.training_embedding, my.training_labels));
  io::write_file(dir / "activations_points.csv",
                 manifold::embedding_csv(mz.training_keys, mz.training_embedding, mz.training_labels));

  std::vector<RecordKey> keys;
  const Matrix Y = stack_values(trajs, &keys);
  io::write_file(dir / "behavior_trajectories.csv", manifold::embedding_csv(keys, manifold::project(my.pca, Y), {}));
  io::write_file(dir / "activations_trajectories.csv",
                 manifold::embedding_csv(keys, manifold::project(mz.pca, gather_rows(acts, keys)), {}));
  log << "manifold: " << my.training_keys.size() << " points, layer " << mz.layer << "\n";
}

struct GeometryInputs {
  geometry::CentroidSet behavior;
  geometry::CentroidSet activations;
};

inline void cmd_geometry(const PipelineConfig& c, std::ostream& log) {
  const auto mdir = c.stage("manifold");
  require_stage(mdir / "behavior.json", "geometry", "manifold");
  require_stage(mdir / "activations.json", "geometry", "manifold");
  const auto my = manifold::read_manifold(mdir / "behavior.json");
  const auto mz = manifold::read_manifold(mdir / "activations.json");
  const auto ds = open_dataset(c, true);
  const auto domain = ds.manifest.domain(my.domain);
  const auto& trajs = ds.domain_trajectories(domain.name);
  const auto& acts = ds.layer(mz.layer);

  const Matrix ey = manifold::project(my.pca, manifold::behavior_rows(trajs, my.training_keys));
  const Matrix ez = manifold::project(mz.pca, gather_rows(acts, mz.training_keys));
  const auto cy = geometry::centroids(ey, my.training_labels, domain.concepts);
  const auto cz = geometry::centroids(ez, mz.training_labels, domain.concepts);
  const auto dy = geometry::distance_matrix(cy), dz = geometry::distance_matrix(cz);
  const auto wy = geometry::ward_cluster(dy), wz = geometry::ward_cluster(dz);

  const auto dir = c.stage("geometry");
  fs::create_directories(dir);
  write_json(dir / "centroids.json", {{"behavior", geometry::to_json(cy)}, {"activations", geometry::to_json(cz)}});
  for (const auto& [name, d, w] : {std::tuple{"behavior", &dy, &wy}, std::tuple{"activations", &dz, &wz}}) {
    write_json(dir / (std::string("distances_") + name + ".json"), geometry::to_json(*d));
    io::write_file(dir / (std::string("distances_") + name + ".csv"), geometry::matrix_csv(d->concepts, d->values));
    write_json(dir / (std::string("dendrogram_") + name + ".json"), geometry::to_json(*w));
    io::write_file(dir / (std::string("dendrogram_") + name + ".nwk"), geometry::newick(*w) + "\n");
  }
  const auto corr = geometry::matrix_correlation(dy, dz, c.permutations, c.seed);
  write_json(dir / "correlation.json", {{"behavior_vs_activations", geometry::to_json(corr)}});
  io::write_file(dir / "behavior_correlations.csv",
                 geometry::matrix_csv(domain.concepts, geometry::behavior_correlations(trajs, domain)));

  std::vector<RecordKey> keys;
  stack_values(trajs, &keys);
  const Matrix all = manifold::project(mz.pca, gather_rows(acts, keys));
  Vector t(static_cast<Eigen::Index>(keys.size()));
  for (std::size_t i = 0; i < keys.size(); ++i) t(static_cast<Eigen::Index>(i)) = keys[i].t;
  const double r2 = geometry::position_encoding_check(all, t);
  write_json(dir / "position_encoding.json", {{"layer", mz.layer}, {"points", all.rows()}, {"r2", r2}});

  if (c.reference) {
    const auto ref = geometry::reference_from_json(read_json(*c.reference));
    const auto ry = geometry::compare_to_reference(cy, ref, c.permutations, c.seed);
    const auto rz = geometry::compare_to_reference(cz, ref, c.permutations, c.seed);
    auto js = [](const geometry::ReferenceComparison& r) {
      return json{{"concepts", r.concepts},
                  {"procrustes_residual", r.procrustes_residual},
                  {"correlation", geometry::to_json(r.correlation)}};
    };
    write_json(dir / "reference_comparison.json", {{"reference", ref.name}, {"behavior", js(ry)}, {"activations", js(rz)}});
  }
  if (fs::exists(c.truth_dir() / "oracle.json")) {
    const auto truth = oracle::read_ground_truth(c.truth_dir());
    write_json(dir / "ground_truth_alignment.json",
               {{"behavior", oracle::to_json(oracle::compare_centroids(cy, truth, 200, c.seed))},
                {"activations", oracle::to_json(oracle::compare_centroids(cz, truth, 200, c.seed))}});
  }
  const auto split = geometry::top_level_split(wy);
  log << "geometry: r(My, Mz) = " << corr.r << ", p = " << corr.p_value << ", split " << split[0].size() << "+"
      << split[1].size() << "\n";
}

inline void cmd_steer(const PipelineConfig& c, std::ostream& log) {
  require_stage(c.stage("probes") / "report.json", "steer", "probe");
  require_stage(c.stage("geometry") / "distances_behavior.json", "steer", "geometry");
  require_stage(c.stage("geometry") / "dendrogram_behavior.json", "steer", "geometry");
  const auto report = probes::read_probe_report(c.stage("probes"));
  const auto ds = open_dataset(c, true);
  const auto domain = ds.manifest.domain(report.domain);
  const auto& base = ds.domain_trajectories(domain.name);
  const auto& S = c.steering;
  const auto method = steering::parse_method(S.method);
  const auto dir = c.stage("steer");

  std::vector<steering::SteeringVector> vectors;
  for (const auto& concept_name : domain.concepts) {
    vectors.push_back(method == steering::Method::probe_weights
                          ? steering::probe_steering_vector(report, concept_name, report.selected_layer, S.resolved_span())
                          : steering::dim_steering_vector(ds.layer(report.selected_layer), base, domain, concept_name,
                                                          c.n_total, c.per_story_cap));
    steering::write_steering_bundle(dir / "vectors", vectors.back());
  }

  std::optional<oracle::GroundTruth> truth;
  std::map<std::string, std::vector<BeliefTrajectory>> steered;
  if (S.effect_source == "oracle") {
    if (!fs::exists(c.truth_dir() / "oracle.json"))
      throw ValidationError("steer: effect_source 'oracle' needs ground truth at " + c.truth_dir().string());
    truth = oracle::read_ground_truth(c.truth_dir());
    if (truth->space.config.domain != domain.name) throw ValidationError("ground truth domain does not match the dataset");
    for (const auto& sv : vectors) {
      const SteeredTag tag{sv.concept_name, S.alpha, to_string(sv.method)};
      auto d = oracle::steered_dataset(*truth, ds, steering::make_intervention(sv, S.alpha), tag, false);
      io::write_dataset(dir / "datasets" / sv.concept_name, d);
      steered[sv.concept_name] = d.domain_trajectories(domain.name);
    }
  } else {
    for (const auto& concept_name : domain.concepts) {
      auto it = S.steered_datasets.find(concept_name);
      if (it == S.steered_datasets.end()) throw ValidationError("missing steered dataset for target '" + concept_name + "'");
      auto d = io::load_dataset(it->second, io::LoadOptions{false, true});
      if (!d.manifest.steered || d.manifest.steered->concept_name != concept_name)
        throw ValidationError("dataset " + it->second + " is not tagged as steered toward '" + concept_name + "'");
      steered[concept_name] = d.domain_trajectories(domain.name);
    }
  }

  const auto E = steering::entanglement_matrix(base, steered, domain);
  write_json(dir / "entanglement.json", steering::to_json(E));
  io::write_file(dir / "entanglement.csv", geometry::matrix_csv(E.concepts, E.values));
  const auto D = geometry::distance_matrix_from_json(read_json(c.stage("geometry") / "distances_behavior.json"));
  const auto split =
      geometry::top_level_split(geometry::dendrogram_from_json(read_json(c.stage("geometry") / "dendrogram_behavior.json")));
  json prediction;
  try {
    prediction = steering::to_json(steering::predict_entanglement(E, D));
  } catch (const ValidationError& e) {
    prediction = {{"error", e.what()}}; // e.g. alpha = 0 leaves no variance to correlate
  }
  write_json(dir / "prediction.json", prediction);
  write_json(dir / "clusters.json", steering::to_json(steering::cluster_effect_analysis(E, split, S.epsilon)));

  if (truth) {
    const auto effect = oracle::effect_oracle(*truth);
    json sweeps = json::object();
    for (const auto& sv : vectors) {
      const auto sweep = steering::magnitude_sweep(effect, sv, S.alpha_grid);
      io::write_file(dir / ("sweep_" + sv.concept_name + ".csv"), steering::sweep_csv(sweep, domain.concepts));
      sweeps[sv.concept_name] = {{"analytic_gradient", vec_json(oracle::analytic_effect_gradient(*truth, steering::make_intervention(sv, 1.0)))}};
    }
    write_json(dir / "sweep.json", sweeps);

    // Persistence uses per-layer probe directions regardless of the steering method.
    const int first = S.persistence_layer ? *S.persistence_layer : ds.manifest.layers.front();
    std::vector<int> span;
    for (int l : report.layers)
      if (l >= first && (span.empty() || l == span.back() + 1)) span.push_back(l);
    if (span.empty() || span.front() != first)
      throw ValidationError("persistence layer " + std::to_string(first) + " has no probe");
    json persistence = json::object();
    std::string csv = "concept,mode,layer,base,steered,delta,relative\n";
    for (const auto& concept_name : domain.concepts) {
      std::map<int, probes::ProbeEntry> by_layer;
      for (int l : report.layers) by_layer[l] = report.at(l, concept_name);
      json entry = json::object();
      for (const auto& [mode, n] : {std::pair{"single", 1}, std::pair{"multi", static_cast<int>(span.size())}}) {
        const auto sv = steering::probe_steering_vector(report, concept_name, first, n);
        const auto run = oracle::steered_dataset(*truth, ds, steering::make_intervention(sv, S.persistence_alpha),
                                                 std::nullopt, true);
        const auto curve = steering::layer_persistence(by_layer, ds.activations, run.activations, concept_name, first);
        entry[mode] = steering::to_json(curve);
        for (std::size_t i = 0; i < curve.layers.size(); ++i)
          csv += csv_escape(concept_name) + "," + mode + "," + std::to_string(curve.layers[i]) + "," +
                 fmt_double(curve.base[i]) + "," + fmt_double(curve.steered[i]) + "," + fmt_double(curve.delta[i]) +
                 "," + fmt_double(curve.relative[i]) + "\n";
      }
      persistence[concept_name] = entry;
    }
    write_json(dir / "persistence.json", persistence);
    io::write_file(dir / "persistence.csv", csv);

    json align = json::object();
    for (const auto& sv : vectors) align[sv.concept_name] = oracle::to_json(oracle::compare_direction(sv, *truth));
    write_json(dir / "ground_truth_alignment.json", align);
  }
  log << "steer: " << S.method << ", alpha " << S.alpha << ", span " << vectors.front().layers.size() << "\n";
}

inline void cmd_export_plots(const PipelineConfig& c, std::ostream& log) {
  const bool have_probes = fs::exists(c.stage("probes") / "report.json");
  const auto ds = open_dataset(c, have_probes);
  std::optional<probes::ProbeReport> report;
  if (have_probes) report = probes::read_probe_report(c.stage("probes"));
  const auto domain = report ? ds.manifest.domain(report->domain) : resolve_domain(c, ds.manifest);
  const auto& trajs = ds.domain_trajectories(domain.name);

  std::vector<std::string> ids = c.stories;
  if (ids.empty())
    for (std::size_t i = 0; i < ds.stories.size() && static_cast<int>(i) < c.plot_stories; ++i)
      ids.push_back(ds.stories[i].story_id);

  const std::string plot_concept = c.steering.plot_concept ? *c.steering.plot_concept : domain.concepts.front();
  domain.index_of(plot_concept);
  std::optional<Dataset> steered;
  if (fs::exists(c.stage("steer") / "datasets" / plot_concept / "manifest.json"))
    steered = io::load_dataset(c.stage("steer") / "datasets" / plot_concept, io::LoadOptions{false, true});

  const auto dir = c.stage("plots");
  fs::create_directories(dir);
  for (const auto& id : ids) {
    auto it = std::find_if(trajs.begin(), trajs.end(), [&](const BeliefTrajectory& t) { return t.story_id == id; });
    if (it == trajs.end()) throw ValidationError("unknown story_id '" + id + "'");
    plots::StorySeries series{&*it, std::nullopt, std::nullopt};
    if (report) {
      std::vector<RecordKey> keys;
      for (int t = 1; t <= it->length(); ++t) keys.push_back({id, t});
      const Matrix Z = gather_rows(ds.layer(report->selected_layer), keys);
      Matrix pred(it->length(), static_cast<Eigen::Index>(domain.size()));
      for (std::size_t k = 0; k < domain.size(); ++k) {
        const auto& e = report->at(report->selected_layer, domain.concepts[k]);
        pred.col(static_cast<Eigen::Index>(k)) = probes::predict(e.probe, e.calibration, Z);
      }
      series.predicted = pred;
    }
    if (steered) {
      for (const auto& tr : steered->domain_trajectories(domain.name))
        if (tr.story_id == id) series.steered = tr.values;
    }
    const std::string base = id + "_" + domain.name;
    io::write_file(dir / (base + ".csv"), plots::story_csv(series, domain));
    io::write_file(dir / (base + ".svg"), plots::story_svg(series, domain));
  }
  log << "export-plots: " << ids.size() << " stories -> " << dir.string() << "\n";
}

// ---------------------------------------------------------------------------
// entry point

// args excludes the program name. Returns the process exit code.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Conceptual belief space pipeline"};
  app.require_subcommand(1, 1);
  std::string config_path, out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<double> alpha;
  std::vector<std::string> stories;

  struct Command {
    const char* name;
    const char* help;
    void (*fn)(const PipelineConfig&, std::ostream&);
  };
  const std::vector<Command> commands = {
      {"synth-gen", "Generate a synthetic oracle dataset and its ground truth", cmd_synth_gen},
      {"probe", "Fit, calibrate, and score linear probes for every layer", cmd_probe},
      {"manifold", "Fit behavior and activation manifolds on max-activating sentences", cmd_manifold},
      {"geometry", "Centroids, distances, Ward hierarchies, and correlations", cmd_geometry},
      {"steer", "Steering vectors, entanglement, sweeps, and layer persistence", cmd_steer},
      {"export-plots", "Per-story CSV and SVG belief plots", cmd_export_plots}};
  std::map<std::string, CLI::App*> subs;
  for (const auto& cmd : commands) {
    auto* sub = app.add_subcommand(cmd.name, cmd.help);
    sub->add_option("--config", config_path, "Pipeline config (JSON)");
    sub->add_option("--out", out_dir, "Output directory");
    sub->add_option("--seed", seed, "Random seed");
    if (std::string(cmd.name) == "steer") sub->add_option("--alpha", alpha, "Steering magnitude");
    if (std::string(cmd.name) == "export-plots") sub->add_option("--story", stories, "Story id to plot (repeatable)");
    subs[cmd.name] = sub;
  }

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitConfig;
  }

  try {
    PipelineConfig cfg = config_path.empty() ? PipelineConfig{} : load_config(config_path);
    if (!out_dir.empty()) cfg.out = out_dir;
    if (seed) cfg.seed = *seed;
    if (alpha) cfg.steering.alpha = *alpha;
    if (!stories.empty()) cfg.stories = stories;
    cfg.validate();
    for (const auto& cmd : commands)
      if (subs[cmd.name]->parsed()) cmd.fn(cfg, out);
    return kExitOk;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

} // namespace cbs::cli
