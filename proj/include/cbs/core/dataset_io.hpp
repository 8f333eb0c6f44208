#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <boost/crc.hpp>
#include <nlohmann/json.hpp>

#include "cbs/core/types.hpp"
#include "cbs/elicitation.hpp"

// On-disk dataset format (format_version "1"):
//   manifest.json     dataset metadata + crc32 of every tensor file and index.json
//   stories.jsonl     {story_id, style?, sentences}
//   behavior.jsonl    {story_id, t, beliefs:{domain:{concept:y}}, raw?:{domain:{concept:[11]}}}
//   layer_<l>.f32     N x q float32 little-endian, row-major, no header
//   index.json        [[story_id, t], ...] in row order, shared by every layer file
namespace cbs::io {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr double kAggregationTolerance = 1e-9;

inline std::string crc32_hex(const std::string& bytes) {
  boost::crc_32_type crc;
  crc.process_bytes(bytes.data(), bytes.size());
  std::ostringstream os;
  os << std::hex << std::setw(8) << std::setfill('0') << crc.checksum();
  return os.str();
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("missing file: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

// float32 little-endian serialization
inline std::string encode_f32(const float* data, std::size_t count) {
  std::string out(count * 4, '\0');
  for (std::size_t i = 0; i < count; ++i) {
    auto bits = std::bit_cast<std::uint32_t>(data[i]);
    for (int b = 0; b < 4; ++b) out[i * 4 + b] = static_cast<char>((bits >> (8 * b)) & 0xFFu);
  }
  return out;
}

inline std::vector<float> decode_f32(const std::string& bytes) {
  if (bytes.size() % 4 != 0) throw ValidationError("float32 file size is not a multiple of 4");
  std::vector<float> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b)
      bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[i * 4 + b])) << (8 * b);
    out[i] = std::bit_cast<float>(bits);
  }
  return out;
}

inline std::string layer_filename(int layer) { return "layer_" + std::to_string(layer) + ".f32"; }

// ---------------------------------------------------------------------------
// validation

inline void validate_trajectory(const BeliefTrajectory& tr, const ConceptDomain& domain, int length) {
  const std::string where = "story '" + tr.story_id + "', domain '" + domain.name + "'";
  if (tr.domain != domain.name) throw ValidationError(where + ": trajectory labelled '" + tr.domain + "'");
  if (tr.length() != length)
    throw ValidationError(where + ": trajectory has " + std::to_string(tr.length()) + " rows, story has " +
                          std::to_string(length) + " sentences");
  if (static_cast<std::size_t>(tr.concepts()) != domain.size())
    throw ValidationError(where + ": trajectory has wrong concept count");
  for (Eigen::Index t = 0; t < tr.values.rows(); ++t)
    for (Eigen::Index c = 0; c < tr.values.cols(); ++c) {
      double v = tr.values(t, c);
      if (!std::isfinite(v) || v < 0.0 || v > 1.0)
        throw ValidationError(where + ": belief value " + std::to_string(v) + " at t=" +
                              std::to_string(t + 1) + " is not in [0,1]");
    }
  if (tr.raw) {
    if (tr.raw->size() != static_cast<std::size_t>(length) * domain.size())
      throw ValidationError(where + ": raw distribution count does not match T x k");
    for (int t = 1; t <= length; ++t)
      for (std::size_t c = 0; c < domain.size(); ++c) {
        const auto& probs = tr.raw_at(t, c);
        double y = elicitation::expected_rating(std::span<const double>(probs));
        if (std::abs(y - tr.values(t - 1, static_cast<Eigen::Index>(c))) > kAggregationTolerance)
          throw ValidationError(where + ": stored value at t=" + std::to_string(t) + " for '" +
                                domain.concepts[c] + "' disagrees with its raw distribution");
      }
  }
}

inline void validate_dataset(const Dataset& ds) {
  const auto& m = ds.manifest;
  if (m.format_version != "1") throw ValidationError("unsupported format_version '" + m.format_version + "'");
  if (m.domains.empty()) throw ValidationError("manifest declares no domains");
  std::set<std::string> domain_names;
  for (const auto& d : m.domains) {
    d.validate();
    if (!domain_names.insert(d.name).second) throw ValidationError("domain '" + d.name + "' declared twice");
  }
  if (m.n_stories != static_cast<int>(ds.stories.size()))
    throw ValidationError("manifest n_stories=" + std::to_string(m.n_stories) + " but " +
                          std::to_string(ds.stories.size()) + " stories present");

  std::map<std::string, int> lengths;
  for (const auto& s : ds.stories) {
    if (s.story_id.empty()) throw ValidationError("story with empty story_id");
    if (s.sentences.empty()) throw ValidationError("story '" + s.story_id + "' has no sentences");
    if (!lengths.emplace(s.story_id, s.length()).second)
      throw ValidationError("duplicate story_id '" + s.story_id + "'");
  }

  std::size_t total = 0;
  for (const auto& d : m.domains) {
    auto it = ds.trajectories.find(d.name);
    if (it == ds.trajectories.end() || it->second.empty())
      throw ValidationError("no trajectories for domain '" + d.name + "'");
    if (it->second.size() != ds.stories.size())
      throw ValidationError("domain '" + d.name + "' has " + std::to_string(it->second.size()) +
                            " trajectories for " + std::to_string(ds.stories.size()) + " stories");
    for (std::size_t i = 0; i < it->second.size(); ++i) {
      const auto& tr = it->second[i];
      if (tr.story_id != ds.stories[i].story_id)
        throw ValidationError("trajectory order does not follow story order at '" + tr.story_id + "'");
      validate_trajectory(tr, d, ds.stories[i].length());
      total += static_cast<std::size_t>(tr.length());
    }
  }
  if (total == 0) throw ValidationError("no trajectories");
  if (ds.trajectories.size() != m.domains.size())
    throw ValidationError("trajectories present for a domain missing from the manifest");

  if (ds.activations.size() != m.layers.size())
    throw ValidationError("manifest lists " + std::to_string(m.layers.size()) + " layers but " +
                          std::to_string(ds.activations.size()) + " activation tensors are present");
  for (std::size_t i = 0; i < ds.activations.size(); ++i) {
    const auto& a = ds.activations[i];
    if (a.layer != m.layers[i]) throw ValidationError("activation layers out of manifest order");
    a.validate();
    if (a.hidden_dim() != m.hidden_dim)
      throw ValidationError("layer " + std::to_string(a.layer) + " has width " + std::to_string(a.hidden_dim()) +
                            ", manifest hidden_dim is " + std::to_string(m.hidden_dim));
    if (a.index != ds.activations.front().index)
      throw ValidationError("layer " + std::to_string(a.layer) + " index differs from layer " +
                            std::to_string(ds.activations.front().layer));
    if (!a.rows.allFinite()) throw ValidationError("layer " + std::to_string(a.layer) + " has non-finite values");
    for (const auto& key : a.index) {
      auto it = lengths.find(key.story_id);
      if (it == lengths.end() || key.t < 1 || key.t > it->second)
        throw ValidationError("activation index entry " + to_string(key) + " matches no story sentence");
    }
  }
}

// ---------------------------------------------------------------------------
// JSON helpers

inline json manifest_to_json(const DatasetManifest& m) {
  json domains = json::object();
  for (const auto& d : m.domains) domains[d.name] = d.concepts;
  json j = {{"format_version", m.format_version},
            {"model_id", m.model_id},
            {"hidden_dim", m.hidden_dim},
            {"layers", m.layers},
            {"domains", domains},
            {"n_stories", m.n_stories},
            {"split", m.split},
            {"checksums", m.checksums}};
  if (m.steered)
    j["steered"] = {{"concept", m.steered->concept_name}, {"alpha", m.steered->alpha}, {"method", m.steered->method}};
  return j;
}

template <class T>
T required(const json& j, const char* key, const std::string& where) {
  if (!j.is_object() || !j.contains(key)) throw ValidationError(where + ": missing key '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ValidationError(where + ": bad value for '" + key + "': " + e.what());
  }
}

inline DatasetManifest manifest_from_json(const json& j) {
  static const std::set<std::string> kKeys = {"format_version", "model_id", "hidden_dim", "layers",
                                              "domains", "n_stories", "split", "checksums"};
  if (!j.is_object()) throw ValidationError("manifest.json is not an object");
  for (const auto& [key, _] : j.items())
    if (!kKeys.count(key) && key != "steered") throw ValidationError("manifest.json: unexpected key '" + key + "'");
  for (const auto& key : kKeys)
    if (!j.contains(key)) throw ValidationError("manifest.json: missing key '" + key + "'");

  DatasetManifest m;
  m.format_version = required<std::string>(j, "format_version", "manifest.json");
  m.model_id = required<std::string>(j, "model_id", "manifest.json");
  m.hidden_dim = required<int>(j, "hidden_dim", "manifest.json");
  m.layers = required<std::vector<int>>(j, "layers", "manifest.json");
  m.n_stories = required<int>(j, "n_stories", "manifest.json");
  m.split = required<std::string>(j, "split", "manifest.json");
  m.checksums = required<std::map<std::string, std::string>>(j, "checksums", "manifest.json");
  const auto& domains = j.at("domains");
  if (!domains.is_object()) throw ValidationError("manifest.json: domains must be an object");
  for (const auto& [name, concepts] : domains.items()) {
    ConceptDomain d{name, {}};
    try {
      d.concepts = concepts.get<std::vector<std::string>>();
    } catch (const json::exception&) {
      throw ValidationError("manifest.json: domain '" + name + "' must list concept names");
    }
    m.domains.push_back(std::move(d));
  }
  if (j.contains("steered")) {
    const auto& s = j.at("steered");
    m.steered = SteeredTag{required<std::string>(s, "concept", "manifest.json steered"),
                           required<double>(s, "alpha", "manifest.json steered"),
                           required<std::string>(s, "method", "manifest.json steered")};
  }
  return m;
}

inline std::vector<json> parse_jsonl(const std::string& text, const std::string& name) {
  std::vector<json> out;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(json::parse(line));
    } catch (const json::parse_error& e) {
      throw ValidationError(name + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// load

struct LoadOptions {
  bool activations = true;
  bool verify_checksums = true;
};

inline std::vector<RecordKey> parse_index(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ValidationError(std::string("index.json: ") + e.what());
  }
  if (!j.is_array()) throw ValidationError("index.json must be an array");
  std::vector<RecordKey> out;
  out.reserve(j.size());
  for (const auto& e : j) {
    if (!e.is_array() || e.size() != 2 || !e[0].is_string() || !e[1].is_number_integer())
      throw ValidationError("index.json entries must be [story_id, t]");
    out.push_back({e[0].get<std::string>(), e[1].get<int>()});
  }
  return out;
}

inline void verify_checksum(const DatasetManifest& m, const std::string& filename, const std::string& bytes) {
  auto it = m.checksums.find(filename);
  if (it == m.checksums.end()) throw ValidationError("manifest has no checksum for " + filename);
  auto actual = crc32_hex(bytes);
  if (actual != it->second)
    throw ValidationError("checksum mismatch for " + filename + ": manifest " + it->second + ", file " + actual);
}

// Loads one layer tensor; usable on its own for lazy access.
inline ActivationDataset load_layer(const fs::path& root, const DatasetManifest& m, int layer,
                                    const std::vector<RecordKey>& index, bool verify = true) {
  if (!m.has_layer(layer)) throw ValidationError("manifest does not list layer " + std::to_string(layer));
  const auto name = layer_filename(layer);
  const auto bytes = read_file(root / name);
  const auto expected = index.size() * static_cast<std::size_t>(m.hidden_dim) * 4;
  if (bytes.size() != expected)
    throw ValidationError("shape mismatch in " + name + ": " + std::to_string(bytes.size()) + " bytes, expected " +
                          std::to_string(index.size()) + " x " + std::to_string(m.hidden_dim) + " float32 (" +
                          std::to_string(expected) + " bytes)");
  if (verify) verify_checksum(m, name, bytes);
  auto floats = decode_f32(bytes);
  ActivationDataset a;
  a.layer = layer;
  a.index = index;
  a.rows = Eigen::Map<const FloatRows>(floats.data(), static_cast<Eigen::Index>(index.size()), m.hidden_dim);
  a.validate();
  return a;
}

inline std::vector<RecordKey> load_index(const fs::path& root, const DatasetManifest& m, bool verify = true) {
  auto text = read_file(root / "index.json");
  if (verify) verify_checksum(m, "index.json", text);
  return parse_index(text);
}

inline Dataset load_dataset(const fs::path& root, const LoadOptions& opts = {}) {
  Dataset ds;
  json mj;
  try {
    mj = json::parse(read_file(root / "manifest.json"));
  } catch (const json::parse_error& e) {
    throw ValidationError(std::string("manifest.json: ") + e.what());
  }
  ds.manifest = manifest_from_json(mj);
  const auto& m = ds.manifest;

  for (const auto& j : parse_jsonl(read_file(root / "stories.jsonl"), "stories.jsonl")) {
    StoryRecord s;
    s.story_id = required<std::string>(j, "story_id", "stories.jsonl");
    s.sentences = required<std::vector<std::string>>(j, "sentences", "stories.jsonl");
    if (j.contains("style") && !j.at("style").is_null()) s.style = required<std::string>(j, "style", "stories.jsonl");
    ds.stories.push_back(std::move(s));
  }

  auto records = parse_jsonl(read_file(root / "behavior.jsonl"), "behavior.jsonl");
  if (records.empty()) throw ValidationError("no trajectories: behavior.jsonl is empty");

  std::map<std::string, std::size_t> story_pos;
  for (std::size_t i = 0; i < ds.stories.size(); ++i) story_pos.emplace(ds.stories[i].story_id, i);

  // [domain][story] -> trajectory under construction, plus raw presence tracking
  struct Building {
    BeliefTrajectory tr;
    std::vector<bool> seen;
    int raw_rows = 0;
  };
  std::map<std::string, std::vector<Building>> building;
  for (const auto& d : m.domains) {
    auto& v = building[d.name];
    for (const auto& s : ds.stories) {
      Building b;
      b.tr.story_id = s.story_id;
      b.tr.domain = d.name;
      b.tr.values = Matrix::Constant(s.length(), static_cast<Eigen::Index>(d.size()), 0.0);
      b.seen.assign(static_cast<std::size_t>(s.length()), false);
      v.push_back(std::move(b));
    }
  }

  std::set<RecordKey> seen_keys;
  for (const auto& r : records) {
    RecordKey key{required<std::string>(r, "story_id", "behavior.jsonl"), required<int>(r, "t", "behavior.jsonl")};
    auto sp = story_pos.find(key.story_id);
    if (sp == story_pos.end()) throw ValidationError("behavior.jsonl: unknown story_id '" + key.story_id + "'");
    const int length = ds.stories[sp->second].length();
    if (key.t < 1 || key.t > length)
      throw ValidationError("behavior.jsonl: " + to_string(key) + " outside the story's sentences");
    if (!seen_keys.insert(key).second) throw ValidationError("behavior.jsonl: duplicate record " + to_string(key));
    const auto& beliefs = r.contains("beliefs") ? r.at("beliefs") : json();
    if (!beliefs.is_object()) throw ValidationError("behavior.jsonl: record " + to_string(key) + " has no beliefs");
    const json* raw = r.contains("raw") ? &r.at("raw") : nullptr;
    for (const auto& d : m.domains) {
      if (!beliefs.contains(d.name))
        throw ValidationError("behavior.jsonl: record " + to_string(key) + " lacks domain '" + d.name + "'");
      auto& b = building[d.name][sp->second];
      const auto& dom = beliefs.at(d.name);
      const json* draw = (raw && raw->contains(d.name)) ? &raw->at(d.name) : nullptr;
      if (draw) {
        if (!b.tr.raw) b.tr.raw.emplace(static_cast<std::size_t>(length) * d.size());
        ++b.raw_rows;
      }
      for (std::size_t c = 0; c < d.size(); ++c) {
        const auto& concept_name = d.concepts[c];
        if (!dom.contains(concept_name) || !dom.at(concept_name).is_number())
          throw ValidationError("behavior.jsonl: record " + to_string(key) + " lacks '" + d.name + "/" + concept_name + "'");
        b.tr.values(key.t - 1, static_cast<Eigen::Index>(c)) = dom.at(concept_name).get<double>();
        if (draw) {
          if (!draw->contains(concept_name))
            throw ValidationError("behavior.jsonl: raw distribution missing for " + to_string(key) + " '" + concept_name + "'");
          std::vector<double> probs;
          try {
            probs = draw->at(concept_name).get<std::vector<double>>();
          } catch (const json::exception&) {
            throw ValidationError("behavior.jsonl: raw distribution for " + to_string(key) + " is not numeric");
          }
          if (probs.size() != kRatingLevels)
            throw ValidationError("behavior.jsonl: raw distribution for " + to_string(key) + " needs 11 entries");
          double total = 0.0;
          for (double p : probs) {
            if (!std::isfinite(p) || p < 0.0)
              throw ValidationError("behavior.jsonl: non-simplex raw distribution at " + to_string(key));
            total += p;
          }
          if (std::abs(total - 1.0) > elicitation::kSimplexTolerance)
            throw ValidationError("behavior.jsonl: non-simplex raw distribution at " + to_string(key) +
                                  " (sums to " + std::to_string(total) + ")");
          auto& slot = (*b.tr.raw)[static_cast<std::size_t>(key.t - 1) * d.size() + c];
          std::copy(probs.begin(), probs.end(), slot.begin());
        }
      }
      b.seen[static_cast<std::size_t>(key.t - 1)] = true;
    }
  }

  for (auto& [name, v] : building) {
    auto& out = ds.trajectories[name];
    for (auto& b : v) {
      for (std::size_t t = 0; t < b.seen.size(); ++t)
        if (!b.seen[t])
          throw ValidationError("behavior.jsonl: missing record (" + b.tr.story_id + ", t=" + std::to_string(t + 1) + ")");
      if (b.tr.raw && b.raw_rows != b.tr.length())
        throw ValidationError("behavior.jsonl: story '" + b.tr.story_id + "' has raw distributions on only some sentences");
      out.push_back(std::move(b.tr));
    }
  }

  if (opts.activations && !m.layers.empty()) {
    auto index = load_index(root, m, opts.verify_checksums);
    for (int layer : m.layers) ds.activations.push_back(load_layer(root, m, layer, index, opts.verify_checksums));
  } else if (!opts.activations) {
    // Behavior-only view: drop the layer list so the in-memory dataset stays self-consistent.
    ds.manifest.layers.clear();
  }

  validate_dataset(ds);
  return ds;
}

// ---------------------------------------------------------------------------
// write

struct EncodedDataset {
  std::map<std::string, std::string> files; // filename -> bytes
};

inline EncodedDataset encode_dataset(const Dataset& input) {
  validate_dataset(input);
  EncodedDataset out;

  std::string stories;
  for (const auto& s : input.stories) {
    json j = {{"story_id", s.story_id}, {"sentences", s.sentences}};
    if (s.style) j["style"] = *s.style;
    stories += j.dump() + "\n";
  }
  out.files["stories.jsonl"] = std::move(stories);

  std::string behavior;
  for (std::size_t si = 0; si < input.stories.size(); ++si) {
    const auto& story = input.stories[si];
    for (int t = 1; t <= story.length(); ++t) {
      json beliefs = json::object();
      json raw = json::object();
      for (const auto& d : input.manifest.domains) {
        const auto& tr = input.trajectories.at(d.name)[si];
        json dom = json::object();
        json draw = json::object();
        for (std::size_t c = 0; c < d.size(); ++c) {
          dom[d.concepts[c]] = tr.values(t - 1, static_cast<Eigen::Index>(c));
          if (tr.raw) draw[d.concepts[c]] = tr.raw_at(t, c);
        }
        beliefs[d.name] = std::move(dom);
        if (tr.raw) raw[d.name] = std::move(draw);
      }
      json rec = {{"story_id", story.story_id}, {"t", t}, {"beliefs", std::move(beliefs)}};
      if (!raw.empty()) rec["raw"] = std::move(raw);
      behavior += rec.dump() + "\n";
    }
  }
  out.files["behavior.jsonl"] = std::move(behavior);

  DatasetManifest m = input.manifest;
  m.checksums.clear();
  if (!input.activations.empty()) {
    json idx = json::array();
    for (const auto& key : input.activations.front().index) idx.push_back(json::array({key.story_id, key.t}));
    auto text = idx.dump() + "\n";
    m.checksums["index.json"] = crc32_hex(text);
    out.files["index.json"] = std::move(text);
    for (const auto& a : input.activations) {
      auto bytes = encode_f32(a.rows.data(), static_cast<std::size_t>(a.rows.size()));
      auto name = layer_filename(a.layer);
      m.checksums[name] = crc32_hex(bytes);
      out.files[name] = std::move(bytes);
    }
  }
  out.files["manifest.json"] = manifest_to_json(m).dump(2) + "\n";
  return out;
}

// Validates everything before touching the filesystem.
inline void write_dataset(const fs::path& root, const Dataset& ds) {
  auto encoded = encode_dataset(ds);
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec) throw IoError("cannot create " + root.string() + ": " + ec.message());
  for (const auto& [name, bytes] : encoded.files) write_file(root / name, bytes);
}

// Recomputes manifest checksums so an in-memory dataset matches what write_dataset emits.
inline void refresh_checksums(Dataset& ds) {
  auto encoded = encode_dataset(ds);
  ds.manifest.checksums.clear();
  for (const auto& [name, bytes] : encoded.files)
    if (name == "index.json" || name.starts_with("layer_")) ds.manifest.checksums[name] = crc32_hex(bytes);
}

} // namespace cbs::io
