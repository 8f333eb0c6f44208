#pragma once

#include <cmath>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "cbs/core/types.hpp"

// Belief elicitation: aggregating 0..10 rating distributions into beliefs in [0,1].
namespace cbs::elicitation {

inline constexpr double kSimplexTolerance = 1e-6;

// p(y = i | x_{1:t}, q_c) over the 11 integer ratings.
class RatingDistribution {
public:
  RatingDistribution() = default;

  // Accepts an already-normalized vector; throws if it is off the simplex.
  static RatingDistribution from_probs(std::span<const double> probs) {
    check_mass(probs);
    double total = std::accumulate(probs.begin(), probs.end(), 0.0);
    if (std::abs(total - 1.0) > kSimplexTolerance)
      throw ValidationError("rating distribution sums to " + std::to_string(total) + ", not 1");
    RatingDistribution d;
    std::copy(probs.begin(), probs.end(), d.probs_.begin());
    return d;
  }

  const Rating11& probs() const { return probs_; }
  double operator[](int i) const { return probs_[static_cast<std::size_t>(i)]; }

  static void check_mass(std::span<const double> mass) {
    if (mass.size() != kRatingLevels)
      throw ValidationError("rating distribution needs 11 entries, got " + std::to_string(mass.size()));
    bool any_positive = false;
    for (double p : mass) {
      if (!std::isfinite(p)) throw ValidationError("rating distribution has a non-finite entry");
      if (p < 0.0) throw ValidationError("rating distribution has a negative probability");
      any_positive = any_positive || p > 0.0;
    }
    if (!any_positive) throw ValidationError("rating distribution is all zero");
  }

private:
  Rating11 probs_{};
};

enum class TemplateId { emotion, genre, arbitrary };

inline TemplateId parse_template_id(const std::string& s) {
  if (s == "emotion") return TemplateId::emotion;
  if (s == "genre") return TemplateId::genre;
  if (s == "arbitrary") return TemplateId::arbitrary;
  throw ValidationError("unknown query template '" + s + "' (expected emotion|genre|arbitrary)");
}

inline const char* to_string(TemplateId id) {
  switch (id) {
    case TemplateId::emotion: return "emotion";
    case TemplateId::genre: return "genre";
    case TemplateId::arbitrary: return "arbitrary";
  }
  return "?";
}

struct QuerySpec {
  std::string domain;
  std::string concept_name;
  TemplateId template_id = TemplateId::emotion;
};

// y = (1/10) * sum_i i * p_i
inline double expected_rating(const RatingDistribution& dist) {
  double acc = 0.0;
  for (int i = 0; i < kRatingLevels; ++i) acc += i * dist[i];
  return acc / 10.0;
}

inline double expected_rating(std::span<const double> probs) {
  return expected_rating(RatingDistribution::from_probs(probs));
}

// Rescales token mass over the 11 rating tokens onto the simplex.
inline RatingDistribution renormalize(std::span<const double> raw_mass) {
  RatingDistribution::check_mass(raw_mass);
  double total = std::accumulate(raw_mass.begin(), raw_mass.end(), 0.0);
  Rating11 p{};
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = raw_mass[i] / total;
  return RatingDistribution::from_probs(p);
}

struct CellDistribution {
  int t = 0;
  std::string concept_name;
  RatingDistribution dist;
};

// Builds y_{1:T} for one story; every (t, concept) cell must appear exactly once.
inline BeliefTrajectory assemble_trajectory(const std::string& story_id, const ConceptDomain& domain,
                                            int length, std::span<const CellDistribution> cells) {
  if (length < 1) throw ValidationError("story '" + story_id + "' must have at least one sentence");
  const auto k = domain.size();
  std::vector<std::optional<RatingDistribution>> grid(static_cast<std::size_t>(length) * k);
  for (const auto& cell : cells) {
    if (cell.t < 1 || cell.t > length)
      throw ValidationError("story '" + story_id + "': sentence index " + std::to_string(cell.t) +
                            " outside 1.." + std::to_string(length));
    auto c = domain.index_of(cell.concept_name);
    auto& slot = grid[static_cast<std::size_t>(cell.t - 1) * k + c];
    if (slot)
      throw ValidationError("story '" + story_id + "': duplicate cell (t=" + std::to_string(cell.t) +
                            ", concept=" + cell.concept_name + ")");
    slot = cell.dist;
  }

  BeliefTrajectory out;
  out.story_id = story_id;
  out.domain = domain.name;
  out.values.resize(length, static_cast<Eigen::Index>(k));
  out.raw.emplace(grid.size());
  for (int t = 1; t <= length; ++t) {
    for (std::size_t c = 0; c < k; ++c) {
      const auto& slot = grid[static_cast<std::size_t>(t - 1) * k + c];
      if (!slot)
        throw ValidationError("story '" + story_id + "': missing cell (t=" + std::to_string(t) +
                              ", concept=" + domain.concepts[c] + ")");
      out.values(t - 1, static_cast<Eigen::Index>(c)) = expected_rating(*slot);
      (*out.raw)[static_cast<std::size_t>(t - 1) * k + c] = slot->probs();
    }
  }
  return out;
}

} // namespace cbs::elicitation
