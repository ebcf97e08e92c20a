#pragma once

// Retrieval-augmented exit-layer selection.
//
// Given the k nearest database entries to a query, every neighbor i gets the
// weight w_i = min_j d_j / d_i, with distances clamped below at epsilon. The
// exit mass at layer l is
//
//   mass[l] = sum_i w_i * p_i(l) * [p_i(l) >= tau]
//
// where p_i(l) is neighbor i's stored confidence at layer l (absent -> 0).
// The chosen layer is the earliest argmax of the mass. When every entry is
// zero the configured fallback layer is used, which defaults to the last one.
//
// The mass is left unnormalized; the weights do not sum to one and the argmax
// does not depend on a common scale.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "raee/detail/kv_config.hpp"
#include "raee/error.hpp"
#include "raee/exitdb.hpp"
#include "raee/knn_index.hpp"

namespace raee {

struct PolicyConfig {
  std::size_t k = 12;
  double tau = 0.9;
  double epsilon = 1e-12;
  Metric metric = Metric::kSquaredL2;
  // Layer used when the mass is all zero. Empty means the final layer.
  std::optional<std::size_t> fallback_layer;

  // tau may exceed 1, which filters every record and forces the fallback.
  void validate() const {
    if (k < 1) throw usage_error("k must be >= 1");
    if (!(tau >= 0.0) || !std::isfinite(tau)) throw usage_error("tau must be finite and >= 0");
    if (!(epsilon > 0.0) || !std::isfinite(epsilon)) {
      throw usage_error("epsilon must be finite and > 0");
    }
    if (fallback_layer && *fallback_layer < 1) throw usage_error("fallback_layer must be >= 1");
  }

  std::size_t resolve_fallback(std::size_t num_layers) const {
    if (!fallback_layer) return num_layers;
    if (*fallback_layer > num_layers) {
      throw usage_error("fallback_layer " + std::to_string(*fallback_layer) +
                        " exceeds num_layers " + std::to_string(num_layers));
    }
    return *fallback_layer;
  }
};

inline std::optional<std::size_t> parse_fallback(std::string_view s) {
  s = detail::trim(s);
  if (s == "final") return std::nullopt;
  const auto layer = detail::parse_number<std::size_t>(s, "fallback_layer");
  if (layer < 1) throw usage_error("fallback_layer must be >= 1 or \"final\"");
  return layer;
}

// Reads `k`, `tau`, `epsilon`, `metric` and `fallback_layer` from flat
// key = value text. Missing keys keep their defaults; unknown keys are errors.
inline PolicyConfig parse_policy_config(std::string_view text, const std::string& source = "config") {
  PolicyConfig cfg;
  for (const auto& [key, value] : detail::parse_kv(text, source)) {
    if (key == "k") {
      cfg.k = detail::parse_number<std::size_t>(value, "k");
    } else if (key == "tau") {
      cfg.tau = detail::parse_number<double>(value, "tau");
    } else if (key == "epsilon") {
      cfg.epsilon = detail::parse_number<double>(value, "epsilon");
    } else if (key == "metric") {
      cfg.metric = parse_metric(value);
    } else if (key == "fallback_layer") {
      cfg.fallback_layer = parse_fallback(value);
    } else {
      throw usage_error(source + ": unknown policy key \"" + key + "\"");
    }
  }
  cfg.validate();
  return cfg;
}

inline PolicyConfig load_policy_config(const std::string& path) {
  return parse_policy_config(detail::read_text_file(path), path);
}

struct MassVector {
  std::vector<double> values;  // index l-1 holds layer l

  std::size_t size() const { return values.size(); }
  double operator[](std::size_t i) const { return values[i]; }

  friend bool operator==(const MassVector&, const MassVector&) = default;
};

struct LayerChoice {
  std::size_t layer = 0;
  bool fallback_used = false;

  friend bool operator==(const LayerChoice&, const LayerChoice&) = default;
};

struct ExitDecision {
  std::size_t layer = 0;
  MassVector mass;
  std::vector<NeighborHit> hits;
  bool fallback_used = false;

  friend bool operator==(const ExitDecision&, const ExitDecision&) = default;
};

inline std::vector<double> neighbor_weights(std::span<const NeighborHit> hits, double epsilon) {
  if (hits.empty()) throw usage_error("neighbor_weights needs at least one hit");
  if (!(epsilon > 0.0)) throw usage_error("epsilon must be > 0");
  std::vector<double> clamped;
  clamped.reserve(hits.size());
  for (const NeighborHit& h : hits) {
    if (!(h.distance >= 0.0) || !std::isfinite(h.distance)) {
      throw data_error("neighbor distance must be finite and non-negative");
    }
    clamped.push_back(std::max(h.distance, epsilon));
  }
  const double nearest = *std::min_element(clamped.begin(), clamped.end());
  for (double& d : clamped) d = nearest / d;
  return clamped;
}

// Profiles are passed by pointer so callers can hand over database entries
// without copying them.
inline MassVector exit_mass(std::span<const ExitProfile* const> profiles,
                            std::span<const double> weights, double tau, std::size_t num_layers) {
  if (profiles.size() != weights.size()) {
    throw usage_error("exit_mass: " + std::to_string(profiles.size()) + " profiles but " +
                      std::to_string(weights.size()) + " weights");
  }
  MassVector mass{std::vector<double>(num_layers, 0.0)};
  for (std::size_t i = 0; i < profiles.size(); ++i) {
    for (const ExitRecord& r : profiles[i]->records) {
      if (r.layer < 1 || r.layer > num_layers) {
        throw data_error("exit_mass: record layer " + std::to_string(r.layer) + " out of range");
      }
      if (r.prob >= tau) mass.values[r.layer - 1] += weights[i] * r.prob;
    }
  }
  return mass;
}

inline MassVector exit_mass(std::span<const ExitProfile> profiles, std::span<const double> weights,
                            double tau, std::size_t num_layers) {
  std::vector<const ExitProfile*> ptrs;
  ptrs.reserve(profiles.size());
  for (const ExitProfile& p : profiles) ptrs.push_back(&p);
  return exit_mass(std::span<const ExitProfile* const>(ptrs), weights, tau, num_layers);
}

inline LayerChoice select_exit_layer(const MassVector& mass, std::size_t fallback_layer) {
  std::size_t best = 0;
  double best_mass = 0.0;
  for (std::size_t l = 0; l < mass.size(); ++l) {
    // Strict comparison keeps the earliest layer among equal maxima.
    if (mass[l] > best_mass) {
      best_mass = mass[l];
      best = l + 1;
    }
  }
  if (best == 0) return {fallback_layer, true};
  return {best, false};
}

inline ExitDecision decide(const FlatIndex& index, const ExitDatabase& db, const Embedding& query,
                           const PolicyConfig& cfg) {
  cfg.validate();
  if (index.size() != db.size() || index.dim() != db.dim()) {
    throw invariant_error("index does not match database (index n=" + std::to_string(index.size()) +
                          ", db n=" + std::to_string(db.size()) + ")");
  }
  const std::size_t fallback = cfg.resolve_fallback(db.num_layers());

  ExitDecision decision;
  decision.hits = index.query(query, cfg.k);
  const std::vector<double> weights = neighbor_weights(decision.hits, cfg.epsilon);

  std::vector<const ExitProfile*> profiles;
  profiles.reserve(decision.hits.size());
  for (const NeighborHit& h : decision.hits) profiles.push_back(&db.profile(h.entry_id));

  decision.mass = exit_mass(std::span<const ExitProfile* const>(profiles), weights, cfg.tau,
                            db.num_layers());
  const LayerChoice choice = select_exit_layer(decision.mass, fallback);
  decision.layer = choice.layer;
  decision.fallback_used = choice.fallback_used;
  return decision;
}

}  // namespace raee
