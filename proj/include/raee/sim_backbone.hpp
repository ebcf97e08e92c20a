#pragma once

// Deterministic synthetic layered classifiers for desk-scale evaluation.
//
// Inputs live around cluster centers; cluster c belongs to class
// c % num_classes. Layer j emits logits
//
//   logit_k = -gain * min_{c in class k} |x - center_c|^2 / feature_dim
//             + layer_noise[j] * N(seed, example id, j, k)
//             + cluster_drift[j] * N(seed, nearest cluster of x, j, k)
//
// where N(...) is a standard normal drawn from a counter-based generator, so
// every output is a pure function of (spec, input) regardless of call order
// or thread. The drift term is shared by every input of a cluster, which
// makes similar inputs fail at the same layers.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "raee/collector.hpp"
#include "raee/detail/kv_config.hpp"
#include "raee/embedding.hpp"
#include "raee/error.hpp"
#include "raee/exitdb.hpp"

namespace raee {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t counter_hash(std::initializer_list<std::uint64_t> words) {
  std::uint64_t h = 0x243f6a8885a308d3ULL;
  for (std::uint64_t w : words) h = splitmix64(h ^ splitmix64(w));
  return h;
}

// Uniform in (0, 1), never exactly 0.
inline double unit_uniform(std::uint64_t bits) {
  return (static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-53;
}

// Box-Muller on two independent hashes of the same counter.
inline double counter_normal(std::initializer_list<std::uint64_t> words) {
  const std::uint64_t h = counter_hash(words);
  const double u1 = unit_uniform(h);
  const double u2 = unit_uniform(splitmix64(h ^ 0x5851f42d4c957f2dULL));
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

// Stream tags keep the different uses of the generator independent.
enum : std::uint64_t {
  kTagCenter = 1,
  kTagLayerNoise = 2,
  kTagDrift = 3,
  kTagCluster = 4,
  kTagFeature = 5,
};

}  // namespace detail

struct SyntheticModelSpec {
  std::size_t m = 0;
  std::size_t num_classes = 2;
  std::size_t feature_dim = 0;
  std::vector<std::vector<float>> cluster_centers;
  std::vector<double> layer_noise;    // per-example noise scale per layer
  std::vector<double> cluster_drift;  // per-cluster shared bias scale; empty = none
  double spread = 0.5;                // within-cluster std used by the dataset generator
  double separation = 3.0;            // std of generated centers
  double gain = 1.0;
  std::uint64_t seed = 0;

  std::size_t num_clusters() const { return cluster_centers.size(); }
  std::size_t cluster_class(std::size_t cluster) const { return cluster % num_classes; }

  void validate() const {
    if (m < 1) throw data_error("spec: m must be >= 1");
    if (num_classes < 2) throw data_error("spec: num_classes must be >= 2");
    if (feature_dim < 1) throw data_error("spec: feature_dim must be >= 1");
    if (cluster_centers.empty()) throw data_error("spec: need at least one cluster");
    for (const auto& c : cluster_centers) {
      if (c.size() != feature_dim) throw data_error("spec: cluster center has wrong dimension");
      for (float x : c) {
        if (!std::isfinite(x)) throw data_error("spec: cluster center is not finite");
      }
    }
    if (layer_noise.size() != m) {
      throw data_error("spec: noise schedule has " + std::to_string(layer_noise.size()) +
                       " entries, expected m = " + std::to_string(m));
    }
    if (!cluster_drift.empty() && cluster_drift.size() != m) {
      throw data_error("spec: drift schedule must be empty or have m entries");
    }
    auto bad = [](double v) { return !(v >= 0.0) || !std::isfinite(v); };
    if (std::any_of(layer_noise.begin(), layer_noise.end(), bad) ||
        std::any_of(cluster_drift.begin(), cluster_drift.end(), bad)) {
      throw data_error("spec: noise and drift scales must be finite and >= 0");
    }
    if (bad(spread) || bad(gain) || bad(separation)) {
      throw data_error("spec: spread, gain and separation must be finite and >= 0");
    }
  }
};

inline std::vector<std::vector<float>> generate_centers(std::size_t num_clusters,
                                                        std::size_t feature_dim, double separation,
                                                        std::uint64_t seed) {
  std::vector<std::vector<float>> centers(num_clusters, std::vector<float>(feature_dim));
  for (std::size_t c = 0; c < num_clusters; ++c) {
    for (std::size_t d = 0; d < feature_dim; ++d) {
      centers[c][d] = static_cast<float>(
          separation * detail::counter_normal({seed, detail::kTagCenter, c, d}));
    }
  }
  return centers;
}

// Spec file keys: m, num_classes, feature_dim, num_clusters, noise (comma
// list, one per layer), seed. Optional: drift (comma list), spread,
// separation, gain. Centers are generated from seed and separation.
inline SyntheticModelSpec parse_model_spec(std::string_view text, const std::string& source = "spec") {
  const auto kv = detail::parse_kv(text, source);
  auto required = [&](const char* key) -> const std::string& {
    const auto it = kv.find(key);
    if (it == kv.end()) throw data_error(source + ": missing key \"" + key + "\"");
    return it->second;
  };
  static const std::vector<std::string> known = {
      "m", "num_classes", "feature_dim", "num_clusters", "noise",
      "seed", "drift", "spread", "separation", "gain"};
  for (const auto& [key, _] : kv) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw data_error(source + ": unknown key \"" + key + "\"");
    }
  }

  SyntheticModelSpec spec;
  spec.m = detail::parse_number<std::size_t>(required("m"), "m");
  spec.num_classes = detail::parse_number<std::size_t>(required("num_classes"), "num_classes");
  spec.feature_dim = detail::parse_number<std::size_t>(required("feature_dim"), "feature_dim");
  const auto num_clusters = detail::parse_number<std::size_t>(required("num_clusters"), "num_clusters");
  spec.layer_noise = detail::parse_list<double>(required("noise"), "noise");
  spec.seed = detail::parse_number<std::uint64_t>(required("seed"), "seed");
  if (auto it = kv.find("drift"); it != kv.end()) {
    spec.cluster_drift = detail::parse_list<double>(it->second, "drift");
  }
  if (auto it = kv.find("spread"); it != kv.end()) {
    spec.spread = detail::parse_number<double>(it->second, "spread");
  }
  if (auto it = kv.find("separation"); it != kv.end()) {
    spec.separation = detail::parse_number<double>(it->second, "separation");
  }
  if (auto it = kv.find("gain"); it != kv.end()) {
    spec.gain = detail::parse_number<double>(it->second, "gain");
  }
  if (num_clusters < 1) throw data_error(source + ": num_clusters must be >= 1");
  spec.cluster_centers = generate_centers(num_clusters, spec.feature_dim, spec.separation, spec.seed);
  spec.validate();
  return spec;
}

inline SyntheticModelSpec load_model_spec(const std::string& path) {
  return parse_model_spec(detail::read_text_file(path), path);
}

// Canonical spec text; parse_model_spec(format_model_spec(s)) reproduces s
// whenever s's centers were generated from its seed.
inline std::string format_model_spec(const SyntheticModelSpec& spec) {
  auto list = [](const std::vector<double>& v) {
    std::ostringstream ss;
    ss.precision(17);
    for (std::size_t i = 0; i < v.size(); ++i) ss << (i ? "," : "") << v[i];
    return ss.str();
  };
  std::ostringstream ss;
  ss.precision(17);
  ss << "m = " << spec.m << "\n"
     << "num_classes = " << spec.num_classes << "\n"
     << "feature_dim = " << spec.feature_dim << "\n"
     << "num_clusters = " << spec.num_clusters() << "\n"
     << "noise = " << list(spec.layer_noise) << "\n";
  if (!spec.cluster_drift.empty()) ss << "drift = " << list(spec.cluster_drift) << "\n";
  ss << "spread = " << spec.spread << "\n"
     << "separation = " << spec.separation << "\n"
     << "gain = " << spec.gain << "\n"
     << "seed = " << spec.seed << "\n";
  return ss.str();
}

class SyntheticPredictor {
 public:
  struct State {
    std::uint32_t id = 0;
    std::vector<float> features;
    std::size_t layer = 0;
    std::vector<double> logits;  // empty at layer 0
  };

  explicit SyntheticPredictor(SyntheticModelSpec spec) : spec_(std::move(spec)) { spec_.validate(); }

  std::size_t num_layers() const { return spec_.m; }
  std::size_t num_classes() const { return spec_.num_classes; }
  const SyntheticModelSpec& spec() const { return spec_; }

  Embedded<State> embed(const SampleView& x) const {
    if (x.features.size() != spec_.feature_dim) {
      throw data_error("input " + std::to_string(x.id) + " has " + std::to_string(x.features.size()) +
                       " features, expected " + std::to_string(spec_.feature_dim));
    }
    std::vector<float> f(x.features.begin(), x.features.end());
    Embedding query(f);
    return {State{x.id, std::move(f), 0, {}}, std::move(query)};
  }

  State forward_layer(const State& s, std::size_t layer) const {
    if (layer != s.layer + 1 || layer > spec_.m) {
      throw invariant_error("forward_layer(" + std::to_string(layer) + ") called on state at layer " +
                            std::to_string(s.layer));
    }
    State next{s.id, s.features, layer, std::vector<double>(spec_.num_classes)};

    std::vector<double> best(spec_.num_classes, std::numeric_limits<double>::infinity());
    std::size_t nearest = 0;
    double nearest_dist = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < spec_.num_clusters(); ++c) {
      const double d = detail::squared_l2(s.features, spec_.cluster_centers[c]) /
                       static_cast<double>(spec_.feature_dim);
      const std::size_t k = spec_.cluster_class(c);
      best[k] = std::min(best[k], d);
      if (d < nearest_dist) {
        nearest_dist = d;
        nearest = c;
      }
    }

    const double noise = spec_.layer_noise[layer - 1];
    const double drift = spec_.cluster_drift.empty() ? 0.0 : spec_.cluster_drift[layer - 1];
    for (std::size_t k = 0; k < spec_.num_classes; ++k) {
      // Classes without any cluster sit far below every populated class.
      double logit = std::isfinite(best[k]) ? -spec_.gain * best[k] : -1e6;
      if (noise > 0.0) {
        logit += noise * detail::counter_normal({spec_.seed, detail::kTagLayerNoise, s.id, layer, k});
      }
      if (drift > 0.0) {
        logit += drift * detail::counter_normal({spec_.seed, detail::kTagDrift, nearest, layer, k});
      }
      next.logits[k] = logit;
    }
    return next;
  }

  std::vector<double> predict(const State& s) const {
    if (s.layer == 0) throw invariant_error("predict called before any layer ran");
    const double top = *std::max_element(s.logits.begin(), s.logits.end());
    std::vector<double> p(s.logits.size());
    double sum = 0.0;
    for (std::size_t k = 0; k < p.size(); ++k) {
      p[k] = std::exp(s.logits[k] - top);
      sum += p[k];
    }
    for (double& v : p) v /= sum;
    return p;
  }

  // Layer 0 exposes the raw features; deeper layers expose their logits.
  Embedding hidden_embedding(const State& s) const {
    if (s.layer == 0) return Embedding(s.features);
    return Embedding(std::vector<float>(s.logits.begin(), s.logits.end()));
  }

  // Hash of every model parameter; equal before and after any use.
  std::uint64_t fingerprint() const {
    detail::ByteWriter w;
    w.put_u64(spec_.m);
    w.put_u64(spec_.num_classes);
    w.put_u64(spec_.feature_dim);
    for (const auto& c : spec_.cluster_centers) {
      for (float x : c) w.put_f32(x);
    }
    for (double v : spec_.layer_noise) w.put_u64(std::bit_cast<std::uint64_t>(v));
    for (double v : spec_.cluster_drift) w.put_u64(std::bit_cast<std::uint64_t>(v));
    w.put_u64(std::bit_cast<std::uint64_t>(spec_.gain));
    w.put_u64(spec_.seed);
    return detail::fnv1a64(w.bytes());
  }

 private:
  SyntheticModelSpec spec_;
};

static_assert(LayeredPredictor<SyntheticPredictor>);

inline SyntheticPredictor make_synthetic_predictor(SyntheticModelSpec spec) {
  return SyntheticPredictor(std::move(spec));
}

// Examples drawn around uniformly chosen cluster centers with std
// spec.spread. Ids run from first_id upward.
inline std::vector<LabeledExample> make_clustered_dataset(const SyntheticModelSpec& spec, std::size_t n,
                                                          std::uint64_t seed, std::uint32_t first_id = 0) {
  spec.validate();
  if (n < 1) throw usage_error("dataset size must be >= 1");
  std::vector<LabeledExample> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint32_t id = first_id + static_cast<std::uint32_t>(i);
    const std::uint64_t bits = detail::counter_hash({seed, detail::kTagCluster, id});
    const std::size_t cluster = static_cast<std::size_t>(bits % spec.num_clusters());
    const auto& center = spec.cluster_centers[cluster];
    LabeledExample& ex = out[i];
    ex.id = id;
    ex.label = static_cast<std::uint32_t>(spec.cluster_class(cluster));
    ex.features.resize(spec.feature_dim);
    for (std::size_t d = 0; d < spec.feature_dim; ++d) {
      const double z = spec.spread > 0.0
                           ? spec.spread * detail::counter_normal({seed, detail::kTagFeature, id, d})
                           : 0.0;
      ex.features[d] = static_cast<float>(center[d] + z);
    }
  }
  return out;
}

inline Dataset make_dataset_file(const SyntheticModelSpec& spec, std::vector<LabeledExample> examples) {
  return Dataset{spec.feature_dim, spec.num_classes, std::move(examples)};
}

inline double entropy_nats(std::span<const double> probs) {
  double h = 0.0;
  for (double p : probs) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

struct BaselineResult {
  std::size_t predicted_class = 0;
  std::size_t exit_layer = 0;
};

// Exits at the first layer whose predictive entropy is <= threshold.
template <LayeredPredictor P>
BaselineResult entropy_exit_baseline(const P& p, const SampleView& x, double threshold) {
  if (!(threshold >= 0.0)) throw usage_error("entropy threshold must be >= 0");
  auto state = p.embed(x).state;
  std::vector<double> probs;
  for (std::size_t j = 1; j <= p.num_layers(); ++j) {
    state = p.forward_layer(state, j);
    probs = p.predict(state);
    if (entropy_nats(probs) <= threshold) return {argmax(probs), j};
  }
  return {argmax(probs), p.num_layers()};
}

struct CorrectRatioReport {
  std::size_t n_final_wrong = 0;
  std::size_t n_recoverable = 0;  // final layer wrong, some earlier layer right
  double ratio = 0.0;
};

struct OracleExitMetrics {
  CorrectRatioReport report;
  std::vector<std::vector<std::size_t>> correct_layers;  // per example, ascending
  std::vector<std::size_t> per_layer_correct;            // index l-1 holds layer l
  std::size_t n_full_correct = 0;
  double mean_earliest_correct = 0.0;  // over examples with at least one correct layer
};

template <LayeredPredictor P>
OracleExitMetrics oracle_exit_metrics(const P& p, std::span<const LabeledExample> dataset) {
  const std::size_t m = p.num_layers();
  OracleExitMetrics out;
  out.per_layer_correct.assign(m, 0);
  out.correct_layers.reserve(dataset.size());
  std::size_t earliest_sum = 0;
  std::size_t with_any = 0;

  for (const LabeledExample& ex : dataset) {
    std::vector<std::size_t> layers;
    auto state = p.embed(ex.view()).state;
    for (std::size_t j = 1; j <= m; ++j) {
      state = p.forward_layer(state, j);
      if (argmax(p.predict(state)) == ex.label) layers.push_back(j);
    }
    for (std::size_t l : layers) ++out.per_layer_correct[l - 1];

    const bool final_correct = !layers.empty() && layers.back() == m;
    if (final_correct) {
      ++out.n_full_correct;
    } else {
      ++out.report.n_final_wrong;
      if (!layers.empty()) ++out.report.n_recoverable;
    }
    if (!layers.empty()) {
      earliest_sum += layers.front();
      ++with_any;
    }
    out.correct_layers.push_back(std::move(layers));
  }

  out.report.ratio = static_cast<double>(out.report.n_recoverable) /
                     static_cast<double>(std::max<std::size_t>(out.report.n_final_wrong, 1));
  if (with_any > 0) {
    out.mean_earliest_correct = static_cast<double>(earliest_sum) / static_cast<double>(with_any);
  }
  return out;
}

}  // namespace raee
