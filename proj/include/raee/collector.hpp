#pragma once

// Profile collection and early-exit inference against any layered predictor.
//
// A LayeredPredictor exposes an embedding step producing the initial hidden
// state, one forward step per layer (called in order 1..l) and a prediction
// head mapping a hidden state to class probabilities. All of them are const:
// collection and inference never modify the model.

#include <algorithm>
#include <concepts>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "raee/detail/binary_io.hpp"
#include "raee/embedding.hpp"
#include "raee/error.hpp"
#include "raee/exitdb.hpp"
#include "raee/knn_index.hpp"
#include "raee/policy.hpp"

namespace raee {

// Model input: an opaque feature payload plus a stable id. Counter-based
// models key their per-example randomness on the id.
struct SampleView {
  std::uint32_t id = 0;
  std::span<const float> features;
};

struct LabeledExample {
  std::uint32_t id = 0;
  std::vector<float> features;
  std::uint32_t label = 0;

  SampleView view() const { return {id, features}; }

  friend bool operator==(const LabeledExample&, const LabeledExample&) = default;
};

template <class State>
struct Embedded {
  State state;      // h_0
  Embedding query;  // embedding-layer output usable as a retrieval key
};

template <class P>
concept LayeredPredictor = requires(const P& p, const SampleView& x,
                                    const typename P::State& s, std::size_t layer) {
  typename P::State;
  { p.num_layers() } -> std::convertible_to<std::size_t>;
  { p.num_classes() } -> std::convertible_to<std::size_t>;
  { p.embed(x) } -> std::same_as<Embedded<typename P::State>>;
  { p.forward_layer(s, layer) } -> std::same_as<typename P::State>;
  { p.predict(s) } -> std::convertible_to<std::vector<double>>;
  { p.hidden_embedding(s) } -> std::same_as<Embedding>;
};

// Where retrieval keys come from: the backbone's hidden state after `layer`
// layers (0 = embedding output), or a caller-supplied encoder.
struct BackboneLayer {
  std::size_t layer = 0;
};

struct ExternalEncoder {
  std::string name;
  std::function<Embedding(const SampleView&)> encode;
};

using EmbeddingSource = std::variant<BackboneLayer, ExternalEncoder>;

inline std::string describe(const EmbeddingSource& source) {
  if (const auto* b = std::get_if<BackboneLayer>(&source)) {
    return "backbone:" + std::to_string(b->layer);
  }
  return "external:" + std::get<ExternalEncoder>(source).name;
}

// Only backbone sources can be named on the command line.
inline EmbeddingSource parse_embedding_source(std::string_view s) {
  constexpr std::string_view prefix = "backbone:";
  if (s == "backbone") return BackboneLayer{0};
  if (s.starts_with(prefix)) {
    return BackboneLayer{detail::parse_number<std::size_t>(s.substr(prefix.size()), "embedding layer")};
  }
  throw usage_error("unknown embedding source \"" + std::string(s) + "\" (expected backbone:L)");
}

inline std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

struct CollectedProfile {
  Embedding key;
  std::vector<ExitRecord> records;
};

namespace detail {

template <LayeredPredictor P>
void check_source(const P& p, const EmbeddingSource& source) {
  if (const auto* b = std::get_if<BackboneLayer>(&source); b && b->layer > p.num_layers()) {
    throw usage_error("embedding layer " + std::to_string(b->layer) + " exceeds num_layers " +
                      std::to_string(p.num_layers()));
  }
}

}  // namespace detail

// Runs every layer once; records (layer, max prob) wherever the layer's
// argmax matches the label. The key is captured in the same pass.
template <LayeredPredictor P>
CollectedProfile collect_profile(const P& p, const LabeledExample& example,
                                 const EmbeddingSource& source) {
  detail::check_source(p, source);
  if (example.label >= p.num_classes()) {
    throw data_error("example " + std::to_string(example.id) + ": label " +
                     std::to_string(example.label) + " out of range");
  }
  const SampleView x = example.view();
  auto [state, key] = p.embed(x);

  const auto* backbone = std::get_if<BackboneLayer>(&source);
  if (!backbone) key = std::get<ExternalEncoder>(source).encode(x);

  std::vector<ExitRecord> records;
  for (std::size_t j = 1; j <= p.num_layers(); ++j) {
    state = p.forward_layer(state, j);
    const std::vector<double> probs = p.predict(state);
    const std::size_t predicted = argmax(probs);
    if (predicted == example.label) {
      records.push_back({static_cast<std::uint16_t>(j), probs[predicted]});
    }
    if (backbone && backbone->layer == j) key = p.hidden_embedding(state);
  }
  return {std::move(key), std::move(records)};
}

// Entry ids follow dataset order.
template <LayeredPredictor P>
ExitDatabase build_database(const P& p, std::span<const LabeledExample> dataset,
                            const EmbeddingSource& source, Metadata metadata = {}) {
  if (dataset.empty()) throw usage_error("cannot build a database from an empty dataset");
  metadata["embedding_source"] = describe(source);

  std::optional<ExitDatabase> db;
  for (const LabeledExample& example : dataset) {
    try {
      CollectedProfile c = collect_profile(p, example, source);
      if (!db) db.emplace(c.key.dim(), p.num_layers(), metadata);
      db->add_entry(std::move(c.key), std::move(c.records));
    } catch (const Error& e) {
      throw Error(e.kind(), "example " + std::to_string(example.id) + ": " + e.what());
    }
  }
  return std::move(*db);
}

struct InferenceResult {
  std::size_t predicted_class = 0;
  ExitDecision decision;
  std::size_t layers_executed = 0;  // forward_layer calls made
};

// Retrieves once, then forwards exactly through the chosen layer. With a
// backbone source at L > 0 the first L layers run to form the query, so the
// layer count is max(L, chosen layer).
template <LayeredPredictor P>
InferenceResult infer_with_exit(const P& p, const FlatIndex& index, const ExitDatabase& db,
                                const SampleView& x, const PolicyConfig& cfg,
                                const EmbeddingSource& source = BackboneLayer{0}) {
  detail::check_source(p, source);
  if (db.num_layers() != p.num_layers()) {
    throw data_error("database has " + std::to_string(db.num_layers()) + " layers, predictor has " +
                     std::to_string(p.num_layers()));
  }
  auto [h0, query] = p.embed(x);

  std::vector<typename P::State> states;
  states.push_back(std::move(h0));
  if (const auto* b = std::get_if<BackboneLayer>(&source)) {
    for (std::size_t j = 1; j <= b->layer; ++j) states.push_back(p.forward_layer(states.back(), j));
    if (b->layer > 0) query = p.hidden_embedding(states.back());
  } else {
    query = std::get<ExternalEncoder>(source).encode(x);
  }

  InferenceResult result;
  result.decision = decide(index, db, query, cfg);
  const std::size_t exit_layer = result.decision.layer;
  for (std::size_t j = states.size(); j <= exit_layer; ++j) {
    states.push_back(p.forward_layer(states.back(), j));
  }
  result.layers_executed = states.size() - 1;
  result.predicted_class = argmax(p.predict(states[exit_layer]));
  return result;
}

// Prediction after exactly `layer` layers.
template <LayeredPredictor P>
std::vector<double> predict_at_layer(const P& p, const SampleView& x, std::size_t layer) {
  auto state = p.embed(x).state;
  for (std::size_t j = 1; j <= layer; ++j) state = p.forward_layer(state, j);
  return p.predict(state);
}

template <LayeredPredictor P>
std::size_t full_model_predict(const P& p, const SampleView& x) {
  return argmax(predict_at_layer(p, x, p.num_layers()));
}

// Dataset file: "RAEEDS01" · u32 n · u32 feature_dim · u32 num_classes ·
// per example: u32 id, feature_dim x f32, u32 label.
inline constexpr char kDatasetMagic[] = "RAEEDS01";

struct Dataset {
  std::size_t feature_dim = 0;
  std::size_t num_classes = 0;
  std::vector<LabeledExample> examples;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

inline std::vector<std::uint8_t> serialize_dataset(const Dataset& ds) {
  detail::ByteWriter w;
  w.put_magic(kDatasetMagic);
  w.put_u32(static_cast<std::uint32_t>(ds.examples.size()));
  w.put_u32(static_cast<std::uint32_t>(ds.feature_dim));
  w.put_u32(static_cast<std::uint32_t>(ds.num_classes));
  for (const LabeledExample& ex : ds.examples) {
    if (ex.features.size() != ds.feature_dim) {
      throw data_error("example " + std::to_string(ex.id) + " has wrong feature count");
    }
    w.put_u32(ex.id);
    for (float f : ex.features) w.put_f32(f);
    w.put_u32(ex.label);
  }
  return w.take();
}

inline Dataset deserialize_dataset(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  r.expect_magic(kDatasetMagic);
  const std::uint32_t n = r.u32("example count");
  Dataset ds;
  ds.feature_dim = r.u32("feature_dim");
  ds.num_classes = r.u32("num_classes");
  if (static_cast<std::uint64_t>(n) * (8 + 4 * ds.feature_dim) > r.remaining()) {
    throw data_error("truncated stream while reading examples");
  }
  ds.examples.resize(n);
  for (LabeledExample& ex : ds.examples) {
    ex.id = r.u32("example id");
    ex.features.resize(ds.feature_dim);
    for (float& f : ex.features) f = r.f32("features");
    ex.label = r.u32("label");
    if (ex.label >= ds.num_classes) {
      throw data_error("example " + std::to_string(ex.id) + ": label out of range");
    }
  }
  if (r.remaining() != 0) throw data_error("trailing bytes after dataset");
  return ds;
}

inline void save_dataset(const Dataset& ds, const std::string& path) {
  detail::write_file(path, serialize_dataset(ds));
}

inline Dataset load_dataset(const std::string& path) {
  const auto bytes = detail::read_file(path);
  try {
    return deserialize_dataset(bytes);
  } catch (const Error& e) {
    throw Error(e.kind(), path + ": " + e.what());
  }
}

// Embedding matrix export: "RAEEEMB1" · u32 n · u32 dim · n x dim f32.
inline constexpr char kEmbeddingMagic[] = "RAEEEMB1";

inline std::vector<std::uint8_t> serialize_embeddings(std::span<const Embedding> rows) {
  detail::ByteWriter w;
  w.put_magic(kEmbeddingMagic);
  const std::size_t dim = rows.empty() ? 0 : rows.front().dim();
  w.put_u32(static_cast<std::uint32_t>(rows.size()));
  w.put_u32(static_cast<std::uint32_t>(dim));
  for (const Embedding& e : rows) {
    if (e.dim() != dim) throw data_error("embedding export: inconsistent dims");
    for (float x : e.values()) w.put_f32(x);
  }
  return w.take();
}

inline std::vector<Embedding> deserialize_embeddings(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  r.expect_magic(kEmbeddingMagic);
  const std::uint32_t n = r.u32("row count");
  const std::uint32_t dim = r.u32("dim");
  if (static_cast<std::uint64_t>(n) * dim * 4 != r.remaining()) {
    throw data_error("embedding matrix size does not match header");
  }
  std::vector<Embedding> rows;
  rows.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    std::vector<float> v(dim);
    for (float& x : v) x = r.f32("embeddings");
    rows.emplace_back(std::move(v));
  }
  return rows;
}

}  // namespace raee
