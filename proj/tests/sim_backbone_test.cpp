#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "raee/sim_backbone.hpp"
#include "test_predictors.hpp"

using namespace raee;

namespace {

SyntheticModelSpec spec_with_noise(std::vector<double> noise, std::uint64_t seed = 1) {
  SyntheticModelSpec s;
  s.m = noise.size();
  s.num_classes = 3;
  s.feature_dim = 6;
  s.layer_noise = std::move(noise);
  s.spread = 0.8;
  s.separation = 2.0;
  s.gain = 2.0;
  s.seed = seed;
  s.cluster_centers = generate_centers(6, s.feature_dim, s.separation, seed);
  return s;
}

double layer_accuracy(const SyntheticPredictor& p, std::span<const LabeledExample> data, std::size_t layer) {
  std::size_t hits = 0;
  for (const auto& ex : data) hits += argmax(predict_at_layer(p, ex.view(), layer)) == ex.label;
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

}  // namespace

TEST(SyntheticPredictorTest, NoiselessCentersPredictTheirClass) {
  const auto spec = spec_with_noise({0, 0, 0, 0});
  const SyntheticPredictor p(spec);
  for (std::size_t c = 0; c < spec.num_clusters(); ++c) {
    const SampleView x{static_cast<std::uint32_t>(c), spec.cluster_centers[c]};
    for (std::size_t l = 1; l <= spec.m; ++l) {
      const auto probs = predict_at_layer(p, x, l);
      EXPECT_EQ(argmax(probs), spec.cluster_class(c));
      EXPECT_GT(probs[argmax(probs)], 1.0 / static_cast<double>(spec.num_classes));
    }
  }
}

TEST(SyntheticPredictorTest, BitIdenticalAcrossCalls) {
  const SyntheticPredictor p(spec_with_noise({5, 3, 1, 0}));
  const SyntheticPredictor q(spec_with_noise({5, 3, 1, 0}));
  const auto data = make_clustered_dataset(p.spec(), 30, 9);
  for (const auto& ex : data) {
    auto a = p.embed(ex.view()).state;
    auto b = q.embed(ex.view()).state;
    for (std::size_t l = 1; l <= 4; ++l) {
      a = p.forward_layer(a, l);
      b = q.forward_layer(b, l);
      EXPECT_EQ(a.logits, b.logits);
    }
  }
}

TEST(SyntheticPredictorTest, OutputsAreDistributions) {
  const SyntheticPredictor p(spec_with_noise({20, 5, 0}));
  for (const auto& ex : make_clustered_dataset(p.spec(), 50, 3)) {
    for (std::size_t l = 1; l <= 3; ++l) {
      const auto probs = predict_at_layer(p, ex.view(), l);
      ASSERT_EQ(probs.size(), 3u);
      EXPECT_NEAR(std::accumulate(probs.begin(), probs.end(), 0.0), 1.0, 1e-6);
    }
  }
}

TEST(SyntheticPredictorTest, NoisyFirstLayerIsLessAccurate) {
  const auto spec = spec_with_noise({10, 5, 2, 0}, 77);
  const SyntheticPredictor p(spec);
  const auto data = make_clustered_dataset(spec, 500, 13);
  EXPECT_LT(layer_accuracy(p, data, 1), layer_accuracy(p, data, 4));
}

TEST(SyntheticPredictorTest, FullModelBeatsEverySingleLayerInMonotoneRegime) {
  const auto spec = spec_with_noise({12, 8, 4, 2, 1, 0}, 5);
  const SyntheticPredictor p(spec);
  const auto data = make_clustered_dataset(spec, 600, 21);
  const double full = layer_accuracy(p, data, spec.m);
  for (std::size_t l = 1; l < spec.m; ++l) EXPECT_GE(full, layer_accuracy(p, data, l) - 0.02) << "layer " << l;
}

TEST(SyntheticPredictorTest, ForwardLayerMustRunInOrder) {
  const SyntheticPredictor p(spec_with_noise({1, 1, 1}));
  const auto ex = make_clustered_dataset(p.spec(), 1, 1).front();
  const auto h0 = p.embed(ex.view()).state;
  EXPECT_THROW(p.forward_layer(h0, 2), Error);
  EXPECT_THROW(p.predict(h0), Error);
  const auto h1 = p.forward_layer(h0, 1);
  EXPECT_THROW(p.forward_layer(h1, 1), Error);
}

TEST(SyntheticPredictorTest, RejectsInvalidSpecs) {
  auto s = spec_with_noise({1, 1});
  s.layer_noise = {1};
  EXPECT_THROW(SyntheticPredictor{s}, Error);
  s = spec_with_noise({1, 1});
  s.num_classes = 1;
  EXPECT_THROW(SyntheticPredictor{s}, Error);
  s = spec_with_noise({1, -1});
  EXPECT_THROW(SyntheticPredictor{s}, Error);
  s = spec_with_noise({1, 1});
  s.cluster_centers[0].pop_back();
  EXPECT_THROW(SyntheticPredictor{s}, Error);
}

TEST(ClusteredDatasetTest, SizeAndLabels) {
  auto spec = spec_with_noise({1});
  spec.num_classes = 2;
  spec.cluster_centers = generate_centers(2, spec.feature_dim, 2.0, 1);
  const auto data = make_clustered_dataset(spec, 10, 4);
  ASSERT_EQ(data.size(), 10u);
  for (const auto& ex : data) EXPECT_LT(ex.label, 2u);
}

TEST(ClusteredDatasetTest, ZeroSpreadSitsOnCenters) {
  auto spec = spec_with_noise({1});
  spec.spread = 0.0;
  for (const auto& ex : make_clustered_dataset(spec, 40, 4)) {
    const bool on_center = std::any_of(spec.cluster_centers.begin(), spec.cluster_centers.end(),
                                       [&](const auto& c) { return c == ex.features; });
    EXPECT_TRUE(on_center);
  }
}

TEST(ClusteredDatasetTest, SeededAndIdOffset) {
  const auto spec = spec_with_noise({1});
  EXPECT_EQ(make_clustered_dataset(spec, 25, 8), make_clustered_dataset(spec, 25, 8));
  EXPECT_NE(make_clustered_dataset(spec, 25, 8), make_clustered_dataset(spec, 25, 9));
  const auto shifted = make_clustered_dataset(spec, 3, 8, 100);
  EXPECT_EQ(shifted[0].id, 100u);
  EXPECT_EQ(shifted[2].id, 102u);
  EXPECT_THROW(make_clustered_dataset(spec, 0, 8), Error);
}

TEST(EntropyBaselineTest, HugeThresholdExitsAtFirstLayer) {
  const SyntheticPredictor p(spec_with_noise({3, 2, 1, 0}));
  for (const auto& ex : make_clustered_dataset(p.spec(), 20, 1)) {
    const auto r = entropy_exit_baseline(p, ex.view(), 1e9);
    EXPECT_EQ(r.exit_layer, 1u);
    EXPECT_EQ(r.predicted_class, argmax(predict_at_layer(p, ex.view(), 1)));
  }
}

TEST(EntropyBaselineTest, ZeroThresholdReproducesFullModel) {
  const SyntheticPredictor p(spec_with_noise({3, 2, 1, 0.5}));
  for (const auto& ex : make_clustered_dataset(p.spec(), 50, 1)) {
    const auto r = entropy_exit_baseline(p, ex.view(), 0.0);
    EXPECT_EQ(r.exit_layer, 4u);
    EXPECT_EQ(r.predicted_class, full_model_predict(p, ex.view()));
  }
}

TEST(EntropyBaselineTest, UniformOutputAtBoundaryExitsAtFirstLayer) {
  raee_test::ScriptedPredictor p(3, 4);  // unscripted ids predict uniformly
  const std::vector<float> f = {0.f};
  const auto r = entropy_exit_baseline(p, SampleView{5, f}, std::log(4.0));
  EXPECT_EQ(r.exit_layer, 1u);
  EXPECT_THROW(entropy_exit_baseline(p, SampleView{5, f}, -1.0), Error);
}

TEST(EntropyTest, Nats) {
  EXPECT_NEAR(entropy_nats(std::vector<double>{0.5, 0.5}), std::log(2.0), 1e-15);
  EXPECT_EQ(entropy_nats(std::vector<double>{1.0, 0.0}), 0.0);
}

TEST(OracleExitMetricsTest, NoiselessSeparableHasNothingToRecover) {
  auto spec = spec_with_noise({0, 0, 0});
  spec.spread = 0.0;
  const SyntheticPredictor p(spec);
  const auto m = oracle_exit_metrics(p, make_clustered_dataset(spec, 40, 2));
  EXPECT_EQ(m.report.n_final_wrong, 0u);
  EXPECT_EQ(m.report.n_recoverable, 0u);
  EXPECT_EQ(m.report.ratio, 0.0);
  EXPECT_EQ(m.n_full_correct, 40u);
  EXPECT_EQ(m.mean_earliest_correct, 1.0);
}

TEST(OracleExitMetricsTest, TwoExampleTruthTable) {
  raee_test::ScriptedPredictor p(2, 2);
  p.script(0, {{0.9, 0.1}, {0.2, 0.8}});  // A, label 1: wrong then right
  p.script(1, {{0.7, 0.3}, {0.1, 0.9}});  // B, label 0: right then wrong
  const std::vector<LabeledExample> data = {{0, {0.f}, 1}, {1, {1.f}, 0}};
  const auto m = oracle_exit_metrics(p, data);
  EXPECT_EQ(m.report.n_final_wrong, 1u);
  EXPECT_EQ(m.report.n_recoverable, 1u);
  EXPECT_EQ(m.report.ratio, 1.0);
  EXPECT_EQ(m.correct_layers[0], std::vector<std::size_t>{2});
  EXPECT_EQ(m.correct_layers[1], std::vector<std::size_t>{1});
  EXPECT_EQ(m.per_layer_correct, (std::vector<std::size_t>{1, 1}));
}

TEST(OracleExitMetricsTest, PerLayerCountsMatchDatabaseStats) {
  const SyntheticPredictor p(spec_with_noise({8, 4, 2, 1, 0}, 12));
  const auto data = make_clustered_dataset(p.spec(), 150, 3);
  const auto m = oracle_exit_metrics(p, data);
  const ExitDatabase db = build_database(p, data, BackboneLayer{0});
  EXPECT_EQ(m.per_layer_correct, stats(db).per_layer_counts);
  EXPECT_LE(m.report.n_recoverable, m.report.n_final_wrong);
}

TEST(ModelSpecFileTest, ParseAndFormatRoundTrip) {
  const auto spec = parse_model_spec(
      "m = 3\nnum_classes = 2\nfeature_dim = 4\nnum_clusters = 5\nnoise = 2, 1, 0\n"
      "drift = 0,0,3\nseed = 99\n# comment\nspread = 0.5\n");
  EXPECT_EQ(spec.m, 3u);
  EXPECT_EQ(spec.num_clusters(), 5u);
  EXPECT_EQ(spec.layer_noise, (std::vector<double>{2, 1, 0}));
  EXPECT_EQ(spec.cluster_drift, (std::vector<double>{0, 0, 3}));
  EXPECT_EQ(spec.spread, 0.5);
  const auto again = parse_model_spec(format_model_spec(spec));
  EXPECT_EQ(SyntheticPredictor(again).fingerprint(), SyntheticPredictor(spec).fingerprint());
  EXPECT_EQ(format_model_spec(again), format_model_spec(spec));
}

TEST(ModelSpecFileTest, Errors) {
  const std::string base = "m = 2\nnum_classes = 2\nfeature_dim = 2\nnum_clusters = 2\nseed = 1\n";
  EXPECT_NO_THROW(parse_model_spec(base + "noise = 1,0\n"));
  EXPECT_THROW(parse_model_spec(base), Error);
  EXPECT_THROW(parse_model_spec(base + "noise = 1\n"), Error);
  EXPECT_THROW(parse_model_spec(base + "noise = 1,0\ncolor = red\n"), Error);
  EXPECT_THROW(parse_model_spec(base + "noise = 1,x\n"), Error);
  EXPECT_THROW(parse_model_spec(base + "noise = 1,0\ndrift = 1\n"), Error);
}
