#include <gtest/gtest.h>

#include <random>
#include <numeric>
#include <set>

#include "raee/knn_index.hpp"

using namespace raee;

namespace {

std::vector<Embedding> random_keys(std::mt19937_64& rng, std::size_t n, std::size_t dim) {
  std::normal_distribution<float> dist(0.0f, 1.0f);
  std::vector<Embedding> keys;
  keys.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<float> v(dim);
    for (float& x : v) x = dist(rng);
    keys.emplace_back(std::move(v));
  }
  return keys;
}

std::vector<Embedding> three_keys() {
  return {Embedding{0.f, 0.f}, Embedding{3.f, 4.f}, Embedding{1.f, 0.f}};
}

}  // namespace

TEST(KnnIndexTest, BuildReportsSize) {
  const auto keys = three_keys();
  const FlatIndex index = build_index(keys);
  EXPECT_EQ(index.size(), 3u);
  EXPECT_EQ(index.dim(), 2u);
}

TEST(KnnIndexTest, BuildRejectsBadKeySets) {
  EXPECT_THROW(build_index(std::vector<Embedding>{}), Error);
  const std::vector<Embedding> mixed = {Embedding{1.f, 2.f}, Embedding{1.f, 2.f, 3.f}};
  EXPECT_THROW(build_index(mixed), Error);
  const std::vector<Embedding> zero = {Embedding{0.f, 0.f}, Embedding{1.f, 0.f}};
  EXPECT_THROW(build_index(zero, Metric::kCosine), Error);
  EXPECT_NO_THROW(build_index(zero, Metric::kSquaredL2));
}

TEST(KnnIndexTest, HandComputedSquaredL2) {
  const auto keys = three_keys();
  const FlatIndex index(keys);
  const auto hits = index.query(Embedding{0.f, 0.f}, 2);
  ASSERT_EQ(hits.size(), 2u);
  EXPECT_EQ(hits[0], (NeighborHit{0, 0.0}));
  EXPECT_EQ(hits[1], (NeighborHit{2, 1.0}));
}

TEST(KnnIndexTest, KIsClampedToSize) {
  const auto keys = three_keys();
  const auto hits = FlatIndex(keys).query(Embedding{0.f, 0.f}, 10);
  ASSERT_EQ(hits.size(), 3u);
  EXPECT_EQ(hits[2], (NeighborHit{1, 25.0}));
}

TEST(KnnIndexTest, TiesBreakByEntryId) {
  const std::vector<Embedding> keys = {Embedding{1.f, 0.f}, Embedding{0.f, 1.f}, Embedding{-1.f, 0.f},
                                       Embedding{5.f, 5.f}};
  const auto hits = FlatIndex(keys).query(Embedding{0.f, 0.f}, 3);
  ASSERT_EQ(hits.size(), 3u);
  EXPECT_EQ(hits[0].entry_id, 0u);
  EXPECT_EQ(hits[1].entry_id, 1u);
  EXPECT_EQ(hits[2].entry_id, 2u);
  EXPECT_EQ(hits[0].distance, hits[2].distance);
}

TEST(KnnIndexTest, QueryErrors) {
  const auto keys = three_keys();
  const FlatIndex index(keys);
  EXPECT_THROW(index.query(Embedding{0.f, 0.f, 0.f}, 1), Error);
  EXPECT_THROW(index.query(Embedding{0.f, 0.f}, 0), Error);
  EXPECT_THROW(brute_force_query(keys, Embedding{0.f, 0.f}, 0, Metric::kSquaredL2), Error);

  const std::vector<Embedding> unit = {Embedding{1.f, 0.f}};
  EXPECT_THROW(FlatIndex(unit, Metric::kCosine).query(Embedding{0.f, 0.f}, 1), Error);
}

TEST(KnnIndexTest, CosineDistance) {
  EXPECT_DOUBLE_EQ(distance(Embedding{1.f, 0.f}, Embedding{0.f, 2.f}, Metric::kCosine), 1.0);
  EXPECT_DOUBLE_EQ(distance(Embedding{1.f, 0.f}, Embedding{-3.f, 0.f}, Metric::kCosine), 2.0);
  EXPECT_DOUBLE_EQ(distance(Embedding{2.f, 0.f}, Embedding{5.f, 0.f}, Metric::kCosine), 0.0);
}

TEST(KnnIndexTest, SingleKeyBruteForce) {
  const std::vector<Embedding> keys = {Embedding{1.f, 2.f}};
  const auto hits = brute_force_query(keys, Embedding{4.f, 6.f}, 5, Metric::kSquaredL2);
  ASSERT_EQ(hits.size(), 1u);
  EXPECT_EQ(hits[0], (NeighborHit{0, 25.0}));
}

TEST(KnnIndexTest, MatchesBruteForceOnRandomData) {
  std::mt19937_64 rng(1234);
  for (Metric metric : {Metric::kSquaredL2, Metric::kCosine}) {
    const auto keys = random_keys(rng, 1000, 64);
    const FlatIndex index(keys, metric);
    for (int t = 0; t < 10; ++t) {
      const Embedding q = random_keys(rng, 1, 64).front();
      EXPECT_EQ(index.query(q, 12), brute_force_query(keys, q, 12, metric));
    }
  }
}

TEST(KnnIndexTest, MatchesBruteForceWithManyTies) {
  // Integer grid keys produce lots of exactly equal distances.
  std::mt19937_64 rng(99);
  std::uniform_int_distribution<int> coord(-2, 2);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Embedding> keys;
    for (int i = 0; i < 60; ++i) {
      keys.push_back(Embedding{static_cast<float>(coord(rng)), static_cast<float>(coord(rng))});
    }
    const Embedding q{static_cast<float>(coord(rng)), static_cast<float>(coord(rng))};
    for (std::size_t k : {1u, 5u, 12u, 60u, 100u}) {
      EXPECT_EQ(FlatIndex(keys).query(q, k), brute_force_query(keys, q, k, Metric::kSquaredL2));
    }
  }
}

TEST(KnnIndexTest, ResultsSortedAndUnique) {
  std::mt19937_64 rng(7);
  const auto keys = random_keys(rng, 300, 8);
  const FlatIndex index(keys);
  const auto hits = index.query(random_keys(rng, 1, 8).front(), 40);
  std::set<std::uint32_t> ids;
  for (std::size_t i = 0; i < hits.size(); ++i) {
    ids.insert(hits[i].entry_id);
    if (i > 0) {
      EXPECT_LE(hits[i - 1].distance, hits[i].distance);
    }
  }
  EXPECT_EQ(ids.size(), hits.size());
}

TEST(KnnIndexTest, SquaredL2IsSymmetricAndZeroOnlyForEqual) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 100; ++i) {
    const auto ab = random_keys(rng, 2, 5);
    EXPECT_EQ(distance(ab[0], ab[1], Metric::kSquaredL2), distance(ab[1], ab[0], Metric::kSquaredL2));
    EXPECT_GT(distance(ab[0], ab[1], Metric::kSquaredL2), 0.0);
    EXPECT_EQ(distance(ab[0], ab[0], Metric::kSquaredL2), 0.0);
  }
}

TEST(KnnIndexTest, PermutingKeysPermutesIds) {
  std::mt19937_64 rng(21);
  const auto keys = random_keys(rng, 200, 6);
  std::vector<std::uint32_t> perm(keys.size());
  std::iota(perm.begin(), perm.end(), 0u);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<Embedding> shuffled;
  for (std::uint32_t p : perm) shuffled.push_back(keys[p]);

  const Embedding q = random_keys(rng, 1, 6).front();
  const auto a = FlatIndex(keys).query(q, 12);
  auto b = FlatIndex(shuffled).query(q, 12);
  for (auto& h : b) h.entry_id = perm[h.entry_id];
  EXPECT_EQ(a, b);
}

TEST(KnnIndexTest, IndexPersistenceRebuildsEquivalentIndex) {
  std::mt19937_64 rng(8);
  const auto keys = random_keys(rng, 50, 4);
  for (Metric metric : {Metric::kSquaredL2, Metric::kCosine}) {
    const FlatIndex index(keys, metric);
    const auto bytes = serialize_index(index);
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 8), "RAEEIX01");
    EXPECT_EQ(bytes[12], static_cast<std::uint8_t>(metric));
    const FlatIndex back = deserialize_index(bytes);
    EXPECT_EQ(back.metric(), metric);
    const Embedding q = random_keys(rng, 1, 4).front();
    EXPECT_EQ(back.query(q, 7), index.query(q, 7));
  }
}

TEST(KnnIndexTest, IndexPersistenceRejectsGarbage) {
  const auto keys = three_keys();
  auto bytes = serialize_index(FlatIndex(keys));
  bytes.pop_back();
  EXPECT_THROW(deserialize_index(bytes), Error);
  bytes = serialize_index(FlatIndex(keys));
  bytes[12] = 9;
  EXPECT_THROW(deserialize_index(bytes), Error);
}

TEST(KnnIndexTest, ParseMetric) {
  EXPECT_EQ(parse_metric("l2"), Metric::kSquaredL2);
  EXPECT_EQ(parse_metric("cosine"), Metric::kCosine);
  EXPECT_THROW(parse_metric("dot"), Error);
}
