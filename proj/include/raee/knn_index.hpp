#pragma once

// Exact top-k retrieval over embedding keys.
//
// Results are sorted by ascending distance with exact ties broken by
// ascending entry id, so a query is a deterministic function of its inputs.
// brute_force_query is the reference: it scores every key pairwise and fully
// sorts. FlatIndex must agree with it element for element.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <queue>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "raee/detail/binary_io.hpp"
#include "raee/embedding.hpp"
#include "raee/error.hpp"

namespace raee {

enum class Metric : std::uint8_t {
  kSquaredL2 = 0,
  kCosine = 1,
};

inline std::string_view metric_name(Metric m) {
  return m == Metric::kCosine ? "cosine" : "l2";
}

inline Metric parse_metric(std::string_view s) {
  if (s == "l2" || s == "squared-l2") return Metric::kSquaredL2;
  if (s == "cosine") return Metric::kCosine;
  throw usage_error("unknown metric \"" + std::string(s) + "\" (expected l2 or cosine)");
}

struct NeighborHit {
  std::uint32_t entry_id = 0;
  double distance = 0.0;

  friend bool operator==(const NeighborHit&, const NeighborHit&) = default;
};

namespace detail {

// Scalar kernels shared by the index and the brute-force oracle so both see
// bit-identical distances. Accumulation is in double, in index order.
inline double dot(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  }
  return s;
}

inline double norm(std::span<const float> a) { return std::sqrt(dot(a, a)); }

inline double squared_l2(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += d * d;
  }
  return s;
}

inline double cosine_from_parts(double dot_ab, double norm_a, double norm_b) {
  return std::clamp(1.0 - dot_ab / (norm_a * norm_b), 0.0, 2.0);
}

inline bool hit_less(const NeighborHit& a, const NeighborHit& b) {
  if (a.distance != b.distance) return a.distance < b.distance;
  return a.entry_id < b.entry_id;
}

inline void check_k(std::size_t k) {
  if (k < 1) throw usage_error("k must be >= 1");
}

inline void check_dim(std::size_t expected, std::size_t got, const char* what) {
  if (expected != got) {
    throw data_error(std::string(what) + " dimension mismatch: expected " +
                     std::to_string(expected) + ", got " + std::to_string(got));
  }
}

}  // namespace detail

inline double distance(const Embedding& a, const Embedding& b, Metric metric) {
  detail::check_dim(a.dim(), b.dim(), "distance");
  if (metric == Metric::kSquaredL2) return detail::squared_l2(a.values(), b.values());
  const double na = detail::norm(a.values());
  const double nb = detail::norm(b.values());
  if (na == 0.0 || nb == 0.0) throw data_error("zero-norm vector under cosine metric");
  return detail::cosine_from_parts(detail::dot(a.values(), b.values()), na, nb);
}

// Exhaustive reference search.
inline std::vector<NeighborHit> brute_force_query(std::span<const Embedding> keys,
                                                  const Embedding& q, std::size_t k,
                                                  Metric metric) {
  detail::check_k(k);
  std::vector<NeighborHit> all;
  all.reserve(keys.size());
  for (std::size_t i = 0; i < keys.size(); ++i) {
    all.push_back({static_cast<std::uint32_t>(i), distance(keys[i], q, metric)});
  }
  std::sort(all.begin(), all.end(), detail::hit_less);
  all.resize(std::min(k, all.size()));
  return all;
}

// Immutable flat index. Keys live in one row-major buffer; cosine norms are
// precomputed at build time. Concurrent queries are safe.
class FlatIndex {
 public:
  FlatIndex(std::span<const Embedding> keys, Metric metric = Metric::kSquaredL2)
      : metric_(metric) {
    if (keys.empty()) throw data_error("cannot build an index over an empty key set");
    dim_ = keys.front().dim();
    size_ = keys.size();
    data_.reserve(size_ * dim_);
    for (const Embedding& key : keys) {
      detail::check_dim(dim_, key.dim(), "index key");
      data_.insert(data_.end(), key.values().begin(), key.values().end());
    }
    if (metric_ == Metric::kCosine) {
      norms_.reserve(size_);
      for (std::size_t i = 0; i < size_; ++i) {
        const double n = detail::norm(row(i));
        if (n == 0.0) {
          throw data_error("zero-norm key " + std::to_string(i) + " under cosine metric");
        }
        norms_.push_back(n);
      }
    }
  }

  std::vector<NeighborHit> query(const Embedding& q, std::size_t k) const {
    detail::check_k(k);
    detail::check_dim(dim_, q.dim(), "query");
    const std::span<const float> qv = q.values();
    double q_norm = 0.0;
    if (metric_ == Metric::kCosine) {
      q_norm = detail::norm(qv);
      if (q_norm == 0.0) throw data_error("zero-norm query under cosine metric");
    }

    const std::size_t kk = std::min(k, size_);
    // Max-heap of the best kk hits seen so far; top() is the worst of them.
    std::priority_queue<NeighborHit, std::vector<NeighborHit>, decltype(&detail::hit_less)>
        heap(&detail::hit_less);
    for (std::size_t i = 0; i < size_; ++i) {
      const double d = metric_ == Metric::kSquaredL2
                           ? detail::squared_l2(row(i), qv)
                           : detail::cosine_from_parts(detail::dot(row(i), qv), norms_[i], q_norm);
      const NeighborHit hit{static_cast<std::uint32_t>(i), d};
      if (heap.size() < kk) {
        heap.push(hit);
      } else if (detail::hit_less(hit, heap.top())) {
        heap.pop();
        heap.push(hit);
      }
    }

    std::vector<NeighborHit> out(heap.size());
    for (std::size_t i = out.size(); i-- > 0;) {
      out[i] = heap.top();
      heap.pop();
    }
    return out;
  }

  std::size_t size() const { return size_; }
  std::size_t dim() const { return dim_; }
  Metric metric() const { return metric_; }

  std::span<const float> row(std::size_t i) const {
    return std::span<const float>(data_).subspan(i * dim_, dim_);
  }

 private:
  Metric metric_;
  std::size_t dim_ = 0;
  std::size_t size_ = 0;
  std::vector<float> data_;
  std::vector<double> norms_;
};

inline FlatIndex build_index(std::span<const Embedding> keys, Metric metric = Metric::kSquaredL2) {
  return FlatIndex(keys, metric);
}

// Index file: "RAEEIX01" · u32 version · u8 metric tag · u32 n · u32 dim ·
// n x dim f32 keys (same row-major layout as the database file).
inline constexpr char kIndexMagic[] = "RAEEIX01";
inline constexpr std::uint32_t kIndexVersion = 1;

inline std::vector<std::uint8_t> serialize_index(const FlatIndex& index) {
  detail::ByteWriter w;
  w.put_magic(kIndexMagic);
  w.put_u32(kIndexVersion);
  w.put_u8(static_cast<std::uint8_t>(index.metric()));
  w.put_u32(static_cast<std::uint32_t>(index.size()));
  w.put_u32(static_cast<std::uint32_t>(index.dim()));
  for (std::size_t i = 0; i < index.size(); ++i) {
    for (float x : index.row(i)) w.put_f32(x);
  }
  return w.take();
}

inline FlatIndex deserialize_index(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  r.expect_magic(kIndexMagic);
  const std::uint32_t version = r.u32("version");
  if (version != kIndexVersion) {
    throw data_error("index version mismatch: got " + std::to_string(version));
  }
  const std::uint8_t tag = r.u8("metric tag");
  if (tag > static_cast<std::uint8_t>(Metric::kCosine)) {
    throw data_error("unknown metric tag " + std::to_string(tag));
  }
  const std::uint32_t n = r.u32("entry count");
  const std::uint32_t dim = r.u32("dim");
  if (static_cast<std::uint64_t>(n) * dim * 4 != r.remaining()) {
    throw data_error("truncated stream while reading index keys");
  }
  std::vector<Embedding> keys;
  keys.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    std::vector<float> v(dim);
    for (float& x : v) x = r.f32("keys");
    keys.emplace_back(std::move(v));
  }
  return FlatIndex(keys, static_cast<Metric>(tag));
}

}  // namespace raee
