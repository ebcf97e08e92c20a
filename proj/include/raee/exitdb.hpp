#pragma once

// Exit-profile database: embedding keys paired with the layers at which a
// layered classifier predicted the example correctly, plus binary persistence.
//
// File layout (all integers little-endian):
//
//   "RAEEDB01"                       8-byte magic
//   u32 version (= 1)
//   u32 n, u32 dim, u32 m
//   u32 metadata_count, then per pair: u32 len + key bytes, u32 len + value bytes
//   n x dim f32 keys, row-major
//   per entry: u32 record_count, then record_count x (u16 layer, f32 prob)
//   u64 checksum: FNV-1a 64 over every preceding byte, magic included
//
// Metadata pairs are written in ascending key order, so a database built from
// identical inputs always serializes to identical bytes.

#include <algorithm>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "raee/detail/binary_io.hpp"
#include "raee/embedding.hpp"
#include "raee/error.hpp"

namespace raee {

inline constexpr char kDatabaseMagic[] = "RAEEDB01";
inline constexpr std::uint32_t kDatabaseVersion = 1;

// One layer at which an example was predicted correctly. Layers are 1-based;
// 0 means "no exit" in reports and is never stored.
struct ExitRecord {
  std::uint16_t layer = 0;
  double prob = 0.0;  // rounded to f32 when stored in a database

  friend bool operator==(const ExitRecord&, const ExitRecord&) = default;
};

struct ExitProfile {
  std::uint32_t entry_id = 0;
  std::vector<ExitRecord> records;  // strictly ascending by layer

  friend bool operator==(const ExitProfile&, const ExitProfile&) = default;
};

struct DatabaseStats {
  std::size_t n_entries = 0;
  double mean_profile_len = 0.0;
  double empty_profile_fraction = 0.0;
  std::vector<std::size_t> per_layer_counts;  // index l-1 holds layer l
};

using Metadata = std::map<std::string, std::string>;

class ExitDatabase {
 public:
  ExitDatabase(std::size_t dim, std::size_t num_layers, Metadata metadata = {})
      : dim_(dim), num_layers_(num_layers), metadata_(std::move(metadata)) {
    if (dim_ == 0) throw data_error("database dim must be positive");
    if (num_layers_ == 0) throw data_error("database num_layers must be positive");
    if (num_layers_ > 0xFFFF) throw data_error("database num_layers exceeds u16 range");
  }

  // Appends an entry and returns its id. Records are stored sorted by layer.
  std::uint32_t add_entry(Embedding key, std::vector<ExitRecord> records) {
    if (key.dim() != dim_) {
      throw data_error("key dimension mismatch: expected " + std::to_string(dim_) +
                       ", got " + std::to_string(key.dim()));
    }
    for (ExitRecord& r : records) {
      if (r.layer < 1 || r.layer > num_layers_) {
        throw data_error("record layer " + std::to_string(r.layer) +
                         " out of range [1, " + std::to_string(num_layers_) + "]");
      }
      r.prob = static_cast<float>(r.prob);
      if (!(r.prob > 0.0 && r.prob <= 1.0)) {
        throw data_error("record prob " + std::to_string(r.prob) + " outside (0, 1]");
      }
    }
    std::sort(records.begin(), records.end(),
              [](const ExitRecord& a, const ExitRecord& b) { return a.layer < b.layer; });
    auto dup = std::adjacent_find(
        records.begin(), records.end(),
        [](const ExitRecord& a, const ExitRecord& b) { return a.layer == b.layer; });
    if (dup != records.end()) {
      throw data_error("duplicate layer " + std::to_string(dup->layer) + " in records");
    }
    if (keys_.size() >= 0xFFFFFFFFu) throw data_error("database is full");

    const auto id = static_cast<std::uint32_t>(keys_.size());
    keys_.push_back(std::move(key));
    values_.push_back(ExitProfile{id, std::move(records)});
    return id;
  }

  const ExitProfile& profile(std::size_t entry_id) const {
    check_id(entry_id);
    return values_[entry_id];
  }

  const Embedding& key(std::size_t entry_id) const {
    check_id(entry_id);
    return keys_[entry_id];
  }

  std::size_t size() const { return keys_.size(); }
  bool empty() const { return keys_.empty(); }
  std::size_t dim() const { return dim_; }
  std::size_t num_layers() const { return num_layers_; }

  std::span<const Embedding> keys() const { return keys_; }
  std::span<const ExitProfile> values() const { return values_; }

  const Metadata& metadata() const { return metadata_; }
  void set_metadata(const std::string& key, std::string value) {
    metadata_[key] = std::move(value);
  }

  friend bool operator==(const ExitDatabase&, const ExitDatabase&) = default;

 private:
  void check_id(std::size_t entry_id) const {
    if (entry_id >= keys_.size()) {
      throw data_error("entry id " + std::to_string(entry_id) + " out of range (n = " +
                       std::to_string(keys_.size()) + ")");
    }
  }

  std::size_t dim_;
  std::size_t num_layers_;
  Metadata metadata_;
  std::vector<Embedding> keys_;
  std::vector<ExitProfile> values_;
};

inline std::uint32_t add_entry(ExitDatabase& db, Embedding key, std::vector<ExitRecord> records) {
  return db.add_entry(std::move(key), std::move(records));
}

inline const ExitProfile& get_profile(const ExitDatabase& db, std::size_t entry_id) {
  return db.profile(entry_id);
}

inline DatabaseStats stats(const ExitDatabase& db) {
  DatabaseStats s;
  s.n_entries = db.size();
  s.per_layer_counts.assign(db.num_layers(), 0);
  std::size_t total = 0;
  std::size_t empty = 0;
  for (const ExitProfile& p : db.values()) {
    total += p.records.size();
    if (p.records.empty()) ++empty;
    for (const ExitRecord& r : p.records) ++s.per_layer_counts[r.layer - 1];
  }
  if (s.n_entries > 0) {
    s.mean_profile_len = static_cast<double>(total) / static_cast<double>(s.n_entries);
    s.empty_profile_fraction = static_cast<double>(empty) / static_cast<double>(s.n_entries);
  }
  return s;
}

inline std::vector<std::uint8_t> serialize(const ExitDatabase& db) {
  detail::ByteWriter w;
  w.put_magic(kDatabaseMagic);
  w.put_u32(kDatabaseVersion);
  w.put_u32(static_cast<std::uint32_t>(db.size()));
  w.put_u32(static_cast<std::uint32_t>(db.dim()));
  w.put_u32(static_cast<std::uint32_t>(db.num_layers()));

  w.put_u32(static_cast<std::uint32_t>(db.metadata().size()));
  for (const auto& [k, v] : db.metadata()) {
    w.put_string(k);
    w.put_string(v);
  }

  for (const Embedding& key : db.keys()) {
    for (float x : key.values()) w.put_f32(x);
  }
  for (const ExitProfile& p : db.values()) {
    w.put_u32(static_cast<std::uint32_t>(p.records.size()));
    for (const ExitRecord& r : p.records) {
      w.put_u16(r.layer);
      w.put_f32(static_cast<float>(r.prob));
    }
  }
  w.put_u64(detail::fnv1a64(w.bytes()));
  return w.take();
}

inline ExitDatabase deserialize(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  r.expect_magic(kDatabaseMagic);
  const std::uint32_t version = r.u32("version");
  if (version != kDatabaseVersion) {
    throw data_error("database version mismatch: expected " +
                     std::to_string(kDatabaseVersion) + ", got " + std::to_string(version));
  }
  const std::uint32_t n = r.u32("entry count");
  const std::uint32_t dim = r.u32("dim");
  const std::uint32_t m = r.u32("num_layers");

  Metadata metadata;
  const std::uint32_t n_meta = r.u32("metadata count");
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    std::string k = r.string("metadata key");
    std::string v = r.string("metadata value");
    metadata.emplace(std::move(k), std::move(v));
  }

  ExitDatabase db(dim, m, std::move(metadata));

  // Reject absurd sizes before allocating anything proportional to them.
  if (static_cast<std::uint64_t>(n) * dim * 4 > r.remaining()) {
    throw data_error("truncated stream while reading keys");
  }
  std::vector<Embedding> keys;
  keys.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    std::vector<float> values(dim);
    for (float& x : values) x = r.f32("keys");
    keys.emplace_back(std::move(values));
  }

  for (std::uint32_t i = 0; i < n; ++i) {
    const std::uint32_t count = r.u32("record count");
    if (static_cast<std::uint64_t>(count) * 6 > r.remaining()) {
      throw data_error("truncated stream while reading records");
    }
    std::vector<ExitRecord> records(count);
    for (ExitRecord& rec : records) {
      rec.layer = r.u16("record layer");
      rec.prob = r.f32("record prob");
    }
    if (!std::is_sorted(records.begin(), records.end(),
                        [](const ExitRecord& a, const ExitRecord& b) { return a.layer < b.layer; })) {
      throw data_error("records of entry " + std::to_string(i) + " not sorted by layer");
    }
    db.add_entry(std::move(keys[i]), std::move(records));
  }

  const std::size_t payload_end = r.position();
  const std::uint64_t stored = r.u64("checksum");
  const std::uint64_t computed = detail::fnv1a64(bytes.first(payload_end));
  if (stored != computed) {
    throw data_error("database checksum mismatch");
  }
  if (r.remaining() != 0) {
    throw data_error("trailing bytes after database checksum");
  }
  return db;
}

inline void save_database(const ExitDatabase& db, const std::string& path) {
  detail::write_file(path, serialize(db));
}

inline ExitDatabase load_database(const std::string& path) {
  const auto bytes = detail::read_file(path);
  try {
    return deserialize(bytes);
  } catch (const Error& e) {
    throw Error(e.kind(), path + ": " + e.what());
  }
}

}  // namespace raee
