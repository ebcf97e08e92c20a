#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "raee/error.hpp"

namespace raee {

// Dense f32 vector used as a retrieval key or query. Components are finite.
class Embedding {
 public:
  Embedding() = default;

  explicit Embedding(std::vector<float> values) : values_(std::move(values)) {
    if (values_.empty()) {
      throw data_error("embedding must have positive dimension");
    }
    for (std::size_t i = 0; i < values_.size(); ++i) {
      if (!std::isfinite(values_[i])) {
        throw data_error("embedding component " + std::to_string(i) + " is not finite");
      }
    }
  }

  Embedding(std::initializer_list<float> values)
      : Embedding(std::vector<float>(values)) {}

  std::size_t dim() const { return values_.size(); }
  std::span<const float> values() const { return values_; }
  float operator[](std::size_t i) const { return values_[i]; }

  friend bool operator==(const Embedding&, const Embedding&) = default;

 private:
  std::vector<float> values_;
};

}  // namespace raee
