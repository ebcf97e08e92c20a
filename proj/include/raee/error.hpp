#pragma once

#include <stdexcept>
#include <string>

namespace raee {

// Broad failure classes. The CLI maps these onto its exit codes.
enum class ErrorKind {
  kUsage = 1,
  kData = 2,
  kInvariant = 3,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline Error usage_error(const std::string& what) {
  return Error(ErrorKind::kUsage, what);
}

inline Error data_error(const std::string& what) {
  return Error(ErrorKind::kData, what);
}

inline Error invariant_error(const std::string& what) {
  return Error(ErrorKind::kInvariant, what);
}

}  // namespace raee
