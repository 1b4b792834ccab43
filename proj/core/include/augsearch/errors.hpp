#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace augsearch {

/// Failure while reading or writing a file. Carries the path and the byte
/// offset at which the problem was detected.
class IoError : public std::runtime_error {
 public:
  IoError(std::string path, std::uint64_t offset, const std::string& what)
      : std::runtime_error(path + " @" + std::to_string(offset) + ": " + what),
        path_(std::move(path)),
        offset_(offset) {}

  const std::string& path() const noexcept { return path_; }
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::string path_;
  std::uint64_t offset_;
};

/// File contents are readable but inconsistent (sizes, dims, tags).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// NaN/Inf encountered in a forward or backward pass.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Fisher geometry requested at (or too close to) the simplex boundary.
class SingularGeometryError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

}  // namespace augsearch
