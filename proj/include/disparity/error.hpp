#pragma once

#include <stdexcept>
#include <string>

namespace disparity {

// Base for every error the library raises. `kind` is a short stable tag
// used by the CLI when it reports structured errors.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}

  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

class InvalidInput : public Error {
 public:
  explicit InvalidInput(const std::string& message) : Error("invalid_input", message) {}
};

class ConvergenceError : public Error {
 public:
  explicit ConvergenceError(const std::string& message) : Error("convergence", message) {}
};

class RankDeficient : public Error {
 public:
  explicit RankDeficient(const std::string& message) : Error("rank_deficient", message) {}
};

}  // namespace disparity
