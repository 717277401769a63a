#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace bcnf {

/// Invalid configuration or inputs. Maps to CLI exit code 1.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite value encountered during a numerical stage. Maps to CLI exit
/// code 2. `index()` identifies where it happened (layer, step, batch...).
class NumericalFault : public std::runtime_error {
 public:
  NumericalFault(const std::string& what, std::size_t index)
      : std::runtime_error(what + " (at index " + std::to_string(index) + ")"),
        index_(index) {}

  std::size_t index() const noexcept { return index_; }

 private:
  std::size_t index_;
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw ConfigError(message);
}

}  // namespace bcnf
