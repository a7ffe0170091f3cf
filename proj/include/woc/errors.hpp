#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace woc {

// Shape disagreement between operands or against a configuration.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Model or training configuration that cannot be realized.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Malformed serialized data: checkpoints, containers, manifests.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Arithmetic decoder failure. position() is the index (in scan order) of the
// bit being decoded when the payload ran out or became inconsistent.
class DecodeError : public std::runtime_error {
 public:
  DecodeError(const std::string& what, std::size_t position)
      : std::runtime_error(what + " (at bit " + std::to_string(position) + ")"),
        position_(position) {}
  std::size_t position() const noexcept { return position_; }

 private:
  std::size_t position_;
};

// Training produced a non-finite loss.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace woc
