// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>

namespace cwac {

/// Base of every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or layer geometry does not line up. Carries the offending layer
/// index when the failure happened inside a model.
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string &what,
                      std::optional<std::size_t> layer = std::nullopt)
      : Error(layer ? "layer " + std::to_string(*layer) + ": " + what : what),
        layer_(layer) {}

  std::optional<std::size_t> layer() const { return layer_; }

 private:
  std::optional<std::size_t> layer_;
};

/// Invalid argument or configuration value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed, truncated or dangling on-disk bundle content.
class BundleError : public Error {
 public:
  using Error::Error;
};

/// A closed-form fit could not be computed (too few rows, non-finite data).
class FitError : public Error {
 public:
  using Error::Error;
};

/// Integer accumulator or bias term left the i32 range.
class OverflowError : public Error {
 public:
  OverflowError(const std::string &what, std::size_t layer)
      : Error("layer " + std::to_string(layer) + ": " + what), layer_(layer) {}

  std::size_t layer() const { return layer_; }

 private:
  std::size_t layer_;
};

/// Trainer finished below its accuracy floor.
class TrainError : public Error {
 public:
  TrainError(const std::string &what, double accuracy)
      : Error(what), accuracy_(accuracy) {}

  double accuracy() const { return accuracy_; }

 private:
  double accuracy_;
};

}  // namespace cwac
