#pragma once

#include <stdexcept>
#include <string>

namespace bvit {

// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid NetworkConfig / TrainConfig / CLI configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Tensor or image with an unexpected shape.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Malformed or missing input data (manifests, images, caches, checkpoints).
class DataError : public Error {
 public:
  using Error::Error;
};

// Training diverged (non-finite loss).
class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace bvit
