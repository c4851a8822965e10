#pragma once

#include <stdexcept>
#include <string>

namespace cxr {

/// Tensor or layer dimensions disagree. The message names the offending dimension.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed serialized data (weight files, spec text, manifests).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A source collection cannot supply the requested number of images.
class ShortfallError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Training diverged or was started on bad inputs.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace cxr
