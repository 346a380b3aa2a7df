#pragma once

#include <stdexcept>
#include <string>

namespace mam {

// Bad user input: config files, CLI values, unknown modes.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed or inconsistent data on disk: features, checkpoints, manifests.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Dimension mismatch while building or evaluating a graph.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// NaN/Inf produced by a primitive, or unbound leaves at evaluation.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// CTC target that admits no alignment at the given input length.
struct UnalignableError : std::runtime_error {
  UnalignableError(int available_frames, int required_frames)
      : std::runtime_error("ctc target unalignable: needs " +
                           std::to_string(required_frames) +
                           " frames, encoder provides " +
                           std::to_string(available_frames)),
        available(available_frames),
        required(required_frames) {}
  int available;
  int required;
};

}  // namespace mam
