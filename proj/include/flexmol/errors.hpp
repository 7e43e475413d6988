#pragma once

#include <stdexcept>
#include <string>

namespace flexmol {

// Base class for all library errors.
struct Error : std::runtime_error {
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Malformed input files (JSONL, SDF, config, checkpoints).
struct ParseError : Error {
  using Error::Error;
};

// Structurally well-formed input that violates an invariant.
struct ValidationError : Error {
  using Error::Error;
};

// Bad configuration (shapes, hyperparameters, CLI flag combinations).
struct ConfigError : Error {
  using Error::Error;
};

}  // namespace flexmol
