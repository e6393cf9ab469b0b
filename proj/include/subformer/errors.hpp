#pragma once

#include <stdexcept>
#include <string>

namespace subformer {

// Base for every error raised by the library. The CLI maps the concrete
// type onto a process exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid model / run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Token id outside the vocabulary.
class VocabularyError : public Error {
 public:
  using Error::Error;
};

// Sequence longer than the positional table.
class LengthError : public Error {
 public:
  using Error::Error;
};

// API misuse: non-scalar loss, missing memory, wrong architecture, ...
class ContractError : public Error {
 public:
  using Error::Error;
};

// Empty or unusable dataset.
class DataError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf encountered while training.
class NumericError : public Error {
 public:
  using Error::Error;
};

// File I/O failure or corrupt checkpoint.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace subformer
