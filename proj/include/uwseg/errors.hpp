#pragma once

#include <stdexcept>
#include <string>

namespace uwseg {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes or spatial sizes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A caller broke an API precondition (non-scalar loss, non-binary mask, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Math domain violation, e.g. sqrt of a negative value.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Invalid model/run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Dataset files could not be read or decoded.
class IngestionError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint files are missing, corrupt, or do not match the model.
class CheckpointError : public Error {
 public:
  using Error::Error;
};

/// Training diverged (non-finite loss).
class TrainingError : public Error {
 public:
  using Error::Error;
};

/// A metric is undefined for the accumulated data.
class MetricError : public Error {
 public:
  using Error::Error;
};

}  // namespace uwseg
