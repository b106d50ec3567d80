#pragma once

#include <stdexcept>
#include <string>

namespace blocklora {

/// Base class for every error thrown by the engine.
struct EngineError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Dimension mismatch between operands, or a non-positive dimension.
struct ShapeError : EngineError {
    using EngineError::EngineError;
};

/// Invalid configuration value (bad temperature, bad sweep, step out of range, ...).
struct ConfigError : EngineError {
    using EngineError::EngineError;
};

/// Block count does not divide the rank.
struct DivisibilityError : ConfigError {
    using ConfigError::ConfigError;
};

/// Class label outside the valid range.
struct LabelError : ConfigError {
    using ConfigError::ConfigError;
};

/// Scalar argument outside its documented range.
struct RangeError : ConfigError {
    using ConfigError::ConfigError;
};

/// An embedding row with zero (or non-finite) norm cannot be cosine-normalized.
struct DegenerateEmbeddingError : EngineError {
    using EngineError::EngineError;
};

/// Operation applied in the wrong state (double merge, unmerge without merge).
struct StateError : EngineError {
    using EngineError::EngineError;
};

/// Malformed checkpoint or result file (bad magic, version, shape, trailing bytes).
struct FormatError : EngineError {
    using EngineError::EngineError;
};

/// Filesystem-level failure (missing file, short read, failed write).
struct IoError : EngineError {
    using EngineError::EngineError;
};

}  // namespace blocklora
