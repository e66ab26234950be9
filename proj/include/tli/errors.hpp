// Error taxonomy shared across the library. Every throw site uses one of
// these so callers (and the CLI exit-code mapping) can tell failure kinds
// apart without parsing messages.
#pragma once

#include <stdexcept>
#include <string>

namespace tli {

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor operands with incompatible dimensions.
struct ShapeError : Error {
    using Error::Error;
};

// Out-of-range token id / target id / coordinate.
struct IndexError : Error {
    using Error::Error;
};

// Sequence longer than the model's max_seq_len.
struct LengthError : Error {
    using Error::Error;
};

// Invalid ModelConfig or bad scalar parameter.
struct ConfigError : Error {
    using Error::Error;
};

// Upscale target that Algorithm-style interval arithmetic cannot satisfy.
struct PlanError : Error {
    using Error::Error;
};

// Store/config/schema disagreement.
struct ValidationError : Error {
    using Error::Error;
};

// Unreadable or truncated on-disk container.
struct FormatError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

// Iterative numeric procedure failed to converge.
struct NumericError : Error {
    using Error::Error;
};

// Misuse of an API (e.g. rekeying a non-layer key).
struct UsageError : Error {
    using Error::Error;
};

// Two models that cannot be compared (vocab mismatch etc.).
struct ComparisonError : Error {
    using Error::Error;
};

// Training diverged; carries the last step whose loss was finite.
struct TrainError : Error {
    TrainError(const std::string& msg, int last_good_step)
        : Error(msg), last_good_step(last_good_step) {}
    int last_good_step;
};

}  // namespace tli
