#pragma once

#include <stdexcept>
#include <string>

namespace masklam {

// Error hierarchy: everything user-facing derives from Error so the CLI can
// catch one type and exit with a diagnostic.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor/op shape disagreement.
struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error("shape error: " + msg) {}
};

// Violated API contract (non-scalar loss, missing grad, ...).
struct ContractError : Error {
    explicit ContractError(const std::string& msg) : Error("contract violation: " + msg) {}
};

// masked_mse over a batch whose mask sums to zero.
struct DegenerateMaskError : Error {
    explicit DegenerateMaskError(const std::string& msg) : Error("degenerate mask: " + msg) {}
};

// On-disk container problems: bad magic, bad version, dimension mismatch.
struct FormatError : Error {
    explicit FormatError(const std::string& msg) : Error("format error: " + msg) {}
};

// Truncated or inconsistent payload.
struct CorruptionError : Error {
    explicit CorruptionError(const std::string& msg) : Error("corrupt file: " + msg) {}
};

// k outside [1, n_traj] in labelled-subset selection.
struct InvalidCountError : Error {
    explicit InvalidCountError(const std::string& msg) : Error("invalid count: " + msg) {}
};

// step() called on a finished episode.
struct EpisodeFinishedError : Error {
    explicit EpisodeFinishedError(const std::string& msg) : Error("episode finished: " + msg) {}
};

// Training loss became non-finite.
struct DivergenceError : Error {
    explicit DivergenceError(const std::string& msg) : Error("divergence: " + msg) {}
};

}  // namespace masklam
