#pragma once

#include <stdexcept>
#include <string>

namespace rcp {

// Shape or size disagreement between operands.
struct DimensionError : std::runtime_error {
    explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

// API contract violation (e.g. backward on a non-scalar, reuse of a spent tape).
struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad caller-supplied value (out-of-vocab token, unknown category id, ...).
struct InputError : std::runtime_error {
    explicit InputError(const std::string& msg) : std::runtime_error(msg) {}
};

// Training diverged; carries the step index for diagnostics.
struct DivergenceError : std::runtime_error {
    long step;
    DivergenceError(long step_index, const std::string& msg)
        : std::runtime_error(msg), step(step_index) {}
};

}  // namespace rcp
