#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace latentmark {

// Base class for all library errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed or inconsistent configuration, key, or request parameters.
struct ConfigError : Error {
    using Error::Error;
};

// Tensor/shape disagreement between operands.
struct ShapeError : Error {
    using Error::Error;
};

// Non-finite values encountered mid-computation; carries the step index.
struct NumericalError : Error {
    int step_index;
    NumericalError(const std::string& msg, int step)
        : Error(msg + " (step " + std::to_string(step) + ")"), step_index(step) {}
};

// Iterative solver failed to reach tolerance; carries the final residual.
struct ConvergenceError : Error {
    double residual;
    ConvergenceError(const std::string& msg, double res)
        : Error(msg + " (residual " + std::to_string(res) + ")"), residual(res) {}
};

// Requested statistical guarantee cannot be met by any threshold.
struct InfeasibleError : Error {
    using Error::Error;
};

// Optimizer produced non-finite loss; carries the loss trace up to failure.
struct OptimizationError : Error {
    std::vector<double> loss_trace;
    OptimizationError(const std::string& msg, std::vector<double> trace)
        : Error(msg), loss_trace(std::move(trace)) {}
};

// File or stream I/O failure.
struct IoError : Error {
    using Error::Error;
};

}  // namespace latentmark
