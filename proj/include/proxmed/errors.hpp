#pragma once

#include <stdexcept>
#include <string>

namespace proxmed {

// Error taxonomy; the CLI maps these onto distinct exit codes
// (config=2, data=3, solver=4, io=5).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct SolverError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace proxmed
