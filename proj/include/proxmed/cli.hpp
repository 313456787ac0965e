#pragma once

#include "proxmed/config.hpp"

#include <string>
#include <vector>

namespace proxmed {

// Exit codes: 0 ok, 2 config, 3 data, 4 solver, 5 io.
int run_estimate(const RunConfig& cfg);
int run_simulate(const RunConfig& cfg);
int run_benchmark(const RunConfig& cfg);

// Full front end: parses argv-style arguments, merges the config file,
// dispatches on mode. Prints a machine-readable error JSON to stderr and
// returns the mapped exit code on failure.
int run_cli(const std::vector<std::string>& args);

}  // namespace proxmed
