#pragma once

#include "proxmed/estimators.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace proxmed {

// Batch-run configuration; flags take precedence, config-file keys fill in
// whatever the command line left unset.
struct RunConfig {
    std::string mode;  // estimate | simulate | benchmark
    std::string input;
    std::string roles_path;
    std::vector<std::string> role_flags;  // column=role assignments
    std::vector<Method> estimators{Method::p_mr};
    bool estimators_explicit = false;
    int boot = 500;
    std::optional<std::uint64_t> seed;
    int scenario = 0;        // simulate mode
    std::string preset;      // "", "fast", "paper"
    std::optional<int> reps;  // explicit override of the preset
    std::optional<int> boot_override;
    int sample_size = 1000;  // simulate mode n
    std::string out_dir = ".";
    int threads = 0;
    bool standardize = false;

    // [dml] section
    int dml_folds = 5;
    double dml_bandwidth_h1 = 0.0;  // 0: median heuristic
    double dml_bandwidth_h0 = 0.0;
    double dml_bandwidth_q0 = 0.0;
    double dml_bandwidth_q1 = 0.0;
    double dml_lambda_h = -1.0;  // <0: grid selection
    double dml_lambda_g = -1.0;
    int dml_max_anchors = 256;
    std::optional<std::uint64_t> dml_seed;
    double dml_second_moment_cap = 1e3;
};

// key=value file with an optional [dml] section; '#' comments.
std::map<std::string, std::string> parse_config_file(const std::string& path);

// Applies config-file values for keys the flags did not set. `explicit_keys`
// names the flags the user passed.
void merge_config(RunConfig& cfg, const std::map<std::string, std::string>& file_values,
                  const std::map<std::string, bool>& explicit_keys);

// FNV-1a hash of the canonical key=value serialization; embedded in outputs.
std::string config_hash(const RunConfig& cfg);

// Canonical serialization used by the hash and echoed into provenance.
std::string config_canonical(const RunConfig& cfg);

}  // namespace proxmed
