#pragma once

#include "proxmed/estimators.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace proxmed {

struct EstimateReport {
    std::string method;
    double psi_hat = 0.0;
    double piie_hat = 0.0;
    double se = 0.0;
    double ci_lo = 0.0;
    double ci_hi = 0.0;
    int n_boot = 0;
    std::map<std::string, double> diagnostics;
};

std::string estimate_report_to_json(const EstimateReport& rep, const std::string& config_hash,
                                    std::uint64_t seed);

// method,psi,piie,se,ci_lo,ci_hi (+ config_hash and seed columns).
void write_summary_csv(const std::vector<EstimateReport>& reports, const std::string& path,
                       const std::string& config_hash, std::uint64_t seed);

}  // namespace proxmed
