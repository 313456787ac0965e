#include "proxmed/report.hpp"

#include "proxmed/errors.hpp"

#include <json.hpp>

#include <cstdio>
#include <fstream>

namespace proxmed {

std::string estimate_report_to_json(const EstimateReport& rep, const std::string& config_hash,
                                    std::uint64_t seed) {
    nlohmann::json j;
    j["method"] = rep.method;
    j["psi_hat"] = rep.psi_hat;
    j["piie_hat"] = rep.piie_hat;
    j["se"] = rep.se;
    j["ci_lo"] = rep.ci_lo;
    j["ci_hi"] = rep.ci_hi;
    j["n_boot"] = rep.n_boot;
    j["diagnostics"] = rep.diagnostics;
    j["config_hash"] = config_hash;
    j["seed"] = seed;
    return j.dump(2);
}

void write_summary_csv(const std::vector<EstimateReport>& reports, const std::string& path,
                       const std::string& config_hash, std::uint64_t seed) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << "method,psi,piie,se,ci_lo,ci_hi,config_hash,seed\n";
    char buf[64];
    auto fmt = [&buf](double v) {
        std::snprintf(buf, sizeof(buf), "%.10g", v);
        return std::string(buf);
    };
    for (const EstimateReport& r : reports) {
        out << r.method << ',' << fmt(r.psi_hat) << ',' << fmt(r.piie_hat) << ',' << fmt(r.se)
            << ',' << fmt(r.ci_lo) << ',' << fmt(r.ci_hi) << ',' << config_hash << ',' << seed
            << "\n";
    }
    if (!out) throw IoError("failed while writing '" + path + "'");
}

}  // namespace proxmed
