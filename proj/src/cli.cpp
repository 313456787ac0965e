#include "proxmed/cli.hpp"

#include "proxmed/csv.hpp"
#include "proxmed/dml.hpp"
#include "proxmed/errors.hpp"
#include "proxmed/parallel.hpp"
#include "proxmed/report.hpp"
#include "proxmed/sim.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>

namespace proxmed {

namespace {

std::string timestamp_utc() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    char buf[32];
    std::tm tm_utc{};
    gmtime_r(&t, &tm_utc);
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
    return std::string(buf);
}

std::uint64_t resolve_seed(const RunConfig& cfg) {
    if (cfg.seed) return *cfg.seed;
    std::random_device rd;
    return (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << text;
    if (!out) throw IoError("failed while writing '" + path + "'");
}

void ensure_out_dir(const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory '" + dir + "': " + ec.message());
}

DmlOptions dml_options_from(const RunConfig& cfg, std::uint64_t seed) {
    DmlOptions opt;
    opt.folds = cfg.dml_folds;
    opt.seed = cfg.dml_seed ? *cfg.dml_seed : seed;
    opt.threads = cfg.threads;
    opt.second_moment_cap = cfg.dml_second_moment_cap;
    auto fill = [&](MinimaxHyper& h, double bandwidth) {
        h.sigma = bandwidth;
        h.lambda_h = cfg.dml_lambda_h;
        h.lambda_g = cfg.dml_lambda_g;
        h.max_anchors = cfg.dml_max_anchors;
    };
    fill(opt.hyper.h1, cfg.dml_bandwidth_h1);
    fill(opt.hyper.h0, cfg.dml_bandwidth_h0);
    fill(opt.hyper.q0, cfg.dml_bandwidth_q0);
    fill(opt.hyper.q1, cfg.dml_bandwidth_q1);
    return opt;
}

struct Preset {
    int reps;
    int boot;
};

Preset resolve_preset(const RunConfig& cfg) {
    Preset p{100, 200};  // fast
    if (cfg.preset == "paper") p = {500, 500};
    else if (!cfg.preset.empty() && cfg.preset != "fast") {
        throw ConfigError("unknown preset '" + cfg.preset + "' (use fast or paper)");
    }
    if (cfg.reps) p.reps = *cfg.reps;
    if (cfg.boot_override) p.boot = *cfg.boot_override;
    return p;
}

}  // namespace

int run_estimate(const RunConfig& cfg) {
    if (cfg.input.empty()) throw ConfigError("estimate mode requires --input");
    ColumnRoles roles;
    if (!cfg.roles_path.empty()) {
        roles = parse_roles_file(cfg.roles_path);
    }
    for (const auto& flag : cfg.role_flags) {
        auto [name, role] = parse_role_assignment(flag);
        roles.add(name, role);
    }
    if (roles.entries.empty()) {
        throw ConfigError("estimate mode requires a role mapping (--roles file or --role flags)");
    }

    const std::uint64_t seed = resolve_seed(cfg);
    const std::string hash = config_hash(cfg);
    ensure_out_dir(cfg.out_dir);

    LoadedData loaded = load_csv(cfg.input, roles);
    Dataset d = cfg.standardize ? standardized(loaded.data) : std::move(loaded.data);

    std::vector<Method> boot_methods;
    bool want_dml = false;
    for (Method m : cfg.estimators) {
        if (m == Method::dml_mr) {
            want_dml = true;
        } else {
            boot_methods.push_back(m);
        }
    }

    std::vector<EstimateReport> reports;
    if (!boot_methods.empty()) {
        auto points = point_estimates(d, nullptr, boot_methods, {}, default_basis());
        for (Method m : boot_methods) {
            const auto& pt = points.at(m);
            if (!pt.ok) throw SolverError(method_name(m) + ": " + pt.error);
        }
        auto boots = bootstrap_methods(d, nullptr, boot_methods, {}, default_basis(), cfg.boot,
                                       seed, cfg.threads);
        for (Method m : boot_methods) {
            const auto& be = boots.at(m);
            if (!be.ok) throw SolverError(be.error);
            EstimateReport rep;
            rep.method = method_name(m);
            rep.psi_hat = points.at(m).psi;
            rep.piie_hat = points.at(m).piie;
            rep.se = be.result.se;
            rep.ci_lo = be.result.ci_lo;
            rep.ci_hi = be.result.ci_hi;
            rep.n_boot = cfg.boot;
            rep.diagnostics = points.at(m).diagnostics;
            rep.diagnostics["boot_failed"] = be.result.n_failed;
            rep.diagnostics["dropped_rows"] = loaded.info.dropped_rows;
            reports.push_back(rep);
        }
    }
    if (want_dml) {
        DmlResult dml = psi_dml(d, dml_options_from(cfg, seed));
        EstimateReport rep;
        rep.method = method_name(Method::dml_mr);
        rep.psi_hat = dml.est.psi;
        rep.piie_hat = dml.piie;
        rep.se = dml.se_piie;
        rep.ci_lo = dml.piie - 1.959963984540054 * dml.se_piie;
        rep.ci_hi = dml.piie + 1.959963984540054 * dml.se_piie;
        rep.n_boot = 0;  // asymptotic-normal plug-in interval
        rep.diagnostics = dml.diagnostics;
        rep.diagnostics["dropped_rows"] = loaded.info.dropped_rows;
        reports.push_back(rep);
    }

    for (const EstimateReport& rep : reports) {
        write_text(cfg.out_dir + "/report_" + rep.method + ".json",
                   estimate_report_to_json(rep, hash, seed));
    }
    write_summary_csv(reports, cfg.out_dir + "/summary.csv", hash, seed);

    nlohmann::json prov;
    prov["timestamp"] = timestamp_utc();
    prov["mode"] = "estimate";
    prov["config_hash"] = hash;
    prov["seed"] = seed;
    prov["config"] = config_canonical(cfg);
    prov["n"] = static_cast<long>(d.n());
    prov["rows_in_file"] = loaded.info.total_rows;
    prov["dropped_rows"] = loaded.info.dropped_rows;
    write_text(cfg.out_dir + "/provenance.json", prov.dump(2));
    return 0;
}

namespace {

int simulate_scenarios(const RunConfig& cfg, const std::vector<int>& scenario_ids) {
    const std::uint64_t seed = resolve_seed(cfg);
    const std::string hash = config_hash(cfg);
    const Preset preset = resolve_preset(cfg);
    ensure_out_dir(cfg.out_dir);

    DgpCoefficients coef;
    std::vector<McSummary> summaries;
    for (int id : scenario_ids) {
        ScenarioOptions opt;
        opt.reps = preset.reps;
        opt.boot = preset.boot;
        opt.n = cfg.sample_size;
        opt.seed = seed + static_cast<std::uint64_t>(id);
        opt.threads = cfg.threads;
        if (cfg.estimators_explicit) {
            for (Method m : cfg.estimators) {
                if (m == Method::dml_mr) {
                    throw ConfigError(
                        "DML-MR is not part of the scenario study; use estimate mode");
                }
            }
            opt.estimators = cfg.estimators;
        }
        summaries.push_back(run_scenario(scenario_by_id(id), coef, opt));
    }

    write_mc_summary_csv(summaries, cfg.out_dir + "/mc_summary.csv", hash);

    nlohmann::json prov;
    prov["timestamp"] = timestamp_utc();
    prov["mode"] = cfg.mode;
    prov["config_hash"] = hash;
    prov["seed"] = seed;
    prov["config"] = config_canonical(cfg);
    prov["preset"] = cfg.preset.empty() ? "fast" : cfg.preset;
    prov["tolerances_widened"] = (cfg.preset != "paper");
    prov["reps"] = preset.reps;
    prov["boot"] = preset.boot;
    prov["n"] = cfg.sample_size;
    nlohmann::json failures = nlohmann::json::array();
    for (const McSummary& s : summaries) {
        for (const McRow& r : s.rows) {
            nlohmann::json f;
            f["scenario"] = s.scenario;
            f["estimator"] = method_name(r.method);
            f["n_failed"] = r.n_failed;
            f["n_ok"] = r.n_ok;
            failures.push_back(f);
        }
        if (s.invalid) prov["invalid_scenarios"].push_back(s.scenario);
    }
    prov["replication_failures"] = failures;
    prov["oracle"] = {{"piie_true", summaries.empty() ? 0.0 : summaries.front().piie_true},
                      {"psi_true", summaries.empty() ? 0.0 : summaries.front().psi_true}};
    write_text(cfg.out_dir + "/provenance.json", prov.dump(2));
    return 0;
}

}  // namespace

int run_simulate(const RunConfig& cfg) {
    if (cfg.scenario < 1 || cfg.scenario > 4) {
        throw ConfigError("simulate mode requires --scenario in {1,2,3,4}");
    }
    return simulate_scenarios(cfg, {cfg.scenario});
}

int run_benchmark(const RunConfig& cfg) {
    return simulate_scenarios(cfg, {1, 2, 3, 4});
}

int run_cli(const std::vector<std::string>& args) {
    RunConfig cfg;
    std::string config_path;
    std::string estimators_flag;
    std::uint64_t seed_flag = 0;
    int reps_flag = 0;
    int boot_flag = 0;

    CLI::App app{"proximal mediation estimation and simulation"};
    app.add_option("--mode", cfg.mode, "estimate | simulate | benchmark");
    app.add_option("--input", cfg.input, "input CSV path (estimate mode)");
    app.add_option("--roles", cfg.roles_path, "column=role mapping file");
    app.add_option("--role", cfg.role_flags, "column=role assignment (repeatable)");
    auto* est_opt = app.add_option("--estimators", estimators_flag,
                                   "comma-separated estimator tags");
    auto* boot_opt = app.add_option("--boot", boot_flag, "bootstrap replicates B");
    auto* seed_opt = app.add_option("--seed", seed_flag, "RNG seed");
    app.add_option("--scenario", cfg.scenario, "scenario id 1-4 (simulate mode)");
    app.add_option("--preset", cfg.preset, "fast (R=100,B=200) or paper (R=500,B=500)");
    auto* reps_opt = app.add_option("--reps", reps_flag, "override replication count");
    app.add_option("--n", cfg.sample_size, "sample size per replication");
    app.add_option("--out", cfg.out_dir, "output directory");
    app.add_option("--threads", cfg.threads, "worker cap (default: hardware)");
    app.add_flag("--standardize", cfg.standardize, "standardize covariate columns");
    app.add_option("--config", config_path, "key=value config file ([dml] section supported)");

    try {
        std::vector<std::string> rev(args.rbegin(), args.rend());
        app.parse(rev);
    } catch (const CLI::CallForHelp&) {
        std::cout << app.help() << std::endl;
        return 0;
    } catch (const CLI::ParseError& e) {
        nlohmann::json err;
        err["error"] = {{"type", "config"}, {"message", e.what()}, {"exit_code", 2}};
        std::cerr << err.dump() << std::endl;
        return 2;
    }

    try {
        if (est_opt->count() > 0) {
            cfg.estimators.clear();
            cfg.estimators_explicit = true;
            std::stringstream ss(estimators_flag);
            std::string item;
            while (std::getline(ss, item, ',')) {
                if (!item.empty()) cfg.estimators.push_back(method_from_string(item));
            }
            if (cfg.estimators.empty()) throw ConfigError("--estimators list is empty");
        }
        if (boot_opt->count() > 0) {
            cfg.boot = boot_flag;
            cfg.boot_override = boot_flag;
        }
        if (seed_opt->count() > 0) cfg.seed = seed_flag;
        if (reps_opt->count() > 0) cfg.reps = reps_flag;

        if (!config_path.empty()) {
            std::map<std::string, bool> explicit_keys;
            for (const auto* opt : app.get_options()) {
                if (opt->count() > 0) {
                    std::string name = opt->get_name();
                    if (name.rfind("--", 0) == 0) name = name.substr(2);
                    explicit_keys[name] = true;
                }
            }
            merge_config(cfg, parse_config_file(config_path), explicit_keys);
        }

        if (cfg.mode == "estimate") return run_estimate(cfg);
        if (cfg.mode == "simulate") return run_simulate(cfg);
        if (cfg.mode == "benchmark") return run_benchmark(cfg);
        throw ConfigError(cfg.mode.empty() ? "missing --mode"
                                           : "unknown mode '" + cfg.mode + "'");
    } catch (const ConfigError& e) {
        nlohmann::json err;
        err["error"] = {{"type", "config"}, {"message", e.what()}, {"exit_code", 2}};
        std::cerr << err.dump() << std::endl;
        return 2;
    } catch (const DataError& e) {
        nlohmann::json err;
        err["error"] = {{"type", "data"}, {"message", e.what()}, {"exit_code", 3}};
        std::cerr << err.dump() << std::endl;
        return 3;
    } catch (const SolverError& e) {
        nlohmann::json err;
        err["error"] = {{"type", "solver"}, {"message", e.what()}, {"exit_code", 4}};
        std::cerr << err.dump() << std::endl;
        return 4;
    } catch (const IoError& e) {
        nlohmann::json err;
        err["error"] = {{"type", "io"}, {"message", e.what()}, {"exit_code", 5}};
        std::cerr << err.dump() << std::endl;
        return 5;
    } catch (const std::exception& e) {
        nlohmann::json err;
        err["error"] = {{"type", "internal"}, {"message", e.what()}, {"exit_code", 1}};
        std::cerr << err.dump() << std::endl;
        return 1;
    }
}

}  // namespace proxmed
