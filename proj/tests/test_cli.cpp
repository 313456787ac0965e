#include "proxmed/cli.hpp"
#include "proxmed/config.hpp"
#include "proxmed/csv.hpp"
#include "proxmed/errors.hpp"
#include "proxmed/sim.hpp"

#include <doctest.h>

#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

using namespace proxmed;

namespace {

namespace fs = std::filesystem;

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("proxmed_cli_" + tag);
        fs::remove_all(path);
        fs::create_directories(path);
    }
    std::string str(const std::string& name) const { return (path / name).string(); }
};

std::string read_file(const std::string& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_roles(const std::string& path, bool include_z = true) {
    std::ofstream out(path);
    out << "# column role mapping\n";
    out << "y=outcome\na=exposure\nm=mediator\nx1=covariate\nx2=covariate\nw1=w_proxy\n";
    if (include_z) out << "z1=z_proxy\n";
}

// Writes a simulated dataset and the matching roles file; returns CSV path.
std::string make_inputs(const TempDir& dir, int n, std::uint64_t seed,
                        bool single_arm = false) {
    auto gen = generate(DgpCoefficients{}, n, seed);
    Dataset d = gen.data;
    if (single_arm) d.a.setOnes();
    const std::string csv = dir.str("data.csv");
    save_csv(d, csv);
    write_roles(dir.str("roles.txt"));
    return csv;
}

int run_binary(const std::string& args) {
    const std::string cmd = std::string(PROXMED_CLI_PATH) + " " + args + " 2>/dev/null";
    int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("cmd_estimate writes reports for a simulated CSV") {
    TempDir dir("estimate");
    const std::string csv = make_inputs(dir, 600, 1001);
    int code = run_cli({"--mode", "estimate", "--input", csv, "--roles", dir.str("roles.txt"),
                        "--estimators", "P-MR", "--boot", "50", "--seed", "7", "--out",
                        dir.str("out"), "--threads", "2"});
    CHECK(code == 0);
    const std::string report = read_file(dir.str("out/report_P-MR.json"));
    REQUIRE_FALSE(report.empty());
    auto j = nlohmann::json::parse(report);
    CHECK(j["method"] == "P-MR");
    CHECK(std::isfinite(j["psi_hat"].get<double>()));
    CHECK(std::isfinite(j["piie_hat"].get<double>()));
    CHECK(j["ci_lo"].get<double>() <= j["ci_hi"].get<double>());
    CHECK(j["n_boot"] == 50);
    CHECK(j["seed"] == 7);

    const std::string summary = read_file(dir.str("out/summary.csv"));
    CHECK(summary.find("method,psi,piie,se,ci_lo,ci_hi,config_hash,seed") == 0);
    CHECK(summary.find("P-MR") != std::string::npos);

    auto prov = nlohmann::json::parse(read_file(dir.str("out/provenance.json")));
    CHECK(prov["seed"] == 7);
    CHECK(prov["n"] == 600);
}

TEST_CASE("reruns with an identical config are byte-identical except timestamps") {
    TempDir dir("rerun");
    const std::string csv = make_inputs(dir, 400, 1002);
    std::vector<std::string> args{"--mode",  "estimate", "--input", csv,
                                  "--roles", dir.str("roles.txt"), "--estimators", "P-OR",
                                  "--boot",  "40", "--seed", "9"};
    auto with_out = [&](const std::string& out) {
        auto a = args;
        a.push_back("--out");
        a.push_back(dir.str(out));
        return a;
    };
    REQUIRE(run_cli(with_out("o1")) == 0);
    REQUIRE(run_cli(with_out("o2")) == 0);
    CHECK(read_file(dir.str("o1/summary.csv")) == read_file(dir.str("o2/summary.csv")));
    CHECK(read_file(dir.str("o1/report_P-OR.json")) ==
          read_file(dir.str("o2/report_P-OR.json")));
    auto p1 = nlohmann::json::parse(read_file(dir.str("o1/provenance.json")));
    auto p2 = nlohmann::json::parse(read_file(dir.str("o2/provenance.json")));
    p1.erase("timestamp");
    p2.erase("timestamp");
    CHECK(p1 == p2);
}

TEST_CASE("missing role column maps to the config exit code") {
    TempDir dir("roles");
    const std::string csv = make_inputs(dir, 200, 1003);
    write_roles(dir.str("roles.txt"), /*include_z=*/false);
    int code = run_cli({"--mode", "estimate", "--input", csv, "--roles", dir.str("roles.txt"),
                        "--boot", "20", "--seed", "3", "--out", dir.str("out")});
    CHECK(code == 2);
    // and the underlying validation names the missing role
    ColumnRoles broken;
    broken.add("y", Role::outcome);
    broken.add("a", Role::exposure);
    broken.add("m", Role::mediator);
    broken.add("w1", Role::w_proxy);
    CHECK_THROWS_WITH_AS(broken.validate(), doctest::Contains("z_proxy"), ConfigError);
}

TEST_CASE("single-arm data surfaces as a solver error (exit 4)") {
    TempDir dir("onearm");
    const std::string csv = make_inputs(dir, 300, 1004, /*single_arm=*/true);
    int code = run_cli({"--mode", "estimate", "--input", csv, "--roles", dir.str("roles.txt"),
                        "--estimators", "P-IPW", "--boot", "20", "--seed", "3", "--out",
                        dir.str("out")});
    CHECK(code == 4);
}

TEST_CASE("config and data error exit codes") {
    TempDir dir("codes");
    CHECK(run_cli({"--mode", "simulate", "--scenario", "9", "--out", dir.str("s")}) == 2);
    CHECK(run_cli({"--mode", "flyfishing"}) == 2);
    CHECK(run_cli({}) == 2);
    CHECK(run_cli({"--mode", "estimate", "--input", dir.str("absent.csv"), "--role",
                   "y=outcome", "--role", "a=exposure", "--role", "m=mediator", "--role",
                   "w1=w_proxy", "--role", "z1=z_proxy", "--out", dir.str("o")}) == 5);
    // malformed data -> 3
    std::ofstream bad(dir.str("bad.csv"));
    bad << "y,a,m,x1,x2,w1,z1\n1,2,3,4,5,6,7\n";  // exposure value 2
    bad.close();
    write_roles(dir.str("roles.txt"));
    CHECK(run_cli({"--mode", "estimate", "--input", dir.str("bad.csv"), "--roles",
                   dir.str("roles.txt"), "--out", dir.str("o2")}) == 3);
}

TEST_CASE("cmd_simulate fast preset emits the summary and provenance") {
    TempDir dir("simfast");
    int code = run_cli({"--mode", "simulate", "--scenario", "1", "--preset", "fast", "--reps",
                        "2", "--boot", "20", "--n", "250", "--seed", "5", "--threads", "2",
                        "--estimators", "P-OR", "--out", dir.str("out")});
    CHECK(code == 0);
    const std::string csv = read_file(dir.str("out/mc_summary.csv"));
    CHECK(csv.find("scenario,estimator,bias,mse,coverage,length") == 0);
    CHECK(csv.find("P-OR") != std::string::npos);
    auto prov = nlohmann::json::parse(read_file(dir.str("out/provenance.json")));
    CHECK(prov["preset"] == "fast");
    CHECK(prov["tolerances_widened"] == true);
    CHECK(prov["reps"] == 2);
}

TEST_CASE("config file fills flags the command line left unset") {
    RunConfig cfg;
    cfg.boot = 500;
    std::map<std::string, std::string> file_values{{"boot", "25"},
                                                   {"out", "/tmp/somewhere"},
                                                   {"dml.folds", "7"},
                                                   {"dml.bandwidth_h1", "median"},
                                                   {"dml.max_anchors", "128"}};
    SUBCASE("absent flags take config values") {
        merge_config(cfg, file_values, {});
        CHECK(cfg.boot == 25);
        CHECK(cfg.out_dir == "/tmp/somewhere");
        CHECK(cfg.dml_folds == 7);
        CHECK(cfg.dml_bandwidth_h1 == 0.0);
        CHECK(cfg.dml_max_anchors == 128);
    }
    SUBCASE("explicit flags win") {
        cfg.boot = 77;
        merge_config(cfg, file_values, {{"boot", true}});
        CHECK(cfg.boot == 77);
        CHECK(cfg.out_dir == "/tmp/somewhere");
    }
    SUBCASE("bad values raise config errors") {
        std::map<std::string, std::string> bad{{"boot", "many"}};
        CHECK_THROWS_AS(merge_config(cfg, bad, {}), ConfigError);
    }
}

TEST_CASE("config hash is stable and sensitive") {
    RunConfig a;
    a.mode = "estimate";
    a.seed = 7;
    RunConfig b = a;
    CHECK(config_hash(a) == config_hash(b));
    b.boot = 123;
    CHECK(config_hash(a) != config_hash(b));
    CHECK(config_hash(a).size() == 16);
}

TEST_CASE("installed binary honors exit codes end to end") {
    TempDir dir("subproc");
    CHECK(run_binary("--mode simulate --scenario 9") == 2);
    const std::string csv = make_inputs(dir, 300, 1005);
    std::string ok_args = "--mode estimate --input " + csv + " --roles " +
                          dir.str("roles.txt") +
                          " --estimators P-OR --boot 20 --seed 4 --out " + dir.str("out");
    CHECK(run_binary(ok_args) == 0);
    CHECK(fs::exists(dir.str("out/summary.csv")));
}

TEST_CASE("estimate mode supports the cross-fitted estimator") {
    TempDir dir("dml");
    const std::string csv = make_inputs(dir, 400, 1006);
    std::ofstream cfgfile(dir.str("cfg.ini"));
    cfgfile << "[dml]\nfolds=4\nmax_anchors=64\nlambda_h=0.001\nlambda_g=0.001\n";
    cfgfile.close();
    int code = run_cli({"--mode", "estimate", "--input", csv, "--roles", dir.str("roles.txt"),
                        "--estimators", "DML-MR", "--seed", "11", "--threads", "2", "--config",
                        dir.str("cfg.ini"), "--out", dir.str("out")});
    CHECK(code == 0);
    auto j = nlohmann::json::parse(read_file(dir.str("out/report_DML-MR.json")));
    CHECK(j["n_boot"] == 0);  // asymptotic-normal interval
    CHECK(std::isfinite(j["se"].get<double>()));
    CHECK(j["diagnostics"].contains("second_moment_h1"));
}
