#pragma once

#include "proxmed/bridge.hpp"
#include "proxmed/dataset.hpp"
#include "proxmed/estimators.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <vector>

namespace proxmed {

// Coefficients of the generative chain (X,U) -> A -> (Z,W,M) -> Y with
// (X1,X2,U) multivariate normal. Defaults reproduce the benchmark design.
struct DgpCoefficients {
    Eigen::Vector3d mean_xu{0.25, 0.25, 0.0};
    Eigen::Matrix3d cov_xu;  // symmetric positive definite

    // P(A=1|X,U) = expit(a0 + ax.X + au*U)
    double a0 = 0.0;
    Eigen::Vector2d ax{-0.5, -0.5};
    double au = -0.4;

    // Z | A,X,U ~ N(z0 + za*A + zx.X + zu*U, z_sd^2)
    double z0 = 0.2, za = -0.52, zu = -1.0, z_sd = 1.0;
    Eigen::Vector2d zx{0.2, 0.2};

    // W | X,U ~ N(w0 + wx.X + wu*U, w_sd^2)
    double w0 = 0.3, wu = -0.6, w_sd = 1.0;
    Eigen::Vector2d wx{0.2, 0.2};

    // M | A,X,U ~ N(m0 + ma*A + mx.X + mu*U, m_sd^2)
    double m0 = 0.0, ma = -0.3, mu = 1.5, m_sd = 1.0;
    Eigen::Vector2d mx{-0.5, -0.5};

    // Y = y0 + ya*A + ym*M + yw*W + yx.X + yu*U + y_sd * noise
    double y0 = 2.0, ya = 2.0, ym = 1.0, yw = 2.0, yu = -1.0, y_sd = 2.0;
    Eigen::Vector2d yx{-1.0, -1.0};

    DgpCoefficients();
    void validate() const;  // throws ConfigError on an invalid covariance
};

struct GeneratedData {
    Dataset data;
    Eigen::VectorXd u;  // latent confounder, for oracle use only
};

// Draws the full chain in order; deterministic per (coef, n, seed).
GeneratedData generate(const DgpCoefficients& coef, Eigen::Index n, std::uint64_t seed);

// Closed-form bridge parameters implied by the generative chain: matched
// linear coefficients for (h1, h0) and the log-linear exposure-odds maps
// for (q0, q1).
BridgeParams true_bridge_params(const DgpCoefficients& coef);

// Copy with X replaced by (sqrt|X1|+3, sqrt|X2|+3); used only inside the
// bridge fits a scenario designates as misspecified. Throws DataError when
// applied twice.
Dataset misspecify_x(const Dataset& d);

// Number of misspecify_x invocations in this process (test hook).
long misspecify_x_call_count();

struct ScenarioSpec {
    int id = 1;
    MisspecFlags misspecified;
};

// The four benchmark configurations: 1 none, 2 {q1,q0}, 3 {q1,h0}, 4 {h1,h0}.
ScenarioSpec scenario_by_id(int id);

struct OracleTruth {
    double psi_true = 0.0;
    double piie_true = 0.0;
    double se_psi = 0.0;   // Monte Carlo standard errors
    double se_piie = 0.0;
    double e_a = 0.0;  // mean exposure under the DGP
    double e_y = 0.0;  // mean outcome (factual arm of the oracle draws)
};

// Counterfactual Monte Carlo with common random numbers across arms.
OracleTruth oracle_truth(const DgpCoefficients& coef, std::int64_t draws, std::uint64_t seed);

struct McRow {
    Method method = Method::p_mr;
    double bias = 0.0;
    double mse = 0.0;
    double coverage = 0.0;  // fraction of 95% CIs containing the oracle truth
    double mean_len = 0.0;
    int n_ok = 0;
    int n_failed = 0;
};

struct RepRecord {
    bool ok = false;
    double piie = 0.0, ci_lo = 0.0, ci_hi = 0.0;
};

struct McSummary {
    int scenario = 1;
    int reps = 0;
    int n = 0;
    int boot = 0;
    std::uint64_t seed = 0;
    bool invalid = false;  // > 10% replication failures for some estimator
    double piie_true = 0.0;
    double psi_true = 0.0;
    std::vector<McRow> rows;
    // per-method, per-replication records (row order matches `rows`)
    std::vector<std::vector<RepRecord>> per_rep;
};

struct ScenarioOptions {
    int reps = 100;
    int n = 1000;
    int boot = 200;
    std::uint64_t seed = 1;
    std::vector<Method> estimators{Method::dr, Method::p_or, Method::p_hybrid, Method::p_ipw,
                                   Method::p_mr};
    int threads = 0;                  // <=0: hardware default
    std::int64_t oracle_draws = 4'000'000;
    std::uint64_t oracle_seed = 99;
};

// One replication: generate -> (misspecified) bridge fits -> point estimates
// and percentile bootstrap CIs -> aggregate against the oracle truth.
// Replication r uses the RNG stream (seed, r); adding replications never
// perturbs earlier ones.
McSummary run_scenario(const ScenarioSpec& spec, const DgpCoefficients& coef,
                       const ScenarioOptions& opt);

// Table-shaped CSV: scenario,estimator,bias,mse,coverage,length(,extras).
void write_mc_summary_csv(const std::vector<McSummary>& summaries, const std::string& path,
                          const std::string& config_hash);

}  // namespace proxmed
