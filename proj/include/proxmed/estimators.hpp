#pragma once

#include "proxmed/bridge.hpp"
#include "proxmed/dataset.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace proxmed {

enum class Method { p_or, p_hybrid, p_ipw, p_mr, dr, dml_mr };

std::string method_name(Method m);           // "P-OR", "P-HYBRID", ...
Method method_from_string(const std::string& s);

struct PsiEstimate {
    double psi = 0.0;
    Eigen::VectorXd per_obs_if;  // populated for P-MR (and DML) only
    Method method = Method::p_mr;
};

// psi estimators; the BridgeEvals overloads are the workhorses and accept
// evaluations from parametric, kernel, or oracle bridges alike.
PsiEstimate psi_por(const Dataset& d, const BridgeEvals& ev);
PsiEstimate psi_phybrid(const Dataset& d, const BridgeEvals& ev);
PsiEstimate psi_pipw(const Dataset& d, const BridgeEvals& ev);
PsiEstimate psi_pmr(const Dataset& d, const BridgeEvals& ev);

PsiEstimate psi_por(const Dataset& d, const BridgeParams& p);
PsiEstimate psi_phybrid(const Dataset& d, const BridgeParams& p);
PsiEstimate psi_pipw(const Dataset& d, const BridgeParams& p);
PsiEstimate psi_pmr(const Dataset& d, const BridgeParams& p);

// Influence-function contributions before centering (no -psi term); the
// P-MR estimate is their mean.
Eigen::VectorXd eif_terms(const Dataset& d, const BridgeEvals& ev);

// Influence function at one observation; affine in psi with slope -1.
double eif_value(double y, double a, double h1_obs, double h1_1, double h1_0, double h0_obs,
                 double h0_1, double h0_0, double q0, double q1, double psi);
double eif_value(const Dataset& d, Eigen::Index i, const BridgeParams& p, double psi);

// PIIE = E_n[Y] - psi.
double piie(const Dataset& d, const PsiEstimate& est);

// Generalized front-door plug-in baseline on L = (X, W, Z): linear outcome
// model in (A, M, L), linear mediator model on the A=0 arm, logistic
// propensity. Assumes no unmeasured confounding; fails by design when one
// exists.
PsiEstimate dr_frontdoor(const Dataset& d);

// ---------------------------------------------------------------------------
// Point estimation over a set of methods with shared bridge fits
// ---------------------------------------------------------------------------

struct MisspecFlags {
    bool h1 = false, h0 = false, q0 = false, q1 = false;
    bool any() const { return h1 || h0 || q0 || q1; }
};

// Bridges required by each proximal method (DR needs none).
FitPlan plan_for(const std::vector<Method>& methods, const MisspecFlags& mis);

struct MethodResult {
    bool ok = false;
    double psi = 0.0;
    double piie = 0.0;
    std::string error;
    // moment residual norms, solver iteration counts, clamp events
    std::map<std::string, double> diagnostics;
};

// Fits the union of required bridges once (lenient: a failing bridge only
// disables the methods that need it) and evaluates every requested method.
// d_star supplies the transformed covariates for misspecified bridge fits.
std::map<Method, MethodResult> point_estimates(const Dataset& d, const Dataset* d_star,
                                               const std::vector<Method>& methods,
                                               const MisspecFlags& mis,
                                               const InstrumentBasis& basis);

// ---------------------------------------------------------------------------
// Nonparametric bootstrap (full pipeline per replicate)
// ---------------------------------------------------------------------------

struct BootstrapResult {
    Eigen::VectorXd replicates;  // successful replicates only (PIIE scale)
    double ci_lo = 0.0, ci_hi = 0.0;
    double se = 0.0;
    int n_failed = 0;
    int n_requested = 0;
};

// Percentile bounds with linear interpolation between order statistics.
double percentile(const Eigen::VectorXd& values, double p);

// Resamples rows with replacement B times and re-applies `stat` to each
// replicate. Deterministic given seed: replicate b draws from the RNG stream
// (seed, b), independent of scheduling.
BootstrapResult bootstrap_functional(const Dataset& d,
                                     const std::function<double(const Dataset&)>& stat, int B,
                                     std::uint64_t seed, int threads);

struct BootOrError {
    bool ok = false;
    BootstrapResult result;
    std::string error;
};

// Shared-resample bootstrap: each replicate refits all bridges once and
// evaluates every method on it. Per-method 2.5%/97.5% percentile bounds on
// the PIIE scale. A method whose failure fraction exceeds 20% gets an error
// entry instead of a result.
std::map<Method, BootOrError> bootstrap_methods(const Dataset& d, const Dataset* d_star,
                                                const std::vector<Method>& methods,
                                                const MisspecFlags& mis,
                                                const InstrumentBasis& basis, int B,
                                                std::uint64_t seed, int threads);

// Single-method form; throws SolverError with a stability report when more
// than 20% of replicates fail.
BootstrapResult bootstrap(const Dataset& d, Method method, int B, std::uint64_t seed,
                          const MisspecFlags& mis = {}, const Dataset* d_star = nullptr,
                          int threads = 1);

}  // namespace proxmed
