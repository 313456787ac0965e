#pragma once

#include "proxmed/dataset.hpp"

#include <Eigen/Dense>

#include <functional>
#include <string>

namespace proxmed {

// Parameter vectors indexing the four parametric confounding bridge
// functions. Layouts:
//   beta1    = (intercept, w..., m, a, x...)          for h1
//   beta0_a1 = (intercept, w..., x...)                for h0 on the A=1 arm
//   beta0_a0 = (intercept, w..., x...)                for h0 on the A=0 arm
//   gamma0   = (intercept, z..., x...)                for q0 = exp{-gamma0.u}
//   gamma1   = (intercept, z..., m, x...)             for q1 = q0 * exp{gamma1.v}
// The arm-split of beta0 mirrors the sequential per-arm estimating equations;
// the merged (intercept, w..., a, x...) view assumes shared slopes.
struct BridgeParams {
    Eigen::VectorXd beta1;
    Eigen::VectorXd beta0_a1;
    Eigen::VectorXd beta0_a0;
    Eigen::VectorXd gamma0;
    Eigen::VectorXd gamma1;
    int p_w = 0, p_x = 0, p_z = 0;

    static BridgeParams zeros(int p_w, int p_x, int p_z);

    // Installs a shared-slope h0 parameterization (b0, w..., a, x...):
    // arm A=0 gets (b0, w..., x...), arm A=1 the same with intercept b0+b_a.
    void set_beta0_merged(const Eigen::VectorXd& merged);
    // Merged view built from the A=0 arm's slopes and the intercept gap.
    Eigen::VectorXd beta0_merged() const;

    int dim_beta1() const { return 3 + p_w + p_x; }
    int dim_beta0_arm() const { return 1 + p_w + p_x; }
    int dim_gamma0() const { return 1 + p_z + p_x; }
    int dim_gamma1() const { return 2 + p_z + p_x; }
};

// JSON document with named fields and explicit dimensions.
std::string bridge_params_to_json(const BridgeParams& p);
BridgeParams bridge_params_from_json(const std::string& text);

// Vector-valued instrument functions; each output length must equal the
// dimension of the parameter it identifies (exact identification).
struct InstrumentBasis {
    std::function<Eigen::VectorXd(const Eigen::VectorXd& z, double m, double a,
                                  const Eigen::VectorXd& x)>
        c1;
    std::function<Eigen::VectorXd(const Eigen::VectorXd& z, const Eigen::VectorXd& x)> c0;
    std::function<Eigen::VectorXd(const Eigen::VectorXd& w, const Eigen::VectorXd& x)> d0;
    std::function<Eigen::VectorXd(const Eigen::VectorXd& w, double m, const Eigen::VectorXd& x)>
        d1;
};

// c1=(1,Z,M,A,X), c0=(1,Z,X), d0=(1,W,X), d1=(1,W,M,X).
InstrumentBasis default_basis();

// Exponent clamp applied before exponentiation in q0/q1.
inline constexpr double kExpClampBound = 50.0;

double eval_h1(const BridgeParams& p, const Eigen::VectorXd& w, double m, double a,
               const Eigen::VectorXd& x);
double eval_h0(const BridgeParams& p, const Eigen::VectorXd& w, double a,
               const Eigen::VectorXd& x);
// Strictly positive; increments *clamp_count when the exponent is clamped.
double eval_q0(const BridgeParams& p, const Eigen::VectorXd& z, const Eigen::VectorXd& x,
               int* clamp_count = nullptr);
double eval_q1(const BridgeParams& p, const Eigen::VectorXd& z, double m,
               const Eigen::VectorXd& x, int* clamp_count = nullptr);

struct FitDiagnostics {
    double residual_inf = 0.0;  // ||averaged moment||_inf at the solution
    int iterations = 0;
    int clamp_hits = 0;
    bool warm_started = false;
};

struct H1Fit {
    Eigen::VectorXd beta1;
    FitDiagnostics diag;
};
// Solves sum_i [y_i - h1_i] c1_i = 0 exactly (linear system).
H1Fit fit_h1(const Dataset& d, const InstrumentBasis& basis);

struct H0Fit {
    Eigen::VectorXd beta0_a1;
    Eigen::VectorXd beta0_a0;
    FitDiagnostics diag;
};
// Solves, over the A=0 subsample and separately per arm a,
// sum_i (1-a_i) [h1(W_i,M_i,a,X_i) - h0(W_i,a,X_i)] c0_i = 0.
// h1_at_1/h1_at_0 are full-length h1 evaluations (computed on whatever
// covariates h1 was fit with).
H0Fit fit_h0(const Dataset& d, const Eigen::VectorXd& h1_at_1, const Eigen::VectorXd& h1_at_0,
             const InstrumentBasis& basis);
// Convenience: evaluates h1(.,beta1) on d itself.
H0Fit fit_h0(const Dataset& d, const Eigen::VectorXd& beta1, const InstrumentBasis& basis);

struct Q0Fit {
    Eigen::VectorXd gamma0;
    FitDiagnostics diag;
};
// Damped-Newton root of sum_i [(1-a_i) q0_i - a_i] d0_i = 0, multistarted
// from gamma0 = 0 and from a sign-flipped logistic warm start.
Q0Fit fit_q0(const Dataset& d, const InstrumentBasis& basis);

struct Q1Fit {
    Eigen::VectorXd gamma1;
    FitDiagnostics diag;
};
// Damped-Newton root of sum_i [a_i q1_i - (1-a_i) q0_i] d1_i = 0 given fixed
// q0 values (full length, computed on q0's own covariates).
Q1Fit fit_q1(const Dataset& d, const Eigen::VectorXd& q0_values, const InstrumentBasis& basis);
// Convenience: q0 values from p.gamma0 evaluated on d itself.
Q1Fit fit_q1(const Dataset& d, const BridgeParams& p, const InstrumentBasis& basis);

// ---------------------------------------------------------------------------
// Pipeline over all four bridges with per-bridge covariate choice. A bridge
// flagged "mis" is fit AND evaluated with the alternate covariate matrix
// (d_star), i.e. the bridge is misspecified as a model, consistently.
// ---------------------------------------------------------------------------

struct FitPlan {
    bool need_h1 = true, need_h0 = true, need_q0 = true, need_q1 = true;
    bool mis_h1 = false, mis_h0 = false, mis_q0 = false, mis_q1 = false;

    bool any_mis() const { return mis_h1 || mis_h0 || mis_q0 || mis_q1; }
};

struct FittedBridges {
    BridgeParams params;
    bool has_h1 = false, has_h0 = false, has_q0 = false, has_q1 = false;
    bool mis_h1 = false, mis_h0 = false, mis_q0 = false, mis_q1 = false;
    FitDiagnostics diag_h1, diag_h0, diag_q0, diag_q1;
};

// d_star may be null when plan.any_mis() is false. q1 requires q0, h0
// requires h1 (sequential estimating equations).
FittedBridges fit_bridges(const Dataset& d, const Dataset* d_star, const FitPlan& plan,
                          const InstrumentBasis& basis);

// Per-observation bridge values consumed by every psi estimator. Vectors are
// empty for bridges that were not fitted/requested.
struct BridgeEvals {
    Eigen::VectorXd h1_obs, h1_1, h1_0;  // h1 at observed A / A=1 / A=0
    Eigen::VectorXd h0_obs, h0_1, h0_0;
    Eigen::VectorXd q0, q1;
    int clamp_hits = 0;
};

BridgeEvals evaluate_bridges(const Dataset& d, const Dataset* d_star, const FittedBridges& fb);

}  // namespace proxmed
