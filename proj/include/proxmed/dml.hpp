#pragma once

#include "proxmed/bridge.hpp"
#include "proxmed/dataset.hpp"
#include "proxmed/estimators.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace proxmed {

struct FoldPlan {
    int folds = 0;
    std::vector<int> assignment;  // values in [0, folds)
    std::uint64_t seed = 0;
};

// Deterministic balanced partition (fold sizes differ by at most one).
FoldPlan make_folds(int n, int folds, std::uint64_t seed);

enum class KernelRole { h1, h0_a1, h0_a0, q0, q1 };
std::string kernel_role_name(KernelRole role);

// Gaussian-kernel bridge: a finite expansion sum_j alpha_j K(., anchor_j).
struct KernelBridge {
    KernelRole role = KernelRole::h1;
    Eigen::MatrixXd anchors;   // m x d training inputs (possibly subsampled)
    Eigen::VectorXd alpha;     // m dual weights
    double sigma = 1.0;        // evaluation-side bandwidth
    double lambda_h = 0.0;
    double lambda_g = 0.0;
    double objective = 0.0;    // regularized minimax value at the solution
    double moment_norm = 0.0;  // projected-moment part of the objective

    Eigen::VectorXd eval(const Eigen::MatrixXd& inputs) const;
    double rkhs_norm2() const;  // alpha' K(anchors,anchors) alpha
};

struct MinimaxHyper {
    double sigma = 0.0;      // <= 0: median pairwise-distance heuristic per block
    double lambda_h = -1.0;  // < 0: chosen from the default grid by out-of-fold
    double lambda_g = -1.0;  //      projected-moment residual (tied to lambda_h)
    int max_anchors = 256;
};

// Minimax reduction with Gaussian RKHS balls for both the bridge and the
// adversary: the inner sup is available in closed form, leaving the m x m
// system  [T'T + 4*lambda_h*K_VV] alpha = T' F' t,  with T = F' D H,
// F = (1/n) K_S L^-T  and  L L' = K_S'K_S/n + lambda_g K_SS.
// Residual convention: r(alpha) = D (H alpha) - t.
KernelBridge minimax_fit_core(KernelRole role, const Eigen::MatrixXd& v_inputs,
                              const Eigen::MatrixXd& s_inputs, const Eigen::VectorXd& weight,
                              const Eigen::VectorXd& target, const MinimaxHyper& hyper,
                              std::uint64_t seed);

// Role wiring on a Dataset. h0_* needs the fitted h1 upstream; q1 needs q0.
KernelBridge minimax_fit(const Dataset& train, KernelRole role, const MinimaxHyper& hyper,
                         const KernelBridge* upstream, std::uint64_t seed);

// Value of the adversarial part of the minimax objective, 0.25 r' Omega r,
// for externally supplied residuals r (e.g. at a candidate bridge).
double adversary_objective(const Eigen::MatrixXd& s_inputs, const Eigen::VectorXd& resid,
                           double sigma, double lambda_g, int max_anchors, std::uint64_t seed);

// Per-role evaluation input blocks.
Eigen::MatrixXd h1_inputs(const Dataset& d, int a_mode);  // -1 observed, 0, 1
Eigen::MatrixXd h0_inputs(const Dataset& d);
Eigen::MatrixXd q0_inputs(const Dataset& d);
Eigen::MatrixXd q1_inputs(const Dataset& d);

struct DmlHyper {
    MinimaxHyper h1, h0, q0, q1;
};

struct DmlOptions {
    int folds = 5;
    DmlHyper hyper;
    std::uint64_t seed = 1;
    int threads = 0;
    double q_clip = 1e-6;            // lower clip for kernel q evaluations
    double second_moment_cap = 1e3;  // warning threshold (finite-moment guard)
};

struct DmlFoldResult {
    int fold = 0;
    double psi_fold = 0.0;
    KernelBridge h1, h0_a1, h0_a0, q0, q1;  // empty when oracle bridges injected
};

struct DmlResult {
    PsiEstimate est;  // psi = fold average; per_obs_if = plug-in EIF contributions
    double se_psi = 0.0;
    double se_piie = 0.0;
    double piie = 0.0;
    FoldPlan plan;
    std::vector<DmlFoldResult> folds;
    std::map<std::string, double> diagnostics;
};

// Supplies bridge evaluations directly (e.g. the closed-form truths),
// bypassing the minimax learners but keeping the cross-fitting structure.
using OracleBridgeFn = std::function<BridgeEvals(const Dataset& fold_rows)>;

// Cross-fitted debiased estimate: per fold, bridges are fit on the
// complement and the fold estimate is assembled on the fold; the final
// estimate is the plain fold average. se derives from the EIF variance.
DmlResult psi_dml(const Dataset& d, const DmlOptions& opt,
                  const OracleBridgeFn* oracle = nullptr, const FoldPlan* plan = nullptr);

}  // namespace proxmed
