#include "proxmed/bridge.hpp"

#include "glm.hpp"
#include "proxmed/errors.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>

namespace proxmed {

BridgeParams BridgeParams::zeros(int p_w, int p_x, int p_z) {
    BridgeParams p;
    p.p_w = p_w;
    p.p_x = p_x;
    p.p_z = p_z;
    p.beta1 = Eigen::VectorXd::Zero(p.dim_beta1());
    p.beta0_a1 = Eigen::VectorXd::Zero(p.dim_beta0_arm());
    p.beta0_a0 = Eigen::VectorXd::Zero(p.dim_beta0_arm());
    p.gamma0 = Eigen::VectorXd::Zero(p.dim_gamma0());
    p.gamma1 = Eigen::VectorXd::Zero(p.dim_gamma1());
    return p;
}

void BridgeParams::set_beta0_merged(const Eigen::VectorXd& merged) {
    if (merged.size() != 2 + p_w + p_x) {
        throw DataError("merged beta0 must have length 2 + p_w + p_x");
    }
    Eigen::VectorXd arm(dim_beta0_arm());
    arm[0] = merged[0];
    arm.segment(1, p_w) = merged.segment(1, p_w);
    arm.segment(1 + p_w, p_x) = merged.segment(2 + p_w, p_x);
    beta0_a0 = arm;
    beta0_a1 = arm;
    beta0_a1[0] += merged[1 + p_w];  // exposure main effect
}

Eigen::VectorXd BridgeParams::beta0_merged() const {
    Eigen::VectorXd merged(2 + p_w + p_x);
    merged[0] = beta0_a0[0];
    merged.segment(1, p_w) = beta0_a0.segment(1, p_w);
    merged[1 + p_w] = beta0_a1[0] - beta0_a0[0];
    merged.segment(2 + p_w, p_x) = beta0_a0.segment(1 + p_w, p_x);
    return merged;
}

namespace {

nlohmann::json vec_json(const Eigen::VectorXd& v) {
    nlohmann::json a = nlohmann::json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
    return a;
}

Eigen::VectorXd json_vec(const nlohmann::json& a, const std::string& name, Eigen::Index len) {
    if (!a.is_array()) throw DataError("bridge JSON field '" + name + "' must be an array");
    if (static_cast<Eigen::Index>(a.size()) != len) {
        throw DataError("bridge JSON field '" + name + "' has length " +
                        std::to_string(a.size()) + ", expected " + std::to_string(len));
    }
    Eigen::VectorXd v(len);
    for (Eigen::Index i = 0; i < len; ++i) v[i] = a[static_cast<std::size_t>(i)].get<double>();
    if (!v.allFinite()) throw DataError("bridge JSON field '" + name + "' has non-finite entries");
    return v;
}

}  // namespace

std::string bridge_params_to_json(const BridgeParams& p) {
    nlohmann::json j;
    j["p_w"] = p.p_w;
    j["p_x"] = p.p_x;
    j["p_z"] = p.p_z;
    j["beta1"] = vec_json(p.beta1);
    j["beta0_a1"] = vec_json(p.beta0_a1);
    j["beta0_a0"] = vec_json(p.beta0_a0);
    j["beta0"] = vec_json(p.beta0_merged());  // shared-slope convenience view
    j["gamma0"] = vec_json(p.gamma0);
    j["gamma1"] = vec_json(p.gamma1);
    return j.dump(2);
}

BridgeParams bridge_params_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw DataError(std::string("invalid bridge JSON: ") + e.what());
    }
    for (const char* key : {"p_w", "p_x", "p_z"}) {
        if (!j.contains(key)) throw DataError(std::string("bridge JSON missing '") + key + "'");
    }
    BridgeParams p = BridgeParams::zeros(j["p_w"].get<int>(), j["p_x"].get<int>(),
                                         j["p_z"].get<int>());
    p.beta1 = json_vec(j.at("beta1"), "beta1", p.dim_beta1());
    if (j.contains("beta0_a1") && j.contains("beta0_a0")) {
        p.beta0_a1 = json_vec(j.at("beta0_a1"), "beta0_a1", p.dim_beta0_arm());
        p.beta0_a0 = json_vec(j.at("beta0_a0"), "beta0_a0", p.dim_beta0_arm());
    } else if (j.contains("beta0")) {
        p.set_beta0_merged(json_vec(j.at("beta0"), "beta0", 2 + p.p_w + p.p_x));
    } else {
        throw DataError("bridge JSON missing beta0 (either arms or merged form)");
    }
    p.gamma0 = json_vec(j.at("gamma0"), "gamma0", p.dim_gamma0());
    p.gamma1 = json_vec(j.at("gamma1"), "gamma1", p.dim_gamma1());
    return p;
}

InstrumentBasis default_basis() {
    InstrumentBasis b;
    b.c1 = [](const Eigen::VectorXd& z, double m, double a, const Eigen::VectorXd& x) {
        Eigen::VectorXd v(3 + z.size() + x.size());
        v[0] = 1.0;
        v.segment(1, z.size()) = z;
        v[1 + z.size()] = m;
        v[2 + z.size()] = a;
        v.tail(x.size()) = x;
        return v;
    };
    b.c0 = [](const Eigen::VectorXd& z, const Eigen::VectorXd& x) {
        Eigen::VectorXd v(1 + z.size() + x.size());
        v[0] = 1.0;
        v.segment(1, z.size()) = z;
        v.tail(x.size()) = x;
        return v;
    };
    b.d0 = [](const Eigen::VectorXd& w, const Eigen::VectorXd& x) {
        Eigen::VectorXd v(1 + w.size() + x.size());
        v[0] = 1.0;
        v.segment(1, w.size()) = w;
        v.tail(x.size()) = x;
        return v;
    };
    b.d1 = [](const Eigen::VectorXd& w, double m, const Eigen::VectorXd& x) {
        Eigen::VectorXd v(2 + w.size() + x.size());
        v[0] = 1.0;
        v.segment(1, w.size()) = w;
        v[1 + w.size()] = m;
        v.tail(x.size()) = x;
        return v;
    };
    return b;
}

namespace {

void check_dims(const BridgeParams& p, Eigen::Index w, Eigen::Index x, Eigen::Index z,
                bool need_z) {
    if (w != p.p_w || x != p.p_x || (need_z && z != p.p_z)) {
        throw DataError("bridge evaluation input dimensions do not match parameters");
    }
}

double clamp_exp(double t, int* clamp_count) {
    if (t > kExpClampBound || t < -kExpClampBound) {
        if (clamp_count) ++(*clamp_count);
        t = std::clamp(t, -kExpClampBound, kExpClampBound);
    }
    return std::exp(t);
}

}  // namespace

double eval_h1(const BridgeParams& p, const Eigen::VectorXd& w, double m, double a,
               const Eigen::VectorXd& x) {
    check_dims(p, w.size(), x.size(), 0, false);
    double v = p.beta1[0];
    v += p.beta1.segment(1, p.p_w).dot(w);
    v += p.beta1[1 + p.p_w] * m;
    v += p.beta1[2 + p.p_w] * a;
    v += p.beta1.tail(p.p_x).dot(x);
    return v;
}

double eval_h0(const BridgeParams& p, const Eigen::VectorXd& w, double a,
               const Eigen::VectorXd& x) {
    check_dims(p, w.size(), x.size(), 0, false);
    const Eigen::VectorXd& arm = (a != 0.0) ? p.beta0_a1 : p.beta0_a0;
    return arm[0] + arm.segment(1, p.p_w).dot(w) + arm.tail(p.p_x).dot(x);
}

double eval_q0(const BridgeParams& p, const Eigen::VectorXd& z, const Eigen::VectorXd& x,
               int* clamp_count) {
    if (z.size() != p.p_z || x.size() != p.p_x) {
        throw DataError("bridge evaluation input dimensions do not match parameters");
    }
    double t = p.gamma0[0] + p.gamma0.segment(1, p.p_z).dot(z) + p.gamma0.tail(p.p_x).dot(x);
    return clamp_exp(-t, clamp_count);
}

double eval_q1(const BridgeParams& p, const Eigen::VectorXd& z, double m,
               const Eigen::VectorXd& x, int* clamp_count) {
    double q0 = eval_q0(p, z, x, clamp_count);
    double t = p.gamma1[0] + p.gamma1.segment(1, p.p_z).dot(z) + p.gamma1[1 + p.p_z] * m +
               p.gamma1.tail(p.p_x).dot(x);
    return q0 * clamp_exp(t, clamp_count);
}

// ---------------------------------------------------------------------------
// Estimating-equation solvers
// ---------------------------------------------------------------------------

namespace {

constexpr double kMomentTol = 1e-8;
constexpr int kNewtonMaxIter = 100;
constexpr int kMaxHalvings = 30;

// Instrument matrix: one row per observation.
template <typename RowFn>
Eigen::MatrixXd build_rows(Eigen::Index n, const RowFn& fn) {
    Eigen::VectorXd first = fn(0);
    Eigen::MatrixXd out(n, first.size());
    out.row(0) = first;
    for (Eigen::Index i = 1; i < n; ++i) out.row(i) = fn(i);
    return out;
}

void check_instrument_rank(const Eigen::MatrixXd& instruments, const std::string& which) {
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(instruments);
    qr.setThreshold(1e-10);
    if (qr.rank() < instruments.cols()) {
        // Identify a redundant instrument dimension from the pivoting order.
        Eigen::Index bad = qr.colsPermutation().indices()[instruments.cols() - 1];
        throw SolverError(which + ": instrument matrix is rank deficient (rank " +
                          std::to_string(qr.rank()) + " of " +
                          std::to_string(instruments.cols()) + "); instrument dimension " +
                          std::to_string(bad) + " is redundant");
    }
}

[[noreturn]] void throw_rank_error(const Eigen::MatrixXd& moment_matrix,
                                   const std::string& which) {
    // Name the instrument dimension most aligned with the left null space.
    Eigen::FullPivLU<Eigen::MatrixXd> lu(moment_matrix.transpose());
    std::string detail;
    Eigen::MatrixXd ker = lu.kernel();
    if (ker.cols() > 0) {
        Eigen::Index bad = 0;
        ker.col(0).cwiseAbs().maxCoeff(&bad);
        detail = "; instrument dimension " + std::to_string(bad) + " is redundant";
    }
    throw SolverError(which + ": singular moment matrix (rank " +
                      std::to_string(lu.rank()) + " of " +
                      std::to_string(moment_matrix.rows()) + ")" + detail);
}

// Exact solve of the linear moment system C'(t - F b) = 0.
struct LinearMomentFit {
    Eigen::VectorXd params;
    double residual_inf;
};

LinearMomentFit solve_linear_moment(const Eigen::MatrixXd& instruments,
                                    const Eigen::MatrixXd& features,
                                    const Eigen::VectorXd& target, const std::string& which) {
    if (instruments.cols() != features.cols()) {
        throw ConfigError(which + ": exact identification needs dim(instruments) = " +
                          std::to_string(features.cols()) + ", got " +
                          std::to_string(instruments.cols()));
    }
    const double n = static_cast<double>(instruments.rows());
    Eigen::MatrixXd g = instruments.transpose() * features / n;
    Eigen::VectorXd b = instruments.transpose() * target / n;
    Eigen::FullPivLU<Eigen::MatrixXd> lu(g);
    lu.setThreshold(1e-10);
    if (lu.rank() < g.cols()) throw_rank_error(g, which);
    LinearMomentFit fit;
    fit.params = lu.solve(b);
    if (!fit.params.allFinite()) {
        throw SolverError(which + ": solution is not finite");
    }
    fit.residual_inf = (b - g * fit.params).cwiseAbs().maxCoeff();
    if (fit.residual_inf > kMomentTol) {
        throw SolverError(which + ": moment residual " + std::to_string(fit.residual_inf) +
                          " exceeds tolerance (ill-conditioned system)");
    }
    return fit;
}

// Damped Newton on an averaged moment g(theta) with analytic Jacobian.
struct NewtonProblem {
    std::function<Eigen::VectorXd(const Eigen::VectorXd&, Eigen::MatrixXd* jac, int* clamps)>
        moment;
    int dim;
};

struct NewtonOutcome {
    Eigen::VectorXd theta;
    double residual_inf = std::numeric_limits<double>::infinity();
    int iterations = 0;
    int clamp_hits = 0;
    bool converged = false;
};

NewtonOutcome damped_newton(const NewtonProblem& prob, const Eigen::VectorXd& start) {
    NewtonOutcome out;
    out.theta = start;
    Eigen::MatrixXd jac(prob.dim, prob.dim);
    Eigen::VectorXd g = prob.moment(out.theta, &jac, &out.clamp_hits);
    double merit = g.norm();  // step acceptance uses the l2 residual norm
    int stagnant = 0;

    for (int it = 0; it < kNewtonMaxIter; ++it) {
        if (g.cwiseAbs().maxCoeff() < kMomentTol) break;
        ++out.iterations;
        const double merit_before = merit;

        bool accepted = false;
        auto try_point = [&](const Eigen::VectorXd& trial) {
            Eigen::MatrixXd trial_jac(prob.dim, prob.dim);
            int trial_clamps = 0;
            Eigen::VectorXd trial_g = prob.moment(trial, &trial_jac, &trial_clamps);
            double trial_merit = trial_g.norm();
            if (std::isfinite(trial_merit) && trial_merit < merit) {
                out.theta = trial;
                g = trial_g;
                jac = trial_jac;
                merit = trial_merit;
                out.clamp_hits += trial_clamps;
                return true;
            }
            return false;
        };

        Eigen::FullPivLU<Eigen::MatrixXd> lu(jac);
        lu.setThreshold(1e-12);
        if (lu.rank() == prob.dim) {
            // Step-norm cap keeps the exponential moment systems out of the
            // clamped region where derivatives vanish; halving damps the rest.
            Eigen::VectorXd step = lu.solve(-g);
            const double cap = 2.0;
            if (step.norm() > cap) step *= cap / step.norm();
            double scale = 1.0;
            for (int h = 0; h <= kMaxHalvings && !accepted; ++h) {
                accepted = try_point(out.theta + scale * step);
                scale *= 0.5;
            }
        }

        if (!accepted) {
            // Levenberg-regularized fallback; the mu escalation is itself the
            // damping, so each candidate is evaluated once.
            Eigen::MatrixXd jtj = jac.transpose() * jac;
            Eigen::VectorXd jtg = jac.transpose() * g;
            const double base = std::max(jtj.trace() / prob.dim, 1e-12);
            for (double mu = 1e-6 * base; mu <= 1e6 * base && !accepted; mu *= 30.0) {
                Eigen::MatrixXd lhs = jtj;
                lhs.diagonal().array() += mu;
                accepted = try_point(out.theta + lhs.ldlt().solve(-jtg));
            }
        }
        if (!accepted) break;
        // Fail fast on hopeless (rootless) systems: tiny relative progress.
        if (merit > (1.0 - 1e-4) * merit_before) {
            if (++stagnant >= 8) break;
        } else {
            stagnant = 0;
        }
    }
    out.converged = g.cwiseAbs().maxCoeff() < kMomentTol;
    out.residual_inf = g.cwiseAbs().maxCoeff();
    return out;
}

}  // namespace

H1Fit fit_h1(const Dataset& d, const InstrumentBasis& basis) {
    const Eigen::Index n = d.n();
    Eigen::MatrixXd instruments = build_rows(n, [&](Eigen::Index i) {
        return basis.c1(d.z.row(i).transpose(), d.m[i], d.a[i], d.x.row(i).transpose());
    });
    const Eigen::Index k = 3 + d.p_w() + d.p_x();
    Eigen::MatrixXd features(n, k);
    features.col(0).setOnes();
    features.middleCols(1, d.p_w()) = d.w;
    features.col(1 + d.p_w()) = d.m;
    features.col(2 + d.p_w()) = d.a;
    features.rightCols(d.p_x()) = d.x;

    LinearMomentFit fit = solve_linear_moment(instruments, features, d.y, "fit_h1");
    H1Fit out;
    out.beta1 = fit.params;
    out.diag.residual_inf = fit.residual_inf;
    out.diag.iterations = 1;
    return out;
}

H0Fit fit_h0(const Dataset& d, const Eigen::VectorXd& h1_at_1, const Eigen::VectorXd& h1_at_0,
             const InstrumentBasis& basis) {
    const Eigen::Index n = d.n();
    if (h1_at_1.size() != n || h1_at_0.size() != n) {
        throw DataError("fit_h0: h1 evaluation vectors must have length n");
    }
    std::vector<int> controls;
    for (Eigen::Index i = 0; i < n; ++i) {
        if (d.a[i] == 0.0) controls.push_back(static_cast<int>(i));
    }
    if (controls.empty()) throw SolverError("fit_h0 precondition: no A=0 rows in dataset");

    const Eigen::Index n0 = static_cast<Eigen::Index>(controls.size());
    Eigen::MatrixXd instruments = build_rows(n0, [&](Eigen::Index i) {
        const int r = controls[static_cast<std::size_t>(i)];
        return basis.c0(d.z.row(r).transpose(), d.x.row(r).transpose());
    });
    const Eigen::Index k = 1 + d.p_w() + d.p_x();
    Eigen::MatrixXd features(n0, k);
    Eigen::VectorXd t1(n0), t0(n0);
    for (Eigen::Index i = 0; i < n0; ++i) {
        const int r = controls[static_cast<std::size_t>(i)];
        features(i, 0) = 1.0;
        features.row(i).segment(1, d.p_w()) = d.w.row(r);
        features.row(i).tail(d.p_x()) = d.x.row(r);
        t1[i] = h1_at_1[r];
        t0[i] = h1_at_0[r];
    }

    H0Fit out;
    LinearMomentFit fit1 = solve_linear_moment(instruments, features, t1, "fit_h0[a=1]");
    LinearMomentFit fit0 = solve_linear_moment(instruments, features, t0, "fit_h0[a=0]");
    out.beta0_a1 = fit1.params;
    out.beta0_a0 = fit0.params;
    out.diag.residual_inf = std::max(fit1.residual_inf, fit0.residual_inf);
    out.diag.iterations = 1;
    return out;
}

H0Fit fit_h0(const Dataset& d, const Eigen::VectorXd& beta1, const InstrumentBasis& basis) {
    BridgeParams p = BridgeParams::zeros(static_cast<int>(d.p_w()), static_cast<int>(d.p_x()),
                                         static_cast<int>(d.p_z()));
    p.beta1 = beta1;
    const Eigen::Index n = d.n();
    Eigen::VectorXd h1_at_1(n), h1_at_0(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        h1_at_1[i] = eval_h1(p, d.w.row(i).transpose(), d.m[i], 1.0, d.x.row(i).transpose());
        h1_at_0[i] = eval_h1(p, d.w.row(i).transpose(), d.m[i], 0.0, d.x.row(i).transpose());
    }
    return fit_h0(d, h1_at_1, h1_at_0, basis);
}

Q0Fit fit_q0(const Dataset& d, const InstrumentBasis& basis) {
    const Eigen::Index n = d.n();
    const double sum_a = d.a.sum();
    if (sum_a <= 0.0 || sum_a >= static_cast<double>(n)) {
        throw SolverError("fit_q0 precondition: both exposure arms must be present");
    }

    Eigen::MatrixXd instruments = build_rows(n, [&](Eigen::Index i) {
        return basis.d0(d.w.row(i).transpose(), d.x.row(i).transpose());
    });
    const Eigen::Index k = 1 + d.p_z() + d.p_x();
    if (instruments.cols() != k) {
        throw ConfigError("fit_q0: exact identification needs dim(d0) = " + std::to_string(k) +
                          ", got " + std::to_string(instruments.cols()));
    }
    check_instrument_rank(instruments, "fit_q0");
    Eigen::MatrixXd exponent_features(n, k);  // u_i = (1, z_i, x_i)
    exponent_features.col(0).setOnes();
    exponent_features.middleCols(1, d.p_z()) = d.z;
    exponent_features.rightCols(d.p_x()) = d.x;

    NewtonProblem prob;
    prob.dim = static_cast<int>(k);
    prob.moment = [&](const Eigen::VectorXd& gamma, Eigen::MatrixXd* jac, int* clamps) {
        Eigen::VectorXd g = Eigen::VectorXd::Zero(k);
        if (jac) jac->setZero(k, k);
        for (Eigen::Index i = 0; i < n; ++i) {
            const double t = -exponent_features.row(i).dot(gamma);
            const bool clamped = (t > kExpClampBound || t < -kExpClampBound);
            if (clamped && clamps) ++(*clamps);
            const double q = std::exp(std::clamp(t, -kExpClampBound, kExpClampBound));
            const double resid = (1.0 - d.a[i]) * q - d.a[i];
            g += resid * instruments.row(i).transpose();
            if (jac && !clamped && d.a[i] == 0.0) {
                jac->noalias() -=
                    q * instruments.row(i).transpose() * exponent_features.row(i);
            }
        }
        g /= static_cast<double>(n);
        if (jac) *jac /= static_cast<double>(n);
        return g;
    };

    // Multistart: gamma0 = 0, then a logistic warm start with the sign
    // flipped to match the exp{-.} parameterization.
    NewtonOutcome best;
    bool warm = false;
    NewtonOutcome run = damped_newton(prob, Eigen::VectorXd::Zero(k));
    best = run;
    if (!run.converged) {
        Eigen::VectorXd warm_start = -logistic_irls(exponent_features, d.a);
        NewtonOutcome run2 = damped_newton(prob, warm_start);
        if (run2.residual_inf < best.residual_inf) {
            best = run2;
            warm = true;
        }
    }
    if (!best.converged || !best.theta.allFinite()) {
        throw SolverError("fit_q0 did not converge; final moment residual " +
                          std::to_string(best.residual_inf));
    }
    Q0Fit out;
    out.gamma0 = best.theta;
    out.diag.residual_inf = best.residual_inf;
    out.diag.iterations = best.iterations;
    out.diag.clamp_hits = best.clamp_hits;
    out.diag.warm_started = warm;
    return out;
}

Q1Fit fit_q1(const Dataset& d, const Eigen::VectorXd& q0_values, const InstrumentBasis& basis) {
    const Eigen::Index n = d.n();
    if (q0_values.size() != n) throw DataError("fit_q1: q0 value vector must have length n");
    if ((q0_values.array() <= 0.0).any()) {
        throw DataError("fit_q1: q0 values must be strictly positive");
    }

    Eigen::MatrixXd instruments = build_rows(n, [&](Eigen::Index i) {
        return basis.d1(d.w.row(i).transpose(), d.m[i], d.x.row(i).transpose());
    });
    const Eigen::Index k = 2 + d.p_z() + d.p_x();
    if (instruments.cols() != k) {
        throw ConfigError("fit_q1: exact identification needs dim(d1) = " + std::to_string(k) +
                          ", got " + std::to_string(instruments.cols()));
    }
    check_instrument_rank(instruments, "fit_q1");
    Eigen::MatrixXd exponent_features(n, k);  // v_i = (1, z_i, m_i, x_i)
    exponent_features.col(0).setOnes();
    exponent_features.middleCols(1, d.p_z()) = d.z;
    exponent_features.col(1 + d.p_z()) = d.m;
    exponent_features.rightCols(d.p_x()) = d.x;

    // Control-arm contribution is constant in gamma1.
    Eigen::VectorXd control_term = Eigen::VectorXd::Zero(k);
    for (Eigen::Index i = 0; i < n; ++i) {
        if (d.a[i] == 0.0) control_term += q0_values[i] * instruments.row(i).transpose();
    }

    NewtonProblem prob;
    prob.dim = static_cast<int>(k);
    prob.moment = [&](const Eigen::VectorXd& gamma, Eigen::MatrixXd* jac, int* clamps) {
        Eigen::VectorXd g = -control_term;
        if (jac) jac->setZero(k, k);
        for (Eigen::Index i = 0; i < n; ++i) {
            if (d.a[i] != 1.0) continue;
            const double t = exponent_features.row(i).dot(gamma);
            const bool clamped = (t > kExpClampBound || t < -kExpClampBound);
            if (clamped && clamps) ++(*clamps);
            const double q1 = q0_values[i] * std::exp(std::clamp(t, -kExpClampBound,
                                                                 kExpClampBound));
            g += q1 * instruments.row(i).transpose();
            if (jac && !clamped) {
                jac->noalias() += q1 * instruments.row(i).transpose() * exponent_features.row(i);
            }
        }
        g /= static_cast<double>(n);
        if (jac) *jac /= static_cast<double>(n);
        return g;
    };

    // Multistart: zero, an intercept-balanced start, and a logistic-derived
    // start (q0 * exp(gamma1.v) ~ odds(A=0|Z,M,X) suggests
    // gamma1 ~ gamma0-padded minus the logistic coefficients).
    std::vector<Eigen::VectorXd> starts;
    starts.push_back(Eigen::VectorXd::Zero(k));
    double treated_mass = 0.0, control_mass = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        if (d.a[i] == 1.0) {
            treated_mass += q0_values[i];
        } else {
            control_mass += q0_values[i];
        }
    }
    if (treated_mass > 0.0 && control_mass > 0.0) {
        Eigen::VectorXd balanced = Eigen::VectorXd::Zero(k);
        balanced[0] = std::log(control_mass / treated_mass);
        starts.push_back(balanced);
    }
    bool warm = false;
    NewtonOutcome best;
    best.residual_inf = std::numeric_limits<double>::infinity();
    for (std::size_t s = 0; s < starts.size() && !best.converged; ++s) {
        NewtonOutcome run = damped_newton(prob, starts[s]);
        if (run.residual_inf < best.residual_inf) best = run;
    }
    if (!best.converged) {
        try {
            // q0 * exp(gamma1.v) should track odds(A=0|Z,M,X), so start from
            // gamma1 = -(logistic coefficients + projection of log q0 on v).
            Eigen::VectorXd logit = logistic_irls(exponent_features, d.a);
            Eigen::VectorXd log_q0 = q0_values.array().log();
            Eigen::VectorXd proj =
                (exponent_features.transpose() * exponent_features)
                    .ldlt()
                    .solve(exponent_features.transpose() * log_q0);
            NewtonOutcome run = damped_newton(prob, -(logit + proj));
            if (run.residual_inf < best.residual_inf) {
                best = run;
                warm = true;
            }
        } catch (const SolverError&) {
        }
    }
    if (!best.converged || !best.theta.allFinite()) {
        throw SolverError("fit_q1 did not converge; final moment residual " +
                          std::to_string(best.residual_inf));
    }
    Q1Fit out;
    out.gamma1 = best.theta;
    out.diag.residual_inf = best.residual_inf;
    out.diag.iterations = best.iterations;
    out.diag.clamp_hits = best.clamp_hits;
    out.diag.warm_started = warm;
    return out;
}

Q1Fit fit_q1(const Dataset& d, const BridgeParams& p, const InstrumentBasis& basis) {
    const Eigen::Index n = d.n();
    Eigen::VectorXd q0_values(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        q0_values[i] = eval_q0(p, d.z.row(i).transpose(), d.x.row(i).transpose());
    }
    return fit_q1(d, q0_values, basis);
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

namespace {

const Dataset& pick(const Dataset& d, const Dataset* d_star, bool mis) {
    if (!mis) return d;
    if (!d_star) throw ConfigError("fit plan flags a misspecified bridge but no alternate "
                                   "covariate dataset was supplied");
    return *d_star;
}

}  // namespace

FittedBridges fit_bridges(const Dataset& d, const Dataset* d_star, const FitPlan& plan,
                          const InstrumentBasis& basis) {
    FittedBridges fb;
    fb.params = BridgeParams::zeros(static_cast<int>(d.p_w()), static_cast<int>(d.p_x()),
                                    static_cast<int>(d.p_z()));
    fb.mis_h1 = plan.mis_h1;
    fb.mis_h0 = plan.mis_h0;
    fb.mis_q0 = plan.mis_q0;
    fb.mis_q1 = plan.mis_q1;

    const Eigen::Index n = d.n();

    if (plan.need_h1 || plan.need_h0) {
        const Dataset& dh1 = pick(d, d_star, plan.mis_h1);
        H1Fit h1 = fit_h1(dh1, basis);
        fb.params.beta1 = h1.beta1;
        fb.diag_h1 = h1.diag;
        fb.has_h1 = true;

        if (plan.need_h0) {
            // Targets use h1's own covariates; the h0 design uses its own.
            Eigen::VectorXd h1_at_1(n), h1_at_0(n);
            for (Eigen::Index i = 0; i < n; ++i) {
                h1_at_1[i] = eval_h1(fb.params, dh1.w.row(i).transpose(), dh1.m[i], 1.0,
                                     dh1.x.row(i).transpose());
                h1_at_0[i] = eval_h1(fb.params, dh1.w.row(i).transpose(), dh1.m[i], 0.0,
                                     dh1.x.row(i).transpose());
            }
            const Dataset& dh0 = pick(d, d_star, plan.mis_h0);
            H0Fit h0 = fit_h0(dh0, h1_at_1, h1_at_0, basis);
            fb.params.beta0_a1 = h0.beta0_a1;
            fb.params.beta0_a0 = h0.beta0_a0;
            fb.diag_h0 = h0.diag;
            fb.has_h0 = true;
        }
    }

    if (plan.need_q0 || plan.need_q1) {
        const Dataset& dq0 = pick(d, d_star, plan.mis_q0);
        Q0Fit q0 = fit_q0(dq0, basis);
        fb.params.gamma0 = q0.gamma0;
        fb.diag_q0 = q0.diag;
        fb.has_q0 = true;

        if (plan.need_q1) {
            Eigen::VectorXd q0_values(n);
            for (Eigen::Index i = 0; i < n; ++i) {
                q0_values[i] = eval_q0(fb.params, dq0.z.row(i).transpose(),
                                       dq0.x.row(i).transpose());
            }
            const Dataset& dq1 = pick(d, d_star, plan.mis_q1);
            Q1Fit q1 = fit_q1(dq1, q0_values, basis);
            fb.params.gamma1 = q1.gamma1;
            fb.diag_q1 = q1.diag;
            fb.has_q1 = true;
        }
    }
    return fb;
}

BridgeEvals evaluate_bridges(const Dataset& d, const Dataset* d_star, const FittedBridges& fb) {
    BridgeEvals ev;
    const Eigen::Index n = d.n();
    const BridgeParams& p = fb.params;

    if (fb.has_h1) {
        const Dataset& dd = pick(d, d_star, fb.mis_h1);
        ev.h1_obs.resize(n);
        ev.h1_1.resize(n);
        ev.h1_0.resize(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            const auto w = dd.w.row(i).transpose();
            const auto x = dd.x.row(i).transpose();
            ev.h1_1[i] = eval_h1(p, w, dd.m[i], 1.0, x);
            ev.h1_0[i] = eval_h1(p, w, dd.m[i], 0.0, x);
            ev.h1_obs[i] = (d.a[i] != 0.0) ? ev.h1_1[i] : ev.h1_0[i];
        }
    }
    if (fb.has_h0) {
        const Dataset& dd = pick(d, d_star, fb.mis_h0);
        ev.h0_obs.resize(n);
        ev.h0_1.resize(n);
        ev.h0_0.resize(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            const auto w = dd.w.row(i).transpose();
            const auto x = dd.x.row(i).transpose();
            ev.h0_1[i] = eval_h0(p, w, 1.0, x);
            ev.h0_0[i] = eval_h0(p, w, 0.0, x);
            ev.h0_obs[i] = (d.a[i] != 0.0) ? ev.h0_1[i] : ev.h0_0[i];
        }
    }
    if (fb.has_q0) {
        const Dataset& dd = pick(d, d_star, fb.mis_q0);
        ev.q0.resize(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            ev.q0[i] = eval_q0(p, dd.z.row(i).transpose(), dd.x.row(i).transpose(),
                               &ev.clamp_hits);
        }
    }
    if (fb.has_q1) {
        // q1 = q0-part (q0's covariates) times the exp factor (q1's covariates).
        const Dataset& dq0 = pick(d, d_star, fb.mis_q0);
        const Dataset& dq1 = pick(d, d_star, fb.mis_q1);
        ev.q1.resize(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            const double q0 = eval_q0(p, dq0.z.row(i).transpose(), dq0.x.row(i).transpose(),
                                      &ev.clamp_hits);
            const double t = p.gamma1[0] + p.gamma1.segment(1, p.p_z).dot(dq1.z.row(i)) +
                             p.gamma1[1 + p.p_z] * dq1.m[i] +
                             p.gamma1.tail(p.p_x).dot(dq1.x.row(i));
            const bool clamped = (t > kExpClampBound || t < -kExpClampBound);
            if (clamped) ++ev.clamp_hits;
            ev.q1[i] = q0 * std::exp(std::clamp(t, -kExpClampBound, kExpClampBound));
        }
    }
    return ev;
}

}  // namespace proxmed
