#include "proxmed/estimators.hpp"

#include "glm.hpp"
#include "proxmed/errors.hpp"
#include "proxmed/parallel.hpp"
#include "proxmed/rng.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>

namespace proxmed {

std::string method_name(Method m) {
    switch (m) {
        case Method::p_or: return "P-OR";
        case Method::p_hybrid: return "P-HYBRID";
        case Method::p_ipw: return "P-IPW";
        case Method::p_mr: return "P-MR";
        case Method::dr: return "DR";
        case Method::dml_mr: return "DML-MR";
    }
    return "?";
}

Method method_from_string(const std::string& s) {
    std::string u;
    u.reserve(s.size());
    for (char c : s) u.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
    if (u == "P-OR" || u == "POR") return Method::p_or;
    if (u == "P-HYBRID" || u == "PHYBRID") return Method::p_hybrid;
    if (u == "P-IPW" || u == "PIPW") return Method::p_ipw;
    if (u == "P-MR" || u == "PMR") return Method::p_mr;
    if (u == "DR") return Method::dr;
    if (u == "DML-MR" || u == "DMLMR" || u == "DML") return Method::dml_mr;
    throw ConfigError("unknown estimator '" + s + "'");
}

namespace {

void require(bool ok, const char* what) {
    if (!ok) throw DataError(std::string("estimator requires bridge evaluations: ") + what);
}

}  // namespace

PsiEstimate psi_por(const Dataset& d, const BridgeEvals& ev) {
    require(ev.h0_obs.size() == d.n(), "h0");
    PsiEstimate out;
    out.method = Method::p_or;
    out.psi = ev.h0_obs.mean();
    return out;
}

PsiEstimate psi_phybrid(const Dataset& d, const BridgeEvals& ev) {
    require(ev.h1_1.size() == d.n() && ev.h1_0.size() == d.n(), "h1");
    require(ev.q0.size() == d.n(), "q0");
    PsiEstimate out;
    out.method = Method::p_hybrid;
    const Eigen::ArrayXd control = 1.0 - d.a.array();
    out.psi = (control * (ev.q0.array() * ev.h1_1.array() + ev.h1_0.array())).mean();
    return out;
}

PsiEstimate psi_pipw(const Dataset& d, const BridgeEvals& ev) {
    require(ev.q1.size() == d.n(), "q1");
    PsiEstimate out;
    out.method = Method::p_ipw;
    out.psi = (d.a.array() * ev.q1.array() * d.y.array() +
               (1.0 - d.a.array()) * d.y.array())
                  .mean();
    return out;
}

Eigen::VectorXd eif_terms(const Dataset& d, const BridgeEvals& ev) {
    const Eigen::Index n = d.n();
    require(ev.h1_obs.size() == n && ev.h1_1.size() == n && ev.h1_0.size() == n, "h1");
    require(ev.h0_obs.size() == n && ev.h0_1.size() == n && ev.h0_0.size() == n, "h0");
    require(ev.q0.size() == n, "q0");
    require(ev.q1.size() == n, "q1");
    const Eigen::ArrayXd a = d.a.array();
    const Eigen::ArrayXd control = 1.0 - a;
    return (control * ev.q0.array() * (ev.h1_1.array() - ev.h0_1.array()) +
            control * (ev.h1_0.array() - ev.h0_0.array()) +
            (a * ev.q1.array() + control) * (d.y.array() - ev.h1_obs.array()) +
            ev.h0_obs.array())
        .matrix();
}

PsiEstimate psi_pmr(const Dataset& d, const BridgeEvals& ev) {
    PsiEstimate out;
    out.method = Method::p_mr;
    Eigen::VectorXd terms = eif_terms(d, ev);
    out.psi = terms.mean();
    out.per_obs_if = terms.array() - out.psi;
    return out;
}

double eif_value(double y, double a, double h1_obs, double h1_1, double h1_0, double h0_obs,
                 double h0_1, double h0_0, double q0, double q1, double psi) {
    const double control = 1.0 - a;
    return control * q0 * (h1_1 - h0_1) + control * (h1_0 - h0_0) +
           (a * q1 + control) * (y - h1_obs) + h0_obs - psi;
}

namespace {

BridgeEvals evals_from_params(const Dataset& d, const BridgeParams& p) {
    FittedBridges fb;
    fb.params = p;
    fb.has_h1 = fb.has_h0 = fb.has_q0 = fb.has_q1 = true;
    return evaluate_bridges(d, nullptr, fb);
}

}  // namespace

double eif_value(const Dataset& d, Eigen::Index i, const BridgeParams& p, double psi) {
    const auto w = d.w.row(i).transpose();
    const auto x = d.x.row(i).transpose();
    const auto z = d.z.row(i).transpose();
    const double h1_1 = eval_h1(p, w, d.m[i], 1.0, x);
    const double h1_0 = eval_h1(p, w, d.m[i], 0.0, x);
    const double h1_obs = (d.a[i] != 0.0) ? h1_1 : h1_0;
    const double h0_1 = eval_h0(p, w, 1.0, x);
    const double h0_0 = eval_h0(p, w, 0.0, x);
    const double h0_obs = (d.a[i] != 0.0) ? h0_1 : h0_0;
    return eif_value(d.y[i], d.a[i], h1_obs, h1_1, h1_0, h0_obs, h0_1, h0_0,
                     eval_q0(p, z, x), eval_q1(p, z, d.m[i], x), psi);
}

PsiEstimate psi_por(const Dataset& d, const BridgeParams& p) {
    return psi_por(d, evals_from_params(d, p));
}
PsiEstimate psi_phybrid(const Dataset& d, const BridgeParams& p) {
    return psi_phybrid(d, evals_from_params(d, p));
}
PsiEstimate psi_pipw(const Dataset& d, const BridgeParams& p) {
    return psi_pipw(d, evals_from_params(d, p));
}
PsiEstimate psi_pmr(const Dataset& d, const BridgeParams& p) {
    return psi_pmr(d, evals_from_params(d, p));
}

double piie(const Dataset& d, const PsiEstimate& est) {
    return empirical_mean_y(d) - est.psi;
}

PsiEstimate dr_frontdoor(const Dataset& d) {
    const Eigen::Index n = d.n();
    const Eigen::Index p_l = d.p_x() + d.p_w() + d.p_z();
    Eigen::MatrixXd l(n, p_l);
    l << d.x, d.w, d.z;

    // Outcome model: Y ~ (1, A, M, L).
    Eigen::MatrixXd design_y(n, 3 + p_l);
    design_y.col(0).setOnes();
    design_y.col(1) = d.a;
    design_y.col(2) = d.m;
    design_y.rightCols(p_l) = l;
    Eigen::VectorXd coef_y = ols_solve(design_y, d.y, "dr_frontdoor outcome model");

    // Mediator model: M ~ (1, L) over the A=0 arm.
    std::vector<int> controls;
    for (Eigen::Index i = 0; i < n; ++i) {
        if (d.a[i] == 0.0) controls.push_back(static_cast<int>(i));
    }
    if (controls.empty()) throw SolverError("dr_frontdoor precondition: no A=0 rows");
    Eigen::MatrixXd design_m(static_cast<Eigen::Index>(controls.size()), 1 + p_l);
    Eigen::VectorXd m_ctrl(static_cast<Eigen::Index>(controls.size()));
    for (std::size_t i = 0; i < controls.size(); ++i) {
        design_m(static_cast<Eigen::Index>(i), 0) = 1.0;
        design_m.row(static_cast<Eigen::Index>(i)).tail(p_l) = l.row(controls[i]);
        m_ctrl[static_cast<Eigen::Index>(i)] = d.m[controls[i]];
    }
    Eigen::VectorXd coef_m = ols_solve(design_m, m_ctrl, "dr_frontdoor mediator model");

    // Propensity: logistic A ~ (1, L).
    Eigen::MatrixXd design_a(n, 1 + p_l);
    design_a.col(0).setOnes();
    design_a.rightCols(p_l) = l;
    Eigen::VectorXd coef_a = logistic_irls(design_a, d.a);

    // psi = (1/n) sum_i sum_a P(a|L_i) E[Y | a, m0(L_i), L_i]; with the
    // outcome model linear in (A, M, L) this collapses to one pass.
    double acc = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const double eta = design_a.row(i).dot(coef_a);
        const double p1 = 1.0 / (1.0 + std::exp(-std::clamp(eta, -30.0, 30.0)));
        const double m0 = coef_m[0] + l.row(i).dot(coef_m.tail(p_l));
        acc += coef_y[0] + coef_y[1] * p1 + coef_y[2] * m0 + l.row(i).dot(coef_y.tail(p_l));
    }
    PsiEstimate out;
    out.method = Method::dr;
    out.psi = acc / static_cast<double>(n);
    return out;
}

// ---------------------------------------------------------------------------
// Multi-method point estimation
// ---------------------------------------------------------------------------

FitPlan plan_for(const std::vector<Method>& methods, const MisspecFlags& mis) {
    FitPlan plan;
    plan.need_h1 = plan.need_h0 = plan.need_q0 = plan.need_q1 = false;
    for (Method m : methods) {
        switch (m) {
            case Method::p_or:
                plan.need_h1 = plan.need_h0 = true;
                break;
            case Method::p_hybrid:
                plan.need_h1 = plan.need_q0 = true;
                break;
            case Method::p_ipw:
                plan.need_q0 = plan.need_q1 = true;
                break;
            case Method::p_mr:
                plan.need_h1 = plan.need_h0 = plan.need_q0 = plan.need_q1 = true;
                break;
            default:
                break;
        }
    }
    plan.mis_h1 = mis.h1;
    plan.mis_h0 = mis.h0;
    plan.mis_q0 = mis.q0;
    plan.mis_q1 = mis.q1;
    return plan;
}

namespace {

struct LenientBridges {
    FittedBridges fb;
    std::string err_h1, err_h0, err_q0, err_q1;
};

LenientBridges fit_bridges_lenient(const Dataset& d, const Dataset* d_star, const FitPlan& plan,
                                   const InstrumentBasis& basis) {
    LenientBridges out;
    FitPlan stage = plan;

    // h-chain and q-chain fail independently; within a chain the downstream
    // fit is skipped when the upstream one failed.
    stage.need_q0 = stage.need_q1 = false;
    if (plan.need_h1 || plan.need_h0) {
        try {
            FittedBridges fb = fit_bridges(d, d_star, stage, basis);
            out.fb.params = fb.params;
            out.fb.has_h1 = fb.has_h1;
            out.fb.has_h0 = fb.has_h0;
            out.fb.diag_h1 = fb.diag_h1;
            out.fb.diag_h0 = fb.diag_h0;
        } catch (const std::runtime_error& e) {
            out.err_h1 = out.err_h0 = e.what();
            // h1 alone may still be salvageable for P-HYBRID.
            if (plan.need_h1 && plan.need_h0) {
                try {
                    FitPlan only_h1 = stage;
                    only_h1.need_h0 = false;
                    FittedBridges fb = fit_bridges(d, d_star, only_h1, basis);
                    out.fb.params.beta1 = fb.params.beta1;
                    out.fb.has_h1 = true;
                    out.fb.diag_h1 = fb.diag_h1;
                    out.err_h1.clear();
                } catch (const std::runtime_error&) {
                }
            }
        }
    }

    stage = plan;
    stage.need_h1 = stage.need_h0 = false;
    if (plan.need_q0 || plan.need_q1) {
        try {
            FittedBridges fb = fit_bridges(d, d_star, stage, basis);
            out.fb.params.gamma0 = fb.params.gamma0;
            out.fb.params.gamma1 = fb.params.gamma1;
            out.fb.has_q0 = fb.has_q0;
            out.fb.has_q1 = fb.has_q1;
            out.fb.diag_q0 = fb.diag_q0;
            out.fb.diag_q1 = fb.diag_q1;
        } catch (const std::runtime_error& e) {
            out.err_q0 = out.err_q1 = e.what();
            if (plan.need_q0 && plan.need_q1) {
                try {
                    FitPlan only_q0 = stage;
                    only_q0.need_q1 = false;
                    FittedBridges fb = fit_bridges(d, d_star, only_q0, basis);
                    out.fb.params.gamma0 = fb.params.gamma0;
                    out.fb.has_q0 = true;
                    out.fb.diag_q0 = fb.diag_q0;
                    out.err_q0.clear();
                } catch (const std::runtime_error&) {
                }
            }
        }
    }

    out.fb.mis_h1 = plan.mis_h1;
    out.fb.mis_h0 = plan.mis_h0;
    out.fb.mis_q0 = plan.mis_q0;
    out.fb.mis_q1 = plan.mis_q1;
    return out;
}

}  // namespace

std::map<Method, MethodResult> point_estimates(const Dataset& d, const Dataset* d_star,
                                               const std::vector<Method>& methods,
                                               const MisspecFlags& mis,
                                               const InstrumentBasis& basis) {
    std::map<Method, MethodResult> out;
    const double mean_y = empirical_mean_y(d);

    std::vector<Method> proximal;
    for (Method m : methods) {
        if (m == Method::p_or || m == Method::p_hybrid || m == Method::p_ipw ||
            m == Method::p_mr) {
            proximal.push_back(m);
        }
    }

    LenientBridges lb;
    BridgeEvals ev;
    if (!proximal.empty()) {
        lb = fit_bridges_lenient(d, d_star, plan_for(proximal, mis), basis);
        ev = evaluate_bridges(d, d_star, lb.fb);
    }

    auto bridge_diags = [&](MethodResult& r) {
        auto put = [&](const char* tag, bool has, const FitDiagnostics& diag) {
            if (!has) return;
            r.diagnostics[std::string(tag) + "_residual"] = diag.residual_inf;
            r.diagnostics[std::string(tag) + "_iterations"] = diag.iterations;
            if (diag.clamp_hits > 0) {
                r.diagnostics[std::string(tag) + "_clamped"] = diag.clamp_hits;
            }
        };
        put("h1", lb.fb.has_h1, lb.fb.diag_h1);
        put("h0", lb.fb.has_h0, lb.fb.diag_h0);
        put("q0", lb.fb.has_q0, lb.fb.diag_q0);
        put("q1", lb.fb.has_q1, lb.fb.diag_q1);
    };
    auto finish = [&](Method m, const PsiEstimate& est) {
        MethodResult r;
        r.ok = true;
        r.psi = est.psi;
        r.piie = mean_y - est.psi;
        if (m != Method::dr) bridge_diags(r);
        out[m] = r;
    };
    auto fail = [&](Method m, const std::string& err) {
        MethodResult r;
        r.error = err.empty() ? "bridge fit failed" : err;
        out[m] = r;
    };

    for (Method m : methods) {
        switch (m) {
            case Method::p_or:
                if (lb.fb.has_h0) {
                    finish(m, psi_por(d, ev));
                } else {
                    fail(m, lb.err_h0);
                }
                break;
            case Method::p_hybrid:
                if (lb.fb.has_h1 && lb.fb.has_q0) {
                    finish(m, psi_phybrid(d, ev));
                } else {
                    fail(m, lb.fb.has_h1 ? lb.err_q0 : lb.err_h1);
                }
                break;
            case Method::p_ipw:
                if (lb.fb.has_q1) {
                    finish(m, psi_pipw(d, ev));
                } else {
                    fail(m, lb.err_q1);
                }
                break;
            case Method::p_mr:
                if (lb.fb.has_h1 && lb.fb.has_h0 && lb.fb.has_q0 && lb.fb.has_q1) {
                    finish(m, psi_pmr(d, ev));
                } else {
                    fail(m, !lb.err_h0.empty() ? lb.err_h0 : lb.err_q1);
                }
                break;
            case Method::dr:
                try {
                    finish(m, dr_frontdoor(d));
                } catch (const std::runtime_error& e) {
                    fail(m, e.what());
                }
                break;
            case Method::dml_mr:
                fail(m, "DML-MR is not available through point_estimates; use psi_dml");
                break;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Bootstrap
// ---------------------------------------------------------------------------

double percentile(const Eigen::VectorXd& values, double p) {
    if (values.size() == 0) throw DataError("percentile of empty sample");
    std::vector<double> v(values.data(), values.data() + values.size());
    std::sort(v.begin(), v.end());
    if (v.size() == 1) return v[0];
    const double h = p * static_cast<double>(v.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(std::floor(h));
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    const double frac = h - static_cast<double>(lo);
    return v[lo] * (1.0 - frac) + v[hi] * frac;
}

namespace {

std::vector<int> resample_indices(Eigen::Index n, std::mt19937_64& rng) {
    std::uniform_int_distribution<int> pick(0, static_cast<int>(n) - 1);
    std::vector<int> idx(static_cast<std::size_t>(n));
    for (auto& v : idx) v = pick(rng);
    return idx;
}

double sample_sd(const Eigen::VectorXd& v) {
    if (v.size() < 2) return 0.0;
    const double mean = v.mean();
    return std::sqrt((v.array() - mean).square().sum() / static_cast<double>(v.size() - 1));
}

BootstrapResult summarize_replicates(const std::vector<double>& ok_values, int B) {
    BootstrapResult res;
    res.n_requested = B;
    res.n_failed = B - static_cast<int>(ok_values.size());
    res.replicates = Eigen::Map<const Eigen::VectorXd>(
        ok_values.data(), static_cast<Eigen::Index>(ok_values.size()));
    if (!ok_values.empty()) {
        res.ci_lo = percentile(res.replicates, 0.025);
        res.ci_hi = percentile(res.replicates, 0.975);
        res.se = sample_sd(res.replicates);
    }
    return res;
}

constexpr std::uint64_t kBootStream = 0xb0075ULL;

}  // namespace

BootstrapResult bootstrap_functional(const Dataset& d,
                                     const std::function<double(const Dataset&)>& stat, int B,
                                     std::uint64_t seed, int threads) {
    if (B < 2) throw ConfigError("bootstrap requires B >= 2");
    std::vector<double> values(static_cast<std::size_t>(B),
                               std::numeric_limits<double>::quiet_NaN());
    parallel_for(B, threads, [&](int b) {
        auto rng = stream_rng(seed, kBootStream, static_cast<std::uint64_t>(b));
        Dataset rep = take_rows(d, resample_indices(d.n(), rng));
        try {
            values[static_cast<std::size_t>(b)] = stat(rep);
        } catch (const std::runtime_error&) {
            // left as NaN -> counted as failed
        }
    });
    std::vector<double> ok;
    ok.reserve(values.size());
    for (double v : values) {
        if (std::isfinite(v)) ok.push_back(v);
    }
    return summarize_replicates(ok, B);
}

std::map<Method, BootOrError> bootstrap_methods(const Dataset& d, const Dataset* d_star,
                                                const std::vector<Method>& methods,
                                                const MisspecFlags& mis,
                                                const InstrumentBasis& basis, int B,
                                                std::uint64_t seed, int threads) {
    if (B < 2) throw ConfigError("bootstrap requires B >= 2");
    struct Cell {
        double value = std::numeric_limits<double>::quiet_NaN();
        std::string error;
    };
    std::vector<std::map<Method, Cell>> grid(static_cast<std::size_t>(B));

    parallel_for(B, threads, [&](int b) {
        auto rng = stream_rng(seed, kBootStream, static_cast<std::uint64_t>(b));
        std::vector<int> idx = resample_indices(d.n(), rng);
        Dataset rep = take_rows(d, idx);
        Dataset rep_star;
        const Dataset* rep_star_ptr = nullptr;
        if (d_star != nullptr) {
            rep_star = take_rows(*d_star, idx);
            rep_star_ptr = &rep_star;
        }
        auto& row = grid[static_cast<std::size_t>(b)];
        try {
            auto ests = point_estimates(rep, rep_star_ptr, methods, mis, basis);
            for (const auto& [m, r] : ests) {
                Cell c;
                if (r.ok) {
                    c.value = r.piie;
                } else {
                    c.error = r.error;
                }
                row[m] = c;
            }
        } catch (const std::runtime_error& e) {
            for (Method m : methods) row[m] = Cell{std::numeric_limits<double>::quiet_NaN(),
                                                   e.what()};
        }
    });

    std::map<Method, BootOrError> out;
    for (Method m : methods) {
        std::vector<double> ok;
        std::string first_error;
        for (const auto& row : grid) {
            auto it = row.find(m);
            if (it == row.end()) continue;
            if (std::isfinite(it->second.value)) {
                ok.push_back(it->second.value);
            } else if (first_error.empty()) {
                first_error = it->second.error;
            }
        }
        BootOrError be;
        const int n_failed = B - static_cast<int>(ok.size());
        if (n_failed > B / 5) {
            be.ok = false;
            be.error = "bootstrap unstable for " + method_name(m) + ": " +
                       std::to_string(n_failed) + " of " + std::to_string(B) +
                       " replicates failed bridge solving (first error: " + first_error + ")";
        } else {
            be.ok = true;
            be.result = summarize_replicates(ok, B);
        }
        out[m] = be;
    }
    return out;
}

BootstrapResult bootstrap(const Dataset& d, Method method, int B, std::uint64_t seed,
                          const MisspecFlags& mis, const Dataset* d_star, int threads) {
    auto res = bootstrap_methods(d, d_star, {method}, mis, default_basis(), B, seed, threads);
    const BootOrError& be = res.at(method);
    if (!be.ok) throw SolverError(be.error);
    return be.result;
}

}  // namespace proxmed
