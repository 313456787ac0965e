#include "proxmed/dml.hpp"

#include "proxmed/errors.hpp"
#include "proxmed/parallel.hpp"
#include "proxmed/rng.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>

namespace proxmed {

FoldPlan make_folds(int n, int folds, std::uint64_t seed) {
    if (folds < 2 || folds > n) {
        throw ConfigError("fold count must satisfy 2 <= L <= n; got L=" +
                          std::to_string(folds) + ", n=" + std::to_string(n));
    }
    std::vector<int> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    auto rng = stream_rng(seed, 0xf01dULL);
    std::shuffle(perm.begin(), perm.end(), rng);
    FoldPlan plan;
    plan.folds = folds;
    plan.seed = seed;
    plan.assignment.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        plan.assignment[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])] =
            i % folds;
    }
    return plan;
}

std::string kernel_role_name(KernelRole role) {
    switch (role) {
        case KernelRole::h1: return "h1";
        case KernelRole::h0_a1: return "h0_a1";
        case KernelRole::h0_a0: return "h0_a0";
        case KernelRole::q0: return "q0";
        case KernelRole::q1: return "q1";
    }
    return "?";
}

namespace {

Eigen::MatrixXd gaussian_kernel(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                                double sigma) {
    // K(u,v) = exp(-|u-v|^2 / (2 sigma^2))
    Eigen::VectorXd an = a.rowwise().squaredNorm();
    Eigen::VectorXd bn = b.rowwise().squaredNorm();
    Eigen::MatrixXd k = -2.0 * (a * b.transpose());
    k.colwise() += an;
    k.rowwise() += bn.transpose();
    return (-k / (2.0 * sigma * sigma)).array().exp().matrix();
}

double median_pairwise_distance(const Eigen::MatrixXd& inputs, std::mt19937_64& rng) {
    const Eigen::Index n = inputs.rows();
    if (n < 2) return 1.0;
    const Eigen::Index cap = std::min<Eigen::Index>(n, 200);
    std::vector<Eigen::Index> rows(static_cast<std::size_t>(n));
    std::iota(rows.begin(), rows.end(), 0);
    if (n > cap) std::shuffle(rows.begin(), rows.end(), rng);
    std::vector<double> dists;
    dists.reserve(static_cast<std::size_t>(cap * (cap - 1) / 2));
    for (Eigen::Index i = 0; i < cap; ++i) {
        for (Eigen::Index j = i + 1; j < cap; ++j) {
            dists.push_back((inputs.row(rows[static_cast<std::size_t>(i)]) -
                             inputs.row(rows[static_cast<std::size_t>(j)]))
                                .norm());
        }
    }
    std::nth_element(dists.begin(), dists.begin() + static_cast<std::ptrdiff_t>(dists.size() / 2),
                     dists.end());
    double med = dists[dists.size() / 2];
    return med > 1e-12 ? med : 1.0;
}

std::vector<Eigen::Index> pick_anchor_rows(Eigen::Index n, int max_anchors,
                                           std::mt19937_64& rng) {
    std::vector<Eigen::Index> rows(static_cast<std::size_t>(n));
    std::iota(rows.begin(), rows.end(), 0);
    if (max_anchors > 0 && n > max_anchors) {
        std::shuffle(rows.begin(), rows.end(), rng);
        rows.resize(static_cast<std::size_t>(max_anchors));
        std::sort(rows.begin(), rows.end());
    }
    return rows;
}

Eigen::MatrixXd take_matrix_rows(const Eigen::MatrixXd& m, const std::vector<Eigen::Index>& r) {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(r.size()), m.cols());
    for (std::size_t i = 0; i < r.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(r[i]);
    return out;
}

// Cholesky with escalating jitter; SolverError when the matrix stays
// indefinite within ridge repair.
Eigen::LLT<Eigen::MatrixXd> chol_with_jitter(Eigen::MatrixXd mat, const std::string& which) {
    const double scale = std::max(mat.trace() / static_cast<double>(mat.rows()), 1e-12);
    double jitter = 1e-12 * scale;
    for (int attempt = 0; attempt < 10; ++attempt) {
        Eigen::MatrixXd trial = mat;
        trial.diagonal().array() += jitter;
        Eigen::LLT<Eigen::MatrixXd> llt(trial);
        if (llt.info() == Eigen::Success) return llt;
        jitter *= 100.0;
    }
    throw SolverError(which + ": kernel matrix ill-conditioned beyond ridge repair");
}

constexpr double kLambdaGrid[] = {1e-4, 1e-3, 1e-2, 1e-1};

struct CoreInputs {
    const Eigen::MatrixXd& v;
    const Eigen::MatrixXd& s;
    const Eigen::VectorXd& weight;
    const Eigen::VectorXd& target;
};

KernelBridge solve_core(KernelRole role, const CoreInputs& in, double sigma_v, double sigma_s,
                        double lambda_h, double lambda_g,
                        const std::vector<Eigen::Index>& anchor_rows) {
    const Eigen::Index n = in.v.rows();
    const double dn = static_cast<double>(n);

    Eigen::MatrixXd v_anchors = take_matrix_rows(in.v, anchor_rows);
    Eigen::MatrixXd s_anchors = take_matrix_rows(in.s, anchor_rows);

    Eigen::MatrixXd g = gaussian_kernel(in.s, s_anchors, sigma_s);      // n x m
    Eigen::MatrixXd k_ss = gaussian_kernel(s_anchors, s_anchors, sigma_s);
    Eigen::MatrixXd b = g.transpose() * g / dn + lambda_g * k_ss;
    auto llt = chol_with_jitter(std::move(b), "minimax_fit[" + kernel_role_name(role) + "]");
    // F = (1/n) G L^-T so that Omega = F F'.
    Eigen::MatrixXd f = llt.matrixU().solve<Eigen::OnTheRight>(g) / dn;

    Eigen::MatrixXd h = gaussian_kernel(in.v, v_anchors, sigma_v);      // n x m
    Eigen::MatrixXd hd = in.weight.asDiagonal() * h;
    Eigen::MatrixXd t = f.transpose() * hd;                              // m x m
    Eigen::MatrixXd k_vv = gaussian_kernel(v_anchors, v_anchors, sigma_v);
    Eigen::MatrixXd sys = t.transpose() * t + 4.0 * lambda_h * k_vv;
    sys.diagonal().array() += 1e-12 * std::max(sys.trace() / static_cast<double>(sys.rows()),
                                               1e-12);
    Eigen::VectorXd ft = f.transpose() * in.target;
    Eigen::VectorXd rhs = t.transpose() * ft;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(sys);
    if (ldlt.info() != Eigen::Success) {
        throw SolverError("minimax_fit[" + kernel_role_name(role) +
                          "]: kernel matrix ill-conditioned beyond ridge repair");
    }

    KernelBridge out;
    out.role = role;
    out.anchors = std::move(v_anchors);
    out.alpha = ldlt.solve(rhs);
    out.sigma = sigma_v;
    out.lambda_h = lambda_h;
    out.lambda_g = lambda_g;
    Eigen::VectorXd resid_proj = t * out.alpha - ft;  // F'(D H alpha - target)
    out.moment_norm = 0.25 * resid_proj.squaredNorm();
    out.objective = out.moment_norm +
                    lambda_h * out.alpha.dot(k_vv * out.alpha);
    return out;
}

// Projected-moment residual of a fitted bridge on held-out data, with a
// fixed small validation ridge.
double validation_score(const KernelBridge& bridge, const Eigen::MatrixXd& v_val,
                        const Eigen::MatrixXd& s_val, const Eigen::VectorXd& weight_val,
                        const Eigen::VectorXd& target_val, double sigma_s) {
    const Eigen::Index n = v_val.rows();
    const double dn = static_cast<double>(n);
    Eigen::VectorXd fitted = bridge.eval(v_val);
    Eigen::VectorXd resid = weight_val.asDiagonal() * fitted - target_val;
    Eigen::MatrixXd k_ss = gaussian_kernel(s_val, s_val, sigma_s);
    const double ridge = 1e-2 / std::sqrt(dn);
    Eigen::MatrixXd b = k_ss * k_ss / dn + ridge * k_ss;
    auto llt = chol_with_jitter(std::move(b), "minimax validation");
    Eigen::MatrixXd f = llt.matrixU().solve<Eigen::OnTheRight>(k_ss) / dn;
    return 0.25 * (f.transpose() * resid).squaredNorm();
}

}  // namespace

Eigen::VectorXd KernelBridge::eval(const Eigen::MatrixXd& inputs) const {
    if (inputs.cols() != anchors.cols()) {
        throw DataError("kernel bridge evaluated with wrong input dimension");
    }
    return gaussian_kernel(inputs, anchors, sigma) * alpha;
}

double KernelBridge::rkhs_norm2() const {
    return alpha.dot(gaussian_kernel(anchors, anchors, sigma) * alpha);
}

KernelBridge minimax_fit_core(KernelRole role, const Eigen::MatrixXd& v_inputs,
                              const Eigen::MatrixXd& s_inputs, const Eigen::VectorXd& weight,
                              const Eigen::VectorXd& target, const MinimaxHyper& hyper,
                              std::uint64_t seed) {
    const Eigen::Index n = v_inputs.rows();
    if (n < 2) throw DataError("minimax_fit requires a nonempty training set");
    if (s_inputs.rows() != n || weight.size() != n || target.size() != n) {
        throw DataError("minimax_fit input blocks must share the row count");
    }

    auto rng = stream_rng(seed, 0xa11cULL, static_cast<std::uint64_t>(role));
    std::vector<Eigen::Index> anchor_rows = pick_anchor_rows(n, hyper.max_anchors, rng);

    double sigma_v = hyper.sigma;
    double sigma_s = hyper.sigma;
    if (sigma_v <= 0.0) sigma_v = median_pairwise_distance(v_inputs, rng);
    if (sigma_s <= 0.0) sigma_s = median_pairwise_distance(s_inputs, rng);

    if (hyper.lambda_h >= 0.0) {
        const double lg = hyper.lambda_g >= 0.0 ? hyper.lambda_g : hyper.lambda_h;
        CoreInputs in{v_inputs, s_inputs, weight, target};
        return solve_core(role, in, sigma_v, sigma_s, hyper.lambda_h, lg, anchor_rows);
    }

    // Grid selection by out-of-fold projected-moment residual (75/25 split).
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    const Eigen::Index n_fit = std::max<Eigen::Index>(2, (3 * n) / 4);
    std::vector<Eigen::Index> fit_rows(order.begin(), order.begin() + n_fit);
    std::vector<Eigen::Index> val_rows(order.begin() + n_fit, order.end());
    std::sort(fit_rows.begin(), fit_rows.end());
    std::sort(val_rows.begin(), val_rows.end());
    if (val_rows.size() < 2) {
        val_rows = fit_rows;  // degenerate split on tiny samples
    }

    Eigen::MatrixXd v_fit = take_matrix_rows(v_inputs, fit_rows);
    Eigen::MatrixXd s_fit = take_matrix_rows(s_inputs, fit_rows);
    Eigen::VectorXd w_fit(static_cast<Eigen::Index>(fit_rows.size()));
    Eigen::VectorXd t_fit(static_cast<Eigen::Index>(fit_rows.size()));
    for (std::size_t i = 0; i < fit_rows.size(); ++i) {
        w_fit[static_cast<Eigen::Index>(i)] = weight[fit_rows[i]];
        t_fit[static_cast<Eigen::Index>(i)] = target[fit_rows[i]];
    }
    Eigen::MatrixXd v_val = take_matrix_rows(v_inputs, val_rows);
    Eigen::MatrixXd s_val = take_matrix_rows(s_inputs, val_rows);
    Eigen::VectorXd w_val(static_cast<Eigen::Index>(val_rows.size()));
    Eigen::VectorXd t_val(static_cast<Eigen::Index>(val_rows.size()));
    for (std::size_t i = 0; i < val_rows.size(); ++i) {
        w_val[static_cast<Eigen::Index>(i)] = weight[val_rows[i]];
        t_val[static_cast<Eigen::Index>(i)] = target[val_rows[i]];
    }

    auto fit_rng = stream_rng(seed, 0xa11cULL, static_cast<std::uint64_t>(role), 0x5e1ULL);
    std::vector<Eigen::Index> fit_anchor_rows =
        pick_anchor_rows(static_cast<Eigen::Index>(fit_rows.size()), hyper.max_anchors, fit_rng);

    const double root_n = std::sqrt(static_cast<double>(n));
    double best_lambda = kLambdaGrid[0] / root_n;
    double best_score = std::numeric_limits<double>::infinity();
    CoreInputs fit_in{v_fit, s_fit, w_fit, t_fit};
    for (double base : kLambdaGrid) {
        const double lambda = base / root_n;
        KernelBridge cand = solve_core(role, fit_in, sigma_v, sigma_s, lambda, lambda,
                                       fit_anchor_rows);
        const double score = validation_score(cand, v_val, s_val, w_val, t_val, sigma_s);
        if (score < best_score) {
            best_score = score;
            best_lambda = lambda;
        }
    }

    CoreInputs in{v_inputs, s_inputs, weight, target};
    return solve_core(role, in, sigma_v, sigma_s, best_lambda, best_lambda, anchor_rows);
}

double adversary_objective(const Eigen::MatrixXd& s_inputs, const Eigen::VectorXd& resid,
                           double sigma, double lambda_g, int max_anchors, std::uint64_t seed) {
    const Eigen::Index n = s_inputs.rows();
    if (resid.size() != n) throw DataError("adversary_objective: size mismatch");
    auto rng = stream_rng(seed, 0xadf0ULL);
    std::vector<Eigen::Index> anchor_rows = pick_anchor_rows(n, max_anchors, rng);
    if (sigma <= 0.0) sigma = median_pairwise_distance(s_inputs, rng);
    Eigen::MatrixXd s_anchors = take_matrix_rows(s_inputs, anchor_rows);
    Eigen::MatrixXd g = gaussian_kernel(s_inputs, s_anchors, sigma);
    Eigen::MatrixXd k_ss = gaussian_kernel(s_anchors, s_anchors, sigma);
    Eigen::MatrixXd b = g.transpose() * g / static_cast<double>(n) + lambda_g * k_ss;
    auto llt = chol_with_jitter(std::move(b), "adversary_objective");
    Eigen::MatrixXd f = llt.matrixU().solve<Eigen::OnTheRight>(g) / static_cast<double>(n);
    return 0.25 * (f.transpose() * resid).squaredNorm();
}

Eigen::MatrixXd h1_inputs(const Dataset& d, int a_mode) {
    Eigen::MatrixXd v(d.n(), d.p_w() + 2 + d.p_x());
    v.leftCols(d.p_w()) = d.w;
    v.col(d.p_w()) = d.m;
    if (a_mode < 0) {
        v.col(d.p_w() + 1) = d.a;
    } else {
        v.col(d.p_w() + 1).setConstant(static_cast<double>(a_mode));
    }
    v.rightCols(d.p_x()) = d.x;
    return v;
}

Eigen::MatrixXd h0_inputs(const Dataset& d) {
    Eigen::MatrixXd v(d.n(), d.p_w() + d.p_x());
    v.leftCols(d.p_w()) = d.w;
    v.rightCols(d.p_x()) = d.x;
    return v;
}

Eigen::MatrixXd q0_inputs(const Dataset& d) {
    Eigen::MatrixXd v(d.n(), d.p_z() + d.p_x());
    v.leftCols(d.p_z()) = d.z;
    v.rightCols(d.p_x()) = d.x;
    return v;
}

Eigen::MatrixXd q1_inputs(const Dataset& d) {
    Eigen::MatrixXd v(d.n(), d.p_z() + 1 + d.p_x());
    v.leftCols(d.p_z()) = d.z;
    v.col(d.p_z()) = d.m;
    v.rightCols(d.p_x()) = d.x;
    return v;
}

namespace {

// Adversary-side input blocks per role.
Eigen::MatrixXd s_inputs_h1(const Dataset& d) {
    Eigen::MatrixXd s(d.n(), d.p_z() + 2 + d.p_x());
    s.leftCols(d.p_z()) = d.z;
    s.col(d.p_z()) = d.a;
    s.col(d.p_z() + 1) = d.m;
    s.rightCols(d.p_x()) = d.x;
    return s;
}

Eigen::MatrixXd s_inputs_h0(const Dataset& d) { return q0_inputs(d); }  // (z, x)

Eigen::MatrixXd s_inputs_q0(const Dataset& d) { return h0_inputs(d); }  // (w, x)

Eigen::MatrixXd s_inputs_q1(const Dataset& d) {
    Eigen::MatrixXd s(d.n(), d.p_w() + 1 + d.p_x());
    s.leftCols(d.p_w()) = d.w;
    s.col(d.p_w()) = d.m;
    s.rightCols(d.p_x()) = d.x;
    return s;
}

Dataset control_subsample(const Dataset& d) {
    std::vector<int> rows;
    for (Eigen::Index i = 0; i < d.n(); ++i) {
        if (d.a[i] == 0.0) rows.push_back(static_cast<int>(i));
    }
    if (rows.empty()) throw SolverError("minimax h0 fit: no A=0 rows in training set");
    return take_rows(d, rows);
}

}  // namespace

KernelBridge minimax_fit(const Dataset& train, KernelRole role, const MinimaxHyper& hyper,
                         const KernelBridge* upstream, std::uint64_t seed) {
    const Eigen::Index n = train.n();
    const Eigen::VectorXd ones = Eigen::VectorXd::Ones(n);
    switch (role) {
        case KernelRole::h1:
            return minimax_fit_core(role, h1_inputs(train, -1), s_inputs_h1(train), ones,
                                    train.y, hyper, seed);
        case KernelRole::h0_a1:
        case KernelRole::h0_a0: {
            if (upstream == nullptr || upstream->role != KernelRole::h1) {
                throw ConfigError("minimax h0 fit needs the fitted h1 bridge");
            }
            Dataset ctrl = control_subsample(train);
            const int a_mode = role == KernelRole::h0_a1 ? 1 : 0;
            Eigen::VectorXd target = upstream->eval(h1_inputs(ctrl, a_mode));
            return minimax_fit_core(role, h0_inputs(ctrl), s_inputs_h0(ctrl),
                                    Eigen::VectorXd::Ones(ctrl.n()), target, hyper, seed);
        }
        case KernelRole::q0: {
            Eigen::VectorXd weight = 1.0 - train.a.array();
            return minimax_fit_core(role, q0_inputs(train), s_inputs_q0(train), weight,
                                    train.a, hyper, seed);
        }
        case KernelRole::q1: {
            if (upstream == nullptr || upstream->role != KernelRole::q0) {
                throw ConfigError("minimax q1 fit needs the fitted q0 bridge");
            }
            Eigen::VectorXd q0_vals = upstream->eval(q0_inputs(train));
            Eigen::VectorXd target =
                ((1.0 - train.a.array()) * q0_vals.array()).matrix();
            return minimax_fit_core(role, q1_inputs(train), s_inputs_q1(train), train.a,
                                    target, hyper, seed);
        }
    }
    throw ConfigError("unknown kernel role");
}

// ---------------------------------------------------------------------------
// Cross-fitted estimator
// ---------------------------------------------------------------------------

namespace {

struct FoldData {
    std::vector<int> train_rows;
    std::vector<int> test_rows;
};

FoldData split_fold(const FoldPlan& plan, int fold) {
    FoldData fd;
    for (std::size_t i = 0; i < plan.assignment.size(); ++i) {
        if (plan.assignment[i] == fold) {
            fd.test_rows.push_back(static_cast<int>(i));
        } else {
            fd.train_rows.push_back(static_cast<int>(i));
        }
    }
    return fd;
}

Eigen::VectorXd clip_floor(const Eigen::VectorXd& v, double floor, long& clipped) {
    Eigen::VectorXd out = v;
    for (Eigen::Index i = 0; i < out.size(); ++i) {
        if (out[i] < floor) {
            out[i] = floor;
            ++clipped;
        }
    }
    return out;
}

}  // namespace

DmlResult psi_dml(const Dataset& d, const DmlOptions& opt, const OracleBridgeFn* oracle,
                  const FoldPlan* plan_in) {
    const int n = static_cast<int>(d.n());
    if (opt.folds < 2) throw ConfigError("cross-fitting requires L >= 2");
    if (n < 10 * opt.folds) {
        throw ConfigError("psi_dml requires n >= 10*L; got n=" + std::to_string(n) +
                          ", L=" + std::to_string(opt.folds));
    }

    DmlResult res;
    res.plan = plan_in != nullptr ? *plan_in : make_folds(n, opt.folds, opt.seed);
    if (static_cast<int>(res.plan.assignment.size()) != n) {
        throw ConfigError("fold plan does not match the dataset size");
    }
    const int n_folds = res.plan.folds;
    res.folds.resize(static_cast<std::size_t>(n_folds));

    // Resolve grid-selected regularizers once per role (on fold 0's training
    // set) and reuse across folds.
    DmlHyper hyper = opt.hyper;
    Eigen::VectorXd terms(n);
    std::vector<long> clip_counts(static_cast<std::size_t>(n_folds), 0);
    std::vector<std::array<double, 4>> second_moments(
        static_cast<std::size_t>(n_folds), std::array<double, 4>{0.0, 0.0, 0.0, 0.0});

    auto run_fold = [&](int fold) {
        FoldData fd = split_fold(res.plan, fold);
        if (fd.test_rows.empty() || fd.train_rows.empty()) {
            throw ConfigError("fold " + std::to_string(fold) + " is empty");
        }
        Dataset test = take_rows(d, fd.test_rows);
        DmlFoldResult& fr = res.folds[static_cast<std::size_t>(fold)];
        fr.fold = fold;
        BridgeEvals ev;
        if (oracle != nullptr) {
            ev = (*oracle)(test);
        } else {
            Dataset train = take_rows(d, fd.train_rows);
            // The fit stream deliberately ignores the fold label: anchor and
            // split choices are positional in the training matrix, so fold
            // relabeling and deletions inside the held-out fold leave the
            // fitted bridges bit-identical.
            const std::uint64_t fold_seed = stream_rng(opt.seed, 0xd311ULL)();
            auto fit_role = [&](KernelRole role, const MinimaxHyper& h,
                                const KernelBridge* up) {
                try {
                    return minimax_fit(train, role, h, up, fold_seed);
                } catch (const std::runtime_error& e) {
                    throw SolverError("psi_dml fold " + std::to_string(fold) + " role " +
                                      kernel_role_name(role) + ": " + e.what());
                }
            };
            fr.h1 = fit_role(KernelRole::h1, hyper.h1, nullptr);
            fr.h0_a1 = fit_role(KernelRole::h0_a1, hyper.h0, &fr.h1);
            fr.h0_a0 = fit_role(KernelRole::h0_a0, hyper.h0, &fr.h1);
            fr.q0 = fit_role(KernelRole::q0, hyper.q0, nullptr);
            fr.q1 = fit_role(KernelRole::q1, hyper.q1, &fr.q0);

            long clipped = 0;
            ev.h1_1 = fr.h1.eval(h1_inputs(test, 1));
            ev.h1_0 = fr.h1.eval(h1_inputs(test, 0));
            ev.h1_obs.resize(test.n());
            for (Eigen::Index i = 0; i < test.n(); ++i) {
                ev.h1_obs[i] = test.a[i] != 0.0 ? ev.h1_1[i] : ev.h1_0[i];
            }
            Eigen::MatrixXd h0_in = h0_inputs(test);
            ev.h0_1 = fr.h0_a1.eval(h0_in);
            ev.h0_0 = fr.h0_a0.eval(h0_in);
            ev.h0_obs.resize(test.n());
            for (Eigen::Index i = 0; i < test.n(); ++i) {
                ev.h0_obs[i] = test.a[i] != 0.0 ? ev.h0_1[i] : ev.h0_0[i];
            }
            ev.q0 = clip_floor(fr.q0.eval(q0_inputs(test)), opt.q_clip, clipped);
            ev.q1 = clip_floor(fr.q1.eval(q1_inputs(test)), opt.q_clip, clipped);
            clip_counts[static_cast<std::size_t>(fold)] = clipped;
        }

        Eigen::VectorXd fold_terms = eif_terms(test, ev);
        fr.psi_fold = fold_terms.mean();
        for (std::size_t i = 0; i < fd.test_rows.size(); ++i) {
            terms[fd.test_rows[i]] = fold_terms[static_cast<Eigen::Index>(i)];
        }

        // Finite-second-moment guard: empirical residual second moments of
        // the four conditional moment equations on the held-out fold.
        auto& sm = second_moments[static_cast<std::size_t>(fold)];
        const Eigen::ArrayXd a = test.a.array();
        sm[0] = (test.y.array() - ev.h1_obs.array()).square().mean();
        double n0 = (1.0 - a).sum();
        sm[1] = n0 > 0
                    ? ((1.0 - a) * (ev.h1_1.array() - ev.h0_1.array()).square()).sum() / n0
                    : 0.0;
        sm[2] = ((1.0 - a) * ev.q0.array() - a).square().mean();
        sm[3] = (a * ev.q1.array() - (1.0 - a) * ev.q0.array()).square().mean();
    };

    if (oracle == nullptr) {
        // Fold 0 first: resolves any grid-selected lambdas.
        run_fold(0);
        auto adopt = [](MinimaxHyper& h, const KernelBridge& b) {
            if (h.lambda_h < 0.0) {
                h.lambda_h = b.lambda_h;
                h.lambda_g = b.lambda_g;
            }
        };
        adopt(hyper.h1, res.folds[0].h1);
        adopt(hyper.h0, res.folds[0].h0_a1);
        adopt(hyper.q0, res.folds[0].q0);
        adopt(hyper.q1, res.folds[0].q1);
        parallel_for(n_folds - 1, opt.threads, [&](int k) { run_fold(k + 1); });
    } else {
        parallel_for(n_folds, opt.threads, [&](int fold) { run_fold(fold); });
    }

    double psi = 0.0;
    for (const auto& fr : res.folds) psi += fr.psi_fold;
    psi /= static_cast<double>(n_folds);

    res.est.method = Method::dml_mr;
    res.est.psi = psi;
    res.est.per_obs_if = terms.array() - psi;
    const double mean_y = empirical_mean_y(d);
    res.piie = mean_y - psi;
    const double dn = static_cast<double>(n);
    res.se_psi = std::sqrt(res.est.per_obs_if.squaredNorm() / (dn - 1.0)) / std::sqrt(dn);
    Eigen::VectorXd if_piie = (d.y.array() - mean_y) - res.est.per_obs_if.array();
    const double mean_if_piie = if_piie.mean();
    res.se_piie = std::sqrt((if_piie.array() - mean_if_piie).square().sum() / (dn - 1.0)) /
                  std::sqrt(dn);

    long clips = 0;
    std::array<double, 4> sm_max{0.0, 0.0, 0.0, 0.0};
    for (int f = 0; f < n_folds; ++f) {
        clips += clip_counts[static_cast<std::size_t>(f)];
        for (int j = 0; j < 4; ++j) {
            sm_max[static_cast<std::size_t>(j)] =
                std::max(sm_max[static_cast<std::size_t>(j)],
                         second_moments[static_cast<std::size_t>(f)][static_cast<std::size_t>(j)]);
        }
    }
    res.diagnostics["q_clipped"] = static_cast<double>(clips);
    res.diagnostics["second_moment_h1"] = sm_max[0];
    res.diagnostics["second_moment_h0"] = sm_max[1];
    res.diagnostics["second_moment_q0"] = sm_max[2];
    res.diagnostics["second_moment_q1"] = sm_max[3];
    res.diagnostics["second_moment_warning"] =
        (sm_max[0] > opt.second_moment_cap || sm_max[1] > opt.second_moment_cap ||
         sm_max[2] > opt.second_moment_cap || sm_max[3] > opt.second_moment_cap)
            ? 1.0
            : 0.0;
    return res;
}

}  // namespace proxmed
