#include "proxmed/sim.hpp"

#include "proxmed/errors.hpp"
#include "proxmed/parallel.hpp"
#include "proxmed/rng.hpp"

#include <atomic>
#include <cmath>
#include <fstream>

namespace proxmed {

DgpCoefficients::DgpCoefficients() {
    cov_xu << 0.25, 0.0, 0.05,
              0.0, 0.25, 0.05,
              0.05, 0.05, 1.0;
}

void DgpCoefficients::validate() const {
    if (!cov_xu.isApprox(cov_xu.transpose(), 1e-12)) {
        throw ConfigError("DGP covariance must be symmetric");
    }
    Eigen::LLT<Eigen::Matrix3d> llt(cov_xu);
    if (llt.info() != Eigen::Success) {
        throw ConfigError("DGP covariance must be positive definite");
    }
}

namespace {

double expit(double t) { return 1.0 / (1.0 + std::exp(-t)); }

}  // namespace

GeneratedData generate(const DgpCoefficients& coef, Eigen::Index n, std::uint64_t seed) {
    coef.validate();
    if (n < 1) throw ConfigError("generate requires n >= 1");
    auto rng = stream_rng(seed, 0xda7aULL);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> unif(0.0, 1.0);

    Eigen::Matrix3d chol = Eigen::LLT<Eigen::Matrix3d>(coef.cov_xu).matrixL();

    GeneratedData out;
    Dataset& d = out.data;
    d.y.resize(n);
    d.a.resize(n);
    d.m.resize(n);
    d.x.resize(n, 2);
    d.w.resize(n, 1);
    d.z.resize(n, 1);
    out.u.resize(n);

    for (Eigen::Index i = 0; i < n; ++i) {
        Eigen::Vector3d raw(gauss(rng), gauss(rng), gauss(rng));
        Eigen::Vector3d xu = coef.mean_xu + chol * raw;
        const Eigen::Vector2d x = xu.head<2>();
        const double u = xu[2];
        const double a = unif(rng) < expit(coef.a0 + coef.ax.dot(x) + coef.au * u) ? 1.0 : 0.0;
        const double z = coef.z0 + coef.za * a + coef.zx.dot(x) + coef.zu * u +
                         coef.z_sd * gauss(rng);
        const double w = coef.w0 + coef.wx.dot(x) + coef.wu * u + coef.w_sd * gauss(rng);
        const double m = coef.m0 + coef.ma * a + coef.mx.dot(x) + coef.mu * u +
                         coef.m_sd * gauss(rng);
        const double y = coef.y0 + coef.ya * a + coef.ym * m + coef.yw * w + coef.yx.dot(x) +
                         coef.yu * u + coef.y_sd * gauss(rng);
        d.x.row(i) = x.transpose();
        out.u[i] = u;
        d.a[i] = a;
        d.z(i, 0) = z;
        d.w(i, 0) = w;
        d.m[i] = m;
        d.y[i] = y;
    }
    return out;
}

BridgeParams true_bridge_params(const DgpCoefficients& coef) {
    BridgeParams p = BridgeParams::zeros(1, 2, 1);

    // h1: match E[Y|U,A,M,X] = E[h1(W,M,A,X)|U,A,M,X] through E[W|U,X].
    const double b1w = coef.yw + coef.yu / coef.wu;
    Eigen::VectorXd beta1(p.dim_beta1());
    beta1[0] = coef.y0 + (coef.yw - b1w) * coef.w0;
    beta1[1] = b1w;
    beta1[2] = coef.ym;
    beta1[3] = coef.ya;
    beta1.tail(2) = coef.yx + (coef.yw - b1w) * coef.wx;
    p.beta1 = beta1;

    // h0: match E[h1(W,M,a,X)|U,A=0,X] = E[h0(W,a,X)|U,A=0,X] through the
    // M model.
    const double b0w = b1w + coef.ym * coef.mu / coef.wu;
    Eigen::VectorXd merged(2 + 1 + 2);
    merged[0] = beta1[0] + (b1w - b0w) * coef.w0 + coef.ym * coef.m0;
    merged[1] = b0w;
    merged[2] = coef.ya;
    merged.tail(2) = beta1.tail(2).eval() + (b1w - b0w) * coef.wx + coef.ym * coef.mx;
    p.set_beta0_merged(merged);

    // Exposure odds: log f(A=1|U,X)/f(A=0|U,X) = a0 + ax.X + au*U, so the
    // log-linear map through the Z model gives gamma0 (note the exp{-.}
    // parameterization flips all signs).
    const double alpha00 = -coef.a0;
    const Eigen::Vector2d alpha0x = -coef.ax;
    const double alpha0u = -coef.au;
    const double z_var = coef.z_sd * coef.z_sd;
    p.gamma0[0] = alpha00 - (alpha0u / coef.zu) * (coef.z0 - alpha0u * z_var / (2.0 * coef.zu));
    p.gamma0[1] = alpha0u / coef.zu;
    p.gamma0.tail(2) = alpha0x - (alpha0u / coef.zu) * coef.zx;

    // q1 adds the M-tilted odds: log f(A=0|U,M,X)/f(A=1|U,M,X)
    //   = alpha10 + alpha1m*M + alpha1u*U + alpha1x.X.
    // The intercept comes from matching Gaussian moment-generating terms of
    // Z on both sides of the U-level integral equation (verified against the
    // empirical conditional moments at n=1e6).
    const double m_var = coef.m_sd * coef.m_sd;
    const double alpha10 = (coef.ma / m_var) * (coef.ma / 2.0 + coef.m0) + alpha00;
    const double alpha1m = -coef.ma / m_var;
    const double alpha1u = coef.ma * coef.mu / m_var + alpha0u;
    const Eigen::Vector2d alpha1x = (coef.ma / m_var) * coef.mx + alpha0x;
    const double g0z = p.gamma0[1];
    const double g1z = alpha1u / coef.zu;
    p.gamma1[0] = alpha10 - g0z * coef.z0 + g0z * g0z * z_var / 2.0 -
                  (g1z - g0z) * (coef.z0 + coef.za) -
                  (g1z - g0z) * (g1z - g0z) * z_var / 2.0;
    p.gamma1[1] = g1z;
    p.gamma1[2] = alpha1m;
    p.gamma1.tail(2) = alpha1x - g1z * coef.zx;

    return p;
}

namespace {

std::atomic<long> g_misspecify_calls{0};

}  // namespace

Dataset misspecify_x(const Dataset& d) {
    if (d.p_x() != 2) throw DataError("misspecify_x requires exactly two covariate columns");
    if (d.x_transformed) {
        throw DataError("misspecify_x applied twice (the transform is not idempotent)");
    }
    g_misspecify_calls.fetch_add(1);
    Dataset out = d;
    out.x = (d.x.array().abs().sqrt() + 3.0).matrix();
    out.x_transformed = true;
    return out;
}

long misspecify_x_call_count() { return g_misspecify_calls.load(); }

ScenarioSpec scenario_by_id(int id) {
    ScenarioSpec s;
    s.id = id;
    switch (id) {
        case 1: break;
        case 2:
            s.misspecified.q1 = s.misspecified.q0 = true;
            break;
        case 3:
            s.misspecified.q1 = s.misspecified.h0 = true;
            break;
        case 4:
            s.misspecified.h1 = s.misspecified.h0 = true;
            break;
        default:
            throw ConfigError("scenario id must be 1, 2, 3, or 4; got " + std::to_string(id));
    }
    return s;
}

OracleTruth oracle_truth(const DgpCoefficients& coef, std::int64_t draws, std::uint64_t seed) {
    coef.validate();
    if (draws < 1'000'000) throw ConfigError("oracle_truth requires at least 1e6 draws");
    auto rng = stream_rng(seed, 0x0eac1eULL);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    Eigen::Matrix3d chol = Eigen::LLT<Eigen::Matrix3d>(coef.cov_xu).matrixL();

    // Shared exogenous noise between the factual arm Y(A, M(A)) and the
    // counterfactual arm Y(A, M(0)); any coupling is valid for means.
    double sum_psi = 0.0, sumsq_psi = 0.0;
    double sum_piie = 0.0, sumsq_piie = 0.0;
    double sum_a = 0.0, sum_y = 0.0;
    for (std::int64_t i = 0; i < draws; ++i) {
        Eigen::Vector3d raw(gauss(rng), gauss(rng), gauss(rng));
        Eigen::Vector3d xu = coef.mean_xu + chol * raw;
        const Eigen::Vector2d x = xu.head<2>();
        const double u = xu[2];
        const double a = unif(rng) < expit(coef.a0 + coef.ax.dot(x) + coef.au * u) ? 1.0 : 0.0;
        const double w = coef.w0 + coef.wx.dot(x) + coef.wu * u + coef.w_sd * gauss(rng);
        const double m_noise = gauss(rng);
        const double m_a = coef.m0 + coef.ma * a + coef.mx.dot(x) + coef.mu * u +
                           coef.m_sd * m_noise;
        const double m_0 = coef.m0 + coef.mx.dot(x) + coef.mu * u + coef.m_sd * m_noise;
        const double y_noise = coef.y_sd * gauss(rng);
        const double base = coef.y0 + coef.ya * a + coef.yw * w + coef.yx.dot(x) +
                            coef.yu * u + y_noise;
        const double y_factual = base + coef.ym * m_a;
        const double y_counter = base + coef.ym * m_0;
        const double diff = y_factual - y_counter;
        sum_psi += y_counter;
        sumsq_psi += y_counter * y_counter;
        sum_piie += diff;
        sumsq_piie += diff * diff;
        sum_a += a;
        sum_y += y_factual;
    }
    const double dn = static_cast<double>(draws);
    OracleTruth t;
    t.psi_true = sum_psi / dn;
    t.piie_true = sum_piie / dn;
    t.se_psi = std::sqrt((sumsq_psi / dn - t.psi_true * t.psi_true) / dn);
    t.se_piie = std::sqrt((sumsq_piie / dn - t.piie_true * t.piie_true) / dn);
    t.e_a = sum_a / dn;
    t.e_y = sum_y / dn;
    return t;
}

McSummary run_scenario(const ScenarioSpec& spec, const DgpCoefficients& coef,
                       const ScenarioOptions& opt) {
    if (opt.reps < 1) throw ConfigError("run_scenario requires reps >= 1");
    if (opt.estimators.empty()) throw ConfigError("run_scenario requires an estimator set");

    const OracleTruth truth = oracle_truth(coef, opt.oracle_draws, opt.oracle_seed);
    const InstrumentBasis basis = default_basis();
    const MisspecFlags mis = spec.misspecified;
    const std::size_t n_methods = opt.estimators.size();

    std::vector<std::vector<RepRecord>> per_rep(n_methods,
                                                std::vector<RepRecord>(opt.reps));

    parallel_for(opt.reps, opt.threads, [&](int r) {
        GeneratedData gen = generate(coef, opt.n, stream_rng(opt.seed,
                                                             static_cast<std::uint64_t>(r))());
        const Dataset& d = gen.data;
        Dataset d_star;
        const Dataset* d_star_ptr = nullptr;
        if (mis.any()) {
            d_star = misspecify_x(d);
            d_star_ptr = &d_star;
        }
        auto boot = bootstrap_methods(d, d_star_ptr, opt.estimators, mis, basis, opt.boot,
                                      stream_rng(opt.seed, static_cast<std::uint64_t>(r),
                                                 0x5eedULL)(),
                                      1);
        auto points = point_estimates(d, d_star_ptr, opt.estimators, mis, basis);
        for (std::size_t k = 0; k < n_methods; ++k) {
            const Method m = opt.estimators[k];
            RepRecord rec;
            const auto& pt = points.at(m);
            const auto& be = boot.at(m);
            if (pt.ok && be.ok) {
                rec.ok = true;
                rec.piie = pt.piie;
                rec.ci_lo = be.result.ci_lo;
                rec.ci_hi = be.result.ci_hi;
            }
            per_rep[k][static_cast<std::size_t>(r)] = rec;
        }
    });

    McSummary sum;
    sum.scenario = spec.id;
    sum.reps = opt.reps;
    sum.n = opt.n;
    sum.boot = opt.boot;
    sum.seed = opt.seed;
    sum.piie_true = truth.piie_true;
    sum.psi_true = truth.psi_true;
    sum.per_rep = per_rep;
    for (std::size_t k = 0; k < n_methods; ++k) {
        McRow row;
        row.method = opt.estimators[k];
        double sum_err = 0.0, sum_sq = 0.0, sum_len = 0.0;
        int covered = 0;
        for (const RepRecord& rec : per_rep[k]) {
            if (!rec.ok) {
                ++row.n_failed;
                continue;
            }
            ++row.n_ok;
            const double err = rec.piie - truth.piie_true;
            sum_err += err;
            sum_sq += err * err;
            sum_len += rec.ci_hi - rec.ci_lo;
            if (rec.ci_lo <= truth.piie_true && truth.piie_true <= rec.ci_hi) ++covered;
        }
        if (row.n_ok > 0) {
            row.bias = sum_err / row.n_ok;
            row.mse = sum_sq / row.n_ok;
            row.coverage = static_cast<double>(covered) / row.n_ok;
            row.mean_len = sum_len / row.n_ok;
        }
        if (row.n_failed * 10 > opt.reps) sum.invalid = true;
        sum.rows.push_back(row);
    }
    return sum;
}

void write_mc_summary_csv(const std::vector<McSummary>& summaries, const std::string& path,
                          const std::string& config_hash) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << "scenario,estimator,bias,mse,coverage,length,n_ok,n_failed,config_hash,seed\n";
    char buf[64];
    auto fmt = [&buf](double v) {
        std::snprintf(buf, sizeof(buf), "%.6g", v);
        return std::string(buf);
    };
    for (const McSummary& s : summaries) {
        for (const McRow& r : s.rows) {
            out << s.scenario << ',' << method_name(r.method) << ',' << fmt(r.bias) << ','
                << fmt(r.mse) << ',' << fmt(r.coverage) << ',' << fmt(r.mean_len) << ','
                << r.n_ok << ',' << r.n_failed << ',' << config_hash << ',' << s.seed << "\n";
        }
    }
    if (!out) throw IoError("failed while writing '" + path + "'");
}

}  // namespace proxmed
