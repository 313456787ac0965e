#include "proxmed/bridge.hpp"
#include "proxmed/errors.hpp"
#include "proxmed/estimators.hpp"
#include "proxmed/report.hpp"
#include "proxmed/sim.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace proxmed;

namespace {

Dataset tiny_dataset(const Eigen::VectorXd& y, const Eigen::VectorXd& a) {
    Dataset d;
    d.y = y;
    d.a = a;
    d.m = Eigen::VectorXd::Zero(y.size());
    d.x = Eigen::MatrixXd::Zero(y.size(), 2);
    d.w = Eigen::MatrixXd::Ones(y.size(), 1);
    d.z = Eigen::MatrixXd::Ones(y.size(), 1);
    return d;
}

// Noiseless data whose outcome bridge has no mediator dependence: every
// correction term of the influence function vanishes pointwise.
struct ExactWorld {
    Dataset d;
    FittedBridges fb;
    BridgeEvals ev;
};

ExactWorld exact_world(int n, std::uint64_t seed) {
    DgpCoefficients coef;
    auto gen = generate(coef, n, seed);
    ExactWorld w;
    w.d = gen.data;
    BridgeParams truth = true_bridge_params(coef);
    truth.beta1[1 + truth.p_w] = 0.0;  // kill the M coefficient
    for (Eigen::Index i = 0; i < w.d.n(); ++i) {
        w.d.y[i] = eval_h1(truth, w.d.w.row(i).transpose(), w.d.m[i], w.d.a[i],
                           w.d.x.row(i).transpose());
    }
    // q1 is irrelevant here: its influence term multiplies the identically
    // zero outcome residual, so gamma1 = 0 (q1 == q0) is injected directly.
    FitPlan plan;
    plan.need_q1 = false;
    w.fb = fit_bridges(w.d, nullptr, plan, default_basis());
    w.fb.has_q1 = true;
    w.ev = evaluate_bridges(w.d, nullptr, w.fb);
    return w;
}

}  // namespace

TEST_CASE("psi_por is the sample mean of h0 at the observed exposure") {
    Dataset d = tiny_dataset(Eigen::Vector2d(0, 0), Eigen::Vector2d(0, 1));
    BridgeEvals ev;
    ev.h0_obs = Eigen::Vector2d(1, 3);
    CHECK(psi_por(d, ev).psi == doctest::Approx(2.0));

    BridgeParams constant = BridgeParams::zeros(1, 2, 1);
    Eigen::VectorXd merged(5);
    merged << 4.2, 0, 0, 0, 0;
    constant.set_beta0_merged(merged);
    DgpCoefficients coef;
    auto gen = generate(coef, 50, 3);
    CHECK(psi_por(gen.data, constant).psi == doctest::Approx(4.2));
}

TEST_CASE("psi_phybrid handles indicator annihilation and collapsed weights") {
    DgpCoefficients coef;
    auto gen = generate(coef, 200, 5);

    SUBCASE("all treated rows give zero") {
        Dataset d = gen.data;
        d.a.setOnes();
        BridgeParams p = true_bridge_params(coef);
        CHECK(psi_phybrid(d, p).psi == doctest::Approx(0.0));
    }
    SUBCASE("unit q0 with exposure-only h1") {
        const double v1 = 2.5, v0 = -0.75;
        BridgeParams p = BridgeParams::zeros(1, 2, 1);
        p.beta1[0] = v0;
        p.beta1[2 + p.p_w] = v1 - v0;  // exposure main effect
        // gamma0 = 0 -> q0 == 1
        const Dataset& d = gen.data;
        const double n0 = (1.0 - d.a.array()).sum();
        CHECK(psi_phybrid(d, p).psi ==
              doctest::Approx(n0 / static_cast<double>(d.n()) * (v1 + v0)));
    }
}

TEST_CASE("psi_pipw collapses to the outcome mean when weights are trivial") {
    DgpCoefficients coef;
    auto gen = generate(coef, 150, 7);
    SUBCASE("all control rows") {
        Dataset d = gen.data;
        d.a.setZero();
        BridgeParams p = true_bridge_params(coef);
        CHECK(psi_pipw(d, p).psi == doctest::Approx(empirical_mean_y(d)));
    }
    SUBCASE("q1 identically one") {
        BridgeParams p = BridgeParams::zeros(1, 2, 1);  // gamma0 = gamma1 = 0
        CHECK(psi_pipw(gen.data, p).psi == doctest::Approx(empirical_mean_y(gen.data)));
    }
}

TEST_CASE("eif_value term-by-term structure") {
    BridgeParams p = true_bridge_params(DgpCoefficients{});
    Eigen::VectorXd w(1), x(2), z(1);
    w << 0.4;
    x << -0.2, 0.3;
    z << 1.1;
    const double m = 0.6;

    SUBCASE("treated row with exact outcome and psi = h0(W,1,X)") {
        const double h1_1 = eval_h1(p, w, m, 1, x);
        const double h0_1 = eval_h0(p, w, 1, x);
        const double v = eif_value(/*y=*/h1_1, /*a=*/1, /*h1_obs=*/h1_1, h1_1,
                                   eval_h1(p, w, m, 0, x), /*h0_obs=*/h0_1, h0_1,
                                   eval_h0(p, w, 0, x), eval_q0(p, z, x), eval_q1(p, z, m, x),
                                   /*psi=*/h0_1);
        CHECK(v == doctest::Approx(0.0).epsilon(1e-12));
    }
    SUBCASE("affine in psi with slope -1") {
        std::mt19937_64 rng(11);
        std::normal_distribution<double> gauss(0.0, 1.0);
        for (int t = 0; t < 10; ++t) {
            const double y = gauss(rng), a = t % 2, psi = gauss(rng), delta = gauss(rng);
            const double base = eif_value(y, a, 0.5, 1.0, -0.5, 0.2, 0.7, -0.1, 0.9, 1.2, psi);
            const double shifted =
                eif_value(y, a, 0.5, 1.0, -0.5, 0.2, 0.7, -0.1, 0.9, 1.2, psi + delta);
            CHECK(shifted == doctest::Approx(base - delta).epsilon(1e-12));
        }
    }
    SUBCASE("control row with matched bridges vanishes") {
        // h1(W,M,a,X) = h0(W,a,X) pointwise: constants per arm.
        BridgeParams q = BridgeParams::zeros(1, 2, 1);
        q.beta1[0] = 1.7;
        q.beta1[2 + q.p_w] = 0.9;  // h1 = 1.7 + 0.9 a
        Eigen::VectorXd merged(5);
        merged << 1.7, 0, 0.9, 0, 0;
        q.set_beta0_merged(merged);
        const double y = eval_h1(q, w, m, 0, x);
        const double v = eif_value(y, 0, eval_h1(q, w, m, 0, x), eval_h1(q, w, m, 1, x),
                                   eval_h1(q, w, m, 0, x), eval_h0(q, w, 0, x),
                                   eval_h0(q, w, 1, x), eval_h0(q, w, 0, x),
                                   eval_q0(q, z, x), eval_q1(q, z, m, x),
                                   /*psi=*/eval_h0(q, w, 0, x));
        CHECK(v == doctest::Approx(0.0).epsilon(1e-12));
    }
}

TEST_CASE("estimator agreement on noiseless exactly specified data") {
    ExactWorld w = exact_world(600, 13);
    const double por = psi_por(w.d, w.ev).psi;
    const double hyb = psi_phybrid(w.d, w.ev).psi;
    const double mr = psi_pmr(w.d, w.ev).psi;
    CHECK(std::abs(por - hyb) < 1e-8);
    CHECK(std::abs(por - mr) < 1e-8);
}

TEST_CASE("P-MR influence contributions are centered by construction") {
    DgpCoefficients coef;
    for (std::uint64_t seed : {101, 102, 103}) {
        auto gen = generate(coef, 500, seed);
        auto fb = fit_bridges(gen.data, nullptr, FitPlan{}, default_basis());
        auto ev = evaluate_bridges(gen.data, nullptr, fb);
        auto est = psi_pmr(gen.data, ev);
        CHECK(std::abs(est.per_obs_if.mean()) < 1e-10);
        CHECK(est.per_obs_if.size() == gen.data.n());
    }
}

TEST_CASE("piie arithmetic") {
    DgpCoefficients coef;
    auto gen = generate(coef, 100, 17);
    PsiEstimate est;
    est.psi = empirical_mean_y(gen.data);
    CHECK(piie(gen.data, est) == doctest::Approx(0.0));

    Dataset d = tiny_dataset(Eigen::Vector3d(5, 5, 5), Eigen::Vector3d(0, 1, 0));
    PsiEstimate e2;
    e2.psi = 4.8;
    CHECK(piie(d, e2) == doctest::Approx(0.2));
}

TEST_CASE("dr_frontdoor with an independent centered mediator") {
    // A indep M, M indep L, M mean zero: the mediator model collapses and
    // psi reduces to the propensity-mixed outcome regression at m=0.
    std::mt19937_64 rng(19);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::bernoulli_distribution coin(0.4);
    const int n = 20000;
    Dataset d;
    d.y.resize(n);
    d.a.resize(n);
    d.m.resize(n);
    d.x.resize(n, 2);
    d.w.resize(n, 1);
    d.z.resize(n, 1);
    for (int i = 0; i < n; ++i) {
        d.a[i] = coin(rng) ? 1.0 : 0.0;
        d.m[i] = gauss(rng);
        d.x(i, 0) = gauss(rng);
        d.x(i, 1) = gauss(rng);
        d.w(i, 0) = gauss(rng);
        d.z(i, 0) = gauss(rng);
        d.y[i] = 1.0 + 0.8 * d.a[i] + 0.5 * d.m[i] + 0.3 * d.x(i, 0) + 0.2 * d.w(i, 0) +
                 0.5 * gauss(rng);
    }
    auto est = dr_frontdoor(d);
    // Manual collapse: E_n sum_a P(a|L) E[Y|a, 0, L] with the true models.
    double manual = 0.0;
    const double p1 = d.a.mean();
    for (int i = 0; i < n; ++i) {
        const double base = 1.0 + 0.3 * d.x(i, 0) + 0.2 * d.w(i, 0);
        manual += p1 * (base + 0.8) + (1 - p1) * base;
    }
    manual /= n;
    CHECK(est.psi == doctest::Approx(manual).epsilon(0.02));
}

TEST_CASE("dr_frontdoor under a null-effect mechanism finds no indirect effect") {
    // Y independent of (A, M) given L, and no mediator pathway at all:
    // the true PIIE is zero by construction.
    DgpCoefficients coef;
    coef.ya = 0.0;
    coef.ym = 0.0;
    coef.yu = 0.0;  // removes unmeasured confounding of the outcome
    auto gen = generate(coef, 50000, 23);
    auto est = dr_frontdoor(gen.data);
    CHECK(std::abs(piie(gen.data, est)) < 0.02);
    auto truth = oracle_truth(coef, 1'000'000, 24);
    CHECK(std::abs(truth.piie_true) < 1e-12);
}

TEST_CASE("dr_frontdoor reports singular designs") {
    Dataset d = tiny_dataset(Eigen::Vector4d(1, 2, 3, 4), Eigen::Vector4d(0, 1, 0, 1));
    // w and z constant ones and x zero -> collinear with intercept.
    CHECK_THROWS_AS(dr_frontdoor(d), SolverError);
}

TEST_CASE("bootstrap of a constant dataset degenerates to a point") {
    Dataset d = tiny_dataset(Eigen::VectorXd::Constant(40, 2.5),
                             (Eigen::VectorXd(40) << Eigen::VectorXd::Zero(20),
                              Eigen::VectorXd::Ones(20))
                                 .finished());
    auto res = bootstrap_functional(d, [](const Dataset& dd) { return dd.y.mean(); }, 50, 9, 1);
    CHECK(res.ci_lo == doctest::Approx(2.5));
    CHECK(res.ci_hi == doctest::Approx(2.5));
    CHECK(res.n_failed == 0);
}

TEST_CASE("bootstrap is deterministic in the seed") {
    DgpCoefficients coef;
    auto gen = generate(coef, 300, 29);
    auto r1 = bootstrap(gen.data, Method::p_or, 60, 1234);
    auto r2 = bootstrap(gen.data, Method::p_or, 60, 1234);
    CHECK(r1.ci_lo == r2.ci_lo);
    CHECK(r1.ci_hi == r2.ci_hi);
    CHECK(r1.se == r2.se);
    CHECK((r1.replicates - r2.replicates).cwiseAbs().maxCoeff() == 0.0);

    auto r3 = bootstrap(gen.data, Method::p_or, 60, 4321);
    CHECK(r1.ci_lo != r3.ci_lo);
}

TEST_CASE("bootstrap accounts for failed replicates and enforces the stability rule") {
    DgpCoefficients coef;
    auto gen = generate(coef, 200, 31);

    SUBCASE("failures are counted and excluded") {
        int countdown = 0;
        auto flaky = [&](const Dataset& dd) {
            if (dd.y[0] > dd.y.mean()) throw SolverError("synthetic failure");
            return dd.y.mean();
        };
        auto res = bootstrap_functional(gen.data, flaky, 80, 3, 1);
        (void)countdown;
        CHECK(res.n_failed > 0);
        CHECK(res.n_failed + res.replicates.size() == 80);
    }
    SUBCASE("more than 20 percent failures raises a stability error") {
        // Six distinct rows replicated: most resamples of the tiny sample
        // are rank deficient for the six-parameter outcome bridge.
        std::vector<int> rows{0, 1, 2, 3, 4, 5, 0, 1};
        Dataset tiny = take_rows(gen.data, rows);
        CHECK_THROWS_WITH_AS(bootstrap(tiny, Method::p_or, 50, 12),
                             doctest::Contains("replicates failed"), SolverError);
    }
}

TEST_CASE("percentile uses interpolated order statistics") {
    Eigen::VectorXd v(5);
    v << 10, 20, 30, 40, 50;
    CHECK(percentile(v, 0.0) == doctest::Approx(10));
    CHECK(percentile(v, 1.0) == doctest::Approx(50));
    CHECK(percentile(v, 0.5) == doctest::Approx(30));
    CHECK(percentile(v, 0.25) == doctest::Approx(20));
    CHECK(percentile(v, 0.125) == doctest::Approx(15));
}

TEST_CASE("estimate reports serialize with config hash and seed") {
    EstimateReport rep;
    rep.method = "P-MR";
    rep.psi_hat = 2.9;
    rep.piie_hat = -0.13;
    rep.se = 0.1;
    rep.ci_lo = -0.33;
    rep.ci_hi = 0.07;
    rep.n_boot = 500;
    rep.diagnostics["dropped_rows"] = 0;
    std::string json = estimate_report_to_json(rep, "deadbeef", 42);
    CHECK(json.find("\"method\": \"P-MR\"") != std::string::npos);
    CHECK(json.find("deadbeef") != std::string::npos);
    CHECK(json.find("\"seed\": 42") != std::string::npos);
}

TEST_CASE("method tags round-trip") {
    for (Method m : {Method::p_or, Method::p_hybrid, Method::p_ipw, Method::p_mr, Method::dr,
                     Method::dml_mr}) {
        CHECK(method_from_string(method_name(m)) == m);
    }
    CHECK_THROWS_AS(method_from_string("P-QR"), ConfigError);
}
