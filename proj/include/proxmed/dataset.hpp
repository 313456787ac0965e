#pragma once

#include <Eigen/Dense>

#include <vector>

namespace proxmed {

// Observational sample with designated roles. Immutable by convention after
// construction/validation; every routine in the library takes it by const
// reference, so one Dataset can back concurrent estimator runs.
struct Dataset {
    Eigen::VectorXd y;  // outcome
    Eigen::VectorXd a;  // binary exposure, values in {0,1}
    Eigen::VectorXd m;  // mediator (continuous or discrete, stored as reals)
    Eigen::MatrixXd x;  // baseline covariates, n x p_x
    Eigen::MatrixXd w;  // outcome-inducing proxies, n x p_w
    Eigen::MatrixXd z;  // exposure-inducing proxies, n x p_z

    // Set once a covariate transform has been applied (see sim::misspecify_x);
    // guards against applying the transform twice.
    bool x_transformed = false;

    Eigen::Index n() const { return y.size(); }
    Eigen::Index p_x() const { return x.cols(); }
    Eigen::Index p_w() const { return w.cols(); }
    Eigen::Index p_z() const { return z.cols(); }
};

// Throws DataError if any column length disagrees with n, a value is
// non-finite, the exposure is not 0/1, or (when require_both_arms) either
// exposure arm is empty. CSV ingestion defers the two-arm check to the
// solvers so that a single-arm file surfaces as a solver precondition.
void validate_dataset(const Dataset& d, bool require_both_arms = true);

// Row subset/resample (indices may repeat and reorder).
Dataset take_rows(const Dataset& d, const std::vector<int>& rows);

// Arithmetic mean of the outcome; the nonparametric estimate of E[Y].
double empirical_mean_y(const Dataset& d);

// Opt-in covariate standardization for user data: centers and scales every
// x/w/z column to unit sample variance. Constant columns are left unchanged.
Dataset standardized(const Dataset& d);

}  // namespace proxmed
