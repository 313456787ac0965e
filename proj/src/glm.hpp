#pragma once

#include <Eigen/Dense>

#include <string>

namespace proxmed {

// Least squares with a rank check; throws SolverError naming `which` when the
// design is singular.
Eigen::VectorXd ols_solve(const Eigen::MatrixXd& design, const Eigen::VectorXd& response,
                          const std::string& which);

// IRLS logistic regression; throws SolverError on divergence.
Eigen::VectorXd logistic_irls(const Eigen::MatrixXd& features, const Eigen::VectorXd& labels,
                              int max_iter = 50);

}  // namespace proxmed
