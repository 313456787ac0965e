#include "glm.hpp"

#include "proxmed/errors.hpp"

#include <algorithm>
#include <cmath>

namespace proxmed {

Eigen::VectorXd ols_solve(const Eigen::MatrixXd& design, const Eigen::VectorXd& response,
                          const std::string& which) {
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
    qr.setThreshold(1e-10);
    if (qr.rank() < design.cols()) {
        throw SolverError(which + ": singular regression design (rank " +
                          std::to_string(qr.rank()) + " of " + std::to_string(design.cols()) +
                          ")");
    }
    return qr.solve(response);
}

Eigen::VectorXd logistic_irls(const Eigen::MatrixXd& features, const Eigen::VectorXd& labels,
                              int max_iter) {
    const Eigen::Index n = features.rows();
    const Eigen::Index k = features.cols();
    Eigen::VectorXd beta = Eigen::VectorXd::Zero(k);
    for (int it = 0; it < max_iter; ++it) {
        Eigen::VectorXd eta = features * beta;
        Eigen::VectorXd prob(n), weight(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            double e = std::clamp(eta[i], -30.0, 30.0);
            double p = 1.0 / (1.0 + std::exp(-e));
            prob[i] = p;
            weight[i] = std::max(p * (1.0 - p), 1e-10);
        }
        Eigen::VectorXd grad = features.transpose() * (labels - prob);
        Eigen::MatrixXd hess = features.transpose() * weight.asDiagonal() * features;
        hess.diagonal().array() += 1e-10;
        Eigen::VectorXd step = hess.ldlt().solve(grad);
        beta += step;
        if (!beta.allFinite()) throw SolverError("logistic regression diverged");
        if (grad.cwiseAbs().maxCoeff() < 1e-10 * static_cast<double>(n)) break;
    }
    return beta;
}

}  // namespace proxmed
