#include "proxmed/dataset.hpp"

#include "proxmed/errors.hpp"

#include <cmath>
#include <string>

namespace proxmed {

void validate_dataset(const Dataset& d, bool require_both_arms) {
    const Eigen::Index n = d.n();
    if (n < 1) throw DataError("dataset is empty");
    if (d.a.size() != n || d.m.size() != n || d.x.rows() != n || d.w.rows() != n ||
        d.z.rows() != n) {
        throw DataError("dataset columns have inconsistent lengths");
    }
    if (d.w.cols() < 1) throw DataError("dataset needs at least one w proxy column");
    if (d.z.cols() < 1) throw DataError("dataset needs at least one z proxy column");

    auto finite = [](const auto& block) { return block.allFinite(); };
    if (!finite(d.y) || !finite(d.a) || !finite(d.m) || !finite(d.x) || !finite(d.w) ||
        !finite(d.z)) {
        throw DataError("dataset contains non-finite values");
    }

    double sum_a = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const double ai = d.a[i];
        if (ai != 0.0 && ai != 1.0) {
            throw DataError("exposure column contains value " + std::to_string(ai) +
                            "; only 0 and 1 are allowed");
        }
        sum_a += ai;
    }
    if (require_both_arms && (sum_a <= 0.0 || sum_a >= static_cast<double>(n))) {
        throw DataError("both exposure arms must be present");
    }
}

Dataset take_rows(const Dataset& d, const std::vector<int>& rows) {
    Dataset out;
    const Eigen::Index k = static_cast<Eigen::Index>(rows.size());
    out.y.resize(k);
    out.a.resize(k);
    out.m.resize(k);
    out.x.resize(k, d.x.cols());
    out.w.resize(k, d.w.cols());
    out.z.resize(k, d.z.cols());
    for (Eigen::Index i = 0; i < k; ++i) {
        const int r = rows[static_cast<std::size_t>(i)];
        out.y[i] = d.y[r];
        out.a[i] = d.a[r];
        out.m[i] = d.m[r];
        out.x.row(i) = d.x.row(r);
        out.w.row(i) = d.w.row(r);
        out.z.row(i) = d.z.row(r);
    }
    out.x_transformed = d.x_transformed;
    return out;
}

double empirical_mean_y(const Dataset& d) {
    if (d.n() < 1) throw DataError("empirical_mean_y requires n >= 1");
    return d.y.mean();
}

namespace {

void standardize_block(Eigen::MatrixXd& block) {
    const double n = static_cast<double>(block.rows());
    for (Eigen::Index j = 0; j < block.cols(); ++j) {
        const double mean = block.col(j).mean();
        const double var = (block.col(j).array() - mean).square().sum() / (n - 1.0);
        if (var <= 0.0) continue;
        block.col(j) = (block.col(j).array() - mean) / std::sqrt(var);
    }
}

}  // namespace

Dataset standardized(const Dataset& d) {
    if (d.n() < 2) throw DataError("standardization requires n >= 2");
    Dataset out = d;
    standardize_block(out.x);
    standardize_block(out.w);
    standardize_block(out.z);
    return out;
}

}  // namespace proxmed
