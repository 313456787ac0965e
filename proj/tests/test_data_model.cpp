#include "proxmed/csv.hpp"
#include "proxmed/dataset.hpp"
#include "proxmed/errors.hpp"
#include "proxmed/sim.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

using namespace proxmed;

namespace {

std::string tmp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

void write_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

ColumnRoles seven_col_roles() {
    ColumnRoles roles;
    roles.add("Y", Role::outcome);
    roles.add("A", Role::exposure);
    roles.add("M", Role::mediator);
    roles.add("X1", Role::covariate);
    roles.add("X2", Role::covariate);
    roles.add("W", Role::w_proxy);
    roles.add("Z", Role::z_proxy);
    return roles;
}

constexpr const char* kSixRows =
    "Y,A,M,X1,X2,W,Z\n"
    "1.5,0,0.2,0.1,-0.3,1.1,0.5\n"
    "2.5,1,0.1,0.2,0.4,0.9,-0.2\n"
    "0.5,0,-0.4,-0.1,0.0,1.3,0.8\n"
    "3.0,1,0.6,0.3,0.2,0.7,0.1\n"
    "1.0,0,0.0,0.0,-0.1,1.0,0.4\n"
    "2.0,1,0.3,0.1,0.1,0.8,-0.5\n";

}  // namespace

TEST_CASE("load_csv parses a six-row file with the full role set") {
    const std::string path = tmp_path("proxmed_six.csv");
    write_file(path, kSixRows);
    LoadedData loaded = load_csv(path, seven_col_roles());
    CHECK(loaded.data.n() == 6);
    CHECK(loaded.data.p_x() == 2);
    CHECK(loaded.data.p_w() == 1);
    CHECK(loaded.data.p_z() == 1);
    CHECK(loaded.info.dropped_rows == 0);
    CHECK(loaded.data.y[0] == doctest::Approx(1.5));
    CHECK(loaded.data.x(1, 1) == doctest::Approx(0.4));
}

TEST_CASE("load_csv rejects an exposure value outside {0,1}") {
    const std::string path = tmp_path("proxmed_badA.csv");
    write_file(path,
               "Y,A,M,X1,X2,W,Z\n"
               "1.5,2,0.2,0.1,-0.3,1.1,0.5\n"
               "2.5,1,0.1,0.2,0.4,0.9,-0.2\n");
    CHECK_THROWS_AS(load_csv(path, seven_col_roles()), DataError);
}

TEST_CASE("load_csv drops rows with missing cells and counts them") {
    const std::string path = tmp_path("proxmed_missing.csv");
    write_file(path,
               "Y,A,M,X1,X2,W,Z\n"
               "1.5,0,0.2,0.1,-0.3,1.1,0.5\n"
               "2.5,1,,0.2,0.4,0.9,-0.2\n"
               "0.5,0,-0.4,-0.1,0.0,1.3,0.8\n"
               "3.0,1,0.6,0.3,0.2,0.7,0.1\n");
    LoadedData loaded = load_csv(path, seven_col_roles());
    CHECK(loaded.data.n() == 3);
    CHECK(loaded.info.dropped_rows == 1);
}

TEST_CASE("load_csv error taxonomy") {
    SUBCASE("missing role column is a schema error") {
        const std::string path = tmp_path("proxmed_noz.csv");
        write_file(path,
                   "Y,A,M,X1,X2,W\n"
                   "1.5,0,0.2,0.1,-0.3,1.1\n");
        CHECK_THROWS_WITH_AS(load_csv(path, seven_col_roles()),
                             doctest::Contains("Z"), DataError);
    }
    SUBCASE("unmapped header column is a schema error") {
        const std::string path = tmp_path("proxmed_extra.csv");
        write_file(path,
                   "Y,A,M,X1,X2,W,Z,EXTRA\n"
                   "1.5,0,0.2,0.1,-0.3,1.1,0.5,9\n");
        CHECK_THROWS_AS(load_csv(path, seven_col_roles()), DataError);
    }
    SUBCASE("all rows dropped is an empty-data error") {
        const std::string path = tmp_path("proxmed_empty.csv");
        write_file(path,
                   "Y,A,M,X1,X2,W,Z\n"
                   ",0,0.2,0.1,-0.3,1.1,0.5\n");
        CHECK_THROWS_AS(load_csv(path, seven_col_roles()), DataError);
    }
    SUBCASE("non-numeric cell is a domain error") {
        const std::string path = tmp_path("proxmed_text.csv");
        write_file(path,
                   "Y,A,M,X1,X2,W,Z\n"
                   "oops,0,0.2,0.1,-0.3,1.1,0.5\n");
        CHECK_THROWS_AS(load_csv(path, seven_col_roles()), DataError);
    }
    SUBCASE("missing file is an io error") {
        CHECK_THROWS_AS(load_csv(tmp_path("proxmed_nope.csv"), seven_col_roles()), IoError);
    }
}

TEST_CASE("role mapping validation") {
    ColumnRoles roles;
    roles.add("Y", Role::outcome);
    roles.add("A", Role::exposure);
    roles.add("M", Role::mediator);
    roles.add("W", Role::w_proxy);
    CHECK_THROWS_WITH_AS(roles.validate(), doctest::Contains("z_proxy"), ConfigError);
    roles.add("Z", Role::z_proxy);
    CHECK_NOTHROW(roles.validate());
    CHECK_THROWS_AS(roles.add("Y", Role::ignore), ConfigError);
    CHECK_THROWS_AS(role_from_string("banana"), ConfigError);
    CHECK(parse_role_assignment(" Y = outcome ").second == Role::outcome);
}

TEST_CASE("empirical_mean_y") {
    Dataset d;
    d.y.resize(3);
    d.y << 1, 2, 3;
    d.a.resize(3);
    d.a << 0, 1, 0;
    d.m = Eigen::VectorXd::Zero(3);
    d.x = Eigen::MatrixXd::Zero(3, 1);
    d.w = Eigen::MatrixXd::Ones(3, 1);
    d.z = Eigen::MatrixXd::Ones(3, 1);
    CHECK(empirical_mean_y(d) == doctest::Approx(2.0));
    d.y.setConstant(4.25);
    CHECK(empirical_mean_y(d) == doctest::Approx(4.25));
}

TEST_CASE("mean outcome at n=1e6 agrees with the counterfactual oracle") {
    DgpCoefficients coef;
    auto gen = generate(coef, 1000000, 314);
    auto truth = oracle_truth(coef, 1'000'000, 315);
    CHECK(std::abs(empirical_mean_y(gen.data) - truth.e_y) < 0.02);
}

TEST_CASE("CSV round-trip is byte-identical") {
    DgpCoefficients coef;
    auto gen = generate(coef, 200, 77);
    const std::string p1 = tmp_path("proxmed_rt1.csv");
    const std::string p2 = tmp_path("proxmed_rt2.csv");
    save_csv(gen.data, p1);
    LoadedData loaded = load_csv(p1, canonical_roles(gen.data));
    save_csv(loaded.data, p2);
    CHECK(read_file(p1) == read_file(p2));
    CHECK(loaded.data.n() == gen.data.n());
}

TEST_CASE("validation is order-independent under row permutation") {
    DgpCoefficients coef;
    auto gen = generate(coef, 150, 11);
    std::vector<int> perm(150);
    for (int i = 0; i < 150; ++i) perm[i] = i;
    std::shuffle(perm.begin(), perm.end(), std::mt19937_64(3));
    Dataset shuffled = take_rows(gen.data, perm);
    CHECK_NOTHROW(validate_dataset(shuffled));
    CHECK(empirical_mean_y(shuffled) == doctest::Approx(empirical_mean_y(gen.data)));
    CHECK(shuffled.y[0] == gen.data.y[perm[0]]);
    CHECK(shuffled.w(5, 0) == gen.data.w(perm[5], 0));
}

TEST_CASE("dataset validation invariants") {
    DgpCoefficients coef;
    auto gen = generate(coef, 50, 1);
    CHECK_NOTHROW(validate_dataset(gen.data));

    Dataset one_arm = gen.data;
    one_arm.a.setOnes();
    CHECK_THROWS_AS(validate_dataset(one_arm), DataError);
    CHECK_NOTHROW(validate_dataset(one_arm, /*require_both_arms=*/false));

    Dataset bad_a = gen.data;
    bad_a.a[3] = 2.0;
    CHECK_THROWS_AS(validate_dataset(bad_a), DataError);

    Dataset nan_y = gen.data;
    nan_y.y[0] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(validate_dataset(nan_y), DataError);

    Dataset short_m = gen.data;
    short_m.m = Eigen::VectorXd::Zero(10);
    CHECK_THROWS_AS(validate_dataset(short_m), DataError);
}

TEST_CASE("opt-in standardization centers and scales covariate blocks") {
    DgpCoefficients coef;
    auto gen = generate(coef, 5000, 21);
    Dataset std_d = standardized(gen.data);
    CHECK(std::abs(std_d.x.col(0).mean()) < 1e-12);
    CHECK(std::abs(std_d.w.col(0).mean()) < 1e-12);
    const double var =
        (std_d.z.col(0).array() - std_d.z.col(0).mean()).square().sum() / (std_d.n() - 1.0);
    CHECK(var == doctest::Approx(1.0));
    CHECK(std_d.y == gen.data.y);  // outcome untouched
}
