#include <numeric>
#include <random>

#include <Eigen/Dense>

#include "ntksel/krr.hpp"
#include "support.hpp"

using namespace ntksel;

namespace {

Eigen::MatrixXd random_spd(Eigen::Index n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  const Eigen::MatrixXd a = Eigen::MatrixXd::NullaryExpr(n, n, [&] { return nd(rng); });
  return a * a.transpose() + 0.5 * Eigen::MatrixXd::Identity(n, n);
}

Eigen::MatrixXd one_hot(std::span<const int> labels, const std::vector<int>& classes) {
  Eigen::MatrixXd y = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(labels.size()),
                                            static_cast<Eigen::Index>(classes.size()));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto c = std::find(classes.begin(), classes.end(), labels[i]) - classes.begin();
    y(static_cast<Eigen::Index>(i), c) = 1.0;
  }
  return y;
}

struct Blobs {
  std::vector<Eigen::VectorXd> x;
  std::vector<int> y;
};

Blobs blobs(std::size_t per_class, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  const std::vector<Eigen::Vector2d> centres{{0, 3}, {2.6, -1.5}, {-2.6, -1.5}};
  Blobs b;
  for (std::size_t i = 0; i < per_class; ++i) {
    for (int c = 0; c < 3; ++c) {
      b.x.push_back(centres[static_cast<std::size_t>(c)] + Eigen::Vector2d(nd(rng), nd(rng)));
      b.y.push_back(c);
    }
  }
  return b;
}

Eigen::MatrixXd rbf(const std::vector<Eigen::VectorXd>& a, const std::vector<Eigen::VectorXd>& b) {
  Eigen::MatrixXd k(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j)
      k(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = std::exp(-(a[i] - b[j]).squaredNorm() / 4.0);
  return k;
}

}  // namespace

TEST_CASE("small closed-form fits") {
  const std::vector<int> one{7};
  const auto m = krr_fit(Eigen::MatrixXd::Ones(1, 1), one, 0.0);
  CHECK(m.alpha.rows() == 1);
  CHECK(m.alpha.cols() == 1);
  CHECK(m.alpha(0, 0) == 1.0);
  CHECK(m.classes == std::vector<int>{7});

  // (2I + 2 * 0.5 I) alpha = Y
  const std::vector<int> two{0, 1};
  const auto d = krr_fit(2.0 * Eigen::MatrixXd::Identity(2, 2), two, 0.5);
  CHECK(d.alpha.isApprox(Eigen::MatrixXd::Identity(2, 2) / 3.0, 1e-15));
}

TEST_CASE("fits match the dense-inverse oracle") {
  const Eigen::MatrixXd k = random_spd(8, 1);
  const std::vector<int> labels{2, 0, 1, 1, 0, 2, 2, 0};
  for (double lambda : {0.0, 1e-3, 0.1}) {
    const auto m = krr_fit(k, labels, lambda);
    const Eigen::MatrixXd shifted = k + 8.0 * lambda * Eigen::MatrixXd::Identity(8, 8);
    const Eigen::MatrixXd oracle = shifted.inverse() * one_hot(labels, {0, 1, 2});
    CHECK((m.alpha - oracle).cwiseAbs().maxCoeff() <= 1e-10 * std::max(1.0, oracle.cwiseAbs().maxCoeff()));
    CHECK(m.residual <= 1e-8);
  }
}

TEST_CASE("interpolation and zero-score ties") {
  const Eigen::MatrixXd k = random_spd(6, 2);
  const std::vector<int> labels{1, 0, 2, 1, 0, 2};
  const auto m = krr_fit(k, labels, 0.0);
  // Rows of K itself: each training point recovers its own label.
  CHECK(krr_predict(m, k) == labels);
  CHECK(krr_predict(m, Eigen::MatrixXd::Zero(2, 6)) == std::vector<int>{0, 0});
  CHECK_ERROR_CODE(krr_predict(m, Eigen::MatrixXd::Zero(2, 5)), ErrorCode::dim_mismatch);
}

TEST_CASE("Gaussian blobs are separated") {
  const auto train = blobs(30, 3), val = blobs(30, 4);
  const auto sweep = lambda_sweep(rbf(train.x, train.x), train.y, rbf(val.x, train.x), val.y);
  CHECK(sweep.best_accuracy >= 0.9);
  REQUIRE(sweep.points.size() == kDefaultLambdaGrid.size());
  for (std::size_t i = 0; i < kDefaultLambdaGrid.size(); ++i) {
    CHECK(sweep.points[i].lambda == kDefaultLambdaGrid[i]);
    CHECK(sweep.points[i].residual <= 1e-8);
  }
}

TEST_CASE("default grid") {
  CHECK(std::vector<double>(kDefaultLambdaGrid.begin(), kDefaultLambdaGrid.end()) ==
        std::vector<double>{1e-5, 1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 1e-1});
}

TEST_CASE("sweep edge cases") {
  const Eigen::MatrixXd k = random_spd(5, 5);
  const std::vector<int> labels{0, 1, 0, 1, 1};
  const std::vector<double> single{0.25};
  CHECK(lambda_sweep(k, labels, k, labels, single).best_lambda == 0.25);

  const std::vector<int> same(5, 4);
  const auto r = lambda_sweep(k, same, k, same);
  CHECK(r.best_lambda == kDefaultLambdaGrid.front());
  for (const auto& p : r.points) CHECK(p.val_accuracy == 1.0);

  CHECK_THROWS(lambda_sweep(k, labels, k, labels, std::span<const double>{}));
}

TEST_CASE("coefficient norm shrinks with lambda") {
  const auto train = blobs(10, 6);
  const Eigen::MatrixXd k = rbf(train.x, train.x);
  const auto r = lambda_sweep(k, train.y, k, train.y);
  for (std::size_t i = 1; i < r.points.size(); ++i) CHECK(r.points[i].alpha_norm <= r.points[i - 1].alpha_norm);
}

TEST_CASE("permuting training samples permutes alpha") {
  const Eigen::MatrixXd k = random_spd(7, 7);
  const std::vector<int> labels{0, 1, 2, 0, 1, 2, 0};
  std::vector<int> perm(7);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(8);
  std::shuffle(perm.begin(), perm.end(), rng);
  Eigen::MatrixXd kp(7, 7);
  std::vector<int> lp(7);
  for (int i = 0; i < 7; ++i) {
    lp[static_cast<std::size_t>(i)] = labels[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
    for (int j = 0; j < 7; ++j) kp(i, j) = k(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
  }
  const auto a = krr_fit(k, labels, 1e-3), b = krr_fit(kp, lp, 1e-3);
  for (int i = 0; i < 7; ++i) {
    CHECK((b.alpha.row(i) - a.alpha.row(perm[static_cast<std::size_t>(i)])).norm() <= 1e-10);
  }
  // Test rows whose columns follow the permuted order predict the same labels.
  const Eigen::MatrixXd test = random_spd(7, 9).topRows(3);
  Eigen::MatrixXd test_p(3, 7);
  for (int j = 0; j < 7; ++j) test_p.col(j) = test.col(perm[static_cast<std::size_t>(j)]);
  CHECK(krr_predict(a, test) == krr_predict(b, test_p));
}

TEST_CASE("input validation") {
  const std::vector<int> two{0, 1};
  Eigen::MatrixXd asym(2, 2);
  asym << 1, 0.5, 0.2, 1;
  CHECK_ERROR_CODE(krr_fit(asym, two, 0.1), ErrorCode::asymmetric_kernel);
  CHECK_ERROR_CODE(krr_fit(Eigen::MatrixXd::Ones(2, 2), two, 0.0), ErrorCode::singular_system);
  CHECK_NOTHROW(krr_fit(Eigen::MatrixXd::Ones(2, 2), two, 0.1));
  CHECK_ERROR_CODE(krr_fit(Eigen::MatrixXd::Identity(3, 3), two, 0.1), ErrorCode::dim_mismatch);
  CHECK_ERROR_CODE(krr_fit(Eigen::MatrixXd::Identity(2, 2), two, -1.0), ErrorCode::config);
  Eigen::MatrixXd nan = Eigen::MatrixXd::Identity(2, 2);
  nan(0, 0) = std::nan("");
  CHECK_ERROR_CODE(krr_fit(nan, two, 0.1), ErrorCode::non_finite_value);
  CHECK(accuracy(std::vector<int>{1, 2, 3}, std::vector<int>{1, 0, 3}) == doctest::Approx(2.0 / 3.0));
}
