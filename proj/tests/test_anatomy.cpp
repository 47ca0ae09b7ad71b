#include "advcon/anatomy.hpp"
#include "advcon/pipeline.hpp"
#include "oracles.hpp"

#include <doctest.h>

using namespace advcon;

namespace {

LatentPerturbation from_rows(const Matrix& rows, Index h, Index w, int origin, int target) {
  ActivationBatch b;
  b.data = rows;
  b.batch = rows.rows() / (h * w);
  b.height = h;
  b.width = w;
  b.channels = rows.cols();
  LatentPerturbation p;
  p.delta_tilde = from_pixel_rows(b);
  p.layer = "relu4";
  p.origin_class = origin;
  p.target_class = target;
  return p;
}

}  // namespace

TEST_CASE("latent delta is the exact activation difference") {
  const Model model({3, 16, 16}, toy_cnn_layers(4), 1);
  Rng rng(1);
  const Tensor x = oracle::random_tensor({1, 3, 16, 16}, rng, 0.0, 1.0);
  CHECK(latent_delta(model, "relu4", x, x).delta_tilde.array().abs().maxCoeff() == 0.0);
  const Tensor y = oracle::random_tensor({1, 3, 16, 16}, rng, 0.0, 1.0);
  const auto d = latent_delta(model, "relu4", x, y);
  CHECK(d.delta_tilde ==
        Tensor(d.delta_tilde.shape(), forward_to(model, "relu4", y).array() - forward_to(model, "relu4", x).array()));
  CHECK_THROWS_AS(latent_delta(model, "relu4", x, Tensor({1, 3, 8, 8})), ShapeError);

  // a network that is linear up to the cut maps differences to differences
  const Model lin({3, 8, 8}, {LayerSpec::conv2d("conv", 4, 3, 1, 1), LayerSpec::global_avg_pool("gap"),
                              LayerSpec::dense("fc", 2)},
                  2);
  Model no_bias = lin;
  no_bias.layers()[0].bias.array().setZero();
  const Tensor a = oracle::random_tensor({1, 3, 8, 8}, rng), b = oracle::random_tensor({1, 3, 8, 8}, rng);
  const Tensor delta(a.shape(), b.array() - a.array());
  CHECK(max_abs_diff(latent_delta(no_bias, "conv", a, b).delta_tilde, forward_to(no_bias, "conv", delta)) < 1e-14);
}

TEST_CASE("variance profile of rank-one perturbations needs one component") {
  Rng rng(2);
  const Vector dir = oracle::random_matrix(8, 1, rng).normalized();
  std::vector<LatentPerturbation> perts;
  for (int s = 0; s < 4; ++s) {
    Matrix rows(16, 8);
    for (Index r = 0; r < 16; ++r) rows.row(r) = rng.normal() * dir.transpose();
    perts.push_back(from_rows(rows, 4, 4, s % 2, 2));
  }
  const auto v = variance_profile(perts);
  CHECK(v.groups == 2);
  for (double f : v.component_fraction_mean) CHECK(f == 100.0 / 8.0);
  for (double s : v.component_fraction_std) CHECK(s == 0.0);
}

TEST_CASE("isotropic perturbations spread their variance evenly") {
  Rng rng(3);
  std::vector<LatentPerturbation> perts;
  for (int s = 0; s < 6; ++s) {
    Matrix rows(10000, 32);
    for (Index i = 0; i < rows.size(); ++i) rows.data()[i] = rng.normal();
    perts.push_back(from_rows(rows, 100, 100, s % 3, 5));
  }
  const auto v = variance_profile(perts);
  CHECK(std::abs(v.component_fraction_mean[0] - 50.0) <= 5.0);
  for (std::size_t l = 1; l < v.component_fraction_mean.size(); ++l) {
    CHECK(v.component_fraction_mean[l] >= v.component_fraction_mean[l - 1]);
  }
  CHECK_THROWS_AS(variance_profile({perts[0]}), ConfigError);
  std::vector<LatentPerturbation> zeros(2, from_rows(Matrix::Zero(16, 4), 4, 4, 0, 1));
  CHECK_THROWS_AS(variance_profile(zeros), NumericError);
}

TEST_CASE("component fractions pick the smallest count reaching each level") {
  Matrix rows(4, 3);
  rows << 3, 0, 0, -3, 0, 0, 0, 1, 0, 0, -1, 0;
  // variances 6, 2/3, 0 -> cumulative ratios 0.9, 1.0, 1.0
  const std::vector<double> levels{0.5, 0.9, 0.95};
  CHECK(component_fractions(rows, levels) == std::vector<double>{100.0 / 3, 100.0 / 3, 200.0 / 3});
}

TEST_CASE("nmf perturbation directions are unit vectors") {
  Rng rng(4);
  const Vector m = oracle::random_matrix(6, 1, rng, 0.1, 1.0);
  std::vector<LatentPerturbation> perts;
  for (int s = 0; s < 3; ++s) {
    Matrix rows(9, 6);
    for (Index r = 0; r < 9; ++r) rows.row(r) = rng.uniform(0.2, 1.0) * m.transpose();
    perts.push_back(from_rows(rows, 3, 3, 0, 1));
  }
  const auto one = nmf_perturbation_basis(perts, 1);
  CHECK(one.directions.row(0).norm() == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(cosine(one.directions.row(0).transpose(), m) >= 0.999);
  const auto three = nmf_perturbation_basis(perts, 3);
  for (Index i = 0; i < 3; ++i) {
    const double n = three.directions.row(i).norm();
    CHECK((n == 0.0 || std::abs(n - 1.0) <= 1e-9));
  }
  std::vector<LatentPerturbation> negative{from_rows(-Matrix::Ones(9, 6), 3, 3, 0, 1)};
  CHECK_THROWS_AS(nmf_perturbation_basis(negative, 2), ConfigError);
}

TEST_CASE("projection onto a direction") {
  Rng rng(5);
  const Vector m = oracle::random_matrix(4, 1, rng).normalized();
  Matrix rows(9, 4);
  for (Index r = 0; r < 9; ++r) rows.row(r) = 2.0 * m.transpose();
  const auto along = from_rows(rows, 3, 3, 0, 1);
  CHECK(max_abs_diff(project_component(along.delta_tilde, m), along.delta_tilde) < 1e-14);

  const Matrix q = Eigen::HouseholderQR<Matrix>(oracle::random_matrix(4, 4, rng)).householderQ();
  Matrix ortho(9, 4);
  for (Index r = 0; r < 9; ++r) ortho.row(r) = rng.normal() * q.col(1).transpose() + rng.normal() * q.col(2).transpose();
  const auto perp = from_rows(ortho, 3, 3, 0, 1);
  CHECK(project_component(perp.delta_tilde, q.col(0)).array().abs().maxCoeff() < 1e-14);

  const auto z = from_rows(oracle::random_matrix(9, 4, rng), 3, 3, 0, 1);
  Tensor sum(z.delta_tilde.shape());
  for (Index i = 0; i < 4; ++i) sum.array() += project_component(z.delta_tilde, q.col(i)).array();
  CHECK(max_abs_diff(sum, z.delta_tilde) < 1e-12);
  const Tensor once = project_component(z.delta_tilde, q.col(3));
  CHECK(max_abs_diff(project_component(once, q.col(3)), once) < 1e-12);
  CHECK(once.array().matrix().norm() <= z.delta_tilde.array().matrix().norm());
  CHECK_THROWS_AS(project_component(z.delta_tilde, Vector(2.0 * q.col(0))), ConfigError);
  CHECK_THROWS_AS(project_component(z.delta_tilde, Vector::Ones(3).normalized()), ShapeError);
}

TEST_CASE("interpolation endpoints are the clean and attacked predictions") {
  const Model model({3, 16, 16}, toy_cnn_layers(4), 6);
  Rng rng(6);
  const Tensor x = oracle::random_tensor({1, 3, 16, 16}, rng, 0.0, 1.0);
  const Tensor y = oracle::random_tensor({1, 3, 16, 16}, rng, 0.0, 1.0);
  const auto d = latent_delta(model, "relu4", x, y);
  const auto curve = interpolate(model, "relu4", x, d.delta_tilde, default_gammas(), 1, 2, "full_delta");
  REQUIRE(curve.gammas.size() == 31);
  CHECK(curve.gammas.back() == doctest::Approx(1.5));
  const Matrix pc = predict_proba(model, x), pa = predict_proba(model, y);
  CHECK(std::abs(curve.conf_original[0] - pc(0, 1)) <= 1e-9);
  CHECK(std::abs(curve.conf_target[0] - pc(0, 2)) <= 1e-9);
  CHECK(std::abs(curve.conf_original[20] - pa(0, 1)) <= 1e-9);
  CHECK(std::abs(curve.conf_target[20] - pa(0, 2)) <= 1e-9);
  for (double p : curve.conf_target) CHECK((p >= 0.0 && p <= 1.0));
  CHECK_THROWS_AS(interpolate(model, "relu2", x, d.delta_tilde, default_gammas(), 1, 2, "x"), ShapeError);
}

TEST_CASE("clustermap orders identical concepts next to each other") {
  Matrix one(1, 3);
  one << 1, 2, 3;
  const auto single = clustermap(one, {"0-pgd-0"});
  CHECK(single.matrix.values(0, 0) == doctest::Approx(1.0));

  Matrix c(3, 3);
  c << 1, 0, 0, 0, 1, 0, 1, 0, 0;
  const auto cm = clustermap(c, {"a", "b", "c"});
  const auto& o = cm.order;
  REQUIRE(o.size() == 3);
  const auto pos = [&](int v) { return std::find(o.begin(), o.end(), v) - o.begin(); };
  CHECK(std::abs(pos(0) - pos(2)) == 1);
  CHECK(cm.linkage.size() == 2);
  CHECK(cm.linkage[0][2] == doctest::Approx(0.0));
  for (Index i = 0; i < 3; ++i) {
    CHECK(cm.matrix.values(i, i) == doctest::Approx(1.0));
    for (Index j = 0; j < 3; ++j) CHECK(cm.matrix.values(i, j) == cm.matrix.values(j, i));
  }
  CHECK(cm.matrix.row_labels[static_cast<std::size_t>(pos(1))] == "b");
  CHECK_THROWS_AS(clustermap(Matrix(0, 3), {}), ConfigError);
}

TEST_CASE("target specificity separates same-target and cross-target pairs") {
  Matrix c(4, 2);
  c << 1, 0, 1, 0.1, 0, 1, 0.1, 1;
  const auto t = target_specificity(c, {0, 0, 1, 1});
  CHECK(t.same_pairs == 2);
  CHECK(t.cross_pairs == 4);
  const double s01 = cosine(c.row(0).transpose(), c.row(1).transpose());
  CHECK(t.same_target_mean == doctest::Approx(s01));
  CHECK(t.same_target_mean > t.cross_target_mean);
}
