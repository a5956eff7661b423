#include <catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "oracles.hpp"
#include "s2o/bounds.hpp"
#include "s2o/simulation.hpp"

using namespace s2o;

namespace {

BoundInputs identity_layer_inputs() {
  BoundInputs in;
  in.spectral_norms = {1.0};
  in.frob_norms = {std::sqrt(2.0)};  // ||I_2||_F
  in.m = 100;
  in.input_bound = 1.0;
  in.epsilon = 1.0;
  in.kappa = 1.0;
  return in;
}

CorrelationEstimate estimate_from_dense(const Tensor& r, std::size_t rows, std::size_t cols,
                                        DomainTag domain) {
  CorrelationEstimate est;
  est.estimator = EstimatorTag::sampling;
  est.domain = domain;
  LayerCorrelation lc;
  lc.rows = rows;
  lc.cols = cols;
  lc.dense = r;
  auto [rp, rdp] = kronecker_marginals_dense(r, rows, cols);
  lc.r_prime = std::move(rp);
  lc.r_dprime = std::move(rdp);
  lc.sigma = 1.0;
  lc.log_det_r = log_det_spd(r);
  est.layers.push_back(std::move(lc));
  return est;
}

}  // namespace

TEST_CASE("one-shot capacity factor closed form") {
  // single layer W = I_2, eps/kappa = 1:
  // prod_s^2 = 1, amplifier (1 + 1*1*1)^2 = 4, stable rank sum = 2 -> 8
  const BoundInputs in = identity_layer_inputs();
  CHECK(std::abs(phi_adv_fgm(in) - 8.0) < 1e-12);
  // eps 0 drops the amplifier
  BoundInputs quiet = in;
  quiet.epsilon = 0.0;
  CHECK(std::abs(phi_adv_fgm(quiet) - 2.0) < 1e-12);
}

TEST_CASE("capacity grows with depth-weighted norms") {
  BoundInputs in = identity_layer_inputs();
  in.spectral_norms = {2.0, 1.5};
  in.frob_norms = {2.5, 2.0};
  const double lo = phi_adv_fgm(in);
  in.spectral_norms[0] = 3.0;
  CHECK(phi_adv_fgm(in) > lo);
}

TEST_CASE("geometric sum closed form and fallbacks") {
  CHECK(geometric_sum(0.5, 3) == Catch::Approx(1.75));
  CHECK(geometric_sum(0.0, 4) == 1.0);
  // ratio 1 falls back to the explicit partial sum r
  CHECK(geometric_sum(1.0, 5) == 5.0);
  // ratio just below 1 avoids the catastrophic denominator
  CHECK(geometric_sum(1.0 - 1e-13, 4) == Catch::Approx(4.0));
  // divergent ratio sums the finite series explicitly
  CHECK(geometric_sum(2.0, 3) == 7.0);
  CHECK_THROWS_AS(geometric_sum(0.5, 0), ConfigError);
}

TEST_CASE("one-iteration multi-step form matches the one-shot form") {
  BoundInputs in = identity_layer_inputs();
  in.spectral_norms = {1.3, 0.8, 1.1};
  in.frob_norms = {2.0, 1.5, 1.2};
  in.epsilon = 0.04;
  in.kappa = 0.7;
  in.attack = AttackKind::pgm;
  in.pgm_iterations = 1;
  in.pgm_step = in.epsilon;  // noise power plays the role of the budget
  const double pgm = phi_adv_pgm(in);
  in.attack = AttackKind::fgm;
  const double fgm = phi_adv_fgm(in);
  CHECK(std::abs(pgm - fgm) < 1e-10 * fgm);
}

TEST_CASE("psi scales the capacity by the perturbed reach") {
  BoundInputs in = identity_layer_inputs();
  in.input_bound = 2.0;
  in.epsilon = 0.5;
  CHECK(std::abs(psi_adv(in) - 6.25 * phi_adv(in)) < 1e-12);
}

TEST_CASE("kl_term closed form on the identity layer") {
  // ||W||_F^2/(2 sigma^2) - ln det R = 2/2 - 0 = 1
  const BoundInputs in = identity_layer_inputs();
  CHECK(std::abs(kl_term(in, std::vector<double>{0.0}) - 1.0) < 1e-15);
  // a positive log det lowers the divergence
  CHECK(kl_term(in, std::vector<double>{0.5}) == Catch::Approx(0.5));
  CHECK_THROWS_AS(kl_term(in, std::vector<double>{0.0, 0.0}), ShapeError);
}

TEST_CASE("sigma conventions") {
  BoundInputs in;
  in.spectral_norms = {1.0, 4.0};
  in.frob_norms = {1.0, 1.0};
  in.sigma = 0.5;
  in.sigma_convention = SigmaConvention::uniform;
  const std::vector<double> uni = sigma_per_layer(in);
  CHECK(uni == std::vector<double>{0.5, 0.5});
  in.sigma_convention = SigmaConvention::spectral;
  const std::vector<double> spec = sigma_per_layer(in);
  // geometric mean of {1, 4} is 2: sigma_l = 0.5 * s_l / 2
  CHECK(spec[0] == Catch::Approx(0.25));
  CHECK(spec[1] == Catch::Approx(1.0));
}

TEST_CASE("determinant lower bound closed form") {
  // lambda in [0.5, 2], dim 4: k = 4(2-1)/(2-0.5) = 8/3,
  // bound = 0.5^(8/3) * 2^(4/3) = 2^(-4/3)
  CHECK(det_bound_k(0.5, 2.0, 4) == Catch::Approx(8.0 / 3.0));
  CHECK(det_lower_bound(0.5, 2.0, 4) == Catch::Approx(std::pow(2.0, -4.0 / 3.0)));
  // coincident extremes collapse to lambda^dim
  CHECK(log_det_lower_bound(1.5, 1.5, 3) == Catch::Approx(3.0 * std::log(1.5)));
  CHECK(det_bound_k(1.5, 1.5, 3) == 0.0);
  CHECK_THROWS_AS(log_det_lower_bound(0.0, 2.0, 4), NumericsError);
  CHECK_THROWS_AS(log_det_lower_bound(-0.5, 2.0, 4), NumericsError);
  CHECK_THROWS_AS(log_det_lower_bound(2.0, 0.5, 4), ConfigError);
}

TEST_CASE("determinant bound holds on random correlations") {
  for (int rep = 0; rep < 50; ++rep) {
    const Tensor r = random_correlation_matrix(6, 1000 + static_cast<std::uint64_t>(rep));
    const EigenExtremes ex = symmetric_extremes(r);
    if (!(ex.min > 0.0)) continue;
    const double det = oracle::lu_det(r);
    const double lb = det_lower_bound(ex.min, ex.max, 6);
    CHECK(lb <= det + 1e-9);
  }
}

TEST_CASE("complexity term assembles and guards its radicand") {
  const double c = complexity_term(4.0, 3.0, 100.0, 0.05, -2.0, 1.0);
  const double expect = std::sqrt(36.0 + std::log(2000.0) + 2.0) / 10.0;
  CHECK(c == Catch::Approx(expect));
  CHECK_THROWS_AS(complexity_term(0.0, 0.0, 100.0, 0.05, 100.0, 1.0), NumericsError);
  CHECK_THROWS_AS(complexity_term(4.0, 3.0, 1.0, 0.05, 0.0, 1.0), ConfigError);
  CHECK_THROWS_AS(complexity_term(4.0, 3.0, 100.0, 1.5, 0.0, 1.0), ConfigError);
  CHECK_THROWS_AS(complexity_term(4.0, 3.0, 100.0, 0.05, 0.0, 0.0), ConfigError);
}

TEST_CASE("assembled report on equicorrelated estimates") {
  BoundInputs in = identity_layer_inputs();
  in.frob_norms = {2.0};
  const Tensor r_clean = equicorrelated_matrix(4, 0.3);
  const Tensor r_adv = equicorrelated_matrix(4, 0.5);
  const CorrelationEstimate clean = estimate_from_dense(r_clean, 2, 2, DomainTag::clean);
  const CorrelationEstimate adv = estimate_from_dense(r_adv, 2, 2, DomainTag::adversarial);
  const BoundReport rep = corollary_bound(in, clean, adv);
  // ||W||_F^2 = 4 with unit spectral norm: phi = 1 * (1+1)^2 * 4
  CHECK(rep.phi == Catch::Approx(16.0).margin(1e-9));
  CHECK(rep.kl == std::max(rep.kl_clean, rep.kl_adv));
  REQUIRE(rep.lambdas.size() == 1);
  // equicorrelated(4, r) marginals are [[2, 2r], [2r, 2]]: top eigenvalue
  // 2 + 2r, so lambda' = sqrt(2 + 2*0.5) at the adversarial domain
  CHECK(rep.lambdas[0].lambda_prime_max == Catch::Approx(std::sqrt(3.0)));
  CHECK(rep.lambdas[0].lambda_dprime_max == Catch::Approx(std::sqrt(3.0)));
  // dense extremes: eigenvalues of equicorrelated(4, r) are 1+3r and 1-r
  CHECK(rep.lambdas[0].lambda_max == Catch::Approx(2.5));
  CHECK(rep.lambdas[0].lambda_min == Catch::Approx(0.5));
  CHECK(rep.lambda_sum == Catch::Approx(2.0 * std::sqrt(3.0)));
  CHECK(rep.complexity > 0.0);
  CHECK(rep.comparator_only);
  CHECK(rep.attack_kind == "fgm");
  CHECK(rep.estimator == "sampling");
}

TEST_CASE("zero spectral norm layers are rejected") {
  BoundInputs in = identity_layer_inputs();
  in.spectral_norms = {0.0};
  CHECK_THROWS_AS(phi_adv_fgm(in), NumericsError);
}

TEST_CASE("input validation") {
  BoundInputs in = identity_layer_inputs();
  in.m = 1;
  CHECK_THROWS_AS(in.validate(), ConfigError);
  in = identity_layer_inputs();
  in.epsilon = 0.5;
  in.kappa = 0.0;
  CHECK_THROWS_AS(in.validate(), ConfigError);
  in = identity_layer_inputs();
  in.delta = 1.0;
  CHECK_THROWS_AS(in.validate(), ConfigError);
  in = identity_layer_inputs();
  in.margin = 0.0;
  CHECK_THROWS_AS(in.validate(), ConfigError);
  in = identity_layer_inputs();
  in.frob_norms = {1.0, 2.0};
  CHECK_THROWS_AS(in.validate(), ConfigError);
}

TEST_CASE("layer norms of a live network") {
  MlpNetwork net;
  net.dims = {2, 2};
  net.activation = Activation::linear;
  Tensor w({2, 2}, {3, 0, 0, 4});
  net.weights = {w};
  std::vector<double> spectral, frob;
  layer_norms(net, spectral, frob);
  REQUIRE(spectral.size() == 1);
  CHECK(spectral[0] == Catch::Approx(4.0));
  CHECK(frob[0] == Catch::Approx(5.0));
}

TEST_CASE("empirical comparator constants") {
  const MlpNetwork net = init_network({3, 6, 2}, Activation::tanh, 19);
  LabeledBatch batch;
  batch.x = Tensor::zeros({6, 3});
  Rng rng(20);
  rng.fill_uniform(batch.x, 0.2, 0.9);
  batch.y = {0, 1, 0, 1, 0, 1};
  AttackConfig atk;
  atk.epsilon = 0.05;
  atk.step_size = 0.02;
  atk.iterations = 3;
  atk.seed = 2;
  const KappaB kb = estimate_kappa_B(net, batch, atk);
  // B is the largest row norm of the clean inputs
  double expect_b = 0.0;
  for (std::size_t i = 0; i < 6; ++i) {
    double n2 = 0.0;
    for (std::size_t j = 0; j < 3; ++j) n2 += batch.x.at(i, j) * batch.x.at(i, j);
    expect_b = std::max(expect_b, std::sqrt(n2));
  }
  CHECK(kb.input_bound == Catch::Approx(expect_b));
  CHECK(kb.kappa > 0.0);
  CHECK(!kb.kappa_floored);
}

TEST_CASE("attack kind and sigma names round trip") {
  CHECK(attack_kind_from_name("fgm") == AttackKind::fgm);
  CHECK(attack_kind_from_name("pgm") == AttackKind::pgm);
  CHECK_THROWS_AS(attack_kind_from_name("cw"), ConfigError);
  CHECK(sigma_convention_from_name("uniform") == SigmaConvention::uniform);
  CHECK(sigma_convention_from_name("spectral") == SigmaConvention::spectral);
  CHECK_THROWS_AS(sigma_convention_from_name("l2"), ConfigError);
}
