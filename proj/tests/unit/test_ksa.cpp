#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "lenc/error.hpp"
#include "lenc/ksa.hpp"
#include "oracles.hpp"

using namespace lenc;

namespace {

std::vector<Vector> blob(std::size_t n, Vector center, double sigma, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Vector> out;
  for (std::size_t i = 0; i < n; ++i) {
    Vector x = center;
    for (double& v : x) v += sigma * rng.normal();
    out.push_back(std::move(x));
  }
  return out;
}

VaeSettings tiny_settings() {
  VaeSettings s;
  s.hidden = 2;
  s.latent_dim = 2;
  return s;
}

VaeModel random_tiny_vae(std::uint64_t seed) {
  VaeModel v = VaeModel::initialize(2, tiny_settings(), seed);
  Rng rng(seed + 100);
  Vector p = v.parameters();
  for (double& x : p) x = rng.uniform(-1.0, 1.0);
  v.set_parameters(p);
  v.decoder_sigma = 0.7;
  return v;
}

double oracle_elbo(const VaeModel& v, const oracle::Vec& x, const oracle::Vec& mean,
                   const oracle::Vec& logvar, const oracle::Vec& eps) {
  oracle::Vec z(mean.size());
  for (std::size_t j = 0; j < z.size(); ++j) z[j] = mean[j] + std::exp(logvar[j] / 2) * eps[j];
  const oracle::Vec recon = oracle::mlp_logits({oracle::from_dense(v.decoder_hidden)},
                                               oracle::from_dense(v.decoder_output), z);
  return oracle::gaussian_log_density(x, recon, v.decoder_sigma) -
         oracle::kl_diag_gaussian_to_standard(mean, logvar);
}

// Shared trained detector on one blob; training once keeps the suite fast.
struct Trained {
  std::vector<Vector> train = blob(600, {1.0, -0.5}, 0.1, 5);
  std::vector<Vector> held = blob(100, {1.0, -0.5}, 0.1, 6);
  VaeModel vae = train_vae(train, VaeSettings{}, 17);
};

const Trained& trained() {
  static const Trained t;
  return t;
}

}  // namespace

TEST_SUITE("ksa") {
  TEST_CASE("elbo matches the formula oracle on a 2-2-2 VAE") {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      const VaeModel v = random_tiny_vae(seed);
      Rng rng(seed);
      const Vector x{rng.normal(), rng.normal()};
      const Posterior q = v.encode(x);
      const Vector eps{rng.normal(), rng.normal()};

      oracle::Vec h = oracle::affine(oracle::from_dense(v.encoder_hidden), x);
      for (double& a : h) a = std::tanh(a);
      const oracle::Vec m = oracle::affine(oracle::from_dense(v.encoder_mean), h);
      const oracle::Vec lv = oracle::affine(oracle::from_dense(v.encoder_log_variance), h);
      CHECK(oracle::max_relative_error(q.mean, m) < 1e-12);
      CHECK(oracle::max_relative_error(q.log_variance, lv) < 1e-12);
      CHECK(elbo(v, x, q, eps) == doctest::Approx(oracle_elbo(v, x, m, lv, eps)).epsilon(1e-8));
    }
  }

  TEST_CASE("perfect reconstruction with a prior-matching posterior") {
    // Zero decoder weights make the output equal to the output bias, so it
    // reconstructs x exactly; the KL term vanishes at mean 0, log-variance 0.
    VaeModel v = VaeModel::initialize(2, tiny_settings(), 3);
    const Vector x{0.25, -1.5};
    std::fill(v.decoder_output.weights.begin(), v.decoder_output.weights.end(), 0.0);
    v.decoder_output.bias = x;
    const Posterior q{{0.0, 0.0}, {0.0, 0.0}};
    const double value = elbo(v, x, q, Vector{0.3, -0.2});
    CHECK(value == doctest::Approx(oracle::gaussian_log_density(x, x, v.decoder_sigma)));
    v.decoder_output.bias = {0.3, -1.5};
    CHECK(elbo(v, x, q, Vector{0.3, -0.2}) < value);
    CHECK(elbo(v, x, Posterior{{0.5, 0.0}, {0.0, 0.0}}, Vector{0.0, 0.0}) < value);
  }

  TEST_CASE("elbo validates dimensions") {
    const VaeModel v = random_tiny_vae(1);
    CHECK_THROWS_AS(elbo(v, Vector{1.0}, v.encode(Vector{1.0, 2.0}), Vector{0.0, 0.0}),
                    InvalidArgument);
    CHECK_THROWS_AS(elbo(v, Vector{1.0, 2.0}, Posterior{{0.0}, {0.0}}, Vector{0.0}),
                    InvalidArgument);
  }

  TEST_CASE("negative elbo gradient matches finite differences") {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      VaeModel v = random_tiny_vae(seed);
      Rng rng(seed * 7);
      const Vector x{rng.normal(), rng.normal()};
      const Vector eps{rng.normal(), rng.normal()};
      Vector grad(v.parameters().size(), 0.0);
      const double value = v.negative_elbo_gradient(x, eps, 1.0, grad);
      CHECK(value == doctest::Approx(-elbo(v, x, v.encode(x), eps)).epsilon(1e-10));
      auto f = [&](const oracle::Vec& p) {
        VaeModel w = v;
        w.set_parameters(p);
        return -elbo(w, x, w.encode(x), eps);
      };
      CHECK(oracle::max_relative_error(grad, oracle::numeric_gradient(f, v.parameters())) < 1e-5);
    }
  }

  TEST_CASE("zero epochs equals the seeded initialization") {
    VaeSettings s;
    s.epochs = 0;
    const auto data = blob(50, {0.0, 0.0}, 0.1, 1);
    const VaeModel v = train_vae(data, s, 9);
    CHECK(v.parameters() == VaeModel::initialize(2, s, 9).parameters());
  }

  TEST_CASE("training raises the mean elbo on blob data") {
    std::vector<double> history;
    const auto data = blob(400, {-1.0, 2.0}, 0.1, 2);
    train_vae(data, VaeSettings{}, 4, &history);
    REQUIRE(history.size() == VaeSettings{}.epochs + 1);
    CHECK(history.back() > history.front());
  }

  TEST_CASE("training is deterministic") {
    const auto data = blob(200, {0.5, 0.5}, 0.1, 3);
    VaeSettings s;
    s.epochs = 5;
    CHECK(train_vae(data, s, 8) == train_vae(data, s, 8));
    CHECK(train_vae(data, s, 8).parameters() != train_vae(data, s, 9).parameters());
  }

  TEST_CASE("small training sets are flagged unreliable") {
    VaeSettings s;
    s.epochs = 1;
    s.min_training_size = 100;
    CHECK(train_vae(blob(99, {0, 0}, 0.1, 1), s, 1).unreliable);
    CHECK_FALSE(train_vae(blob(100, {0, 0}, 0.1, 1), s, 1).unreliable);
  }

  TEST_CASE("snapshot round trip") {
    const VaeModel& v = trained().vae;
    const VaeModel back = VaeModel::deserialize(v.serialize());
    CHECK(back == v);
    CHECK_THROWS_AS(VaeModel::deserialize(Stream{}.serialize()), ValidationError);
  }

  TEST_CASE("elbo decreases along a ray away from the data") {
    const VaeModel& v = trained().vae;
    double prev = 1e300;
    for (double t : {0.0, 0.5, 1.0, 2.0, 4.0}) {
      const Vector x{1.0 + t, -0.5 + t};
      const double e = elbo(v, x, v.encode(x), Vector{0.0, 0.0});
      CAPTURE(t);
      CHECK(e < prev);
      prev = e;
    }
  }

  TEST_CASE("likelihood regret properties") {
    const VaeModel& v = trained().vae;
    RegretSettings frozen;
    frozen.opt_lr = 0.0;
    CHECK(likelihood_regret(v, trained().held[0], frozen) == 0.0);
    CHECK_THROWS_AS(likelihood_regret(v, trained().held[0], RegretSettings{0}), InvalidArgument);

    Rng rng(4);
    for (int i = 0; i < 50; ++i) {
      const Vector x{rng.uniform(-12, 12), rng.uniform(-12, 12)};
      CHECK(likelihood_regret(v, x, RegretSettings{}) >= -1e-6);
    }

    const auto ood = blob(100, {2.0, 0.5}, 0.1, 7);  // 10 sigma along each axis
    std::vector<double> id_lr;
    std::vector<double> ood_lr;
    for (const auto& x : trained().held) id_lr.push_back(likelihood_regret(v, x, RegretSettings{}));
    for (const auto& x : ood) ood_lr.push_back(likelihood_regret(v, x, RegretSettings{}));
    const double id_mean = std::accumulate(id_lr.begin(), id_lr.end(), 0.0) / id_lr.size();
    const double ood_mean = std::accumulate(ood_lr.begin(), ood_lr.end(), 0.0) / ood_lr.size();
    CHECK(id_mean < ood_mean);
    CHECK(oracle::auroc(id_lr, ood_lr) >= 0.9);
  }

  TEST_CASE("stream score aggregation") {
    const VaeModel& v = trained().vae;
    std::vector<Vector> s(trained().held.begin(), trained().held.begin() + 20);
    const RegretSettings rs;
    CHECK(stream_score(v, std::span(s.data(), 1), rs).value ==
          likelihood_regret(v, s[0], rs));

    const double base = stream_score(v, s, rs).value;
    std::vector<Vector> shuffled = s;
    std::reverse(shuffled.begin(), shuffled.end());
    std::rotate(shuffled.begin(), shuffled.begin() + 7, shuffled.end());
    CHECK(stream_score(v, shuffled, rs).value == doctest::Approx(base).epsilon(1e-12));

    std::vector<Vector> doubled = s;
    doubled.insert(doubled.end(), s.begin(), s.end());
    CHECK(stream_score(v, doubled, rs).value == doctest::Approx(base).epsilon(1e-12));

    RegretSettings threaded = rs;
    threaded.threads = 3;
    const OodScore a = stream_score(v, s, rs);
    const OodScore b = stream_score(v, s, threaded);
    CHECK(a.per_point == b.per_point);
    CHECK(a.value == b.value);

    CHECK_THROWS_AS(stream_score(v, std::span<const Vector>{}, rs), InvalidArgument);
  }

  TEST_CASE("verdict rule") {
    const Thresholds th{1.0, 0.2};
    CHECK(verdict(1.5, th) == Verdict::Unknown);
    CHECK(verdict(0.5, th) == Verdict::Limited);
    CHECK(verdict(0.1, th) == Verdict::Expert);
    CHECK(verdict(1.0, th) == Verdict::Unknown);
    CHECK(verdict(0.2, th) == Verdict::Limited);
    CHECK_THROWS_AS(verdict(0.5, Thresholds{0.2, 1.0}), InvalidArgument);
    CHECK_THROWS_AS(verdict(0.5, Thresholds{0.2, 0.2}), InvalidArgument);
  }

  TEST_CASE("route head") {
    CHECK(route_head(std::vector<double>{0.5, 0.1, 0.9}) == 1);
    CHECK(route_head(std::vector<double>{0.7}) == 0);
    CHECK(route_head(std::vector<double>{0.3, 0.3}) == 0);
    CHECK(route_head(std::vector<double>{2.0, 0.3, 0.3}) == 1);
    CHECK_THROWS_AS(route_head(std::vector<double>{}), RoutingError);
  }

  TEST_CASE("quantile interpolates linearly") {
    CHECK(quantile({4, 1, 3, 2}, 0.5) == doctest::Approx(2.5));
    CHECK(quantile({4, 1, 3, 2}, 0.0) == 1.0);
    CHECK(quantile({4, 1, 3, 2}, 1.0) == 4.0);
    CHECK(quantile({10, 20}, 0.9) == doctest::Approx(19.0));
    CHECK_THROWS_AS(quantile({}, 0.5), InvalidArgument);
  }

  TEST_CASE("calibrated thresholds are ordered and bracket the held-out mean") {
    std::vector<double> scores;
    Rng src(1);
    for (int i = 0; i < 200; ++i) scores.push_back(std::abs(src.normal()));
    Rng rng(2);
    const Thresholds th = calibrate_thresholds(scores, CalibrationSettings{}, rng);
    const double mean = std::accumulate(scores.begin(), scores.end(), 0.0) / scores.size();
    CHECK(th.epsilon < th.delta);
    CHECK(th.epsilon > mean);
    Rng again(2);
    CHECK(calibrate_thresholds(scores, CalibrationSettings{}, again) == th);

    CalibrationSettings bad;
    bad.epsilon_quantile = 0.99;
    bad.delta_quantile = 0.9;
    CHECK_THROWS_AS(calibrate_thresholds(scores, bad, rng), InvalidArgument);
  }

  TEST_CASE("fitted detector separates its task from a shifted one") {
    KsaSettings s;
    auto data = blob(1000, {0.0, 1.0}, 0.1, 21);
    const KsaModule ksa = fit_ksa(data, s, 5);
    CHECK_FALSE(ksa.unreliable());
    CHECK(ksa.data == data);
    const auto id = blob(25, {0.0, 1.0}, 0.1, 22);
    const auto ood = blob(25, {1.0, 2.0}, 0.1, 23);
    CHECK(verdict(ksa.score(id, s.regret).value, ksa.thresholds) != Verdict::Unknown);
    CHECK(verdict(ksa.score(ood, s.regret).value, ksa.thresholds) == Verdict::Unknown);
    CHECK(fit_ksa(data, s, 5) == ksa);
  }
}
