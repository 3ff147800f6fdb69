#include <doctest.h>

#include <cmath>

#include "bayeslayers/bayes.hpp"
#include "bayeslayers/chi_square.hpp"
#include "bayeslayers/errors.hpp"
#include "bayeslayers/ops.hpp"
#include "oracles.hpp"

using namespace bayeslayers;

namespace {

Model five_layer_model() {
  Rng rng(1);
  Model m;
  m.layers.push_back(make_conv2d("c0", oracle::random_tensor({2, 1, 3, 3}, rng), Tensor({2}), 1, 1));
  m.layers.push_back(make_batchnorm("bn", Tensor({2}, 1.0), Tensor({2}), Tensor({2}), Tensor({2}, 1.0)));
  m.layers.push_back(make_relu("r"));
  m.layers.push_back(make_conv2d("c1", oracle::random_tensor({2, 2, 3, 3}, rng), Tensor({2}), 1, 1));
  m.layers.push_back(make_flatten("flat"));
  m.layers.push_back(make_linear("fc", oracle::random_tensor({3, 2 * 4 * 4}, rng), Tensor({3})));
  m.class_count = 3;
  m.backbone_end = 5;
  m.validate();
  return m;
}

GaussianLayerPosterior isotropic(std::size_t m, double q) {
  GaussianLayerPosterior p;
  p.layer_name = "w";
  p.mean = Tensor({m}, 0.25);
  p.sigma = 0.5;
  p.dimension = m;
  p.epsilon_quantile = q;
  p.radius2_threshold = q == 0.0 ? 0.0 : chi_square_quantile(static_cast<unsigned>(m), q);
  return p;
}

}  // namespace

TEST_CASE("policies select layers by kind and partition") {
  const Model m = five_layer_model();
  auto sel = [&](PolicyKind k) { return select_layers(m, {k, {}}); };
  using V = std::vector<std::string>;
  CHECK(sel(PolicyKind::none).empty());
  CHECK(sel(PolicyKind::conv_all) == V{"c0", "c1"});
  CHECK(sel(PolicyKind::conv_backbone) == V{"c0", "c1"});
  CHECK(sel(PolicyKind::linear_backbone).empty());
  CHECK(sel(PolicyKind::linear_all) == V{"fc"});
  CHECK(sel(PolicyKind::full) == V{"c0", "bn", "c1", "fc"});
  CHECK(select_layers(m, {PolicyKind::none, {"fc", "c0", "fc"}}) == V{"c0", "fc"});
  CHECK_THROWS_AS(select_layers(m, {PolicyKind::none, {"r"}}), std::invalid_argument);
  CHECK_THROWS_AS(select_layers(m, {PolicyKind::none, {"nope"}}), std::invalid_argument);
  for (PolicyKind k : kAllPolicies) CHECK(parse_policy(to_string(k)) == k);
  CHECK_THROWS(parse_policy("everything"));
}

TEST_CASE("the micro-cnn backbone ends before the head") {
  const Model cnn = make_preset(Architecture::micro_cnn, {1, 16, 16}, 3, true, 0);
  CHECK(select_layers(cnn, {PolicyKind::linear_backbone, {}}) == std::vector<std::string>{"fc1"});
  CHECK(select_layers(cnn, {PolicyKind::linear_all, {}}) == std::vector<std::string>{"fc1", "head"});
}

TEST_CASE("posterior width scales with the layer's weight magnitude") {
  const Model m = five_layer_model();
  const auto posts = build_posteriors(m, {"c0", "fc"}, 0.1, 0.05);
  REQUIRE(posts.size() == 2);
  const Tensor& w = m.layers[0].weights();
  double ss = 0.0;
  for (double v : w.values()) ss += v * v;
  CHECK(posts[0].sigma == doctest::Approx(0.1 * std::sqrt(ss / 18.0)).epsilon(1e-14));
  CHECK(posts[0].dimension == 18);
  CHECK(posts[0].mean == w);
  CHECK(posts[1].layer_index == 5);
  CHECK(posts[1].radius2_threshold == chi_square_quantile(96, 0.05));

  Model zero = m;
  zero.layers[0].weights() = Tensor({2, 1, 3, 3});
  CHECK(build_posteriors(zero, {"c0"}, 0.05, 0.05)[0].sigma == doctest::Approx(0.05 * kSigmaFloor));
  CHECK_THROWS(build_posteriors(m, {"r"}, 0.05, 0.05));
  CHECK_THROWS(build_posteriors(m, {"c0"}, 0.0, 0.05));
  CHECK_THROWS(build_posteriors(m, {"c0"}, 0.05, 1.0));
}

TEST_CASE("sampler acceptance rate is one minus q") {
  for (std::size_t m : {1u, 10u, 100u}) {
    for (double q : {0.0, 0.05, 0.5, 0.9}) {
      const GaussianLayerPosterior post = isotropic(m, q);
      Rng rng = Rng::stream(17, {m, static_cast<std::uint64_t>(q * 100)});
      std::size_t attempts = 0, accepted = 0;
      while (attempts < 40000) {
        const WeightDraw d = sample_layer_weights(post, rng, 1000);
        attempts += d.attempts;
        ++accepted;
        CHECK(d.radius2 == mahalanobis_radius2(d.weights, post.mean, post.sigma));
        if (q > 0.0) CHECK(d.radius2 > post.radius2_threshold);
        if (q == 0.0) CHECK(d.attempts == 1);
      }
      INFO("m=" << m << " q=" << q);
      CHECK(std::abs(static_cast<double>(accepted) / static_cast<double>(attempts) - (1.0 - q)) < 0.02);
    }
  }
}

TEST_CASE("sampler gives up after the attempt cap") {
  const GaussianLayerPosterior post = isotropic(1, 0.9999);
  Rng rng(3);
  CHECK_THROWS_AS(sample_layer_weights(post, rng, 3), SamplerExhaustedError);
  CHECK(default_max_rejection_attempts(0.05) == 100);
  CHECK(default_max_rejection_attempts(0.9) == 500);
}

TEST_CASE("ensemble members are reproducible and thread-count independent") {
  const Model m = five_layer_model();
  const auto posts = build_posteriors(m, select_layers(m, {PolicyKind::full, {}}));
  const EnsembleConfig cfg{12, 5, std::nullopt};
  const MonteCarloEnsemble one(m, posts, cfg, 1), many(m, posts, cfg, 4);
  for (std::size_t t = 0; t < cfg.sample_count; ++t)
    for (std::size_t p = 0; p < posts.size(); ++p) CHECK(one.member_weights(t, p) == many.member_weights(t, p));
  CHECK_FALSE(one.member_weights(0, 0) == one.member_weights(1, 0));

  Rng rng(8);
  const Tensor x = oracle::random_tensor({1, 4, 4}, rng);
  const auto a = one.predict(x, 1), b = many.predict(x, 3);
  for (std::size_t t = 0; t < a.size(); ++t) CHECK(a[t].logits == b[t].logits);
  const auto c = mc_predict(m, posts, x, cfg, 2);
  for (std::size_t t = 0; t < a.size(); ++t) CHECK(a[t].logits == c[t].logits);
}

TEST_CASE("an empty selection reproduces the deterministic forward pass exactly") {
  const Model m = five_layer_model();
  Rng rng(2);
  const Tensor x = oracle::random_tensor({1, 4, 4}, rng);
  const Prediction base = forward(m, x);
  const auto out = mc_predict(m, {}, x, {7, 1, std::nullopt});
  REQUIRE(out.size() == 7);
  for (const auto& p : out) CHECK(p.logits == base.logits);
}

TEST_CASE("a vanishing posterior width reproduces the forward pass closely") {
  const Model m = five_layer_model();
  auto posts = build_posteriors(m, select_layers(m, {PolicyKind::full, {}}));
  for (auto& p : posts) p.sigma = 1e-12;
  Rng rng(2);
  const Tensor x = oracle::random_tensor({1, 4, 4}, rng);
  const Prediction base = forward(m, x);
  for (const auto& p : mc_predict(m, posts, x, {10, 3, std::nullopt}))
    for (std::size_t k = 0; k < 3; ++k) CHECK(std::abs(p.logits[k] - base.logits[k]) <= 1e-6);
}

TEST_CASE("predictive mean averages softmax and uses unbiased variance") {
  std::vector<Prediction> samples{{Tensor::vector({0, 0}), Tensor::vector({0, 0, 2, 2})},
                                  {Tensor::vector({2, 0}), Tensor::vector({2, 2, 4, 4})}};
  const PredictiveSummary s = predictive_mean(samples);
  const double p1 = softmax(Tensor::vector({2, 0}))[0];
  CHECK(s.mean_probabilities[0] == doctest::Approx((0.5 + p1) / 2));
  CHECK(s.mean_probabilities[0] + s.mean_probabilities[1] == doctest::Approx(1.0));
  CHECK(s.logit_variance[0] == doctest::Approx(2.0));
  CHECK(s.logit_variance[1] == 0.0);
  REQUIRE(s.mean_box.has_value());
  CHECK(*s.mean_box == Tensor::vector({1, 1, 3, 3}));
  CHECK(predictive_mean({samples[0]}).logit_variance == Tensor({2}));
  CHECK_THROWS(predictive_mean({}));
}
