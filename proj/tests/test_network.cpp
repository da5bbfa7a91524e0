#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "dihc/network.hpp"
#include "dihc/rng.hpp"

using namespace dihc;

namespace {

SubModelConfig small_config(int index) {
  SubModelConfig cfg = default_submodel_config(index);
  cfg.base_channels = 2;
  cfg.depth = 3;
  return cfg;
}

Tensor random_input(Rng& rng, int n, int s) {
  std::vector<float> v(static_cast<size_t>(n) * s * s * s);
  for (auto& x : v) x = rng.normal();
  return Tensor::from_vector({n, 1, s, s, s}, std::move(v));
}

}  // namespace

TEST_CASE("default configs carry the three diversified sub-layer choices") {
  const auto m1 = default_submodel_config(1);
  CHECK(m1.norm_mode == NormMode::kGroup);
  CHECK(m1.upsample_mode == DecoderUpsample::kTrilinear);
  const auto m2 = default_submodel_config(2);
  CHECK(m2.norm_mode == NormMode::kBatch);
  CHECK(m2.upsample_mode == DecoderUpsample::kTransposedConv);
  const auto m3 = default_submodel_config(3);
  CHECK(m3.norm_mode == NormMode::kInstance);
  CHECK(m3.upsample_mode == DecoderUpsample::kNearest);
  CHECK(m1.base_channels == 8);
  CHECK(m1.depth == 4);
  CHECK(m1.num_classes == 2);
  CHECK_THROWS_AS(default_submodel_config(4), std::invalid_argument);
}

TEST_CASE("equal seed and config build bit-identical parameters") {
  SubModel a(small_config(1), 42);
  SubModel b(small_config(1), 42);
  REQUIRE(a.params().size() == b.params().size());
  for (size_t i = 0; i < a.params().size(); ++i) {
    CHECK(a.params()[i].first == b.params()[i].first);
    CHECK(a.params()[i].second.values() == b.params()[i].second.values());
  }
  SubModel c(small_config(1), 43);
  CHECK(a.params()[0].second.values() != c.params()[0].second.values());
}

TEST_CASE("parameter census: conv layers match, transposed conv is extra") {
  SubModel m1(small_config(1), 7);
  SubModel m2(small_config(2), 7);
  SubModel m3(small_config(3), 7);
  CHECK(m1.conv_param_count() == m3.conv_param_count());
  CHECK(m1.conv_param_count() == m2.conv_param_count());
  CHECK(m1.upsample_param_count() == 0);
  CHECK(m3.upsample_param_count() == 0);
  CHECK(m2.upsample_param_count() > 0);

  // models 1 and 3 share the exact same parameter name list
  REQUIRE(m1.params().size() == m3.params().size());
  for (size_t i = 0; i < m1.params().size(); ++i) {
    CHECK(m1.params()[i].first == m3.params()[i].first);
  }
  CHECK(m2.params().size() == m1.params().size() + 2);  // two up levels at depth 3
}

TEST_CASE("forward on zeros: four full-resolution maps, finite, strictly in (0,1)") {
  for (int index = 1; index <= 3; ++index) {
    SubModelConfig cfg = small_config(index);
    cfg.depth = 4;
    SubModel m(cfg, 5);
    Tensor x = Tensor::zeros({2, 1, 16, 16, 16});
    auto pred = m.forward_multiscale(x, /*training=*/true);
    CHECK(pred.model_index == index);
    REQUIRE(pred.probs.size() == 4);
    for (const auto& p : pred.probs) {
      REQUIRE(p.shape() == Shape{2, 16, 16, 16});
      for (long i = 0; i < p.numel(); ++i) {
        CHECK(std::isfinite(p.data()[i]));
        CHECK(p.data()[i] > 0.f);
        CHECK(p.data()[i] < 1.f);
      }
    }
  }
}

TEST_CASE("inference is deterministic: same input, same outputs, twice") {
  Rng rng(1);
  SubModel m(small_config(2), 9);  // batch norm exercises running stats
  Tensor x = random_input(rng, 1, 8);
  // a training pass first, so running stats are non-trivial
  m.forward_multiscale(x, true);
  auto p1 = m.forward_multiscale(x, false);
  auto p2 = m.forward_multiscale(x, false);
  for (int s = 0; s < 3; ++s) {
    CHECK(std::memcmp(p1.probs[s].data(), p2.probs[s].data(),
                      p1.probs[s].numel() * sizeof(float)) == 0);
  }
}

TEST_CASE("input validation: channel and divisibility errors") {
  SubModel m(small_config(1), 3);
  CHECK_THROWS_AS(m.forward_multiscale(Tensor::zeros({1, 2, 8, 8, 8}), true),
                  std::invalid_argument);
  CHECK_THROWS_AS(m.forward_multiscale(Tensor::zeros({1, 1, 6, 8, 8}), true),
                  std::invalid_argument);
  SubModelConfig bad = small_config(1);
  bad.num_classes = 3;
  CHECK_THROWS_AS(SubModel(bad, 1), std::invalid_argument);
}

TEST_CASE("ensemble: fixed order, control case, diversity probe") {
  EnsembleConfig ec;
  for (int i = 0; i < 3; ++i) {
    ec.models[i] = small_config(i + 1);
  }
  ec.patch = 8;
  ec.seed = 11;
  auto models = build_ensemble(ec);
  Rng rng(2);
  Tensor x = random_input(rng, 1, 8);
  auto preds = ensemble_forward(models, x, true);
  CHECK(preds[0].model_index == 1);
  CHECK(preds[1].model_index == 2);
  CHECK(preds[2].model_index == 3);

  // control: identical configs and identical seeds -> identical predictions
  SubModel a(small_config(2), 77);
  SubModel b(small_config(2), 77);
  auto pa = a.forward_multiscale(x, true);
  auto pb = b.forward_multiscale(x, true);
  CHECK(std::memcmp(pa.probs[0].data(), pb.probs[0].data(),
                    pa.probs[0].numel() * sizeof(float)) == 0);

  // diversified configs with one seed: outputs differ measurably
  SubModel d1(small_config(1), 77);
  SubModel d3(small_config(3), 77);
  auto q1 = d1.forward_multiscale(x, true);
  auto q3 = d3.forward_multiscale(x, true);
  float max_diff = 0.f;
  for (long i = 0; i < q1.probs[0].numel(); ++i) {
    max_diff = std::max(max_diff, std::abs(q1.probs[0].data()[i] - q3.probs[0].data()[i]));
  }
  CHECK(max_diff > 1e-3f);

  EnsembleConfig bad = ec;
  bad.patch = 6;
  CHECK_THROWS_AS(build_ensemble(bad), std::invalid_argument);
}

TEST_CASE("changing norm/upsample modes changes values, never shapes") {
  Rng rng(3);
  Tensor x = random_input(rng, 1, 8);
  std::array<MultiScalePrediction, 3> all;
  for (int index = 1; index <= 3; ++index) {
    SubModel m(small_config(index), 4);
    all[index - 1] = m.forward_multiscale(x, true);
  }
  for (int s = 0; s < 3; ++s) {
    CHECK(all[0].probs[s].shape() == all[1].probs[s].shape());
    CHECK(all[1].probs[s].shape() == all[2].probs[s].shape());
  }
}

TEST_CASE("gradients reach every parameter through the full forward pass") {
  SubModel m(small_config(1), 6);
  Rng rng(4);
  Tensor x = random_input(rng, 1, 8);
  auto pred = m.forward_multiscale(x, true);
  Tensor loss;
  for (const auto& p : pred.probs) {
    Tensor term = mean(p);
    loss = loss.defined() ? add(loss, term) : term;
  }
  backward(loss);
  int with_grad = 0;
  for (auto& [name, p] : m.params()) {
    bool nonzero = false;
    if (p.has_grad()) {
      for (float g : p.grad_view()) {
        CHECK(std::isfinite(g));
        nonzero = nonzero || g != 0.f;
      }
    }
    with_grad += nonzero ? 1 : 0;
  }
  // allow a few exact zeros (dead relu corners) but require most alive
  CHECK(with_grad >= static_cast<int>(m.params().size()) - 2);
}
