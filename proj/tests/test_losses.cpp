#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cmath>

#include "dihc/gradcheck.hpp"
#include "dihc/losses.hpp"
#include "dihc/rng.hpp"

using namespace dihc;

namespace {

// scalar-loop transcriptions, independent of the production graph ops
double ref_dice(const std::vector<float>& p, const std::vector<float>& y, double smooth) {
  double spy = 0, sp = 0, sy = 0;
  for (size_t i = 0; i < p.size(); ++i) {
    spy += static_cast<double>(p[i]) * y[i];
    sp += p[i];
    sy += y[i];
  }
  return 1.0 - (2.0 * spy + smooth) / (sp + sy + smooth);
}

double ref_mse(const std::vector<float>& a, const std::vector<float>& b) {
  double acc = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.size());
}

std::vector<float> ref_sharpen(const std::vector<float>& p, double T) {
  std::vector<float> out(p.size());
  for (size_t i = 0; i < p.size(); ++i) {
    out[i] = static_cast<float>(refmath::sharpen(p[i], T));
  }
  return out;
}

// term-by-term transcription of the mutual consistency sum
double ref_mc(const std::array<MultiScalePrediction, 3>& preds, const ConsistencyWeights& w,
              double T) {
  double total = 0;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      if (i == j) continue;
      total += w.alpha1 * ref_mse(ref_sharpen(preds[i].probs[0].values(), T),
                                  preds[j].probs[0].values());
    }
  }
  return total;
}

// literal transcription of the six diagonal terms
double ref_dihc(const std::array<MultiScalePrediction, 3>& preds, const ConsistencyWeights& w,
                double T) {
  auto S = [&](int m) { return ref_sharpen(preds[m - 1].probs[0].values(), T); };
  auto p = [&](int m, int s) { return preds[m - 1].probs[s - 1].values(); };
  return w.alpha2 * ref_mse(S(1), p(3, 2)) + w.alpha3 * ref_mse(S(1), p(2, 3)) +
         w.alpha2 * ref_mse(S(2), p(1, 2)) + w.alpha3 * ref_mse(S(2), p(3, 3)) +
         w.alpha2 * ref_mse(S(3), p(2, 2)) + w.alpha3 * ref_mse(S(3), p(1, 3));
}

std::array<MultiScalePrediction, 3> random_preds(Rng& rng, const Shape& shape, bool rg = false,
                                                 float lo = 0.05f, float hi = 0.95f) {
  std::array<MultiScalePrediction, 3> preds;
  for (int m = 0; m < 3; ++m) {
    preds[m].model_index = m + 1;
    for (int s = 0; s < 4; ++s) {
      std::vector<float> v(static_cast<size_t>(shape_numel(shape)));
      for (auto& x : v) x = rng.uniform(lo, hi);
      preds[m].probs.push_back(Tensor::from_vector(shape, std::move(v), rg));
    }
  }
  return preds;
}

}  // namespace

TEST_CASE("dice_loss: perfect overlap, disjoint, and the hand-evaluated half case") {
  Tensor y = Tensor::from_vector({2, 2, 2}, {1, 1, 1, 1, 0, 0, 0, 0});
  CHECK(dice_loss(y.clone(), y).item() == doctest::Approx(0.0).epsilon(1e-6));

  Tensor inv = Tensor::from_vector({2, 2, 2}, {0, 0, 0, 0, 1, 1, 1, 1});
  const double smooth = 1e-5;
  CHECK(dice_loss(inv, y, smooth).item() ==
        doctest::Approx(1.0 - smooth / (8.0 + smooth)).epsilon(1e-6));

  Tensor half = Tensor::full({2, 2, 2}, 0.5f);
  CHECK(dice_loss(half, y, 1e-5f).item() == doctest::Approx(0.5).epsilon(1e-4));

  CHECK_THROWS_AS(dice_loss(half, Tensor::zeros({2, 2})), std::invalid_argument);
}

TEST_CASE("dice_loss matches the scalar reference on random inputs") {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const Shape sh{2, 3, 3, 3};
    std::vector<float> p(54), y(54);
    for (auto& v : p) v = rng.next_float();
    for (auto& v : y) v = rng.next_bool() ? 1.f : 0.f;
    const double got = dice_loss(Tensor::from_vector(sh, p), Tensor::from_vector(sh, y)).item();
    CHECK(std::abs(got - ref_dice(p, y, 1e-5)) < 1e-6);
  }
}

TEST_CASE("deep_supervised_loss: zero at ground truth, decomposes into 12 dice terms") {
  Rng rng(2);
  const Shape sh{2, 4, 4, 4};
  std::vector<float> yv(static_cast<size_t>(shape_numel(sh)));
  for (auto& v : yv) v = rng.next_bool() ? 1.f : 0.f;
  Tensor y = Tensor::from_vector(sh, yv);

  std::array<MultiScalePrediction, 3> exact;
  for (int m = 0; m < 3; ++m) {
    exact[m].model_index = m + 1;
    for (int s = 0; s < 4; ++s) exact[m].probs.push_back(y.clone());
  }
  CHECK(deep_supervised_loss(exact, y).item() == doctest::Approx(0.0).epsilon(1e-6));

  auto preds = random_preds(rng, sh);
  double expect = 0;
  for (int m = 0; m < 3; ++m) {
    for (int s = 0; s < 4; ++s) expect += dice_loss(preds[m].probs[s], y).item();
  }
  const double got = deep_supervised_loss(preds, y).item();
  CHECK(std::abs(got - expect) < 1e-6);

  double ref = 0;
  for (int m = 0; m < 3; ++m) {
    for (int s = 0; s < 4; ++s) ref += ref_dice(preds[m].probs[s].values(), yv, 1e-5);
  }
  CHECK(std::abs(got - ref) < 1e-5);

  // scale-1 restriction (deep supervision over intermediate heads disabled)
  double ref1 = 0;
  for (int m = 0; m < 3; ++m) ref1 += ref_dice(preds[m].probs[0].values(), yv, 1e-5);
  CHECK(std::abs(deep_supervised_loss(preds, y, 1).item() - ref1) < 1e-5);
}

TEST_CASE("sharpen: fixed point, identity temperature, high-precision value") {
  SharpenConfig cfg;
  for (float T : {0.1f, 0.5f, 1.f, 2.f}) {
    CHECK(sharpen_value(0.5, T) == doctest::Approx(0.5).epsilon(1e-12));
  }
  Tensor p = Tensor::from_vector({5}, {0.1f, 0.3f, 0.5f, 0.7f, 0.9f});
  cfg.temperature = 1.f;
  Tensor s1 = sharpen(p, cfg);
  for (int i = 0; i < 5; ++i) CHECK(s1.data()[i] == doctest::Approx(p.data()[i]).epsilon(1e-6));

  CHECK(std::abs(sharpen_value(0.9, 0.1) - 0.99999999971) < 1e-9);

  cfg.temperature = 0.1f;
  Tensor s = sharpen(p, cfg);
  CHECK(!s.requires_grad());  // stop-gradient

  // extremes stay finite through the clamp
  Tensor ext = Tensor::from_vector({4}, {0.f, 1.f, 1e-9f, 1.f - 1e-7f});
  Tensor se = sharpen(ext, cfg);
  for (int i = 0; i < 4; ++i) CHECK(std::isfinite(se.data()[i]));

  Tensor nan_in = Tensor::from_vector({1}, {std::nanf("")});
  CHECK_THROWS_AS(sharpen(nan_in, cfg), std::invalid_argument);
}

TEST_CASE("sharpen properties: monotone, pushes away from 1/2, symmetric") {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const double T = 0.1 + 0.8 * rng.next_double();
    const double p = 0.01 + 0.98 * rng.next_double();
    const double q = 0.01 + 0.98 * rng.next_double();
    const double sp = sharpen_value(p, T), sq = sharpen_value(q, T);
    if (p < q) CHECK(sp <= sq + 1e-12);
    if (T < 1.0) {
      if (p > 0.5) CHECK(sp > p);
      if (p < 0.5) CHECK(sp < p);
    }
    CHECK(std::abs(sharpen_value(1.0 - p, T) - (1.0 - sp)) < 1e-6);
  }
}

TEST_CASE("pairing tables: 6 mutual ordered pairs, 6 diagonal pairs, no self terms") {
  const auto mc = mc_pairs();
  CHECK(mc.size() == 6);
  for (const auto& p : mc) {
    CHECK(p.producer != p.consumer);
    CHECK(p.consumer_scale == 1);
  }
  int seen[4][4] = {};
  for (const auto& p : mc) seen[p.producer][p.consumer]++;
  for (int i = 1; i <= 3; ++i) {
    for (int j = 1; j <= 3; ++j) CHECK(seen[i][j] == (i != j ? 1 : 0));
  }

  const auto dihc = dihc_pairs();
  CHECK(dihc.size() == 6);
  auto has = [&](int prod, int cons, int scale) {
    for (const auto& p : dihc) {
      if (p.producer == prod && p.consumer == cons && p.consumer_scale == scale) return true;
    }
    return false;
  };
  CHECK(has(1, 3, 2));
  CHECK(has(1, 2, 3));
  CHECK(has(2, 1, 2));
  CHECK(has(2, 3, 3));
  CHECK(has(3, 2, 2));
  CHECK(has(3, 1, 3));
  for (const auto& p : dihc) {
    CHECK(p.producer != p.consumer);  // self-constraint excluded
    CHECK(p.consumer_scale != 4);     // deepest block never targeted
    CHECK(p.consumer_scale != 1);
  }
}

TEST_CASE("consistency losses: consensus on hard values gives exactly zero") {
  const Shape sh{1, 2, 2, 2};
  std::vector<float> hard = {0, 1, 1, 0, 1, 0, 0, 1};
  std::array<MultiScalePrediction, 3> preds;
  for (int m = 0; m < 3; ++m) {
    preds[m].model_index = m + 1;
    for (int s = 0; s < 4; ++s) preds[m].probs.push_back(Tensor::from_vector(sh, hard));
  }
  ConsistencyWeights w;
  SharpenConfig cfg;
  CHECK(mutual_consistency_loss(preds, w, cfg).item() == 0.f);
  CHECK(diagonal_consistency_loss(preds, w, cfg).item() == 0.f);
}

TEST_CASE("consistency losses match term-by-term transcriptions") {
  Rng rng(4);
  ConsistencyWeights w;
  SharpenConfig cfg;
  for (int trial = 0; trial < 100; ++trial) {
    auto preds = random_preds(rng, {1, 3, 3, 3});
    const double mc = mutual_consistency_loss(preds, w, cfg).item();
    const double dh = diagonal_consistency_loss(preds, w, cfg).item();
    const double mc_ref = ref_mc(preds, w, cfg.temperature);
    const double dh_ref = ref_dihc(preds, w, cfg.temperature);
    CHECK(std::abs(mc - mc_ref) <= 1e-6 * std::max(1.0, std::abs(mc_ref)));
    CHECK(std::abs(dh - dh_ref) <= 1e-6 * std::max(1.0, std::abs(dh_ref)));
  }
}

TEST_CASE("single-voxel offset case follows the 4 affected pair terms") {
  Rng rng(5);
  const Shape sh{1, 2, 2, 2};
  std::vector<float> base(8);
  for (auto& v : base) v = rng.uniform(0.2f, 0.8f);
  std::vector<float> off = base;
  off[3] += 0.1f;

  std::array<MultiScalePrediction, 3> preds;
  for (int m = 0; m < 3; ++m) {
    preds[m].model_index = m + 1;
    const auto& vals = (m == 2) ? off : base;
    for (int s = 0; s < 4; ++s) preds[m].probs.push_back(Tensor::from_vector(sh, vals));
  }
  ConsistencyWeights w;
  SharpenConfig cfg;
  const double got = mutual_consistency_loss(preds, w, cfg).item();

  auto S = [&](const std::vector<float>& p) { return ref_sharpen(p, cfg.temperature); };
  double expect = 0;
  expect += w.alpha1 * ref_mse(S(base), base) * 2;  // (1,2),(2,1)
  expect += w.alpha1 * (ref_mse(S(base), off) * 2 + ref_mse(S(off), base) * 2);
  CHECK(std::abs(got - expect) < 1e-6);
}

TEST_CASE("gradient routing: producers get nothing, consumers the MSE gradient") {
  Rng rng(6);
  const Shape sh{1, 2, 2, 2};
  auto preds = random_preds(rng, sh);
  // model 1 participates with gradient tracking; 2 and 3 are constants
  for (int s = 0; s < 4; ++s) {
    preds[0].probs[s] = preds[0].probs[s].clone(/*requires_grad=*/true);
  }
  ConsistencyWeights w;
  SharpenConfig cfg;
  Tensor l = mutual_consistency_loss(preds, w, cfg);
  backward(l);

  // consumer role only: d/dp1 of alpha1 * [MSE(S2, p1) + MSE(S3, p1)]
  const auto S2 = ref_sharpen(preds[1].probs[0].values(), cfg.temperature);
  const auto S3 = ref_sharpen(preds[2].probs[0].values(), cfg.temperature);
  const auto& p1 = preds[0].probs[0].values();
  const long n = 8;
  REQUIRE(preds[0].probs[0].has_grad());
  for (long i = 0; i < n; ++i) {
    const double expect = w.alpha1 * 2.0 / n * ((p1[i] - S2[i]) + (p1[i] - S3[i]));
    CHECK(std::abs(preds[0].probs[0].grad_view()[i] - expect) < 1e-6);
  }
  // intermediate scales of model 1 are not in any mutual pair
  for (int s = 1; s < 4; ++s) CHECK(!preds[0].probs[s].has_grad());
}

TEST_CASE("detached pseudo labels can be disabled for the ablation") {
  Rng rng(7);
  auto preds = random_preds(rng, {1, 2, 2, 2});
  for (int s = 0; s < 4; ++s) preds[0].probs[s] = preds[0].probs[s].clone(true);
  ConsistencyWeights w;
  SharpenConfig cfg;
  Tensor l = mutual_consistency_loss(preds, w, cfg, /*detach_pseudo=*/false);
  backward(l);
  // with gradients flowing through sharpening, the producer side contributes
  const auto S2 = ref_sharpen(preds[1].probs[0].values(), cfg.temperature);
  const auto S3 = ref_sharpen(preds[2].probs[0].values(), cfg.temperature);
  const auto& p1 = preds[0].probs[0].values();
  bool differs = false;
  for (long i = 0; i < 8; ++i) {
    const double consumer_only = w.alpha1 * 2.0 / 8 * ((p1[i] - S2[i]) + (p1[i] - S3[i]));
    if (std::abs(preds[0].probs[0].grad_view()[i] - consumer_only) > 1e-7) differs = true;
  }
  CHECK(differs);
}

TEST_CASE("l_mc is model-permutation invariant; l_dihc is not") {
  Rng rng(8);
  auto preds = random_preds(rng, {1, 3, 3, 3});
  ConsistencyWeights w;
  SharpenConfig cfg;
  const double mc0 = mutual_consistency_loss(preds, w, cfg).item();
  const double dh0 = diagonal_consistency_loss(preds, w, cfg).item();

  // cyclic relabeling maps the diagonal pair set onto itself
  std::array<MultiScalePrediction, 3> rot = {preds[1], preds[2], preds[0]};
  for (int m = 0; m < 3; ++m) rot[m].model_index = m + 1;
  CHECK(std::abs(mc0 - mutual_consistency_loss(rot, w, cfg).item()) < 1e-6);
  CHECK(std::abs(dh0 - diagonal_consistency_loss(rot, w, cfg).item()) < 1e-6);

  // a transposition does not: the diagonal wiring is direction-sensitive
  std::array<MultiScalePrediction, 3> swp = {preds[1], preds[0], preds[2]};
  for (int m = 0; m < 3; ++m) swp[m].model_index = m + 1;
  CHECK(std::abs(mc0 - mutual_consistency_loss(swp, w, cfg).item()) < 1e-6);
  CHECK(std::abs(dh0 - diagonal_consistency_loss(swp, w, cfg).item()) > 1e-6);
}

TEST_CASE("ramp_weight: endpoints, midpoint, clamping, monotonicity") {
  RampSchedule sched;
  sched.t_max = 1000;
  CHECK(ramp_weight(1000, sched) == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(ramp_weight(0, sched) == doctest::Approx(0.1 * std::exp(-5.0)).epsilon(1e-9));
  CHECK(std::abs(ramp_weight(0, sched) - 6.7379470e-4) < 1e-8);
  CHECK(std::abs(ramp_weight(500, sched) - 8.2084999e-3) < 1e-8);
  CHECK(ramp_weight(2000, sched) == doctest::Approx(0.1));  // clamp

  double prev = -1;
  for (int t = 0; t <= 1000; t += 10) {
    const double v = ramp_weight(t, sched);
    CHECK(v > prev);
    CHECK(v > 0);
    CHECK(v <= 0.1);
    prev = v;
  }

  RampSchedule sq = sched;
  sq.squared = true;
  CHECK(ramp_weight(500, sq) == doctest::Approx(0.1 * std::exp(-5.0 * 0.25)).epsilon(1e-9));
  CHECK(ramp_weight(1000, sq) == doctest::Approx(0.1).epsilon(1e-12));
}

TEST_CASE("total_loss: reductions and breakdown invariant") {
  RampSchedule sched;
  sched.t_max = 1000;

  auto [t1, b1] = total_loss(Tensor::scalar(0.7f), Tensor::scalar(0.f), Tensor::scalar(0.f),
                             500, sched);
  CHECK(t1.item() == doctest::Approx(0.7).epsilon(1e-6));

  auto [t2, b2] = total_loss(Tensor::scalar(0.f), Tensor::scalar(1.f), Tensor::scalar(1.f),
                             1000, sched);
  CHECK(t2.item() == doctest::Approx(0.2).epsilon(1e-6));

  Rng rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    const float ls = rng.uniform(0.f, 3.f), lm = rng.uniform(0.f, 1.f), ld = rng.uniform(0.f, 1.f);
    const int t = rng.next_int(1001);
    auto [tt, b] = total_loss(Tensor::scalar(ls), Tensor::scalar(lm), Tensor::scalar(ld), t, sched);
    const double recon = sched.lambda_sup * b.l_sup + b.lambda_cst * (b.l_mc + b.l_dihc);
    CHECK(std::abs(b.l_total - recon) <= 1e-6 * std::max(1.0, std::abs(recon)));
    CHECK(b.lambda_cst == doctest::Approx(ramp_weight(t, sched)).epsilon(1e-12));
  }
}

TEST_CASE("zeroed consistency weights reduce to pure deep supervision") {
  Rng rng(10);
  auto preds = random_preds(rng, {1, 2, 2, 2});
  ConsistencyWeights zero{0.f, 0.f, 0.f};
  SharpenConfig cfg;
  CHECK(mutual_consistency_loss(preds, zero, cfg).item() == 0.f);
  CHECK(diagonal_consistency_loss(preds, zero, cfg).item() == 0.f);
}
