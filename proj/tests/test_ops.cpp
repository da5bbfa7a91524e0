#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "dihc/gradcheck.hpp"
#include "dihc/ops.hpp"
#include "dihc/rng.hpp"

using namespace dihc;

namespace {

Tensor random_tensor(Rng& rng, const Shape& shape, float lo = -1.f, float hi = 1.f,
                     bool rg = false) {
  std::vector<float> v(static_cast<size_t>(shape_numel(shape)));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from_vector(shape, std::move(v), rg);
}

refmath::DArray to_ref(const Tensor& t) {
  refmath::DArray a{t.shape(), {}};
  a.v.assign(t.data(), t.data() + t.numel());
  return a;
}

void check_close(const Tensor& got, const std::vector<double>& want, double tol) {
  REQUIRE(static_cast<size_t>(got.numel()) == want.size());
  for (long i = 0; i < got.numel(); ++i) {
    const double scale = std::max({1.0, std::abs(want[i]), std::abs(static_cast<double>(got.data()[i]))});
    CHECK(std::abs(got.data()[i] - want[i]) / scale < tol);
  }
}

}  // namespace

TEST_CASE("conv3d: identity kernel reproduces the input") {
  Tensor x = Tensor::full({1, 1, 4, 4, 4}, 1.f);
  Tensor w = Tensor::from_vector({1, 1, 1, 1, 1}, {1.f});
  Tensor b = Tensor::from_vector({1}, {0.f});
  Tensor y = conv3d(x, w, b, 1, 0);
  REQUIRE(y.shape() == x.shape());
  for (long i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == 1.f);
}

TEST_CASE("conv3d: zero input yields the bias everywhere") {
  Rng rng(3);
  Tensor x = Tensor::zeros({2, 2, 4, 4, 4});
  Tensor w = random_tensor(rng, {3, 2, 3, 3, 3});
  Tensor b = Tensor::from_vector({3}, {0.25f, -1.5f, 2.f});
  Tensor y = conv3d(x, w, b, 1, 1);
  const long sp = 4 * 4 * 4;
  for (int n = 0; n < 2; ++n) {
    for (int f = 0; f < 3; ++f) {
      for (long i = 0; i < sp; ++i) {
        CHECK(y.data()[(n * 3 + f) * sp + i] == doctest::Approx(b.data()[f]));
      }
    }
  }
}

TEST_CASE("conv3d: spec gradient case, sum(output) vs central differences") {
  // random 1x2x5x5x5 input, 3x2x3x3x3 weight, pad 1
  Rng rng(11);
  refmath::DArray xd = to_ref(random_tensor(rng, {1, 2, 5, 5, 5}));
  refmath::DArray wd = to_ref(random_tensor(rng, {3, 2, 3, 3, 3}, -0.5f, 0.5f));
  refmath::DArray bd = to_ref(random_tensor(rng, {3}, -0.2f, 0.2f));

  auto to_f32 = [](const refmath::DArray& a) {
    std::vector<float> v(a.v.begin(), a.v.end());
    return Tensor::from_vector(a.shape, std::move(v), true);
  };
  Tensor x = to_f32(xd), w = to_f32(wd), b = to_f32(bd);
  Tensor loss = sum(conv3d(x, w, b, 1, 1));
  backward(loss);

  auto ref_loss = [&](const refmath::DArray& xi, const refmath::DArray& wi,
                      const std::vector<double>& bi) {
    const auto out = refmath::conv3d(xi, wi, bi, 1, 1);
    double acc = 0;
    for (double v : out.v) acc += v;
    return acc;
  };
  const double eps = 1e-3;
  auto fd_check = [&](const Tensor& t, refmath::DArray base, int which) {
    for (size_t i = 0; i < base.v.size(); i += 7) {  // spot sample
      auto up = base, dn = base;
      up.v[i] += eps;
      dn.v[i] -= eps;
      double fu, fdn;
      if (which == 0) {
        fu = ref_loss(up, wd, bd.v);
        fdn = ref_loss(dn, wd, bd.v);
      } else if (which == 1) {
        fu = ref_loss(xd, up, bd.v);
        fdn = ref_loss(xd, dn, bd.v);
      } else {
        fu = ref_loss(xd, wd, up.v);
        fdn = ref_loss(xd, wd, dn.v);
      }
      const double fd = (fu - fdn) / (2 * eps);
      const double a = t.grad_view()[i];
      CHECK(std::abs(a - fd) <= 1e-3 * std::max({std::abs(a), std::abs(fd), 1.0}));
    }
  };
  fd_check(x, xd, 0);
  fd_check(w, wd, 1);
  fd_check(b, bd, 2);
}

TEST_CASE("conv3d: descriptive shape errors") {
  Tensor x = Tensor::zeros({1, 2, 4, 4, 4});
  Tensor w = Tensor::zeros({3, 3, 3, 3, 3});  // channel mismatch
  try {
    conv3d(x, w, Tensor(), 1, 1);
    FAIL("expected error");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("channel") != std::string::npos);
  }
  CHECK_THROWS_AS(conv3d(x, Tensor::zeros({1, 2, 2, 2, 2}), Tensor(), 1, 0),
                  std::invalid_argument);  // even kernel
  CHECK_THROWS_AS(conv3d(Tensor::zeros({1, 1, 2, 2, 2}), Tensor::zeros({1, 1, 3, 3, 3}),
                         Tensor(), 1, 0),
                  std::invalid_argument);  // too small after padding
}

TEST_CASE("conv3d: production matches the 64-bit reference on realistic shapes") {
  struct Config {
    Shape x, w;
    int stride, pad;
  };
  // exercises the tuned path (k=3 pad=1, strides 1 and 2, tail masks), the
  // 1x1x1 path, and the generic path
  const Config cases[] = {
      {{2, 3, 8, 8, 8}, {5, 3, 3, 3, 3}, 1, 1},
      {{1, 2, 16, 16, 16}, {4, 2, 3, 3, 3}, 2, 1},
      {{1, 1, 5, 6, 5}, {2, 1, 3, 3, 3}, 1, 1},
      {{1, 2, 4, 4, 17}, {3, 2, 3, 3, 3}, 1, 1},
      {{1, 1, 3, 3, 33}, {2, 1, 3, 3, 3}, 1, 1},
      {{2, 4, 6, 6, 6}, {3, 4, 1, 1, 1}, 1, 0},
      {{1, 2, 7, 7, 7}, {2, 2, 5, 5, 5}, 1, 2},
      {{1, 2, 9, 9, 9}, {2, 2, 3, 3, 3}, 2, 0},
  };
  int idx = 0;
  for (const auto& c : cases) {
    Rng rng(100 + idx++);
    Tensor x = random_tensor(rng, c.x);
    Tensor w = random_tensor(rng, c.w, -0.5f, 0.5f);
    Tensor b = random_tensor(rng, {c.w[0]}, -0.3f, 0.3f);
    Tensor y = conv3d(x, w, b, c.stride, c.pad);
    const auto ref = refmath::conv3d(to_ref(x), to_ref(w), to_ref(b).v, c.stride, c.pad);
    REQUIRE(y.shape() == ref.shape);
    check_close(y, ref.v, 2e-5);
  }
}

TEST_CASE("conv3d: repeated calls are bit-identical") {
  Rng rng(5);
  Tensor x = random_tensor(rng, {1, 3, 8, 8, 8});
  Tensor w = random_tensor(rng, {4, 3, 3, 3, 3});
  Tensor b = random_tensor(rng, {4});
  Tensor y1 = conv3d(x, w, b, 1, 1);
  Tensor y2 = conv3d(x, w, b, 1, 1);
  CHECK(std::memcmp(y1.data(), y2.data(), y1.numel() * sizeof(float)) == 0);
}

TEST_CASE("conv_transpose3d: single voxel broadcast") {
  Tensor x = Tensor::from_vector({1, 1, 1, 1, 1}, {3.f});
  Tensor w = Tensor::full({1, 1, 2, 2, 2}, 1.f);
  Tensor y = conv_transpose3d(x, w, 2);
  REQUIRE(y.shape() == Shape{1, 1, 2, 2, 2});
  for (long i = 0; i < 8; ++i) CHECK(y.data()[i] == doctest::Approx(3.f));
}

TEST_CASE("conv_transpose3d: zero input, unsupported configs, adjoint property") {
  Rng rng(17);
  Tensor z = Tensor::zeros({1, 2, 3, 3, 3});
  Tensor w = random_tensor(rng, {2, 3, 2, 2, 2});
  Tensor y = conv_transpose3d(z, w, 2);
  for (long i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == 0.f);

  CHECK_THROWS_AS(conv_transpose3d(z, w, 1), std::invalid_argument);
  CHECK_THROWS_AS(conv_transpose3d(z, Tensor::zeros({2, 3, 3, 3, 3}), 2), std::invalid_argument);

  // reference comparison on a random case
  Tensor x = random_tensor(rng, {2, 2, 3, 4, 3});
  Tensor w2 = random_tensor(rng, {2, 3, 2, 2, 2});
  Tensor out = conv_transpose3d(x, w2, 2);
  const auto ref = refmath::conv_transpose3d(to_ref(x), to_ref(w2));
  REQUIRE(out.shape() == ref.shape);
  check_close(out, ref.v, 1e-5);
}

TEST_CASE("upsample: constants stay constant in both modes") {
  Tensor x = Tensor::full({1, 2, 3, 3, 3}, 0.7f);
  for (auto mode : {UpsampleMode::kNearest, UpsampleMode::kTrilinear}) {
    Tensor y = upsample(x, 2, mode);
    REQUIRE(y.shape() == Shape{1, 2, 6, 6, 6});
    for (long i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == doctest::Approx(0.7f));
  }
}

TEST_CASE("upsample: nearest factor 2 replicates along each axis") {
  Tensor x = Tensor::from_vector({1, 1, 1, 1, 2}, {1.f, 2.f});
  Tensor y = upsample(x, 2, UpsampleMode::kNearest);
  REQUIRE(y.shape() == Shape{1, 1, 2, 2, 4});
  for (int z = 0; z < 2; ++z) {
    for (int h = 0; h < 2; ++h) {
      const float* row = y.data() + (z * 2 + h) * 4;
      CHECK(row[0] == 1.f);
      CHECK(row[1] == 1.f);
      CHECK(row[2] == 2.f);
      CHECK(row[3] == 2.f);
    }
  }
}

TEST_CASE("upsample: trilinear factor 2 preserves the mean and matches the reference") {
  Rng rng(23);
  Tensor x = random_tensor(rng, {1, 1, 4, 4, 4}, 0.f, 1.f);
  Tensor y = upsample(x, 2, UpsampleMode::kTrilinear);
  double sx = 0, sy = 0;
  for (long i = 0; i < x.numel(); ++i) sx += x.data()[i];
  for (long i = 0; i < y.numel(); ++i) sy += y.data()[i];
  CHECK(std::abs(sy / 8.0 - sx) < 1e-4 * std::max(1.0, std::abs(sx)));

  const auto ref = refmath::upsample(to_ref(x), 2, UpsampleMode::kTrilinear);
  check_close(y, ref.v, 1e-6);

  CHECK_THROWS_AS(upsample(x, 1, UpsampleMode::kNearest), std::invalid_argument);
}

TEST_CASE("normalize: unit statistics per group in training mode") {
  Rng rng(31);
  const int N = 2, C = 4;
  Tensor gamma = Tensor::full({C}, 1.f);
  Tensor beta = Tensor::zeros({C});
  for (auto mode : {NormMode::kBatch, NormMode::kGroup, NormMode::kInstance}) {
    Tensor x = random_tensor(rng, {N, C, 4, 4, 4}, -2.f, 3.f);
    NormState st;
    st.mode = mode;
    st.groups = 2;
    Tensor y = normalize(x, gamma, beta, st);

    const long spatial = 64;
    auto group_stats = [&](std::vector<std::pair<long, long>> runs) {
      double s = 0, s2 = 0;
      long cnt = 0;
      for (auto [off, len] : runs) {
        for (long i = 0; i < len; ++i) {
          const double v = y.data()[off + i];
          s += v;
          s2 += v * v;
          ++cnt;
        }
      }
      const double mu = s / cnt;
      return std::pair<double, double>{mu, s2 / cnt - mu * mu};
    };
    std::vector<std::vector<std::pair<long, long>>> groups;
    if (mode == NormMode::kBatch) {
      for (int c = 0; c < C; ++c) {
        std::vector<std::pair<long, long>> runs;
        for (int n = 0; n < N; ++n) runs.push_back({(n * C + c) * spatial, spatial});
        groups.push_back(runs);
      }
    } else {
      const int ng = mode == NormMode::kInstance ? C : 2;
      const int cps = C / ng;
      for (int n = 0; n < N; ++n) {
        for (int g = 0; g < ng; ++g) {
          groups.push_back({{(n * C + g * cps) * spatial, cps * spatial}});
        }
      }
    }
    for (const auto& runs : groups) {
      auto [mu, var] = group_stats(runs);
      CHECK(std::abs(mu) < 1e-5);
      CHECK(std::abs(var - 1.0) < 1e-3);
    }
  }
}

TEST_CASE("normalize: constant input collapses to beta") {
  Tensor x = Tensor::full({1, 4, 2, 2, 2}, 5.f);
  Tensor gamma = Tensor::full({4}, 2.f);
  Tensor beta = Tensor::from_vector({4}, {0.5f, -1.f, 0.f, 3.f});
  for (auto mode : {NormMode::kBatch, NormMode::kGroup, NormMode::kInstance}) {
    NormState st;
    st.mode = mode;
    st.groups = 2;
    Tensor y = normalize(x, gamma, beta, st);
    const long spatial = 8;
    for (int c = 0; c < 4; ++c) {
      for (long i = 0; i < spatial; ++i) {
        CHECK(y.data()[c * spatial + i] == doctest::Approx(beta.data()[c]).epsilon(1e-4));
      }
    }
  }
}

TEST_CASE("normalize: batch mode keeps running stats and uses them at inference") {
  Rng rng(37);
  Tensor gamma = Tensor::full({2}, 1.f);
  Tensor beta = Tensor::zeros({2});
  NormState st;
  st.mode = NormMode::kBatch;
  Tensor x = random_tensor(rng, {2, 2, 3, 3, 3}, 1.f, 3.f);  // mean ~2
  for (int i = 0; i < 60; ++i) normalize(x, gamma, beta, st);
  // running mean converges toward the batch mean with momentum 0.9
  const long sp = 27;
  double batch_mean = 0;
  for (int n = 0; n < 2; ++n) {
    for (long i = 0; i < sp; ++i) batch_mean += x.data()[(n * 2 + 0) * sp + i];
  }
  batch_mean /= (2 * sp);
  CHECK(st.running_mean[0] == doctest::Approx(batch_mean).epsilon(0.01));

  st.training = false;
  Tensor y1 = normalize(x, gamma, beta, st);
  Tensor y2 = normalize(x, gamma, beta, st);
  CHECK(std::memcmp(y1.data(), y2.data(), y1.numel() * sizeof(float)) == 0);

  NormState bad;
  bad.mode = NormMode::kGroup;
  bad.groups = 3;
  CHECK_THROWS_AS(normalize(x, gamma, beta, bad), std::invalid_argument);
}

TEST_CASE("mse: identity and unit offset") {
  Tensor x = Tensor::from_vector({3}, {0.3f, -1.f, 2.f}, true);
  Tensor y = mse(x, x);
  CHECK(y.item() == 0.f);
  backward(y);
  for (int i = 0; i < 3; ++i) CHECK(x.grad_view()[i] == 0.f);

  Tensor a = Tensor::from_vector({2}, {0.f, 0.f});
  Tensor b = Tensor::from_vector({2}, {1.f, 1.f});
  CHECK(mse(a, b).item() == doctest::Approx(1.0));
  CHECK_THROWS_AS(mse(a, Tensor::zeros({3})), std::invalid_argument);
}

TEST_CASE("sigmoid gradient matches the closed form") {
  Rng rng(41);
  Tensor x = random_tensor(rng, {64}, -4.f, 4.f, true);
  Tensor y = sigmoid(x);
  backward(sum(y));
  for (int i = 0; i < 64; ++i) {
    const double s = 1.0 / (1.0 + std::exp(-static_cast<double>(x.data()[i])));
    CHECK(std::abs(x.grad_view()[i] - s * (1 - s)) < 1e-6);
  }
}

TEST_CASE("gradcheck suite passes on a short run") {
  const auto results = run_gradcheck_suite(2024, 4);
  CHECK(results.size() >= 20);
  for (const auto& r : results) {
    INFO(r.op, " worst=", r.worst_rel);
    CHECK(r.pass);
  }
}

TEST_CASE("gradcheck corruption hook is detected and named") {
  const auto results = run_gradcheck_suite(2024, 2, "conv3d");
  bool conv_failed = false;
  for (const auto& r : results) {
    if (r.op == "conv3d") conv_failed = !r.pass;
  }
  CHECK(conv_failed);
}
