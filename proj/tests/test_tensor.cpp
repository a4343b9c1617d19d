#include "doctest.h"
#include "support.hpp"

#include <cmath>
#include <numbers>

using namespace stormlatent;
using testing::gradient_error;
using testing::probe;
using testing::random_away_from_zero;
using testing::random_tensor;

namespace {

constexpr int kInstances = 20;
constexpr double kTolerance = 1e-4;

// Runs `make_case` on 20 seeded instances and returns the worst relative error.
template <typename Case>
double worst_error(Case make_case) {
  double worst = 0.0;
  for (int k = 0; k < kInstances; ++k) {
    std::mt19937_64 rng(1000 + k);
    worst = std::max(worst, make_case(rng, static_cast<std::uint64_t>(k)));
  }
  return worst;
}

}  // namespace

TEST_CASE("backward on elementary functions") {
  SUBCASE("x*x at 3 has gradient 6") {
    Tensor x = Tensor::scalar(3.0, true);
    mul(x, x).backward();
    CHECK(x.grad()[0] == doctest::Approx(6.0).epsilon(1e-15));
  }
  SUBCASE("sigmoid at 0 has gradient 0.25") {
    Tensor x = Tensor::scalar(0.0, true);
    sigmoid(x).backward();
    CHECK(x.grad()[0] == 0.25);
  }
  SUBCASE("non-scalar loss is rejected") {
    Tensor x = Tensor::zeros({2}, true);
    CHECK_THROWS_AS(x.backward(), std::invalid_argument);
  }
  SUBCASE("detached branch receives no gradient") {
    Tensor x = Tensor::scalar(2.0, true);
    Tensor d = x.detach();
    (mul(x, d)).backward();
    CHECK(x.grad()[0] == 2.0);
    CHECK_FALSE(d.has_grad());
  }
}

TEST_CASE("finite_difference_gradient oracle") {
  SUBCASE("cube at 2") {
    auto f = [](const Tensor& x) { return sum(mul(mul(x, x), x)); };
    Array g = finite_difference_gradient(f, Tensor::from({1}, {2.0}), 1e-5);
    CHECK(std::abs(g[0] - 12.0) < 1e-6);
  }
  SUBCASE("constant function") {
    auto f = [](const Tensor&) { return Tensor::scalar(4.0); };
    Array g = finite_difference_gradient(f, Tensor::from({3}, {1.0, 2.0, 3.0}), 1e-5);
    CHECK(g.abs().maxCoeff() == 0.0);
  }
  SUBCASE("sine at 0 via exp-free composition") {
    auto f = [](const Tensor& x) {
      Array v = x.value().sin();
      return Tensor::scalar(v[0]);
    };
    Array g = finite_difference_gradient(f, Tensor::from({1}, {0.0}), 1e-5);
    CHECK(g[0] == doctest::Approx(1.0).epsilon(1e-9));
  }
  SUBCASE("non-finite output names the coordinate") {
    auto f = [](const Tensor& x) { return sum(log(x)); };
    try {
      finite_difference_gradient(f, Tensor::from({2}, {1.0, 1e-6}), 1e-5);
      FAIL("expected throw");
    } catch (const std::domain_error& e) {
      CHECK(std::string(e.what()).find("coordinate 1") != std::string::npos);
    }
  }
  SUBCASE("step must be positive") {
    auto f = [](const Tensor& x) { return sum(x); };
    CHECK_THROWS(finite_difference_gradient(f, Tensor::scalar(1.0), 0.0));
  }
}

TEST_CASE("every primitive matches finite differences") {
  SUBCASE("add / sub / mul") {
    double err = worst_error([](std::mt19937_64& rng, std::uint64_t s) {
      Tensor b = random_tensor({3, 4}, rng);
      Tensor c = random_tensor({3, 4}, rng);
      Tensor x = random_tensor({3, 4}, rng);
      return gradient_error([&](const Tensor& t) { return probe(sub(mul(add(t, b), t), mul(c, t)), s); }, x);
    });
    CHECK(err < kTolerance);
  }
  SUBCASE("matmul both operands") {
    double err = worst_error([](std::mt19937_64& rng, std::uint64_t s) {
      Tensor a = random_tensor({3, 5}, rng);
      Tensor b = random_tensor({5, 2}, rng);
      double ea = gradient_error([&](const Tensor& t) { return probe(matmul(t, b), s); }, a);
      double eb = gradient_error([&](const Tensor& t) { return probe(matmul(a, t), s); }, b);
      return std::max(ea, eb);
    });
    CHECK(err < kTolerance);
  }
  SUBCASE("transpose") {
    double err = worst_error([](std::mt19937_64& rng, std::uint64_t s) {
      Tensor a = random_tensor({3, 4}, rng);
      return gradient_error([&](const Tensor& t) { return probe(transpose(t), s); }, a);
    });
    CHECK(err < kTolerance);
  }
  SUBCASE("conv2d stride 1 and 2, input, weight and bias") {
    double err = worst_error([](std::mt19937_64& rng, std::uint64_t s) {
      const Index k = (s % 2 == 0) ? 3 : 5;
      const Index stride = (s % 4 < 2) ? 1 : 2;
      Tensor x = random_tensor({2, 6, 7}, rng);
      Tensor w = random_tensor({3, 2, k, k}, rng);
      Tensor b = random_tensor({3}, rng);
      double ex = gradient_error([&](const Tensor& t) { return probe(conv2d(t, w, b, stride), s); }, x);
      double ew = gradient_error([&](const Tensor& t) { return probe(conv2d(x, t, b, stride), s); }, w);
      double eb = gradient_error([&](const Tensor& t) { return probe(conv2d(x, w, t, stride), s); }, b);
      return std::max({ex, ew, eb});
    });
    CHECK(err < kTolerance);
  }
  SUBCASE("nearest upsample and bilinear resize") {
    double err = worst_error([](std::mt19937_64& rng, std::uint64_t s) {
      Tensor x = random_tensor({2, 3, 4}, rng);
      double e1 = gradient_error([&](const Tensor& t) { return probe(upsample_nearest(t, 2), s); }, x);
      double e2 = gradient_error([&](const Tensor& t) { return probe(resize_bilinear(t, 7, 5), s); }, x);
      return std::max(e1, e2);
    });
    CHECK(err < kTolerance);
  }
  SUBCASE("reshape / concat / slice / patchify / unpatchify") {
    double err = worst_error([](std::mt19937_64& rng, std::uint64_t s) {
      Tensor x = random_tensor({2, 4, 4}, rng);
      Tensor y = random_tensor({3, 4, 4}, rng);
      double e1 = gradient_error(
          [&](const Tensor& t) { return probe(reshape(concat({t, y}, 0), {5, 16}), s); }, x);
      double e2 = gradient_error([&](const Tensor& t) { return probe(slice(t, 1, 1, 3), s); }, x);
      double e3 = gradient_error([&](const Tensor& t) { return probe(unpatchify(patchify(t, 2), 2, 4, 4, 2) * t, s); }, x);
      return std::max({e1, e2, e3});
    });
    CHECK(err < kTolerance);
  }
  SUBCASE("softmax") {
    double err = worst_error([](std::mt19937_64& rng, std::uint64_t s) {
      Tensor x = random_tensor({3, 5}, rng, -2, 2);
      return gradient_error([&](const Tensor& t) { return probe(softmax(t), s); }, x);
    });
    CHECK(err < kTolerance);
  }
  SUBCASE("layer norm with affine") {
    double err = worst_error([](std::mt19937_64& rng, std::uint64_t s) {
      Tensor x = random_tensor({3, 6}, rng, -2, 2);
      Tensor g = random_tensor({6}, rng, 0.5, 1.5);
      Tensor b = random_tensor({6}, rng);
      double ex = gradient_error([&](const Tensor& t) { return probe(layer_norm(t, g, b), s); }, x);
      double eg = gradient_error([&](const Tensor& t) { return probe(layer_norm(x, t, b), s); }, g);
      double eb = gradient_error([&](const Tensor& t) { return probe(layer_norm(x, g, t), s); }, b);
      return std::max({ex, eg, eb});
    });
    CHECK(err < kTolerance);
  }
  SUBCASE("group norm, two groups") {
    double err = worst_error([](std::mt19937_64& rng, std::uint64_t s) {
      Tensor x = random_tensor({4, 3, 3}, rng, -2, 2);
      Tensor g = random_tensor({4}, rng, 0.5, 1.5);
      Tensor b = random_tensor({4}, rng);
      double ex = gradient_error([&](const Tensor& t) { return probe(group_norm(t, 2, g, b), s); }, x);
      double eg = gradient_error([&](const Tensor& t) { return probe(group_norm(x, 2, t, b), s); }, g);
      return std::max(ex, eg);
    });
    CHECK(err < kTolerance);
  }
  SUBCASE("smooth activations") {
    double err = worst_error([](std::mt19937_64& rng, std::uint64_t s) {
      Tensor x = random_tensor({10}, rng, -3, 3);
      double e = 0.0;
      e = std::max(e, gradient_error([&](const Tensor& t) { return probe(silu(t), s); }, x));
      e = std::max(e, gradient_error([&](const Tensor& t) { return probe(gelu(t), s); }, x));
      e = std::max(e, gradient_error([&](const Tensor& t) { return probe(sigmoid(t), s); }, x));
      e = std::max(e, gradient_error([&](const Tensor& t) { return probe(log_sigmoid(t), s); }, x));
      return e;
    });
    CHECK(err < kTolerance);
  }
  SUBCASE("kinked activations away from the kink") {
    double err = worst_error([](std::mt19937_64& rng, std::uint64_t s) {
      Tensor x = random_away_from_zero({10}, rng);
      double e1 = gradient_error([&](const Tensor& t) { return probe(abs(t), s); }, x);
      double e2 = gradient_error([&](const Tensor& t) { return probe(leaky_relu(t, 0.1), s); }, x);
      return std::max(e1, e2);
    });
    CHECK(err < kTolerance);
  }
  SUBCASE("log on positive inputs") {
    double err = worst_error([](std::mt19937_64& rng, std::uint64_t s) {
      Tensor x = random_tensor({8}, rng, 0.2, 3.0);
      return gradient_error([&](const Tensor& t) { return probe(log(t), s); }, x);
    });
    CHECK(err < kTolerance);
  }
  SUBCASE("sum / mean / broadcast ops / scalar ops") {
    double err = worst_error([](std::mt19937_64& rng, std::uint64_t s) {
      Tensor x = random_tensor({3, 4}, rng);
      Tensor b = random_tensor({3}, rng);
      double e1 = gradient_error([&](const Tensor& t) { return mean(mul(t, t)) + sum(t) * 0.5; }, x);
      double e2 = gradient_error([&](const Tensor& t) { return probe(broadcast_mul(broadcast_add(t, b, 0), b, 0), s); }, x);
      double e3 = gradient_error([&](const Tensor& t) { return probe(broadcast_mul(x, t, 0) + 2.0, s); }, b);
      return std::max({e1, e2, e3});
    });
    CHECK(err < kTolerance);
  }
  SUBCASE("dropout in train mode with a fixed mask") {
    double err = worst_error([](std::mt19937_64& rng, std::uint64_t s) {
      Tensor x = random_tensor({20}, rng);
      return gradient_error([&](const Tensor& t) { return probe(dropout(t, 0.3, true, 77 + s), s); }, x);
    });
    CHECK(err < kTolerance);
  }
  SUBCASE("masked select") {
    double err = worst_error([](std::mt19937_64& rng, std::uint64_t s) {
      Tensor x = random_tensor({12}, rng);
      std::vector<bool> mask(12);
      for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = (i + s) % 3 != 0;
      return gradient_error([&](const Tensor& t) { return probe(masked_select(t, mask), s); }, x);
    });
    CHECK(err < kTolerance);
  }
}

TEST_CASE("two-layer network gradients match finite differences") {
  std::mt19937_64 rng(5);
  Tensor x = random_tensor({4, 6}, rng);
  Tensor w1 = random_tensor({6, 8}, rng);
  Tensor w2 = random_tensor({8, 3}, rng);
  auto net = [&](const Tensor& a, const Tensor& b) { return mean(gelu(matmul(gelu(matmul(x, a)), b))); };
  CHECK(gradient_error([&](const Tensor& t) { return net(t, w2); }, w1) < 1e-4);
  CHECK(gradient_error([&](const Tensor& t) { return net(w1, t); }, w2) < 1e-4);
}

TEST_CASE("gradient accumulation and determinism") {
  std::mt19937_64 rng(9);
  Tensor x0 = random_tensor({5}, rng);

  SUBCASE("a tensor used twice receives the sum of both paths") {
    Tensor x = Tensor::from(x0.shape(), x0.value(), true);
    sum(add(sigmoid(x), mul(x, x))).backward();
    Tensor a = Tensor::from(x0.shape(), x0.value(), true);
    sum(sigmoid(a)).backward();
    Tensor b = Tensor::from(x0.shape(), x0.value(), true);
    sum(mul(b, b)).backward();
    CHECK(((x.grad() - (a.grad() + b.grad())).abs() < 1e-15).all());
  }
  SUBCASE("grads accumulate across backward calls") {
    Tensor x = Tensor::from(x0.shape(), x0.value(), true);
    sum(x).backward();
    sum(x).backward();
    CHECK((x.grad() == 2.0).all());
    x.zero_grad();
    CHECK_FALSE(x.has_grad());
  }
  SUBCASE("two runs give bit-identical grads") {
    auto run = [&] {
      Tensor x = Tensor::from({1, 5, 1}, x0.value(), true);
      Tensor w = Tensor::from({2, 1, 3, 3}, Array::LinSpaced(18, -1, 1));
      mean(silu(conv2d(x, w, Tensor(), 1))).backward();
      return x.grad();
    };
    Array g1 = run();
    Array g2 = run();
    CHECK((g1 == g2).all());
  }
}

TEST_CASE("forward semantics") {
  SUBCASE("conv2d same padding and stride-2 extents") {
    Tensor x = Tensor::zeros({2, 8, 8});
    Tensor w = Tensor::zeros({3, 2, 3, 3});
    CHECK(conv2d(x, w, Tensor(), 1).shape() == Shape{3, 8, 8});
    CHECK(conv2d(x, w, Tensor(), 2).shape() == Shape{3, 4, 4});
    CHECK_THROWS(conv2d(Tensor::zeros({3, 8, 8}), w, Tensor(), 1));
  }
  SUBCASE("softmax rows sum to one") {
    std::mt19937_64 rng(2);
    Tensor s = softmax(random_tensor({4, 7}, rng, -5, 5));
    for (Index r = 0; r < 4; ++r) CHECK(s.value().segment(r * 7, 7).sum() == doctest::Approx(1.0).epsilon(1e-14));
  }
  SUBCASE("dropout is identity in eval mode and scales kept values in train mode") {
    Tensor x = Tensor::full({1000}, 2.0);
    CHECK((dropout(x, 0.5, false, 1).value() == x.value()).all());
    Tensor y = dropout(x, 0.5, true, 1);
    for (Index i = 0; i < y.numel(); ++i) CHECK((y.value()[i] == 0.0 || y.value()[i] == 4.0));
    CHECK((dropout(x, 0.5, true, 1).value() == y.value()).all());
  }
  SUBCASE("gelu and silu reference values") {
    Tensor x = Tensor::from({2}, {1.0, -1.0});
    CHECK(gelu(x).value()[0] == doctest::Approx(0.8413447460685429).epsilon(1e-14));
    CHECK(silu(x).value()[1] == doctest::Approx(-1.0 / (1.0 + std::exp(1.0))).epsilon(1e-14));
  }
  SUBCASE("log_sigmoid is finite far in the tails") {
    Tensor x = Tensor::from({2}, {-800.0, 800.0});
    Tensor y = log_sigmoid(x);
    CHECK(y.value()[0] == doctest::Approx(-800.0));
    CHECK(y.value()[1] == 0.0);
  }
  SUBCASE("patchify orders tokens row-major") {
    Array v = Array::LinSpaced(16, 0, 15);
    Tensor t = patchify(Tensor::from({1, 4, 4}, v), 2);
    CHECK(t.shape() == Shape{4, 4});
    CHECK(t.at({1, 0}) == 2.0);
    CHECK(t.at({2, 3}) == 13.0);
    CHECK_THROWS(patchify(Tensor::zeros({1, 6, 4}), 4));
  }
  SUBCASE("no-grad guard records nothing") {
    Tensor x = Tensor::scalar(1.0, true);
    NoGradGuard guard;
    Tensor y = mul(x, x);
    CHECK_FALSE(y.requires_grad());
  }
  SUBCASE("mac counter counts matmul work") {
    MacCounter counter;
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({3, 4}));
    CHECK(counter.count() == 24);
  }
}
