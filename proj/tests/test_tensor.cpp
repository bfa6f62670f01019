#include <cmath>
#include <numeric>

#include "doctest.h"
#include "rgrid/error.hpp"
#include "rgrid/grad_check.hpp"
#include "rgrid/ops.hpp"
#include "support.hpp"

using namespace rgrid;
using rgrid::testing::random_tensor;
using rgrid::testing::random_values;

namespace {

constexpr double kTol = 1e-4;

// Weighted sum so the check sees a non-uniform upstream gradient.
Tensor weighted_sum(const Tensor& t) {
  std::vector<double> w(t.numel());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = 0.3 + 0.1 * static_cast<double>(i % 7);
  return ops::sum(ops::mul(t, Tensor::from_data(t.shape(), std::move(w))));
}

}  // namespace

TEST_CASE("matmul reference values") {
  Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from_data({2, 2}, {5, 6, 7, 8});
  Tensor c = ops::matmul(a, b);
  CHECK(c.shape() == Shape{2, 2});
  CHECK(c.at(0) == 19);
  CHECK(c.at(1) == 22);
  CHECK(c.at(2) == 43);
  CHECK(c.at(3) == 50);
}

TEST_CASE("batched matmul matches per-batch products") {
  Tensor a = random_tensor({3, 2, 4}, 1);
  Tensor b = random_tensor({3, 4, 5}, 2);
  Tensor c = ops::matmul(a, b);
  REQUIRE(c.shape() == Shape{3, 2, 5});
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 5; ++j) {
        double ref = 0;
        for (std::size_t k = 0; k < 4; ++k) ref += a.at(n * 8 + i * 4 + k) * b.at(n * 20 + k * 5 + j);
        CHECK(c.at(n * 10 + i * 5 + j) == doctest::Approx(ref).epsilon(1e-14));
      }
}

TEST_CASE("layer norm of a constant vector is zero") {
  Tensor x = Tensor::full({1, 3}, 2.5);
  Tensor y = ops::layer_norm(x, Tensor::full({3}, 1.0), Tensor::zeros({3}));
  for (double v : y.data()) CHECK(v == 0.0);
}

TEST_CASE("softmax of equal logits is uniform") {
  Tensor y = ops::softmax(Tensor::from_data({1, 2}, {0.7, 0.7}));
  CHECK(y.at(0) == 0.5);
  CHECK(y.at(1) == 0.5);
}

TEST_CASE("softmax rows sum to one and ignore a constant shift") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Tensor x = random_tensor({4, 7}, seed, -30, 30);
    std::vector<double> shifted(x.data().begin(), x.data().end());
    for (double& v : shifted) v += 12.375;
    Tensor y = ops::softmax(x);
    Tensor ys = ops::softmax(Tensor::from_data({4, 7}, shifted));
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0;
      for (std::size_t c = 0; c < 7; ++c) s += y.at(r * 7 + c);
      CHECK(std::abs(s - 1.0) <= 1e-12);
    }
    CHECK(rgrid::testing::max_abs_diff(y.data(), ys.data()) <= 1e-12);
  }
}

TEST_CASE("layer norm output is standardized for well-spread inputs") {
  // eps = 1e-5 shifts the variance by eps/var; inputs with variance >= 10 keep
  // that below 1e-6
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Tensor x = random_tensor({5, 16}, seed, -20, 20);
    Tensor y = ops::layer_norm(x, Tensor::full({16}, 1.0), Tensor::zeros({16}));
    for (std::size_t r = 0; r < 5; ++r) {
      double mean = 0, var_in = 0, mean_in = 0;
      for (std::size_t c = 0; c < 16; ++c) mean_in += x.at(r * 16 + c) / 16;
      for (std::size_t c = 0; c < 16; ++c) var_in += std::pow(x.at(r * 16 + c) - mean_in, 2) / 16;
      if (var_in < 10) continue;
      for (std::size_t c = 0; c < 16; ++c) mean += y.at(r * 16 + c) / 16;
      double var = 0;
      for (std::size_t c = 0; c < 16; ++c) var += std::pow(y.at(r * 16 + c) - mean, 2) / 16;
      CHECK(std::abs(mean) <= 1e-10);
      CHECK(std::abs(var - 1.0) <= 1e-6);
    }
  }
}

TEST_CASE("identity 1x1 convolution is bit-exact") {
  Tensor x = random_tensor({2, 3, 5, 4}, 9);
  std::vector<double> w(9, 0.0);
  for (std::size_t c = 0; c < 3; ++c) w[c * 3 + c] = 1.0;
  Tensor y = ops::conv2d(x, Tensor::from_data({3, 3, 1, 1}, w), Tensor::zeros({3}));
  REQUIRE(y.shape() == x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.at(i) == x.at(i));
}

TEST_CASE("backward of sum of squares") {
  Tensor x = Tensor::from_data({2}, {1, -2}, true);
  backward(ops::sum(ops::mul(x, x)));
  CHECK(x.grad()[0] == 2.0);
  CHECK(x.grad()[1] == -4.0);

  SUBCASE("repeated backward accumulates until zero_grad") {
    backward(ops::sum(ops::mul(x, x)));
    CHECK(x.grad()[0] == 4.0);
    x.zero_grad();
    CHECK_FALSE(x.has_grad());
  }
}

TEST_CASE("backward rejects non-scalar and grad-free losses") {
  Tensor x = Tensor::from_data({2}, {1, 2}, true);
  CHECK_THROWS_AS(backward(ops::scale(x, 2.0)), UsageError);
  CHECK_THROWS_AS(backward(Tensor::scalar(1.0)), UsageError);
}

TEST_CASE("GELU derivative at zero is one half") {
  Tensor x = Tensor::from_data({1}, {0.0}, true);
  backward(ops::sum(ops::gelu(x)));
  const double h = 1e-5;
  auto g = [](double v) { return 0.5 * v * (1 + std::erf(v / std::sqrt(2.0))); };
  const double fd = (g(h) - g(-h)) / (2 * h);
  CHECK(x.grad()[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(std::abs(x.grad()[0] - fd) <= 1e-9);
}

TEST_CASE("tape visits each node once in reverse execution order") {
  Tensor x = Tensor::from_data({3}, {1, 2, 3}, true);
  Tensor y = ops::mul(x, x);
  Tensor z = ops::add(y, x);
  Tensor loss = ops::sum(ops::add(z, y));
  Tape tape = Tape::from_root(loss);
  CHECK(tape.size() == 5);
  for (std::size_t i = 1; i < tape.size(); ++i) CHECK(tape.nodes()[i - 1]->seq > tape.nodes()[i]->seq);
  backward(loss);
  REQUIRE(x.has_grad());
  for (std::size_t i = 0; i < 3; ++i) CHECK(x.grad()[i] == doctest::Approx(4 * x.at(i) + 1));
}

TEST_CASE("gradients() leaves leaf grads untouched") {
  Tensor w = Tensor::from_data({2}, {0.5, -1.0}, true);
  Tensor x = Tensor::from_data({2}, {2.0, 3.0}, true);
  Tensor loss = ops::sum(ops::mul(w, x));
  const Tensor wrt[] = {x};
  auto g = gradients(loss, wrt);
  CHECK(g[0][0] == 0.5);
  CHECK(g[0][1] == -1.0);
  CHECK_FALSE(w.has_grad());
  CHECK_FALSE(x.has_grad());
}

TEST_CASE("no-grad guard records nothing") {
  Tensor x = Tensor::from_data({2}, {1, 2}, true);
  NoGradGuard guard;
  Tensor y = ops::mul(x, x);
  CHECK_FALSE(y.requires_grad());
  CHECK(y.is_leaf());
}

TEST_CASE("shape errors name both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 5});
  try {
    ops::matmul(a, b);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[4,5]") != std::string::npos);
  }
  CHECK_THROWS_AS(ops::add(a, Tensor::zeros({2})), ConfigError);
  CHECK_THROWS_AS(Tensor::zeros({2, 0}), ConfigError);
  CHECK_THROWS_AS(ops::layer_norm(a, Tensor::full({3}, 1.0), Tensor::zeros({3}), 0.0), ConfigError);
}

TEST_CASE("grad_check reference cases") {
  // dyadic inputs and a power-of-two step make every difference exact
  std::vector<double> dyadic = random_values(4, 3);
  for (double& v : dyadic) v = std::round(v * 64) / 64;
  CHECK(grad_check([](const Tensor& t) { return ops::sum(t); }, Tensor::from_data({4}, dyadic), 0x1p-17) == 0.0);
  Tensor x = random_tensor({4}, 3);
  CHECK(grad_check([](const Tensor& t) { return ops::sum(ops::mul(t, t)); }, x) <= 1e-6);

  Tensor w = random_tensor({3, 4}, 4);
  const int label[] = {1};
  auto ce = [&](const Tensor& t) {
    return ops::softmax_cross_entropy(ops::matmul(ops::reshape(t, {1, 4}), ops::transpose(w, 0, 1)), label);
  };
  CHECK(grad_check(ce, x) <= 1e-4);

  CHECK_THROWS_AS(grad_check([](const Tensor& t) { return ops::sum(ops::scale(t, NAN)); }, x), NumericError);
}

TEST_CASE("every op passes finite-difference checks") {
  SUBCASE("matmul") {
    Tensor b = random_tensor({4, 3}, 11);
    CHECK(grad_check([&](const Tensor& t) { return weighted_sum(ops::matmul(t, b)); }, random_tensor({2, 4}, 12)) <= kTol);
    Tensor a = random_tensor({2, 2, 4}, 13);
    CHECK(grad_check([&](const Tensor& t) { return weighted_sum(ops::matmul(a, t)); }, random_tensor({2, 4, 3}, 14)) <= kTol);
  }
  SUBCASE("add / sub / mul / scale / abs") {
    Tensor bias = random_tensor({5}, 21);
    CHECK(grad_check([&](const Tensor& t) { return weighted_sum(ops::add(t, bias)); }, random_tensor({3, 5}, 22)) <= kTol);
    Tensor big = random_tensor({3, 5}, 23);
    CHECK(grad_check([&](const Tensor& t) { return weighted_sum(ops::add(big, t)); }, random_tensor({5}, 24)) <= kTol);
    CHECK(grad_check([&](const Tensor& t) { return weighted_sum(ops::sub(big, t)); }, random_tensor({3, 5}, 25)) <= kTol);
    CHECK(grad_check([&](const Tensor& t) { return weighted_sum(ops::mul(t, big)); }, random_tensor({3, 5}, 26)) <= kTol);
    CHECK(grad_check([&](const Tensor& t) { return weighted_sum(ops::scale(t, -1.7)); }, random_tensor({6}, 27)) <= kTol);
    CHECK(grad_check([&](const Tensor& t) { return weighted_sum(ops::abs(t)); }, random_tensor({6}, 28, 0.1, 1.0)) <= kTol);
  }
  SUBCASE("sum / mean") {
    CHECK(grad_check([](const Tensor& t) { return ops::sum(t); }, random_tensor({2, 3}, 31)) <= kTol);
    for (std::size_t axis = 0; axis < 3; ++axis) {
      CHECK(grad_check([&](const Tensor& t) { return weighted_sum(ops::mean(t, axis)); }, random_tensor({2, 3, 4}, 32)) <= kTol);
    }
  }
  SUBCASE("gelu / softmax") {
    CHECK(grad_check([](const Tensor& t) { return weighted_sum(ops::gelu(t)); }, random_tensor({3, 4}, 41, -3, 3)) <= kTol);
    CHECK(grad_check([](const Tensor& t) { return weighted_sum(ops::softmax(t)); }, random_tensor({3, 4}, 42, -3, 3)) <= kTol);
  }
  SUBCASE("layer norm wrt input, gain and shift") {
    Tensor x = random_tensor({3, 6}, 51);
    Tensor g = random_tensor({6}, 52, 0.5, 1.5);
    Tensor b = random_tensor({6}, 53);
    CHECK(grad_check([&](const Tensor& t) { return weighted_sum(ops::layer_norm(t, g, b)); }, x) <= kTol);
    CHECK(grad_check([&](const Tensor& t) { return weighted_sum(ops::layer_norm(x, t, b)); }, g) <= kTol);
    CHECK(grad_check([&](const Tensor& t) { return weighted_sum(ops::layer_norm(x, g, t)); }, b) <= kTol);
  }
  SUBCASE("conv2d wrt input, weight and bias, strided and padded") {
    Tensor x = random_tensor({1, 2, 5, 5}, 61);
    Tensor w = random_tensor({3, 2, 3, 3}, 62);
    Tensor b = random_tensor({3}, 63);
    for (ops::Conv2dOptions opt : {ops::Conv2dOptions{1, 1}, ops::Conv2dOptions{2, 0}, ops::Conv2dOptions{2, 1}}) {
      CHECK(grad_check([&](const Tensor& t) { return weighted_sum(ops::conv2d(t, w, b, opt)); }, x) <= kTol);
      CHECK(grad_check([&](const Tensor& t) { return weighted_sum(ops::conv2d(x, t, b, opt)); }, w) <= kTol);
      CHECK(grad_check([&](const Tensor& t) { return weighted_sum(ops::conv2d(x, w, t, opt)); }, b) <= kTol);
    }
  }
  SUBCASE("conv1d") {
    Tensor x = random_tensor({2, 2, 6}, 71);
    Tensor w = random_tensor({3, 2, 3}, 72);
    Tensor b = random_tensor({3}, 73);
    CHECK(grad_check([&](const Tensor& t) { return weighted_sum(ops::conv1d(t, w, b, {1, 1})); }, x) <= kTol);
    CHECK(grad_check([&](const Tensor& t) { return weighted_sum(ops::conv1d(x, t, b, {1, 1})); }, w) <= kTol);
  }
  SUBCASE("pooling") {
    CHECK(grad_check([](const Tensor& t) { return weighted_sum(ops::avg_pool2d(t, 2)); }, random_tensor({1, 2, 4, 4}, 81)) <= kTol);
    // distinct values keep the max away from ties
    std::vector<double> v(32);
    std::iota(v.begin(), v.end(), 0.0);
    std::shuffle(v.begin(), v.end(), std::mt19937_64(82));
    for (double& e : v) e *= 0.1;
    CHECK(grad_check([](const Tensor& t) { return weighted_sum(ops::max_pool2d(t, 2)); },
                     Tensor::from_data({1, 2, 4, 4}, v)) <= kTol);
  }
  SUBCASE("reshape / permute / transpose / gather") {
    CHECK(grad_check([](const Tensor& t) { return weighted_sum(ops::reshape(t, {4, 3})); }, random_tensor({2, 6}, 91)) <= kTol);
    const std::size_t axes[] = {2, 0, 1};
    CHECK(grad_check([&](const Tensor& t) { return weighted_sum(ops::permute(t, axes)); }, random_tensor({2, 3, 4}, 92)) <= kTol);
    CHECK(grad_check([](const Tensor& t) { return weighted_sum(ops::transpose(t, 0, 1)); }, random_tensor({3, 4}, 93)) <= kTol);
    CHECK(grad_check([](const Tensor& t) { return weighted_sum(ops::gather(t, {0, 2, 2, 5, 1}, {5})); },
                     random_tensor({6}, 94)) <= kTol);
  }
  SUBCASE("softmax cross-entropy") {
    const int labels[] = {2, 0, 1};
    CHECK(grad_check([&](const Tensor& t) { return ops::softmax_cross_entropy(t, labels); }, random_tensor({3, 4}, 101, -2, 2)) <= kTol);
  }
}

TEST_CASE("composite conv -> layer norm -> GELU -> sum matches finite differences") {
  Tensor w = random_tensor({3, 3, 3, 3}, 201, -0.5, 0.5);
  Tensor b = random_tensor({3}, 202);
  Tensor g = Tensor::full({8}, 1.0);
  Tensor beta = Tensor::zeros({8});
  auto f = [&](const Tensor& x) {
    return ops::sum(ops::gelu(ops::layer_norm(ops::conv2d(x, w, b, {1, 1}), g, beta)));
  };
  CHECK(grad_check(f, random_tensor({1, 3, 8, 8}, 203, 0, 1)) <= 1e-4);
}

TEST_CASE("forward ops on finite inputs stay finite") {
  Tensor big = random_tensor({2, 5}, 301, -800, 800);
  for (double v : ops::softmax(big).data()) CHECK(std::isfinite(v));
  const int labels[] = {0, 4};
  CHECK(std::isfinite(ops::softmax_cross_entropy(big, labels).item()));
  for (double v : ops::layer_norm(Tensor::zeros({2, 5}), Tensor::full({5}, 1.0), Tensor::zeros({5})).data()) {
    CHECK(std::isfinite(v));
  }
}
