// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "zsumm/errors.hpp"
#include "zsumm/gradcheck.hpp"
#include "zsumm/tensor.hpp"

using namespace zsumm;
using zsumm::testing::numeric_gradient;
using zsumm::testing::random_tensor;
using TD = Tensor<double>;

TEST_CASE("matmul values and shape errors") {
  auto id = TD::from({2, 2}, {1, 0, 0, 1});
  auto m = TD::from({2, 2}, {3, -1, 7, 0.5});
  auto r = matmul(id, m);
  CHECK(r.shape() == Shape{2, 2});
  for (int i = 0; i < 4; ++i) CHECK(r.data()[i] == m.data()[i]);

  CHECK(matmul(TD::from({1, 2}, {1, 2}), TD::from({2, 1}, {3, 4})).item() == 11.0);

  try {
    matmul(TD::from({2, 3}, std::vector<double>(6, 1.0)), TD::from({2, 2}, {1, 2, 3, 4}));
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string what = e.what();
    CHECK(what.find("[2,3]") != std::string::npos);
    CHECK(what.find("[2,2]") != std::string::npos);
  }
}

TEST_CASE("matmul gradient against central differences") {
  auto a = TD::from({1, 2}, {1, 1}, true);
  auto b = TD::from({2, 1}, {2, 5});
  backward(sum(matmul(a, b)));
  auto numeric = numeric_gradient([&] { return sum(matmul(a, b)).item(); }, a.mutable_data());
  // oracle: [2, 5]
  CHECK(numeric[0] == doctest::Approx(2.0).epsilon(1e-8));
  CHECK(numeric[1] == doctest::Approx(5.0).epsilon(1e-8));
  CHECK(a.grad()[0] == doctest::Approx(numeric[0]));
  CHECK(a.grad()[1] == doctest::Approx(numeric[1]));
}

TEST_CASE("batched matmul broadcasts a suffix batch") {
  std::mt19937_64 rng(1);
  auto a = random_tensor({2, 3, 2, 4}, rng);
  auto b = random_tensor({3, 4, 5}, rng);
  auto c = matmul(a, b);
  CHECK(c.shape() == Shape{2, 3, 2, 5});
  // element [1][2][1][3] by hand
  double ref = 0;
  for (int k = 0; k < 4; ++k) {
    ref += a.data()[((1 * 3 + 2) * 2 + 1) * 4 + k] * b.data()[(2 * 4 + k) * 5 + 3];
  }
  CHECK(c.data()[((1 * 3 + 2) * 2 + 1) * 5 + 3] == doctest::Approx(ref));
  auto res = check_gradients([&] { return sum(mul(matmul(a, b), matmul(a, b))); }, {a, b});
  CHECK(res.max_error <= 1e-4);
}

TEST_CASE("softmax examples") {
  auto s = softmax(TD::from({2}, {0, 0}), 0);
  CHECK(s.data()[0] == doctest::Approx(0.5));
  CHECK(s.data()[1] == doctest::Approx(0.5));
  auto big = softmax(Tensor<float>::from({2}, {1000.f, 1000.f}), 0);
  CHECK(big.data()[0] == doctest::Approx(0.5));
  CHECK(std::isfinite(big.data()[1]));
  auto t = softmax(TD::from({2}, {0, std::log(3.0)}), 0);
  CHECK(t.data()[0] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(t.data()[1] == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one on random inputs, including non-last axes") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_tensor({3, 4, 5}, rng, -50, 50, false);
    for (int axis = 0; axis < 3; ++axis) {
      auto y = softmax(x, axis);
      for (double v : y.data()) CHECK((v >= 0.0 && v <= 1.0));
    }
    auto y = softmax(x, -1);
    for (int r = 0; r < 12; ++r) {
      double z = 0;
      for (int j = 0; j < 5; ++j) z += y.data()[r * 5 + j];
      CHECK(std::abs(z - 1.0) <= 1e-6);
    }
  }
}

TEST_CASE("backward of sum(softmax) is zero") {
  std::mt19937_64 rng(3);
  auto x = random_tensor({6}, rng);
  backward(sum(softmax(x, 0)));
  for (double g : x.grad()) CHECK(std::abs(g) < 1e-12);
}

TEST_CASE("layer_norm examples") {
  auto g = TD::full({3}, 1.0), b = TD::zeros({3});
  auto y = layer_norm(TD::from({3}, {5, 5, 5}), g, b, 1e-5);
  for (double v : y.data()) CHECK(v == 0.0);
  auto g2 = TD::full({2}, 1.0), b2 = TD::zeros({2});
  auto z = layer_norm(TD::from({2}, {-1, 1}), g2, b2, 1e-12);
  CHECK(z.data()[0] == doctest::Approx(-1.0));
  CHECK(z.data()[1] == doctest::Approx(1.0));
}

TEST_CASE("embedding lookup gathers rows and scatters repeated gradients") {
  auto table = TD::from({2, 2}, {1, 2, 3, 4}, true);
  const std::vector<TokenId> ids{1, 0, 1};
  auto e = embedding_lookup(table, ids);
  CHECK(e.shape() == Shape{3, 2});
  CHECK(std::vector<double>(e.data().begin(), e.data().end()) ==
        std::vector<double>{3, 4, 1, 2, 3, 4});
  backward(sum(e));
  CHECK(table.grad()[0] == 1.0);
  CHECK(table.grad()[2] == 2.0);
  const std::vector<TokenId> bad{0, 5};
  try {
    embedding_lookup(table, bad);
    FAIL("expected OutOfRange");
  } catch (const OutOfRange& err) {
    CHECK(std::string(err.what()).find("index 1") != std::string::npos);
  }
}

TEST_CASE("cross entropy examples") {
  const std::vector<TokenId> t0{0};
  CHECK(cross_entropy_from_logits(TD::from({1, 2}, {0, 0}), t0, -1).item() ==
        doctest::Approx(std::log(2.0)));
  // log(1 + e^-20), hand-evaluated log-sum-exp
  const double expected = std::log1p(std::exp(-20.0));
  CHECK(expected == doctest::Approx(2.0611536e-9).epsilon(1e-6));
  CHECK(cross_entropy_from_logits(TD::from({1, 2}, {10, -10}), t0, -1).item() ==
        doctest::Approx(expected).epsilon(1e-6));

  auto logits = TD::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  const std::vector<TokenId> ignored{-100, -100};
  auto loss = cross_entropy_from_logits(logits, ignored, -100);
  CHECK(loss.item() == 0.0);
  backward(loss);
  for (double g : logits.grad()) CHECK(g == 0.0);
}

TEST_CASE("stop_gradient contract") {
  auto x = TD::from({3}, {1, 2, 3}, true);
  auto s = stop_gradient(x);
  CHECK(std::vector<double>(s.data().begin(), s.data().end()) == std::vector<double>{1, 2, 3});
  backward(add(sum(s), sum(scale(x, 0.0))));
  for (double g : x.grad()) CHECK(g == 0.0);
  x.zero_grad();
  backward(sum(add(stop_gradient(x), x)));
  for (double g : x.grad()) CHECK(g == 1.0);
}

TEST_CASE("backward basics") {
  auto x = TD::from({}, {3.0}, true);
  backward(mul(x, x));
  CHECK(x.grad()[0] == 6.0);
  CHECK_THROWS_AS(backward(TD::from({2}, {1, 2}, true)), InvalidArgument);
}

TEST_CASE("backward is deterministic across runs on the same graph") {
  std::mt19937_64 rng(11);
  auto a = random_tensor({4, 3}, rng);
  auto b = random_tensor({3, 4}, rng);
  auto loss = mean(gelu(add(matmul(a, b), softmax(matmul(a, b), -1))));
  backward(loss);
  std::vector<double> first(a.grad().begin(), a.grad().end());
  a.zero_grad();
  b.zero_grad();
  backward(loss);
  std::vector<double> second(a.grad().begin(), a.grad().end());
  CHECK(first == second);
}

TEST_CASE("finite-difference check of every differentiable op on 20 random instances") {
  std::mt19937_64 rng(2024);
  GradCheckOptions opt;  // h = 1e-5, tol = 1e-4
  for (int trial = 0; trial < 20; ++trial) {
    auto a = random_tensor({2, 3, 4}, rng);
    auto b = random_tensor({3, 4}, rng);
    auto m = random_tensor({4, 2}, rng);
    auto w = random_tensor({4}, rng);
    auto gain = random_tensor({4}, rng);
    auto bias = random_tensor({4}, rng);
    auto table = random_tensor({5, 4}, rng);
    const std::vector<TokenId> ids{4, 0, 4, 2};
    const std::vector<TokenId> targets{1, 0, -1, 3, 2, 1};
    const std::vector<std::int32_t> gidx{0, 3, 1, 1, 2, 0, 3, 3, 2};

    auto weights = random_tensor({6}, rng, -1, 1, false);
    std::vector<double> labels{1, 0, 1, 1, 0, 0};
    std::vector<double> wts{0.5, 1, 0, 2, 1, 1};
    AttentionMask mask{2, 3, 4, {1, 1, 0, 1, 0, 0, 0, 0, 1, 0, 1, 1,
                                 1, 1, 1, 1, 0, 1, 0, 1, 1, 0, 0, 0}};

    const std::vector<std::pair<const char*, std::function<TD()>>> cases = {
        {"matmul", [&] { return sum(mul(matmul(a, m), matmul(a, m))); }},
        {"add/sub/mul", [&] { return sum(mul(sub(a, b), add(a, w))); }},
        {"scale", [&] { return sum(mul(scale(a, 0.37), a)); }},
        {"gelu", [&] { return sum(mul(gelu(a), w)); }},
        {"tanh", [&] { return sum(mul(tanh(a), w)); }},
        {"sigmoid", [&] { return sum(mul(sigmoid(a), w)); }},
        {"softmax", [&] { return sum(mul(softmax(a, 1), a)); }},
        {"masked_softmax",
         [&] { return sum(mul(masked_softmax(a, mask), a)); }},
        {"layer_norm", [&] { return sum(mul(layer_norm(a, gain, bias, 1e-5), a)); }},
        {"embedding", [&] { return sum(mul(embedding_lookup(table, ids), reshape(slice(a, 1, 0, 2), {4, 4}))); }},
        {"gather_last", [&] {
           return sum(mul(gather_last(a, gidx, 3), slice(a, 2, 0, 3)));
         }},
        {"permute/transpose/reshape", [&] {
           return sum(mul(reshape(permute(a, {2, 0, 1}), {4, 6}),
                          reshape(transpose(a), {4, 6})));
         }},
        {"concat/slice", [&] {
           auto c = concat<double>({slice(a, 1, 0, 1), a, slice(a, 1, 2, 1)}, 1);
           return sum(mul(c, c));
         }},
        {"mean", [&] { return mean(mul(a, a)); }},
        {"cross_entropy", [&] {
           return cross_entropy_from_logits(reshape(a, {6, 4}), targets, -1);
         }},
        {"bce", [&] {
           return weighted_bce_with_logits<double>(reshape(slice(a, 2, 0, 1), {6}), labels, wts);
         }},
        {"weighted composite", [&] { return sum(mul(reshape(slice(a, 2, 1, 1), {6}), weights)); }},
    };
    for (const auto& [name, fn] : cases) {
      auto res = check_gradients(fn, {a, b, m, w, gain, bias, table}, opt);
      INFO(name << " trial " << trial << " worst " << res.worst);
      CHECK(res.max_error <= 1e-4);
    }
  }
}

TEST_CASE("dropout is seeded and rate 0 is identity") {
  std::mt19937_64 r1(5), r2(5);
  auto x = Tensor<float>::full({1000}, 1.0f);
  auto y1 = dropout(x, 0.1, r1);
  auto y2 = dropout(x, 0.1, r2);
  CHECK(std::vector<float>(y1.data().begin(), y1.data().end()) ==
        std::vector<float>(y2.data().begin(), y2.data().end()));
  int zeros = 0;
  for (float v : y1.data()) zeros += v == 0.0f;
  CHECK(zeros > 50);
  CHECK(zeros < 150);
  auto same = dropout(x, 0.0, r1);
  CHECK(same.id() == x.id());
}

TEST_CASE("no-grad guard suppresses recording") {
  auto x = TD::from({2}, {1, 2}, true);
  NoGradGuard guard;
  auto y = mul(x, x);
  CHECK_FALSE(y.requires_grad());
}
