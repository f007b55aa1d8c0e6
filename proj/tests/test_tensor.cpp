// Copyright 2026 The Trifuse Authors
// Autodiff engine tests
//
// Licensed under the Apache License, Version 2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "trifuse/errors.hpp"
#include "trifuse/gradsuite.hpp"
#include "trifuse/tensor.hpp"

using namespace trifuse;

namespace {

Tensor random_leaf(Shape shape, Pcg32& rng) {
  Eigen::Index n = 1;
  for (const Eigen::Index d : shape) n *= d;
  Eigen::ArrayXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = rng.uniform(-1.0, 1.0);
  return Tensor::from_values(std::move(shape), std::move(v), true);
}

}  // namespace

TEST_CASE("forward fixtures") {
  SUBCASE("matmul by identity") {
    Pcg32 rng(1);
    const Tensor a = random_leaf({2, 2}, rng);
    const Tensor eye = Tensor::from_matrix(Eigen::MatrixXd::Identity(2, 2));
    const Tensor out = matmul(eye, a);
    CHECK((out.values() == a.values()).all());
  }

  SUBCASE("softmax of equal logits is uniform") {
    const Tensor out = softmax_rows(Tensor::row_vector(Eigen::ArrayXd::Zero(2)));
    CHECK(out.values()[0] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(out.values()[1] == doctest::Approx(0.5).epsilon(1e-15));
  }

  SUBCASE("cross entropy of uniform logits is ln 2") {
    const Tensor loss =
        cross_entropy(Tensor::row_vector(Eigen::ArrayXd::Zero(2)), 0);
    CHECK(loss.scalar_value() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  }

  SUBCASE("shape mismatches are errors") {
    Pcg32 rng(2);
    const Tensor a = random_leaf({2, 3}, rng);
    const Tensor b = random_leaf({3, 2}, rng);
    CHECK_THROWS_AS(add(a, b), ShapeError);
    CHECK_THROWS_AS(matmul(a, a), ShapeError);
    CHECK_THROWS_AS(concat_cols({a, b}), ShapeError);
    CHECK_THROWS_AS(slice_cols(a, 2, 5), ShapeError);
  }

  SUBCASE("non-finite results trip a numeric error") {
    const Tensor big = Tensor::scalar(1e308);
    CHECK_THROWS_AS(mul(big, big), NumericError);
  }
}

TEST_CASE("backward basics") {
  SUBCASE("d(x*x)/dx = 2x") {
    Tensor x = Tensor::scalar(3.0, true);
    Tensor loss = mul(x, x);
    loss.backward();
    CHECK(x.grad()[0] == doctest::Approx(6.0).epsilon(1e-15));
  }

  SUBCASE("unused parameter gets no gradient") {
    Pcg32 rng(3);
    Tensor used = random_leaf({1, 2}, rng);
    Tensor unused = random_leaf({1, 2}, rng);
    Tensor loss = cross_entropy(used, 0);
    loss.backward();
    CHECK(unused.grad().size() == 0);  // never touched
    CHECK(used.grad().size() == 2);
  }

  SUBCASE("non-scalar loss is a contract error") {
    Pcg32 rng(4);
    Tensor x = random_leaf({2, 2}, rng);
    CHECK_THROWS_AS(x.backward(), ContractError);
  }

  SUBCASE("gradient accumulates across backward calls") {
    Tensor x = Tensor::scalar(2.0, true);
    mul(x, x).backward();
    mul(x, x).backward();
    CHECK(x.grad()[0] == doctest::Approx(8.0));
    x.zero_grad();
    CHECK(x.grad().size() == 0);
  }

  SUBCASE("backward seed scales gradients") {
    Tensor x = Tensor::scalar(3.0, true);
    mul(x, x).backward(0.5);
    CHECK(x.grad()[0] == doctest::Approx(3.0));
  }

  SUBCASE("concat routes gradient slices to inputs") {
    Pcg32 rng(5);
    Tensor a = random_leaf({1, 2}, rng);
    Tensor b = random_leaf({1, 3}, rng);
    const double err = grad_check(
        [&]() {
          const Tensor cat = concat_cols({a, b});
          return cross_entropy(slice_cols(cat, 1, 2), 1);
        },
        {a, b});
    CHECK(err < 1e-6);
  }
}

TEST_CASE("softmax invariants") {
  Pcg32 rng(6);
  for (int rep = 0; rep < 50; ++rep) {
    const Tensor x = random_leaf({4, 7}, rng);
    const Tensor y = softmax_rows(x);
    Eigen::Map<const RowMatrixXd> m(y.values().data(), 4, 7);
    for (Eigen::Index r = 0; r < 4; ++r) {
      CHECK(std::abs(m.row(r).sum() - 1.0) < 1e-12);
      CHECK(m.row(r).minCoeff() > 0.0);
      CHECK(m.row(r).maxCoeff() < 1.0);
    }
  }
}

TEST_CASE("frozen leaves receive no accumulation") {
  Tensor x = Tensor::scalar(3.0, true);
  x.set_requires_grad(false);
  Tensor y = Tensor::scalar(2.0, true);
  Tensor loss = mul(x, y);
  loss.backward();
  CHECK(x.grad().size() == 0);
  CHECK(y.grad()[0] == doctest::Approx(3.0));
}

TEST_CASE("no-grad mode records nothing") {
  Tensor x = Tensor::scalar(3.0, true);
  Tensor loss;
  {
    NoGradGuard guard;
    loss = mul(x, x);
  }
  CHECK_FALSE(loss.requires_grad());
  loss.backward();  // no-op sweep
  CHECK(x.grad().size() == 0);
}

TEST_CASE("determinism: same seed, same op sequence, identical bits") {
  const auto run = [](std::uint64_t seed) {
    Pcg32 rng(seed);
    Tensor w1 = random_leaf({6, 5}, rng);
    Tensor w2 = random_leaf({5, 3}, rng);
    Tensor x = random_leaf({2, 6}, rng);
    Tensor out = softmax_rows(matmul(trifuse::tanh(matmul(x, w1)), w2));
    Tensor loss = cross_entropy(slice_rows(out, 0, 1), 1);
    loss.backward();
    return std::make_pair(w1.grad(), out.values());
  };
  const auto [g1, v1] = run(42);
  const auto [g2, v2] = run(42);
  REQUIRE(g1.size() == g2.size());
  CHECK(std::memcmp(g1.data(), g2.data(),
                    sizeof(double) * static_cast<std::size_t>(g1.size())) == 0);
  CHECK(std::memcmp(v1.data(), v2.data(),
                    sizeof(double) * static_cast<std::size_t>(v1.size())) == 0);
}

TEST_CASE("gradient suite (smoke)") {
  const gradsuite::SuiteReport report = gradsuite::run_suite(5, 20260810);
  for (const gradsuite::CheckResult& r : report.results) {
    INFO(r.name << " max_rel_error=" << r.max_rel_error);
    CHECK(r.passed());
  }
}

TEST_CASE("gradient suite detects a corrupted backward (negative control)") {
  detail::set_backward_corruption(1e-3);
  Pcg32 rng(7);
  Tensor a = random_leaf({3, 4}, rng);
  // Keep inputs away from the relu kink.
  Eigen::ArrayXd& v = a.values_mut();
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (std::abs(v[i]) < 0.05) v[i] += v[i] >= 0 ? 0.1 : -0.1;
  }
  const Tensor w = Tensor::from_values({12, 1}, Eigen::ArrayXd::Ones(12), false);
  const double err =
      grad_check([&]() { return matmul(reshape(relu(a), {1, 12}), w); }, {a});
  detail::set_backward_corruption(0.0);
  CHECK(err > 1e-6);
}
