#include <doctest.h>

#include <cmath>
#include <random>

#include "bitskip/quant.hpp"
#include "oracles.hpp"

using namespace bitskip;

namespace {

RowMatrix<float> row(std::initializer_list<float> values) {
  RowMatrix<float> m(1, static_cast<Index>(values.size()));
  std::copy(values.begin(), values.end(), m.data());
  return m;
}

}  // namespace

TEST_CASE("ternary hand example") {
  const auto t = ternary_quantize(row({0.9f, 0.1f, -0.7f}));
  CHECK(t.alpha == doctest::Approx(0.5667).epsilon(1e-4));
  CHECK(0.5f * t.alpha == doctest::Approx(0.28333).epsilon(1e-4));
  CHECK(t.codes(0, 0) == 1);
  CHECK(t.codes(0, 1) == 0);
  CHECK(t.codes(0, 2) == -1);
  const auto d = t.dequantized();
  CHECK(d(0, 0) == doctest::Approx(0.5667).epsilon(1e-4));
  CHECK(d(0, 1) == 0.0f);
  CHECK(d(0, 2) == doctest::Approx(-0.5667).epsilon(1e-4));
}

TEST_CASE("ternary degenerate inputs") {
  const auto zeros = ternary_quantize(RowMatrix<float>::Zero(3, 4));
  CHECK(zeros.alpha == 0.0f);
  CHECK((zeros.codes.array() == 0).all());

  const auto same = ternary_quantize(row({0.3f, 0.3f, 0.3f}));
  CHECK(same.alpha == doctest::Approx(0.3f));
  CHECK((same.codes.array() == 1).all());
  CHECK(same.dequantized()(0, 1) == doctest::Approx(0.3f));

  CHECK_THROWS_AS(ternary_quantize(RowMatrix<float>(0, 0)), DimensionError);
}

TEST_CASE("ternary agrees bit for bit with the brute-force oracle") {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> dim(1, 24);
  std::uniform_real_distribution<double> scale(0.01, 3.0);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto w = oracle::random_matrix<float>(dim(rng), dim(rng), rng, scale(rng));
    const auto got = ternary_quantize(w);
    const auto want = oracle::ternary(w);
    REQUIRE(got.alpha == want.alpha);
    for (Index i = 0; i < w.size(); ++i) REQUIRE(got.codes.data()[i] == want.codes[static_cast<std::size_t>(i)]);
  }
}

TEST_CASE("activation quantization hand examples") {
  const auto q8 = quantize_activations(row({1.0f, -0.5f}), 8);
  CHECK(q8.scale_per_token(0) == 1.0f);
  CHECK(q8.values(0, 0) == doctest::Approx(1.0));
  CHECK(q8.values(0, 1) == doctest::Approx(-0.50394).epsilon(1e-5));

  const auto q4 = quantize_activations(row({0.7f, -1.4f}), 4);
  CHECK(q4.values(0, 0) == doctest::Approx(0.8).epsilon(1e-6));
  CHECK(q4.values(0, 1) == doctest::Approx(-1.4).epsilon(1e-6));

  for (int bits : {4, 8}) {
    const auto z = quantize_activations(RowMatrix<float>::Zero(2, 5), bits);
    CHECK((z.values.array() == 0.0f).all());
    CHECK((z.scale_per_token.array() == 0.0f).all());
  }
  CHECK_THROWS_AS(quantize_activations(row({1.0f}), 3), RangeError);
  CHECK_THROWS_AS(activation_levels(16), RangeError);
}

TEST_CASE("activation quantization error bound and idempotence") {
  std::mt19937_64 rng(2);
  for (int bits : {4, 8}) {
    const double q = bits == 8 ? 127.0 : 7.0;
    for (int trial = 0; trial < 200; ++trial) {
      const auto x = oracle::random_matrix<float>(4, 33, rng, 2.0);
      const auto out = quantize_activations(x, bits);
      for (Index r = 0; r < x.rows(); ++r) {
        const double s = out.scale_per_token(r);
        CHECK(s == doctest::Approx(x.row(r).cwiseAbs().maxCoeff()));
        const double bound = s / q * 0.5 + 1e-6;
        REQUIRE((out.values.row(r) - x.row(r)).cwiseAbs().maxCoeff() <= bound);
        for (Index c = 0; c < x.cols(); ++c) {
          const double k = out.values(r, c) / s * q;
          REQUIRE(std::abs(k - std::round(k)) < 1e-3);
        }
      }
      const auto again = quantize_activations(out.values, bits);
      REQUIRE((again.values - out.values).cwiseAbs().maxCoeff() <= 1e-6f);
    }
  }
}

TEST_CASE("rounding is half away from zero") {
  // 0.5/1.0·7 = 3.5 rounds to 4; -3.5 rounds to -4.
  const auto q = quantize_activations(row({0.5f, -0.5f, 1.0f}), 4);
  CHECK(q.values(0, 0) == doctest::Approx(4.0 / 7.0));
  CHECK(q.values(0, 1) == doctest::Approx(-4.0 / 7.0));
}

TEST_CASE("straight-through gradients are the upstream gradient") {
  RowMatrix<double> up(1, 3);
  up << 1, 2, 3;
  CHECK(ste_gradient(up) == up);
  CHECK(ste_gradient(RowMatrix<double>::Zero(2, 2)).isZero());

  std::mt19937_64 rng(3);
  for (int bits : {4, 8}) {
    auto x = BasicTensor<float>::from_matrix(oracle::random_matrix<float>(3, 8, rng), true);
    const auto g = BasicTensor<float>::from_matrix(oracle::random_matrix<float>(3, 8, rng));
    {
      GradientTape<float> tape;
      tape.backward(sum(mul(quantize_activations_ste(x, bits), g)));
    }
    CHECK(x.grad() == g.value());
  }
  // Values clipped by the quantizer still pass their gradient unchanged.
  auto big = BasicTensor<float>::from_matrix(row({1.0f, -1.0f}) * 100.0f, true);
  {
    GradientTape<float> tape;
    tape.backward(sum(quantize_activations_ste(big, 4)));
  }
  CHECK((big.grad().array() == 1.0f).all());
}

TEST_CASE("ternary STE chain rule") {
  // d/dw sum(x · dequant(ternary(w))) = xᵀ·1 with the quantizer linearized
  // as the identity.
  std::mt19937_64 rng(4);
  auto w = BasicTensor<double>::from_matrix(oracle::random_matrix<double>(5, 3, rng), true);
  const auto x = BasicTensor<double>::from_matrix(oracle::random_matrix<double>(4, 5, rng));
  {
    GradientTape<double> tape;
    tape.backward(sum(matmul(x, ternary_weight_ste(w))));
  }
  const RowMatrix<double> expected = x.value().transpose() * RowMatrix<double>::Ones(4, 3);
  CHECK((w.grad() - expected).cwiseAbs().maxCoeff() < 1e-12);

  const auto forward = ternary_weight_ste(w);
  CHECK((forward.value() - ternary_quantize(w.value()).dequantized()).cwiseAbs().maxCoeff() == 0.0);
}
