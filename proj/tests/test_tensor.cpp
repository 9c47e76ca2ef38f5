#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "vitlens/numdiff.hpp"
#include "vitlens/tensor.hpp"

using namespace vitlens;

TEST(Matmul, IdentityAndScalar) {
  const Tensor id = Tensor::matrix(2, 2, {1, 0, 0, 1});
  const Tensor b = Tensor::matrix(2, 2, {3, 4, 5, 6});
  EXPECT_EQ(matmul(id, b), b);
  EXPECT_EQ(matmul(Tensor::matrix(1, 1, {2}), Tensor::matrix(1, 1, {3})),
            Tensor::matrix(1, 1, {6}));
}

TEST(Matmul, MatchesTripleLoop) {
  std::mt19937_64 rng(3);
  const Tensor a = fixtures::random_tensor({5, 7}, rng);
  const Tensor b = fixtures::random_tensor({7, 3}, rng);
  const Tensor c = matmul(a, b);
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      double acc = 0;
      for (std::size_t t = 0; t < 7; ++t) acc += double(a.at(i, t)) * b.at(t, j);
      EXPECT_NEAR(c.at(i, j), acc, 1e-6);
    }
  }
  const Tensor bt = matmul_bt(a, transpose(b));
  for (std::size_t i = 0; i < c.size(); ++i) EXPECT_NEAR(bt[i], c[i], 1e-6);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor({2, 3}), Tensor({2, 3}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::dimension);
    EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos) << e.what();
  }
}

TEST(TensorShape, RejectsZeroDimAndBadLength) {
  EXPECT_THROW(Tensor({2, 0}), Error);
  EXPECT_THROW(Tensor({2, 2}, std::vector<float>(3)), Error);
}

TEST(Softmax, UniformStableAndDirect) {
  const Tensor u = softmax(Tensor::vector({0, 0, 0}), 0);
  for (float v : u.storage()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-7);
  const Tensor s = softmax(Tensor::vector({1000, 0}), 0);
  EXPECT_NEAR(s[0], 1.0, 1e-6);
  EXPECT_NEAR(s[1], 0.0, 1e-6);
  const Tensor d = softmax(Tensor::vector({1, 2, 3}), 0);
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(d[i], std::exp(double(i + 1)) / z, 1e-7);
}

TEST(Softmax, RowsSumToOneAlongAxis) {
  std::mt19937_64 rng(8);
  const Tensor x = fixtures::random_tensor({4, 6, 5}, rng, 5.0);
  for (std::size_t axis = 0; axis < 3; ++axis) {
    const Tensor y = softmax(x, axis);
    const std::size_t n = x.dim(axis);
    std::size_t inner = 1;
    for (std::size_t a = axis + 1; a < 3; ++a) inner *= x.dim(a);
    for (std::size_t start = 0; start < y.size(); ++start) {
      if ((start / inner) % n != 0) continue;
      double sum = 0;
      for (std::size_t t = 0; t < n; ++t) {
        EXPECT_GE(y[start + t * inner], 0.0f);
        sum += y[start + t * inner];
      }
      EXPECT_NEAR(sum, 1.0, 1e-6);
    }
  }
  EXPECT_THROW(softmax(x, 3), Error);
}

TEST(LayerNorm, DegenerateCases) {
  const Tensor x = Tensor::matrix(1, 4, {2, 2, 2, 2});
  const Tensor y = layer_norm(x, Tensor({4}, 1.0f), Tensor({4}, 0.0f), 1e-6f);
  for (float v : y.storage()) EXPECT_EQ(v, 0.0f);
  const Tensor r = Tensor::matrix(1, 4, {1, -2, 3, 0.5});
  const Tensor z = layer_norm(r, Tensor({4}, 0.0f), Tensor({4}, 1.5f), 1e-6f);
  for (float v : z.storage()) EXPECT_EQ(v, 1.5f);
}

TEST(LayerNorm, MatchesDoubleReferenceAndMoments) {
  std::mt19937_64 rng(11);
  const Tensor x = fixtures::random_tensor({6, 32}, rng, 3.0);
  const Tensor one({32}, 1.0f), zero({32}, 0.0f);
  const Tensor y = layer_norm(x, one, zero, 1e-6f);
  const auto ref = oracle::Mat(6);
  for (std::size_t r = 0; r < 6; ++r) {
    oracle::Vec row(x.row(r).begin(), x.row(r).end());
    const oracle::Vec expect = oracle::layer_norm(row, one, zero, 1e-6);
    double mean = 0, var = 0;
    for (std::size_t i = 0; i < 32; ++i) {
      EXPECT_NEAR(y.at(r, i), expect[i], 1e-6);
      mean += y.at(r, i);
    }
    mean /= 32;
    for (std::size_t i = 0; i < 32; ++i) var += (y.at(r, i) - mean) * (y.at(r, i) - mean);
    var /= 32;
    EXPECT_LE(std::abs(mean), 1e-5);
    EXPECT_NEAR(var, 1.0, 1e-4);
  }
}

TEST(Gelu, ValuesAndDerivative) {
  EXPECT_EQ(gelu(0.0), 0.0);
  EXPECT_NEAR(gelu(10.0), 10.0, 1e-5);
  auto f = [](double x) { return gelu(x); };
  EXPECT_NEAR(gelu_derivative(0.7), numdiff::central(f, 0.7, 1e-3), 1e-5);
  for (double x = -5.0; x <= 5.0; x += 0.25) {
    EXPECT_LE(numdiff::relative_error(gelu_derivative(x), numdiff::central(f, x, 1e-4)), 1e-4)
        << x;
  }
  const Tensor t = gelu(Tensor::vector({-1, 0, 1}));
  EXPECT_FLOAT_EQ(t[2], float(gelu(1.0)));
  EXPECT_FLOAT_EQ(gelu_derivative(Tensor::vector({0.5}))[0], float(gelu_derivative(0.5)));
}

TEST(ArgsortDesc, OrderAndTies) {
  EXPECT_EQ(argsort_desc(std::vector<float>{3, 1, 2}), (std::vector<std::size_t>{0, 2, 1}));
  EXPECT_EQ(argsort_desc(std::vector<float>{5, 5, 5}), (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_EQ(argmax(std::vector<float>{1, 4, 4}), 1u);
}

TEST(ArgsortDesc, RandomPermutationIsNonIncreasing) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> dist(-20, 20);
  std::vector<float> x(100);
  for (float& v : x) v = float(dist(rng));
  const auto order = argsort_desc(x);
  std::vector<bool> seen(100);
  for (std::size_t i = 0; i < order.size(); ++i) {
    seen[order[i]] = true;
    if (i > 0) {
      EXPECT_GE(x[order[i - 1]], x[order[i]]);
      if (x[order[i - 1]] == x[order[i]]) EXPECT_LT(order[i - 1], order[i]);
    }
  }
  for (bool s : seen) EXPECT_TRUE(s);
}

TEST(Kernels, Deterministic) {
  std::mt19937_64 rng(21);
  const Tensor a = fixtures::random_tensor({9, 13}, rng);
  const Tensor b = fixtures::random_tensor({13, 7}, rng);
  EXPECT_EQ(matmul(a, b), matmul(a, b));
  EXPECT_EQ(softmax(a, 1), softmax(a, 1));
}

TEST(GatherRows, EmptySelection) {
  const Tensor x({3, 2}, 1.0f);
  EXPECT_THROW(gather_rows(x, {}), Error);
  const std::vector<std::size_t> idx{2, 0};
  EXPECT_EQ(gather_rows(x, idx).rows(), 2u);
}
