#include <gtest/gtest.h>

#include <cmath>

#include "fer/rng.hpp"
#include "fer/tensor.hpp"
#include "test_util.hpp"

namespace {

using fer::Rng;
using fer::Shape;
using fer::Tensor;
using fer::Tensor64;

// Naive triple loop.
template <typename T>
fer::BasicTensor<T> naive_matmul(const fer::BasicTensor<T>& a, const fer::BasicTensor<T>& b) {
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  fer::BasicTensor<T> c({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += static_cast<double>(a[i * k + p]) * b[p * n + j];
      c[i * n + j] = static_cast<T>(acc);
    }
  return c;
}

TEST(TensorCreate, FillAndValues) {
  Tensor z({2, 3});
  EXPECT_EQ(z.shape(), (Shape{2, 3}));
  EXPECT_EQ(z.size(), 6u);
  for (float v : z.data()) EXPECT_EQ(v, 0.0f);

  Tensor s({1}, std::vector<float>{5.0f});
  EXPECT_EQ(s[0], 5.0f);

  EXPECT_THROW(Tensor({2, 2}, std::vector<float>{1, 2, 3}), fer::TensorError);
  EXPECT_THROW(Tensor({2, 0}), fer::TensorError);
  EXPECT_THROW(Tensor(Shape{}), fer::TensorError);
}

TEST(TensorCreate, AtIsBoundsChecked) {
  Tensor t({2, 3}, std::vector<float>{0, 1, 2, 3, 4, 5});
  EXPECT_EQ(t.at({1, 2}), 5.0f);
  EXPECT_THROW(t.at({2, 0}), fer::TensorError);
  EXPECT_THROW(t.at({0}), fer::TensorError);
}

TEST(TensorElementwise, Examples) {
  Rng rng(3);
  auto x = fer::tensor_cast<float>(fer::testing::random_tensor(rng, {4, 5}));
  EXPECT_EQ(fer::add(x, Tensor::zeros_like(x)), x);
  const Tensor v({3}, std::vector<float>{1, 2, 3});
  EXPECT_EQ(fer::scale(v, 2.0f).values(), (std::vector<float>{2, 4, 6}));
  EXPECT_THROW(fer::add(Tensor({2, 3}), Tensor({3, 2})), fer::TensorError);
  EXPECT_EQ(fer::sub(v, v), Tensor({3}));
  EXPECT_EQ(fer::mul(v, v).values(), (std::vector<float>{1, 4, 9}));
  EXPECT_EQ(fer::add_scalar(v, 1.0f).values(), (std::vector<float>{2, 3, 4}));
}

TEST(TensorElementwise, NonFiniteIsAnError) {
  const Tensor big({1}, std::vector<float>{3e38f});
  EXPECT_THROW(fer::add(big, big), fer::NonFiniteError);
  EXPECT_THROW(fer::map<float>(Tensor({1}, std::vector<float>{-1.0f}), [](float x) { return std::sqrt(x); }),
               fer::NonFiniteError);
}

TEST(TensorElementwise, CommutativeAndBitIdentical) {
  Rng rng(11);
  const auto a = fer::tensor_cast<float>(fer::testing::random_tensor(rng, {3, 7}));
  const auto b = fer::tensor_cast<float>(fer::testing::random_tensor(rng, {3, 7}));
  EXPECT_EQ(fer::add(a, b), fer::add(b, a));
  EXPECT_EQ(fer::mul(a, b), fer::mul(b, a));
  EXPECT_EQ(fer::add(a, b), fer::add(a, b));
}

TEST(TensorMatmul, Examples) {
  const Tensor a({2, 2}, std::vector<float>{1, 2, 3, 4});
  const Tensor b({2, 2}, std::vector<float>{5, 6, 7, 8});
  EXPECT_EQ(fer::matmul(a, b), naive_matmul(a, b));
  EXPECT_EQ(fer::matmul(a, b).values(), (std::vector<float>{19, 22, 43, 50}));
  const Tensor eye({2, 2}, std::vector<float>{1, 0, 0, 1});
  EXPECT_EQ(fer::matmul(a, eye), a);
  EXPECT_THROW(fer::matmul(Tensor({2, 3}), Tensor({2, 3})), fer::TensorError);
  EXPECT_THROW(fer::matmul(Tensor({2, 3, 1}), Tensor({3, 2})), fer::TensorError);
}

TEST(TensorMatmul, MatchesNaiveOracleOnRandomShapes) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    const auto m = 1 + rng.uniform_index(8), k = 1 + rng.uniform_index(8), n = 1 + rng.uniform_index(8);
    const auto a = fer::tensor_cast<float>(fer::testing::random_tensor(rng, {m, k}));
    const auto b = fer::tensor_cast<float>(fer::testing::random_tensor(rng, {k, n}));
    const auto got = fer::matmul(a, b);
    const auto want = naive_matmul(a, b);
    ASSERT_EQ(got.shape(), want.shape());
    // Normwise: ||got - want|| / ||want||.
    double diff = 0.0, norm = 0.0;
    for (std::size_t i = 0; i < got.size(); ++i) {
      diff += std::pow(static_cast<double>(got[i]) - want[i], 2);
      norm += std::pow(static_cast<double>(want[i]), 2);
    }
    EXPECT_LE(std::sqrt(diff / norm), 1e-6) << "seed " << seed;
  }
}

TEST(TensorMatmul, GemmTransposeFlags) {
  Rng rng(5);
  const auto a = fer::testing::random_tensor(rng, {3, 4});
  const auto b = fer::testing::random_tensor(rng, {4, 2});
  const auto want = naive_matmul(a, b);
  const auto at = fer::transpose(a), bt = fer::transpose(b);
  for (int ta = 0; ta < 2; ++ta)
    for (int tb = 0; tb < 2; ++tb) {
      Tensor64 c({3, 2}, 1.0);
      fer::gemm<double>(ta, tb, 3, 2, 4, (ta ? at : a).data(), (tb ? bt : b).data(), c.data(), true);
      for (std::size_t i = 0; i < c.size(); ++i) EXPECT_NEAR(c[i], want[i] + 1.0, 1e-12);
    }
}

TEST(TensorReduce, Examples) {
  EXPECT_EQ(fer::sum(Tensor({3, 2}))[0], 0.0f);
  EXPECT_EQ(fer::argmax<float>(Tensor({3}, std::vector<float>{0.1f, 0.7f, 0.2f})), 1u);
  EXPECT_EQ(fer::argmax<float>(Tensor({2}, std::vector<float>{0.5f, 0.5f})), 0u);
  EXPECT_THROW(fer::argmax<float>(std::span<const float>{}), fer::TensorError);

  const Tensor t({2, 3}, std::vector<float>{1, 5, 3, 4, 2, 6});
  EXPECT_EQ(fer::sum(t, 0).values(), (std::vector<float>{5, 7, 9}));
  EXPECT_EQ(fer::sum(t, 1).values(), (std::vector<float>{9, 12}));
  EXPECT_EQ(fer::mean(t, 1).values(), (std::vector<float>{3, 4}));
  EXPECT_EQ(fer::max(t, 0).values(), (std::vector<float>{4, 5, 6}));
  EXPECT_EQ(fer::max(t)[0], 6.0f);
  EXPECT_FLOAT_EQ(fer::mean(t)[0], 3.5f);
  EXPECT_EQ(fer::argmax(t, 1), (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(fer::argmax(t, 0), (std::vector<std::size_t>{1, 0, 1}));
  EXPECT_THROW(fer::sum(t, 2), fer::TensorError);
}

TEST(TensorReduce, ArgmaxInvariantUnderShiftAndPositiveScale) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    Rng rng(seed);
    const auto t = fer::testing::random_tensor(rng, {9});
    const auto idx = fer::argmax(t);
    EXPECT_EQ(fer::argmax(fer::add_scalar(t, 3.25)), idx);
    EXPECT_EQ(fer::argmax(fer::scale(t, 7.5)), idx);
  }
}

TEST(SampleNormal, Examples) {
  Rng a(1);
  const auto zero = fer::sample_normal<double>(a, {50}, 2.5, 0.0);
  for (double v : zero.data()) EXPECT_EQ(v, 2.5);

  Rng r1(42), r2(42);
  EXPECT_EQ(fer::sample_normal<float>(r1, {100}, 0, 1), fer::sample_normal<float>(r2, {100}, 0, 1));

  Rng rng(2024);
  const auto draws = fer::sample_normal<double>(rng, {100000}, 0.0, 1.0);
  double mean = 0.0;
  for (double v : draws.data()) mean += v;
  mean /= draws.size();
  double var = 0.0;
  for (double v : draws.data()) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / draws.size());
  EXPECT_NEAR(mean, 0.0, 0.02);
  EXPECT_NEAR(sd, 1.0, 0.02);

  EXPECT_THROW(fer::sample_normal<double>(rng, {2}, 0.0, -1.0), std::invalid_argument);
}

TEST(RngStreams, DerivedStreamsIgnoreOtherDraws) {
  Rng parent(9);
  auto a = Rng::derive(9, {1, 2});
  for (int i = 0; i < 100; ++i) parent.next_u64();
  auto b = Rng::derive(9, {1, 2});
  for (int i = 0; i < 10; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  EXPECT_NE(Rng::derive(9, {1, 2}).next_u64(), Rng::derive(9, {2, 1}).next_u64());
}

}  // namespace
