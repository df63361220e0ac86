#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "spargan/metrics.hpp"
#include "spargan/rng.hpp"

using namespace spargan;

namespace {

// KL-based score written directly from its definition.
double brute_force_score(const std::vector<std::vector<double>>& p) {
  const std::size_t n = p.size(), c = p[0].size();
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t k = 0; k < c; ++k) {
      double marginal = 0.0;
      for (std::size_t s = 0; s < n; ++s) marginal += p[s][k] / static_cast<double>(n);
      if (p[r][k] > 0.0) total += p[r][k] * std::log(p[r][k] / marginal);
    }
  }
  return std::exp(total / static_cast<double>(n));
}

Tensor from_rows(const std::vector<std::vector<double>>& rows) { return stack_rows(rows); }

}  // namespace

TEST(TopK, HandExamples) {
  const Tensor logits = Tensor::matrix(3, 4, {0.1, 0.9, 0.3, 0.2,   //
                                              0.5, 0.1, 0.2, 0.4,   //
                                              0.1, 0.2, 0.3, 0.4});
  const std::vector<int> labels{1, 3, 0};
  EXPECT_DOUBLE_EQ(topk_accuracy(logits, labels, 1), 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(topk_accuracy(logits, labels, 2), 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(topk_accuracy(logits, labels, 4), 1.0);
}

TEST(TopK, RandomLogitsOverTwoClassesGiveOneHalf) {
  Rng rng(8);
  const std::size_t n = 4000;
  std::vector<double> v(2 * n);
  for (double& x : v) x = rng.normal();
  std::vector<int> labels(n);
  for (int& l : labels) l = static_cast<int>(rng.below(2));
  // Binomial standard error is 0.0079 at n = 4000.
  EXPECT_NEAR(topk_accuracy(Tensor::matrix(n, 2, v), labels, 1), 0.5, 0.05);
}

TEST(TopK, MonotoneInK) {
  Rng rng(9);
  std::vector<double> v(50 * 10);
  for (double& x : v) x = rng.normal();
  std::vector<int> labels(50);
  for (int& l : labels) l = static_cast<int>(rng.below(10));
  const Tensor logits = Tensor::matrix(50, 10, v);
  double prev = 0.0;
  for (int k = 1; k <= 10; ++k) {
    const double acc = topk_accuracy(logits, labels, k);
    EXPECT_GE(acc, prev);
    prev = acc;
  }
  EXPECT_DOUBLE_EQ(prev, 1.0);
}

TEST(TopK, TiesFavourLowerClassId) {
  const Tensor logits = Tensor::matrix(1, 3, {0.5, 0.5, 0.5});
  EXPECT_DOUBLE_EQ(topk_accuracy(logits, std::vector<int>{0}, 1), 1.0);
  EXPECT_DOUBLE_EQ(topk_accuracy(logits, std::vector<int>{1}, 1), 0.0);
  EXPECT_DOUBLE_EQ(topk_accuracy(logits, std::vector<int>{2}, 2), 0.0);
  EXPECT_DOUBLE_EQ(topk_accuracy(logits, std::vector<int>{2}, 3), 1.0);
  EXPECT_EQ(argmax(std::vector<double>{1, 3, 3}), 1);
}

TEST(TopK, RejectsBadInputs) {
  const Tensor logits = Tensor::matrix(1, 3, {1, 2, 3});
  EXPECT_THROW(topk_accuracy(logits, std::vector<int>{}, 1), Error);
  EXPECT_THROW(topk_accuracy(logits, std::vector<int>{0}, 0), Error);
  EXPECT_THROW(topk_accuracy(logits, std::vector<int>{0}, 4), Error);
  EXPECT_THROW(topk_accuracy(logits, std::vector<int>{5}, 1), Error);
  EXPECT_THROW(topk_accuracy(logits, std::vector<int>{0, 1}, 1), ShapeError);
}

TEST(Score, UniformPredictionsScoreOne) {
  EXPECT_NEAR(inception_score(Tensor(Shape{6, 5}, 0.2)), 1.0, 1e-12);
}

TEST(Score, ConfidentBalancedPredictionsScoreClassCount) {
  std::vector<std::vector<double>> rows;
  for (int r = 0; r < 8; ++r) {
    std::vector<double> p(4, 0.0);
    p[static_cast<std::size_t>(r % 4)] = 1.0;
    rows.push_back(p);
  }
  EXPECT_NEAR(inception_score(from_rows(rows)), 4.0, 1e-12);
}

TEST(Score, MatchesBruteForce) {
  Rng rng(10);
  std::vector<std::vector<double>> rows;
  for (int r = 0; r < 12; ++r) {
    std::vector<double> p(5);
    for (double& x : p) x = std::exp(rng.normal());
    const double s = std::accumulate(p.begin(), p.end(), 0.0);
    for (double& x : p) x /= s;
    rows.push_back(p);
  }
  const double score = inception_score(from_rows(rows));
  EXPECT_NEAR(score, brute_force_score(rows), 1e-12);
  EXPECT_GE(score, 1.0);
  EXPECT_LE(score, 5.0);
  std::reverse(rows.begin(), rows.end());
  EXPECT_NEAR(inception_score(from_rows(rows)), score, 1e-12);
}

TEST(Score, RejectsNonMatrix) { EXPECT_THROW(inception_score(Tensor(Shape{4})), ShapeError); }
