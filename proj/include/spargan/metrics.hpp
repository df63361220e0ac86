// Classification and generation-quality metrics over plain tensors.
#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "spargan/tensor.hpp"

namespace spargan {

// Position of `label` when classes are sorted by descending logit, ties
// broken by ascending class id.
inline std::size_t label_rank(std::span<const double> logits, int label) {
  const double target = logits[static_cast<std::size_t>(label)];
  std::size_t rank = 0;
  for (std::size_t c = 0; c < logits.size(); ++c) {
    if (logits[c] > target || (logits[c] == target && c < static_cast<std::size_t>(label))) {
      ++rank;
    }
  }
  return rank;
}

// Index of the largest logit, lowest id on ties.
inline int argmax(std::span<const double> logits) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < logits.size(); ++c) {
    if (logits[c] > logits[best]) best = c;
  }
  return static_cast<int>(best);
}

// Fraction of rows whose label is among the k largest logits.
inline double topk_accuracy(const Tensor& logits, std::span<const int> labels, int k) {
  if (labels.empty()) throw Error("topk_accuracy: empty test set");
  if (logits.rank() != 2 || logits.rows() != labels.size()) {
    throw ShapeError("topk_accuracy: logits " + shape_string(logits.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t classes = logits.cols();
  if (k < 1 || static_cast<std::size_t>(k) > classes) {
    throw Error("topk_accuracy: k=" + std::to_string(k) + " outside [1, " +
                std::to_string(classes) + "]");
  }
  std::size_t hits = 0;
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= classes) {
      throw Error("topk_accuracy: label " + std::to_string(labels[r]) + " out of range");
    }
    if (label_rank(logits.row_view(r), labels[r]) < static_cast<std::size_t>(k)) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

// exp(mean_x KL(p(y|x) || p_bar)) for a [images, classes] matrix of
// predictive distributions. Lies in [1, classes].
inline double inception_score(const Tensor& probabilities) {
  if (probabilities.rank() != 2) {
    throw ShapeError("quality_score: expected [images, classes], got " +
                     shape_string(probabilities.shape()));
  }
  const std::size_t n = probabilities.rows();
  const std::size_t classes = probabilities.cols();
  std::vector<double> mean(classes, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < classes; ++c) mean[c] += probabilities.at(r, c);
  }
  for (double& m : mean) m /= static_cast<double>(n);
  double kl_total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < classes; ++c) {
      const double p = probabilities.at(r, c);
      if (p > 0.0) kl_total += p * (std::log(p) - std::log(mean[c]));
    }
  }
  const double score = std::exp(kl_total / static_cast<double>(n));
  return std::clamp(score, 1.0, static_cast<double>(classes));
}

}  // namespace spargan
