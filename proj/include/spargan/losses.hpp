// Cross-entropy losses composed from tape primitives.
#pragma once

#include <span>
#include <string>
#include <vector>

#include "spargan/autodiff.hpp"

namespace spargan {

inline constexpr double kProbabilityClamp = 1e-7;

// sum_r weight_r * -log softmax(logits)[r, label_r], scaled by `scale`.
// Rows with zero weight contribute nothing (their labels are not checked).
inline NodeId weighted_cross_entropy(Tape& tape, NodeId logits, std::span<const int> labels,
                                     std::span<const double> weights, double scale) {
  const Tensor& z = tape.value(logits);
  if (z.rank() != 2 || labels.size() != z.rows() || weights.size() != z.rows()) {
    throw ShapeError("cross_entropy: logits " + shape_string(z.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t classes = z.cols();
  Tensor mask(z.shape(), 0.0);
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (weights[r] == 0.0) continue;
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= classes) {
      throw Error("cross_entropy: label " + std::to_string(labels[r]) + " outside [0, " +
                  std::to_string(classes) + ")");
    }
    mask.at(r, static_cast<std::size_t>(labels[r])) = weights[r];
  }
  const NodeId picked = tape.mul(tape.log_softmax(logits), tape.constant(std::move(mask)));
  return tape.affine(tape.sum(picked), -scale);
}

// Mean softmax cross-entropy of a [batch, classes] logit matrix.
inline NodeId softmax_cross_entropy(Tape& tape, NodeId logits, std::span<const int> labels) {
  if (labels.empty()) throw Error("cross_entropy: empty batch");
  const std::vector<double> ones(labels.size(), 1.0);
  return weighted_cross_entropy(tape, logits, labels, ones,
                                1.0 / static_cast<double>(labels.size()));
}

// sum_r weight_r * -[t_r log p_r + (1 - t_r) log(1 - p_r)], scaled by `scale`.
// Probabilities are clamped to [eps, 1 - eps] first.
inline NodeId weighted_binary_cross_entropy(Tape& tape, NodeId prob,
                                            std::span<const double> targets,
                                            std::span<const double> weights, double scale) {
  const Tensor& p = tape.value(prob);
  if (p.size() != targets.size() || weights.size() != targets.size()) {
    throw ShapeError("binary_cross_entropy: probabilities " + shape_string(p.shape()) + " vs " +
                     std::to_string(targets.size()) + " targets");
  }
  Tensor pos(p.shape()), neg(p.shape());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    pos[i] = weights[i] * targets[i];
    neg[i] = weights[i] * (1.0 - targets[i]);
  }
  const NodeId clamped = tape.clamp(prob, kProbabilityClamp, 1.0 - kProbabilityClamp);
  const NodeId log_p = tape.log(clamped);
  const NodeId log_q = tape.log(tape.affine(clamped, -1.0, 1.0));
  const NodeId total = tape.add(tape.mul(log_p, tape.constant(std::move(pos))),
                                tape.mul(log_q, tape.constant(std::move(neg))));
  return tape.affine(tape.sum(total), -scale);
}

inline NodeId binary_cross_entropy(Tape& tape, NodeId prob, std::span<const double> targets) {
  if (targets.empty()) throw Error("binary_cross_entropy: empty batch");
  const std::vector<double> ones(targets.size(), 1.0);
  return weighted_binary_cross_entropy(tape, prob, targets, ones,
                                       1.0 / static_cast<double>(targets.size()));
}

// Same target for every element.
inline NodeId binary_cross_entropy(Tape& tape, NodeId prob, double target) {
  const std::vector<double> targets(tape.value(prob).size(), target);
  return binary_cross_entropy(tape, prob, targets);
}

}  // namespace spargan
