// Shared oracles and fixtures for the test suites.
#pragma once

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "spargan/autodiff.hpp"
#include "spargan/evaluation.hpp"
#include "spargan/losses.hpp"
#include "spargan/optim.hpp"
#include "spargan/rng.hpp"
#include "spargan/synth_data.hpp"
#include "spargan/tcgan.hpp"

namespace spargan::testing {

// Gradients below this magnitude are compared on an absolute scale.
inline constexpr double kGradientFloor = 1e-6;

inline double relative_error(double analytic, double numeric) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), kGradientFloor});
  return std::abs(analytic - numeric) / scale;
}

struct GradientCheck {
  double max_relative_error = 0.0;
  std::size_t coordinates = 0;
};

// Which side of its kink each leaky_relu / clamp input lies on.
inline std::vector<signed char> kink_pattern(const Tape& tape) {
  std::vector<signed char> out;
  for (NodeId id = 0; id < tape.size(); ++id) {
    const auto& n = tape.node(id);
    if (n.kind != OpKind::LeakyRelu && n.kind != OpKind::Clamp) continue;
    for (double v : tape.value(n.inputs[0]).values()) {
      if (n.kind == OpKind::LeakyRelu) {
        out.push_back(v > 0.0 ? 1 : 0);
      } else {
        out.push_back(v < n.p0 ? 0 : (v > n.p1 ? 2 : 1));
      }
    }
  }
  return out;
}

// Compares tape.backward(loss) with finite differences over every entry of
// every parameter leaf, replaying the recorded tape for each probe. The
// estimate is Richardson-extrapolated central differences over steps h and
// h/2. If a probe moves any leaky_relu / clamp input across its kink, the
// coordinate is redone with a step ten times smaller.
inline GradientCheck check_gradients(Tape& tape, NodeId loss, double h = 1e-4) {
  const NamedTensors analytic = tape.backward(loss);
  const std::vector<signed char> pattern = kink_pattern(tape);
  GradientCheck out;
  for (const auto& [name, grad] : analytic) {
    Tensor base;
    for (NodeId id = 0; id < tape.size(); ++id) {
      if (tape.node(id).kind == OpKind::Param && tape.node(id).name == name) base = tape.value(id);
    }
    for (std::size_t i = 0; i < base.size(); ++i) {
      Tensor probe = base;
      bool smooth = true;
      const auto eval = [&](double x) {
        probe[i] = x;
        tape.forward({{name, probe}});
        if (kink_pattern(tape) != pattern) smooth = false;
        return tape.value(loss).item();
      };
      const auto central = [&](double step) {
        return (eval(base[i] + step) - eval(base[i] - step)) / (2.0 * step);
      };
      double numeric = 0.0;
      for (double step = h; step >= 1e-8; step /= 10.0) {
        smooth = true;
        numeric = (4.0 * central(step / 2.0) - central(step)) / 3.0;
        if (smooth) break;
      }
      out.max_relative_error = std::max(out.max_relative_error, relative_error(grad[i], numeric));
      ++out.coordinates;
    }
    tape.forward({{name, base}});
  }
  return out;
}

// A random multilayer perceptron of 1-3 layers and at most 32 units with a
// randomly chosen activation per layer and a randomly chosen scalar loss.
inline NodeId build_random_network(Tape& tape, Rng& rng, std::string* description = nullptr) {
  const std::size_t batch = 1 + rng.below(4);
  const std::size_t layers = 1 + rng.below(3);
  std::size_t width = 1 + rng.below(32);
  std::ostringstream desc;
  desc << "batch " << batch << " in " << width;
  NodeId x = tape.param("x", random_normal(Shape{batch, width}, 1.0, rng));
  for (std::size_t l = 0; l < layers; ++l) {
    const std::size_t next = (l + 1 == layers) ? 2 + rng.below(8) : 1 + rng.below(32);
    const std::string p = "layer" + std::to_string(l);
    const NodeId w = tape.param(p + ".w", random_normal_fan_in(Shape{width, next}, rng));
    const NodeId b = tape.param(p + ".b", random_normal(Shape{next}, 0.1, rng));
    x = tape.add_bias(tape.matmul(x, w), b);
    if (l + 1 < layers) {
      switch (rng.below(3)) {
        case 0: x = tape.tanh(x); desc << " tanh"; break;
        case 1: x = tape.leaky_relu(x, 0.2); desc << " leaky"; break;
        default: x = tape.sigmoid(x); desc << " sigmoid"; break;
      }
    }
    desc << " -> " << next;
    width = next;
  }
  NodeId loss;
  switch (rng.below(4)) {
    case 0: {
      std::vector<int> labels;
      for (std::size_t r = 0; r < batch; ++r) labels.push_back(static_cast<int>(rng.below(width)));
      loss = softmax_cross_entropy(tape, x, labels);
      desc << " | cross-entropy";
      break;
    }
    case 1: {
      std::vector<double> targets;
      for (std::size_t r = 0; r < batch * width; ++r) targets.push_back(static_cast<double>(rng.below(2)));
      loss = binary_cross_entropy(tape, tape.sigmoid(x), targets);
      desc << " | binary cross-entropy";
      break;
    }
    case 2:
      loss = tape.sum(tape.mul(tape.mean_batch(tape.tanh(x)), tape.mean_batch(x)));
      desc << " | mean-batch product";
      break;
    default:
      loss = tape.sum(tape.mul(tape.softmax(x), tape.log_softmax(x)));
      desc << " | negative entropy";
      break;
  }
  if (description) *description = desc.str();
  return loss;
}

// A world small enough for second-scale training in unit tests.
inline WorldConfig small_world(std::uint64_t seed = 3) {
  WorldConfig c;
  c.seed = seed;
  c.num_base_classes = 8;
  c.num_novel_classes = 4;
  c.caption_dim = 8;
  c.image_dim = 16;
  c.captions_per_image = 4;
  c.samples_per_base_class = 12;
  c.samples_per_novel_train = 6;
  c.samples_per_novel_test = 6;
  return c;
}

inline GanTrainConfig small_gan(int epochs = 20, std::uint64_t seed = 1) {
  GanTrainConfig g;
  g.seed = seed;
  g.epochs = epochs;
  g.hidden = 32;
  g.noise_dim = 4;
  g.feature_dim = 16;
  return g;
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::size_t count_lines(const std::string& text) {
  return static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n'));
}

// A fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("spargan-" + tag + "-" + std::to_string(::getpid()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace spargan::testing
