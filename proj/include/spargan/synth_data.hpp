// Synthetic multimodal world: per-class caption prototypes and a hidden
// renderer from captions to images, plus base/novel and n-shot splits.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "spargan/autodiff.hpp"
#include "spargan/optim.hpp"
#include "spargan/rng.hpp"
#include "spargan/tensor.hpp"

namespace spargan {

struct WorldConfig {
  std::uint64_t seed = 1;
  int num_base_classes = 40;
  int num_novel_classes = 10;
  int caption_dim = 16;
  int image_dim = 64;
  int captions_per_image = 10;
  double caption_noise = 0.3;
  double image_noise = 0.05;
  int samples_per_base_class = 30;
  int samples_per_novel_train = 20;
  int samples_per_novel_test = 20;

  int num_classes() const { return num_base_classes + num_novel_classes; }
  bool is_novel(int label) const { return label >= num_base_classes && label < num_classes(); }

  bool operator==(const WorldConfig&) const = default;
};

inline void validate(const WorldConfig& c) {
  auto positive = [](const char* field, int v) {
    if (v <= 0) throw ConfigError(std::string("world.") + field, "must be positive");
  };
  positive("num_base_classes", c.num_base_classes);
  positive("num_novel_classes", c.num_novel_classes);
  positive("caption_dim", c.caption_dim);
  positive("image_dim", c.image_dim);
  positive("captions_per_image", c.captions_per_image);
  positive("samples_per_base_class", c.samples_per_base_class);
  positive("samples_per_novel_train", c.samples_per_novel_train);
  positive("samples_per_novel_test", c.samples_per_novel_test);
  if (!(c.caption_noise >= 0.0)) throw ConfigError("world.caption_noise", "must be >= 0");
  if (!(c.image_noise >= 0.0)) throw ConfigError("world.image_noise", "must be >= 0");
}

struct Sample {
  std::uint64_t id = 0;
  int label = 0;
  std::vector<double> image;
  std::vector<std::vector<double>> captions;

  bool operator==(const Sample&) const = default;
};

struct World {
  WorldConfig config;
  std::vector<std::vector<double>> prototypes;  // indexed by class id
  Tensor render_hidden;                         // [caption_dim, 2 * image_dim]
  Tensor render_out;                            // [2 * image_dim, image_dim]

  // Noise-free renderer R(t) = tanh(tanh(t W1) W2), applied row-wise.
  Tensor render(const Tensor& captions) const {
    Tape tape;
    const NodeId t = tape.constant(captions);
    const NodeId h = tape.tanh(tape.matmul(t, tape.constant(render_hidden)));
    const NodeId y = tape.tanh(tape.matmul(h, tape.constant(render_out)));
    return tape.value(y);
  }

  std::vector<double> render(std::span<const double> caption) const {
    const Tensor out = render(Tensor::row(caption));
    return out.storage();
  }

  bool operator==(const World&) const = default;
};

namespace detail {

inline Rng class_stream(std::uint64_t seed, std::string_view tag, int class_id) {
  return Rng(mix_seed(seed, hash_tag(tag)), static_cast<std::uint64_t>(class_id));
}

}  // namespace detail

inline World make_world(const WorldConfig& config) {
  validate(config);
  World w;
  w.config = config;
  const auto dt = static_cast<std::size_t>(config.caption_dim);
  const auto di = static_cast<std::size_t>(config.image_dim);
  w.prototypes.reserve(static_cast<std::size_t>(config.num_classes()));
  for (int c = 0; c < config.num_classes(); ++c) {
    Rng rng = detail::class_stream(config.seed, "prototype", c);
    std::vector<double> p(dt);
    for (double& v : p) v = rng.normal();
    w.prototypes.push_back(std::move(p));
  }
  Rng rng(config.seed, "renderer");
  w.render_hidden = random_normal_fan_in(Shape{dt, 2 * di}, rng);
  w.render_out = random_normal_fan_in(Shape{2 * di, di}, rng);
  return w;
}

// Draws `count` samples of class `label` from the given stream tag.
// Caption k is p_c + sigma_t * eps; the image renders caption 0 and adds
// sigma_i noise, clamped to [-1, 1].
inline std::vector<Sample> draw_class_samples(const World& world, int label, int count,
                                              std::string_view tag) {
  const WorldConfig& cfg = world.config;
  Rng rng = detail::class_stream(cfg.seed, tag, label);
  const auto& proto = world.prototypes.at(static_cast<std::size_t>(label));
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int s = 0; s < count; ++s) {
    Sample sample;
    sample.label = label;
    for (int k = 0; k < cfg.captions_per_image; ++k) {
      std::vector<double> t(proto.size());
      for (std::size_t j = 0; j < t.size(); ++j) t[j] = proto[j] + cfg.caption_noise * rng.normal();
      sample.captions.push_back(std::move(t));
    }
    sample.image = world.render(sample.captions.front());
    for (double& x : sample.image) x = std::clamp(x + cfg.image_noise * rng.normal(), -1.0, 1.0);
    out.push_back(std::move(sample));
  }
  return out;
}

struct DatasetSplit {
  WorldConfig config;
  std::vector<Sample> base_train;
  std::vector<Sample> novel_train;
  std::vector<Sample> test;  // novel classes only
  std::optional<int> n_shot;

  bool operator==(const DatasetSplit&) const = default;
};

inline DatasetSplit sample_dataset(const World& world) {
  const WorldConfig& cfg = world.config;
  DatasetSplit split;
  split.config = cfg;
  std::uint64_t next_id = 0;
  auto append = [&](std::vector<Sample>& dst, int label, int count, std::string_view tag) {
    for (auto& s : draw_class_samples(world, label, count, tag)) {
      s.id = next_id++;
      dst.push_back(std::move(s));
    }
  };
  for (int c = 0; c < cfg.num_base_classes; ++c) {
    append(split.base_train, c, cfg.samples_per_base_class, "base-train");
  }
  for (int c = cfg.num_base_classes; c < cfg.num_classes(); ++c) {
    append(split.novel_train, c, cfg.samples_per_novel_train, "novel-train");
  }
  for (int c = cfg.num_base_classes; c < cfg.num_classes(); ++c) {
    append(split.test, c, cfg.samples_per_novel_test, "novel-test");
  }
  return split;
}

// Fresh samples outside every split, for held-out checks. Ids start at
// `first_id`.
inline std::vector<Sample> sample_heldout(const World& world, int first_class, int last_class,
                                          int per_class, std::string_view tag,
                                          std::uint64_t first_id) {
  std::vector<Sample> out;
  for (int c = first_class; c < last_class; ++c) {
    for (auto& s : draw_class_samples(world, c, per_class, tag)) {
      s.id = first_id++;
      out.push_back(std::move(s));
    }
  }
  return out;
}

// Keeps exactly n samples per novel class, in their original order.
inline DatasetSplit nshot_view(const DatasetSplit& split, int n, std::uint64_t seed) {
  const WorldConfig& cfg = split.config;
  if (n < 1 || n > cfg.samples_per_novel_train) {
    throw Error("nshot_view: n=" + std::to_string(n) + " outside [1, " +
                std::to_string(cfg.samples_per_novel_train) + "]");
  }
  DatasetSplit out = split;
  out.novel_train.clear();
  out.n_shot = n;
  for (int c = cfg.num_base_classes; c < cfg.num_classes(); ++c) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < split.novel_train.size(); ++i) {
      if (split.novel_train[i].label == c) members.push_back(i);
    }
    if (members.size() < static_cast<std::size_t>(n)) {
      throw Error("nshot_view: class " + std::to_string(c) + " has only " +
                  std::to_string(members.size()) + " samples");
    }
    Rng rng = detail::class_stream(seed, "nshot", c);
    std::vector<std::size_t> order = members;
    rng.shuffle(order);
    order.resize(static_cast<std::size_t>(n));
    std::sort(order.begin(), order.end());
    for (std::size_t i : order) out.novel_train.push_back(split.novel_train[i]);
  }
  return out;
}

}  // namespace spargan
