// Text-conditioned GAN with an auxiliary classifier head, and the
// representation-learning phase that trains it on base classes.
//
// Generator:      [caption | noise] -> h -> h -> image (tanh)
// Discriminator:  [image | caption] -> h -> h -> f, then
//                 source head f -> 1 (sigmoid) and class head f -> C.
#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "spargan/autodiff.hpp"
#include "spargan/losses.hpp"
#include "spargan/metrics.hpp"
#include "spargan/optim.hpp"
#include "spargan/rng.hpp"
#include "spargan/synth_data.hpp"

namespace spargan {

inline constexpr double kLeakySlope = 0.2;

struct GanTrainConfig {
  std::uint64_t seed = 1;
  int epochs = 300;
  int batch_size = 24;
  double rate = 2e-4;
  double mismatch_weight = 1.0;
  double class_weight = 1.0;
  int hidden = 128;
  int noise_dim = 8;
  int feature_dim = 64;

  bool operator==(const GanTrainConfig&) const = default;
};

inline void validate(const GanTrainConfig& c) {
  if (c.epochs < 0) throw ConfigError("gan.epochs", "must be >= 0");
  if (c.batch_size <= 0) throw ConfigError("gan.batch_size", "must be positive");
  if (!(c.rate > 0.0)) throw ConfigError("gan.rate", "must be positive");
  if (!(c.mismatch_weight >= 0.0)) throw ConfigError("gan.mismatch_weight", "must be >= 0");
  if (!(c.class_weight >= 0.0)) throw ConfigError("gan.class_weight", "must be >= 0");
  if (c.hidden <= 0) throw ConfigError("gan.hidden", "must be positive");
  if (c.noise_dim <= 0) throw ConfigError("gan.noise_dim", "must be positive");
  if (c.feature_dim <= 0) throw ConfigError("gan.feature_dim", "must be positive");
}

using Bindings = std::map<std::string, NodeId>;

namespace detail {

inline void add_dense(ParamSet& set, const std::string& prefix, std::size_t in, std::size_t out,
                      Rng& rng) {
  set.add(prefix + ".w", random_normal_fan_in(Shape{in, out}, rng));
  set.add(prefix + ".b", Tensor(Shape{out}, 0.0));
}

inline NodeId dense(Tape& tape, const Bindings& p, const std::string& prefix, NodeId x) {
  return tape.add_bias(tape.matmul(x, p.at(prefix + ".w")), p.at(prefix + ".b"));
}

inline void expect_width(const Tensor& t, std::size_t width, const char* what) {
  if (t.rank() != 2 || t.cols() != width) {
    throw ShapeError(std::string(what) + ": expected [batch, " + std::to_string(width) +
                     "], got " + shape_string(t.shape()));
  }
}

}  // namespace detail

struct Generator {
  int caption_dim = 0;
  int noise_dim = 0;
  int hidden = 0;
  int image_dim = 0;
  ParamSet params;

  static Generator create(int caption_dim, int noise_dim, int hidden, int image_dim, Rng& rng) {
    Generator g{caption_dim, noise_dim, hidden, image_dim, {}};
    const auto h = static_cast<std::size_t>(hidden);
    detail::add_dense(g.params, "gen.fc1", static_cast<std::size_t>(caption_dim + noise_dim), h, rng);
    detail::add_dense(g.params, "gen.fc2", h, h, rng);
    detail::add_dense(g.params, "gen.out", h, static_cast<std::size_t>(image_dim), rng);
    return g;
  }

  NodeId graph(Tape& tape, const Bindings& p, NodeId captions, NodeId noise) const {
    detail::expect_width(tape.value(captions), static_cast<std::size_t>(caption_dim),
                         "generator caption");
    detail::expect_width(tape.value(noise), static_cast<std::size_t>(noise_dim), "generator noise");
    NodeId x = tape.concat(captions, noise);
    x = tape.leaky_relu(detail::dense(tape, p, "gen.fc1", x), kLeakySlope);
    x = tape.leaky_relu(detail::dense(tape, p, "gen.fc2", x), kLeakySlope);
    return tape.tanh(detail::dense(tape, p, "gen.out", x));
  }
};

struct DiscriminatorNodes {
  NodeId features;
  NodeId source_prob;
  NodeId class_logits;
};

struct Discriminator {
  int image_dim = 0;
  int caption_dim = 0;
  int hidden = 0;
  int feature_dim = 0;
  int num_classes = 0;
  ParamSet params;

  static Discriminator create(int image_dim, int caption_dim, int hidden, int feature_dim,
                              int num_classes, Rng& rng) {
    Discriminator d{image_dim, caption_dim, hidden, feature_dim, num_classes, {}};
    const auto h = static_cast<std::size_t>(hidden);
    const auto f = static_cast<std::size_t>(feature_dim);
    detail::add_dense(d.params, "disc.fc1", static_cast<std::size_t>(image_dim + caption_dim), h,
                      rng);
    detail::add_dense(d.params, "disc.fc2", h, h, rng);
    detail::add_dense(d.params, "disc.feat", h, f, rng);
    detail::add_dense(d.params, "disc.src", f, 1, rng);
    detail::add_dense(d.params, "disc.cls", f, static_cast<std::size_t>(num_classes), rng);
    return d;
  }

  DiscriminatorNodes graph(Tape& tape, const Bindings& p, NodeId images, NodeId captions) const {
    detail::expect_width(tape.value(images), static_cast<std::size_t>(image_dim),
                         "discriminator image");
    detail::expect_width(tape.value(captions), static_cast<std::size_t>(caption_dim),
                         "discriminator caption");
    NodeId x = tape.concat(images, captions);
    x = tape.leaky_relu(detail::dense(tape, p, "disc.fc1", x), kLeakySlope);
    x = tape.leaky_relu(detail::dense(tape, p, "disc.fc2", x), kLeakySlope);
    const NodeId features =
        tape.leaky_relu(detail::dense(tape, p, "disc.feat", x), kLeakySlope);
    const NodeId source = tape.sigmoid(detail::dense(tape, p, "disc.src", features));
    const NodeId logits = detail::dense(tape, p, "disc.cls", features);
    return {features, source, logits};
  }
};

inline bool is_class_head(const std::string& name) { return name.rfind("disc.cls.", 0) == 0; }

// Images for a batch of captions and noise rows.
inline Tensor generator_forward(const Generator& g, const Tensor& captions, const Tensor& noise) {
  Tape tape;
  const Bindings p = g.params.bind(tape, false);
  return tape.value(g.graph(tape, p, tape.constant(captions), tape.constant(noise)));
}

struct DiscriminatorOutput {
  Tensor source_prob;   // [batch, 1]
  Tensor class_logits;  // [batch, classes]
};

inline DiscriminatorOutput discriminator_forward(const Discriminator& d, const Tensor& images,
                                                 const Tensor& captions) {
  Tape tape;
  const Bindings p = d.params.bind(tape, false);
  const auto out = d.graph(tape, p, tape.constant(images), tape.constant(captions));
  return {tape.value(out.source_prob), tape.value(out.class_logits)};
}

// One minibatch for the adversarial objectives. `labels` index the class
// head (class id minus the head's first class id).
struct GanBatch {
  Tensor images;
  Tensor captions;
  Tensor mismatched;
  Tensor noise;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
};

inline Tensor noise_matrix(std::size_t rows, int noise_dim, Rng& rng) {
  return random_normal(Shape{rows, static_cast<std::size_t>(noise_dim)}, 1.0, rng);
}

// Assembles a batch from pool[indices]: a random caption of each sample, a
// random caption of a sample from a different class, and generator noise.
inline GanBatch make_gan_batch(std::span<const Sample> pool, std::span<const std::size_t> indices,
                               int first_class, int noise_dim, Rng& rng) {
  if (indices.empty()) throw Error("gan batch: empty");
  std::vector<std::span<const double>> images, captions, mismatched;
  GanBatch batch;
  for (std::size_t i : indices) {
    const Sample& s = pool[i];
    images.emplace_back(s.image);
    captions.emplace_back(s.captions[rng.below(s.captions.size())]);
    const Sample* other = &pool[rng.below(pool.size())];
    for (int tries = 0; other->label == s.label && tries < 64; ++tries) {
      other = &pool[rng.below(pool.size())];
    }
    mismatched.emplace_back(other->captions[rng.below(other->captions.size())]);
    batch.labels.push_back(s.label - first_class);
  }
  batch.images = stack_rows(images);
  batch.captions = stack_rows(captions);
  batch.mismatched = stack_rows(mismatched);
  batch.noise = noise_matrix(indices.size(), noise_dim, rng);
  return batch;
}

struct LossWeights {
  double mismatch = 1.0;
  double cls = 1.0;
};

// L(D) = BCE(D_s(real, caption), 1) + BCE(D_s(fake, caption), 0)
//      + w_mm * BCE(D_s(real, mismatched), 0) + w_c * CE(class head on real).
// Real, fake and mismatched rows share one stacked pass through D.
inline NodeId discriminator_objective(Tape& tape, const Discriminator& d, const Bindings& dp,
                                      const Tensor& fake, const GanBatch& batch,
                                      const LossWeights& w) {
  const std::size_t n = batch.size();
  if (n == 0) throw Error("loss_discriminator: empty batch");
  const std::size_t di = batch.images.cols();
  const std::size_t dt = batch.captions.cols();
  Tensor images(Shape{3 * n, di});
  Tensor captions(Shape{3 * n, dt});
  auto put = [](Tensor& dst, std::size_t block, const Tensor& src) {
    std::copy(src.values().begin(), src.values().end(), dst.data() + block * src.size());
  };
  put(images, 0, batch.images);
  put(images, 1, fake);
  put(images, 2, batch.images);
  put(captions, 0, batch.captions);
  put(captions, 1, batch.captions);
  put(captions, 2, batch.mismatched);

  const auto out = d.graph(tape, dp, tape.constant(std::move(images)), tape.constant(std::move(captions)));
  std::vector<double> targets(3 * n, 0.0), src_weights(3 * n, 1.0), cls_weights(3 * n, 0.0);
  std::vector<int> labels(3 * n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    targets[i] = 1.0;
    src_weights[2 * n + i] = w.mismatch;
    cls_weights[i] = w.cls;
    labels[i] = batch.labels[i];
  }
  const double scale = 1.0 / static_cast<double>(n);
  const NodeId source = weighted_binary_cross_entropy(tape, out.source_prob, targets, src_weights, scale);
  const NodeId cls = weighted_cross_entropy(tape, out.class_logits, labels, cls_weights, scale);
  return tape.add(source, cls);
}

// L(G) = BCE(D_s(G(caption, z), caption), 1) + w_c * CE(class head on fakes).
// `fake` must be a node of the same tape.
inline NodeId generator_objective(Tape& tape, const Discriminator& d, const Bindings& dp,
                                  NodeId fake, const GanBatch& batch, const LossWeights& w) {
  const std::size_t n = batch.size();
  if (n == 0) throw Error("loss_generator: empty batch");
  const auto out = d.graph(tape, dp, fake, tape.constant(batch.captions));
  const std::vector<double> targets(n, 1.0), src_weights(n, 1.0), cls_weights(n, w.cls);
  const double scale = 1.0 / static_cast<double>(n);
  const NodeId source = weighted_binary_cross_entropy(tape, out.source_prob, targets, src_weights, scale);
  const NodeId cls = weighted_cross_entropy(tape, out.class_logits, batch.labels, cls_weights, scale);
  return tape.add(source, cls);
}

inline double loss_discriminator(const Discriminator& d, const Generator& g, const GanBatch& batch,
                                 const LossWeights& w) {
  if (batch.size() == 0) throw Error("loss_discriminator: empty batch");
  const Tensor fake = generator_forward(g, batch.captions, batch.noise);
  Tape tape;
  const Bindings dp = d.params.bind(tape, false);
  return tape.value(discriminator_objective(tape, d, dp, fake, batch, w)).item();
}

inline double loss_generator(const Discriminator& d, const Generator& g, const GanBatch& batch,
                             const LossWeights& w) {
  if (batch.size() == 0) throw Error("loss_generator: empty batch");
  Tape tape;
  const Bindings gp = g.params.bind(tape, false);
  const Bindings dp = d.params.bind(tape, false);
  const NodeId fake = g.graph(tape, gp, tape.constant(batch.captions), tape.constant(batch.noise));
  return tape.value(generator_objective(tape, d, dp, fake, batch, w)).item();
}

// One Adam step on D's parameters; G is evaluated but frozen. Returns L(D).
inline double discriminator_step(Discriminator& d, const Generator& g, const GanBatch& batch,
                                 const LossWeights& w, const AdamSettings& adam) {
  const Tensor fake = generator_forward(g, batch.captions, batch.noise);
  Tape tape;
  const Bindings dp = d.params.bind(tape, true);
  const NodeId loss = discriminator_objective(tape, d, dp, fake, batch, w);
  adam_step(d.params, tape.backward(loss), adam);
  return tape.value(loss).item();
}

// One Adam step on G's parameters; D is frozen. Returns L(G).
inline double generator_step(Generator& g, const Discriminator& d, const GanBatch& batch,
                             const LossWeights& w, const AdamSettings& adam) {
  Tape tape;
  const Bindings gp = g.params.bind(tape, true);
  const Bindings dp = d.params.bind(tape, false);
  const NodeId fake = g.graph(tape, gp, tape.constant(batch.captions), tape.constant(batch.noise));
  const NodeId loss = generator_objective(tape, d, dp, fake, batch, w);
  adam_step(g.params, tape.backward(loss), adam);
  return tape.value(loss).item();
}

// Class-head logits for samples paired with their first caption.
inline Tensor class_logits(const Discriminator& d, std::span<const Sample> samples) {
  std::vector<std::span<const double>> images, captions;
  for (const Sample& s : samples) {
    images.emplace_back(s.image);
    captions.emplace_back(s.captions.front());
  }
  return discriminator_forward(d, stack_rows(images), stack_rows(captions)).class_logits;
}

// Top-k accuracy of the class head; labels are shifted by `first_class`.
inline double class_head_accuracy(const Discriminator& d, std::span<const Sample> samples,
                                  int first_class, int k = 1) {
  std::vector<int> labels;
  for (const Sample& s : samples) labels.push_back(s.label - first_class);
  return topk_accuracy(class_logits(d, samples), labels, k);
}

struct EpochLog {
  int epoch = 0;
  double loss_d = 0.0;
  double loss_g = 0.0;
  double base_top1 = 0.0;

  bool operator==(const EpochLog&) const = default;
};

// Alternating adversarial training on the base split. Holds a view of the
// base samples, which must outlive the trainer.
class GanTrainer {
 public:
  GanTrainer(std::span<const Sample> base, const WorldConfig& world, const GanTrainConfig& config)
      : base_(base), world_(world), config_(config), rng_(config.seed, "pretrain") {
    validate(config);
    if (base.empty()) throw Error("pretrain: base split is empty");
    Rng init(config.seed, "pretrain-init");
    generator_ = Generator::create(world.caption_dim, config.noise_dim, config.hidden,
                                   world.image_dim, init);
    discriminator_ = Discriminator::create(world.image_dim, world.caption_dim, config.hidden,
                                           config.feature_dim, world.num_base_classes, init);
  }

  // Runs one pass over the shuffled base split: per batch one D step then
  // one G step on the same captions and noise.
  const EpochLog& run_epoch() {
    std::vector<std::size_t> order(base_.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng_.shuffle(order);
    const LossWeights w{config_.mismatch_weight, config_.class_weight};
    const AdamSettings adam{.rate = config_.rate};
    const auto batch_size = static_cast<std::size_t>(config_.batch_size);
    double sum_d = 0.0, sum_g = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      const std::size_t end = std::min(order.size(), start + batch_size);
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      const GanBatch batch = make_gan_batch(base_, idx, 0, config_.noise_dim, rng_);
      sum_d += discriminator_step(discriminator_, generator_, batch, w, adam);
      sum_g += generator_step(generator_, discriminator_, batch, w, adam);
      ++batches;
    }
    EpochLog entry;
    entry.epoch = static_cast<int>(log_.size()) + 1;
    entry.loss_d = sum_d / static_cast<double>(batches);
    entry.loss_g = sum_g / static_cast<double>(batches);
    entry.base_top1 = class_head_accuracy(discriminator_, base_, 0);
    log_.push_back(entry);
    return log_.back();
  }

  void run(int until_epoch) {
    while (epoch() < until_epoch) run_epoch();
  }

  int epoch() const { return static_cast<int>(log_.size()); }
  bool done() const { return epoch() >= config_.epochs; }

  const Generator& generator() const { return generator_; }
  const Discriminator& discriminator() const { return discriminator_; }
  Generator& generator() { return generator_; }
  Discriminator& discriminator() { return discriminator_; }
  const std::vector<EpochLog>& log() const { return log_; }
  const GanTrainConfig& config() const { return config_; }
  const WorldConfig& world() const { return world_; }
  const Rng& rng() const { return rng_; }

  // Replaces the full training state, e.g. from a checkpoint.
  void restore(Generator g, Discriminator d, std::vector<EpochLog> log, const std::string& rng_state) {
    generator_ = std::move(g);
    discriminator_ = std::move(d);
    log_ = std::move(log);
    rng_.restore(rng_state);
  }

 private:
  std::span<const Sample> base_;
  WorldConfig world_;
  GanTrainConfig config_;
  Rng rng_;
  Generator generator_;
  Discriminator discriminator_;
  std::vector<EpochLog> log_;
};

struct PretrainResult {
  Generator generator;
  Discriminator discriminator;
  std::vector<EpochLog> log;
};

inline PretrainResult pretrain_representation(std::span<const Sample> base, const WorldConfig& world,
                                              const GanTrainConfig& config) {
  GanTrainer trainer(base, world, config);
  trainer.run(config.epochs);
  return {trainer.generator(), trainer.discriminator(), trainer.log()};
}

}  // namespace spargan
