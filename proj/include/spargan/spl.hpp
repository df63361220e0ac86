// Discriminator adaptation to novel classes and the self-paced adversarial
// loop: generate candidates per novel class, rank them by the adapted
// discriminator's class confidence, keep the top K, and retrain on the
// union of real and selected generated samples.
#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "spargan/losses.hpp"
#include "spargan/metrics.hpp"
#include "spargan/optim.hpp"
#include "spargan/tcgan.hpp"

namespace spargan {

struct SplConfig {
  int iterations = 30;
  int k = 1;
  int epochs_per_iteration = 10;
  int init_epochs = 20;
  double sgd_rate = 1e-3;
  double sgd_momentum = 0.5;
  int batch_size = 32;
  double g_rate = 2e-5;
  double class_weight = 1.0;
  int candidates_per_caption = 3;
  bool update_g = false;

  bool operator==(const SplConfig&) const = default;
};

inline void validate(const SplConfig& c) {
  if (c.iterations < 1) throw ConfigError("spl.iterations", "must be >= 1");
  if (c.k < 1) throw ConfigError("spl.k", "must be >= 1");
  if (c.epochs_per_iteration < 0) throw ConfigError("spl.epochs_per_iteration", "must be >= 0");
  if (c.init_epochs < 0) throw ConfigError("spl.init_epochs", "must be >= 0");
  if (!(c.sgd_rate > 0.0)) throw ConfigError("spl.sgd_rate", "must be positive");
  if (!(c.sgd_momentum >= 0.0 && c.sgd_momentum < 1.0)) {
    throw ConfigError("spl.sgd_momentum", "must lie in [0, 1)");
  }
  if (c.batch_size < 1) throw ConfigError("spl.batch_size", "must be positive");
  if (!(c.g_rate > 0.0)) throw ConfigError("spl.g_rate", "must be positive");
  if (!(c.class_weight >= 0.0)) throw ConfigError("spl.class_weight", "must be >= 0");
  if (c.candidates_per_caption < 1) throw ConfigError("spl.candidates_per_caption", "must be >= 1");
}

// A discriminator whose class head covers [first_class, first_class + C).
// Without captions the caption input is fed zeros, which turns the network
// into an image-only classifier.
struct AdaptedDiscriminator {
  Discriminator net;
  int first_class = 0;
  bool use_captions = true;

  int num_classes() const { return net.num_classes; }
  int local_label(int label) const {
    const int local = label - first_class;
    if (local < 0 || local >= net.num_classes) {
      throw Error("adapted discriminator: label " + std::to_string(label) + " outside head");
    }
    return local;
  }
};

// Copies trunk and source head; the class head is replaced by a fresh
// [f, num_novel] layer with N(0, 1/f) weights. Optimizer slots start empty.
inline AdaptedDiscriminator adapt_discriminator(const Discriminator& d, int num_novel,
                                                int first_class, std::uint64_t seed,
                                                bool use_captions = true) {
  if (num_novel < 2) throw Error("adapt_discriminator: need at least 2 novel classes");
  Rng rng(seed, "adapt-head");
  const auto f = static_cast<std::size_t>(d.feature_dim);
  const auto c = static_cast<std::size_t>(num_novel);
  AdaptedDiscriminator out;
  out.net = d;
  out.net.num_classes = num_novel;
  out.first_class = first_class;
  out.use_captions = use_captions;
  out.net.params = ParamSet{};
  for (const auto& p : d.params.entries()) {
    if (p.name == "disc.cls.w") {
      out.net.params.add(p.name, random_normal(Shape{f, c}, 1.0 / std::sqrt(static_cast<double>(f)), rng));
    } else if (p.name == "disc.cls.b") {
      out.net.params.add(p.name, Tensor(Shape{c}, 0.0));
    } else {
      out.net.params.add(p.name, p.value);
    }
  }
  return out;
}

// A training example for D': one image with the captions it may be paired with.
struct PoolItem {
  std::vector<double> image;
  std::vector<std::vector<double>> captions;
  int label = 0;
  bool generated = false;

  bool operator==(const PoolItem&) const = default;
};

inline PoolItem to_pool_item(const Sample& s) { return {s.image, s.captions, s.label, false}; }

namespace detail {

inline Tensor caption_rows(const AdaptedDiscriminator& d,
                           const std::vector<std::span<const double>>& captions) {
  if (d.use_captions) return stack_rows(captions);
  return Tensor(Shape{captions.size(), static_cast<std::size_t>(d.net.caption_dim)}, 0.0);
}

}  // namespace detail

// Class-head logits for (image, caption) rows.
inline Tensor adapted_logits(const AdaptedDiscriminator& d,
                             const std::vector<std::span<const double>>& images,
                             const std::vector<std::span<const double>>& captions) {
  return discriminator_forward(d.net, stack_rows(images), detail::caption_rows(d, captions))
      .class_logits;
}

// Logits for evaluation samples paired with their first caption.
inline Tensor adapted_logits(const AdaptedDiscriminator& d, std::span<const Sample> samples) {
  std::vector<std::span<const double>> images, captions;
  for (const Sample& s : samples) {
    images.emplace_back(s.image);
    captions.emplace_back(s.captions.front());
  }
  return adapted_logits(d, images, captions);
}

struct Accuracy {
  double top1 = 0.0;
  double top3 = 0.0;
  double top5 = 0.0;
};

inline Accuracy evaluate(const AdaptedDiscriminator& d, std::span<const Sample> samples) {
  const Tensor logits = adapted_logits(d, samples);
  std::vector<int> labels;
  for (const Sample& s : samples) labels.push_back(d.local_label(s.label));
  const int classes = d.num_classes();
  return {topk_accuracy(logits, labels, 1), topk_accuracy(logits, labels, std::min(3, classes)),
          topk_accuracy(logits, labels, std::min(5, classes))};
}

// One SGD-with-momentum cross-entropy step of D' on pool[indices], each item
// paired with a random one of its captions. Returns the batch loss.
inline double classifier_sgd_step(AdaptedDiscriminator& d, std::span<const PoolItem> pool,
                                  std::span<const std::size_t> indices, const SplConfig& cfg,
                                  Rng& rng, std::vector<std::span<const double>>* captions_out = nullptr) {
  std::vector<std::span<const double>> images, captions;
  std::vector<int> labels;
  for (std::size_t i : indices) {
    const PoolItem& item = pool[i];
    images.emplace_back(item.image);
    captions.emplace_back(item.captions[rng.below(item.captions.size())]);
    labels.push_back(d.local_label(item.label));
  }
  Tape tape;
  const Bindings p = d.net.params.bind(tape, true);
  const auto out = d.net.graph(tape, p, tape.constant(stack_rows(images)),
                               tape.constant(detail::caption_rows(d, captions)));
  const NodeId loss = softmax_cross_entropy(tape, out.class_logits, labels);
  sgd_momentum_step(d.net.params, tape.backward(loss), cfg.sgd_rate, cfg.sgd_momentum);
  if (captions_out) *captions_out = std::move(captions);
  return tape.value(loss).item();
}

inline std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);
  return order;
}

// Cross-entropy finetuning on real samples only; the "Initialization" model.
inline void init_finetune(AdaptedDiscriminator& d, std::span<const Sample> pool,
                          const SplConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  std::vector<int> per_class(static_cast<std::size_t>(d.num_classes()), 0);
  for (const Sample& s : pool) ++per_class[static_cast<std::size_t>(d.local_label(s.label))];
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    if (per_class[c] == 0) {
      throw Error("init_finetune: class " + std::to_string(d.first_class + static_cast<int>(c)) +
                  " has no samples");
    }
  }
  std::vector<PoolItem> items;
  for (const Sample& s : pool) items.push_back(to_pool_item(s));
  Rng rng(seed, "init-finetune");
  const auto batch = static_cast<std::size_t>(cfg.batch_size);
  for (int epoch = 0; epoch < cfg.init_epochs; ++epoch) {
    const auto order = shuffled_indices(items.size(), rng);
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      classifier_sgd_step(d, items, std::span(order).subspan(start, end - start), cfg, rng);
    }
  }
}

struct Candidate {
  std::size_t index = 0;  // position in generation order
  int label = 0;
  std::size_t caption_id = 0;
  std::vector<double> caption;
  std::vector<double> image;
  double score = 0.0;

  bool operator==(const Candidate&) const = default;
};

// One image per (caption, noise draw), labelled with the conditioning class.
inline std::vector<Candidate> generate_candidates(const Generator& g, int label,
                                                  std::span<const std::vector<double>> captions,
                                                  int per_caption, std::uint64_t seed) {
  if (captions.empty()) throw Error("generate_candidates: no captions for class " + std::to_string(label));
  if (per_caption < 1) throw Error("generate_candidates: per_caption must be >= 1");
  Rng rng(mix_seed(seed, hash_tag("candidates")), static_cast<std::uint64_t>(label));
  std::vector<std::span<const double>> rows;
  std::vector<std::size_t> ids;
  for (std::size_t c = 0; c < captions.size(); ++c) {
    for (int r = 0; r < per_caption; ++r) {
      rows.emplace_back(captions[c]);
      ids.push_back(c);
    }
  }
  const Tensor images =
      generator_forward(g, stack_rows(rows), noise_matrix(rows.size(), g.noise_dim, rng));
  std::vector<Candidate> out;
  out.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto img = images.row_view(i);
    out.push_back(Candidate{i, label, ids[i], captions[ids[i]], {img.begin(), img.end()}, 0.0});
  }
  return out;
}

// Softmax probability of each candidate's own label under D', with the
// candidate's source caption.
inline std::vector<double> score_candidates(const AdaptedDiscriminator& d,
                                            std::span<const Candidate> candidates) {
  if (candidates.empty()) return {};
  std::vector<std::span<const double>> images, captions;
  for (const Candidate& c : candidates) {
    images.emplace_back(c.image);
    captions.emplace_back(c.caption);
  }
  const Tensor logits = adapted_logits(d, images, captions);
  std::vector<double> scores;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto row = logits.row_view(i);
    const double mx = *std::max_element(row.begin(), row.end());
    double total = 0.0;
    for (double z : row) total += std::exp(z - mx);
    scores.push_back(std::exp(row[static_cast<std::size_t>(d.local_label(candidates[i].label))] - mx) / total);
  }
  return scores;
}

// Positions sorted by descending score; equal scores keep ascending position.
inline std::vector<std::size_t> ranking_order(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

inline std::vector<Candidate> rank_candidates(const AdaptedDiscriminator& d,
                                              std::vector<Candidate> candidates) {
  for (const Candidate& c : candidates) {
    if (c.label != candidates.front().label) {
      throw Error("rank_candidates: mixed classes " + std::to_string(candidates.front().label) +
                  " and " + std::to_string(c.label));
    }
  }
  const std::vector<double> scores = score_candidates(d, candidates);
  for (std::size_t i = 0; i < candidates.size(); ++i) candidates[i].score = scores[i];
  std::vector<Candidate> ranked;
  ranked.reserve(candidates.size());
  for (std::size_t i : ranking_order(scores)) ranked.push_back(std::move(candidates[i]));
  return ranked;
}

// Hard self-paced selector: alpha = 1 for the first K ranked candidates.
inline std::vector<Candidate> select_top_k(std::span<const Candidate> ranked, int k) {
  if (k < 0 || static_cast<std::size_t>(k) > ranked.size()) {
    throw Error("select_top_k: K=" + std::to_string(k) + " exceeds " +
                std::to_string(ranked.size()) + " candidates");
  }
  return {ranked.begin(), ranked.begin() + k};
}

struct IterationMetrics {
  int iteration = 0;
  double top1 = 0.0;
  double top5 = 0.0;

  bool operator==(const IterationMetrics&) const = default;
};

struct SplState {
  AdaptedDiscriminator discriminator;
  Generator generator;
  std::vector<Sample> real_pool;
  std::vector<PoolItem> generated_pool;
  int iteration = 0;
  std::vector<IterationMetrics> metrics;
  // Ranked candidates per novel class from the first iteration.
  std::vector<std::vector<Candidate>> first_ranked;
};

inline SplState make_spl_state(AdaptedDiscriminator d, Generator g, std::vector<Sample> real_pool) {
  SplState s;
  s.discriminator = std::move(d);
  s.generator = std::move(g);
  s.real_pool = std::move(real_pool);
  return s;
}

// All captions of the real samples of class `label`, in pool order.
inline std::vector<std::vector<double>> class_captions(std::span<const Sample> pool, int label) {
  std::vector<std::vector<double>> out;
  for (const Sample& s : pool) {
    if (s.label == label) out.insert(out.end(), s.captions.begin(), s.captions.end());
  }
  return out;
}

// One pass of the self-paced loop: select K generated samples per novel
// class, then train on real and generated samples, updating G too when
// configured. Test accuracy after the update is appended to the metrics.
inline void spl_iteration(SplState& state, const SplConfig& cfg, std::span<const Sample> test,
                          std::uint64_t seed) {
  validate(cfg);
  AdaptedDiscriminator& d = state.discriminator;
  const std::uint64_t iter_seed = mix_seed(seed, static_cast<std::uint64_t>(state.iteration));
  const bool first = state.iteration == 0;
  for (int c = d.first_class; c < d.first_class + d.num_classes(); ++c) {
    const auto captions = class_captions(state.real_pool, c);
    auto ranked = rank_candidates(
        d, generate_candidates(state.generator, c, captions, cfg.candidates_per_caption, iter_seed));
    for (Candidate& chosen : select_top_k(ranked, cfg.k)) {
      state.generated_pool.push_back(PoolItem{std::move(chosen.image), {std::move(chosen.caption)}, c, true});
    }
    if (first) state.first_ranked.push_back(std::move(ranked));
  }

  std::vector<PoolItem> all;
  all.reserve(state.real_pool.size() + state.generated_pool.size());
  for (const Sample& s : state.real_pool) all.push_back(to_pool_item(s));
  all.insert(all.end(), state.generated_pool.begin(), state.generated_pool.end());

  Rng rng(iter_seed, "spl-train");
  const LossWeights g_weights{0.0, cfg.class_weight};
  const AdamSettings g_adam{.rate = cfg.g_rate};
  const auto batch = static_cast<std::size_t>(cfg.batch_size);
  for (int epoch = 0; epoch < cfg.epochs_per_iteration; ++epoch) {
    const auto order = shuffled_indices(all.size(), rng);
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      const auto idx = std::span(order).subspan(start, end - start);
      std::vector<std::span<const double>> captions;
      classifier_sgd_step(d, all, idx, cfg, rng, &captions);
      if (cfg.update_g) {
        GanBatch gb;
        gb.captions = stack_rows(captions);
        gb.noise = noise_matrix(idx.size(), state.generator.noise_dim, rng);
        for (std::size_t i : idx) gb.labels.push_back(d.local_label(all[i].label));
        generator_step(state.generator, d.net, gb, g_weights, g_adam);
      }
    }
  }

  ++state.iteration;
  const Accuracy acc = evaluate(d, test);
  state.metrics.push_back({state.iteration, acc.top1, acc.top5});
}

inline std::vector<IterationMetrics> run_spl(SplState& state, const SplConfig& cfg,
                                             std::span<const Sample> test, std::uint64_t seed) {
  validate(cfg);
  for (int i = 0; i < cfg.iterations; ++i) spl_iteration(state, cfg, test, seed);
  return state.metrics;
}

}  // namespace spargan
