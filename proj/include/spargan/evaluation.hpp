// Evaluation battery: the frozen quality oracle, the inception-score analog,
// ranked-chunk analysis and the ablation grid over the four training arms.
#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <exception>
#include <mutex>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "spargan/losses.hpp"
#include "spargan/metrics.hpp"
#include "spargan/optim.hpp"
#include "spargan/spl.hpp"
#include "spargan/synth_data.hpp"
#include "spargan/tcgan.hpp"

namespace spargan {

// ---------------------------------------------------------------------------
// Quality oracle

inline constexpr double kOracleFloor = 0.95;

class OracleError : public Error {
 public:
  explicit OracleError(double achieved)
      : Error("quality oracle reached held-out top-1 " + std::to_string(achieved) + " < " +
              std::to_string(kOracleFloor) + "; review world noise settings"),
        achieved_(achieved) {}
  double achieved() const { return achieved_; }

 private:
  double achieved_;
};

struct OracleConfig {
  int hidden = 128;
  int epochs = 60;
  int batch_size = 32;
  double rate = 1e-3;
  int heldout_per_class = 10;
};

// Image-only MLP classifier over every class of the world.
struct QualityOracle {
  int image_dim = 0;
  int num_classes = 0;
  ParamSet params;
  double heldout_top1 = 0.0;

  Tensor logits(const Tensor& images) const {
    Tape tape;
    const Bindings p = params.bind(tape, false);
    return tape.value(graph(tape, p, tape.constant(images)));
  }

  Tensor probabilities(const Tensor& images) const {
    Tape tape;
    const Bindings p = params.bind(tape, false);
    return tape.value(tape.softmax(graph(tape, p, tape.constant(images))));
  }

  NodeId graph(Tape& tape, const Bindings& p, NodeId images) const {
    detail::expect_width(tape.value(images), static_cast<std::size_t>(image_dim), "oracle image");
    const NodeId h = tape.tanh(detail::dense(tape, p, "oracle.fc1", images));
    return detail::dense(tape, p, "oracle.out", h);
  }
};

inline Tensor image_rows(std::span<const Sample> samples) {
  std::vector<std::span<const double>> rows;
  for (const Sample& s : samples) rows.emplace_back(s.image);
  return stack_rows(rows);
}

// Trains on every sample of the dataset and checks accuracy on fresh
// held-out draws from the world. Throws OracleError below the floor.
inline QualityOracle train_quality_oracle(const World& world, const DatasetSplit& data,
                                          std::uint64_t seed, const OracleConfig& cfg = {}) {
  const WorldConfig& wc = world.config;
  std::vector<Sample> all;
  all.insert(all.end(), data.base_train.begin(), data.base_train.end());
  all.insert(all.end(), data.novel_train.begin(), data.novel_train.end());
  all.insert(all.end(), data.test.begin(), data.test.end());

  Rng rng(seed, "oracle");
  QualityOracle oracle;
  oracle.image_dim = wc.image_dim;
  oracle.num_classes = wc.num_classes();
  detail::add_dense(oracle.params, "oracle.fc1", static_cast<std::size_t>(wc.image_dim),
                    static_cast<std::size_t>(cfg.hidden), rng);
  detail::add_dense(oracle.params, "oracle.out", static_cast<std::size_t>(cfg.hidden),
                    static_cast<std::size_t>(wc.num_classes()), rng);
  const AdamSettings adam{.rate = cfg.rate};
  const auto batch = static_cast<std::size_t>(cfg.batch_size);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = shuffled_indices(all.size(), rng);
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      std::vector<std::span<const double>> rows;
      std::vector<int> labels;
      for (std::size_t k = start; k < end; ++k) {
        rows.emplace_back(all[order[k]].image);
        labels.push_back(all[order[k]].label);
      }
      Tape tape;
      const Bindings p = oracle.params.bind(tape, true);
      const NodeId loss =
          softmax_cross_entropy(tape, oracle.graph(tape, p, tape.constant(stack_rows(rows))), labels);
      adam_step(oracle.params, tape.backward(loss), adam);
    }
  }
  const auto heldout = sample_heldout(world, 0, wc.num_classes(), cfg.heldout_per_class,
                                      "oracle-heldout", 1u << 30);
  std::vector<int> labels;
  for (const Sample& s : heldout) labels.push_back(s.label);
  oracle.heldout_top1 = topk_accuracy(oracle.logits(image_rows(heldout)), labels, 1);
  if (oracle.heldout_top1 < kOracleFloor) throw OracleError(oracle.heldout_top1);
  return oracle;
}

// Inception-score analog: exp(mean KL(p(y|x) || p_bar)) under the oracle.
inline double quality_score(const Tensor& images, const QualityOracle& oracle) {
  if (images.rank() != 2 || images.rows() == 0) throw Error("quality_score: no images");
  return inception_score(oracle.probabilities(images));
}

inline double quality_score(const std::vector<std::span<const double>>& images,
                            const QualityOracle& oracle) {
  if (images.empty()) throw Error("quality_score: no images");
  return quality_score(stack_rows(images), oracle);
}

// ---------------------------------------------------------------------------
// Ranked-chunk analysis

inline constexpr int kChunkCandidates = 30;
inline constexpr int kChunkSize = 3;

struct ChunkReport {
  int chunk = 0;  // 1-based, 1 = highest ranked
  double top1 = 0.0;
  double top5 = 0.0;
  double quality = 0.0;

  bool operator==(const ChunkReport&) const = default;
};

// Splits each class's ranked candidates into consecutive chunks, classifies
// the members of chunk j (pooled over classes) with D' against their
// conditioning labels, and scores their quality with the oracle.
inline std::vector<ChunkReport> chunk_analysis(const std::vector<std::vector<Candidate>>& ranked,
                                               const AdaptedDiscriminator& d,
                                               const QualityOracle& oracle,
                                               int candidates = kChunkCandidates,
                                               int chunk_size = kChunkSize) {
  if (ranked.empty()) throw Error("chunk_analysis: no classes");
  if (chunk_size < 1 || candidates % chunk_size != 0) {
    throw Error("chunk_analysis: chunk size must divide the candidate count");
  }
  for (const auto& cls : ranked) {
    if (cls.size() != static_cast<std::size_t>(candidates)) {
      throw Error("chunk_analysis: expected " + std::to_string(candidates) +
                  " ranked candidates per class, got " + std::to_string(cls.size()));
    }
  }
  const int chunks = candidates / chunk_size;
  std::vector<ChunkReport> out;
  for (int j = 0; j < chunks; ++j) {
    std::vector<std::span<const double>> images, captions;
    std::vector<int> labels;
    for (const auto& cls : ranked) {
      for (int r = j * chunk_size; r < (j + 1) * chunk_size; ++r) {
        const Candidate& c = cls[static_cast<std::size_t>(r)];
        images.emplace_back(c.image);
        captions.emplace_back(c.caption);
        labels.push_back(d.local_label(c.label));
      }
    }
    const Tensor logits = adapted_logits(d, images, captions);
    ChunkReport rep;
    rep.chunk = j + 1;
    rep.top1 = topk_accuracy(logits, labels, 1);
    rep.top5 = topk_accuracy(logits, labels, std::min(5, d.num_classes()));
    rep.quality = quality_score(images, oracle);
    out.push_back(rep);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ablation arms

enum class Arm { Finetuning, Initialization, SplD, SplDG };

inline constexpr Arm kAllArms[] = {Arm::Finetuning, Arm::Initialization, Arm::SplD, Arm::SplDG};

inline std::string arm_name(Arm arm) {
  switch (arm) {
    case Arm::Finetuning: return "Finetuning";
    case Arm::Initialization: return "Initialization";
    case Arm::SplD: return "SPL-D'";
    case Arm::SplDG: return "SPL-D'G";
  }
  return "?";
}

inline Arm parse_arm(const std::string& name) {
  for (Arm a : kAllArms) {
    if (arm_name(a) == name) return a;
  }
  throw ConfigError("arms", "unknown arm '" + name + "'");
}

struct MetricsRecord {
  Arm arm = Arm::Finetuning;
  int n = 1;
  std::uint64_t seed = 0;
  double top1 = 0.0;
  double top3 = 0.0;
  double top5 = 0.0;

  bool operator==(const MetricsRecord&) const = default;
};

// Pretrains the "Finetuning" baseline: a network with D's architecture
// trained from scratch as an image-only classifier on base classes.
inline Discriminator pretrain_baseline_classifier(std::span<const Sample> base,
                                                  const WorldConfig& world,
                                                  const GanTrainConfig& cfg) {
  validate(cfg);
  if (base.empty()) throw Error("baseline classifier: base split is empty");
  Rng rng(cfg.seed, "baseline-classifier");
  Discriminator t = Discriminator::create(world.image_dim, world.caption_dim, cfg.hidden,
                                          cfg.feature_dim, world.num_base_classes, rng);
  const AdamSettings adam{.rate = cfg.rate};
  const auto batch = static_cast<std::size_t>(cfg.batch_size);
  const Tensor zero_caption_row(Shape{1, static_cast<std::size_t>(world.caption_dim)}, 0.0);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = shuffled_indices(base.size(), rng);
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      std::vector<std::span<const double>> rows;
      std::vector<int> labels;
      for (std::size_t k = start; k < end; ++k) {
        rows.emplace_back(base[order[k]].image);
        labels.push_back(base[order[k]].label);
      }
      Tape tape;
      const Bindings p = t.params.bind(tape, true);
      const Tensor captions(Shape{rows.size(), static_cast<std::size_t>(world.caption_dim)}, 0.0);
      const auto out = t.graph(tape, p, tape.constant(stack_rows(rows)), tape.constant(captions));
      adam_step(t.params, tape.backward(softmax_cross_entropy(tape, out.class_logits, labels)), adam);
    }
  }
  return t;
}

// Everything an ablation cell reads; shared read-only across cells.
struct AblationInputs {
  const DatasetSplit* data = nullptr;
  const Generator* generator = nullptr;
  const Discriminator* discriminator = nullptr;
  const Discriminator* baseline = nullptr;
  const QualityOracle* oracle = nullptr;
};

struct CellResult {
  int n = 1;
  std::uint64_t seed = 0;
  std::vector<MetricsRecord> records;  // in requested arm order
  Accuracy initialization;             // post-initialization D' on the test set
  std::vector<IterationMetrics> evolution_d;
  std::vector<IterationMetrics> evolution_dg;
  std::vector<ChunkReport> chunks;  // empty unless every class had 30 candidates
  std::vector<std::size_t> generated_pool_sizes_d;   // after each SPL-D' iteration
  std::vector<std::size_t> generated_pool_sizes_dg;  // after each SPL-D'G iteration
};

namespace detail {

struct CellSeeds {
  std::uint64_t nshot, head, init, spl;
};

inline CellSeeds cell_seeds(std::uint64_t seed, int n) {
  const std::uint64_t base = mix_seed(seed, static_cast<std::uint64_t>(n));
  return {mix_seed(seed, hash_tag("nshot")), mix_seed(base, hash_tag("head")),
          mix_seed(base, hash_tag("init")), mix_seed(base, hash_tag("spl"))};
}

inline bool has_arm(std::span<const Arm> arms, Arm a) {
  return std::find(arms.begin(), arms.end(), a) != arms.end();
}

}  // namespace detail

// Runs the requested arms for one (n, seed) cell. All arms share the same
// n-shot pool and head initialization seed.
inline CellResult run_cell(const AblationInputs& in, std::span<const Arm> arms, int n,
                           std::uint64_t seed, const SplConfig& spl) {
  const DatasetSplit& data = *in.data;
  const WorldConfig& wc = data.config;
  const auto seeds = detail::cell_seeds(seed, n);
  const DatasetSplit view = nshot_view(data, n, seeds.nshot);
  CellResult cell;
  cell.n = n;
  cell.seed = seed;

  auto record = [&](Arm arm, const Accuracy& acc) {
    cell.records.push_back({arm, n, seed, acc.top1, acc.top3, acc.top5});
  };

  std::optional<AdaptedDiscriminator> initialized;
  const bool needs_gan = detail::has_arm(arms, Arm::Initialization) ||
                         detail::has_arm(arms, Arm::SplD) || detail::has_arm(arms, Arm::SplDG);
  if (needs_gan) {
    AdaptedDiscriminator d = adapt_discriminator(*in.discriminator, wc.num_novel_classes,
                                                 wc.num_base_classes, seeds.head);
    init_finetune(d, view.novel_train, spl, seeds.init);
    cell.initialization = evaluate(d, data.test);

    // First-iteration candidates ranked by the initialized D'.
    std::vector<std::vector<Candidate>> ranked;
    const std::uint64_t iter_seed = mix_seed(seeds.spl, 0);
    for (int c = wc.num_base_classes; c < wc.num_classes(); ++c) {
      ranked.push_back(rank_candidates(
          d, generate_candidates(*in.generator, c, class_captions(view.novel_train, c),
                                 spl.candidates_per_caption, iter_seed)));
    }
    if (in.oracle && ranked.front().size() == static_cast<std::size_t>(kChunkCandidates)) {
      cell.chunks = chunk_analysis(ranked, d, *in.oracle);
    }
    initialized = std::move(d);
  }

  for (Arm arm : arms) {
    switch (arm) {
      case Arm::Finetuning: {
        AdaptedDiscriminator t = adapt_discriminator(*in.baseline, wc.num_novel_classes,
                                                     wc.num_base_classes, seeds.head, false);
        init_finetune(t, view.novel_train, spl, seeds.init);
        record(arm, evaluate(t, data.test));
        break;
      }
      case Arm::Initialization:
        record(arm, cell.initialization);
        break;
      case Arm::SplD:
      case Arm::SplDG: {
        SplConfig cfg = spl;
        cfg.update_g = arm == Arm::SplDG;
        SplState state = make_spl_state(*initialized, *in.generator, view.novel_train);
        auto& sizes = cfg.update_g ? cell.generated_pool_sizes_dg : cell.generated_pool_sizes_d;
        for (int i = 0; i < cfg.iterations; ++i) {
          spl_iteration(state, cfg, data.test, seeds.spl);
          sizes.push_back(state.generated_pool.size());
        }
        (cfg.update_g ? cell.evolution_dg : cell.evolution_d) = state.metrics;
        record(arm, evaluate(state.discriminator, data.test));
        break;
      }
    }
  }
  return cell;
}

struct AblationResult {
  std::vector<CellResult> cells;  // canonical order: n-major, then seed

  std::vector<MetricsRecord> records() const {
    std::vector<MetricsRecord> out;
    for (const auto& c : cells) out.insert(out.end(), c.records.begin(), c.records.end());
    return out;
  }
};

// Runs every (n, seed) cell, at most `threads` at a time. Results are stored
// in canonical order regardless of completion order.
inline AblationResult run_ablation(const AblationInputs& in, std::span<const int> n_values,
                                   std::span<const std::uint64_t> seeds, std::span<const Arm> arms,
                                   const SplConfig& spl, int threads = 1) {
  validate(spl);
  struct Job {
    int n;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (int n : n_values) {
    for (std::uint64_t s : seeds) jobs.push_back({n, s});
  }
  AblationResult result;
  result.cells.resize(jobs.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t j = next++; j < jobs.size(); j = next++) {
      try {
        result.cells[j] = run_cell(in, arms, jobs[j].n, jobs[j].seed, spl);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const int workers = std::max(1, std::min<int>(threads, static_cast<int>(jobs.size())));
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
  }
  if (failure) std::rethrow_exception(failure);
  return result;
}

}  // namespace spargan
