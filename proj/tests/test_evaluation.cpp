#include <gtest/gtest.h>

#include <cmath>

#include "spargan/evaluation.hpp"
#include "support.hpp"

using namespace spargan;

namespace {

struct Inputs {
  WorldConfig world_config;
  World world;
  DatasetSplit data;
  PretrainResult gan;
  Discriminator baseline;
  QualityOracle oracle;

  Inputs() {
    world_config = spargan::testing::small_world();
    world_config.captions_per_image = 10;
    world = make_world(world_config);
    data = sample_dataset(world);
    const GanTrainConfig gc = spargan::testing::small_gan(40);
    gan = pretrain_representation(data.base_train, world_config, gc);
    baseline = pretrain_baseline_classifier(data.base_train, world_config, gc);
    oracle = train_quality_oracle(world, data, 1);
  }

  AblationInputs view() const { return {&data, &gan.generator, &gan.discriminator, &baseline, &oracle}; }
};

const Inputs& inputs() {
  static const Inputs in;
  return in;
}

SplConfig small_spl() {
  SplConfig c;
  c.iterations = 2;
  c.epochs_per_iteration = 2;
  c.init_epochs = 10;
  c.sgd_rate = 0.01;
  return c;
}

std::vector<std::vector<Candidate>> ranked_candidates(const AdaptedDiscriminator& d) {
  const auto& in = inputs();
  const auto pool = nshot_view(in.data, 1, 1).novel_train;
  std::vector<std::vector<Candidate>> out;
  for (int c = 8; c < 12; ++c) {
    out.push_back(rank_candidates(d, generate_candidates(in.gan.generator, c, class_captions(pool, c), 3, 4)));
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Oracle

TEST(Oracle, ReachesFloorOnHeldOutDraws) {
  EXPECT_GE(inputs().oracle.heldout_top1, kOracleFloor);
  EXPECT_EQ(inputs().oracle.num_classes, 12);
}

TEST(Oracle, DeterministicForSeed) {
  const auto& in = inputs();
  const QualityOracle again = train_quality_oracle(in.world, in.data, 1);
  EXPECT_TRUE(again.params == in.oracle.params);
  EXPECT_EQ(again.heldout_top1, in.oracle.heldout_top1);
}

TEST(Oracle, FailsLoudlyBelowFloor) {
  WorldConfig noisy = spargan::testing::small_world();
  noisy.caption_noise = 3.0;
  noisy.image_noise = 1.0;
  const World w = make_world(noisy);
  try {
    train_quality_oracle(w, sample_dataset(w), 1, OracleConfig{.epochs = 2});
    FAIL();
  } catch (const OracleError& e) {
    EXPECT_LT(e.achieved(), kOracleFloor);
  }
}

TEST(Quality, RealImagesScoreHighAndRejectEmpty) {
  const auto& in = inputs();
  const double score = quality_score(image_rows(in.data.test), in.oracle);
  // Test images are confidently spread over four novel classes.
  EXPECT_GT(score, 3.0);
  EXPECT_LE(score, 12.0);
  EXPECT_THROW(quality_score(std::vector<std::span<const double>>{}, in.oracle), Error);
}

TEST(Quality, SingleClassImagesScoreNearOne) {
  const auto& in = inputs();
  std::vector<Sample> one;
  for (const Sample& s : in.data.test) {
    if (s.label == 9) one.push_back(s);
  }
  EXPECT_LT(quality_score(image_rows(one), in.oracle), 1.5);
}

// ---------------------------------------------------------------------------
// Chunks

TEST(Chunks, TenChunksPartitionTheRanking) {
  const auto& in = inputs();
  const AdaptedDiscriminator d = adapt_discriminator(in.gan.discriminator, 4, 8, 1);
  const auto ranked = ranked_candidates(d);
  const auto chunks = chunk_analysis(ranked, d, in.oracle);
  ASSERT_EQ(chunks.size(), 10u);
  double mean_top1 = 0.0;
  for (std::size_t j = 0; j < chunks.size(); ++j) {
    EXPECT_EQ(chunks[j].chunk, static_cast<int>(j) + 1);
    EXPECT_GE(chunks[j].quality, 1.0);
    EXPECT_GE(chunks[j].top5, chunks[j].top1);
    mean_top1 += chunks[j].top1 / 10.0;
  }
  // Equal-size chunks: their mean accuracy is the accuracy over all candidates.
  std::vector<std::span<const double>> images, captions;
  std::vector<int> labels;
  for (const auto& cls : ranked) {
    for (const Candidate& c : cls) {
      images.emplace_back(c.image);
      captions.emplace_back(c.caption);
      labels.push_back(c.label - 8);
    }
  }
  EXPECT_NEAR(mean_top1, topk_accuracy(adapted_logits(d, images, captions), labels, 1), 1e-12);
}

TEST(Chunks, RejectWrongCandidateCounts) {
  const auto& in = inputs();
  const AdaptedDiscriminator d = adapt_discriminator(in.gan.discriminator, 4, 8, 1);
  auto ranked = ranked_candidates(d);
  ranked[2].pop_back();
  EXPECT_THROW(chunk_analysis(ranked, d, in.oracle), Error);
  EXPECT_THROW(chunk_analysis({}, d, in.oracle), Error);
  EXPECT_THROW(chunk_analysis(ranked_candidates(d), d, in.oracle, 30, 7), Error);
}

// ---------------------------------------------------------------------------
// Arms and ablation

TEST(Arms, NamesRoundTrip) {
  for (Arm a : kAllArms) EXPECT_EQ(parse_arm(arm_name(a)), a);
  try {
    parse_arm("SPL-X");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field(), "arms");
  }
}

TEST(Baseline, LearnsBaseClassesFromImagesOnly) {
  const auto& in = inputs();
  const Discriminator net =
      pretrain_baseline_classifier(in.data.base_train, in.world_config, spargan::testing::small_gan(300));
  const AdaptedDiscriminator t{net, 0, false};
  EXPECT_GT(evaluate(t, in.data.base_train).top1, 0.8);
}

TEST(Ablation, OneRecordPerArmShotAndSeed) {
  const auto& in = inputs();
  const std::vector<int> ns{1, 2, 5};
  const std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  const auto result = run_ablation(in.view(), ns, seeds, kAllArms, small_spl());
  const auto records = result.records();
  ASSERT_EQ(records.size(), 60u);
  std::size_t i = 0;
  for (int n : ns) {
    for (auto seed : seeds) {
      for (Arm a : kAllArms) {
        EXPECT_EQ(records[i].arm, a);
        EXPECT_EQ(records[i].n, n);
        EXPECT_EQ(records[i].seed, seed);
        EXPECT_LE(records[i].top1, records[i].top3);
        EXPECT_LE(records[i].top3, records[i].top5);
        ++i;
      }
    }
  }
  for (const CellResult& c : result.cells) {
    EXPECT_EQ(c.evolution_d.size(), 2u);
    EXPECT_EQ(c.evolution_dg.size(), 2u);
    EXPECT_EQ(c.generated_pool_sizes_d, (std::vector<std::size_t>{4, 8}));
    EXPECT_EQ(c.generated_pool_sizes_dg, (std::vector<std::size_t>{4, 8}));
    // Thirty candidates per class exist only when one sample supplies ten captions.
    EXPECT_EQ(c.chunks.size(), c.n == 1 ? 10u : 0u);
    EXPECT_EQ(c.records[1].top1, c.initialization.top1);
    EXPECT_EQ(c.records[2].top1, c.evolution_d.back().top1);
    EXPECT_EQ(c.records[3].top1, c.evolution_dg.back().top1);
  }
}

TEST(Ablation, IndependentOfThreadCount) {
  const auto& in = inputs();
  const std::vector<int> ns{1, 2};
  const std::vector<std::uint64_t> seeds{1, 2, 3};
  const auto a = run_ablation(in.view(), ns, seeds, kAllArms, small_spl(), 1);
  const auto b = run_ablation(in.view(), ns, seeds, kAllArms, small_spl(), 3);
  EXPECT_EQ(a.records(), b.records());
  for (std::size_t i = 0; i < a.cells.size(); ++i) {
    EXPECT_EQ(a.cells[i].evolution_dg, b.cells[i].evolution_dg);
    EXPECT_EQ(a.cells[i].chunks, b.cells[i].chunks);
  }
}

TEST(Ablation, ArmSubsetMatchesFullRun) {
  const auto& in = inputs();
  const std::vector<int> ns{1};
  const std::vector<std::uint64_t> seeds{2};
  const auto full = run_ablation(in.view(), ns, seeds, kAllArms, small_spl()).records();
  const std::vector<Arm> only{Arm::SplDG};
  const auto sub = run_ablation(in.view(), ns, seeds, only, small_spl()).records();
  ASSERT_EQ(sub.size(), 1u);
  EXPECT_EQ(sub[0], full[3]);
}

TEST(Ablation, ErrorsInCellsPropagate) {
  const auto& in = inputs();
  const std::vector<int> ns{7};
  const std::vector<std::uint64_t> seeds{1};
  EXPECT_THROW(run_ablation(in.view(), ns, seeds, kAllArms, small_spl(), 2), Error);
}
