// Command-line driver: gen-data, pretrain and run.
//
// Every failure prints one line `error: <stage>: <detail>` to stderr. Config
// problems and usage errors exit with 2, everything else with 1.
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "spargan/evaluation.hpp"
#include "spargan/io.hpp"
#include "spargan/report.hpp"

namespace fs = std::filesystem;
using namespace spargan;

namespace {

struct StageError : Error {
  StageError(std::string stage, const std::string& detail, int code = 1)
      : Error(detail), stage(std::move(stage)), code(code) {}
  std::string stage;
  int code;
};

class Manifest {
 public:
  Manifest(std::string command, const ExperimentConfig& cfg) : command_(std::move(command)) {
    hash_ = config_hash(cfg);
  }

  template <typename F>
  auto stage(const std::string& name, F&& f) {
    const auto t0 = std::chrono::steady_clock::now();
    if constexpr (std::is_void_v<decltype(f())>) {
      f();
      record(name, t0);
    } else {
      auto out = f();
      record(name, t0);
      return out;
    }
  }

  void artifact(const std::string& key, const fs::path& path) { artifacts_[key] = path.string(); }

  void write(const fs::path& dir) const {
    Json j{{"version", SPARGAN_VERSION},
           {"command", command_},
           {"config_hash", hash_},
           {"artifacts", artifacts_},
           {"stages", stages_}};
    detail::write_file((dir / "manifest.json").string(), j.dump(2) + "\n");
  }

 private:
  void record(const std::string& name, std::chrono::steady_clock::time_point t0) {
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    stages_.push_back(Json{{"name", name}, {"seconds", secs}});
  }

  std::string command_;
  std::string hash_;
  Json artifacts_ = Json::object();
  Json stages_ = Json::array();
};

struct Options {
  std::string config;
  std::string data;
  std::string checkpoint;
  std::string resume;
  std::string out;
  std::optional<std::uint64_t> seed;
  int checkpoint_every = 0;
};

ExperimentConfig load_config(const Options& opt) {
  ExperimentConfig cfg;
  try {
    cfg = load_experiment_config(opt.config);
  } catch (const ConfigError& e) {
    throw StageError("config", e.what(), 2);
  } catch (const Error& e) {
    throw StageError("config", e.what(), 2);
  }
  if (opt.seed) cfg.seeds = {*opt.seed};
  return cfg;
}

fs::path output_dir(const Options& opt, const ExperimentConfig& cfg, const std::string& stage) {
  const std::string dir = opt.out.empty() ? cfg.output_dir : opt.out;
  if (dir.empty()) throw StageError(stage, "no output directory (--out or output_dir)", 2);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw StageError(stage, "cannot create '" + dir + "': " + ec.message());
  return dir;
}

int thread_limit() {
  const char* env = std::getenv("SPARGAN_THREADS");
  if (env == nullptr || *env == '\0') return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v < 1 || v > 1024) {
    throw StageError("config", std::string("SPARGAN_THREADS: expected a positive integer, got '") +
                                   env + "'",
                     2);
  }
  return static_cast<int>(v);
}

template <typename F>
void write_csv(const fs::path& path, F&& body) {
  std::ostringstream out;
  body(out);
  detail::write_file(path.string(), out.str());
}

LoadedDataset load_data(const Options& opt, const ExperimentConfig& cfg, const std::string& stage) {
  LoadedDataset data = load_dataset(opt.data);
  if (!(data.split.config == cfg.world)) {
    throw StageError(stage, "dataset '" + opt.data + "' was generated from a different world config",
                     2);
  }
  return data;
}

int cmd_gen_data(const Options& opt) {
  const ExperimentConfig cfg = load_config(opt);
  const fs::path out = output_dir(opt, cfg, "gen-data");
  Manifest manifest("gen-data", cfg);
  const World world = manifest.stage("world", [&] { return make_world(cfg.world); });
  const DatasetSplit split = manifest.stage("sample", [&] { return sample_dataset(world); });
  const fs::path path = out / "dataset.json";
  manifest.stage("export", [&] { save_dataset(path.string(), world, split); });
  manifest.artifact("dataset", path);
  manifest.write(out);
  std::cout << "dataset: " << path.string() << " (" << split.base_train.size() << " base, "
            << split.novel_train.size() << " novel train, " << split.test.size() << " test)\n";
  return 0;
}

int cmd_pretrain(const Options& opt) {
  const ExperimentConfig cfg = load_config(opt);
  const fs::path out = output_dir(opt, cfg, "pretrain");
  Manifest manifest("pretrain", cfg);
  const LoadedDataset data = manifest.stage("load", [&] { return load_data(opt, cfg, "pretrain"); });
  manifest.artifact("dataset", opt.data);

  GanTrainer trainer(data.split.base_train, cfg.world, cfg.gan);
  if (!opt.resume.empty()) {
    const Checkpoint ck = load_checkpoint(opt.resume);
    if (!(ck.world == cfg.world) || !(ck.gan == cfg.gan)) {
      throw StageError("pretrain", "checkpoint '" + opt.resume + "' was written with a different config",
                       2);
    }
    trainer.restore(ck.generator, ck.discriminator, ck.log, ck.rng_state);
    manifest.artifact("resumed_from", opt.resume);
  }

  manifest.stage("train", [&] {
    while (!trainer.done()) {
      const EpochLog& e = trainer.run_epoch();
      if (opt.checkpoint_every > 0 && e.epoch % opt.checkpoint_every == 0 && !trainer.done()) {
        const fs::path mid = out / ("checkpoint_epoch" + std::to_string(e.epoch) + ".json");
        save_checkpoint(mid.string(), checkpoint_of(trainer));
        manifest.artifact("checkpoint_epoch" + std::to_string(e.epoch), mid);
      }
    }
  });

  const fs::path ck_path = out / "checkpoint.json";
  const fs::path log_path = out / "pretrain_log.csv";
  manifest.stage("export", [&] {
    save_checkpoint(ck_path.string(), checkpoint_of(trainer));
    write_csv(log_path, [&](std::ostream& o) { write_pretrain_log_csv(o, trainer.log()); });
  });
  manifest.artifact("checkpoint", ck_path);
  manifest.artifact("pretrain_log", log_path);
  manifest.write(out);
  const double top1 = trainer.log().empty() ? 0.0 : trainer.log().back().base_top1;
  std::cout << "checkpoint: " << ck_path.string() << " (epoch " << trainer.epoch()
            << ", base top-1 " << fixed(top1, 4) << ")\n";
  return 0;
}

std::string file_tag(Arm arm) { return arm == Arm::SplD ? "spl_d" : "spl_dg"; }

int cmd_run(const Options& opt) {
  const ExperimentConfig cfg = load_config(opt);
  const int threads = thread_limit();
  const fs::path out = output_dir(opt, cfg, "run");
  Manifest manifest("run", cfg);
  const LoadedDataset data = manifest.stage("load", [&] { return load_data(opt, cfg, "run"); });
  const Checkpoint ck = manifest.stage("load-checkpoint", [&] { return load_checkpoint(opt.checkpoint); });
  if (!(ck.world == cfg.world)) {
    throw StageError("run", "checkpoint '" + opt.checkpoint + "' was trained on a different world",
                     2);
  }
  manifest.artifact("dataset", opt.data);
  manifest.artifact("checkpoint", opt.checkpoint);

  std::optional<Discriminator> baseline;
  if (std::find(cfg.arms.begin(), cfg.arms.end(), Arm::Finetuning) != cfg.arms.end()) {
    baseline = manifest.stage("baseline", [&] {
      return pretrain_baseline_classifier(data.split.base_train, cfg.world, cfg.gan);
    });
  }
  const QualityOracle oracle =
      manifest.stage("oracle", [&] { return train_quality_oracle(data.world, data.split, cfg.world.seed); });

  const AblationInputs inputs{&data.split, &ck.generator, &ck.discriminator,
                              baseline ? &*baseline : nullptr, &oracle};
  const AblationResult result = manifest.stage("ablation", [&] {
    return run_ablation(inputs, cfg.n_shots, cfg.seeds, cfg.arms, cfg.spl, threads);
  });

  manifest.stage("export", [&] {
    const auto records = result.records();
    const fs::path ablation = out / "ablation.csv";
    write_csv(ablation, [&](std::ostream& o) { write_ablation_csv(o, records); });
    manifest.artifact("ablation_csv", ablation);

    // The headline curve: the strongest selected SPL arm at the first n.
    std::optional<Arm> headline;
    for (Arm a : {Arm::SplDG, Arm::SplD}) {
      if (!headline && std::find(cfg.arms.begin(), cfg.arms.end(), a) != cfg.arms.end()) {
        headline = a;
      }
    }
    const auto curve = headline ? mean_evolution(result.cells, *headline, cfg.n_shots.front())
                                : std::vector<IterationMetrics>{};
    const fs::path evolution = out / "evolution.csv";
    write_csv(evolution, [&](std::ostream& o) { write_evolution_csv(o, curve); });
    manifest.artifact("evolution_csv", evolution);

    for (Arm a : {Arm::SplD, Arm::SplDG}) {
      if (std::find(cfg.arms.begin(), cfg.arms.end(), a) == cfg.arms.end()) continue;
      for (int n : cfg.n_shots) {
        const std::string name = "evolution_" + file_tag(a) + "_n" + std::to_string(n);
        const fs::path p = out / (name + ".csv");
        const auto rows = mean_evolution(result.cells, a, n);
        write_csv(p, [&](std::ostream& o) { write_evolution_csv(o, rows); });
        manifest.artifact(name + "_csv", p);
      }
    }

    const fs::path chunks = out / "chunks.csv";
    const auto chunk_rows = mean_chunks(result.cells);
    write_csv(chunks, [&](std::ostream& o) { write_chunk_csv(o, chunk_rows); });
    manifest.artifact("chunk_csv", chunks);
  });
  manifest.write(out);

  std::cout << "arm,n,mean_top1\n";
  for (int n : cfg.n_shots) {
    for (Arm a : cfg.arms) {
      double sum = 0.0;
      int count = 0;
      for (const auto& r : result.records()) {
        if (r.arm == a && r.n == n) {
          sum += r.top1;
          ++count;
        }
      }
      std::cout << arm_name(a) << ',' << n << ',' << fixed(sum / count, 4) << '\n';
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-paced adversarial few-shot learning on a synthetic caption/image world"};
  app.set_version_flag("--version", SPARGAN_VERSION);
  app.require_subcommand(1);
  Options opt;
  std::uint64_t seed = 0;
  auto* seed_opt = app.add_option("--seed", seed, "Replace the config seed list with one seed");
  app.fallthrough();

  auto* gen = app.add_subcommand("gen-data", "Sample the synthetic dataset");
  gen->add_option("--config", opt.config, "Experiment config (JSON)")->required();
  gen->add_option("--out", opt.out, "Output directory");

  auto* pre = app.add_subcommand("pretrain", "Adversarially pretrain G and D on base classes");
  pre->add_option("--data", opt.data, "Dataset JSON")->required();
  pre->add_option("--config", opt.config, "Experiment config (JSON)")->required();
  pre->add_option("--out", opt.out, "Output directory");
  pre->add_option("--resume", opt.resume, "Continue from a checkpoint");
  pre->add_option("--checkpoint-every", opt.checkpoint_every,
                  "Also write a checkpoint every N epochs")
      ->check(CLI::NonNegativeNumber);

  auto* run = app.add_subcommand("run", "Adapt, run the SPL loop and evaluate every arm");
  run->add_option("--data", opt.data, "Dataset JSON")->required();
  run->add_option("--checkpoint", opt.checkpoint, "Pretraining checkpoint")->required();
  run->add_option("--config", opt.config, "Experiment config (JSON)")->required();
  run->add_option("--out", opt.out, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: cli: " << e.what() << '\n';
    return 2;
  }
  if (*seed_opt) opt.seed = seed;

  std::string stage = "cli";
  try {
    if (*gen) {
      stage = "gen-data";
      return cmd_gen_data(opt);
    }
    if (*pre) {
      stage = "pretrain";
      return cmd_pretrain(opt);
    }
    stage = "run";
    return cmd_run(opt);
  } catch (const StageError& e) {
    std::cerr << "error: " << e.stage << ": " << e.what() << '\n';
    return e.code;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << stage << ": " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << stage << ": " << e.what() << '\n';
    return 1;
  }
}
