// JSON persistence: datasets, pretraining checkpoints and experiment configs.
//
// Field order is fixed and numbers are written with shortest round-trip
// precision, so saving the same object twice yields identical bytes and
// loading reproduces every double exactly.
#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "json.hpp"
#include "spargan/evaluation.hpp"
#include "spargan/spl.hpp"
#include "spargan/synth_data.hpp"
#include "spargan/tcgan.hpp"

namespace spargan {

using Json = nlohmann::ordered_json;

// A file that parses but does not describe a valid object.
class FormatError : public Error {
 public:
  FormatError(std::string where, const std::string& detail)
      : Error(where + ": " + detail), where_(std::move(where)) {}
  const std::string& where() const { return where_; }

 private:
  std::string where_;
};

inline constexpr int kCheckpointFormatVersion = 1;

namespace detail {

// Reads typed members of one JSON object and rejects members nobody asked
// for. Errors carry the dotted path of the offending field.
class ObjectReader {
 public:
  ObjectReader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  bool has(const std::string& key) const { return j_.contains(key); }

  const Json& at(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) throw ConfigError(field(key), "missing required field");
    return *it;
  }

  template <typename T>
  void required(const std::string& key, T& out) {
    out = convert<T>(at(key), field(key));
  }

  template <typename T>
  void optional(const std::string& key, T& out) {
    if (has(key)) required(key, out);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.contains(it.key())) throw ConfigError(field(it.key()), "unknown field");
    }
  }

  template <typename T>
  static T convert(const Json& v, const std::string& where) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(where, "expected a boolean");
      return v.get<bool>();
    } else if constexpr (std::is_same_v<T, std::uint64_t>) {
      if (v.is_number_unsigned()) return v.get<std::uint64_t>();
      if (!v.is_number_integer() || v.get<std::int64_t>() < 0) {
        throw ConfigError(where, "expected a non-negative integer");
      }
      return static_cast<std::uint64_t>(v.get<std::int64_t>());
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(where, "expected an integer");
      const auto x = v.get<std::int64_t>();
      if (x < std::numeric_limits<T>::min() || x > std::numeric_limits<T>::max()) {
        throw ConfigError(where, "integer out of range");
      }
      return static_cast<T>(x);
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(where, "expected a number");
      return v.get<T>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(where, "expected a string");
      return v.get<std::string>();
    } else {
      if (!v.is_array()) throw ConfigError(where, "expected an array");
      T out;
      for (std::size_t i = 0; i < v.size(); ++i) {
        out.push_back(convert<typename T::value_type>(v[i], where + "[" + std::to_string(i) + "]"));
      }
      return out;
    }
  }

 private:
  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline std::string read_file(const std::string& path, const char* what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + std::string(what) + " '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write '" + path + "'");
  out << text;
  if (!out) throw Error("write failed for '" + path + "'");
}

inline Json parse_json(const std::string& text, const std::string& what) {
  try {
    return Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(what, std::string("malformed JSON: ") + e.what());
  }
}

inline std::vector<double> read_vector(const Json& v, const std::string& where, std::size_t size) {
  auto out = ObjectReader::convert<std::vector<double>>(v, where);
  if (out.size() != size) {
    throw ConfigError(where, "expected " + std::to_string(size) + " values, got " +
                                 std::to_string(out.size()));
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Config sections

inline Json to_json(const WorldConfig& c) {
  return Json{{"seed", c.seed},
              {"num_base_classes", c.num_base_classes},
              {"num_novel_classes", c.num_novel_classes},
              {"caption_dim", c.caption_dim},
              {"image_dim", c.image_dim},
              {"captions_per_image", c.captions_per_image},
              {"caption_noise", c.caption_noise},
              {"image_noise", c.image_noise},
              {"samples_per_base_class", c.samples_per_base_class},
              {"samples_per_novel_train", c.samples_per_novel_train},
              {"samples_per_novel_test", c.samples_per_novel_test}};
}

inline WorldConfig world_config_from_json(const Json& j, const std::string& path = "world") {
  WorldConfig c;
  detail::ObjectReader r(j, path);
  r.optional("seed", c.seed);
  r.optional("num_base_classes", c.num_base_classes);
  r.optional("num_novel_classes", c.num_novel_classes);
  r.optional("caption_dim", c.caption_dim);
  r.optional("image_dim", c.image_dim);
  r.optional("captions_per_image", c.captions_per_image);
  r.optional("caption_noise", c.caption_noise);
  r.optional("image_noise", c.image_noise);
  r.optional("samples_per_base_class", c.samples_per_base_class);
  r.optional("samples_per_novel_train", c.samples_per_novel_train);
  r.optional("samples_per_novel_test", c.samples_per_novel_test);
  r.finish();
  validate(c);
  return c;
}

inline Json to_json(const GanTrainConfig& c) {
  return Json{{"seed", c.seed},
              {"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"rate", c.rate},
              {"mismatch_weight", c.mismatch_weight},
              {"class_weight", c.class_weight},
              {"hidden", c.hidden},
              {"noise_dim", c.noise_dim},
              {"feature_dim", c.feature_dim}};
}

inline GanTrainConfig gan_config_from_json(const Json& j, const std::string& path = "gan") {
  GanTrainConfig c;
  detail::ObjectReader r(j, path);
  r.optional("seed", c.seed);
  r.optional("epochs", c.epochs);
  r.optional("batch_size", c.batch_size);
  r.optional("rate", c.rate);
  r.optional("mismatch_weight", c.mismatch_weight);
  r.optional("class_weight", c.class_weight);
  r.optional("hidden", c.hidden);
  r.optional("noise_dim", c.noise_dim);
  r.optional("feature_dim", c.feature_dim);
  r.finish();
  validate(c);
  return c;
}

inline Json to_json(const SplConfig& c) {
  return Json{{"iterations", c.iterations},
              {"k", c.k},
              {"epochs_per_iteration", c.epochs_per_iteration},
              {"init_epochs", c.init_epochs},
              {"sgd_rate", c.sgd_rate},
              {"sgd_momentum", c.sgd_momentum},
              {"batch_size", c.batch_size},
              {"g_rate", c.g_rate},
              {"class_weight", c.class_weight},
              {"candidates_per_caption", c.candidates_per_caption}};
}

inline SplConfig spl_config_from_json(const Json& j, const std::string& path = "spl") {
  SplConfig c;
  detail::ObjectReader r(j, path);
  r.optional("iterations", c.iterations);
  r.optional("k", c.k);
  r.optional("epochs_per_iteration", c.epochs_per_iteration);
  r.optional("init_epochs", c.init_epochs);
  r.optional("sgd_rate", c.sgd_rate);
  r.optional("sgd_momentum", c.sgd_momentum);
  r.optional("batch_size", c.batch_size);
  r.optional("g_rate", c.g_rate);
  r.optional("class_weight", c.class_weight);
  r.optional("candidates_per_caption", c.candidates_per_caption);
  r.finish();
  validate(c);
  return c;
}

// ---------------------------------------------------------------------------
// Experiment config

struct ExperimentConfig {
  WorldConfig world;
  GanTrainConfig gan;
  SplConfig spl;
  std::vector<int> n_shots{1};
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::vector<Arm> arms{std::begin(kAllArms), std::end(kAllArms)};
  std::string output_dir;

  bool operator==(const ExperimentConfig&) const = default;
};

inline void validate(const ExperimentConfig& c) {
  validate(c.world);
  validate(c.gan);
  validate(c.spl);
  if (c.n_shots.empty()) throw ConfigError("n_shots", "must not be empty");
  for (std::size_t i = 0; i < c.n_shots.size(); ++i) {
    const int n = c.n_shots[i];
    const std::string field = "n_shots[" + std::to_string(i) + "]";
    if (n < 1 || n > c.world.samples_per_novel_train) {
      throw ConfigError(field, "must lie in [1, world.samples_per_novel_train]");
    }
    if (std::count(c.n_shots.begin(), c.n_shots.end(), n) > 1) {
      throw ConfigError(field, "duplicate value");
    }
  }
  if (c.seeds.empty()) throw ConfigError("seeds", "must not be empty");
  for (std::size_t i = 0; i < c.seeds.size(); ++i) {
    if (std::count(c.seeds.begin(), c.seeds.end(), c.seeds[i]) > 1) {
      throw ConfigError("seeds[" + std::to_string(i) + "]", "duplicate value");
    }
  }
  if (c.arms.empty()) throw ConfigError("arms", "must not be empty");
  for (std::size_t i = 0; i < c.arms.size(); ++i) {
    if (std::count(c.arms.begin(), c.arms.end(), c.arms[i]) > 1) {
      throw ConfigError("arms[" + std::to_string(i) + "]", "duplicate value");
    }
  }
}

inline Json to_json(const ExperimentConfig& c) {
  Json arms = Json::array();
  for (Arm a : c.arms) arms.push_back(arm_name(a));
  Json j{{"world", to_json(c.world)}, {"gan", to_json(c.gan)}, {"spl", to_json(c.spl)},
         {"n_shots", c.n_shots},      {"seeds", c.seeds},       {"arms", arms}};
  if (!c.output_dir.empty()) j["output_dir"] = c.output_dir;
  return j;
}

// Sections and lists are required; fields inside a section default when
// absent. Unknown fields anywhere are rejected.
inline ExperimentConfig experiment_config_from_json(const Json& j) {
  ExperimentConfig c;
  detail::ObjectReader r(j, "");
  c.world = world_config_from_json(r.at("world"));
  c.gan = gan_config_from_json(r.at("gan"));
  c.spl = spl_config_from_json(r.at("spl"));
  r.required("n_shots", c.n_shots);
  r.required("seeds", c.seeds);
  std::vector<std::string> arms;
  r.required("arms", arms);
  c.arms.clear();
  for (const auto& name : arms) c.arms.push_back(parse_arm(name));
  r.optional("output_dir", c.output_dir);
  r.finish();
  validate(c);
  return c;
}

inline ExperimentConfig parse_experiment_config(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("<root>", std::string("malformed JSON: ") + e.what());
  }
  return experiment_config_from_json(j);
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  return parse_experiment_config(detail::read_file(path, "config"));
}

// FNV-1a over the canonical serialization, as 16 hex digits.
inline std::string config_hash(const ExperimentConfig& c) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(hash_tag(to_json(c).dump())));
  return buf;
}

// ---------------------------------------------------------------------------
// Dataset

inline const char* split_name(int which) {
  static const char* names[] = {"base_train", "novel_train", "test"};
  return names[which];
}

inline Json dataset_to_json(const World& world, const DatasetSplit& data) {
  Json classes = Json::array();
  for (std::size_t c = 0; c < world.prototypes.size(); ++c) {
    classes.push_back(Json{{"id", c}, {"prototype", world.prototypes[c]}});
  }
  Json samples = Json::array();
  const std::vector<Sample>* parts[] = {&data.base_train, &data.novel_train, &data.test};
  for (int p = 0; p < 3; ++p) {
    for (const Sample& s : *parts[p]) {
      samples.push_back(Json{{"id", s.id},
                             {"label", s.label},
                             {"split", split_name(p)},
                             {"image", s.image},
                             {"captions", s.captions}});
    }
  }
  return Json{{"config", to_json(data.config)}, {"classes", classes}, {"samples", samples}};
}

struct LoadedDataset {
  World world;
  DatasetSplit split;
};

// Rebuilds the world from the stored config and checks the stored
// prototypes against it, so a loaded dataset always comes with its renderer.
inline LoadedDataset dataset_from_json(const Json& j) {
  try {
    detail::ObjectReader r(j, "");
    LoadedDataset out;
    const WorldConfig cfg = world_config_from_json(r.at("config"), "config");
    out.world = make_world(cfg);
    const std::size_t dt = static_cast<std::size_t>(cfg.caption_dim);
    const std::size_t di = static_cast<std::size_t>(cfg.image_dim);

    const Json& classes = r.at("classes");
    if (!classes.is_array() || classes.size() != static_cast<std::size_t>(cfg.num_classes())) {
      throw ConfigError("classes", "expected " + std::to_string(cfg.num_classes()) + " entries");
    }
    for (std::size_t c = 0; c < classes.size(); ++c) {
      const std::string path = "classes[" + std::to_string(c) + "]";
      detail::ObjectReader cr(classes[c], path);
      std::uint64_t id = 0;
      cr.required("id", id);
      if (id != c) throw ConfigError(cr.field("id"), "expected " + std::to_string(c));
      const auto proto = detail::read_vector(cr.at("prototype"), cr.field("prototype"), dt);
      cr.finish();
      if (proto != out.world.prototypes[c]) {
        throw ConfigError(cr.field("prototype"), "does not match the world generated from config");
      }
    }

    out.split.config = cfg;
    const Json& samples = r.at("samples");
    if (!samples.is_array()) throw ConfigError("samples", "expected an array");
    std::set<std::uint64_t> ids;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      detail::ObjectReader sr(samples[i], "samples[" + std::to_string(i) + "]");
      Sample s;
      std::string split;
      sr.required("id", s.id);
      sr.required("label", s.label);
      sr.required("split", split);
      s.image = detail::read_vector(sr.at("image"), sr.field("image"), di);
      const Json& caps = sr.at("captions");
      if (!caps.is_array() || caps.size() != static_cast<std::size_t>(cfg.captions_per_image)) {
        throw ConfigError(sr.field("captions"),
                          "expected " + std::to_string(cfg.captions_per_image) + " captions");
      }
      for (std::size_t k = 0; k < caps.size(); ++k) {
        s.captions.push_back(
            detail::read_vector(caps[k], sr.field("captions") + "[" + std::to_string(k) + "]", dt));
      }
      sr.finish();
      if (s.label < 0 || s.label >= cfg.num_classes()) {
        throw ConfigError(sr.field("label"), "out of range");
      }
      if (!ids.insert(s.id).second) throw ConfigError(sr.field("id"), "duplicate sample id");
      const bool novel = cfg.is_novel(s.label);
      if (split == "base_train" && !novel) {
        out.split.base_train.push_back(std::move(s));
      } else if (split == "novel_train" && novel) {
        out.split.novel_train.push_back(std::move(s));
      } else if (split == "test" && novel) {
        out.split.test.push_back(std::move(s));
      } else {
        throw ConfigError(sr.field("split"), "'" + split + "' does not fit label " +
                                                 std::to_string(s.label));
      }
    }
    r.finish();
    return out;
  } catch (const ConfigError& e) {
    throw FormatError("dataset", e.what());
  }
}

inline void save_dataset(const std::string& path, const World& world, const DatasetSplit& data) {
  detail::write_file(path, dataset_to_json(world, data).dump() + "\n");
}

inline LoadedDataset load_dataset(const std::string& path) {
  return dataset_from_json(detail::parse_json(detail::read_file(path, "dataset"), "dataset"));
}

// ---------------------------------------------------------------------------
// Pretraining checkpoint

struct Checkpoint {
  WorldConfig world;
  GanTrainConfig gan;
  Generator generator;
  Discriminator discriminator;
  std::string rng_state;
  std::vector<EpochLog> log;

  int epoch() const { return static_cast<int>(log.size()); }
};

inline Checkpoint checkpoint_of(const GanTrainer& t) {
  return {t.world(), t.config(), t.generator(), t.discriminator(), t.rng().state(), t.log()};
}

inline Json checkpoint_to_json(const Checkpoint& ck) {
  Json tensors = Json::array();
  Json slots = Json::array();
  for (const ParamSet* set : {&ck.generator.params, &ck.discriminator.params}) {
    for (const Parameter& p : set->entries()) {
      tensors.push_back(
          Json{{"name", p.name}, {"shape", p.value.shape()}, {"values", p.value.storage()}});
      slots.push_back(Json{{"name", p.name},
                           {"first_moment", p.first_moment.storage()},
                           {"second_moment", p.second_moment.storage()}});
    }
  }
  Json log = Json::array();
  for (const EpochLog& e : ck.log) {
    log.push_back(Json{{"epoch", e.epoch},
                       {"loss_d", e.loss_d},
                       {"loss_g", e.loss_g},
                       {"base_top1", e.base_top1}});
  }
  return Json{{"format_version", kCheckpointFormatVersion},
              {"config", Json{{"world", to_json(ck.world)}, {"gan", to_json(ck.gan)}}},
              {"epoch", ck.epoch()},
              {"tensors", tensors},
              {"optimizer_slots", slots},
              {"steps",
               Json{{"generator", ck.generator.params.step()},
                    {"discriminator", ck.discriminator.params.step()}}},
              {"rng_state", ck.rng_state},
              {"log", log}};
}

inline Checkpoint checkpoint_from_json(const Json& j) {
  try {
    detail::ObjectReader r(j, "");
    int version = 0;
    r.required("format_version", version);
    if (version != kCheckpointFormatVersion) {
      throw ConfigError("format_version", "unsupported version " + std::to_string(version));
    }
    Checkpoint ck;
    detail::ObjectReader cr(r.at("config"), "config");
    ck.world = world_config_from_json(cr.at("world"), "config.world");
    ck.gan = gan_config_from_json(cr.at("gan"), "config.gan");
    cr.finish();

    Rng dummy(0);
    ck.generator = Generator::create(ck.world.caption_dim, ck.gan.noise_dim, ck.gan.hidden,
                                     ck.world.image_dim, dummy);
    ck.discriminator = Discriminator::create(ck.world.image_dim, ck.world.caption_dim,
                                             ck.gan.hidden, ck.gan.feature_dim,
                                             ck.world.num_base_classes, dummy);
    auto lookup = [&](const std::string& name, const std::string& where) -> Parameter& {
      for (ParamSet* set : {&ck.generator.params, &ck.discriminator.params}) {
        if (Parameter* p = set->find(name)) return *p;
      }
      throw ConfigError(where, "unknown tensor '" + name + "'");
    };

    const Json& tensors = r.at("tensors");
    if (!tensors.is_array()) throw ConfigError("tensors", "expected an array");
    std::set<std::string> loaded;
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      detail::ObjectReader tr(tensors[i], "tensors[" + std::to_string(i) + "]");
      std::string name;
      std::vector<std::size_t> shape;
      tr.required("name", name);
      tr.required("shape", shape);
      Parameter& p = lookup(name, tr.field("name"));
      if (shape != p.value.shape()) {
        throw ConfigError(tr.field("shape"), "expected " + shape_string(p.value.shape()) +
                                                 ", got " + shape_string(shape));
      }
      auto values = detail::read_vector(tr.at("values"), tr.field("values"), p.value.size());
      std::copy(values.begin(), values.end(), p.value.data());
      tr.finish();
      if (!loaded.insert(name).second) throw ConfigError(tr.field("name"), "duplicate tensor");
    }
    const std::size_t expected =
        ck.generator.params.entries().size() + ck.discriminator.params.entries().size();
    if (loaded.size() != expected) {
      throw ConfigError("tensors", "expected " + std::to_string(expected) + " tensors, got " +
                                       std::to_string(loaded.size()));
    }

    const Json& slots = r.at("optimizer_slots");
    if (!slots.is_array() || slots.size() != expected) {
      throw ConfigError("optimizer_slots", "expected " + std::to_string(expected) + " entries");
    }
    for (std::size_t i = 0; i < slots.size(); ++i) {
      detail::ObjectReader sr(slots[i], "optimizer_slots[" + std::to_string(i) + "]");
      std::string name;
      sr.required("name", name);
      Parameter& p = lookup(name, sr.field("name"));
      auto m = detail::read_vector(sr.at("first_moment"), sr.field("first_moment"), p.value.size());
      auto v =
          detail::read_vector(sr.at("second_moment"), sr.field("second_moment"), p.value.size());
      std::copy(m.begin(), m.end(), p.first_moment.data());
      std::copy(v.begin(), v.end(), p.second_moment.data());
      sr.finish();
    }

    detail::ObjectReader st(r.at("steps"), "steps");
    std::uint64_t gs = 0, ds = 0;
    st.required("generator", gs);
    st.required("discriminator", ds);
    st.finish();
    ck.generator.params.set_step(gs);
    ck.discriminator.params.set_step(ds);

    r.required("rng_state", ck.rng_state);
    try {
      Rng probe(0);
      probe.restore(ck.rng_state);
    } catch (const std::exception&) {
      throw ConfigError("rng_state", "malformed generator state");
    }

    const Json& log = r.at("log");
    if (!log.is_array()) throw ConfigError("log", "expected an array");
    for (std::size_t i = 0; i < log.size(); ++i) {
      detail::ObjectReader lr(log[i], "log[" + std::to_string(i) + "]");
      EpochLog e;
      lr.required("epoch", e.epoch);
      lr.required("loss_d", e.loss_d);
      lr.required("loss_g", e.loss_g);
      lr.required("base_top1", e.base_top1);
      lr.finish();
      if (e.epoch != static_cast<int>(i) + 1) {
        throw ConfigError(lr.field("epoch"), "expected " + std::to_string(i + 1));
      }
      ck.log.push_back(e);
    }
    int epoch = 0;
    r.required("epoch", epoch);
    if (epoch != ck.epoch()) throw ConfigError("epoch", "does not match the log length");
    r.finish();
    return ck;
  } catch (const ConfigError& e) {
    throw FormatError("checkpoint", e.what());
  }
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  detail::write_file(path, checkpoint_to_json(ck).dump() + "\n");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  return checkpoint_from_json(
      detail::parse_json(detail::read_file(path, "checkpoint"), "checkpoint"));
}

// Continues training from a checkpoint; the result matches an uninterrupted
// run of the same config bit for bit.
inline GanTrainer resume_trainer(std::span<const Sample> base, const Checkpoint& ck) {
  GanTrainer t(base, ck.world, ck.gan);
  t.restore(ck.generator, ck.discriminator, ck.log, ck.rng_state);
  return t;
}

}  // namespace spargan
