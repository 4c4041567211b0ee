#pragma once

// Experiment configuration: INI-style sections, strict keys, canonical re-serialization.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "gfr/data.hpp"
#include "gfr/generator.hpp"
#include "gfr/model.hpp"

namespace gfr {

inline const std::vector<std::string>& method_names() {
  static const std::vector<std::string> names{"ours-gan", "ours-gaussian", "finetune", "lwf", "joint"};
  return names;
}

/// Everything the per-task training loop needs.
struct MethodConfig {
  std::string method = "ours-gan";
  double distillation = 1.0;
  double replay_ratio = 1.0;
  double lwf_temperature = 2.0;
  double lwf_weight = 1.0;
  std::string tap = "feature";
  int epochs = 20;
  int batch_size = 64;
  double lr = 1e-3;
  bool augment = true;
  int augment_pad = 4;
  double flip_probability = 0.5;
  std::string covariance = "diagonal";  // Gaussian prototypes: "diagonal" | "full"
  std::string batchnorm = "freeze";     // "freeze": running statistics fixed after the first task | "update"
  gen::GanConfig gan;

  [[nodiscard]] bool uses_generator() const { return method == "ours-gan" || method == "ours-gaussian"; }
  [[nodiscard]] bool uses_gan() const { return method == "ours-gan"; }
  /// Coefficients actually applied; baselines run with distillation and replay off.
  [[nodiscard]] double effective_distillation() const { return uses_generator() ? distillation : 0.0; }
  [[nodiscard]] double effective_replay_ratio() const { return uses_generator() ? replay_ratio : 0.0; }

  void validate() const {
    if (std::find(method_names().begin(), method_names().end(), method) == method_names().end()) {
      throw ConfigError("method.name: unknown method '" + method +
                        "' (expected ours-gan, ours-gaussian, finetune, lwf or joint)");
    }
    if (!(distillation >= 0)) throw ConfigError("method.distillation must be non-negative");
    if (!(replay_ratio >= 0)) throw ConfigError("method.replay_ratio must be non-negative");
    if (!(lwf_temperature > 0)) throw ConfigError("method.lwf_temperature must be positive");
    if (!(lwf_weight >= 0)) throw ConfigError("method.lwf_weight must be non-negative");
    const auto& names = model::Architecture::stage_names();
    if (std::find(names.begin(), names.end(), tap) == names.end()) {
      throw ConfigError("method.tap: unknown layer '" + tap + "' (expected block1..block4 or feature)");
    }
    if (epochs < 1) throw ConfigError("training.epochs must be at least 1");
    if (batch_size < 2) throw ConfigError("training.batch_size must be at least 2");
    if (!(lr > 0)) throw ConfigError("training.lr must be positive");
    if (augment_pad < 0) throw ConfigError("training.augment_pad must be non-negative");
    if (!(flip_probability >= 0 && flip_probability <= 1)) throw ConfigError("training.flip_probability must lie in [0,1]");
    if (batchnorm != "freeze" && batchnorm != "update") {
      throw ConfigError("training.batchnorm must be freeze or update, got '" + batchnorm + "'");
    }
    if (covariance != "diagonal" && covariance != "full") {
      throw ConfigError("generator.covariance must be diagonal or full, got '" + covariance + "'");
    }
    gan.validate();
  }
};

struct DatasetConfig {
  std::string source = "synthetic";  // "synthetic" | "directory"
  std::string path;
  int classes = 10;
  int image_side = 16;
  int train_per_class = 100;
  int test_per_class = 50;
  std::uint64_t seed = 1;
  std::string normalization = "stored";  // "stored" | "fit" | "none"
};

struct SplitConfig {
  double first_task_fraction = 0.5;
  int num_remaining_tasks = 5;
  std::uint64_t seed = 1;
};

struct ModelConfig {
  std::string family = "smallcnn";
  std::vector<int> widths{8, 16, 32, 64};
  bool head_bias = false;
};

struct OutputConfig {
  std::string name = "run";
  std::string dir = "runs";
};

struct ExperimentConfig {
  DatasetConfig dataset;
  SplitConfig split;
  ModelConfig model;
  MethodConfig method;
  std::string generator_variant = "auto";  // "auto" | "gan" | "gaussian"
  std::uint64_t seed = 1;                  // training seed
  OutputConfig output;

  void validate() const;
  [[nodiscard]] std::string canonical() const;

  /// Output root: GFR_RUNS_DIR when set, else output.dir.
  [[nodiscard]] std::filesystem::path runs_root() const {
    if (const char* env = std::getenv("GFR_RUNS_DIR"); env && *env) return env;
    return output.dir;
  }
  [[nodiscard]] std::filesystem::path run_dir() const { return runs_root() / output.name; }

  /// Architecture for a dataset of the given geometry.
  [[nodiscard]] model::Architecture architecture(const data::DatasetMeta& meta) const {
    model::Architecture a;
    a.family = model.family;
    a.widths = model.widths;
    a.head_bias = model.head_bias;
    a.channels = meta.channels;
    a.height = meta.height;
    a.width = meta.width;
    a.tap = method.tap;
    a.validate();
    return a;
  }
};

namespace config_detail {

struct Field {
  std::string section;
  std::string key;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  [[nodiscard]] std::string name() const { return section + "." + key; }
};

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

template <typename T>
T parse_number(const std::string& field, const std::string& text) {
  T v{};
  const auto* end = text.data() + text.size();
  const auto r = std::from_chars(text.data(), end, v);
  if (text.empty() || r.ec != std::errc() || r.ptr != end) {
    throw ConfigError(field + ": cannot parse '" + text + "' as a number");
  }
  return v;
}

inline bool parse_bool(const std::string& field, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw ConfigError(field + ": expected true or false, got '" + text + "'");
}

inline std::vector<int> parse_int_list(const std::string& field, const std::string& text) {
  std::vector<int> out;
  std::istringstream is(text);
  std::string part;
  while (std::getline(is, part, ',')) out.push_back(parse_number<int>(field, trim(part)));
  if (out.empty()) throw ConfigError(field + ": empty list");
  return out;
}

inline std::string join(const std::vector<int>& v) {
  std::string s;
  for (size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

/// Field bound to a member reached through `ref`.
template <typename T, typename Ref>
Field make_field(std::string section, std::string key, Ref ref) {
  Field f;
  f.section = std::move(section);
  f.key = std::move(key);
  const std::string name = f.name();
  f.get = [ref](const ExperimentConfig& c) -> std::string {
    const T& v = ref(const_cast<ExperimentConfig&>(c));
    if constexpr (std::is_same_v<T, std::string>) {
      return v;
    } else if constexpr (std::is_same_v<T, bool>) {
      return v ? "true" : "false";
    } else if constexpr (std::is_same_v<T, std::vector<int>>) {
      return join(v);
    } else if constexpr (std::is_floating_point_v<T>) {
      return format_number(v);
    } else {
      return std::to_string(v);
    }
  };
  f.set = [ref, name](ExperimentConfig& c, const std::string& text) {
    T& v = ref(c);
    if constexpr (std::is_same_v<T, std::string>) {
      v = text;
    } else if constexpr (std::is_same_v<T, bool>) {
      v = parse_bool(name, text);
    } else if constexpr (std::is_same_v<T, std::vector<int>>) {
      v = parse_int_list(name, text);
    } else {
      v = parse_number<T>(name, text);
    }
  };
  return f;
}

#define GFR_FIELD(T, section, key, expr) \
  make_field<T>(section, key, [](ExperimentConfig& c) -> T& { return expr; })

inline const std::vector<Field>& fields() {
  static const std::vector<Field> table{
      GFR_FIELD(std::string, "dataset", "source", c.dataset.source),
      GFR_FIELD(std::string, "dataset", "path", c.dataset.path),
      GFR_FIELD(int, "dataset", "classes", c.dataset.classes),
      GFR_FIELD(int, "dataset", "image_side", c.dataset.image_side),
      GFR_FIELD(int, "dataset", "train_per_class", c.dataset.train_per_class),
      GFR_FIELD(int, "dataset", "test_per_class", c.dataset.test_per_class),
      GFR_FIELD(std::uint64_t, "dataset", "seed", c.dataset.seed),
      GFR_FIELD(std::string, "dataset", "normalization", c.dataset.normalization),
      GFR_FIELD(double, "split", "first_task_fraction", c.split.first_task_fraction),
      GFR_FIELD(int, "split", "num_remaining_tasks", c.split.num_remaining_tasks),
      GFR_FIELD(std::uint64_t, "split", "seed", c.split.seed),
      GFR_FIELD(std::string, "model", "family", c.model.family),
      GFR_FIELD(std::vector<int>, "model", "widths", c.model.widths),
      GFR_FIELD(bool, "model", "head_bias", c.model.head_bias),
      GFR_FIELD(std::string, "method", "name", c.method.method),
      GFR_FIELD(double, "method", "distillation", c.method.distillation),
      GFR_FIELD(double, "method", "replay_ratio", c.method.replay_ratio),
      GFR_FIELD(double, "method", "lwf_temperature", c.method.lwf_temperature),
      GFR_FIELD(double, "method", "lwf_weight", c.method.lwf_weight),
      GFR_FIELD(std::string, "method", "tap", c.method.tap),
      GFR_FIELD(std::string, "generator", "variant", c.generator_variant),
      GFR_FIELD(std::string, "generator", "covariance", c.method.covariance),
      GFR_FIELD(int, "generator", "latent_dim", c.method.gan.latent_dim),
      GFR_FIELD(std::vector<int>, "generator", "hidden", c.method.gan.hidden),
      GFR_FIELD(double, "generator", "slope", c.method.gan.slope),
      GFR_FIELD(bool, "generator", "relu_output", c.method.gan.relu_output),
      GFR_FIELD(std::string, "generator", "lipschitz", c.method.gan.lipschitz),
      GFR_FIELD(double, "generator", "lambda_gp", c.method.gan.lambda_gp),
      GFR_FIELD(double, "generator", "clip_value", c.method.gan.clip_value),
      GFR_FIELD(int, "generator", "n_critic", c.method.gan.n_critic),
      GFR_FIELD(double, "generator", "alignment_weight", c.method.gan.alignment_weight),
      GFR_FIELD(int, "training", "epochs", c.method.epochs),
      GFR_FIELD(int, "training", "batch_size", c.method.batch_size),
      GFR_FIELD(double, "training", "lr", c.method.lr),
      GFR_FIELD(bool, "training", "augment", c.method.augment),
      GFR_FIELD(int, "training", "augment_pad", c.method.augment_pad),
      GFR_FIELD(double, "training", "flip_probability", c.method.flip_probability),
      GFR_FIELD(std::string, "training", "batchnorm", c.method.batchnorm),
      GFR_FIELD(int, "training", "gan_epochs", c.method.gan.epochs),
      GFR_FIELD(int, "training", "gan_batch_size", c.method.gan.batch_size),
      GFR_FIELD(double, "training", "gan_lr", c.method.gan.lr),
      GFR_FIELD(double, "training", "gan_beta1", c.method.gan.beta1),
      GFR_FIELD(double, "training", "gan_beta2", c.method.gan.beta2),
      GFR_FIELD(bool, "training", "gan_lr_decay", c.method.gan.lr_decay),
      GFR_FIELD(std::uint64_t, "training", "seed", c.seed),
      GFR_FIELD(std::string, "output", "name", c.output.name),
      GFR_FIELD(std::string, "output", "dir", c.output.dir),
  };
  return table;
}

#undef GFR_FIELD

}  // namespace config_detail

inline void ExperimentConfig::validate() const {
  if (dataset.source != "synthetic" && dataset.source != "directory") {
    throw ConfigError("dataset.source must be synthetic or directory, got '" + dataset.source + "'");
  }
  if (dataset.source == "directory" && dataset.path.empty()) throw ConfigError("dataset.path is required for a directory source");
  if (dataset.source == "synthetic") {
    if (dataset.classes < 1) throw ConfigError("dataset.classes must be positive");
    if (dataset.image_side < 1) throw ConfigError("dataset.image_side must be positive");
    if (dataset.train_per_class < 2) throw ConfigError("dataset.train_per_class must be at least 2");
    if (dataset.test_per_class < 1) throw ConfigError("dataset.test_per_class must be positive");
  }
  if (dataset.normalization != "stored" && dataset.normalization != "fit" && dataset.normalization != "none") {
    throw ConfigError("dataset.normalization must be stored, fit or none, got '" + dataset.normalization + "'");
  }
  if (!(split.first_task_fraction > 0 && split.first_task_fraction <= 1)) {
    throw ConfigError("split.first_task_fraction must lie in (0,1]");
  }
  if (split.num_remaining_tasks < 0) throw ConfigError("split.num_remaining_tasks must be non-negative");
  if (model.family != "smallcnn" && model.family != "resnet18") {
    throw ConfigError("model.family must be smallcnn or resnet18, got '" + model.family + "'");
  }
  if (model.widths.size() != 4) throw ConfigError("model.widths needs exactly 4 entries");
  for (int w : model.widths)
    if (w <= 0) throw ConfigError("model.widths must be positive");
  method.validate();
  if (generator_variant != "auto" && generator_variant != "gan" && generator_variant != "gaussian") {
    throw ConfigError("generator.variant must be auto, gan or gaussian, got '" + generator_variant + "'");
  }
  if ((generator_variant == "gan" && method.method == "ours-gaussian") ||
      (generator_variant == "gaussian" && method.method == "ours-gan")) {
    throw ConfigError("generator.variant '" + generator_variant + "' contradicts method.name '" + method.method + "'");
  }
  if (output.name.empty() || output.name.find('/') != std::string::npos) {
    throw ConfigError("output.name must be a non-empty name without '/'");
  }
}

inline std::string ExperimentConfig::canonical() const {
  std::ostringstream os;
  std::string section;
  for (const auto& f : config_detail::fields()) {
    if (f.section != section) {
      if (!section.empty()) os << '\n';
      section = f.section;
      os << '[' << section << "]\n";
    }
    os << f.key << " = " << f.get(*this) << '\n';
  }
  return os.str();
}

/// Parse INI text; unknown sections or keys, duplicates and malformed values are errors.
inline ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig cfg;
  std::istringstream is(text);
  std::string line, section;
  std::vector<std::string> seen;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find_first_of("#;");
    if (hash != std::string::npos) line.erase(hash);
    line = config_detail::trim(line);
    if (line.empty()) continue;
    const std::string where = "line " + std::to_string(lineno) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + "malformed section header");
      section = config_detail::trim(line.substr(1, line.size() - 2));
      const auto& fs = config_detail::fields();
      if (std::none_of(fs.begin(), fs.end(), [&](const auto& f) { return f.section == section; })) {
        throw ConfigError(where + "unknown section [" + section + "]");
      }
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
    if (section.empty()) throw ConfigError(where + "key outside of any section");
    const std::string key = config_detail::trim(line.substr(0, eq));
    const std::string value = config_detail::trim(line.substr(eq + 1));
    const auto& fs = config_detail::fields();
    auto it = std::find_if(fs.begin(), fs.end(), [&](const auto& f) { return f.section == section && f.key == key; });
    if (it == fs.end()) throw ConfigError(where + "unknown key " + section + "." + key);
    if (std::find(seen.begin(), seen.end(), it->name()) != seen.end()) {
      throw ConfigError(where + "duplicate key " + it->name());
    }
    seen.push_back(it->name());
    it->set(cfg, value);
  }
  cfg.validate();
  return cfg;
}

inline ExperimentConfig load_config(const std::filesystem::path& file) {
  std::ifstream is(file);
  if (!is) throw IoError("cannot read config " + file.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

inline void save_config(const std::filesystem::path& file, const ExperimentConfig& cfg) {
  std::ofstream os(file);
  if (!os) throw IoError("cannot write " + file.string());
  os << cfg.canonical();
  if (!os) throw IoError("write failed: " + file.string());
}

/// Dataset described by the config, normalization applied to its metadata.
inline data::Dataset load_experiment_dataset(const ExperimentConfig& cfg) {
  data::Dataset ds;
  if (cfg.dataset.source == "synthetic") {
    ds = data::make_synthetic_benchmark(cfg.dataset.classes, cfg.dataset.image_side, cfg.dataset.train_per_class,
                                        cfg.dataset.test_per_class, cfg.dataset.seed);
  } else {
    ds = data::load_dataset(cfg.dataset.path);
  }
  if (cfg.dataset.normalization == "fit") {
    data::fit_normalization(ds.meta, ds.train);
  } else if (cfg.dataset.normalization == "none") {
    ds.meta.mean.assign(static_cast<size_t>(ds.meta.channels), 0.0);
    ds.meta.std.assign(static_cast<size_t>(ds.meta.channels), 1.0);
  }
  return ds;
}

}  // namespace gfr
