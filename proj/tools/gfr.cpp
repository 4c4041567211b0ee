// Command-line entry point: import, run, report, cca, memory, plot, export-features.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "gfr/gfr.hpp"

using namespace gfr;
namespace fs = std::filesystem;

namespace {

void require_file(const fs::path& p) {
  if (!fs::exists(p)) throw IoError("no such file or directory: " + p.string());
}

ExperimentConfig run_config(const fs::path& run_dir) {
  require_file(run_dir / "config");
  return load_config(run_dir / "config");
}

data::TaskStream stream_for(const ExperimentConfig& cfg) {
  auto ds = std::make_shared<const data::Dataset>(load_experiment_dataset(cfg));
  return data::build_task_stream(ds, cfg.split.first_task_fraction, cfg.split.num_remaining_tasks, cfg.split.seed);
}

int completed_tasks(const fs::path& run_dir) {
  require_file(run_dir / "metrics.csv");
  return eval::read_metrics_csv(run_dir / "metrics.csv").rows();
}

std::string first_line(const fs::path& file) {
  std::ifstream is(file);
  if (!is) throw IoError("cannot read " + file.string());
  std::string line;
  std::getline(is, line);
  return line;
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

// ---------------------------------------------------------------------------

struct ImportArgs {
  std::string archive;
  std::string out;
  bool force = false;
};

void cmd_import(const ImportArgs& a) {
  const fs::path out(a.out);
  require_file(a.archive);
  if (fs::exists(out) && !fs::is_empty(out)) {
    if (!a.force) throw IoError("output directory " + out.string() + " already exists (use --force to replace it)");
    fs::remove_all(out);
  }
  const auto ds = data::import_cifar(a.archive);
  data::save_dataset(ds, out);
  std::cout << "imported " << ds.train.size() + ds.test.size() << " records (" << ds.train.size() << " train, "
            << ds.test.size() << " test, " << ds.meta.num_classes << " classes) into " << out.string() << "\n";
}

struct RunArgs {
  std::string config;
  bool resume = false;
  bool force = false;
  std::optional<std::uint64_t> seed;
  std::string out;
  int stop_after = 0;
};

void cmd_run(const RunArgs& a) {
  require_file(a.config);
  auto cfg = load_config(a.config);
  if (a.seed) cfg.seed = *a.seed;
  train::RunOptions opt;
  opt.resume = a.resume;
  opt.force = a.force;
  opt.stop_after = a.stop_after;
  if (!a.out.empty()) opt.dir = a.out;
  opt.progress = [](const std::string& line) { std::cout << line << std::endl; };
  const auto r = train::run_experiment(cfg, opt);
  if (r.resumed_from > 0) std::cout << "resumed after task " << r.resumed_from << "\n";
  std::cout << "run directory: " << r.dir.string() << "\n";
}

void cmd_report(const std::string& run_dir) {
  const fs::path dir(run_dir);
  const fs::path file = fs::is_directory(dir) ? dir / "metrics.csv" : dir;
  require_file(file);
  const auto m = eval::read_metrics_csv(file);
  for (int k = 1; k <= m.rows(); ++k) {
    std::cout << "k=" << k << " avg_accuracy=" << format_number(eval::average_accuracy(m, k));
    std::cout << " avg_forgetting=" << (k >= 2 ? format_number(eval::average_forgetting(m, k)) : std::string("n/a"));
    std::cout << "\n";
  }
}

struct CcaArgs {
  std::string run_dir;
  std::string out;
  std::string taps = "block1,block2,block3,block4,feature";
  int probe = 2000;
  double threshold = 0.99;
  std::uint64_t seed = 0;
  std::string mode = "pooled";
};

void cmd_cca(const CcaArgs& a) {
  const fs::path dir(a.run_dir);
  const auto cfg = run_config(dir);
  const auto stream = stream_for(cfg);
  analysis::CcaOptions opt;
  opt.taps = split_list(a.taps);
  opt.max_probe = a.probe;
  opt.threshold = a.threshold;
  opt.seed = a.seed;
  opt.mode = analysis::parse_spatial_mode(a.mode);
  if (opt.taps.empty()) throw ConfigError("cca.taps must name at least one tap");
  if (opt.max_probe < 2) throw ConfigError("cca.probe must be at least 2");
  const auto models = analysis::load_task_models<float>(dir, completed_tasks(dir));
  const auto cells = analysis::forgetting_curves(models, stream, opt);
  const fs::path out = a.out.empty() ? dir / "cca.csv" : fs::path(a.out);
  analysis::write_cca_csv(out, cells);
  std::cout << "wrote " << cells.size() << " cells to " << out.string() << "\n";
}

void cmd_memory(const std::string& config, const std::string& out) {
  std::vector<eval::StorageReport> reports{
      eval::storage_footprint(eval::exemplar_descriptor("exemplars-2000-32x32", 2000, 32, 32)),
      eval::storage_footprint(eval::exemplar_descriptor("exemplars-2000-256x256", 2000, 256, 256)),
      eval::storage_footprint(eval::feature_gan_descriptor(512, 100)),
  };
  if (!config.empty()) {
    require_file(config);
    const auto cfg = load_config(config);
    const auto ds = load_experiment_dataset(cfg);
    const int d = cfg.architecture(ds.meta).feature_dim();
    auto desc = eval::feature_gan_descriptor(d, ds.meta.num_classes, cfg.method.gan.latent_dim, cfg.method.gan.hidden);
    desc.method = "feature-gan-config";
    reports.push_back(eval::storage_footprint(desc));
  }
  for (const auto& r : reports) std::cout << eval::render(r) << "\n";
  if (!out.empty()) {
    std::ofstream os(out);
    if (!os) throw IoError("cannot write " + out);
    os << "method,exemplar_bytes,model_bytes,total_bytes,megabytes,mebibytes\n";
    for (const auto& r : reports) {
      os << r.method << ',' << r.exemplar_bytes << ',' << r.model_bytes << ',' << r.total_bytes() << ','
         << format_number(r.megabytes()) << ',' << format_number(r.mebibytes()) << '\n';
    }
    if (!os) throw IoError("write failed: " + out);
  }
}

void cmd_plot(const std::vector<std::string>& inputs, const std::string& out) {
  std::vector<std::pair<std::string, fs::path>> metrics;
  std::vector<fs::path> cca;
  for (const auto& in : inputs) {
    const fs::path p(in);
    require_file(p);
    if (p.extension() != ".csv") throw IoError("plot reads CSV files only: " + p.string());
    const auto header = first_line(p);
    if (header == "after_task,eval_task,accuracy") {
      const auto name = p.parent_path().filename().string();
      metrics.emplace_back(name.empty() ? p.stem().string() : name, p);
    } else if (header == "layer,t,t_prime,similarity,dims_a,dims_b") {
      cca.push_back(p);
    } else {
      throw IoError("unrecognized CSV header in " + p.string());
    }
  }
  std::vector<fs::path> written;
  if (!metrics.empty()) {
    const auto w = plot::plot_metrics(metrics, out);
    written.insert(written.end(), w.begin(), w.end());
  }
  for (size_t i = 0; i < cca.size(); ++i) {
    const fs::path dir = cca.size() == 1 ? fs::path(out) : fs::path(out) / ("cca_" + std::to_string(i + 1));
    const auto w = plot::plot_cca(cca[i], dir);
    written.insert(written.end(), w.begin(), w.end());
  }
  for (const auto& p : written) std::cout << "wrote " << p.string() << "\n";
}

struct ExportArgs {
  std::string run_dir;
  int task = 0;
  std::string classes;
  int count = 200;
  std::uint64_t seed = 0;
  std::string out;
};

void cmd_export(const ExportArgs& a) {
  const fs::path dir(a.run_dir);
  const auto cfg = run_config(dir);
  if (!cfg.method.uses_generator()) throw ConfigError("method " + cfg.method.method + " has no feature generator");
  const auto stream = stream_for(cfg);
  const int task = a.task > 0 ? a.task : completed_tasks(dir);
  if (task > stream.num_tasks()) throw ConfigError("export.task exceeds the number of tasks");
  const auto tdir = train::task_dir(dir, task);
  require_file(tdir / "extractor.ckpt");
  const auto state = train::load_task<float>(tdir, task, cfg.method, stream.classes_through(task));
  std::vector<int> classes;
  if (a.classes.empty()) {
    for (int t = 1; t <= task; ++t)
      for (int c : stream.task(t).classes) classes.push_back(c);
  } else {
    for (const auto& s : split_list(a.classes)) {
      try {
        classes.push_back(std::stoi(s));
      } catch (const std::exception&) {
        throw ConfigError("export.classes: not an integer: " + s);
      }
    }
  }
  Rng rng(derive_seed(a.seed, 0xE4));
  const auto records = analysis::export_features(state.model.extractor, stream, *state.generator, classes, a.count, rng);
  const fs::path out = a.out.empty() ? dir / ("features_task_" + std::to_string(task) + ".bin") : fs::path(a.out);
  analysis::write_feature_dump(out, records);
  std::cout << "wrote " << records.size() << " records of dimension " << state.model.extractor.feature_dim() << " to "
            << out.string() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Continual learning with feature distillation and generative feature replay"};
  app.require_subcommand(1);

  ImportArgs import_args;
  auto* import = app.add_subcommand("import", "Import a binary CIFAR archive into the dataset layout");
  import->add_option("archive", import_args.archive, "Archive directory")->required();
  import->add_option("--out", import_args.out, "Output dataset directory")->required();
  import->add_flag("--force", import_args.force, "Replace an existing output directory");

  RunArgs run_args;
  auto* run = app.add_subcommand("run", "Run or resume an experiment");
  run->add_option("--config", run_args.config, "Experiment config file")->required();
  run->add_flag("--resume", run_args.resume, "Continue after the last completed task");
  run->add_flag("--force", run_args.force, "Replace an existing run directory");
  run->add_option("--seed", run_args.seed, "Override the training seed");
  run->add_option("--out", run_args.out, "Run directory (default: <output.dir>/<output.name>)");
  run->add_option("--stop-after", run_args.stop_after, "Stop once this task is complete")->group("");

  std::string report_dir;
  auto* report = app.add_subcommand("report", "Print average accuracy and forgetting per task");
  report->add_option("run", report_dir, "Run directory or metrics.csv")->required();

  CcaArgs cca_args;
  auto* cca = app.add_subcommand("cca", "SVCCA forgetting curves over a run's task checkpoints");
  cca->add_option("run", cca_args.run_dir, "Run directory")->required();
  cca->add_option("--out", cca_args.out, "Output CSV (default: <run>/cca.csv)");
  cca->add_option("--taps", cca_args.taps, "Comma-separated taps");
  cca->add_option("--probe", cca_args.probe, "Maximum probe samples per task");
  cca->add_option("--threshold", cca_args.threshold, "Retained variance for the SVD step");
  cca->add_option("--seed", cca_args.seed, "Probe subsampling seed");
  cca->add_option("--mode", cca_args.mode, "pooled or locations");

  std::string memory_config, memory_out;
  auto* memory = app.add_subcommand("memory", "Storage footprint of exemplar memories and the feature GAN");
  memory->add_option("--config", memory_config, "Also report the GAN of this experiment config");
  memory->add_option("--out", memory_out, "Write the report as CSV");

  std::vector<std::string> plot_inputs;
  std::string plot_out;
  auto* plot_cmd = app.add_subcommand("plot", "SVG curves and heatmaps from metrics.csv and cca.csv files");
  plot_cmd->add_option("inputs", plot_inputs, "CSV files")->required();
  plot_cmd->add_option("--out", plot_out, "Output directory")->required();

  ExportArgs export_args;
  auto* export_cmd = app.add_subcommand("export-features", "Dump real and generated features of a task checkpoint");
  export_cmd->add_option("run", export_args.run_dir, "Run directory")->required();
  export_cmd->add_option("--task", export_args.task, "Task checkpoint (default: last completed)");
  export_cmd->add_option("--classes", export_args.classes, "Comma-separated dataset class ids (default: all seen)");
  export_cmd->add_option("--count", export_args.count, "Records per class and kind");
  export_cmd->add_option("--seed", export_args.seed, "Sampling seed");
  export_cmd->add_option("--out", export_args.out, "Output file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? exit_code::kOk : exit_code::kConfig;
  }

  try {
    if (*import) cmd_import(import_args);
    if (*run) cmd_run(run_args);
    if (*report) cmd_report(report_dir);
    if (*cca) cmd_cca(cca_args);
    if (*memory) cmd_memory(memory_config, memory_out);
    if (*plot_cmd) cmd_plot(plot_inputs, plot_out);
    if (*export_cmd) cmd_export(export_args);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return exit_code::kConfig;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return exit_code::kIo;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return exit_code::kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code::kRuntime;
  }
  return exit_code::kOk;
}
