#pragma once

// Datasets, disjoint-class task streams and augmentation.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "gfr/core.hpp"

namespace gfr::data {

struct DatasetMeta {
  int num_classes = 0;
  int height = 0;
  int width = 0;
  int channels = 0;
  // per-channel normalization applied to pixel/255
  std::vector<double> mean;
  std::vector<double> std;

  [[nodiscard]] int pixel_count() const { return height * width * channels; }
};

/// Stored example: raw 8-bit pixels, row-major HWC.
struct RawExample {
  std::uint32_t label = 0;
  std::vector<std::uint8_t> pixels;

  bool operator==(const RawExample&) const = default;
};

struct Dataset {
  DatasetMeta meta;
  std::vector<RawExample> train;
  std::vector<RawExample> test;
};

/// Normalized example, HWC.
template <typename S>
struct LabeledExample {
  int label = 0;
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<S> pixels;

  S& at(int y, int x, int c) { return pixels[(static_cast<size_t>(y) * width + x) * channels + c]; }
  [[nodiscard]] S at(int y, int x, int c) const { return pixels[(static_cast<size_t>(y) * width + x) * channels + c]; }
};

template <typename S>
LabeledExample<S> normalize(const RawExample& raw, const DatasetMeta& meta) {
  if (static_cast<int>(raw.pixels.size()) != meta.pixel_count()) {
    throw InputError("example has " + std::to_string(raw.pixels.size()) + " bytes, descriptor expects " +
                     std::to_string(meta.pixel_count()));
  }
  if (static_cast<int>(raw.label) >= meta.num_classes) {
    throw InputError("label " + std::to_string(raw.label) + " outside vocabulary of " +
                     std::to_string(meta.num_classes));
  }
  LabeledExample<S> ex;
  ex.label = static_cast<int>(raw.label);
  ex.height = meta.height;
  ex.width = meta.width;
  ex.channels = meta.channels;
  ex.pixels.resize(raw.pixels.size());
  for (size_t i = 0; i < raw.pixels.size(); ++i) {
    const int c = static_cast<int>(i % meta.channels);
    ex.pixels[i] = static_cast<S>((raw.pixels[i] / 255.0 - meta.mean[c]) / meta.std[c]);
  }
  return ex;
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentPolicy {
  int pad = 4;
  int crop = 0;  // 0: same as the input side
  double flip_probability = 0.5;
  bool random = true;  // false: deterministic center crop, no flip

  static AugmentPolicy train_default() { return {}; }
  static AugmentPolicy test_time() { return {0, 0, 0.0, false}; }
};

/// Zero-pad (in normalized space), crop and optionally mirror horizontally.
template <typename S>
LabeledExample<S> augment(const LabeledExample<S>& ex, const AugmentPolicy& policy, Rng& rng) {
  const int crop_h = policy.crop > 0 ? policy.crop : ex.height;
  const int crop_w = policy.crop > 0 ? policy.crop : ex.width;
  const int ph = ex.height + 2 * policy.pad, pw = ex.width + 2 * policy.pad;
  if (policy.pad < 0 || crop_h > ph || crop_w > pw) {
    throw ConfigError("crop " + std::to_string(crop_h) + "x" + std::to_string(crop_w) +
                      " larger than padded image " + std::to_string(ph) + "x" + std::to_string(pw));
  }
  int oy = (ph - crop_h) / 2, ox = (pw - crop_w) / 2;
  bool flip = false;
  if (policy.random) {
    oy = uniform_int(rng, 0, ph - crop_h);
    ox = uniform_int(rng, 0, pw - crop_w);
    flip = policy.flip_probability > 0 && uniform<double>(rng, 0.0, 1.0) < policy.flip_probability;
  }
  LabeledExample<S> out;
  out.label = ex.label;
  out.height = crop_h;
  out.width = crop_w;
  out.channels = ex.channels;
  out.pixels.assign(static_cast<size_t>(crop_h) * crop_w * ex.channels, S(0));
  for (int y = 0; y < crop_h; ++y) {
    const int sy = y + oy - policy.pad;
    if (sy < 0 || sy >= ex.height) continue;
    for (int x = 0; x < crop_w; ++x) {
      const int tx = flip ? crop_w - 1 - x : x;
      const int sx = tx + ox - policy.pad;
      if (sx < 0 || sx >= ex.width) continue;
      for (int c = 0; c < ex.channels; ++c) out.at(y, x, c) = ex.at(sy, sx, c);
    }
  }
  return out;
}

/// Assemble an NCHW batch from normalized examples.
template <typename S>
Tensor<S> to_tensor(const std::vector<LabeledExample<S>>& examples) {
  if (examples.empty()) return {};
  const auto& f = examples.front();
  Tensor<S> t(static_cast<int>(examples.size()), f.channels, f.height, f.width);
  for (int i = 0; i < t.n(); ++i) {
    const auto& ex = examples[static_cast<size_t>(i)];
    if (ex.height != f.height || ex.width != f.width || ex.channels != f.channels) {
      throw InputError("batch examples differ in shape");
    }
    S* dst = t.sample(i);
    for (int c = 0; c < ex.channels; ++c)
      for (int y = 0; y < ex.height; ++y)
        for (int x = 0; x < ex.width; ++x) dst[(c * ex.height + y) * ex.width + x] = ex.at(y, x, c);
  }
  return t;
}

/// Batch of raw examples selected by index, optionally augmented.
template <typename S>
Tensor<S> make_batch(const std::vector<RawExample>& split, const DatasetMeta& meta, std::span<const int> indices,
                     const AugmentPolicy* policy, Rng& rng) {
  std::vector<LabeledExample<S>> exs;
  exs.reserve(indices.size());
  for (int idx : indices) {
    auto ex = normalize<S>(split.at(static_cast<size_t>(idx)), meta);
    exs.push_back(policy ? augment(ex, *policy, rng) : std::move(ex));
  }
  return to_tensor(exs);
}

// ---------------------------------------------------------------------------
// Synthetic data

namespace detail {

struct ClassPattern {
  double cx, cy, radius;
  std::array<double, 3> color;
  std::array<double, 3> background;
  double stripe_angle, stripe_freq, stripe_amp;
};

inline ClassPattern class_pattern(int cls, int side, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0xC1A55ULL, static_cast<std::uint64_t>(cls)));
  ClassPattern p{};
  const double margin = side * 0.25;
  p.cx = uniform<double>(rng, margin, side - margin);
  p.cy = uniform<double>(rng, margin, side - margin);
  p.radius = uniform<double>(rng, side * 0.12, side * 0.22);
  for (auto& c : p.color) c = uniform<double>(rng, 0.1, 0.95);
  for (auto& c : p.background) c = uniform<double>(rng, 0.3, 0.6);
  p.stripe_angle = uniform<double>(rng, 0.0, 3.14159265358979);
  p.stripe_freq = uniform<double>(rng, 0.6, 1.6);
  p.stripe_amp = uniform<double>(rng, 0.05, 0.15);
  return p;
}

inline RawExample render(const ClassPattern& p, int cls, int side, Rng& rng) {
  RawExample ex;
  ex.label = static_cast<std::uint32_t>(cls);
  ex.pixels.resize(static_cast<size_t>(side) * side * 3);
  const double jitter = side / 8.0;
  const double cx = p.cx + uniform<double>(rng, -jitter, jitter);
  const double cy = p.cy + uniform<double>(rng, -jitter, jitter);
  const double r = p.radius * uniform<double>(rng, 0.85, 1.15);
  const double gain = uniform<double>(rng, 0.8, 1.2);
  // distractor blob of random colour and position, shared by no class
  const double dx = uniform<double>(rng, 0.0, side), dy = uniform<double>(rng, 0.0, side);
  const double dr = side * uniform<double>(rng, 0.08, 0.15);
  std::array<double, 3> dcol{};
  for (auto& c : dcol) c = uniform<double>(rng, 0.0, 1.0);
  const double phase = uniform<double>(rng, 0.0, 6.2831853);
  const double ca = std::cos(p.stripe_angle), sa = std::sin(p.stripe_angle);
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) {
      const double blob = std::exp(-((x - cx) * (x - cx) + (y - cy) * (y - cy)) / (2 * r * r));
      const double dist = std::exp(-((x - dx) * (x - dx) + (y - dy) * (y - dy)) / (2 * dr * dr));
      const double stripe = p.stripe_amp * std::sin(p.stripe_freq * (ca * x + sa * y) + phase);
      for (int c = 0; c < 3; ++c) {
        double v = p.background[c] + stripe;
        v = v * (1 - blob) + gain * p.color[c] * blob;
        v = v * (1 - 0.7 * dist) + 0.7 * dcol[c] * dist;
        v += 0.06 * standard_normal<double>(rng);
        ex.pixels[(static_cast<size_t>(y) * side + x) * 3 + c] =
            static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
      }
    }
  }
  return ex;
}

inline std::vector<RawExample> render_split(int num_classes, int side, int per_class, std::uint64_t seed,
                                            std::uint64_t split_tag) {
  if (num_classes <= 0 || side <= 0 || per_class <= 0) {
    throw ConfigError("synthetic dataset arguments must be positive");
  }
  std::vector<RawExample> out;
  out.reserve(static_cast<size_t>(num_classes) * per_class);
  for (int c = 0; c < num_classes; ++c) {
    const auto pattern = class_pattern(c, side, seed);
    Rng rng(derive_seed(seed, split_tag, static_cast<std::uint64_t>(c)));
    for (int i = 0; i < per_class; ++i) out.push_back(render(pattern, c, side, rng));
  }
  return out;
}

}  // namespace detail

/// `samples_per_class` seeded examples per class, 3-channel square images.
inline std::vector<RawExample> make_synthetic_dataset(int num_classes, int image_side, int samples_per_class,
                                                      std::uint64_t seed) {
  return detail::render_split(num_classes, image_side, samples_per_class, seed, 1);
}

/// Train and test splits drawn from the same class patterns.
inline Dataset make_synthetic_benchmark(int num_classes, int image_side, int train_per_class, int test_per_class,
                                        std::uint64_t seed) {
  Dataset ds;
  ds.train = detail::render_split(num_classes, image_side, train_per_class, seed, 1);
  ds.test = detail::render_split(num_classes, image_side, test_per_class, seed, 2);
  ds.meta.num_classes = num_classes;
  ds.meta.height = ds.meta.width = image_side;
  ds.meta.channels = 3;
  ds.meta.mean.assign(3, 0.5);
  ds.meta.std.assign(3, 0.25);
  return ds;
}

/// Per-channel mean/std of pixel/255 over a split.
inline void fit_normalization(DatasetMeta& meta, const std::vector<RawExample>& split) {
  std::vector<double> s(static_cast<size_t>(meta.channels), 0.0), ss(static_cast<size_t>(meta.channels), 0.0);
  double count = 0;
  for (const auto& ex : split) {
    for (size_t i = 0; i < ex.pixels.size(); ++i) {
      const double v = ex.pixels[i] / 255.0;
      s[i % meta.channels] += v;
      ss[i % meta.channels] += v * v;
    }
    count += static_cast<double>(meta.height) * meta.width;
  }
  meta.mean.assign(static_cast<size_t>(meta.channels), 0.5);
  meta.std.assign(static_cast<size_t>(meta.channels), 0.25);
  if (count == 0) return;
  for (int c = 0; c < meta.channels; ++c) {
    meta.mean[c] = s[c] / count;
    meta.std[c] = std::max(1e-3, std::sqrt(std::max(0.0, ss[c] / count - meta.mean[c] * meta.mean[c])));
  }
}

// ---------------------------------------------------------------------------
// Task streams

struct TaskSpec {
  int index = 0;             // 1-based
  std::vector<int> classes;  // dataset class ids, in stream order
  std::vector<int> train;    // indices into Dataset::train
  std::vector<int> test;     // indices into Dataset::test
};

struct TaskStream {
  std::shared_ptr<const Dataset> dataset;
  std::vector<TaskSpec> tasks;
  std::vector<int> class_order;
  std::uint64_t seed = 0;

  [[nodiscard]] int num_tasks() const { return static_cast<int>(tasks.size()); }
  [[nodiscard]] const TaskSpec& task(int t) const { return tasks.at(static_cast<size_t>(t - 1)); }

  /// Total classes of tasks 1..t.
  [[nodiscard]] int classes_through(int t) const {
    int k = 0;
    for (int j = 0; j < t; ++j) k += static_cast<int>(tasks[static_cast<size_t>(j)].classes.size());
    return k;
  }

  /// Position of each dataset class in the stream order (head row), -1 if absent.
  [[nodiscard]] std::vector<int> head_index() const {
    std::vector<int> idx(static_cast<size_t>(dataset->meta.num_classes), -1);
    for (size_t i = 0; i < class_order.size(); ++i) idx[static_cast<size_t>(class_order[i])] = static_cast<int>(i);
    return idx;
  }
};

inline std::vector<int> seeded_permutation(int n, std::uint64_t seed) {
  std::vector<int> perm(static_cast<size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(derive_seed(seed, 0x0DE5ULL));
  for (int i = n - 1; i > 0; --i) std::swap(perm[static_cast<size_t>(i)], perm[static_cast<size_t>(uniform_int(rng, 0, i))]);
  return perm;
}

/// First task gets floor(fraction·K) classes of the seeded order, the rest is split evenly.
inline TaskStream build_task_stream(std::shared_ptr<const Dataset> dataset, double first_task_fraction,
                                    int num_remaining_tasks, std::uint64_t seed) {
  const int k = dataset->meta.num_classes;
  if (!(first_task_fraction > 0.0 && first_task_fraction <= 1.0)) {
    throw ConfigError("first_task_fraction must lie in (0,1], got " + format_number(first_task_fraction));
  }
  if (num_remaining_tasks < 0) throw ConfigError("num_remaining_tasks must be non-negative");
  const int first = static_cast<int>(std::floor(first_task_fraction * k + 1e-9));
  if (first == 0) {
    throw ConfigError("first_task_fraction " + format_number(first_task_fraction) + " of " + std::to_string(k) +
                      " classes yields an empty first task");
  }
  const int remaining = k - first;
  if (num_remaining_tasks == 0 && remaining > 0) {
    throw ConfigError(std::to_string(remaining) + " classes left over with zero remaining tasks");
  }
  if (num_remaining_tasks > 0 && remaining % num_remaining_tasks != 0) {
    throw ConfigError(std::to_string(remaining) + " remaining classes not divisible by " +
                      std::to_string(num_remaining_tasks) + " tasks");
  }
  if (num_remaining_tasks > 0 && remaining == 0) {
    throw ConfigError("no classes left for " + std::to_string(num_remaining_tasks) + " remaining tasks");
  }

  TaskStream stream;
  stream.dataset = dataset;
  stream.seed = seed;
  stream.class_order = seeded_permutation(k, seed);

  std::vector<int> sizes{first};
  for (int i = 0; i < num_remaining_tasks; ++i) sizes.push_back(remaining / num_remaining_tasks);

  std::vector<int> task_of(static_cast<size_t>(k), -1);
  size_t pos = 0;
  for (size_t t = 0; t < sizes.size(); ++t) {
    TaskSpec spec;
    spec.index = static_cast<int>(t) + 1;
    for (int i = 0; i < sizes[t]; ++i) {
      const int cls = stream.class_order[pos++];
      spec.classes.push_back(cls);
      task_of[static_cast<size_t>(cls)] = static_cast<int>(t);
    }
    stream.tasks.push_back(std::move(spec));
  }
  auto assign = [&](const std::vector<RawExample>& split, auto member) {
    for (size_t i = 0; i < split.size(); ++i) {
      const auto lbl = split[i].label;
      if (static_cast<int>(lbl) >= k) throw InputError("label " + std::to_string(lbl) + " outside vocabulary");
      (stream.tasks[static_cast<size_t>(task_of[lbl])].*member).push_back(static_cast<int>(i));
    }
  };
  assign(dataset->train, &TaskSpec::train);
  assign(dataset->test, &TaskSpec::test);
  return stream;
}

// ---------------------------------------------------------------------------
// On-disk layout: `meta` text file plus `train.bin` / `test.bin` record files.

inline void write_meta(const DatasetMeta& meta, const std::filesystem::path& file) {
  std::ofstream os(file);
  if (!os) throw IoError("cannot write " + file.string());
  os << "classes " << meta.num_classes << "\nheight " << meta.height << "\nwidth " << meta.width << "\nchannels "
     << meta.channels << "\nmean";
  for (double m : meta.mean) os << ' ' << format_number(m);
  os << "\nstd";
  for (double s : meta.std) os << ' ' << format_number(s);
  os << '\n';
}

inline DatasetMeta read_meta(const std::filesystem::path& file) {
  std::ifstream is(file);
  if (!is) throw IoError("cannot read " + file.string());
  DatasetMeta meta;
  std::string line;
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    std::string key;
    if (!(ls >> key)) continue;
    if (key == "classes") ls >> meta.num_classes;
    else if (key == "height") ls >> meta.height;
    else if (key == "width") ls >> meta.width;
    else if (key == "channels") ls >> meta.channels;
    else if (key == "mean" || key == "std") {
      auto& v = key == "mean" ? meta.mean : meta.std;
      double x;
      while (ls >> x) v.push_back(x);
    } else {
      throw IoError("unknown key '" + key + "' in " + file.string());
    }
    if (ls.fail() && !ls.eof()) throw IoError("malformed line '" + line + "' in " + file.string());
  }
  if (meta.num_classes <= 0 || meta.height <= 0 || meta.width <= 0 || meta.channels <= 0 ||
      static_cast<int>(meta.mean.size()) != meta.channels || static_cast<int>(meta.std.size()) != meta.channels) {
    throw IoError("incomplete dataset descriptor " + file.string());
  }
  return meta;
}

inline void write_split(const std::vector<RawExample>& split, const DatasetMeta& meta,
                        const std::filesystem::path& file) {
  std::ofstream os(file, std::ios::binary);
  if (!os) throw IoError("cannot write " + file.string());
  for (const auto& ex : split) {
    if (static_cast<int>(ex.pixels.size()) != meta.pixel_count()) throw InputError("record size mismatch");
    binio::write_u32(os, ex.label);
    os.write(reinterpret_cast<const char*>(ex.pixels.data()), static_cast<std::streamsize>(ex.pixels.size()));
  }
  if (!os) throw IoError("write failed: " + file.string());
}

inline std::vector<RawExample> read_split(const DatasetMeta& meta, const std::filesystem::path& file) {
  std::ifstream is(file, std::ios::binary | std::ios::ate);
  if (!is) throw IoError("cannot read " + file.string());
  const auto bytes = static_cast<std::uint64_t>(is.tellg());
  const std::uint64_t rec = 4 + static_cast<std::uint64_t>(meta.pixel_count());
  if (bytes % rec != 0) throw IoError("truncated split file " + file.string());
  is.seekg(0);
  std::vector<RawExample> out(bytes / rec);
  for (auto& ex : out) {
    ex.label = binio::read_u32(is);
    if (static_cast<int>(ex.label) >= meta.num_classes) throw IoError("label out of range in " + file.string());
    ex.pixels.resize(static_cast<size_t>(meta.pixel_count()));
    is.read(reinterpret_cast<char*>(ex.pixels.data()), static_cast<std::streamsize>(ex.pixels.size()));
    if (!is) throw IoError("short read in " + file.string());
  }
  return out;
}

inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_meta(ds.meta, dir / "meta");
  write_split(ds.train, ds.meta, dir / "train.bin");
  write_split(ds.test, ds.meta, dir / "test.bin");
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  ds.meta = read_meta(dir / "meta");
  ds.train = read_split(ds.meta, dir / "train.bin");
  ds.test = read_split(ds.meta, dir / "test.bin");
  return ds;
}

// ---------------------------------------------------------------------------
// CIFAR binary archives (extracted directory).
//   CIFAR-10:  data_batch_{1..5}.bin + test_batch.bin, records [label u8][3072 bytes CHW]
//   CIFAR-100: train.bin + test.bin, records [coarse u8][fine u8][3072 bytes CHW]

namespace detail {

inline std::vector<RawExample> read_cifar_file(const std::filesystem::path& file, int label_bytes) {
  std::ifstream is(file, std::ios::binary | std::ios::ate);
  if (!is) throw IoError("cannot read " + file.string());
  const auto bytes = static_cast<std::uint64_t>(is.tellg());
  const std::uint64_t rec = static_cast<std::uint64_t>(label_bytes) + 3072;
  if (bytes == 0 || bytes % rec != 0) throw IoError("corrupt CIFAR file " + file.string());
  is.seekg(0);
  std::vector<RawExample> out(bytes / rec);
  std::vector<std::uint8_t> buf(rec);
  for (auto& ex : out) {
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(rec));
    if (!is) throw IoError("short read in " + file.string());
    ex.label = buf[static_cast<size_t>(label_bytes - 1)];
    ex.pixels.resize(3072);
    const std::uint8_t* px = buf.data() + label_bytes;
    for (int c = 0; c < 3; ++c)
      for (int i = 0; i < 1024; ++i) ex.pixels[static_cast<size_t>(i) * 3 + c] = px[c * 1024 + i];
  }
  return out;
}

}  // namespace detail

inline Dataset import_cifar(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  Dataset ds;
  ds.meta.height = ds.meta.width = 32;
  ds.meta.channels = 3;
  if (fs::exists(dir / "test_batch.bin")) {
    ds.meta.num_classes = 10;
    for (int b = 1; b <= 5; ++b) {
      const auto f = dir / ("data_batch_" + std::to_string(b) + ".bin");
      if (!fs::exists(f)) throw IoError("missing " + f.string());
      auto part = detail::read_cifar_file(f, 1);
      ds.train.insert(ds.train.end(), part.begin(), part.end());
    }
    ds.test = detail::read_cifar_file(dir / "test_batch.bin", 1);
  } else if (fs::exists(dir / "train.bin") && fs::exists(dir / "test.bin")) {
    ds.meta.num_classes = 100;
    ds.train = detail::read_cifar_file(dir / "train.bin", 2);
    ds.test = detail::read_cifar_file(dir / "test.bin", 2);
  } else {
    throw IoError("unrecognized archive layout in " + dir.string());
  }
  for (const auto* split : {&ds.train, &ds.test})
    for (const auto& ex : *split)
      if (static_cast<int>(ex.label) >= ds.meta.num_classes) throw IoError("label out of range in " + dir.string());
  fit_normalization(ds.meta, ds.train);
  return ds;
}

}  // namespace gfr::data
