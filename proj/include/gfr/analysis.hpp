#pragma once

// Layer-wise representational similarity (SVCCA) and feature export.

#include <Eigen/SVD>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "gfr/data.hpp"
#include "gfr/generator.hpp"
#include "gfr/model.hpp"

namespace gfr::analysis {

struct ActivationMatrix {
  Mat<double> values;  // n × p
  std::string layer;
  std::string source;
  std::string probe;
};

enum class SpatialMode { pooled, locations };

inline SpatialMode parse_spatial_mode(const std::string& s) {
  if (s == "pooled") return SpatialMode::pooled;
  if (s == "locations") return SpatialMode::locations;
  throw ConfigError("spatial mode must be pooled or locations, got '" + s + "'");
}

/// n × c (pooled) or (n·h·w) × c (locations) view of a stage output.
template <typename S>
Mat<double> spatial_matrix(const Tensor<S>& t, SpatialMode mode) {
  const int plane = t.plane();
  if (mode == SpatialMode::pooled) {
    Mat<double> out(t.n(), t.c);
    for (int i = 0; i < t.n(); ++i) {
      const S* s = t.sample(i);
      for (int ch = 0; ch < t.c; ++ch) {
        double acc = 0;
        for (int k = 0; k < plane; ++k) acc += static_cast<double>(s[ch * plane + k]);
        out(i, ch) = acc / plane;
      }
    }
    return out;
  }
  Mat<double> out(static_cast<Eigen::Index>(t.n()) * plane, t.c);
  for (int i = 0; i < t.n(); ++i) {
    const S* s = t.sample(i);
    for (int k = 0; k < plane; ++k)
      for (int ch = 0; ch < t.c; ++ch) out(static_cast<Eigen::Index>(i) * plane + k, ch) = static_cast<double>(s[ch * plane + k]);
  }
  return out;
}

/// Activations at the named stages (block1..block4, feature), in inference mode.
template <typename S>
std::vector<ActivationMatrix> collect_activations(const model::Model<S>& m, const std::vector<std::string>& taps,
                                                  const Tensor<S>& batch, SpatialMode mode = SpatialMode::pooled,
                                                  const std::string& source = "", const std::string& probe = "") {
  const auto& arch = m.extractor.architecture();
  std::vector<int> wanted;
  for (const auto& t : taps) wanted.push_back(arch.stage_index(t));
  auto stages = m.extractor.infer_stages(batch);
  if (m.head.has_trunk()) {
    auto rest = m.head.infer_stages(stages.back().data);
    stages.insert(stages.end(), rest.begin(), rest.end());
  }
  std::vector<ActivationMatrix> out;
  for (size_t i = 0; i < taps.size(); ++i) {
    out.push_back({spatial_matrix(stages[static_cast<size_t>(wanted[i])], mode), taps[i], source, probe});
  }
  return out;
}

struct SvccaResult {
  double similarity = 0;
  int dims_a = 0;
  int dims_b = 0;
  std::vector<double> correlations;
};

namespace detail {

// Left singular vectors spanning the smallest rank that keeps ≥ threshold of the variance.
inline Mat<double> truncated_basis(const Mat<double>& x, double threshold, const char* side) {
  const Mat<double> centered = x.rowwise() - x.colwise().mean();
  Eigen::BDCSVD<Mat<double>> svd(centered, Eigen::ComputeThinU);
  const Vec<double> var = svd.singularValues().array().square();
  const double total = var.sum();
  if (!(total > 0) || !std::isfinite(total)) {
    throw AnalysisError(std::string("activation matrix ") + side + " has rank 0 after centering");
  }
  double acc = 0;
  Eigen::Index r = 0;
  while (r < var.size()) {
    acc += var[r++];
    if (acc >= threshold * total * (1 - 1e-12)) break;
  }
  return svd.matrixU().leftCols(r);
}

}  // namespace detail

/// Center, SVD-truncate each side to `threshold` of its variance, then the mean canonical correlation
/// between the retained subspaces.
inline SvccaResult svcca(const Mat<double>& a, const Mat<double>& b, double threshold = 0.99) {
  if (!(threshold > 0 && threshold <= 1)) throw ConfigError("SVCCA variance threshold must lie in (0,1]");
  if (a.rows() != b.rows()) {
    throw InputError("SVCCA inputs need the same number of datapoints (" + std::to_string(a.rows()) + " vs " +
                     std::to_string(b.rows()) + ")");
  }
  if (!a.allFinite() || !b.allFinite()) throw AnalysisError("SVCCA input contains non-finite values");
  const Mat<double> ua = detail::truncated_basis(a, threshold, "A");
  const Mat<double> ub = detail::truncated_basis(b, threshold, "B");
  Eigen::JacobiSVD<Mat<double>> cca(ua.transpose() * ub);
  SvccaResult r;
  r.dims_a = static_cast<int>(ua.cols());
  r.dims_b = static_cast<int>(ub.cols());
  const auto& s = cca.singularValues();
  double sum = 0;
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    const double c = std::clamp(s[i], 0.0, 1.0);
    r.correlations.push_back(c);
    sum += c;
  }
  r.similarity = sum / static_cast<double>(s.size());
  return r;
}

inline double svcca_similarity(const ActivationMatrix& a, const ActivationMatrix& b, double threshold = 0.99) {
  return svcca(a.values, b.values, threshold).similarity;
}

// ---------------------------------------------------------------------------
// Forgetting curves across a run

struct CcaCell {
  std::string layer;
  int t = 0;
  int t_prime = 0;
  double similarity = 0;
  int dims_a = 0;
  int dims_b = 0;
};

struct CcaOptions {
  std::vector<std::string> taps{"block1", "block2", "block3", "block4", "feature"};
  double threshold = 0.99;
  int max_probe = 2000;
  std::uint64_t seed = 0;
  SpatialMode mode = SpatialMode::pooled;
};

/// Test indices of task t', capped at max_probe with a seeded subsample.
inline std::vector<int> probe_indices(const data::TaskStream& stream, int t_prime, int max_probe, std::uint64_t seed) {
  std::vector<int> idx = stream.task(t_prime).test;
  if (static_cast<int>(idx.size()) > max_probe) {
    Rng rng(derive_seed(seed, 0xCCAULL, static_cast<std::uint64_t>(t_prime)));
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(static_cast<size_t>(max_probe));
    std::sort(idx.begin(), idx.end());
  }
  return idx;
}

/// For each t ≤ T, t' ≤ t and layer: similarity between M_t and M_t' features on task-t' probe data.
/// `models[t-1]` is the model after task t.
template <typename S>
std::vector<CcaCell> forgetting_curves(const std::vector<model::Model<S>>& models, const data::TaskStream& stream,
                                       const CcaOptions& opt = {}) {
  if (models.empty()) throw AnalysisError("forgetting curves need at least one task checkpoint");
  if (static_cast<int>(models.size()) > stream.num_tasks()) throw AnalysisError("more checkpoints than tasks");
  const auto& ds = *stream.dataset;
  Rng unused(0);
  std::vector<CcaCell> cells;
  for (int tp = 1; tp <= static_cast<int>(models.size()); ++tp) {
    const auto idx = probe_indices(stream, tp, opt.max_probe, opt.seed);
    const auto x = data::make_batch<S>(ds.test, ds.meta, idx, nullptr, unused);
    const auto reference = collect_activations(models[static_cast<size_t>(tp - 1)], opt.taps, x, opt.mode);
    for (int t = tp; t <= static_cast<int>(models.size()); ++t) {
      const auto acts = t == tp ? reference : collect_activations(models[static_cast<size_t>(t - 1)], opt.taps, x, opt.mode);
      for (size_t l = 0; l < opt.taps.size(); ++l) {
        const auto r = svcca(acts[l].values, reference[l].values, opt.threshold);
        cells.push_back({opt.taps[l], t, tp, r.similarity, r.dims_a, r.dims_b});
      }
    }
  }
  return cells;
}

/// Loads task_<t>/{extractor,head}.ckpt for t = 1..T from a run directory.
template <typename S>
std::vector<model::Model<S>> load_task_models(const std::filesystem::path& run_dir, int tasks) {
  std::vector<model::Model<S>> out;
  for (int t = 1; t <= tasks; ++t) {
    const auto dir = run_dir / ("task_" + std::to_string(t));
    if (!std::filesystem::exists(dir / "extractor.ckpt") || !std::filesystem::exists(dir / "head.ckpt")) {
      throw AnalysisError("missing checkpoint for task " + std::to_string(t) + " in " + run_dir.string());
    }
    out.push_back(model::load_model<S>(dir / "extractor.ckpt", dir / "head.ckpt"));
  }
  return out;
}

inline void write_cca_csv(const std::filesystem::path& file, const std::vector<CcaCell>& cells) {
  std::ofstream os(file);
  if (!os) throw IoError("cannot write " + file.string());
  os << "layer,t,t_prime,similarity,dims_a,dims_b\n";
  for (const auto& c : cells) {
    os << c.layer << ',' << c.t << ',' << c.t_prime << ',' << format_number(c.similarity) << ',' << c.dims_a << ','
       << c.dims_b << '\n';
  }
  if (!os) throw IoError("write failed: " + file.string());
}

inline std::vector<CcaCell> read_cca_csv(const std::filesystem::path& file) {
  std::ifstream is(file);
  if (!is) throw IoError("cannot read " + file.string());
  std::string line;
  std::getline(is, line);
  if (line != "layer,t,t_prime,similarity,dims_a,dims_b") throw IoError("unexpected CCA header in " + file.string());
  std::vector<CcaCell> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    CcaCell c;
    std::string field;
    std::vector<std::string> f;
    while (std::getline(ls, field, ',')) f.push_back(field);
    if (f.size() != 6) throw IoError("malformed CCA line: " + line);
    c.layer = f[0];
    c.t = std::stoi(f[1]);
    c.t_prime = std::stoi(f[2]);
    c.similarity = std::stod(f[3]);
    c.dims_a = std::stoi(f[4]);
    c.dims_b = std::stoi(f[5]);
    out.push_back(c);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Feature dump: records [tag byte: 0 real, 1 generated][class u32][d f32].

struct FeatureRecord {
  bool generated = false;
  int class_id = 0;
  std::vector<float> values;
};

inline void write_feature_dump(const std::filesystem::path& file, const std::vector<FeatureRecord>& records) {
  std::ofstream os(file, std::ios::binary);
  if (!os) throw IoError("cannot write " + file.string());
  for (const auto& r : records) {
    os.put(static_cast<char>(r.generated ? 1 : 0));
    binio::write_u32(os, static_cast<std::uint32_t>(r.class_id));
    for (float v : r.values) binio::write_f32(os, v);
  }
  if (!os) throw IoError("write failed: " + file.string());
}

inline std::vector<FeatureRecord> read_feature_dump(const std::filesystem::path& file, int dim) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw IoError("cannot read " + file.string());
  std::vector<FeatureRecord> out;
  while (is.peek() != std::char_traits<char>::eof()) {
    FeatureRecord r;
    const int tag = is.get();
    if (tag != 0 && tag != 1) throw IoError("bad record tag in " + file.string());
    r.generated = tag == 1;
    r.class_id = static_cast<int>(binio::read_u32(is));
    r.values.resize(static_cast<size_t>(dim));
    for (auto& v : r.values) v = binio::read_f32(is);
    out.push_back(std::move(r));
  }
  return out;
}

/// Up to `count` real features per class (from the test split) and `count` generated ones.
/// Class ids in the records are dataset ids; the generator is addressed by head index.
template <typename S>
std::vector<FeatureRecord> export_features(const model::FeatureExtractor<S>& extractor, const data::TaskStream& stream,
                                           const gen::FeatureGenerator<S>& generator, const std::vector<int>& classes,
                                           int count, Rng& rng) {
  const auto index = stream.head_index();
  const auto& ds = *stream.dataset;
  std::vector<FeatureRecord> out;
  for (int c : classes) {
    if (c < 0 || c >= ds.meta.num_classes) throw InputError("class " + std::to_string(c) + " is not in the dataset");
    const int h = index[static_cast<size_t>(c)];
    if (!generator.covered.count(h)) throw InputError("class " + std::to_string(c) + " is not covered by the generator");
    std::vector<int> idx;
    for (size_t i = 0; i < ds.test.size(); ++i)
      if (static_cast<int>(ds.test[i].label) == c) idx.push_back(static_cast<int>(i));
    std::shuffle(idx.begin(), idx.end(), rng);
    if (static_cast<int>(idx.size()) > count) idx.resize(static_cast<size_t>(count));
    if (!idx.empty()) {
      const auto x = data::make_batch<S>(ds.test, ds.meta, idx, nullptr, rng);
      const Mat<S> u = extractor.infer(x);
      for (Eigen::Index i = 0; i < u.rows(); ++i) {
        FeatureRecord r{false, c, {}};
        for (Eigen::Index j = 0; j < u.cols(); ++j) r.values.push_back(static_cast<float>(u(i, j)));
        out.push_back(std::move(r));
      }
    }
    const Mat<S> g = gen::sample_features(generator, Labels(static_cast<size_t>(count), h), rng);
    for (Eigen::Index i = 0; i < g.rows(); ++i) {
      FeatureRecord r{true, c, {}};
      for (Eigen::Index j = 0; j < g.cols(); ++j) r.values.push_back(static_cast<float>(g(i, j)));
      out.push_back(std::move(r));
    }
  }
  return out;
}

}  // namespace gfr::analysis
