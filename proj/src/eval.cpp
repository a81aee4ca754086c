#include "emib/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>

#include "json.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace emib {

using nn::Graph;
using nn::Var;

const char* feature_mode_name(FeatureMode m) {
  return m == FeatureMode::Bottleneck ? "bottleneck" : "prepool";
}

FeatureMode parse_feature_mode(const std::string& s) {
  if (s == "bottleneck") return FeatureMode::Bottleneck;
  if (s == "prepool") return FeatureMode::PrePool;
  throw ConfigError("unknown feature mode: " + s + " (expected bottleneck|prepool)");
}

EyeRegion sample_eye_region(const ModelConfig& cfg, const std::array<PixelPoint, 4>& corners) {
  return eye_patch_windows(corners, cfg.grid, cfg.eye_window_rows, cfg.eye_window_cols);
}

EyeRegion sample_eye_region(const EmibModel& model, const FaceSample& sample) {
  return sample_eye_region(model.config(), sample.corners);
}

namespace {

std::vector<float> feature_of_tokens(Graph& g, const EmibModel& model,
                                     const Matrix& tokens, const MaskPlan& full,
                                     FeatureMode mode) {
  g.reset();
  Var in = g.const_view(tokens.rows, tokens.cols, tokens.data.data());
  Var latents = model.encode(g, in, full.visible);
  if (mode == FeatureMode::PrePool) return g.value_matrix(g.mean_rows(latents)).data;
  auto [z_b, inj] = model.bottleneck_inject(g, latents);
  (void)inj;
  return g.value_matrix(z_b).data;
}

int thread_count() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

}  // namespace

Matrix extract_features(const EmibModel& model, const Dataset& data,
                        std::span<const int> ids, FeatureMode mode) {
  const ModelConfig& cfg = model.config();
  if (data.image_size() != cfg.grid.image_size)
    throw ConfigError("extract_features: dataset image size does not match the model grid");
  const int d = mode == FeatureMode::Bottleneck ? cfg.bottleneck.z_dim : cfg.encoder.dim;
  Matrix out(static_cast<int>(ids.size()), d);
  const MaskPlan full = make_full_visible_plan(cfg.grid);
  const int nt = thread_count();
  std::vector<Graph> graphs;
  graphs.reserve(static_cast<size_t>(nt));
  for (int t = 0; t < nt; ++t) graphs.emplace_back(&model.params());
  std::exception_ptr err;
#pragma omp parallel for schedule(static)
  for (int i = 0; i < static_cast<int>(ids.size()); ++i) {
    try {
#ifdef _OPENMP
      Graph& g = graphs[static_cast<size_t>(omp_get_thread_num())];
#else
      Graph& g = graphs[0];
#endif
      const Matrix tokens =
          patchify(data.image_ptr(ids[static_cast<size_t>(i)]), cfg.grid);
      const auto f = feature_of_tokens(g, model, tokens, full, mode);
      std::copy(f.begin(), f.end(), out.row(i));
    } catch (...) {
#pragma omp critical
      if (!err) err = std::current_exception();
    }
  }
  if (err) std::rethrow_exception(err);
  return out;
}

Matrix extract_student_features(const StudentModel& student, const Dataset& data,
                                std::span<const int> ids) {
  if (data.image_size() != student.image_size())
    throw ConfigError("extract_student_features: dataset image size mismatch");
  Matrix out(static_cast<int>(ids.size()), student.config().z_dim);
  const int nt = thread_count();
  std::vector<Graph> graphs;
  graphs.reserve(static_cast<size_t>(nt));
  for (int t = 0; t < nt; ++t) graphs.emplace_back(&student.params());
  std::exception_ptr err;
#pragma omp parallel for schedule(static)
  for (int i = 0; i < static_cast<int>(ids.size()); ++i) {
    try {
#ifdef _OPENMP
      Graph& g = graphs[static_cast<size_t>(omp_get_thread_num())];
#else
      Graph& g = graphs[0];
#endif
      g.reset();
      const Matrix chw = hwc_to_chw(data.image(ids[static_cast<size_t>(i)]));
      Var in = g.constant(chw);
      const Matrix z = g.value_matrix(student.forward(g, in));
      std::copy(z.data.begin(), z.data.end(), out.row(i));
    } catch (...) {
#pragma omp critical
      if (!err) err = std::current_exception();
    }
  }
  if (err) std::rethrow_exception(err);
  return out;
}

GazeDirection ProbeWeights::predict(std::span<const float> features) const {
  if (static_cast<int>(features.size()) != W.cols)
    throw ConfigError("probe: feature dim mismatch");
  double out[2];
  for (int r = 0; r < 2; ++r) {
    double acc = b[r];
    const float* wr = W.row(r);
    for (int j = 0; j < W.cols; ++j) acc += static_cast<double>(wr[j]) * features[j];
    out[r] = acc;
  }
  // keep predictions inside the valid angle box
  constexpr double kHalfPi = 1.5707963267948966;
  constexpr double kPi = 3.141592653589793;
  return {std::clamp(out[0], -kHalfPi, kHalfPi), std::clamp(out[1], -kPi, kPi)};
}

namespace {

// in-place lower Cholesky; false if not positive definite
bool cholesky(std::vector<double>& a, int d) {
  for (int i = 0; i < d; ++i) {
    for (int j = 0; j <= i; ++j) {
      double s = a[static_cast<size_t>(i) * d + j];
      for (int k = 0; k < j; ++k)
        s -= a[static_cast<size_t>(i) * d + k] * a[static_cast<size_t>(j) * d + k];
      if (i == j) {
        if (s <= 0.0) return false;
        a[static_cast<size_t>(i) * d + j] = std::sqrt(s);
      } else {
        a[static_cast<size_t>(i) * d + j] = s / a[static_cast<size_t>(j) * d + j];
      }
    }
  }
  return true;
}

void chol_solve(const std::vector<double>& L, int d, double* x) {
  for (int i = 0; i < d; ++i) {
    double s = x[i];
    for (int k = 0; k < i; ++k) s -= L[static_cast<size_t>(i) * d + k] * x[k];
    x[i] = s / L[static_cast<size_t>(i) * d + i];
  }
  for (int i = d - 1; i >= 0; --i) {
    double s = x[i];
    for (int k = i + 1; k < d; ++k) s -= L[static_cast<size_t>(k) * d + i] * x[k];
    x[i] = s / L[static_cast<size_t>(i) * d + i];
  }
}

}  // namespace

ProbeWeights fit_linear_probe(const Matrix& features, const Matrix& gazes,
                              const Matrix* head_poses, double ridge) {
  const int n = features.rows;
  if (n < 1) throw ConfigError("fit_linear_probe: need at least one sample");
  if (gazes.rows != n || gazes.cols != 2)
    throw ConfigError("fit_linear_probe: gaze matrix must be n x 2");
  if (head_poses && (head_poses->rows != n || head_poses->cols != 2))
    throw ConfigError("fit_linear_probe: head pose matrix must be n x 2");
  if (ridge < 0) throw ConfigError("fit_linear_probe: ridge must be >= 0");
  const int d0 = features.cols;
  const int d = d0 + (head_poses ? 2 : 0);

  std::vector<double> x(static_cast<size_t>(n) * d);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d0; ++j) x[static_cast<size_t>(i) * d + j] = features.at(i, j);
    if (head_poses)
      for (int j = 0; j < 2; ++j)
        x[static_cast<size_t>(i) * d + d0 + j] = head_poses->at(i, j);
  }
  std::vector<double> xm(static_cast<size_t>(d), 0.0), ym(2, 0.0);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) xm[static_cast<size_t>(j)] += x[static_cast<size_t>(i) * d + j];
    for (int j = 0; j < 2; ++j) ym[static_cast<size_t>(j)] += gazes.at(i, j);
  }
  for (double& v : xm) v /= n;
  for (double& v : ym) v /= n;

  std::vector<double> gram(static_cast<size_t>(d) * d, 0.0);
  std::vector<double> rhs(static_cast<size_t>(d) * 2, 0.0);
  for (int i = 0; i < n; ++i) {
    for (int a = 0; a < d; ++a) {
      const double xa = x[static_cast<size_t>(i) * d + a] - xm[static_cast<size_t>(a)];
      for (int bb = 0; bb <= a; ++bb)
        gram[static_cast<size_t>(a) * d + bb] +=
            xa * (x[static_cast<size_t>(i) * d + bb] - xm[static_cast<size_t>(bb)]);
      for (int t = 0; t < 2; ++t)
        rhs[static_cast<size_t>(a) * 2 + t] +=
            xa * (gazes.at(i, t) - ym[static_cast<size_t>(t)]);
    }
  }
  for (int a = 0; a < d; ++a)
    for (int bb = a + 1; bb < d; ++bb)
      gram[static_cast<size_t>(a) * d + bb] = gram[static_cast<size_t>(bb) * d + a];
  // the head block carries a vanishing penalty; it keeps the system definite
  // without materially regularizing the head coefficients
  for (int a = 0; a < d; ++a)
    gram[static_cast<size_t>(a) * d + a] += (a < d0) ? ridge : ridge * 1e-6 + 1e-12;

  if (!cholesky(gram, d))
    throw NumericalError(
        "fit_linear_probe: normal equations are singular (use ridge > 0)");

  ProbeWeights probe;
  probe.W = Matrix(2, d);
  probe.head_pose = head_poses != nullptr;
  probe.ridge = ridge;
  for (int t = 0; t < 2; ++t) {
    std::vector<double> col(static_cast<size_t>(d));
    for (int a = 0; a < d; ++a) col[static_cast<size_t>(a)] = rhs[static_cast<size_t>(a) * 2 + t];
    chol_solve(gram, d, col.data());
    double bias = ym[static_cast<size_t>(t)];
    for (int a = 0; a < d; ++a) {
      probe.W.at(t, a) = static_cast<float>(col[static_cast<size_t>(a)]);
      bias -= col[static_cast<size_t>(a)] * xm[static_cast<size_t>(a)];
    }
    probe.b[t] = bias;
  }
  return probe;
}

namespace {

Matrix gaze_matrix(const Dataset& data, std::span<const int> ids) {
  Matrix y(static_cast<int>(ids.size()), 2);
  for (size_t i = 0; i < ids.size(); ++i) {
    const GazeDirection g = data.gaze(ids[i]);
    y.at(static_cast<int>(i), 0) = static_cast<float>(g.pitch);
    y.at(static_cast<int>(i), 1) = static_cast<float>(g.yaw);
  }
  return y;
}

Matrix head_matrix(const Dataset& data, std::span<const int> ids) {
  Matrix h(static_cast<int>(ids.size()), 2);
  for (size_t i = 0; i < ids.size(); ++i) {
    const HeadPose p = data.head(ids[i]);
    h.at(static_cast<int>(i), 0) = static_cast<float>(p.pitch);
    h.at(static_cast<int>(i), 1) = static_cast<float>(p.yaw);
  }
  return h;
}

double probe_error_on(const Matrix& features, const ProbeWeights& probe,
                      const Dataset& data, std::span<const int> ids) {
  double acc = 0.0;
  std::vector<float> feat(static_cast<size_t>(probe.W.cols));
  for (size_t i = 0; i < ids.size(); ++i) {
    const float* fr = features.row(static_cast<int>(i));
    std::copy(fr, fr + features.cols, feat.begin());
    if (probe.head_pose) {
      const HeadPose h = data.head(ids[i]);
      feat[static_cast<size_t>(features.cols)] = static_cast<float>(h.pitch);
      feat[static_cast<size_t>(features.cols) + 1] = static_cast<float>(h.yaw);
    }
    acc += angular_error_deg(probe.predict(feat), data.gaze(ids[i]));
  }
  return acc / static_cast<double>(ids.size());
}

using Extractor = std::function<Matrix(std::span<const int>)>;

EvalReport few_shot_impl(const Dataset& data, int k, int repeats, bool with_head_pose,
                         FeatureMode mode, double ridge, uint64_t seed,
                         const Extractor& extract) {
  if (repeats < 1) throw ConfigError("few_shot: repeats must be >= 1");
  const std::vector<int>& train = data.train_ids();
  const std::vector<int>& test = data.test_ids();
  if (k < 0 || k > static_cast<int>(train.size()))
    throw ConfigError("few_shot: K exceeds the train split");
  const bool whole = k == 0 || k == static_cast<int>(train.size());

  const Matrix test_features = extract(test);

  EvalReport report;
  report.k = whole ? static_cast<int>(train.size()) : k;
  report.repeats = repeats;
  report.head_pose = with_head_pose;
  report.mode = mode;
  report.n_test = static_cast<int>(test.size());
  report.seed = seed;

  for (int r = 0; r < repeats; ++r) {
    std::vector<int> chosen;
    if (whole) {
      chosen = train;
    } else {
      std::vector<int> pool = train;
      Rng rng = Rng(seed).stream(rng_stream::kFewShot, static_cast<uint64_t>(r));
      chosen.reserve(static_cast<size_t>(k));
      for (int i = 0; i < k; ++i) {
        const size_t j =
            static_cast<size_t>(i) + static_cast<size_t>(rng.uniform_int(pool.size() - i));
        std::swap(pool[static_cast<size_t>(i)], pool[j]);
        chosen.push_back(pool[static_cast<size_t>(i)]);
      }
    }
    const Matrix x = extract(chosen);
    const Matrix y = gaze_matrix(data, chosen);
    std::optional<Matrix> h;
    if (with_head_pose) h = head_matrix(data, chosen);
    ProbeWeights probe = fit_linear_probe(x, y, h ? &*h : nullptr, ridge);
    probe.mode = mode;
    report.per_repeat_deg.push_back(probe_error_on(test_features, probe, data, test));
    if (whole) break;  // identical draws, no need to repeat
  }
  while (static_cast<int>(report.per_repeat_deg.size()) < repeats)
    report.per_repeat_deg.push_back(report.per_repeat_deg.front());

  double mean = 0;
  for (double e : report.per_repeat_deg) mean += e;
  mean /= static_cast<double>(report.per_repeat_deg.size());
  report.mean_deg = mean;
  if (repeats > 1) {
    double var = 0;
    for (double e : report.per_repeat_deg) var += (e - mean) * (e - mean);
    report.std_deg = std::sqrt(var / static_cast<double>(repeats - 1));
  }
  return report;
}

}  // namespace

EvalReport evaluate_probe(const EmibModel& model, const ProbeWeights& probe,
                          const Dataset& data, std::span<const int> test_ids) {
  const Matrix features = extract_features(model, data, test_ids, probe.mode);
  EvalReport report;
  report.mode = probe.mode;
  report.head_pose = probe.head_pose;
  report.n_test = static_cast<int>(test_ids.size());
  report.feature_dim = probe.W.cols;
  report.mean_deg = probe_error_on(features, probe, data, test_ids);
  report.per_repeat_deg = {report.mean_deg};
  return report;
}

EvalReport few_shot_protocol(const EmibModel& model, const Dataset& data, int k,
                             int repeats, bool with_head_pose, FeatureMode mode,
                             double ridge, uint64_t seed) {
  EvalReport r = few_shot_impl(
      data, k, repeats, with_head_pose, mode, ridge, seed,
      [&](std::span<const int> ids) { return extract_features(model, data, ids, mode); });
  r.feature_dim = (mode == FeatureMode::Bottleneck ? model.config().bottleneck.z_dim
                                                   : model.config().encoder.dim) +
                  (with_head_pose ? 2 : 0);
  return r;
}

EvalReport few_shot_protocol_student(const StudentModel& student, const Dataset& data,
                                     int k, int repeats, bool with_head_pose,
                                     double ridge, uint64_t seed) {
  EvalReport r = few_shot_impl(data, k, repeats, with_head_pose,
                               FeatureMode::Bottleneck, ridge, seed,
                               [&](std::span<const int> ids) {
                                 return extract_student_features(student, data, ids);
                               });
  r.feature_dim = student.config().z_dim + (with_head_pose ? 2 : 0);
  return r;
}

namespace {
void splice_patches(Matrix& image, const Matrix& pred_tokens, const PatchGrid& grid,
                    std::span<const int> patches) {
  const int p = grid.patch_size;
  for (int idx : patches) {
    const int pr = idx / grid.cols(), pc = idx % grid.cols();
    const float* src = pred_tokens.row(idx);
    for (int y = 0; y < p; ++y) {
      float* dst = image.row(pr * p + y) + static_cast<size_t>(pc * p) * 3;
      for (int v = 0; v < p * 3; ++v)
        dst[v] = std::clamp(src[static_cast<size_t>(y) * p * 3 + v], 0.0f, 1.0f);
    }
  }
}
}  // namespace

Matrix reconstruct_eyes(const EmibModel& model, const FaceSample& sample,
                        const EyeRegion& eyes, double mask_ratio, uint64_t mask_seed) {
  const ModelConfig& cfg = model.config();
  const Matrix tokens = patchify(sample.image, cfg.grid);
  Rng rng = Rng(mask_seed).stream(rng_stream::kReconMask);
  const MaskPlan recon = make_reconstruction_mask(eyes, mask_ratio, cfg.grid, rng);
  const MaskPlan full = make_full_visible_plan(cfg.grid);
  const Matrix pred = forward_pred_eval(model, tokens, recon, full, true);
  Matrix out = sample.image;
  splice_patches(out, pred, cfg.grid, eyes.all());
  return out;
}

std::vector<float> redirect_injection(const ProbeWeights& probe,
                                      std::span<const float> z_b,
                                      const GazeDirection& delta) {
  const int d = probe.W.cols;
  if (static_cast<int>(z_b.size()) != d)
    throw ConfigError("redirect: z_b dim does not match the probe");
  // minimum-norm shift: W^T (W W^T)^{-1} delta
  double m00 = 0, m01 = 0, m11 = 0;
  for (int j = 0; j < d; ++j) {
    m00 += static_cast<double>(probe.W.at(0, j)) * probe.W.at(0, j);
    m01 += static_cast<double>(probe.W.at(0, j)) * probe.W.at(1, j);
    m11 += static_cast<double>(probe.W.at(1, j)) * probe.W.at(1, j);
  }
  const double det = m00 * m11 - m01 * m01;
  if (!(std::fabs(det) > 1e-18))
    throw NumericalError("redirect: probe W W^T is singular (untrained probe?)");
  const double a0 = (m11 * delta.pitch - m01 * delta.yaw) / det;
  const double a1 = (-m01 * delta.pitch + m00 * delta.yaw) / det;
  std::vector<float> out(z_b.begin(), z_b.end());
  for (int j = 0; j < d; ++j)
    out[static_cast<size_t>(j)] +=
        static_cast<float>(a0 * probe.W.at(0, j) + a1 * probe.W.at(1, j));
  return out;
}

Matrix redirect_gaze(const EmibModel& model, const ProbeWeights& probe,
                     const FaceSample& sample, const EyeRegion& eyes,
                     const GazeDirection& delta) {
  const ModelConfig& cfg = model.config();
  if (probe.mode != FeatureMode::Bottleneck || probe.head_pose)
    throw ConfigError("redirect: probe must be bottleneck-mode without head pose");
  if (probe.W.cols != cfg.bottleneck.z_dim)
    throw ConfigError("redirect: probe dim does not match the model bottleneck");

  const Matrix tokens = patchify(sample.image, cfg.grid);
  const MaskPlan full = make_full_visible_plan(cfg.grid);

  Graph g(&model.params());
  Var in = g.const_view(tokens.rows, tokens.cols, tokens.data.data());
  Var latents = model.encode(g, in, full.visible);
  auto [z_b_var, inj0] = model.bottleneck_inject(g, latents);
  (void)inj0;
  const Matrix z_b = g.value_matrix(z_b_var);

  const std::vector<float> z_shift =
      redirect_injection(probe, {z_b.data.data(), z_b.data.size()}, delta);

  g.reset();
  Var z = g.constant(1, cfg.bottleneck.z_dim, z_shift.data());
  Var inj = g.matmul(z, g.param(model.bottleneck_up_param()));
  const Matrix no_latents(0, cfg.encoder.dim);
  Var empty = g.constant(no_latents);
  std::vector<int> all(static_cast<size_t>(cfg.grid.n_patches()));
  for (int i = 0; i < cfg.grid.n_patches(); ++i) all[static_cast<size_t>(i)] = i;
  Var pred = model.decode(g, empty, {}, all, inj);
  const Matrix pred_tokens = g.value_matrix(pred);

  Matrix out = sample.image;
  splice_patches(out, pred_tokens, cfg.grid, eyes.all());
  return out;
}

std::string EvalReport::to_json() const {
  nlohmann::json j;
  j["mean_deg"] = mean_deg;
  j["std_deg"] = std_deg;
  j["per_repeat_deg"] = per_repeat_deg;
  j["k"] = k;
  j["repeats"] = repeats;
  j["head_pose"] = head_pose;
  j["feature_mode"] = feature_mode_name(mode);
  j["n_test"] = n_test;
  j["feature_dim"] = feature_dim;
  j["probe_params"] = 2 * feature_dim + 2;
  j["seed"] = seed;
  return j.dump(2);
}

void save_probe(const ProbeWeights& probe, const std::filesystem::path& path) {
  nlohmann::json j;
  j["format"] = "emib-probe";
  j["d"] = probe.W.cols;
  j["W"] = probe.W.data;
  j["b"] = {probe.b[0], probe.b[1]};
  j["feature_mode"] = feature_mode_name(probe.mode);
  j["head_pose"] = probe.head_pose;
  j["ridge"] = probe.ridge;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write probe: " + path.string());
  out << j.dump(2) << "\n";
}

ProbeWeights load_probe(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open probe: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("probe parse error: " + std::string(e.what()));
  }
  if (j.value("format", "") != "emib-probe")
    throw IoError("not a probe file: " + path.string());
  ProbeWeights p;
  const int d = j.at("d").get<int>();
  p.W = Matrix(2, d);
  const auto w = j.at("W").get<std::vector<float>>();
  if (w.size() != p.W.size()) throw IoError("probe W size mismatch");
  std::copy(w.begin(), w.end(), p.W.data.begin());
  p.b[0] = j.at("b")[0].get<double>();
  p.b[1] = j.at("b")[1].get<double>();
  p.mode = parse_feature_mode(j.at("feature_mode").get<std::string>());
  p.head_pose = j.at("head_pose").get<bool>();
  p.ridge = j.at("ridge").get<double>();
  return p;
}

}  // namespace emib
