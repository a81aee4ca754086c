#include <cmath>
#include <fstream>

#include "doctest.h"
#include "emib/dataset.hpp"
#include "emib/eval.hpp"
#include "emib/png.hpp"
#include "support/test_helpers.hpp"

using namespace emib;
using testsupport::TempDir;
using testsupport::random_matrix;

namespace {
struct SmallData {
  TempDir dir{"evaldata"};
  Dataset data;

  SmallData() : data(make()) {}

  Dataset make() {
    SynthParams p;
    p.n_subjects = 10;
    generate_dataset(120, p, 31, dir.path());
    return Dataset::load(dir.path() / "manifest.json");
  }
};
}  // namespace

TEST_SUITE_BEGIN("eval");

TEST_CASE("ridge probe recovers an exactly linear map") {
  Rng rng(1);
  const int n = 60, d = 16;
  const Matrix x = random_matrix(n, d, 2);
  Matrix a(2, d);
  for (auto& v : a.data) v = static_cast<float>(rng.uniform(-1, 1));
  const double c[2] = {0.3, -0.2};
  Matrix y(n, 2);
  for (int i = 0; i < n; ++i)
    for (int t = 0; t < 2; ++t) {
      double acc = c[t];
      for (int j = 0; j < d; ++j)
        acc += static_cast<double>(a.at(t, j)) * x.at(i, j);
      y.at(i, t) = static_cast<float>(acc);
    }
  const ProbeWeights probe = fit_linear_probe(x, y, nullptr, 1e-10);
  for (int t = 0; t < 2; ++t) {
    REQUIRE(std::fabs(probe.b[t] - c[t]) < 1e-5);
    for (int j = 0; j < d; ++j)
      REQUIRE(std::fabs(probe.W.at(t, j) - a.at(t, j)) < 1e-5);
  }
}

TEST_CASE("K=1 with ridge is well defined and reproduces the label") {
  const Matrix x = random_matrix(1, 16, 3);
  Matrix y(1, 2);
  y.at(0, 0) = 0.21f;
  y.at(0, 1) = -0.35f;
  const ProbeWeights probe = fit_linear_probe(x, y, nullptr, 1e-3);
  const GazeDirection pred = probe.predict({x.row(0), 16});
  CHECK(pred.pitch == doctest::Approx(0.21).epsilon(1e-6));
  CHECK(pred.yaw == doctest::Approx(-0.35).epsilon(1e-6));
}

TEST_CASE("probe parameter counts") {
  const Matrix x = random_matrix(40, 16, 4);
  const Matrix y = random_matrix(40, 2, 5);
  const ProbeWeights p = fit_linear_probe(x, y, nullptr, 1e-3);
  CHECK(p.parameter_count() == 34);  // 16*2 + 2

  const Matrix h = random_matrix(40, 2, 6);
  const ProbeWeights ph = fit_linear_probe(x, y, &h, 1e-3);
  CHECK(ph.dim() == 18);
  CHECK(ph.parameter_count() == 38);  // 18*2 + 2
}

TEST_CASE("degenerate system without ridge is a numerical error") {
  const Matrix x = random_matrix(3, 16, 7);  // rank-deficient
  const Matrix y = random_matrix(3, 2, 8);
  CHECK_THROWS_AS(fit_linear_probe(x, y, nullptr, 0.0), NumericalError);
  CHECK_NOTHROW(fit_linear_probe(x, y, nullptr, 1e-3));
}

TEST_CASE("head pose cannot raise the ridge training objective") {
  Rng rng(9);
  const int n = 50, d = 8;
  const Matrix x = random_matrix(n, d, 10);
  const Matrix h = random_matrix(n, 2, 11);
  Matrix y(n, 2);
  for (int i = 0; i < n; ++i)
    for (int t = 0; t < 2; ++t)
      y.at(i, t) = static_cast<float>(0.3 * x.at(i, t) + 0.5 * h.at(i, t) +
                                      0.05 * rng.uniform(-1, 1));
  const double ridge = 1e-2;
  const ProbeWeights without = fit_linear_probe(x, y, nullptr, ridge);
  const ProbeWeights with = fit_linear_probe(x, y, &h, ridge);

  auto objective = [&](const ProbeWeights& p, bool head) {
    double obj = 0;
    std::vector<float> f(static_cast<size_t>(p.W.cols));
    for (int i = 0; i < n; ++i) {
      std::copy(x.row(i), x.row(i) + d, f.begin());
      if (head) {
        f[static_cast<size_t>(d)] = h.at(i, 0);
        f[static_cast<size_t>(d) + 1] = h.at(i, 1);
      }
      for (int t = 0; t < 2; ++t) {
        double pred = p.b[t];
        for (int j = 0; j < p.W.cols; ++j)
          pred += static_cast<double>(p.W.at(t, j)) * f[static_cast<size_t>(j)];
        obj += (pred - y.at(i, t)) * (pred - y.at(i, t));
      }
    }
    for (int t = 0; t < 2; ++t)
      for (int j = 0; j < d; ++j)  // penalty on the gaze-feature block only
        obj += ridge * static_cast<double>(p.W.at(t, j)) * p.W.at(t, j);
    return obj;
  };
  CHECK(objective(with, true) <= objective(without, false) * (1 + 1e-9) + 1e-9);
}

TEST_CASE("zero probe error equals the direct average oracle") {
  SmallData sd;
  EmibModel model(desk_config());
  model.init_params(12);
  ProbeWeights zero;
  zero.W = Matrix(2, 16);
  zero.mode = FeatureMode::Bottleneck;
  const EvalReport r = evaluate_probe(model, zero, sd.data, sd.data.test_ids());
  double want = 0;
  for (int i : sd.data.test_ids())
    want += angular_error_deg({0, 0}, sd.data.gaze(i));
  want /= static_cast<double>(sd.data.test_ids().size());
  CHECK(r.mean_deg == doctest::Approx(want).epsilon(1e-9));
  CHECK(r.std_deg == 0.0);
  CHECK(r.per_repeat_deg.size() == 1);
}

TEST_CASE("feature extraction shapes and determinism") {
  SmallData sd;
  EmibModel model(desk_config());
  model.init_params(13);
  const std::vector<int> ids = {0, 1, 0};
  const Matrix zb = extract_features(model, sd.data, ids, FeatureMode::Bottleneck);
  CHECK(zb.rows == 3);
  CHECK(zb.cols == 16);
  const Matrix pre = extract_features(model, sd.data, ids, FeatureMode::PrePool);
  CHECK(pre.cols == 64);
  for (int j = 0; j < zb.cols; ++j) REQUIRE(zb.at(0, j) == zb.at(2, j));
}

TEST_CASE("K = train size degenerates to whole-dataset probing") {
  SmallData sd;
  EmibModel model(desk_config());
  model.init_params(14);
  const int train_n = static_cast<int>(sd.data.train_ids().size());
  const EvalReport whole =
      few_shot_protocol(model, sd.data, 0, 1, false, FeatureMode::Bottleneck, 1e-3, 0);
  const EvalReport k_eq =
      few_shot_protocol(model, sd.data, train_n, 1, false, FeatureMode::Bottleneck, 1e-3, 0);
  CHECK(whole.mean_deg == doctest::Approx(k_eq.mean_deg).epsilon(1e-12));
}

TEST_CASE("repeats produce per-repeat errors and a std") {
  SmallData sd;
  EmibModel model(desk_config());
  model.init_params(15);
  const EvalReport r =
      few_shot_protocol(model, sd.data, 20, 3, false, FeatureMode::Bottleneck, 1e-3, 7);
  CHECK(r.repeats == 3);
  CHECK(r.per_repeat_deg.size() == 3);
  CHECK(r.std_deg >= 0.0);
  CHECK_THROWS_AS(
      few_shot_protocol(model, sd.data, 10000, 1, false, FeatureMode::Bottleneck, 1e-3, 0),
      ConfigError);
}

TEST_CASE("cross-dataset probing runs") {
  SmallData sd;
  TempDir other("crossdata");
  SynthParams p2;
  p2.n_subjects = 6;
  p2.noise_hi = 0.02;  // a different style
  generate_dataset(60, p2, 99, other.path());
  const Dataset target = Dataset::load(other.path() / "manifest.json");
  EmibModel model(desk_config());
  model.init_params(16);
  const EvalReport r =
      few_shot_protocol(model, target, 30, 2, false, FeatureMode::Bottleneck, 1e-3, 1);
  CHECK(r.per_repeat_deg.size() == 2);
  CHECK(std::isfinite(r.mean_deg));
}

TEST_CASE("redirect algebra shifts the prediction by exactly delta") {
  Rng rng(17);
  ProbeWeights probe;
  probe.W = random_matrix(2, 16, 18);
  for (auto& v : probe.W.data) v *= 0.08f;  // keep predictions inside the angle box
  probe.b[0] = 0.05;
  probe.b[1] = -0.02;
  probe.mode = FeatureMode::Bottleneck;
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<float> z(16);
    for (auto& v : z) v = static_cast<float>(rng.uniform(-1, 1));
    const GazeDirection delta{rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3)};
    const GazeDirection before = probe.predict(z);
    const auto z2 = redirect_injection(probe, z, delta);
    const GazeDirection after = probe.predict(z2);
    REQUIRE(std::fabs(after.pitch - (before.pitch + delta.pitch)) < 1e-6);
    REQUIRE(std::fabs(after.yaw - (before.yaw + delta.yaw)) < 1e-6);
  }
  // zero delta leaves the vector untouched
  std::vector<float> z(16, 0.25f);
  CHECK(redirect_injection(probe, z, {0, 0}) == z);
  // a rank-deficient probe cannot be inverted
  ProbeWeights flat;
  flat.W = Matrix(2, 16);
  CHECK_THROWS_AS(redirect_injection(flat, z, {0.1, 0.1}), NumericalError);
}

TEST_CASE("reconstruct_eyes touches only the eye patch blocks") {
  SmallData sd;
  EmibModel model(desk_config());
  model.init_params(19);
  const FaceSample sample = sd.data.sample(0);
  const EyeRegion eyes = sample_eye_region(model, sample);
  const Matrix out = reconstruct_eyes(model, sample, eyes, 0.75, 5);
  const std::vector<int> eye_set = eyes.all();
  const PatchGrid& grid = model.config().grid;
  for (int p = 0; p < grid.n_patches(); ++p) {
    const bool is_eye = std::binary_search(eye_set.begin(), eye_set.end(), p);
    const int pr = p / grid.cols(), pc = p % grid.cols();
    bool differs = false;
    for (int y = pr * 8; y < pr * 8 + 8; ++y)
      for (int v = pc * 24; v < pc * 24 + 24; ++v)
        if (out.at(y, v) != sample.image.at(y, v)) differs = true;
    if (!is_eye) REQUIRE(!differs);
  }
  // deterministic under a fixed seed
  const Matrix again = reconstruct_eyes(model, sample, eyes, 0.75, 5);
  REQUIRE(again.data == out.data);
}

TEST_CASE("redirect_gaze validates its probe") {
  SmallData sd;
  EmibModel model(desk_config());
  model.init_params(20);
  const FaceSample sample = sd.data.sample(1);
  const EyeRegion eyes = sample_eye_region(model, sample);
  ProbeWeights probe;
  probe.W = random_matrix(2, 16, 21);
  probe.mode = FeatureMode::PrePool;
  CHECK_THROWS_AS(redirect_gaze(model, probe, sample, eyes, {0.1, 0}), ConfigError);
  probe.mode = FeatureMode::Bottleneck;
  probe.head_pose = true;
  CHECK_THROWS_AS(redirect_gaze(model, probe, sample, eyes, {0.1, 0}), ConfigError);
  probe.head_pose = false;
  const Matrix img = redirect_gaze(model, probe, sample, eyes, {0.1, 0});
  CHECK(img.rows == 64);
}

TEST_CASE("probe save/load roundtrip") {
  TempDir dir("probe");
  ProbeWeights p;
  p.W = random_matrix(2, 16, 22);
  p.b[0] = 1.5;
  p.b[1] = -2.5;
  p.mode = FeatureMode::PrePool;
  p.head_pose = true;
  p.ridge = 0.123;
  save_probe(p, dir.path() / "probe.json");
  const ProbeWeights q = load_probe(dir.path() / "probe.json");
  CHECK(q.W.data == p.W.data);
  CHECK(q.b[0] == p.b[0]);
  CHECK(q.mode == FeatureMode::PrePool);
  CHECK(q.head_pose);
  CHECK(q.ridge == doctest::Approx(0.123));
}

TEST_CASE("png writer produces a valid signature and panel layout") {
  TempDir dir("png");
  const Matrix img = testsupport::random_image(16, 23);
  write_png(dir.path() / "t.png", img, 2);
  std::ifstream in(dir.path() / "t.png", std::ios::binary);
  unsigned char sig[8];
  in.read(reinterpret_cast<char*>(sig), 8);
  CHECK(sig[0] == 0x89);
  CHECK(sig[1] == 'P');
  const Matrix panel = make_panel({img, img, img});
  CHECK(panel.rows == 16);
  CHECK(panel.cols == (16 * 3 + 4) * 3);
}

TEST_SUITE_END();
