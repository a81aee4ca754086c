#include <cmath>

#include "doctest.h"
#include "emib/losses.hpp"
#include "support/test_helpers.hpp"

using namespace emib;
using testsupport::random_image;
using testsupport::random_matrix;

namespace {
EyeRegion desk_eyes() {
  const PatchGrid grid{64, 8};
  const std::array<PixelPoint, 4> corners = {
      PixelPoint{16, 30}, PixelPoint{24, 30}, PixelPoint{40, 30}, PixelPoint{48, 30}};
  return eye_patch_windows(corners, grid, 2, 2);
}
}  // namespace

TEST_SUITE_BEGIN("losses");

TEST_CASE("reconstruction loss fixed cases") {
  Matrix gt = random_matrix(10, 6, 1);
  Matrix pred = gt;
  const std::vector<int> eyes = {2, 5};
  CHECK(reconstruction_loss(pred, gt, eyes) == doctest::Approx(0.0));

  for (auto& v : pred.data) v += 1.0f;
  CHECK(reconstruction_loss(pred, gt, eyes) == doctest::Approx(1.0));
  CHECK(reconstruction_loss(pred, gt, eyes, ErrorMode::Absolute) == doctest::Approx(1.0));
}

TEST_CASE("reconstruction loss matches an explicit loop oracle") {
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const Matrix pred = random_matrix(12, 7, 100 + trial);
    const Matrix gt = random_matrix(12, 7, 200 + trial);
    std::vector<int> idx;
    for (int p = 0; p < 12; ++p)
      if (rng.bernoulli(0.4)) idx.push_back(p);
    if (idx.empty()) idx.push_back(static_cast<int>(rng.uniform_int(12)));

    double want_sq = 0, want_abs = 0;
    for (int p : idx)
      for (int j = 0; j < 7; ++j) {
        const double d = static_cast<double>(pred.at(p, j)) - gt.at(p, j);
        want_sq += d * d;
        want_abs += std::fabs(d);
      }
    want_sq /= static_cast<double>(idx.size()) * 7;
    want_abs /= static_cast<double>(idx.size()) * 7;

    REQUIRE(reconstruction_loss(pred, gt, idx) ==
            doctest::Approx(want_sq).epsilon(1e-6));
    REQUIRE(reconstruction_loss(pred, gt, idx, ErrorMode::Absolute) ==
            doctest::Approx(want_abs).epsilon(1e-6));
  }
}

TEST_CASE("reconstruction loss ignores non-indexed patches") {
  const Matrix gt = random_matrix(10, 6, 3);
  Matrix pred = random_matrix(10, 6, 4);
  const std::vector<int> eyes = {1, 8};
  const double base = reconstruction_loss(pred, gt, eyes);
  for (int p = 0; p < 10; ++p) {
    if (p == 1 || p == 8) continue;
    for (int j = 0; j < 6; ++j) pred.at(p, j) += 37.0f;
  }
  CHECK(reconstruction_loss(pred, gt, eyes) == base);
}

TEST_CASE("reconstruction loss rejects an empty eye set") {
  const Matrix gt = random_matrix(4, 4, 5);
  CHECK_THROWS_AS(reconstruction_loss(gt, gt, {}), ConfigError);
}

TEST_CASE("contrastive hinge truth table") {
  CHECK(contrastive_loss(0.2, 0.5) == 0.0);
  CHECK(contrastive_loss(0.5, 0.2) == doctest::Approx(0.3));
  CHECK(contrastive_loss(0.4, 0.4) == 0.0);
}

TEST_CASE("contrastive hinge is nonnegative and 1-lipschitz") {
  Rng rng(6);
  for (int i = 0; i < 1000; ++i) {
    const double a = rng.uniform(0, 2), b = rng.uniform(0, 2);
    const double l = contrastive_loss(a, b);
    REQUIRE(l >= 0.0);
    REQUIRE((l == 0.0) == (a <= b));
    const double da = rng.uniform(-0.1, 0.1);
    REQUIRE(std::fabs(contrastive_loss(a + da, b) - l) <= std::fabs(da) + 1e-12);
    const double db = rng.uniform(-0.1, 0.1);
    REQUIRE(std::fabs(contrastive_loss(a, b + db) - l) <= std::fabs(db) + 1e-12);
  }
}

TEST_CASE("total loss weighting") {
  LossConfig cfg;
  CHECK(total_loss(1.0, 2.0, cfg) == doctest::Approx(1.02));
  cfg.lambda_contr = 0.0f;
  CHECK(total_loss(1.0, 2.0, cfg) == doctest::Approx(1.0));
  cfg.lambda_contr = 0.3f;
  CHECK(total_loss(0.0, 5.0, cfg) >= 0.0);
  cfg.lambda_contr = -1.0f;
  CHECK_THROWS_AS(total_loss(1.0, 1.0, cfg), ConfigError);
}

TEST_CASE("distillation loss fixed cases and loop oracle") {
  const Matrix t = random_matrix(8, 16, 7);
  CHECK(distillation_loss(t, t) == doctest::Approx(0.0));

  Matrix s = t;
  for (auto& v : s.data) v += 2.0f;
  CHECK(distillation_loss(t, s) == doctest::Approx(4.0));

  for (int trial = 0; trial < 100; ++trial) {
    const Matrix a = random_matrix(5, 16, 300 + trial);
    const Matrix b = random_matrix(5, 16, 400 + trial);
    double want = 0;
    for (size_t i = 0; i < a.size(); ++i) {
      const double d = static_cast<double>(a.data[i]) - b.data[i];
      want += d * d;
    }
    want /= static_cast<double>(a.size());
    REQUIRE(distillation_loss(a, b) == doctest::Approx(want).epsilon(1e-6));
  }
}

TEST_CASE("distillation schedule endpoints and midpoint") {
  DistillSchedule s{1.0f, 0.1f, 1000};
  CHECK(s.at(0) == doctest::Approx(1.0));
  CHECK(s.at(500) == doctest::Approx(0.55));
  CHECK(s.at(1000) == doctest::Approx(0.1));
  CHECK(s.at(5000) == doctest::Approx(0.1));
}

TEST_CASE("graph loss node agrees with the plain function") {
  const Matrix pred = random_matrix(8, 12, 8);
  const Matrix gt = random_matrix(8, 12, 9);
  const std::vector<int> idx = {0, 3, 7};
  nn::ParamStore ps;
  nn::Graph g(&ps);
  nn::Var p = g.constant(pred);
  const float node_sq = g.scalar(reconstruction_loss_node(g, p, gt, idx, ErrorMode::Squared));
  const float node_abs = g.scalar(reconstruction_loss_node(g, p, gt, idx, ErrorMode::Absolute));
  CHECK(node_sq == doctest::Approx(reconstruction_loss(pred, gt, idx)).epsilon(1e-6));
  CHECK(node_abs ==
        doctest::Approx(reconstruction_loss(pred, gt, idx, ErrorMode::Absolute))
            .epsilon(1e-6));
}

TEST_CASE("contrastive forward on random weights") {
  EmibModel model(desk_config());
  model.init_params(42);
  const Matrix img = random_image(64, 43);
  const Matrix tokens = patchify(img, model.config().grid);
  const EyeRegion eyes = desk_eyes();
  Rng mask_rng = Rng(44).stream(1);
  const MaskPlan recon = make_reconstruction_mask(eyes, 0.75, model.config().grid, mask_rng);

  Rng neg1 = Rng(45).stream(2);
  auto [pos1, negv1] = contrastive_forward_eval(model, tokens, recon, eyes,
                                                ErrorMode::Squared, neg1);
  CHECK(std::isfinite(pos1));
  CHECK(std::isfinite(negv1));
  CHECK(pos1 > 0.0);
  CHECK(negv1 > 0.0);

  Rng neg2 = Rng(45).stream(2);
  auto [pos2, negv2] = contrastive_forward_eval(model, tokens, recon, eyes,
                                                ErrorMode::Squared, neg2);
  CHECK(pos1 == pos2);  // identical rng -> identical errors
  CHECK(negv1 == negv2);
}

TEST_CASE("contrastive forward needs masked non-eye patches to sample") {
  EmibModel model(desk_config());
  const Matrix img = random_image(64, 50);
  const Matrix tokens = patchify(img, model.config().grid);
  const EyeRegion eyes = desk_eyes();
  // ratio at the eye fraction: nothing else is masked, sampling must fail
  Rng mask_rng = Rng(51).stream(1);
  const MaskPlan tight = make_reconstruction_mask(eyes, 8.0 / 64.0,
                                                  model.config().grid, mask_rng);
  Rng neg = Rng(52).stream(2);
  CHECK_THROWS_AS(
      contrastive_forward_eval(model, tokens, tight, eyes, ErrorMode::Squared, neg),
      ConfigError);
}

TEST_SUITE_END();
