#include <doctest.h>

#include <Eigen/Geometry>
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "cvthead/errors.hpp"
#include "cvthead/numerics/ops.hpp"
#include "cvthead/training/training.hpp"
#include "test_util.hpp"

using namespace cvthead;
using namespace cvthead::training;
using cvthead::testing::random_tensor;
using head_model::Vertices;

namespace {

const head_model::HeadModel& model() {
  static const auto m = head_model::generate_synthetic_model(0);
  return m;
}

Vertices constant_albedo(float r, float g, float b) {
  Vertices a(model().n_vertices(), 3);
  for (Eigen::Index i = 0; i < a.rows(); ++i) a.row(i) << r, g, b;
  return a;
}

// Small training setup: 32x32 frames, narrow transformer, two-level U-Net.
TrainConfig small_config(std::size_t steps, double lr) {
  TrainConfig tc;
  tc.pipeline.transformer.width = 32;
  tc.pipeline.transformer.layers = 1;
  tc.pipeline.transformer.heads = 2;
  tc.pipeline.transformer.cnn_channels = {8, 16, 16};
  tc.pipeline.transformer.out_channels = 16;
  tc.pipeline.renderer.depth_levels = 2;
  tc.pipeline.renderer.base_channels = 8;
  tc.pipeline.renderer.in_channels = 17;
  tc.steps = steps;
  tc.lr = lr;
  tc.seed = 3;
  return tc;
}

std::vector<ToySample> small_dataset(std::size_t pairs) {
  DatasetConfig dc;
  dc.pairs = pairs;
  dc.size = 32;
  dc.seed = 11;
  return make_dataset(model(), dc);
}

}  // namespace

TEST_CASE("oracle: head outside the frame renders only background") {
  auto p = head_model::AvatarParams::zeros(model());
  p.camera.tx = 5.0f;
  OracleOptions opt;
  opt.background = -0.25f;
  const auto f = oracle_render(model(), p, constant_albedo(1, 0, 0), 16, 16, opt);
  for (float v : f.image.data()) CHECK(v == -0.25f);
  for (float v : f.mask.data()) CHECK(v == 0.0f);
}

TEST_CASE("oracle: frontal vertex colour equals albedo times Lambert shade") {
  const auto p = head_model::AvatarParams::zeros(model());
  const int size = 64;
  const auto f = oracle_render(model(), p, constant_albedo(1, 0, 0), size, size);
  const auto idx = rasterizer::rasterize(head_model::reconstruct(model(), p.beta, p.phi, p.theta), p.camera, size, size);
  const auto& verts = model().template_vertices;

  // Independent normal: sum of the incident faces' cross products.
  auto normal_of = [&](int v) {
    Eigen::Vector3d acc = Eigen::Vector3d::Zero();
    for (Eigen::Index fi = 0; fi < model().faces.rows(); ++fi) {
      for (int k = 0; k < 3; ++k) {
        if (model().faces(fi, k) != v) continue;
        const Eigen::Vector3d a = verts.row(model().faces(fi, 0)).cast<double>();
        const Eigen::Vector3d b = verts.row(model().faces(fi, 1)).cast<double>();
        const Eigen::Vector3d c = verts.row(model().faces(fi, 2)).cast<double>();
        acc += (b - a).cross(c - a);
      }
    }
    return acc.normalized();
  };

  const std::size_t pixels = size * size;
  int checked = 0;
  for (int y = 20; y < 44; y += 3) {
    for (int x = 20; x < 44; x += 3) {
      const std::size_t p_ = static_cast<std::size_t>(y) * size + x;
      const int v = idx.index[p_];
      if (v < 0) continue;
      const double ndl = std::max(0.0, normal_of(v).z());
      const double shade = 0.3 + 0.7 * ndl;
      CHECK(f.image[p_] == doctest::Approx(2.0 * shade - 1.0).epsilon(1e-5));
      CHECK(f.image[pixels + p_] == -1.0f);
      CHECK(f.image[2 * pixels + p_] == -1.0f);
      CHECK(f.mask[p_] == 1.0f);
      ++checked;
    }
  }
  CHECK(checked > 40);
}

TEST_CASE("oracle: deterministic and checked") {
  DatasetConfig dc;
  dc.pairs = 1;
  const auto s = make_dataset(model(), dc)[0];
  const auto a = oracle_render(model(), s.driving, s.albedo, 48, 48);
  const auto b = oracle_render(model(), s.driving, s.albedo, 48, 48);
  CHECK(a.image.same_values(b.image));
  CHECK(a.mask.same_values(b.mask));
  CHECK_THROWS_AS(oracle_render(model(), s.driving, Vertices(3, 3), 48, 48), ShapeError);
}

TEST_CASE("vertex normals are unit and point outward on the template") {
  const auto n = vertex_normals(model(), model().template_vertices);
  int outward = 0;
  for (Eigen::Index i = 0; i < n.rows(); ++i) {
    CHECK(n.row(i).norm() == doctest::Approx(1.0).epsilon(1e-5));
    if (n.row(i).dot(model().template_vertices.row(i)) > 0) ++outward;
  }
  CHECK(outward == n.rows());
}

TEST_CASE("dataset: shared identity, value ranges, seeded regeneration") {
  DatasetConfig dc;
  dc.pairs = 3;
  dc.size = 32;
  dc.seed = 5;
  const auto a = make_dataset(model(), dc);
  const auto b = make_dataset(model(), dc);
  REQUIRE(a.size() == 3);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].source.beta == a[i].driving.beta);
    CHECK(a[i].source_image.same_values(b[i].source_image));
    CHECK(a[i].target_image.same_values(b[i].target_image));
    CHECK(a[i].target_mask.same_values(b[i].target_mask));
    CHECK(a[i].source_image.shape() == numerics::Shape{3, 32, 32});
    for (float v : a[i].target_image.data()) CHECK((v >= -1.0f && v <= 1.0f));
  }
  CHECK_FALSE(a[0].target_image.same_values(a[1].target_image));
  dc.seed = 6;
  CHECK_FALSE(make_dataset(model(), dc)[0].source_image.same_values(a[0].source_image));
  dc.pairs = 0;
  CHECK_THROWS_AS(make_dataset(model(), dc), ConfigError);
}

TEST_CASE("loss: exact match, constant offset, weighted sum") {
  const auto img = random_tensor<double>({3, 8, 8}, 1, -0.8, 0.8);
  auto mask_v = std::vector<double>(64, 0.0);
  for (std::size_t i = 0; i < 64; i += 3) mask_v[i] = 1.0;
  const Tensor<double> mask({1, 8, 8}, mask_v);

  renderer::RenderOutput<double> pred{img, mask};
  auto l = loss_total<double>(pred, img, mask);
  CHECK(l.l1.item() == 0.0);
  CHECK(l.dice.item() == doctest::Approx(0.0));
  CHECK(l.total.item() == doctest::Approx(0.0));

  pred.rgb = numerics::add_scalar(img, 0.1);
  l = loss_total<double>(pred, img, mask);
  CHECK(l.l1.item() == doctest::Approx(0.1).epsilon(1e-12));

  // Dice oracle: 1 - (2|P.T| + 1) / (|P| + |T| + 1).
  const auto soft = random_tensor<double>({1, 8, 8}, 2, 0, 1);
  double inter = 0, sp = 0, st = 0;
  for (std::size_t i = 0; i < 64; ++i) {
    inter += soft[i] * mask_v[i];
    sp += soft[i];
    st += mask_v[i];
  }
  const double dice = 1.0 - (2 * inter + 1) / (sp + st + 1);
  pred.mask = soft;
  l = loss_total<double>(pred, img, mask, {2.0, 0.5});
  CHECK(l.dice.item() == doctest::Approx(dice).epsilon(1e-12));
  CHECK(l.total.item() == doctest::Approx(2.0 * 0.1 + 0.5 * dice).epsilon(1e-12));
  l = loss_total<double>(pred, img, mask);
  CHECK(l.total.item() == doctest::Approx(l.l1.item() + l.dice.item()).epsilon(1e-12));

  CHECK_THROWS_AS(l1_loss<double>(img, random_tensor<double>({3, 8, 7}, 3)), ShapeError);
  CHECK_THROWS_AS(dice_loss<double>(mask, random_tensor<double>({1, 8, 7}, 3)), ShapeError);
}

TEST_CASE("loss: components 0.2 and 0.1 at unit weights total 0.3") {
  // 4 pixels: rgb error 0.2 everywhere; masks tuned to a Dice loss of 0.1.
  const Tensor<double> target({3, 1, 4}, std::vector<double>(12, 0.0));
  renderer::RenderOutput<double> pred{Tensor<double>({3, 1, 4}, std::vector<double>(12, 0.2)), {}};
  // T = 4 ones, P = p everywhere: 1 - (8p + 1) / (4p + 5) = 0.1 -> p = 3.5 / 4.4.
  const double p = 3.5 / 4.4;
  pred.mask = Tensor<double>({1, 1, 4}, std::vector<double>(4, p));
  const Tensor<double> tmask({1, 1, 4}, std::vector<double>(4, 1.0));
  const auto l = loss_total<double>(pred, target, tmask);
  CHECK(l.l1.item() == doctest::Approx(0.2).epsilon(1e-12));
  CHECK(l.dice.item() == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(l.total.item() == doctest::Approx(0.3).epsilon(1e-12));
}

TEST_CASE("loss: masked L1 averages only inside the mask") {
  const auto a = random_tensor<double>({3, 4, 4}, 7);
  const auto b = random_tensor<double>({3, 4, 4}, 8);
  std::vector<double> m(16, 0.0);
  m[1] = m[6] = m[15] = 1.0;
  double acc = 0;
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t p : {1u, 6u, 15u}) acc += std::abs(a[c * 16 + p] - b[c * 16 + p]);
  }
  const auto l = l1_loss<double>(a, b, Tensor<double>({1, 4, 4}, m));
  CHECK(l.item() == doctest::Approx(acc / 9.0).epsilon(1e-12));
  CHECK(l1_loss<double>(a, b, Tensor<double>({1, 4, 4}, std::vector<double>(16, 0.0))).item() == 0.0);
}

TEST_CASE("loss: L1 is invariant to a shared pixel permutation") {
  const auto a = random_tensor<double>({3, 16, 16}, 21);
  const auto b = random_tensor<double>({3, 16, 16}, 22);
  std::vector<std::size_t> perm(256);
  std::iota(perm.begin(), perm.end(), 0);
  std::reverse(perm.begin(), perm.end());
  std::rotate(perm.begin(), perm.begin() + 37, perm.end());
  std::vector<double> pa(768), pb(768);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t p = 0; p < 256; ++p) {
      pa[c * 256 + p] = a[c * 256 + perm[p]];
      pb[c * 256 + p] = b[c * 256 + perm[p]];
    }
  }
  CHECK(l1_loss<double>(a, b).item() ==
        doctest::Approx(l1_loss<double>(Tensor<double>({3, 16, 16}, pa), Tensor<double>({3, 16, 16}, pb)).item())
            .epsilon(1e-14));
}

TEST_CASE("loss on a FrameResult matches the tensor form") {
  const auto rgb = random_tensor<float>({3, 8, 8}, 30);
  const auto mask = random_tensor<float>({1, 8, 8}, 31, 0, 1);
  const auto target = random_tensor<float>({3, 8, 8}, 32);
  const auto tmask = random_tensor<float>({1, 8, 8}, 33, 0, 1);
  const auto frame = renderer::to_frame({rgb, mask});
  const auto v = loss_total(frame, target, tmask);
  const auto t = loss_total<double>({rgb.cast<double>(), mask.cast<double>()}, target.cast<double>(),
                                    tmask.cast<double>());
  CHECK(v.total == doctest::Approx(t.total.item()).epsilon(1e-12));
  CHECK(v.l1 == doctest::Approx(t.l1.item()).epsilon(1e-12));
  CHECK(v.dice == doctest::Approx(t.dice.item()).epsilon(1e-12));
}

TEST_CASE("metrics: identity, extremes, independent SSIM") {
  const auto a = random_tensor<float>({3, 24, 24}, 40);
  auto m = metrics(a, a);
  CHECK(m.psnr == 100.0);
  CHECK(m.ssim == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(m.l1 == 0.0);

  const auto zeros = Tensor<float>::full({3, 16, 16}, -1.0f);
  const auto ones = Tensor<float>::full({3, 16, 16}, 1.0f);
  CHECK(psnr(zeros, ones) == doctest::Approx(0.0));
  CHECK(metrics(zeros, ones).l1 == doctest::Approx(1.0));

  // Separable Gaussian blur of the moment maps, then the SSIM map mean.
  const auto b = random_tensor<float>({3, 24, 24}, 41);
  const int k = 11, h = 24, w = 24, oh = h - k + 1, ow = w - k + 1;
  std::vector<double> g(k);
  double gs = 0;
  for (int i = 0; i < k; ++i) gs += g[i] = std::exp(-(i - 5.0) * (i - 5.0) / 4.5);
  for (auto& v : g) v /= gs;
  auto blur = [&](const std::vector<double>& img) {
    std::vector<double> tmp(h * ow, 0.0), out(oh * ow, 0.0);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < ow; ++x)
        for (int i = 0; i < k; ++i) tmp[y * ow + x] += g[i] * img[y * w + x + i];
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x)
        for (int i = 0; i < k; ++i) out[y * ow + x] += g[i] * tmp[(y + i) * ow + x];
    return out;
  };
  double total = 0, mse = 0;
  for (int c = 0; c < 3; ++c) {
    std::vector<double> x(h * w), y(h * w), xx(h * w), yy(h * w), xy(h * w);
    for (int i = 0; i < h * w; ++i) {
      x[i] = (a[c * h * w + i] + 1.0) / 2.0;
      y[i] = (b[c * h * w + i] + 1.0) / 2.0;
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
      mse += (x[i] - y[i]) * (x[i] - y[i]);
    }
    const auto mx = blur(x), my = blur(y), sxx = blur(xx), syy = blur(yy), sxy = blur(xy);
    for (int i = 0; i < oh * ow; ++i) {
      const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cxy = sxy[i] - mx[i] * my[i];
      total += (2 * mx[i] * my[i] + 1e-4) * (2 * cxy + 9e-4) / ((mx[i] * mx[i] + my[i] * my[i] + 1e-4) * (vx + vy + 9e-4));
    }
  }
  m = metrics(a, b);
  CHECK(std::abs(m.ssim - total / (3.0 * oh * ow)) < 1e-6);
  CHECK(std::abs(m.psnr - 10.0 * std::log10(1.0 / (mse / (3.0 * h * w)))) < 1e-6);
  CHECK_THROWS_AS(ssim(random_tensor<float>({3, 8, 8}, 1), random_tensor<float>({3, 8, 8}, 2)), ShapeError);
  CHECK(dice_score(Tensor<float>::zeros({1, 4, 4}), Tensor<float>::zeros({1, 4, 4})) == 1.0);
}

TEST_CASE("Adam: first two steps by hand") {
  ParamStore<float> p;
  p.add("x", Tensor<float>({2}, {1.0f, -2.0f}));
  Adam adam({0.1, 0.9, 0.999, 1e-8});
  adam.step(p, {Tensor<float>({2}, {0.5f, -4.0f})});
  // Bias-corrected first step moves each coordinate by lr * sign(g).
  CHECK(p["x"][0] == doctest::Approx(0.9).epsilon(1e-6));
  CHECK(p["x"][1] == doctest::Approx(-1.9).epsilon(1e-6));
  adam.step(p, {Tensor<float>({2}, {1.0f, 0.0f})});
  const double m = 0.9 * 0.05 + 0.1 * 1.0, v = 0.999 * 0.00025 + 0.001 * 1.0;
  const double mh = m / (1 - 0.81), vh = v / (1 - 0.999 * 0.999);
  CHECK(p["x"][0] == doctest::Approx(0.9 - 0.1 * mh / (std::sqrt(vh) + 1e-8)).epsilon(1e-6));
  CHECK(adam.steps() == 2);
  CHECK_THROWS_AS(adam.step(p, {}), ShapeError);
  CHECK_THROWS_AS(Adam({-1.0, 0.9, 0.999, 1e-8}), ConfigError);
}

TEST_CASE("train: lr 0 leaves every weight bitwise unchanged") {
  const auto data = small_dataset(2);
  const auto tc = small_config(3, 0.0);
  const auto init = pipeline::init_weights<float>(tc.pipeline, tc.seed);
  const auto r = train_toy(model(), data, tc);
  CHECK(r.curve.size() == 3);
  CHECK(r.weights.same_values(init));
}

TEST_CASE("train: one step reaches the vertex tokens and every leaf") {
  const auto data = small_dataset(1);
  const auto tc = small_config(1, 1e-3);
  const auto init = pipeline::init_weights<float>(tc.pipeline, tc.seed);
  const auto r = train_toy(model(), data, tc);
  for (std::size_t i = 0; i < init.size(); ++i) {
    INFO(init.entries()[i].first);
    CHECK_FALSE(r.weights.entries()[i].second.same_values(init.entries()[i].second));
  }
}

TEST_CASE("train: 200 steps on 2 samples lower the loss, reproducibly") {
  const auto data = small_dataset(2);
  const auto tc = small_config(200, 1e-3);
  const auto r = train_toy(model(), data, tc);
  REQUIRE(r.curve.size() == 200);
  double first = 0, last = 0;
  for (std::size_t i = 0; i < 10; ++i) {
    first += r.curve[i].total;
    last += r.curve[190 + i].total;
  }
  CHECK(last < first);

  auto short_cfg = small_config(4, 1e-3);
  const auto a = train_toy(model(), data, short_cfg);
  const auto b = train_toy(model(), data, short_cfg);
  CHECK(a.weights.same_values(b.weights));
  for (std::size_t i = 0; i < 4; ++i) CHECK(a.curve[i].total == b.curve[i].total);
}

TEST_CASE("train: NaN loss raises a training error with the step") {
  const auto data = small_dataset(1);
  const auto tc = small_config(2, 1e-3);
  auto w = pipeline::init_weights<float>(tc.pipeline, tc.seed);
  w.set("unet.out.b", Tensor<float>({4}, std::vector<float>(4, std::nanf(""))));
  try {
    train_toy(model(), data, tc, w);
    FAIL("expected TrainingError");
  } catch (const TrainingError& e) {
    CHECK(e.step() == 0);
  }
  CHECK_THROWS_AS(train_toy(model(), {}, tc), ConfigError);
}

TEST_CASE("loss curve CSV") {
  const auto path = std::filesystem::temp_directory_path() / "cvthead_loss_test.csv";
  write_loss_csv(path, {{0, 1.5, 1.0, 0.5}, {1, 0.75, 0.5, 0.25}});
  std::ifstream in(path);
  std::string l0, l1, l2;
  std::getline(in, l0);
  std::getline(in, l1);
  std::getline(in, l2);
  CHECK(l0 == "step,total,l1,dice");
  CHECK(l1 == "0,1.5,1,0.5");
  CHECK(l2 == "1,0.75,0.5,0.25");
  std::filesystem::remove(path);
}
