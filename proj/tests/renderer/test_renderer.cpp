#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "cvthead/errors.hpp"
#include "cvthead/numerics/grad_check.hpp"
#include "cvthead/numerics/ops.hpp"
#include "cvthead/renderer/renderer.hpp"
#include "test_util.hpp"

using namespace cvthead;
using namespace cvthead::renderer;
using cvthead::testing::random_tensor;
using numerics::Tensor;

namespace {

template <typename T>
ParamStore<T> zeroed(const ParamStore<T>& w) {
  ParamStore<T> out;
  for (const auto& [name, t] : w.entries()) out.add(name, Tensor<T>::zeros(t.shape()));
  return out;
}

}  // namespace

TEST_CASE("full-size contract: 256x256x33 in, RGB + mask out") {
  const RendererConfig cfg;
  const auto w = init_weights<float>(cfg, 1);
  const auto out = render(random_tensor<float>({32, 256, 256}, 2), random_tensor<float>({1, 256, 256}, 3, 0, 1), w, cfg);
  CHECK(out.rgb.shape() == numerics::Shape{3, 256, 256});
  CHECK(out.mask.shape() == numerics::Shape{1, 256, 256});
  const auto frame = to_frame(out);
  CHECK(frame.rgb.size() == 256u * 256u * 3u);
  CHECK(frame.mask.size() == 256u * 256u);
  CHECK(to_rgb8(frame).size() == 256u * 256u * 3u);
  CHECK(to_rgba8(frame).size() == 256u * 256u * 4u);
}

TEST_CASE("zero weights give a constant frame with mask 0.5") {
  const RendererConfig cfg;
  const auto w = zeroed(init_weights<float>(cfg, 1));
  const auto out = render(random_tensor<float>({32, 32, 32}, 2), random_tensor<float>({1, 32, 32}, 3), w, cfg);
  for (float v : out.rgb.data()) CHECK(v == 0.0f);
  for (float v : out.mask.data()) CHECK(v == 0.5f);
}

TEST_CASE("two levels on 64x64 keep the resolution") {
  RendererConfig cfg;
  cfg.depth_levels = 2;
  const auto w = init_weights<float>(cfg, 4);
  const auto out = render(random_tensor<float>({32, 64, 64}, 5), random_tensor<float>({1, 64, 64}, 6), w, cfg);
  CHECK(out.rgb.shape() == numerics::Shape{3, 64, 64});
  CHECK(out.mask.shape() == numerics::Shape{1, 64, 64});
  CHECK_THROWS_AS(render(random_tensor<float>({32, 62, 64}, 5), random_tensor<float>({1, 62, 64}, 6), w, cfg),
                  ShapeError);
  CHECK_THROWS_AS(render(random_tensor<float>({31, 64, 64}, 5), random_tensor<float>({1, 64, 64}, 6), w, cfg),
                  ShapeError);
}

TEST_CASE("output ranges hold for large inputs") {
  const RendererConfig cfg;
  const auto w = init_weights<float>(cfg, 7);
  const auto out = render(random_tensor<float>({32, 32, 32}, 8, -1e3, 1e3), random_tensor<float>({1, 32, 32}, 9, -1e3, 1e3), w, cfg);
  for (float v : out.rgb.data()) CHECK((v >= -1.0f && v <= 1.0f));
  for (float v : out.mask.data()) CHECK((v >= 0.0f && v <= 1.0f));
}

TEST_CASE("translation covariance on the interior") {
  RendererConfig cfg;
  cfg.depth_levels = 2;
  cfg.in_channels = 5;
  const auto w = init_weights<float>(cfg, 10);
  const std::size_t h = 96, wd = 96, shift = 4, margin = 28;
  const auto feat = random_tensor<float>({4, h, wd}, 11);
  const auto depth = random_tensor<float>({1, h, wd}, 12, 0, 1);
  auto shifted = [&](const Tensor<float>& t) {
    std::vector<float> v(t.numel(), 0.0f);
    const std::size_t c = t.dim(0);
    for (std::size_t k = 0; k < c; ++k) {
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = shift; x < wd; ++x) v[(k * h + y) * wd + x] = t[(k * h + y) * wd + x - shift];
      }
    }
    return Tensor<float>(t.shape(), v);
  };
  const auto a = render(feat, depth, w, cfg);
  const auto b = render(shifted(feat), shifted(depth), w, cfg);
  double worst = 0.0;
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = margin; y < h - margin; ++y) {
      for (std::size_t x = margin + shift; x < wd - margin; ++x) {
        worst = std::max(worst, double(std::abs(b.rgb[(c * h + y) * wd + x] - a.rgb[(c * h + y) * wd + x - shift])));
      }
    }
  }
  CHECK(worst <= 1e-4);
}

TEST_CASE("gradients through render and L1") {
  RendererConfig cfg;
  cfg.depth_levels = 2;
  cfg.base_channels = 2;
  cfg.in_channels = 3;
  const auto w = init_weights<double>(cfg, 13);
  const auto feat = random_tensor<double>({2, 16, 16}, 14);
  const auto depth = random_tensor<double>({1, 16, 16}, 15, 0, 1);
  const auto target = random_tensor<double>({3, 16, 16}, 16);

  std::vector<Tensor<double>> inputs{feat};
  for (const auto& [name, t] : w.entries()) inputs.push_back(t);
  numerics::ScalarClosure<double> fn = [&](const std::vector<Tensor<double>>& in) {
    ParamStore<double> ww;
    for (std::size_t i = 0; i < w.size(); ++i) ww.add(w.entries()[i].first, in[i + 1]);
    const auto out = render(in[0], depth, ww, cfg);
    return numerics::mean(numerics::abs(numerics::sub(out.rgb, target)));
  };
  numerics::GradCheckOptions opt;
  opt.max_coords_per_input = 24;
  const auto report = numerics::grad_check(fn, inputs, opt);
  INFO(report.worst);
  CHECK(report.pass);
}
