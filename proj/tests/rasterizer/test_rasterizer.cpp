#include <doctest.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <numeric>
#include <random>

#include "cvthead/errors.hpp"
#include "cvthead/head_model/head_model.hpp"
#include "cvthead/rasterizer/rasterizer.hpp"

using namespace cvthead;
using namespace cvthead::rasterizer;
using camera::CameraParams;

namespace {

struct Config {
  Vertices verts;
  std::vector<float> desc;
  CameraParams cam;
};

Config random_config(std::uint64_t seed, std::size_t channels) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> count(1, 50);
  std::uniform_real_distribution<float> pos(-1.3f, 1.3f);
  std::uniform_int_distribution<int> depth_level(0, 4);
  Config c;
  const int n = count(rng);
  c.verts.resize(n, 3);
  for (int i = 0; i < n; ++i) {
    // Few positions and quantized depths so collisions and ties are common.
    c.verts(i, 0) = std::round(pos(rng) * 6.0f) / 6.0f;
    c.verts(i, 1) = std::round(pos(rng) * 6.0f) / 6.0f;
    c.verts(i, 2) = 0.25f * static_cast<float>(depth_level(rng)) - 0.5f;
  }
  c.desc.resize(n * channels);
  for (auto& x : c.desc) x = pos(rng);
  std::uniform_real_distribution<float> sc(0.6f, 1.4f), tr(-0.2f, 0.2f);
  c.cam = {sc(rng), tr(rng), tr(rng)};
  return c;
}

// Per-pixel brute force: scan every vertex, keep (largest d, then smallest index).
SplatImage oracle(const Config& c, std::size_t channels, int w, int h, float background) {
  SplatImage s;
  s.width = w;
  s.height = h;
  s.channels = static_cast<int>(channels);
  s.features.assign(static_cast<std::size_t>(w * h) * channels, background);
  s.depth.assign(static_cast<std::size_t>(w * h), 0.0f);
  s.index.assign(static_cast<std::size_t>(w * h), -1);
  std::vector<float> raw(static_cast<std::size_t>(w * h), 0.0f);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      int best = -1;
      float best_d = 0.0f;
      for (int i = 0; i < c.verts.rows(); ++i) {
        const float u = c.cam.scale * c.verts(i, 0) + c.cam.tx;
        const float v = -(c.cam.scale * c.verts(i, 1)) + c.cam.ty;
        const double fx = std::floor((double(u) + 1.0) / 2.0 * w), fy = std::floor((double(v) + 1.0) / 2.0 * h);
        if (fx != x || fy != y) continue;
        const float d = c.verts(i, 2);
        if (best < 0 || d > best_d) {
          best = i;
          best_d = d;
        }
      }
      const auto at = static_cast<std::size_t>(y * w + x);
      s.index[at] = best;
      if (best < 0) continue;
      raw[at] = best_d;
      for (std::size_t k = 0; k < channels; ++k) s.features[at * channels + k] = c.desc[best * channels + k];
    }
  }
  float lo = INFINITY, hi = -INFINITY;
  for (std::size_t at = 0; at < raw.size(); ++at) {
    if (s.index[at] < 0) continue;
    lo = std::min(lo, raw[at]);
    hi = std::max(hi, raw[at]);
  }
  for (std::size_t at = 0; at < raw.size(); ++at) {
    if (s.index[at] >= 0) s.depth[at] = hi > lo ? (raw[at] - lo) / (hi - lo) : raw[at];
  }
  return s;
}

bool same_bits(const std::vector<float>& a, const std::vector<float>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

}  // namespace

TEST_CASE("single vertex lands on one pixel") {
  // u = -1 + 2*(3.5/16), v = -1 + 2*(4.5/16) -> pixel (3,4).
  Vertices v(1, 3);
  v << -1.0f + 7.0f / 16.0f, -(-1.0f + 9.0f / 16.0f), 0.2f;
  const std::vector<float> d{0.5f, -1.5f};
  const auto s = splat(v, d, 2, {}, 16, 16, 0.0f);
  for (int y = 0; y < 16; ++y) {
    for (int x = 0; x < 16; ++x) {
      const bool hit = x == 3 && y == 4;
      CHECK(s.occupied(x, y) == hit);
      CHECK(s.feature(x, y, 0) == (hit ? 0.5f : 0.0f));
      CHECK(s.feature(x, y, 1) == (hit ? -1.5f : 0.0f));
    }
  }
  // A single occupied pixel keeps its raw depth.
  CHECK(s.depth_at(3, 4) == 0.2f);
}

TEST_CASE("nearer vertex wins a shared pixel") {
  Vertices v(2, 3);
  v << 0.01f, 0.01f, 0.3f, 0.01f, 0.01f, 0.7f;
  const std::vector<float> d{1.0f, 2.0f};
  const auto s = splat(v, d, 1, {}, 8, 8, -1.0f);
  CHECK(s.feature(4, 3, 0) == 2.0f);
  CHECK(s.index[3 * 8 + 4] == 1);
  CHECK(s.feature(0, 0, 0) == -1.0f);
  CHECK(s.depth_at(0, 0) == 0.0f);
}

TEST_CASE("equal depths go to the smaller index") {
  Vertices v(3, 3);
  v << 0.1f, 0.1f, 0.5f, 0.1f, 0.1f, 0.5f, 0.1f, 0.1f, 0.5f;
  const std::vector<float> d{7.0f, 8.0f, 9.0f};
  const std::vector<std::uint32_t> reversed{2, 1, 0};
  const auto a = rasterize(v, {}, 4, 4);
  const auto b = rasterize(v, {}, 4, 4, reversed);
  CHECK(a.index == b.index);
  CHECK(*std::max_element(a.index.begin(), a.index.end()) == 0);
}

TEST_CASE("out-of-frame vertices are culled") {
  Vertices v(2, 3);
  v << 1.2f, 0.0f, 0.9f, 0.0f, 0.0f, 0.1f;
  const std::vector<float> d{5.0f, 6.0f};
  const auto s = splat(v, d, 1, {}, 8, 8);
  const auto occupied = std::count_if(s.index.begin(), s.index.end(), [](int i) { return i >= 0; });
  CHECK(occupied == 1);
  CHECK(std::find(s.features.begin(), s.features.end(), 5.0f) == s.features.end());
}

TEST_CASE("splat rejects mismatched descriptor counts") {
  Vertices v = Vertices::Zero(3, 3);
  CHECK_THROWS_AS(splat(v, std::vector<float>(8), 4, {}, 8, 8), ShapeError);
  CHECK_THROWS_AS(rasterize(v, {}, 0, 8), ShapeError);
}

TEST_CASE("splat equals the brute-force oracle on 1000 configurations") {
  const std::size_t channels = 4;
  int mismatches = 0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const auto c = random_config(seed, channels);
    const float bg = seed % 2 == 0 ? 0.0f : -1.0f;
    const auto got = splat(c.verts, c.desc, channels, c.cam, 16, 16, bg);
    const auto ref = oracle(c, channels, 16, 16, bg);
    const bool same = got.index == ref.index && same_bits(got.features, ref.features) && same_bits(got.depth, ref.depth);
    if (!same) ++mismatches;
    const auto occ = static_cast<std::size_t>(std::count_if(got.index.begin(), got.index.end(), [](int i) { return i >= 0; }));
    CHECK(occ <= std::min<std::size_t>(c.verts.rows(), 256));
  }
  CHECK(mismatches == 0);
}

TEST_CASE("processing order never changes the output") {
  std::mt19937_64 rng(99);
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto c = random_config(seed + 5000, 4);
    const auto base = rasterize(c.verts, c.cam, 16, 16);
    std::vector<std::uint32_t> order(c.verts.rows());
    std::iota(order.begin(), order.end(), 0u);
    for (int k = 0; k < 5; ++k) {
      std::shuffle(order.begin(), order.end(), rng);
      const auto perm = rasterize(c.verts, c.cam, 16, 16, order);
      CHECK(perm.index == base.index);
      CHECK(same_bits(perm.depth, base.depth));
    }
  }
}

TEST_CASE("full head splat: depth range, occupancy and debug views") {
  const auto m = head_model::generate_synthetic_model(1);
  const auto verts = m.template_vertices;
  std::vector<float> desc(m.n_vertices() * 32);
  for (std::size_t i = 0; i < desc.size(); ++i) desc[i] = static_cast<float>(i % 97) / 97.0f;
  const auto s = splat(verts, desc, 32, {}, 256, 256);
  const auto [lo, hi] = std::minmax_element(s.depth.begin(), s.depth.end());
  CHECK(*lo == 0.0f);
  CHECK(*hi == 1.0f);
  const auto occ = std::count_if(s.index.begin(), s.index.end(), [](int i) { return i >= 0; });
  CHECK(occ > 1000);
  CHECK(occ <= 5023);
  const auto rgb = splat_view(s);
  const auto gray = depth_view(s);
  CHECK(rgb.size() == 256u * 256u * 3u);
  CHECK(gray.size() == 256u * 256u);
  CHECK(*std::max_element(gray.begin(), gray.end()) == 255);
}
