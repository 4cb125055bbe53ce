#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "cvthead/errors.hpp"
#include "cvthead/numerics/grad_check.hpp"
#include "cvthead/numerics/ops.hpp"
#include "cvthead/vertex_transformer/vertex_transformer.hpp"
#include "test_util.hpp"

using namespace cvthead;
using namespace cvthead::vertex_transformer;
using numerics::ParamStore;
using numerics::Tensor;
using cvthead::testing::max_abs_diff;
using cvthead::testing::random_tensor;

namespace {

const head_model::HeadModel& model() {
  static const auto m = head_model::generate_synthetic_model(42);
  return m;
}

// Tiny configuration for oracle and gradient checks.
TransformerConfig tiny_config(std::size_t n_coarse) {
  TransformerConfig c;
  c.n_coarse = n_coarse;
  c.width = 8;
  c.out_channels = 4;
  c.layers = 1;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.cnn_channels = {4};  // 4x downsample
  c.upsample_stages = 1;
  return c;
}

head_model::Vertices random_vertices(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> d(-0.8f, 0.8f);
  head_model::Vertices v(static_cast<Eigen::Index>(n), 3);
  for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = d(rng);
  return v;
}

// Softmax(q k^T / sqrt(D)) v per head, with explicit loops in double.
std::vector<double> attention_oracle(const Tensor<double>& q, const Tensor<double>& k, const Tensor<double>& v,
                                     std::size_t heads) {
  const std::size_t n = q.dim(0), m = k.dim(0), c = q.dim(1), d = c / heads;
  std::vector<double> out(n * c, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> s(m);
      for (std::size_t j = 0; j < m; ++j) {
        double dot = 0.0;
        for (std::size_t t = 0; t < d; ++t) dot += q[i * c + h * d + t] * k[j * c + h * d + t];
        s[j] = dot / std::sqrt(double(d));
      }
      const double mx = *std::max_element(s.begin(), s.end());
      double z = 0.0;
      for (auto& x : s) z += (x = std::exp(x - mx));
      for (std::size_t j = 0; j < m; ++j) {
        for (std::size_t t = 0; t < d; ++t) out[i * c + h * d + t] += s[j] / z * v[j * c + h * d + t];
      }
    }
  }
  return out;
}

}  // namespace

TEST_CASE("sine_encoding_1d") {
  const std::vector<double> zero{0.0};
  const auto e0 = sine_encoding_1d<double>(zero, 8);
  for (std::size_t i = 0; i < 8; ++i) CHECK(e0[i] == (i % 2 == 0 ? 0.0 : 1.0));

  const std::vector<double> p{-3.7, 0.25, 12.0, 63.9};
  const auto e = sine_encoding_1d<double>(p, 16);
  double worst = 0.0;
  for (std::size_t n = 0; n < p.size(); ++n) {
    for (std::size_t ch = 0; ch < 16; ++ch) {
      const double k = static_cast<double>(ch / 2);
      const double arg = p[n] / std::pow(10000.0, 2.0 * k / 16.0);
      worst = std::max(worst, std::abs(e[n * 16 + ch] - (ch % 2 == 0 ? std::sin(arg) : std::cos(arg))));
    }
  }
  CHECK(worst <= 1e-6);

  // Channel 0 is plain sin(p).
  const std::vector<double> q{1.3, 1.3 + 2.0 * std::numbers::pi};
  const auto eq = sine_encoding_1d<double>(q, 4);
  CHECK(std::abs(eq[0] - eq[4]) < 1e-12);

  CHECK_THROWS_AS(sine_encoding_1d<float>(p, 7), ConfigError);
}

TEST_CASE("sine_encoding_2d splits into two 1d halves") {
  const std::vector<double> u{0.0, 5.5, -2.0}, v{0.0, -1.0, 40.0};
  const auto e = sine_encoding_2d<float>(u, v, 16);
  const auto eu = sine_encoding_1d<float>(u, 8), ev = sine_encoding_1d<float>(v, 8);
  for (std::size_t n = 0; n < 3; ++n) {
    for (std::size_t k = 0; k < 8; ++k) {
      CHECK(e[n * 16 + k] == eu[n * 8 + k]);
      CHECK(e[n * 16 + 8 + k] == ev[n * 8 + k]);
    }
  }
  for (std::size_t k = 0; k < 16; ++k) CHECK(e[k] == (k % 2 == 0 ? 0.0f : 1.0f));
  CHECK_THROWS_AS(sine_encoding_2d<float>(u, v, 10), ConfigError);
}

TEST_CASE("encode_image: full-size shape, zero image and determinism") {
  const auto cfg = TransformerConfig::full();
  const auto w = init_weights<float>(cfg, 1);
  const auto img = random_tensor<float>({3, 256, 256}, 3);
  const auto a = encode_image(img, w, cfg);
  CHECK(a.tokens.shape() == numerics::Shape{256, 128});
  CHECK(a.grid_h == 16);
  CHECK(a.grid_w == 16);
  CHECK(encode_image(img, w, cfg).tokens.same_values(a.tokens));

  // Biases start at zero.
  const auto z = encode_image(Tensor<float>::zeros({3, 64, 64}), w, cfg);
  CHECK(std::all_of(z.tokens.data().begin(), z.tokens.data().end(), [](float x) { return x == 0.0f; }));

  CHECK_THROWS_AS(encode_image(Tensor<float>::zeros({3, 40, 64}), w, cfg), ShapeError);
}

TEST_CASE("build_tokens layout and encodings") {
  const auto cfg = TransformerConfig::full();
  const auto w = init_weights<float>(cfg, 2);
  const auto verts = vertex_transformer::coarse_rows(model(), model().template_vertices);
  const auto img = encode_image(random_tensor<float>({3, 256, 256}, 4), w, cfg);
  const auto seq = build_tokens(w, cfg, verts, {}, img);
  CHECK(seq.tokens.shape() == numerics::Shape{570, 128});
  CHECK(seq.vertex_count == 314);
  CHECK(seq.image_count == 256);

  auto plain = cfg;
  plain.positional_encoding = false;
  const auto raw = build_tokens(w, plain, verts, {}, img);
  const auto xv = w["vertex_tokens"];
  for (std::size_t i = 0; i < xv.numel(); ++i) REQUIRE(raw.tokens[i] == xv[i]);
  for (std::size_t i = 0; i < img.tokens.numel(); ++i) REQUIRE(raw.tokens[xv.numel() + i] == img.tokens[i]);

  // Same (u,v,d) -> same additive encoding.
  auto twin = verts;
  twin.row(7) = twin.row(3);
  auto bare = w;
  bare.set("vertex_tokens", Tensor<float>::zeros({314, 128}));
  const auto s2 = build_tokens(bare, cfg, twin, {}, img);
  for (std::size_t k = 0; k < 128; ++k) CHECK(s2.tokens[7 * 128 + k] == s2.tokens[3 * 128 + k]);
  CHECK_THROWS_AS(build_tokens(w, cfg, random_vertices(10, 1), {}, img), ShapeError);
}

TEST_CASE("attention matches an explicit oracle") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto q = random_tensor<double>({3, 8}, seed), k = random_tensor<double>({5, 8}, seed + 10),
               v = random_tensor<double>({5, 8}, seed + 20);
    CHECK(max_abs_diff(multi_head_attention(q, k, v, 2), attention_oracle(q, k, v, 2)) < 1e-12);
  }
  // One key: output is that key's value row.
  const auto q = random_tensor<double>({2, 4}, 1), k = random_tensor<double>({1, 4}, 2), v = random_tensor<double>({1, 4}, 3);
  const auto out = multi_head_attention(q, k, v, 2);
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t c = 0; c < 4; ++c) CHECK(out[i * 4 + c] == doctest::Approx(v[c]).epsilon(1e-12));
  }
  // Identical keys: uniform weights, output is the mean of the values.
  const auto kk = Tensor<double>({3, 4}, std::vector<double>(12, 0.3));
  const auto vv = random_tensor<double>({3, 4}, 9);
  const auto mo = multi_head_attention(q, kk, vv, 2);
  for (std::size_t c = 0; c < 4; ++c) {
    const double mean = (vv[c] + vv[4 + c] + vv[8 + c]) / 3.0;
    CHECK(mo[c] == doctest::Approx(mean).epsilon(1e-12));
  }
}

TEST_CASE("single-token block reduces to output(value(token)) plus residual and MLP") {
  auto cfg = tiny_config(1);
  const auto w = init_weights<double>(cfg, 5);
  const auto x = random_tensor<double>({1, 8}, 6);
  const auto got = encoder_block(x, w, cfg, 0);

  const double eps = 1e-5;
  auto ln = [&](const Tensor<double>& t, const char* g, const char* b) {
    return numerics::layer_norm(t, w[g], w[b], eps);
  };
  auto lin = [&](const Tensor<double>& t, const std::string& name) {
    return numerics::linear(t, w[name + ".w"], w[name + ".b"]);
  };
  const auto attn = lin(lin(ln(x, "enc.layer0.ln1.w", "enc.layer0.ln1.b"), "enc.layer0.v"), "enc.layer0.o");
  const auto x1 = numerics::add(x, attn);
  const auto h = ln(x1, "enc.layer0.ln2.w", "enc.layer0.ln2.b");
  const auto expect = numerics::add(
      x1, lin(numerics::activation(lin(h, "enc.layer0.mlp1"), numerics::Activation::gelu), "enc.layer0.mlp2"));
  CHECK(max_abs_diff(got, expect) < 1e-12);
}

TEST_CASE("two-token encoder block matches a hand evaluation") {
  auto cfg = tiny_config(1);
  const auto w = init_weights<double>(cfg, 8);
  const auto x = random_tensor<double>({2, 8}, 9);
  const auto got = encoder_block(x, w, cfg, 0);

  // Independent loops for layer norm, projections, attention and MLP.
  auto get = [&](const std::string& n) { return w[n].to_vector(); };
  auto lnorm = [&](const std::vector<double>& in, const std::string& p) {
    const auto g = get(p + ".w"), b = get(p + ".b");
    std::vector<double> out(in.size());
    for (std::size_t r = 0; r < 2; ++r) {
      double mu = 0, var = 0;
      for (std::size_t c = 0; c < 8; ++c) mu += in[r * 8 + c] / 8.0;
      for (std::size_t c = 0; c < 8; ++c) var += (in[r * 8 + c] - mu) * (in[r * 8 + c] - mu) / 8.0;
      for (std::size_t c = 0; c < 8; ++c) out[r * 8 + c] = (in[r * 8 + c] - mu) / std::sqrt(var + 1e-5) * g[c] + b[c];
    }
    return out;
  };
  auto affine = [&](const std::vector<double>& in, std::size_t cin, const std::string& p) {
    const auto W = get(p + ".w"), b = get(p + ".b");
    const std::size_t cout = b.size(), rows = in.size() / cin;
    std::vector<double> out(rows * cout);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t o = 0; o < cout; ++o) {
        double s = b[o];
        for (std::size_t i = 0; i < cin; ++i) s += in[r * cin + i] * W[i * cout + o];
        out[r * cout + o] = s;
      }
    }
    return out;
  };
  const auto xin = x.to_vector();
  const auto h = lnorm(xin, "enc.layer0.ln1");
  const auto Q = affine(h, 8, "enc.layer0.q"), K = affine(h, 8, "enc.layer0.k"), V = affine(h, 8, "enc.layer0.v");
  const auto A = attention_oracle(Tensor<double>({2, 8}, Q), Tensor<double>({2, 8}, K), Tensor<double>({2, 8}, V), 2);
  const auto O = affine(A, 8, "enc.layer0.o");
  std::vector<double> x1(16);
  for (std::size_t i = 0; i < 16; ++i) x1[i] = xin[i] + O[i];
  auto m1 = affine(lnorm(x1, "enc.layer0.ln2"), 8, "enc.layer0.mlp1");
  for (auto& t : m1) t = 0.5 * t * (1.0 + std::erf(t / std::sqrt(2.0)));
  const auto m2 = affine(m1, 16, "enc.layer0.mlp2");
  std::vector<double> expect(16);
  for (std::size_t i = 0; i < 16; ++i) expect[i] = x1[i] + m2[i];
  CHECK(max_abs_diff(got, expect) < 1e-10);
}

TEST_CASE("project_descriptors") {
  auto cfg = TransformerConfig::full();
  auto w = init_weights<float>(cfg, 3);
  const auto states = random_tensor<float>({314, 128}, 4);
  w.set("head.w", Tensor<float>::zeros({128, 32}));
  auto z = project_descriptors(states, w);
  CHECK(std::all_of(z.data().begin(), z.data().end(), [](float x) { return x == 0.0f; }));

  std::vector<float> sel(128 * 32, 0.0f);
  for (std::size_t i = 0; i < 32; ++i) sel[i * 32 + i] = 1.0f;
  w.set("head.w", Tensor<float>({128, 32}, sel));
  const auto first = project_descriptors(states, w);
  for (std::size_t r = 0; r < 314; ++r) {
    for (std::size_t c = 0; c < 32; ++c) REQUIRE(first[r * 32 + c] == states[r * 128 + c]);
  }

  const auto rw = random_tensor<float>({128, 32}, 5), rb = random_tensor<float>({32}, 6);
  w.set("head.w", rw);
  w.set("head.b", rb);
  const auto got = project_descriptors(states, w);
  std::vector<double> ref(314 * 32);
  for (std::size_t r = 0; r < 314; ++r) {
    for (std::size_t o = 0; o < 32; ++o) {
      double s = rb[o];
      for (std::size_t i = 0; i < 128; ++i) s += double(states[r * 128 + i]) * rw[i * 32 + o];
      ref[r * 32 + o] = s;
    }
  }
  CHECK(max_abs_diff(got, ref) < 1e-4);
}

TEST_CASE("upsample_descriptors: constants, shape and dense oracle") {
  const auto& m = model();
  auto cfg = TransformerConfig::full();
  auto w = init_weights<float>(cfg, 4);
  const auto constant = Tensor<float>::full({314, 32}, 0.37f);
  const auto up = upsample_descriptors(constant, m, w);
  CHECK(up.shape() == numerics::Shape{5023, 32});
  double worst = 0.0;
  for (float x : up.data()) worst = std::max(worst, std::abs(double(x) - 0.37));
  CHECK(worst < 1e-6);

  const auto coarse = random_tensor<float>({314, 32}, 8);
  const auto got = upsample_descriptors(coarse, m, w);
  const auto [lo, hi] = std::minmax_element(coarse.data().begin(), coarse.data().end());
  const auto [glo, ghi] = std::minmax_element(got.data().begin(), got.data().end());
  CHECK(*glo >= *lo - 1e-6f);
  CHECK(*ghi <= *hi + 1e-6f);

  // Non-identity mixers against the densified chain.
  w.set("mix0.w", random_tensor<float>({32, 32}, 10, -0.3, 0.3));
  w.set("mix0.b", random_tensor<float>({32}, 11));
  w.set("mix1.w", random_tensor<float>({32, 32}, 12, -0.3, 0.3));
  const auto mixed = upsample_descriptors(coarse, m, w);
  const auto u0 = m.upsample_chain[0].dense(), u1 = m.upsample_chain[1].dense();
  const std::size_t n1 = m.upsample_chain[0].rows();
  auto mix = [&](const std::vector<double>& x, std::size_t rows, const char* name) {
    const auto W = w[std::string(name) + ".w"].cast<double>().to_vector();
    const auto b = w[std::string(name) + ".b"].cast<double>().to_vector();
    std::vector<double> out(rows * 32);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t o = 0; o < 32; ++o) {
        double s = b[o];
        for (std::size_t i = 0; i < 32; ++i) s += x[r * 32 + i] * W[i * 32 + o];
        out[r * 32 + o] = s;
      }
    }
    return out;
  };
  auto dense_mul = [](const std::vector<double>& a, std::size_t rows, std::size_t inner, const std::vector<double>& x) {
    std::vector<double> out(rows * 32, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t k = 0; k < inner; ++k) {
        const double s = a[r * inner + k];
        if (s == 0.0) continue;
        for (std::size_t c = 0; c < 32; ++c) out[r * 32 + c] += s * x[k * 32 + c];
      }
    }
    return out;
  };
  const auto l1 = mix(dense_mul(u0, n1, 314, coarse.cast<double>().to_vector()), n1, "mix0");
  const auto ref = mix(dense_mul(u1, 5023, n1, l1), 5023, "mix1");
  CHECK(max_abs_diff(mixed, ref) < 1e-5);

  CHECK_THROWS_AS(upsample_descriptors(Tensor<float>::zeros({300, 32}), m, w), ShapeError);
}

TEST_CASE("pixel-aligned sampling") {
  const auto constant = Tensor<float>::full({2, 8, 8}, 1.25f);
  const auto verts = random_vertices(20, 3);
  const auto out = pixel_aligned_features(constant, verts, {});
  for (float x : out.data()) CHECK(x == 1.25f);

  // Pixel centre (x=5, y=2) of an 8x8 grid.
  const auto fmap = random_tensor<float>({3, 8, 8}, 4);
  head_model::Vertices v(1, 3);
  v << -1.0f + 11.0f / 8.0f, -(-1.0f + 5.0f / 8.0f), 0.3f;
  const auto at = pixel_aligned_features(fmap, v, {});
  for (std::size_t c = 0; c < 3; ++c) CHECK(at[c] == fmap[c * 64 + 2 * 8 + 5]);

  // Identical (u,v), different depth: identical features.
  head_model::Vertices pair(2, 3);
  pair << 0.1f, 0.2f, 0.5f, 0.1f, 0.2f, -0.5f;
  const auto pf = pixel_aligned_features(fmap, pair, {});
  for (std::size_t c = 0; c < 3; ++c) CHECK(pf[c] == pf[3 + c]);
}

TEST_CASE("set invariance over image tokens at full scale") {
  auto cfg = TransformerConfig::full();
  cfg.positional_encoding = false;
  const auto w = init_weights<float>(cfg, 6);
  const auto img = encode_image(random_tensor<float>({3, 256, 256}, 7), w, cfg);
  const auto verts = coarse_rows(model(), model().template_vertices);
  const auto seq = build_tokens(w, cfg, verts, {}, img);
  const auto base = transformer_forward(seq, w, cfg);
  CHECK(base.shape() == numerics::Shape{314, 128});

  std::vector<std::size_t> perm(256);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), std::mt19937_64(1));
  std::vector<float> shuffled(256 * 128);
  for (std::size_t i = 0; i < 256; ++i) {
    std::copy_n(img.tokens.raw() + perm[i] * 128, 128, shuffled.data() + i * 128);
  }
  ImageTokens<float> permuted{Tensor<float>({256, 128}, shuffled), 16, 16};
  const auto other = transformer_forward(build_tokens(w, cfg, verts, {}, permuted), w, cfg);
  CHECK(max_abs_diff(base, other) < 1e-5);

  // Negative control: zeroing the vertex tokens changes the outputs.
  auto w0 = w;
  w0.set("vertex_tokens", Tensor<float>::zeros({314, 128}));
  CHECK(max_abs_diff(base, transformer_forward(build_tokens(w0, cfg, verts, {}, img), w0, cfg)) > 1e-3);
}

TEST_CASE("transformer gradient w.r.t. vertex tokens") {
  auto cfg = tiny_config(4);
  cfg.layers = 2;
  const auto w = init_weights<double>(cfg, 9);
  const auto verts = random_vertices(4, 10);
  const auto img = random_tensor<double>({3, 8, 8}, 11);
  const auto probe = random_tensor<double>({4, 8}, 12);
  numerics::ScalarClosure<double> fn = [&](const std::vector<Tensor<double>>& in) {
    auto ww = w;
    ww.set("vertex_tokens", in[0]);
    const auto tokens = encode_image(img, ww, cfg);
    REQUIRE(tokens.tokens.dim(0) == 4);
    const auto out = transformer_forward(build_tokens(ww, cfg, verts, {}, tokens), ww, cfg);
    return numerics::sum(numerics::mul(out, probe));
  };
  const auto report = numerics::grad_check(fn, {random_tensor<double>({4, 8}, 13)});
  CHECK(report.pass);
  CHECK(report.max_rel_err <= 1e-3);
}

TEST_CASE("full descriptor pipeline in full config") {
  const auto cfg = TransformerConfig::full();
  const auto w = init_weights<float>(cfg, 10);
  const auto vf = vertex_descriptors(random_tensor<float>({3, 256, 256}, 12), model().template_vertices, {}, model(),
                                     w, cfg);
  CHECK(vf.shape() == numerics::Shape{5023, 32});
  CHECK(w["vertex_tokens"].shape() == numerics::Shape{314, 128});
}
