#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "cvthead/camera/camera.hpp"
#include "cvthead/head_model/head_model.hpp"
#include "cvthead/numerics/params.hpp"
#include "cvthead/numerics/tensor.hpp"

namespace cvthead::vertex_transformer {

using numerics::ParamStore;
using numerics::Tensor;

struct TransformerConfig {
  std::size_t n_coarse = 314;
  std::size_t width = 128;  // C'
  std::size_t out_channels = 32;  // C
  std::size_t layers = 6;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  std::vector<std::size_t> cnn_channels{16, 32, 64};  // widths of the first stride-2 stages; last stage emits C'
  std::size_t upsample_stages = 2;
  double uv_scale = 64.0;
  double depth_scale = 64.0;
  bool positional_encoding = true;

  static TransformerConfig full();
  // Small enough to train on one core.
  static TransformerConfig toy();

  std::size_t downsample() const { return std::size_t{1} << (cnn_channels.size() + 1); }
  void validate() const;
};

template <typename T>
ParamStore<T> init_weights(const TransformerConfig& cfg, std::uint64_t seed);

// channel 2i = sin(p / 10000^(2i/d)), 2i+1 = cos(...)
template <typename T>
Tensor<T> sine_encoding_1d(std::span<const double> positions, std::size_t dim);
template <typename T>
Tensor<T> sine_encoding_2d(std::span<const double> u, std::span<const double> v, std::size_t dim);

template <typename T>
struct ImageTokens {
  Tensor<T> tokens;  // hw x C'
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
};

// image is 3 x H x W with H, W divisible by cfg.downsample().
template <typename T>
ImageTokens<T> encode_image(const Tensor<T>& image, const ParamStore<T>& w, const TransformerConfig& cfg);

template <typename T>
struct TokenSequence {
  Tensor<T> tokens;  // (N' + hw) x C', vertex block first
  std::size_t vertex_count = 0;
  std::size_t image_count = 0;
};

// coarse_vertices holds the N' source vertices selected by coarse_index.
template <typename T>
TokenSequence<T> build_tokens(const ParamStore<T>& w, const TransformerConfig& cfg,
                              const head_model::Vertices& coarse_vertices, const camera::CameraParams& cam,
                              const ImageTokens<T>& image);

// Encoder over the whole sequence; returns the vertex slice (N' x C').
template <typename T>
Tensor<T> transformer_forward(const TokenSequence<T>& seq, const ParamStore<T>& w, const TransformerConfig& cfg);

// One pre-norm block, exposed for tests.
template <typename T>
Tensor<T> encoder_block(const Tensor<T>& x, const ParamStore<T>& w, const TransformerConfig& cfg, std::size_t layer);

template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads);

template <typename T>
Tensor<T> project_descriptors(const Tensor<T>& states, const ParamStore<T>& w);

template <typename T>
Tensor<T> upsample_descriptors(const Tensor<T>& coarse, const head_model::HeadModel& model, const ParamStore<T>& w);

head_model::Vertices coarse_rows(const head_model::HeadModel& model, const head_model::Vertices& full);

// Source image + source vertices (N x 3) -> V_F (N x C).
template <typename T>
Tensor<T> vertex_descriptors(const Tensor<T>& source_image, const head_model::Vertices& source_vertices,
                             const camera::CameraParams& cam, const head_model::HeadModel& model,
                             const ParamStore<T>& w, const TransformerConfig& cfg);

// Ablation baseline: bilinear sample of features[C x H x W] at each vertex's
// projection (pixel centres on the lattice, border clamped). Returns N x C.
Tensor<float> pixel_aligned_features(const Tensor<float>& features, const head_model::Vertices& vertices,
                                     const camera::CameraParams& cam);

}  // namespace cvthead::vertex_transformer
