#pragma once

#include <cstdint>
#include <filesystem>

#include "cvthead/head_model/head_model.hpp"
#include "cvthead/numerics/params.hpp"
#include "cvthead/rasterizer/rasterizer.hpp"
#include "cvthead/renderer/renderer.hpp"
#include "cvthead/vertex_transformer/vertex_transformer.hpp"

// Source image + params -> driven frame: descriptors, splat, U-Net.
namespace cvthead::pipeline {

using numerics::ParamStore;
using numerics::Tensor;

struct PipelineConfig {
  vertex_transformer::TransformerConfig transformer;
  renderer::RendererConfig renderer;
  float background = 0.0f;
  head_model::OffsetSpace offset_space = head_model::OffsetSpace::canonical;

  static PipelineConfig full();
  static PipelineConfig toy();
  void validate() const;
};

// Transformer and renderer weights in one store (their names never collide).
template <typename T>
ParamStore<T> init_weights(const PipelineConfig& cfg, std::uint64_t seed);

template <typename T>
struct Forward {
  Tensor<T> descriptors;  // N x C
  rasterizer::IndexMap splat;
  Tensor<T> features;  // C x H x W
  Tensor<T> depth;     // 1 x H x W
  renderer::RenderOutput<T> out;
};

// source_image: 3 x Hs x Ws in [-1,1]. The driven vertices use the source
// identity (beta) with the driving expression, pose, camera and offsets.
template <typename T>
Forward<T> forward(const head_model::HeadModel& model, const ParamStore<T>& w, const PipelineConfig& cfg,
                   const Tensor<T>& source_image, const head_model::AvatarParams& source,
                   const head_model::AvatarParams& driving, int width, int height);

// Weights plus the config needed to rebuild them.
void save_weights(const ParamStore<float>& w, const PipelineConfig& cfg, const std::filesystem::path& path);
struct LoadedWeights {
  ParamStore<float> weights;
  PipelineConfig config;
};
LoadedWeights load_weights(const std::filesystem::path& path);

}  // namespace cvthead::pipeline
