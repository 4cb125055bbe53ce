#include "cvthead/pipeline/pipeline.hpp"

#include <cmath>
#include <string>

#include "cvthead/errors.hpp"
#include "cvthead/numerics/ops.hpp"

namespace cvthead::pipeline {

PipelineConfig PipelineConfig::full() {
  PipelineConfig c;
  c.transformer = vertex_transformer::TransformerConfig::full();
  c.renderer.in_channels = c.transformer.out_channels + 1;
  return c;
}

PipelineConfig PipelineConfig::toy() {
  PipelineConfig c;
  c.transformer = vertex_transformer::TransformerConfig::toy();
  c.renderer.depth_levels = 4;
  c.renderer.base_channels = 24;
  c.renderer.in_channels = c.transformer.out_channels + 1;
  return c;
}

void PipelineConfig::validate() const {
  transformer.validate();
  renderer.validate();
  if (renderer.in_channels != transformer.out_channels + 1) {
    throw ConfigError("renderer input channels must equal descriptor channels + 1");
  }
}

template <typename T>
ParamStore<T> init_weights(const PipelineConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  auto w = vertex_transformer::init_weights<T>(cfg.transformer, seed);
  const auto r = renderer::init_weights<T>(cfg.renderer, seed ^ 0x9e3779b97f4a7c15ULL);
  for (const auto& [name, t] : r.entries()) w.add(name, t);
  return w;
}

template <typename T>
Forward<T> forward(const head_model::HeadModel& model, const ParamStore<T>& w, const PipelineConfig& cfg,
                   const Tensor<T>& source_image, const head_model::AvatarParams& source,
                   const head_model::AvatarParams& driving, int width, int height) {
  source.validate(model);
  driving.validate(model);
  const auto src_verts = head_model::drive_vertices(model, source, cfg.offset_space);
  const auto drv_verts =
      head_model::drive_vertices(model, source.beta, driving.phi, driving.theta, driving.offsets, cfg.offset_space);

  Forward<T> f;
  f.descriptors = vertex_transformer::vertex_descriptors(source_image, src_verts, source.camera, model, w,
                                                         cfg.transformer);
  f.splat = rasterizer::rasterize(drv_verts, driving.camera, width, height);
  const auto h = static_cast<std::size_t>(height), wd = static_cast<std::size_t>(width);
  f.features = numerics::gather_to_image(f.descriptors, std::span<const std::int32_t>(f.splat.index), h, wd,
                                         static_cast<T>(cfg.background));
  std::vector<T> depth(f.splat.depth.begin(), f.splat.depth.end());
  f.depth = Tensor<T>({1, h, wd}, std::move(depth));
  f.out = renderer::render(f.features, f.depth, w, cfg.renderer);
  return f;
}

namespace {

std::vector<float> encode_config(const PipelineConfig& c) {
  const auto& t = c.transformer;
  const auto& r = c.renderer;
  std::vector<float> v{static_cast<float>(t.n_coarse),     static_cast<float>(t.width),
                       static_cast<float>(t.out_channels), static_cast<float>(t.layers),
                       static_cast<float>(t.heads),        static_cast<float>(t.mlp_ratio),
                       static_cast<float>(t.upsample_stages), static_cast<float>(t.uv_scale),
                       static_cast<float>(t.depth_scale),  t.positional_encoding ? 1.0f : 0.0f,
                       static_cast<float>(r.depth_levels), static_cast<float>(r.base_channels),
                       static_cast<float>(r.max_channels), static_cast<float>(r.in_channels),
                       c.background,                       c.offset_space == head_model::OffsetSpace::world ? 1.0f : 0.0f,
                       static_cast<float>(t.cnn_channels.size())};
  for (auto ch : t.cnn_channels) v.push_back(static_cast<float>(ch));
  return v;
}

PipelineConfig decode_config(const std::vector<float>& v) {
  if (v.size() < 17 || v.size() != 17 + static_cast<std::size_t>(v[16])) {
    throw FormatError("entry 'meta.config' is malformed");
  }
  auto n = [&](std::size_t i) {
    if (!(v[i] >= 0.0f) || std::floor(v[i]) != v[i]) throw FormatError("entry 'meta.config' holds a bad count");
    return static_cast<std::size_t>(v[i]);
  };
  PipelineConfig c;
  auto& t = c.transformer;
  auto& r = c.renderer;
  t.n_coarse = n(0);
  t.width = n(1);
  t.out_channels = n(2);
  t.layers = n(3);
  t.heads = n(4);
  t.mlp_ratio = n(5);
  t.upsample_stages = n(6);
  t.uv_scale = v[7];
  t.depth_scale = v[8];
  t.positional_encoding = v[9] != 0.0f;
  r.depth_levels = n(10);
  r.base_channels = n(11);
  r.max_channels = n(12);
  r.in_channels = n(13);
  c.background = v[14];
  c.offset_space = v[15] != 0.0f ? head_model::OffsetSpace::world : head_model::OffsetSpace::canonical;
  t.cnn_channels.clear();
  for (std::size_t i = 0; i < n(16); ++i) t.cnn_channels.push_back(n(17 + i));
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("entry 'meta.config': ") + e.what());
  }
  return c;
}

}  // namespace

void save_weights(const ParamStore<float>& w, const PipelineConfig& cfg, const std::filesystem::path& path) {
  numerics::Container c;
  const auto meta = encode_config(cfg);
  c.put("meta.config", {static_cast<std::uint32_t>(meta.size())}, meta);
  w.write_to(c);
  c.save(path);
}

LoadedWeights load_weights(const std::filesystem::path& path) {
  const auto c = numerics::Container::load(path);
  if (!c.has("meta.config")) throw FormatError("missing entry 'meta.config'");
  LoadedWeights out;
  out.config = decode_config(c.get("meta.config").values);
  out.weights = ParamStore<float>::read_from(c, init_weights<float>(out.config, 0));
  return out;
}

template ParamStore<float> init_weights<float>(const PipelineConfig&, std::uint64_t);
template ParamStore<double> init_weights<double>(const PipelineConfig&, std::uint64_t);
template Forward<float> forward<float>(const head_model::HeadModel&, const ParamStore<float>&, const PipelineConfig&,
                                       const Tensor<float>&, const head_model::AvatarParams&,
                                       const head_model::AvatarParams&, int, int);
template Forward<double> forward<double>(const head_model::HeadModel&, const ParamStore<double>&,
                                         const PipelineConfig&, const Tensor<double>&, const head_model::AvatarParams&,
                                         const head_model::AvatarParams&, int, int);

}  // namespace cvthead::pipeline
