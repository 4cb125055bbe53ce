#include "cvthead/service/avatar.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "cvthead/numerics/ops.hpp"
#include "cvthead/rasterizer/rasterizer.hpp"

namespace cvthead::service {

using Clock = std::chrono::steady_clock;

namespace {

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

template <typename F>
auto stage(const char* name, F&& fn) {
  try {
    return fn();
  } catch (const RenderError&) {
    throw;
  } catch (const std::exception& e) {
    throw RenderError(name, e.what());
  }
}

Image8 rgb_image(const numerics::Tensor<float>& chw) {
  const int h = static_cast<int>(chw.dim(1)), w = static_cast<int>(chw.dim(2));
  renderer::FrameResult f;
  f.width = w;
  f.height = h;
  const std::size_t pixels = static_cast<std::size_t>(w) * h;
  f.rgb.resize(pixels * 3);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t p = 0; p < pixels; ++p) f.rgb[p * 3 + c] = chw[c * pixels + p];
  }
  return {w, h, 3, renderer::to_rgb8(f)};
}

}  // namespace

RenderMode parse_mode(std::string_view name) {
  if (name == "depth") return RenderMode::depth;
  if (name == "splat") return RenderMode::splat;
  if (name == "neural") return RenderMode::neural;
  if (name == "oracle") return RenderMode::oracle;
  throw ConfigError("unknown render mode '" + std::string(name) + "' (expected depth, splat, neural or oracle)");
}

std::string_view mode_name(RenderMode m) {
  switch (m) {
    case RenderMode::depth: return "depth";
    case RenderMode::splat: return "splat";
    case RenderMode::neural: return "neural";
    case RenderMode::oracle: return "oracle";
  }
  return "depth";
}

Avatar::Avatar(head_model::HeadModel model, std::optional<pipeline::LoadedWeights> weights, const AvatarOptions& opt)
    : model_(std::move(model)), oracle_(opt.oracle) {
  model_.validate();
  if (weights) {
    config_ = weights->config;
    weights_ = std::move(weights->weights);
  } else {
    config_ = pipeline::PipelineConfig::toy();
    config_.transformer.n_coarse = model_.n_coarse();
    weights_ = pipeline::init_weights<float>(config_, opt.weights_seed);
  }
  if (config_.transformer.n_coarse != model_.n_coarse()) {
    throw ConfigError("weights expect " + std::to_string(config_.transformer.n_coarse) + " coarse vertices, model has " +
                      std::to_string(model_.n_coarse()));
  }
  source_ = opt.source ? *opt.source : head_model::AvatarParams::zeros(model_);
  source_.validate(model_);
  albedo_ = training::random_albedo(model_, opt.albedo_seed);
  source_image_ =
      training::oracle_render(model_, source_, albedo_, opt.source_size, opt.source_size, oracle_).image;
  const auto src_verts = head_model::drive_vertices(model_, source_, config_.offset_space);
  descriptors_ = vertex_transformer::vertex_descriptors(source_image_, src_verts, source_.camera, model_, weights_,
                                                        config_.transformer);
}

Avatar Avatar::load(const std::filesystem::path& model_path, const std::optional<std::filesystem::path>& weights_path,
                    const AvatarOptions& opt) {
  head_model::HeadModel model;
  try {
    model = head_model::load_model(model_path);
  } catch (const std::exception& e) {
    throw FormatError("model file '" + model_path.string() + "': " + e.what());
  }
  std::optional<pipeline::LoadedWeights> weights;
  if (weights_path) {
    try {
      weights = pipeline::load_weights(*weights_path);
    } catch (const std::exception& e) {
      throw FormatError("weights file '" + weights_path->string() + "': " + e.what());
    }
  }
  return Avatar(std::move(model), std::move(weights), opt);
}

void Avatar::check_size(int size, RenderMode mode) const {
  if (size <= 0) throw ConfigError("frame size must be positive");
  const int f = 1 << config_.renderer.depth_levels;
  if (mode == RenderMode::neural && size % f != 0) {
    throw ConfigError("neural frames need a size divisible by " + std::to_string(f) + ", got " + std::to_string(size));
  }
}

RenderResult Avatar::render(const head_model::AvatarParams& params, RenderMode mode, int size) const {
  check_size(size, mode);
  params.validate(model_);
  RenderResult r;
  const auto t_total = Clock::now();

  if (mode == RenderMode::oracle) {
    const auto f = stage("oracle", [&] { return training::oracle_render(model_, params, albedo_, size, size, oracle_); });
    r.image = rgb_image(f.image);
    r.timing_ms["total"] = ms_since(t_total);
    return r;
  }

  auto t0 = Clock::now();
  const auto verts =
      stage("reconstruct", [&] { return head_model::drive_vertices(model_, params, config_.offset_space); });
  r.timing_ms["reconstruct"] = ms_since(t0);

  t0 = Clock::now();
  if (mode == RenderMode::depth) {
    const auto idx = stage("splat", [&] { return rasterizer::rasterize(verts, params.camera, size, size); });
    rasterizer::SplatImage s{idx.width, idx.height, 0, {}, idx.depth, idx.index};
    r.image = {size, size, 1, rasterizer::depth_view(s)};
    r.timing_ms["splat"] = ms_since(t0);
  } else if (mode == RenderMode::splat) {
    const auto s = stage("splat", [&] {
      return rasterizer::splat(verts, descriptors_.data(), descriptors_.dim(1), params.camera, size, size,
                               config_.background);
    });
    r.image = {size, size, 3, rasterizer::splat_view(s)};
    r.timing_ms["splat"] = ms_since(t0);
  } else {
    const auto idx = stage("splat", [&] { return rasterizer::rasterize(verts, params.camera, size, size); });
    const auto h = static_cast<std::size_t>(size);
    const auto features = stage("splat", [&] {
      return numerics::gather_to_image(descriptors_, std::span<const std::int32_t>(idx.index), h, h,
                                       config_.background);
    });
    r.timing_ms["splat"] = ms_since(t0);
    t0 = Clock::now();
    const auto out = stage("render", [&] {
      return renderer::render(features, numerics::Tensor<float>({1, h, h}, idx.depth), weights_, config_.renderer);
    });
    r.image = rgb_image(out.rgb);
    r.timing_ms["render"] = ms_since(t0);
  }
  r.timing_ms["total"] = ms_since(t_total);
  return r;
}

std::vector<std::pair<std::string, head_model::AvatarParams>> presets(const head_model::HeadModel& model) {
  std::vector<std::pair<std::string, head_model::AvatarParams>> out;
  const auto zero = head_model::AvatarParams::zeros(model);
  out.emplace_back("neutral", zero);
  auto jaw = zero;
  if (model.n_joints() >= 2) jaw.theta[6] = 0.3f;
  out.emplace_back("jaw_open", jaw);
  auto smile = zero;
  if (model.expr_dims() >= 2) {
    smile.phi[0] = 1.5f;
    smile.phi[1] = -0.8f;
  }
  out.emplace_back("expression", smile);
  auto turn = zero;
  turn.theta[1] = 0.6f;
  out.emplace_back("turn_left", turn);
  auto tilt = zero;
  tilt.theta[2] = 0.25f;
  tilt.theta[0] = -0.15f;
  out.emplace_back("tilt", tilt);
  auto close = zero;
  close.camera.scale = 1.3f;
  close.camera.ty = 0.1f;
  out.emplace_back("close_up", close);
  auto wide = zero;
  for (std::size_t i = 0; i < wide.beta.size(); ++i) wide.beta[i] = (i % 2 == 0 ? 1.0f : -1.0f);
  out.emplace_back("other_identity", wide);
  return out;
}

nlohmann::json model_info(const Avatar& avatar, int frame_size) {
  static const char* names[] = {"neck", "jaw", "left_eye", "right_eye"};
  const auto& m = avatar.model();
  nlohmann::json joint_names = nlohmann::json::array();
  for (std::size_t j = 0; j < m.n_joints(); ++j) {
    joint_names.push_back(j < 4 ? std::string(names[j]) : "joint" + std::to_string(j));
  }
  return {{"n_vertices", m.n_vertices()},
          {"n_coarse", m.n_coarse()},
          {"shape_dims", m.shape_dims()},
          {"expr_dims", m.expr_dims()},
          {"joints", m.n_joints()},
          {"joint_names", joint_names},
          {"pose_dims", m.pose_dims()},
          {"frame_size", frame_size},
          {"descriptor_channels", avatar.descriptors().dim(1)},
          {"modes", {"depth", "splat", "neural", "oracle"}}};
}

namespace {

nlohmann::json summary(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  auto q = [&](double p) {
    const double pos = p * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (v[hi] - v[lo]) * (pos - static_cast<double>(lo));
  };
  return {{"median", q(0.5)}, {"p95", q(0.95)}};
}

}  // namespace

nlohmann::json bench(const Avatar& avatar, const BenchOptions& opt) {
  const std::size_t iters = std::max<std::size_t>(1, opt.iters);
  const int size = opt.size;
  const auto& model = avatar.model();
  const auto& cfg = avatar.config();
  avatar.check_size(size, RenderMode::neural);

  auto drive = head_model::AvatarParams::zeros(model);
  drive.theta[1] = 0.3f;
  if (!drive.phi.empty()) drive.phi[0] = 1.0f;

  std::vector<double> rec, proj, trans, spl, ren, total;
  volatile int sink = 0;
  for (std::size_t it = 0; it < iters; ++it) {
    const auto t_frame = Clock::now();
    auto t0 = Clock::now();
    const auto verts = head_model::drive_vertices(model, drive, cfg.offset_space);
    rec.push_back(ms_since(t0));

    t0 = Clock::now();
    int visible = 0;
    for (Eigen::Index i = 0; i < verts.rows(); ++i) {
      const auto p = camera::project(verts(i, 0), verts(i, 1), verts(i, 2), drive.camera);
      if (camera::to_pixel(p.u, p.v, size, size)) ++visible;
    }
    sink = sink + visible;
    proj.push_back(ms_since(t0));

    t0 = Clock::now();
    const auto src_verts = head_model::drive_vertices(model, avatar.source(), cfg.offset_space);
    const auto desc = vertex_transformer::vertex_descriptors(avatar.source_image(), src_verts, avatar.source().camera,
                                                             model, avatar.weights(), cfg.transformer);
    trans.push_back(ms_since(t0));

    t0 = Clock::now();
    const auto s = rasterizer::splat(verts, desc.data(), desc.dim(1), drive.camera, size, size, cfg.background);
    spl.push_back(ms_since(t0));

    t0 = Clock::now();
    const auto h = static_cast<std::size_t>(size);
    std::vector<float> chw(desc.dim(1) * h * h);
    for (std::size_t p = 0; p < h * h; ++p) {
      for (std::size_t c = 0; c < desc.dim(1); ++c) chw[c * h * h + p] = s.features[p * desc.dim(1) + c];
    }
    const auto out = renderer::render(numerics::Tensor<float>({desc.dim(1), h, h}, std::move(chw)),
                                      numerics::Tensor<float>({1, h, h}, s.depth), avatar.weights(), cfg.renderer);
    sink = sink + static_cast<int>(out.rgb[0] > 0.0f);
    ren.push_back(ms_since(t0));
    total.push_back(ms_since(t_frame));
  }

  const auto tot = summary(total);
  nlohmann::json j;
  j["reconstruct_ms"] = summary(rec);
  j["project_ms"] = summary(proj);
  j["transformer_ms"] = summary(trans);
  j["splat_ms"] = summary(spl);
  j["render_ms"] = summary(ren);
  j["end_to_end_fps"] = {{"median", 1000.0 / tot["median"].get<double>()},
                         {"p95", 1000.0 / tot["p95"].get<double>()}};
  j["splats_per_second"] = 1000.0 / j["splat_ms"]["median"].get<double>();
  j["iters"] = iters;
  j["size"] = size;
  j["n_vertices"] = model.n_vertices();
  j["descriptor_channels"] = avatar.descriptors().dim(1);
  return j;
}

}  // namespace cvthead::service
