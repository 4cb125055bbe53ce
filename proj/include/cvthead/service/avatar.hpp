#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "cvthead/head_model/head_model.hpp"
#include "cvthead/pipeline/pipeline.hpp"
#include "cvthead/service/png.hpp"
#include "cvthead/training/training.hpp"

namespace cvthead::service {

enum class RenderMode { depth, splat, neural, oracle };

// Throws ConfigError listing the valid names.
RenderMode parse_mode(std::string_view name);
std::string_view mode_name(RenderMode m);

// Failure inside one pipeline stage ("reconstruct", "transformer", "splat", ...).
class RenderError : public Error {
 public:
  RenderError(std::string stage, const std::string& what)
      : Error(stage + ": " + what), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

struct AvatarOptions {
  // Source frame fed to the transformer: an oracle render of `source` params.
  int source_size = 64;
  std::optional<head_model::AvatarParams> source;
  std::uint64_t albedo_seed = 0;
  // Seeded init used when no weights file is given.
  std::uint64_t weights_seed = 0;
  training::OracleOptions oracle;
};

struct RenderResult {
  Image8 image;
  std::map<std::string, double> timing_ms;
};

// Model, weights and the encoded source identity; immutable after
// construction, so render() may run concurrently.
class Avatar {
 public:
  Avatar(head_model::HeadModel model, std::optional<pipeline::LoadedWeights> weights, const AvatarOptions& opt = {});

  // Errors name the file that failed to load.
  static Avatar load(const std::filesystem::path& model_path, const std::optional<std::filesystem::path>& weights_path,
                     const AvatarOptions& opt = {});

  const head_model::HeadModel& model() const noexcept { return model_; }
  const pipeline::PipelineConfig& config() const noexcept { return config_; }
  const numerics::ParamStore<float>& weights() const noexcept { return weights_; }
  const head_model::AvatarParams& source() const noexcept { return source_; }
  const numerics::Tensor<float>& source_image() const noexcept { return source_image_; }
  const numerics::Tensor<float>& descriptors() const noexcept { return descriptors_; }
  const head_model::Vertices& albedo() const noexcept { return albedo_; }

  // The size must be positive and, for neural mode, divisible by the U-Net factor.
  void check_size(int size, RenderMode mode) const;

  // Driving params keep their own beta: the frame shows the requested identity.
  RenderResult render(const head_model::AvatarParams& params, RenderMode mode, int size) const;

 private:
  head_model::HeadModel model_;
  pipeline::PipelineConfig config_;
  numerics::ParamStore<float> weights_;
  head_model::AvatarParams source_;
  numerics::Tensor<float> source_image_;
  numerics::Tensor<float> descriptors_;
  head_model::Vertices albedo_;
  training::OracleOptions oracle_;
};

// Named parameter sets for the control panel.
std::vector<std::pair<std::string, head_model::AvatarParams>> presets(const head_model::HeadModel& model);

// {"n_vertices","n_coarse","shape_dims","expr_dims","joints","joint_names","frame_size","modes"}
nlohmann::json model_info(const Avatar& avatar, int frame_size);

struct BenchOptions {
  std::size_t iters = 20;
  int size = 256;
};

// Per-stage median/p95 over `iters` frames: reconstruct_ms, project_ms,
// transformer_ms, splat_ms, render_ms, end_to_end_fps (p95 is the fps of the
// p95 frame time).
nlohmann::json bench(const Avatar& avatar, const BenchOptions& opt);

}  // namespace cvthead::service
