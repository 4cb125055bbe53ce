#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

#include "cvthead/head_model/head_model.hpp"
#include "cvthead/numerics/op_checks.hpp"
#include "cvthead/numerics/params.hpp"
#include "cvthead/pipeline/pipeline.hpp"
#include "cvthead/renderer/renderer.hpp"

namespace cvthead::training {

using numerics::ParamStore;
using numerics::Tensor;

// ---- oracle ----------------------------------------------------------------

// Area-weighted vertex normals (unit length; zero for isolated vertices).
head_model::Vertices vertex_normals(const head_model::HeadModel& model, const head_model::Vertices& vertices);

struct OracleFrame {
  Tensor<float> image;  // 3 x H x W in [-1,1]
  Tensor<float> mask;   // 1 x H x W, occupancy in {0,1}
};

struct OracleOptions {
  Eigen::Vector3f light{0.0f, 0.0f, 1.0f};
  float ambient = 0.3f;
  float diffuse = 0.7f;
  float background = 0.0f;  // image value of unoccupied pixels
};

// Lambert-shaded per-vertex colors splatted with the shared rasterizer.
// albedo: N x 3 in [0,1].
OracleFrame oracle_render(const head_model::HeadModel& model, const head_model::AvatarParams& params,
                          const head_model::Vertices& albedo, int width, int height, const OracleOptions& opt = {},
                          head_model::OffsetSpace space = head_model::OffsetSpace::canonical);

// Smooth random per-vertex colors: a skin base tone plus a few soft blobs.
head_model::Vertices random_albedo(const head_model::HeadModel& model, std::uint64_t seed);

// ---- dataset ---------------------------------------------------------------

struct ToySample {
  head_model::AvatarParams source;
  head_model::AvatarParams driving;  // same beta as source
  head_model::Vertices albedo;
  Tensor<float> source_image;  // 3 x H x W
  Tensor<float> target_image;  // 3 x H x W
  Tensor<float> target_mask;   // 1 x H x W
};

struct DatasetConfig {
  std::size_t pairs = 8;
  int size = 64;
  std::uint64_t seed = 0;
  float beta_sigma = 1.0f;
  float phi_sigma = 1.0f;
  float pose_range = 0.35f;  // rad, per global axis
  float joint_range = 0.15f;
  float camera_scale = 1.0f;
  float camera_jitter = 0.05f;
  OracleOptions oracle;
};

std::vector<ToySample> make_dataset(const head_model::HeadModel& model, const DatasetConfig& cfg);

// ---- loss and metrics ------------------------------------------------------

struct LossWeights {
  double l1 = 1.0;
  double seg = 1.0;
};

template <typename T>
struct Loss {
  Tensor<T> total;
  Tensor<T> l1;
  Tensor<T> dice;
};

// Mean absolute error over all elements, or over the masked pixels (mask is
// 1 x H x W, broadcast over channels) when a mask is given.
template <typename T>
Tensor<T> l1_loss(const Tensor<T>& pred, const Tensor<T>& target, const std::optional<Tensor<T>>& mask = std::nullopt);

// 1 - (2 sum(p t) + eps) / (sum(p) + sum(t) + eps).
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& pred, const Tensor<T>& target, T eps = T(1));

template <typename T>
Loss<T> loss_total(const renderer::RenderOutput<T>& pred, const Tensor<T>& target_image, const Tensor<T>& target_mask,
                   const LossWeights& lambda = {});

struct LossValues {
  double total = 0.0;
  double l1 = 0.0;
  double dice = 0.0;
};

LossValues loss_total(const renderer::FrameResult& pred, const Tensor<float>& target_image,
                      const Tensor<float>& target_mask, const LossWeights& lambda = {});

struct Metrics {
  double l1 = 0.0;
  double psnr = 0.0;
  double ssim = 0.0;
};

// Images are 3 x H x W in [-1,1]; all metrics are computed after remapping to
// [0,1]. A mask (1 x H x W) restricts L1 to the masked pixels.
Metrics metrics(const Tensor<float>& pred, const Tensor<float>& target,
                const std::optional<Tensor<float>>& mask = std::nullopt);
double psnr(const Tensor<float>& pred, const Tensor<float>& target);
double ssim(const Tensor<float>& pred, const Tensor<float>& target);
// Soft Dice coefficient without smoothing; 1 when both masks are empty.
double dice_score(const Tensor<float>& pred_mask, const Tensor<float>& target_mask);

// ---- optimisation ----------------------------------------------------------

class Adam {
 public:
  struct Options {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  explicit Adam(Options opt);
  // grads[i] matches params.entries()[i].
  void step(ParamStore<float>& params, const std::vector<Tensor<float>>& grads);
  std::size_t steps() const noexcept { return t_; }

 private:
  Options opt_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct LossRow {
  std::size_t step = 0;
  double total = 0.0;
  double l1 = 0.0;
  double dice = 0.0;
};

struct TrainConfig {
  pipeline::PipelineConfig pipeline = pipeline::PipelineConfig::toy();
  std::size_t steps = 2000;
  double lr = 1e-4;
  std::uint64_t seed = 0;
  // Samples per step (gradient averaged); 0 uses the whole dataset.
  std::size_t batch = 1;
  LossWeights lambda;
};

struct TrainResult {
  ParamStore<float> weights;
  std::vector<LossRow> curve;  // one row per step, loss before the update
};

using StepCallback = std::function<void(const LossRow&)>;

// Trains transformer + renderer weights from their seeded initialization.
TrainResult train_toy(const head_model::HeadModel& model, const std::vector<ToySample>& data, const TrainConfig& cfg,
                      const StepCallback& on_step = {});
// Continues from `initial`.
TrainResult train_toy(const head_model::HeadModel& model, const std::vector<ToySample>& data, const TrainConfig& cfg,
                      ParamStore<float> initial, const StepCallback& on_step = {});

struct EvalReport {
  double l1 = 0.0;
  double psnr = 0.0;
  double ssim = 0.0;
  double dice = 0.0;
  std::vector<Metrics> per_sample;
  std::vector<double> per_sample_dice;
};

EvalReport evaluate(const head_model::HeadModel& model, const ParamStore<float>& weights,
                    const pipeline::PipelineConfig& cfg, const std::vector<ToySample>& data);

// Composite gradient checks in 64-bit mode: the transformer path to the
// descriptors, render + L1, and the whole pipeline (head model, splat,
// renderer, loss) on a small synthetic model and at toy widths.
std::vector<numerics::GradCheckCase> pipeline_grad_checks();

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossRow>& rows);

}  // namespace cvthead::training
