#include <Eigen/Geometry>
#include <algorithm>
#include <cmath>

#include "cvthead/errors.hpp"
#include "cvthead/numerics/parallel.hpp"
#include "cvthead/numerics/random.hpp"
#include "cvthead/rasterizer/rasterizer.hpp"
#include "cvthead/training/training.hpp"

namespace cvthead::training {

using head_model::Vertices;

Vertices vertex_normals(const head_model::HeadModel& model, const Vertices& vertices) {
  if (static_cast<std::size_t>(vertices.rows()) != model.n_vertices()) {
    throw ShapeError("vertex_normals: expected " + std::to_string(model.n_vertices()) + " vertices, got " +
                     std::to_string(vertices.rows()));
  }
  Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor> acc =
      Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>::Zero(vertices.rows(), 3);
  for (Eigen::Index f = 0; f < model.faces.rows(); ++f) {
    const auto a = model.faces(f, 0), b = model.faces(f, 1), c = model.faces(f, 2);
    const Eigen::Vector3d pa = vertices.row(a).cast<double>().transpose();
    const Eigen::Vector3d pb = vertices.row(b).cast<double>().transpose();
    const Eigen::Vector3d pc = vertices.row(c).cast<double>().transpose();
    // |cross| is twice the area, so the unnormalised cross is the area weight.
    const Eigen::Vector3d n = (pb - pa).cross(pc - pa);
    acc.row(a) += n.transpose();
    acc.row(b) += n.transpose();
    acc.row(c) += n.transpose();
  }
  Vertices out(vertices.rows(), 3);
  for (Eigen::Index i = 0; i < acc.rows(); ++i) {
    const double len = acc.row(i).norm();
    if (len > 0.0) {
      out.row(i) = (acc.row(i) / len).cast<float>();
    } else {
      out.row(i).setZero();
    }
  }
  return out;
}

OracleFrame oracle_render(const head_model::HeadModel& model, const head_model::AvatarParams& params,
                          const Vertices& albedo, int width, int height, const OracleOptions& opt,
                          head_model::OffsetSpace space) {
  const std::size_t n = model.n_vertices();
  if (static_cast<std::size_t>(albedo.rows()) != n) {
    throw ShapeError("oracle_render: albedo has " + std::to_string(albedo.rows()) + " rows, model has " +
                     std::to_string(n) + " vertices");
  }
  params.validate(model);
  const Vertices verts = head_model::drive_vertices(model, params, space);
  const Vertices normals = vertex_normals(model, verts);
  const Eigen::Vector3f light = opt.light.normalized();

  std::vector<float> colors(n * 3);
  for (std::size_t i = 0; i < n; ++i) {
    const float ndl = std::max(0.0f, normals.row(i).dot(light));
    const float shade = opt.ambient + opt.diffuse * ndl;
    for (int c = 0; c < 3; ++c) colors[i * 3 + c] = albedo(i, c) * shade;
  }
  const auto s = rasterizer::splat(verts, colors, 3, params.camera, width, height);

  const std::size_t pixels = static_cast<std::size_t>(width) * height;
  std::vector<float> image(3 * pixels, opt.background), mask(pixels, 0.0f);
  for (std::size_t p = 0; p < pixels; ++p) {
    if (s.index[p] < 0) continue;
    mask[p] = 1.0f;
    for (std::size_t c = 0; c < 3; ++c) image[c * pixels + p] = 2.0f * s.features[p * 3 + c] - 1.0f;
  }
  const auto h = static_cast<std::size_t>(height), w = static_cast<std::size_t>(width);
  return {Tensor<float>({3, h, w}, std::move(image)), Tensor<float>({1, h, w}, std::move(mask))};
}

Vertices random_albedo(const head_model::HeadModel& model, std::uint64_t seed) {
  numerics::Rng rng(seed);
  const std::size_t n = model.n_vertices();
  Eigen::Vector3f base(0.72f, 0.55f, 0.45f);
  for (int c = 0; c < 3; ++c) base[c] += static_cast<float>(rng.uniform(-0.12, 0.12));

  struct Blob {
    Eigen::Vector3f centre;
    float inv_two_sigma2;
    Eigen::Vector3f delta;
  };
  std::vector<Blob> blobs(6);
  for (auto& b : blobs) {
    Eigen::Vector3f d(static_cast<float>(rng.normal()), static_cast<float>(rng.normal()),
                      static_cast<float>(rng.normal()));
    b.centre = d.normalized();
    const float sigma = static_cast<float>(rng.uniform(0.25, 0.6));
    b.inv_two_sigma2 = 1.0f / (2.0f * sigma * sigma);
    for (int c = 0; c < 3; ++c) b.delta[c] = static_cast<float>(rng.uniform(-0.35, 0.35));
  }

  Vertices out(n, 3);
  for (std::size_t i = 0; i < n; ++i) {
    const Eigen::Vector3f dir = model.template_vertices.row(i).transpose().normalized();
    Eigen::Vector3f col = base;
    for (const auto& b : blobs) col += b.delta * std::exp(-(dir - b.centre).squaredNorm() * b.inv_two_sigma2);
    out.row(i) = col.cwiseMax(0.05f).cwiseMin(0.95f).transpose();
  }
  return out;
}

namespace {

std::uint64_t sample_seed(std::uint64_t seed, std::size_t i) {
  // splitmix64 of (seed, i).
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (i + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

head_model::AvatarParams random_pose(const head_model::HeadModel& model, const DatasetConfig& cfg,
                                     numerics::Rng& rng, const std::vector<float>& beta) {
  auto p = head_model::AvatarParams::zeros(model);
  p.beta = beta;
  for (auto& x : p.phi) x = static_cast<float>(rng.normal() * cfg.phi_sigma);
  for (std::size_t k = 0; k < p.theta.size(); ++k) {
    const double r = k < 3 ? cfg.pose_range : cfg.joint_range;
    p.theta[k] = static_cast<float>(rng.uniform(-r, r));
  }
  p.camera.scale = cfg.camera_scale * static_cast<float>(1.0 + rng.uniform(-cfg.camera_jitter, cfg.camera_jitter));
  p.camera.tx = static_cast<float>(rng.uniform(-cfg.camera_jitter, cfg.camera_jitter));
  p.camera.ty = static_cast<float>(rng.uniform(-cfg.camera_jitter, cfg.camera_jitter));
  return p;
}

}  // namespace

std::vector<ToySample> make_dataset(const head_model::HeadModel& model, const DatasetConfig& cfg) {
  if (cfg.pairs == 0) throw ConfigError("dataset needs at least one pair");
  if (cfg.size <= 0) throw ConfigError("dataset image size must be positive");
  std::vector<ToySample> out(cfg.pairs);
  numerics::parallel_for(cfg.pairs, [&](std::size_t i) {
    numerics::Rng rng(sample_seed(cfg.seed, i));
    std::vector<float> beta(model.shape_dims());
    for (auto& b : beta) b = static_cast<float>(rng.normal() * cfg.beta_sigma);
    ToySample s;
    s.source = random_pose(model, cfg, rng, beta);
    s.driving = random_pose(model, cfg, rng, beta);
    s.albedo = random_albedo(model, rng.next());
    const auto src = oracle_render(model, s.source, s.albedo, cfg.size, cfg.size, cfg.oracle);
    const auto drv = oracle_render(model, s.driving, s.albedo, cfg.size, cfg.size, cfg.oracle);
    s.source_image = src.image;
    s.target_image = drv.image;
    s.target_mask = drv.mask;
    out[i] = std::move(s);
  });
  return out;
}

}  // namespace cvthead::training
