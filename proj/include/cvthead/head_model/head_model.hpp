#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cvthead/camera/camera.hpp"
#include "cvthead/numerics/container.hpp"
#include "cvthead/numerics/sparse.hpp"

namespace cvthead::head_model {

using Vertices = Eigen::Matrix<float, Eigen::Dynamic, 3, Eigen::RowMajor>;
using Faces = Eigen::Matrix<std::int32_t, Eigen::Dynamic, 3, Eigen::RowMajor>;
using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Parametric head mesh: template, linear shape/expression bases, skinning
// rig and the coarse-vertex hierarchy used by the feature upsampler.
struct HeadModel {
  Vertices template_vertices;               // N x 3
  RowMatrix shape_basis;                    // 3N x L, row (3v + axis)
  RowMatrix expr_basis;                     // 3N x K
  RowMatrix skin_weights;                   // N x J, convex rows
  numerics::SparseMatrix joint_regressor;   // J x N
  std::vector<std::int32_t> parents;        // J, -1 for the root
  Faces faces;                              // F x 3
  std::vector<std::uint32_t> coarse_index;  // N'
  std::vector<numerics::SparseMatrix> upsample_chain;  // composes N' -> N

  std::size_t n_vertices() const { return static_cast<std::size_t>(template_vertices.rows()); }
  std::size_t n_coarse() const { return coarse_index.size(); }
  std::size_t shape_dims() const { return static_cast<std::size_t>(shape_basis.cols()); }
  std::size_t expr_dims() const { return static_cast<std::size_t>(expr_basis.cols()); }
  std::size_t n_joints() const { return parents.size(); }
  // 3 global + 3 per joint.
  std::size_t pose_dims() const { return 3 * n_joints() + 3; }

  // Throws InvariantError naming the first violated invariant.
  void validate() const;
};

// Control vector of one rendered frame.
struct AvatarParams {
  std::vector<float> beta;
  std::vector<float> phi;
  std::vector<float> theta;
  camera::CameraParams camera;
  std::optional<Vertices> offsets;

  static AvatarParams zeros(const HeadModel& m);
  // Throws ShapeError naming the offending field.
  void validate(const HeadModel& m) const;
};

enum class OffsetSpace { canonical, world };

Vertices apply_blendshapes(const HeadModel& m, const std::vector<float>& beta, const std::vector<float>& phi);

// Rest-pose joint positions regressed from (pre-pose) vertices.
Vertices regress_joints(const HeadModel& m, const Vertices& vertices);

Vertices apply_lbs(const HeadModel& m, const Vertices& vertices, const std::vector<float>& theta);

Vertices reconstruct(const HeadModel& m, const std::vector<float>& beta, const std::vector<float>& phi,
                     const std::vector<float>& theta);

// Source identity with driving expression and pose, plus optional per-vertex
// offsets (canonical: added before skinning; world: added after).
Vertices drive_vertices(const HeadModel& m, const std::vector<float>& beta_src, const std::vector<float>& phi_drv,
                        const std::vector<float>& theta_drv, const std::optional<Vertices>& offsets,
                        OffsetSpace space = OffsetSpace::canonical);

inline Vertices drive_vertices(const HeadModel& m, const AvatarParams& p, OffsetSpace space = OffsetSpace::canonical) {
  return drive_vertices(m, p.beta, p.phi, p.theta, p.offsets, space);
}

// Rotation matrix for an axis-angle vector.
Eigen::Matrix3d rodrigues(const Eigen::Vector3d& axis_angle);

// Procedural stand-in for a licensed head model: lat-long ellipsoid with nose
// and ear bumps, smooth RBF bases, neck/jaw/eye rig. Deterministic per seed.
HeadModel generate_synthetic_model(std::uint64_t seed, std::size_t n_vertices = 5023, std::size_t n_coarse = 314,
                                   std::size_t shape_dims = 20, std::size_t expr_dims = 10, std::size_t joints = 4);

numerics::Container to_container(const HeadModel& m);
HeadModel from_container(const numerics::Container& c);
void save_model(const HeadModel& m, const std::filesystem::path& path);
HeadModel load_model(const std::filesystem::path& path);

}  // namespace cvthead::head_model
