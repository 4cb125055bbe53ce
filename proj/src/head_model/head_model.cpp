#include "cvthead/head_model/head_model.hpp"

#include <Eigen/Geometry>
#include <algorithm>
#include <cmath>
#include <set>
#include <string>

#include "cvthead/errors.hpp"

namespace cvthead::head_model {

namespace {

void require_len(const std::vector<float>& v, std::size_t n, const char* name) {
  if (v.size() != n) {
    throw ShapeError(std::string(name) + " has " + std::to_string(v.size()) + " values, expected " +
                     std::to_string(n));
  }
}

Vertices skin(const HeadModel& m, const Vertices& vertices, const Vertices& joints, const std::vector<float>& theta) {
  if (std::all_of(theta.begin(), theta.end(), [](float t) { return t == 0.0f; })) return vertices;
  const std::size_t n = m.n_vertices(), nj = m.n_joints();
  std::vector<Eigen::Matrix3d> rot(nj);
  std::vector<Eigen::Vector3d> offset(nj);
  std::vector<Eigen::Vector3d> world_t(nj);
  for (std::size_t j = 0; j < nj; ++j) {
    const Eigen::Vector3d aa(theta[3 + 3 * j], theta[4 + 3 * j], theta[5 + 3 * j]);
    const Eigen::Matrix3d local = rodrigues(aa);
    const Eigen::Vector3d jp = joints.row(static_cast<Eigen::Index>(j)).cast<double>().transpose();
    const int parent = m.parents[j];
    if (parent < 0) {
      rot[j] = local;
      world_t[j] = jp;
    } else {
      const Eigen::Vector3d pp = joints.row(parent).cast<double>().transpose();
      rot[j] = rot[parent] * local;
      world_t[j] = rot[parent] * (jp - pp) + world_t[parent];
    }
    // Relative transform: x -> R (x - J_rest) + J_world
    offset[j] = world_t[j] - rot[j] * jp;
  }
  const Eigen::Matrix3d global = rodrigues(Eigen::Vector3d(theta[0], theta[1], theta[2]));

  Vertices out(static_cast<Eigen::Index>(n), 3);
  for (std::size_t v = 0; v < n; ++v) {
    Eigen::Matrix3d r = Eigen::Matrix3d::Zero();
    Eigen::Vector3d t = Eigen::Vector3d::Zero();
    for (std::size_t j = 0; j < nj; ++j) {
      const double w = m.skin_weights(static_cast<Eigen::Index>(v), static_cast<Eigen::Index>(j));
      if (w == 0.0) continue;
      r += w * rot[j];
      t += w * offset[j];
    }
    const Eigen::Vector3d x = vertices.row(static_cast<Eigen::Index>(v)).cast<double>().transpose();
    out.row(static_cast<Eigen::Index>(v)) = (global * (r * x + t)).cast<float>().transpose();
  }
  return out;
}

}  // namespace

Eigen::Matrix3d rodrigues(const Eigen::Vector3d& axis_angle) {
  const double angle = axis_angle.norm();
  if (angle < 1e-12) {
    Eigen::Matrix3d k;
    k << 0, -axis_angle.z(), axis_angle.y(), axis_angle.z(), 0, -axis_angle.x(), -axis_angle.y(), axis_angle.x(), 0;
    return Eigen::Matrix3d::Identity() + k;
  }
  return Eigen::AngleAxisd(angle, axis_angle / angle).toRotationMatrix();
}

AvatarParams AvatarParams::zeros(const HeadModel& m) {
  AvatarParams p;
  p.beta.assign(m.shape_dims(), 0.0f);
  p.phi.assign(m.expr_dims(), 0.0f);
  p.theta.assign(m.pose_dims(), 0.0f);
  return p;
}

void AvatarParams::validate(const HeadModel& m) const {
  require_len(beta, m.shape_dims(), "beta");
  require_len(phi, m.expr_dims(), "phi");
  require_len(theta, m.pose_dims(), "theta");
  for (const auto* v : {&beta, &phi, &theta}) {
    for (float x : *v) {
      if (!std::isfinite(x)) throw ShapeError("params contain non-finite values");
    }
  }
  camera.validate();
  if (offsets && static_cast<std::size_t>(offsets->rows()) != m.n_vertices()) {
    throw ShapeError("offsets has " + std::to_string(offsets->rows()) + " rows, expected " +
                     std::to_string(m.n_vertices()));
  }
}

Vertices apply_blendshapes(const HeadModel& m, const std::vector<float>& beta, const std::vector<float>& phi) {
  require_len(beta, m.shape_dims(), "beta");
  require_len(phi, m.expr_dims(), "phi");
  const auto n3 = static_cast<Eigen::Index>(3 * m.n_vertices());
  Eigen::VectorXf flat = Eigen::Map<const Eigen::VectorXf>(m.template_vertices.data(), n3);
  if (m.shape_dims() > 0) {
    flat.noalias() += m.shape_basis * Eigen::Map<const Eigen::VectorXf>(beta.data(), m.shape_basis.cols());
  }
  if (m.expr_dims() > 0) {
    flat.noalias() += m.expr_basis * Eigen::Map<const Eigen::VectorXf>(phi.data(), m.expr_basis.cols());
  }
  return Eigen::Map<const Vertices>(flat.data(), static_cast<Eigen::Index>(m.n_vertices()), 3);
}

Vertices regress_joints(const HeadModel& m, const Vertices& vertices) {
  if (static_cast<std::size_t>(vertices.rows()) != m.n_vertices()) {
    throw ShapeError("regress_joints: expected " + std::to_string(m.n_vertices()) + " vertices");
  }
  const auto& reg = m.joint_regressor;
  Vertices joints(static_cast<Eigen::Index>(reg.rows()), 3);
  for (std::size_t j = 0; j < reg.rows(); ++j) {
    Eigen::Vector3d acc = Eigen::Vector3d::Zero();
    for (std::uint32_t k = reg.row_ptr()[j]; k < reg.row_ptr()[j + 1]; ++k) {
      acc += static_cast<double>(reg.values()[k]) * vertices.row(reg.col_index()[k]).cast<double>().transpose();
    }
    joints.row(static_cast<Eigen::Index>(j)) = acc.cast<float>().transpose();
  }
  return joints;
}

Vertices apply_lbs(const HeadModel& m, const Vertices& vertices, const std::vector<float>& theta) {
  require_len(theta, m.pose_dims(), "theta");
  if (static_cast<std::size_t>(vertices.rows()) != m.n_vertices()) {
    throw ShapeError("apply_lbs: expected " + std::to_string(m.n_vertices()) + " vertices, got " +
                     std::to_string(vertices.rows()));
  }
  return skin(m, vertices, regress_joints(m, vertices), theta);
}

Vertices reconstruct(const HeadModel& m, const std::vector<float>& beta, const std::vector<float>& phi,
                     const std::vector<float>& theta) {
  return apply_lbs(m, apply_blendshapes(m, beta, phi), theta);
}

Vertices drive_vertices(const HeadModel& m, const std::vector<float>& beta_src, const std::vector<float>& phi_drv,
                        const std::vector<float>& theta_drv, const std::optional<Vertices>& offsets,
                        OffsetSpace space) {
  require_len(theta_drv, m.pose_dims(), "theta");
  if (offsets && static_cast<std::size_t>(offsets->rows()) != m.n_vertices()) {
    throw ShapeError("offsets has " + std::to_string(offsets->rows()) + " rows, expected " +
                     std::to_string(m.n_vertices()));
  }
  Vertices shaped = apply_blendshapes(m, beta_src, phi_drv);
  // Joints follow the bare head; offsets (hair, shoulders) never move them.
  const Vertices joints = regress_joints(m, shaped);
  auto add_offsets = [&](Vertices& target) {
    // Exact zeros are skipped so zero offsets leave the mesh bitwise intact.
    for (Eigen::Index i = 0; i < target.size(); ++i) {
      const float o = offsets->data()[i];
      if (o != 0.0f) target.data()[i] += o;
    }
  };
  if (offsets && space == OffsetSpace::canonical) add_offsets(shaped);
  Vertices posed = skin(m, shaped, joints, theta_drv);
  if (offsets && space == OffsetSpace::world) add_offsets(posed);
  return posed;
}

void HeadModel::validate() const {
  const std::size_t n = n_vertices();
  if (n == 0) throw InvariantError("model has no vertices");
  if (static_cast<std::size_t>(shape_basis.rows()) != 3 * n) throw InvariantError("shape_basis rows != 3N");
  if (static_cast<std::size_t>(expr_basis.rows()) != 3 * n) throw InvariantError("expr_basis rows != 3N");

  const std::size_t nj = parents.size();
  if (nj == 0) throw InvariantError("kinematic chain is empty");
  if (static_cast<std::size_t>(skin_weights.rows()) != n || static_cast<std::size_t>(skin_weights.cols()) != nj) {
    throw InvariantError("skin_weights must be N x J");
  }
  for (std::size_t v = 0; v < n; ++v) {
    double s = 0.0;
    for (std::size_t j = 0; j < nj; ++j) {
      const float w = skin_weights(static_cast<Eigen::Index>(v), static_cast<Eigen::Index>(j));
      if (!(w >= 0.0f)) throw InvariantError("skin_weights row " + std::to_string(v) + " has a negative weight");
      s += w;
    }
    if (std::abs(s - 1.0) > 1e-6) {
      throw InvariantError("skin_weights row " + std::to_string(v) + " sums to " + std::to_string(s));
    }
  }

  int roots = 0;
  for (std::size_t j = 0; j < nj; ++j) {
    if (parents[j] < 0) {
      if (parents[j] != -1) throw InvariantError("parents entry " + std::to_string(j) + " is invalid");
      ++roots;
    } else if (static_cast<std::size_t>(parents[j]) >= j) {
      throw InvariantError("parents must precede children (joint " + std::to_string(j) + ")");
    }
  }
  if (roots != 1) throw InvariantError("kinematic chain must have exactly one root");

  if (joint_regressor.rows() != nj || joint_regressor.cols() != n) {
    throw InvariantError("joint_regressor must be J x N");
  }

  for (Eigen::Index f = 0; f < faces.rows(); ++f) {
    for (int k = 0; k < 3; ++k) {
      if (faces(f, k) < 0 || static_cast<std::size_t>(faces(f, k)) >= n) {
        throw InvariantError("face " + std::to_string(f) + " references a missing vertex");
      }
    }
  }

  std::set<std::uint32_t> seen;
  for (std::uint32_t c : coarse_index) {
    if (c >= n) throw InvariantError("coarse_index entry " + std::to_string(c) + " >= N");
    if (!seen.insert(c).second) throw InvariantError("coarse_index entry " + std::to_string(c) + " repeated");
  }
  if (upsample_chain.empty()) throw InvariantError("upsample chain is empty");
  std::size_t rows = coarse_index.size();
  for (std::size_t s = 0; s < upsample_chain.size(); ++s) {
    const auto& u = upsample_chain[s];
    if (u.cols() != rows) throw InvariantError("upsample stage " + std::to_string(s) + " does not compose");
    for (double r : u.row_sums()) {
      if (std::abs(r - 1.0) > 1e-5) throw InvariantError("upsample stage " + std::to_string(s) + " not row-stochastic");
    }
    for (float v : u.values()) {
      if (v < 0.0f) throw InvariantError("upsample stage " + std::to_string(s) + " has negative weights");
    }
    rows = u.rows();
  }
  if (rows != n) throw InvariantError("upsample chain does not end at N rows");
}

}  // namespace cvthead::head_model
