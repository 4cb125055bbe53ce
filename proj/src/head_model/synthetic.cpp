#include <Eigen/Geometry>
#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "cvthead/errors.hpp"
#include "cvthead/head_model/head_model.hpp"
#include "cvthead/numerics/random.hpp"

namespace cvthead::head_model {

namespace {

using numerics::SparseMatrix;
using numerics::Triplet;
using numerics::Rng;
using Vec3 = Eigen::Vector3d;

Vec3 random_direction(numerics::Rng& rng) {
  Vec3 v(rng.normal(), rng.normal(), rng.normal());
  return v / std::max(v.norm(), 1e-12);
}

struct Sphere {
  std::vector<Vec3> dirs;
  std::vector<std::array<std::int32_t, 3>> faces;
};

std::vector<std::size_t> ring_sizes(std::size_t total, std::size_t rings) {
  std::vector<double> w(rings);
  double wsum = 0.0;
  for (std::size_t i = 0; i < rings; ++i) {
    w[i] = std::sin(std::numbers::pi * static_cast<double>(i + 1) / static_cast<double>(rings + 1));
    wsum += w[i];
  }
  // Largest remainder on top of a floor of 3 per ring.
  const std::size_t spare = total - 3 * rings;
  std::vector<std::size_t> sizes(rings);
  std::vector<std::pair<double, std::size_t>> rem(rings);
  std::size_t used = 0;
  for (std::size_t i = 0; i < rings; ++i) {
    const double q = static_cast<double>(spare) * w[i] / wsum;
    sizes[i] = 3 + static_cast<std::size_t>(std::floor(q));
    used += sizes[i] - 3;
    rem[i] = {q - std::floor(q), i};
  }
  std::stable_sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; used < spare; ++k, ++used) ++sizes[rem[k].second];
  return sizes;
}

Sphere lat_long_sphere(std::size_t n) {
  const std::size_t body = n - 2;
  std::size_t rings = static_cast<std::size_t>(std::lround(std::sqrt(std::numbers::pi * static_cast<double>(body) / 4.0)));
  rings = std::clamp<std::size_t>(rings, 1, body / 3);
  const auto sizes = ring_sizes(body, rings);

  Sphere s;
  s.dirs.push_back(Vec3(0, 1, 0));
  std::vector<std::size_t> start(rings);
  std::vector<double> phase(rings);
  for (std::size_t i = 0; i < rings; ++i) {
    start[i] = s.dirs.size();
    const double polar = std::numbers::pi * static_cast<double>(i + 1) / static_cast<double>(rings + 1);
    phase[i] = (i % 2 == 0) ? 0.0 : 0.5;
    for (std::size_t k = 0; k < sizes[i]; ++k) {
      const double az = 2.0 * std::numbers::pi * (static_cast<double>(k) + phase[i]) / static_cast<double>(sizes[i]);
      s.dirs.push_back(Vec3(std::sin(polar) * std::sin(az), std::cos(polar), std::sin(polar) * std::cos(az)));
    }
  }
  s.dirs.push_back(Vec3(0, -1, 0));
  const auto top = 0;
  const auto bottom = static_cast<std::int32_t>(n - 1);

  auto idx = [&](std::size_t ring, std::size_t k) { return static_cast<std::int32_t>(start[ring] + k % sizes[ring]); };
  for (std::size_t k = 0; k < sizes[0]; ++k) s.faces.push_back({top, idx(0, k), idx(0, k + 1)});
  for (std::size_t k = 0; k < sizes[rings - 1]; ++k) {
    s.faces.push_back({bottom, idx(rings - 1, k + 1), idx(rings - 1, k)});
  }
  // Zipper between consecutive rings, advancing whichever side lags in azimuth.
  for (std::size_t r = 0; r + 1 < rings; ++r) {
    const std::size_t a = sizes[r], b = sizes[r + 1];
    auto angle = [&](std::size_t ring, std::size_t k) {
      return (static_cast<double>(k) + phase[ring]) / static_cast<double>(sizes[ring]);
    };
    std::size_t i = 0, j = 0;
    // Align the lower ring's starting vertex with the upper ring's first vertex.
    while (j < b && angle(r + 1, j) + 0.5 / static_cast<double>(b) < angle(r, 0)) ++j;
    std::size_t di = 0, dj = 0;
    while (di < a || dj < b) {
      const double next_i = angle(r, i + 1);
      const double next_j = angle(r + 1, j + 1);
      const bool step_i = dj >= b || (di < a && next_i <= next_j);
      if (step_i) {
        s.faces.push_back({idx(r, i), idx(r + 1, j), idx(r, i + 1)});
        ++i;
        ++di;
      } else {
        s.faces.push_back({idx(r, i), idx(r + 1, j), idx(r + 1, j + 1)});
        ++j;
        ++dj;
      }
    }
  }
  return s;
}

Vec3 unit(Vec3 v) { return v / v.norm(); }

double gauss(const Vec3& a, const Vec3& b, double sigma) { return std::exp(-(a - b).squaredNorm() / (sigma * sigma)); }

Vec3 shaped(const Vec3& dir) {
  const Vec3 radii(0.58, 0.74, 0.64);
  Vec3 p = dir.cwiseProduct(radii);
  const Vec3 nose = unit(Vec3(0.0, -0.05, 1.0));
  const Vec3 left_ear(1.0, 0.0, 0.0), right_ear(-1.0, 0.0, 0.0);
  double bump = 0.10 * gauss(dir, nose, 0.16) + 0.05 * gauss(dir, left_ear, 0.18) + 0.05 * gauss(dir, right_ear, 0.18);
  // Narrow the chin.
  bump -= 0.04 * gauss(dir, Vec3(0, -0.75, 0.66), 0.35);
  return p + bump * dir;
}

// Smooth displacement field: a handful of Gaussian bumps on the sphere.
void fill_basis(RowMatrix& basis, const std::vector<Vec3>& dirs, const std::vector<Vec3>& normals, Rng& rng,
                bool lower_face) {
  const std::size_t n = dirs.size();
  for (Eigen::Index col = 0; col < basis.cols(); ++col) {
    const int bumps = 4;
    std::vector<Vec3> centre(bumps), disp(bumps);
    std::vector<double> sigma(bumps);
    for (int b = 0; b < bumps; ++b) {
      Vec3 c;
      do {
        c = random_direction(rng);
      } while (lower_face && !(c.y() < 0.1 && c.y() > -0.7 && c.z() > 0.3));
      centre[b] = c;
      sigma[b] = rng.uniform(0.25, 0.6);
      disp[b] = Vec3(rng.normal(), rng.normal(), rng.normal()) * 0.004;
    }
    const double along = lower_face ? 0.012 : 0.02;
    std::vector<double> sign(bumps);
    for (int b = 0; b < bumps; ++b) sign[b] = rng.uniform() < 0.5 ? -1.0 : 1.0;
    for (std::size_t v = 0; v < n; ++v) {
      Vec3 d = Vec3::Zero();
      for (int b = 0; b < bumps; ++b) {
        const double g = gauss(dirs[v], centre[b], sigma[b]);
        d += g * (sign[b] * along * normals[v] + disp[b]);
      }
      for (int a = 0; a < 3; ++a) basis(static_cast<Eigen::Index>(3 * v + a), col) = static_cast<float>(d[a]);
    }
  }
}

std::vector<std::uint32_t> farthest_points(const std::vector<Vec3>& pts, std::size_t count) {
  std::vector<std::uint32_t> picked{0};
  std::vector<double> dist(pts.size(), std::numeric_limits<double>::infinity());
  while (picked.size() < count) {
    const Vec3& last = pts[picked.back()];
    std::size_t best = 0;
    double best_d = -1.0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      dist[i] = std::min(dist[i], (pts[i] - last).squaredNorm());
      if (dist[i] > best_d) {
        best_d = dist[i];
        best = i;
      }
    }
    picked.push_back(static_cast<std::uint32_t>(best));
  }
  return picked;
}

// Weights of p against the 3 nearest anchors: clamped barycentric on their
// triangle, inverse distance when the triangle is degenerate.
std::vector<std::pair<std::uint32_t, double>> interpolation_row(const Vec3& p, const std::vector<Vec3>& anchors) {
  const std::size_t k = std::min<std::size_t>(3, anchors.size());
  std::vector<std::pair<double, std::uint32_t>> near;
  near.reserve(anchors.size());
  for (std::size_t i = 0; i < anchors.size(); ++i) near.push_back({(anchors[i] - p).squaredNorm(), static_cast<std::uint32_t>(i)});
  std::partial_sort(near.begin(), near.begin() + static_cast<std::ptrdiff_t>(k), near.end());

  std::vector<double> w(k, 0.0);
  bool ok = false;
  if (k == 3) {
    const Vec3 a = anchors[near[0].second], b = anchors[near[1].second], c = anchors[near[2].second];
    const Vec3 e0 = b - a, e1 = c - a, e2 = p - a;
    const double d00 = e0.dot(e0), d01 = e0.dot(e1), d11 = e1.dot(e1), d20 = e2.dot(e0), d21 = e2.dot(e1);
    const double den = d00 * d11 - d01 * d01;
    if (den > 1e-12 * d00 * d11) {
      const double wb = (d11 * d20 - d01 * d21) / den;
      const double wc = (d00 * d21 - d01 * d20) / den;
      w = {std::max(0.0, 1.0 - wb - wc), std::max(0.0, wb), std::max(0.0, wc)};
      ok = w[0] + w[1] + w[2] > 1e-9;
    }
  }
  if (!ok) {
    for (std::size_t i = 0; i < k; ++i) w[i] = 1.0 / std::max(std::sqrt(near[i].first), 1e-9);
  }
  double s = 0.0;
  for (double x : w) s += x;
  std::vector<std::pair<std::uint32_t, double>> row;
  for (std::size_t i = 0; i < k; ++i) {
    if (w[i] > 0.0) row.push_back({near[i].second, w[i] / s});
  }
  return row;
}

// Rows follow `fine_order`; entries already present at the coarse level copy through.
SparseMatrix upsample_stage(const std::vector<Vec3>& pts, const std::vector<std::uint32_t>& coarse_order,
                            const std::vector<std::uint32_t>& fine_order) {
  std::vector<std::int64_t> pos(pts.size(), -1);
  for (std::size_t i = 0; i < coarse_order.size(); ++i) pos[coarse_order[i]] = static_cast<std::int64_t>(i);
  std::vector<Vec3> anchors;
  for (auto c : coarse_order) anchors.push_back(pts[c]);
  std::vector<Triplet> trip;
  for (std::size_t r = 0; r < fine_order.size(); ++r) {
    const auto row = static_cast<std::uint32_t>(r);
    if (pos[fine_order[r]] >= 0) {
      trip.push_back({row, static_cast<std::uint32_t>(pos[fine_order[r]]), 1.0f});
      continue;
    }
    for (const auto& [col, w] : interpolation_row(pts[fine_order[r]], anchors)) {
      trip.push_back({row, col, static_cast<float>(w)});
    }
  }
  return SparseMatrix(fine_order.size(), coarse_order.size(), std::move(trip));
}

}  // namespace

HeadModel generate_synthetic_model(std::uint64_t seed, std::size_t n_vertices, std::size_t n_coarse,
                                   std::size_t shape_dims, std::size_t expr_dims, std::size_t joints) {
  if (n_vertices < 11) throw ConfigError("synthetic model needs at least 11 vertices");
  if (n_coarse < 1 || n_coarse >= n_vertices) throw ConfigError("synthetic model needs 0 < n_coarse < n_vertices");
  if (joints < 1 || joints > 4) throw ConfigError("synthetic model supports 1..4 joints");

  Rng rng(seed);
  const Sphere sphere = lat_long_sphere(n_vertices);
  const std::size_t n = n_vertices;

  std::vector<Vec3> pts(n);
  for (std::size_t v = 0; v < n; ++v) pts[v] = shaped(sphere.dirs[v]);

  HeadModel m;
  m.template_vertices.resize(static_cast<Eigen::Index>(n), 3);
  for (std::size_t v = 0; v < n; ++v) {
    m.template_vertices.row(static_cast<Eigen::Index>(v)) = pts[v].cast<float>().transpose();
  }

  m.faces.resize(static_cast<Eigen::Index>(sphere.faces.size()), 3);
  std::vector<Vec3> normals(n, Vec3::Zero());
  for (std::size_t f = 0; f < sphere.faces.size(); ++f) {
    auto tri = sphere.faces[f];
    const Vec3 a = pts[tri[0]], b = pts[tri[1]], c = pts[tri[2]];
    Vec3 nrm = (b - a).cross(c - a);
    if (nrm.dot((a + b + c) / 3.0) < 0.0) {
      std::swap(tri[1], tri[2]);
      nrm = -nrm;
    }
    for (int k = 0; k < 3; ++k) {
      m.faces(static_cast<Eigen::Index>(f), k) = tri[k];
      normals[tri[k]] += nrm;
    }
  }
  for (auto& nrm : normals) nrm.normalize();

  m.shape_basis = RowMatrix::Zero(static_cast<Eigen::Index>(3 * n), static_cast<Eigen::Index>(shape_dims));
  m.expr_basis = RowMatrix::Zero(static_cast<Eigen::Index>(3 * n), static_cast<Eigen::Index>(expr_dims));
  fill_basis(m.shape_basis, sphere.dirs, normals, rng, false);
  fill_basis(m.expr_basis, sphere.dirs, normals, rng, true);

  // Rig: neck (root), jaw, left eye, right eye; all children of the neck.
  const std::array<std::int32_t, 4> parents{-1, 0, 0, 0};
  m.parents.assign(parents.begin(), parents.begin() + static_cast<std::ptrdiff_t>(joints));
  const Vec3 eye_l = unit(Vec3(0.35, 0.18, 0.92)), eye_r = unit(Vec3(-0.35, 0.18, 0.92));
  auto member = [&](std::size_t j, const Vec3& d) {
    switch (j) {
      case 0: return d.y() < -0.85;
      case 1: return d.y() >= -0.45 && d.y() <= -0.25;
      case 2: return std::acos(std::clamp(d.dot(eye_l), -1.0, 1.0)) < 0.18;
      default: return std::acos(std::clamp(d.dot(eye_r), -1.0, 1.0)) < 0.18;
    }
  };
  std::vector<Triplet> reg;
  for (std::size_t j = 0; j < joints; ++j) {
    std::vector<std::uint32_t> members;
    for (std::size_t v = 0; v < n; ++v) {
      if (member(j, sphere.dirs[v])) members.push_back(static_cast<std::uint32_t>(v));
    }
    if (members.empty()) throw ConfigError("mesh too coarse to place joint " + std::to_string(j));
    for (auto v : members) {
      reg.push_back({static_cast<std::uint32_t>(j), v, static_cast<float>(1.0 / static_cast<double>(members.size()))});
    }
  }
  m.joint_regressor = SparseMatrix(joints, n, std::move(reg));

  // Skinning: rigid root plus falloff around the chin and each eye.
  const std::array<Vec3, 4> centre{Vec3::Zero(), shaped(unit(Vec3(0, -0.6, 0.7))), shaped(eye_l), shaped(eye_r)};
  const std::array<double, 4> gain{1.0, 2.5, 6.0, 6.0};
  const std::array<double, 4> sigma{1.0, 0.3, 0.07, 0.07};
  m.skin_weights = RowMatrix::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(joints));
  for (std::size_t v = 0; v < n; ++v) {
    std::array<double, 4> w{1.0, 0.0, 0.0, 0.0};
    double s = 1.0;
    for (std::size_t j = 1; j < joints; ++j) {
      w[j] = gain[j] * gauss(pts[v], centre[j], sigma[j]);
      if (w[j] < 1e-3) w[j] = 0.0;
      s += w[j];
    }
    for (std::size_t j = 0; j < joints; ++j) {
      m.skin_weights(static_cast<Eigen::Index>(v), static_cast<Eigen::Index>(j)) = static_cast<float>(w[j] / s);
    }
  }

  // Coarse hierarchy: nested farthest-point prefixes growing 4x per stage.
  std::vector<std::size_t> level_sizes{n_coarse};
  while (level_sizes.back() * 4 < n) level_sizes.push_back(level_sizes.back() * 4);
  const auto fps = farthest_points(pts, level_sizes.back());
  m.coarse_index.assign(fps.begin(), fps.begin() + static_cast<std::ptrdiff_t>(n_coarse));
  std::vector<std::uint32_t> identity(n);
  for (std::size_t v = 0; v < n; ++v) identity[v] = static_cast<std::uint32_t>(v);
  for (std::size_t s = 0; s < level_sizes.size(); ++s) {
    const std::vector<std::uint32_t> coarse(fps.begin(), fps.begin() + static_cast<std::ptrdiff_t>(level_sizes[s]));
    const bool last = s + 1 == level_sizes.size();
    const std::vector<std::uint32_t> fine =
        last ? identity : std::vector<std::uint32_t>(fps.begin(), fps.begin() + static_cast<std::ptrdiff_t>(level_sizes[s + 1]));
    m.upsample_chain.push_back(upsample_stage(pts, coarse, fine));
  }

  m.validate();
  return m;
}

}  // namespace cvthead::head_model
