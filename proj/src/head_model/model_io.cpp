#include <cmath>
#include <string>

#include "cvthead/errors.hpp"
#include "cvthead/head_model/head_model.hpp"

namespace cvthead::head_model {

namespace {

using numerics::Container;
using numerics::SparseMatrix;
using numerics::Triplet;

std::vector<std::uint32_t> dims_of(std::initializer_list<std::size_t> d) {
  return std::vector<std::uint32_t>(d.begin(), d.end());
}

void put_sparse(Container& c, const std::string& prefix, const SparseMatrix& m) {
  std::vector<float> rows, cols, vals;
  for (const Triplet& t : m.triplets()) {
    rows.push_back(static_cast<float>(t.row));
    cols.push_back(static_cast<float>(t.col));
    vals.push_back(t.value);
  }
  const std::size_t nnz = vals.size();
  c.put(prefix + "_rows", dims_of({nnz}), std::move(rows));
  c.put(prefix + "_cols", dims_of({nnz}), std::move(cols));
  c.put(prefix + "_vals", dims_of({nnz}), std::move(vals));
  c.put(prefix + "_shape", dims_of({2}), {static_cast<float>(m.rows()), static_cast<float>(m.cols())});
}

const Container::Entry& entry(const Container& c, const std::string& name, std::size_t ndim) {
  const auto& e = c.get(name);
  if (e.dims.size() != ndim) {
    throw FormatError("entry '" + name + "' has rank " + std::to_string(e.dims.size()) + ", expected " +
                      std::to_string(ndim));
  }
  return e;
}

std::int64_t as_index(float v, const std::string& name) {
  if (!std::isfinite(v) || std::floor(v) != v) throw FormatError("entry '" + name + "' holds a non-integer index");
  return static_cast<std::int64_t>(v);
}

SparseMatrix get_sparse(const Container& c, const std::string& prefix) {
  const auto& shape = entry(c, prefix + "_shape", 1);
  if (shape.values.size() != 2) throw FormatError("entry '" + prefix + "_shape' must hold 2 values");
  const auto& rows = entry(c, prefix + "_rows", 1);
  const auto& cols = entry(c, prefix + "_cols", 1);
  const auto& vals = entry(c, prefix + "_vals", 1);
  if (rows.values.size() != vals.values.size() || cols.values.size() != vals.values.size()) {
    throw FormatError("entries '" + prefix + "_{rows,cols,vals}' differ in length");
  }
  const auto nr = as_index(shape.values[0], prefix + "_shape");
  const auto nc = as_index(shape.values[1], prefix + "_shape");
  std::vector<Triplet> trip;
  trip.reserve(vals.values.size());
  for (std::size_t i = 0; i < vals.values.size(); ++i) {
    const auto r = as_index(rows.values[i], prefix + "_rows");
    const auto col = as_index(cols.values[i], prefix + "_cols");
    if (r < 0 || r >= nr || col < 0 || col >= nc) throw FormatError("entry '" + prefix + "' index out of range");
    trip.push_back({static_cast<std::uint32_t>(r), static_cast<std::uint32_t>(col), vals.values[i]});
  }
  return SparseMatrix(static_cast<std::size_t>(nr), static_cast<std::size_t>(nc), std::move(trip));
}

}  // namespace

Container to_container(const HeadModel& m) {
  const std::size_t n = m.n_vertices();
  Container c;
  c.put("template", dims_of({n, 3}),
        std::vector<float>(m.template_vertices.data(), m.template_vertices.data() + m.template_vertices.size()));
  c.put("shape_basis", dims_of({n, 3, m.shape_dims()}),
        std::vector<float>(m.shape_basis.data(), m.shape_basis.data() + m.shape_basis.size()));
  c.put("expr_basis", dims_of({n, 3, m.expr_dims()}),
        std::vector<float>(m.expr_basis.data(), m.expr_basis.data() + m.expr_basis.size()));
  c.put("skin_weights", dims_of({n, m.n_joints()}),
        std::vector<float>(m.skin_weights.data(), m.skin_weights.data() + m.skin_weights.size()));
  put_sparse(c, "joint_regressor", m.joint_regressor);
  c.put("parents", dims_of({m.n_joints()}), std::vector<float>(m.parents.begin(), m.parents.end()));
  c.put("faces", dims_of({static_cast<std::size_t>(m.faces.rows()), 3}),
        std::vector<float>(m.faces.data(), m.faces.data() + m.faces.size()));
  c.put("coarse_index", dims_of({m.n_coarse()}), std::vector<float>(m.coarse_index.begin(), m.coarse_index.end()));
  for (std::size_t i = 0; i < m.upsample_chain.size(); ++i) {
    put_sparse(c, "upsample_" + std::to_string(i), m.upsample_chain[i]);
  }
  return c;
}

HeadModel from_container(const Container& c) {
  HeadModel m;
  const auto& tmpl = entry(c, "template", 2);
  if (tmpl.dims[1] != 3) throw FormatError("entry 'template' must be N x 3");
  const std::size_t n = tmpl.dims[0];
  m.template_vertices = Eigen::Map<const Vertices>(tmpl.values.data(), static_cast<Eigen::Index>(n), 3);

  auto basis = [&](const char* name) {
    const auto& e = entry(c, name, 3);
    if (e.dims[0] != n || e.dims[1] != 3) {
      throw FormatError(std::string("entry '") + name + "' must be N x 3 x D");
    }
    return RowMatrix(Eigen::Map<const RowMatrix>(e.values.data(), static_cast<Eigen::Index>(3 * n), e.dims[2]));
  };
  m.shape_basis = basis("shape_basis");
  m.expr_basis = basis("expr_basis");

  const auto& par = entry(c, "parents", 1);
  for (float p : par.values) m.parents.push_back(static_cast<std::int32_t>(as_index(p, "parents")));

  const auto& sw = entry(c, "skin_weights", 2);
  if (sw.dims[0] != n || sw.dims[1] != m.parents.size()) throw FormatError("entry 'skin_weights' must be N x J");
  m.skin_weights = Eigen::Map<const RowMatrix>(sw.values.data(), sw.dims[0], sw.dims[1]);

  m.joint_regressor = get_sparse(c, "joint_regressor");

  const auto& faces = entry(c, "faces", 2);
  if (faces.dims[1] != 3) throw FormatError("entry 'faces' must be F x 3");
  m.faces.resize(faces.dims[0], 3);
  for (std::size_t i = 0; i < faces.values.size(); ++i) {
    m.faces.data()[i] = static_cast<std::int32_t>(as_index(faces.values[i], "faces"));
  }

  const auto& coarse = entry(c, "coarse_index", 1);
  for (float v : coarse.values) {
    const auto idx = as_index(v, "coarse_index");
    if (idx < 0) throw FormatError("entry 'coarse_index' holds a negative index");
    m.coarse_index.push_back(static_cast<std::uint32_t>(idx));
  }

  for (std::size_t i = 0; c.has("upsample_" + std::to_string(i) + "_shape"); ++i) {
    m.upsample_chain.push_back(get_sparse(c, "upsample_" + std::to_string(i)));
  }

  m.validate();
  return m;
}

void save_model(const HeadModel& m, const std::filesystem::path& path) { to_container(m).save(path); }

HeadModel load_model(const std::filesystem::path& path) { return from_container(Container::load(path)); }

}  // namespace cvthead::head_model
