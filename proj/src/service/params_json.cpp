#include "cvthead/service/params_json.hpp"

#include <cmath>

namespace cvthead::service {

using nlohmann::json;

namespace {

float finite_number(const json& v, const std::string& field) {
  if (!v.is_number()) throw ParamsError(field, "expected a number");
  const double d = v.get<double>();
  if (!std::isfinite(d)) throw ParamsError(field, "must be finite");
  return static_cast<float>(d);
}

std::vector<float> vector_field(const json& j, const char* key, std::size_t expected) {
  if (!j.contains(key) || j[key].is_null()) return std::vector<float>(expected, 0.0f);
  const auto& v = j[key];
  if (!v.is_array()) throw ParamsError(key, "expected an array");
  if (v.size() != expected) {
    throw ParamsError(key, "expected " + std::to_string(expected) + " values, got " + std::to_string(v.size()));
  }
  std::vector<float> out(expected);
  for (std::size_t i = 0; i < expected; ++i) {
    out[i] = finite_number(v[i], std::string(key) + "[" + std::to_string(i) + "]");
  }
  return out;
}

}  // namespace

head_model::AvatarParams params_from_json(const json& j, const head_model::HeadModel& model) {
  if (!j.is_object()) throw ParamsError("params", "expected a JSON object");
  head_model::AvatarParams p;
  p.beta = vector_field(j, "beta", model.shape_dims());
  p.phi = vector_field(j, "phi", model.expr_dims());
  p.theta = vector_field(j, "theta", model.pose_dims());

  if (j.contains("camera") && !j["camera"].is_null()) {
    const auto& c = j["camera"];
    if (!c.is_object()) throw ParamsError("camera", "expected an object");
    if (c.contains("scale")) p.camera.scale = finite_number(c["scale"], "camera.scale");
    if (c.contains("tx")) p.camera.tx = finite_number(c["tx"], "camera.tx");
    if (c.contains("ty")) p.camera.ty = finite_number(c["ty"], "camera.ty");
    if (!(p.camera.scale > 0.0f)) throw ParamsError("camera.scale", "must be positive");
  }

  if (j.contains("offsets") && !j["offsets"].is_null()) {
    const auto& o = j["offsets"];
    if (!o.is_array()) throw ParamsError("offsets", "expected null or an array of [x,y,z]");
    if (o.size() != model.n_vertices()) {
      throw ParamsError("offsets", "expected " + std::to_string(model.n_vertices()) + " rows, got " +
                                       std::to_string(o.size()));
    }
    head_model::Vertices off(static_cast<Eigen::Index>(o.size()), 3);
    for (std::size_t i = 0; i < o.size(); ++i) {
      const std::string field = "offsets[" + std::to_string(i) + "]";
      if (!o[i].is_array() || o[i].size() != 3) throw ParamsError(field, "expected [x,y,z]");
      for (int k = 0; k < 3; ++k) off(static_cast<Eigen::Index>(i), k) = finite_number(o[i][k], field);
    }
    p.offsets = std::move(off);
  }
  return p;
}

head_model::AvatarParams parse_params(std::string_view text, const head_model::HeadModel& model) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParamsError("params", std::string("invalid JSON: ") + e.what());
  }
  return params_from_json(j, model);
}

json params_to_json(const head_model::AvatarParams& p) {
  json j;
  j["beta"] = p.beta;
  j["phi"] = p.phi;
  j["theta"] = p.theta;
  j["camera"] = {{"scale", p.camera.scale}, {"tx", p.camera.tx}, {"ty", p.camera.ty}};
  if (p.offsets) {
    json rows = json::array();
    for (Eigen::Index i = 0; i < p.offsets->rows(); ++i) {
      rows.push_back({(*p.offsets)(i, 0), (*p.offsets)(i, 1), (*p.offsets)(i, 2)});
    }
    j["offsets"] = std::move(rows);
  } else {
    j["offsets"] = nullptr;
  }
  return j;
}

}  // namespace cvthead::service
