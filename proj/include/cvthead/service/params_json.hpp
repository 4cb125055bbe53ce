#pragma once

#include <json.hpp>
#include <string>
#include <string_view>

#include "cvthead/errors.hpp"
#include "cvthead/head_model/head_model.hpp"

namespace cvthead::service {

// Malformed params payload; field() names the offending key ("beta",
// "camera.scale", "offsets[12]", ...).
class ParamsError : public FormatError {
 public:
  ParamsError(std::string field, const std::string& what)
      : FormatError(field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

// {"beta":[..],"phi":[..],"theta":[..],"camera":{"scale","tx","ty"},"offsets":null|[[x,y,z]..]}
// Missing beta/phi/theta default to zeros and a missing camera to the identity
// camera; present fields must have the model's lengths.
head_model::AvatarParams params_from_json(const nlohmann::json& j, const head_model::HeadModel& model);
head_model::AvatarParams parse_params(std::string_view text, const head_model::HeadModel& model);
nlohmann::json params_to_json(const head_model::AvatarParams& p);

}  // namespace cvthead::service
