#include <random>

#include "cvthead/numerics/ops.hpp"
#include "cvthead/training/training.hpp"

namespace cvthead::training {

namespace {

using D = double;
using numerics::GradCheckCase;
using numerics::GradCheckOptions;
using numerics::ScalarClosure;
using Inputs = std::vector<Tensor<D>>;

Tensor<D> uniform(const numerics::Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<D> v(numerics::shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor<D>(shape, std::move(v));
}

pipeline::PipelineConfig tiny_config() {
  pipeline::PipelineConfig c;
  c.transformer.n_coarse = 20;
  c.transformer.width = 8;
  c.transformer.heads = 2;
  c.transformer.layers = 1;
  c.transformer.mlp_ratio = 2;
  c.transformer.cnn_channels = {4, 4};
  c.transformer.out_channels = 3;
  c.renderer.depth_levels = 1;
  c.renderer.base_channels = 2;
  c.renderer.in_channels = 4;
  return c;
}

const head_model::HeadModel& tiny_model() {
  static const auto model = head_model::generate_synthetic_model(2, 200, 20);
  return model;
}

// Seeded init with biases drawn away from zero, so ReLUs on constant
// background pixels do not sit on their kink.
ParamStore<D> tiny_weights(const pipeline::PipelineConfig& cfg, std::mt19937_64& rng, std::uint64_t seed) {
  auto w = pipeline::init_weights<D>(cfg, seed);
  for (auto& [name, t] : w.entries()) {
    if (name.ends_with(".b")) t = uniform(t.shape(), rng, -0.2, 0.2);
  }
  return w;
}

head_model::AvatarParams random_params(const head_model::HeadModel& m, std::mt19937_64& rng) {
  std::normal_distribution<float> n(0.0f, 0.5f);
  auto p = head_model::AvatarParams::zeros(m);
  for (auto& b : p.beta) b = n(rng);
  for (auto& e : p.phi) e = n(rng);
  for (std::size_t i = 0; i < 6; ++i) p.theta[i] = 0.3f * n(rng);
  return p;
}

// Splits `w` into inputs appended to `in`; rebuild() reverses it.
std::size_t append_weights(const ParamStore<D>& w, Inputs& in) {
  const auto first = in.size();
  for (const auto& [name, t] : w.entries()) in.push_back(t);
  return first;
}

ParamStore<D> rebuild(const ParamStore<D>& like, const Inputs& in, std::size_t first) {
  ParamStore<D> out;
  for (std::size_t i = 0; i < like.size(); ++i) out.add(like.entries()[i].first, in[first + i]);
  return out;
}

GradCheckOptions sparse(const GradCheckOptions& opts, std::uint64_t seed, std::size_t coords = 4) {
  GradCheckOptions o = opts;
  o.seed = seed;
  if (o.max_coords_per_input == 0) o.max_coords_per_input = coords;
  // Many ReLUs per weight: a narrow window straddles fewer kinks.
  if (o.step == 0.0) o.step = 1e-6;
  return o;
}

}  // namespace

std::vector<GradCheckCase> pipeline_grad_checks() {
  std::vector<GradCheckCase> cases;

  cases.push_back({"vertex_descriptors", [](std::uint64_t seed, const GradCheckOptions& opts) {
                     std::mt19937_64 rng(seed);
                     const auto& model = tiny_model();
                     const auto cfg = tiny_config();
                     const auto w = tiny_weights(cfg, rng, seed);
                     const auto src = random_params(model, rng);
                     const auto verts = head_model::drive_vertices(model, src);
                     const auto proj = uniform({model.n_vertices(), cfg.transformer.out_channels}, rng);
                     Inputs in{uniform({3, 16, 16}, rng)};
                     const auto first = append_weights(w, in);
                     ScalarClosure<D> fn = [&](const Inputs& x) {
                       const auto d = vertex_transformer::vertex_descriptors<D>(x[0], verts, src.camera, model,
                                                                                rebuild(w, x, first), cfg.transformer);
                       return numerics::sum(numerics::mul(d, proj));
                     };
                     return numerics::grad_check<D>(fn, in, sparse(opts, seed));
                   }});

  cases.push_back({"render_loss", [](std::uint64_t seed, const GradCheckOptions& opts) {
                     std::mt19937_64 rng(seed);
                     const auto cfg = tiny_config();
                     const auto w = tiny_weights(cfg, rng, seed);
                     const auto target = uniform({3, 8, 8}, rng);
                     const auto tmask = uniform({1, 8, 8}, rng, 0.0, 1.0);
                     Inputs in{uniform({3, 8, 8}, rng), uniform({1, 8, 8}, rng, 0.0, 1.0)};
                     const auto first = append_weights(w, in);
                     ScalarClosure<D> fn = [&](const Inputs& x) {
                       const auto out = renderer::render<D>(x[0], x[1], rebuild(w, x, first), cfg.renderer);
                       return loss_total<D>(out, target, tmask).total;
                     };
                     return numerics::grad_check<D>(fn, in, sparse(opts, seed));
                   }});

  cases.push_back({"pipeline", [](std::uint64_t seed, const GradCheckOptions& opts) {
                     std::mt19937_64 rng(seed);
                     const auto& model = tiny_model();
                     const auto cfg = tiny_config();
                     const auto w = tiny_weights(cfg, rng, seed);
                     const auto src = random_params(model, rng);
                     auto drv = random_params(model, rng);
                     drv.beta = src.beta;
                     const auto target = uniform({3, 16, 16}, rng);
                     const auto tmask = uniform({1, 16, 16}, rng, 0.0, 1.0);
                     Inputs in{uniform({3, 16, 16}, rng)};
                     const auto first = append_weights(w, in);
                     ScalarClosure<D> fn = [&](const Inputs& x) {
                       const auto f = pipeline::forward<D>(model, rebuild(w, x, first), cfg, x[0], src, drv, 16, 16);
                       return loss_total<D>(f.out, target, tmask).total;
                     };
                     return numerics::grad_check<D>(fn, in, sparse(opts, seed));
                   }});

  // Toy widths on the full-size synthetic head, 16 x 16 frames.
  cases.push_back({"toy_pipeline", [](std::uint64_t seed, const GradCheckOptions& opts) {
                     static const auto model = head_model::generate_synthetic_model(0);
                     std::mt19937_64 rng(seed);
                     const auto cfg = pipeline::PipelineConfig::toy();
                     const auto w = tiny_weights(cfg, rng, seed);
                     const auto src = random_params(model, rng);
                     auto drv = random_params(model, rng);
                     drv.beta = src.beta;
                     const auto target = uniform({3, 16, 16}, rng);
                     const auto tmask = uniform({1, 16, 16}, rng, 0.0, 1.0);
                     Inputs in{uniform({3, 16, 16}, rng)};
                     const auto first = append_weights(w, in);
                     ScalarClosure<D> fn = [&](const Inputs& x) {
                       const auto f = pipeline::forward<D>(model, rebuild(w, x, first), cfg, x[0], src, drv, 16, 16);
                       return loss_total<D>(f.out, target, tmask).total;
                     };
                     return numerics::grad_check<D>(fn, in, sparse(opts, seed, 1));
                   }});

  return cases;
}

}  // namespace cvthead::training
