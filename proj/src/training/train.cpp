#include <cmath>
#include <cstdio>
#include <fstream>

#include "cvthead/errors.hpp"
#include "cvthead/numerics/ops.hpp"
#include "cvthead/numerics/random.hpp"
#include "cvthead/numerics/tape.hpp"
#include "cvthead/training/training.hpp"

namespace cvthead::training {

namespace ops = numerics;

Adam::Adam(Options opt) : opt_(opt) {
  if (!(opt.lr >= 0.0) || !(opt.beta1 >= 0.0 && opt.beta1 < 1.0) || !(opt.beta2 >= 0.0 && opt.beta2 < 1.0) ||
      !(opt.eps > 0.0)) {
    throw ConfigError("Adam: lr >= 0, beta in [0,1) and eps > 0 required");
  }
}

void Adam::step(ParamStore<float>& params, const std::vector<Tensor<float>>& grads) {
  auto& entries = params.entries();
  if (grads.size() != entries.size()) {
    throw ShapeError("Adam: " + std::to_string(grads.size()) + " gradients for " + std::to_string(entries.size()) +
                     " parameters");
  }
  if (m_.empty()) {
    for (const auto& [name, t] : entries) {
      m_.emplace_back(t.numel(), 0.0);
      v_.emplace_back(t.numel(), 0.0);
    }
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto& [name, p] = entries[i];
    if (grads[i].shape() != p.shape()) throw ShapeError("Adam: gradient shape mismatch for '" + name + "'");
    auto& m = m_[i];
    auto& v = v_[i];
    std::vector<float> next(p.numel());
    for (std::size_t j = 0; j < next.size(); ++j) {
      const double g = grads[i][j];
      m[j] = opt_.beta1 * m[j] + (1.0 - opt_.beta1) * g;
      v[j] = opt_.beta2 * v[j] + (1.0 - opt_.beta2) * g * g;
      const double update = opt_.lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + opt_.eps);
      next[j] = static_cast<float>(static_cast<double>(p[j]) - update);
    }
    p = Tensor<float>(p.shape(), std::move(next));
  }
}

namespace {

std::vector<std::size_t> epoch_order(std::size_t n, numerics::Rng& rng) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  for (std::size_t i = n; i-- > 1;) {
    const auto j = static_cast<std::size_t>(rng.next() % (i + 1));
    std::swap(order[i], order[j]);
  }
  return order;
}

}  // namespace

TrainResult train_toy(const head_model::HeadModel& model, const std::vector<ToySample>& data, const TrainConfig& cfg,
                      const StepCallback& on_step) {
  return train_toy(model, data, cfg, pipeline::init_weights<float>(cfg.pipeline, cfg.seed), on_step);
}

TrainResult train_toy(const head_model::HeadModel& model, const std::vector<ToySample>& data, const TrainConfig& cfg,
                      ParamStore<float> initial, const StepCallback& on_step) {
  if (data.empty()) throw ConfigError("train_toy: dataset is empty");
  cfg.pipeline.validate();
  const std::size_t batch = cfg.batch == 0 ? data.size() : std::min(cfg.batch, data.size());

  TrainResult result;
  result.weights = std::move(initial);
  Adam adam({cfg.lr, 0.9, 0.999, 1e-8});
  numerics::Rng rng(cfg.seed ^ 0x5851f42d4c957f2dULL);
  std::vector<std::size_t> order;
  std::size_t cursor = 0;

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    numerics::GradTape<float> tape;
    numerics::TapeScope<float> scope(tape);
    const auto w = result.weights.watched(tape);

    LossRow row{step, 0.0, 0.0, 0.0};
    Tensor<float> objective;
    for (std::size_t b = 0; b < batch; ++b) {
      if (cursor == order.size()) {
        order = epoch_order(data.size(), rng);
        cursor = 0;
      }
      const auto& s = data[order[cursor++]];
      const int hh = static_cast<int>(s.target_image.dim(1)), ww = static_cast<int>(s.target_image.dim(2));
      const auto f = pipeline::forward(model, w, cfg.pipeline, s.source_image, s.source, s.driving, ww, hh);
      const auto l = loss_total<float>(f.out, s.target_image, s.target_mask, cfg.lambda);
      row.total += l.total.item() / static_cast<double>(batch);
      row.l1 += l.l1.item() / static_cast<double>(batch);
      row.dice += l.dice.item() / static_cast<double>(batch);
      const auto part = ops::scale(l.total, 1.0f / static_cast<float>(batch));
      objective = b == 0 ? part : ops::add(objective, part);
    }
    if (!std::isfinite(row.total)) throw TrainingError(step, "loss is " + std::to_string(row.total));

    const auto grads = tape.backward(objective);
    std::vector<Tensor<float>> g;
    g.reserve(w.size());
    for (const auto& [name, t] : w.entries()) g.push_back(grads.grad(t));
    adam.step(result.weights, g);

    result.curve.push_back(row);
    if (on_step) on_step(row);
  }
  return result;
}

EvalReport evaluate(const head_model::HeadModel& model, const ParamStore<float>& weights,
                    const pipeline::PipelineConfig& cfg, const std::vector<ToySample>& data) {
  EvalReport r;
  if (data.empty()) return r;
  for (const auto& s : data) {
    const int hh = static_cast<int>(s.target_image.dim(1)), ww = static_cast<int>(s.target_image.dim(2));
    const auto f = pipeline::forward(model, weights, cfg, s.source_image, s.source, s.driving, ww, hh);
    const auto m = metrics(f.out.rgb, s.target_image);
    const double d = dice_score(f.out.mask, s.target_mask);
    r.per_sample.push_back(m);
    r.per_sample_dice.push_back(d);
    r.l1 += m.l1;
    r.psnr += m.psnr;
    r.ssim += m.ssim;
    r.dice += d;
  }
  const double n = static_cast<double>(data.size());
  r.l1 /= n;
  r.psnr /= n;
  r.ssim /= n;
  r.dice /= n;
  return r;
}

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossRow>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write '" + path.string() + "'");
  out << "step,total,l1,dice\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g\n", r.step, r.total, r.l1, r.dice);
    out << buf;
  }
  if (!out) throw FormatError("short write to '" + path.string() + "'");
}

}  // namespace cvthead::training
