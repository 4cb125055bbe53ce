#include <algorithm>
#include <cmath>

#include "cvthead/errors.hpp"
#include "cvthead/numerics/ops.hpp"
#include "cvthead/training/training.hpp"

namespace cvthead::training {

namespace ops = numerics;
using numerics::shape_str;

namespace {

template <typename T>
void require_same(const char* what, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void require_image(const char* what, const Tensor<float>& x) {
  if (x.ndim() != 3) throw ShapeError(std::string(what) + ": expected C x H x W, got " + shape_str(x.shape()));
}

}  // namespace

template <typename T>
Tensor<T> l1_loss(const Tensor<T>& pred, const Tensor<T>& target, const std::optional<Tensor<T>>& mask) {
  require_same("l1_loss", pred, target);
  const auto err = ops::abs(ops::sub(pred, target));
  if (!mask) return ops::mean(err);
  if (pred.ndim() != 3 || mask->ndim() != 3 || mask->dim(0) != 1 || mask->dim(1) != pred.dim(1) ||
      mask->dim(2) != pred.dim(2)) {
    throw ShapeError("l1_loss: mask " + shape_str(mask->shape()) + " does not cover " + shape_str(pred.shape()));
  }
  const std::size_t c = pred.dim(0), pixels = pred.dim(1) * pred.dim(2);
  std::vector<T> m(c * pixels);
  double count = 0.0;
  for (std::size_t p = 0; p < pixels; ++p) count += static_cast<double>((*mask)[p]);
  for (std::size_t k = 0; k < c; ++k) {
    for (std::size_t p = 0; p < pixels; ++p) m[k * pixels + p] = (*mask)[p];
  }
  if (count == 0.0) return ops::scale(ops::sum(ops::mul(err, Tensor<T>(pred.shape(), std::move(m)))), T(0));
  return ops::scale(ops::sum(ops::mul(err, Tensor<T>(pred.shape(), std::move(m)))),
                    static_cast<T>(1.0 / (count * static_cast<double>(c))));
}

template <typename T>
Tensor<T> dice_loss(const Tensor<T>& pred, const Tensor<T>& target, T eps) {
  require_same("dice_loss", pred, target);
  const auto inter = ops::sum(ops::mul(pred, target));
  const auto num = ops::add_scalar(ops::scale(inter, T(2)), eps);
  const auto den = ops::add_scalar(ops::add(ops::sum(pred), ops::sum(target)), eps);
  return ops::add_scalar(ops::scale(ops::div(num, den), T(-1)), T(1));
}

template <typename T>
Loss<T> loss_total(const renderer::RenderOutput<T>& pred, const Tensor<T>& target_image, const Tensor<T>& target_mask,
                   const LossWeights& lambda) {
  Loss<T> l;
  l.l1 = l1_loss<T>(pred.rgb, target_image);
  l.dice = dice_loss<T>(pred.mask, target_mask);
  l.total = ops::add(ops::scale(l.l1, static_cast<T>(lambda.l1)), ops::scale(l.dice, static_cast<T>(lambda.seg)));
  return l;
}

LossValues loss_total(const renderer::FrameResult& pred, const Tensor<float>& target_image,
                      const Tensor<float>& target_mask, const LossWeights& lambda) {
  const std::size_t h = static_cast<std::size_t>(pred.height), w = static_cast<std::size_t>(pred.width);
  const std::size_t pixels = h * w;
  if (pred.rgb.size() != pixels * 3 || pred.mask.size() != pixels) {
    throw ShapeError("loss_total: frame buffers do not match " + std::to_string(h) + "x" + std::to_string(w));
  }
  std::vector<double> rgb(3 * pixels);
  for (std::size_t p = 0; p < pixels; ++p) {
    for (std::size_t c = 0; c < 3; ++c) rgb[c * pixels + p] = pred.rgb[p * 3 + c];
  }
  renderer::RenderOutput<double> out;
  out.rgb = Tensor<double>({3, h, w}, std::move(rgb));
  out.mask = Tensor<double>({1, h, w}, std::vector<double>(pred.mask.begin(), pred.mask.end()));
  const auto l = loss_total<double>(out, target_image.cast<double>(), target_mask.cast<double>(), lambda);
  return {l.total.item(), l.l1.item(), l.dice.item()};
}

double psnr(const Tensor<float>& pred, const Tensor<float>& target) {
  require_same("psnr", pred, target);
  if (pred.empty()) throw ShapeError("psnr: empty image");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    const double d = (static_cast<double>(pred[i]) - static_cast<double>(target[i])) * 0.5;
    acc += d * d;
  }
  const double mse = acc / static_cast<double>(pred.numel());
  if (mse < 1e-10) return 100.0;
  return 10.0 * std::log10(1.0 / mse);
}

double ssim(const Tensor<float>& pred, const Tensor<float>& target) {
  require_same("ssim", pred, target);
  require_image("ssim", pred);
  constexpr int k = 11;
  constexpr double sigma = 1.5, c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const std::size_t ch = pred.dim(0), h = pred.dim(1), w = pred.dim(2);
  if (h < k || w < k) throw ShapeError("ssim: image smaller than the 11x11 window");

  double g[k], gsum = 0.0;
  for (int i = 0; i < k; ++i) {
    const double x = i - k / 2;
    g[i] = std::exp(-x * x / (2.0 * sigma * sigma));
    gsum += g[i];
  }
  for (double& v : g) v /= gsum;

  // Valid-region windows, averaged over channels and positions.
  const std::size_t oh = h - k + 1, ow = w - k + 1;
  double total = 0.0;
  for (std::size_t c = 0; c < ch; ++c) {
    const float* a = pred.raw() + c * h * w;
    const float* b = target.raw() + c * h * w;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
        for (int dy = 0; dy < k; ++dy) {
          for (int dx = 0; dx < k; ++dx) {
            const double wt = g[dy] * g[dx];
            const std::size_t idx = (y + dy) * w + x + dx;
            const double va = (a[idx] + 1.0) * 0.5, vb = (b[idx] + 1.0) * 0.5;
            ma += wt * va;
            mb += wt * vb;
            saa += wt * va * va;
            sbb += wt * vb * vb;
            sab += wt * va * vb;
          }
        }
        const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
        total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      }
    }
  }
  return total / static_cast<double>(ch * oh * ow);
}

double dice_score(const Tensor<float>& pred_mask, const Tensor<float>& target_mask) {
  require_same("dice_score", pred_mask, target_mask);
  double inter = 0.0, sum = 0.0;
  for (std::size_t i = 0; i < pred_mask.numel(); ++i) {
    inter += static_cast<double>(pred_mask[i]) * target_mask[i];
    sum += static_cast<double>(pred_mask[i]) + target_mask[i];
  }
  return sum == 0.0 ? 1.0 : 2.0 * inter / sum;
}

Metrics metrics(const Tensor<float>& pred, const Tensor<float>& target, const std::optional<Tensor<float>>& mask) {
  require_same("metrics", pred, target);
  require_image("metrics", pred);
  Metrics m;
  // On [0,1] images the absolute error halves.
  m.l1 = 0.5 * static_cast<double>(l1_loss<double>(pred.cast<double>(), target.cast<double>(),
                                                   mask ? std::optional<Tensor<double>>(mask->cast<double>())
                                                        : std::nullopt)
                                       .item());
  m.psnr = psnr(pred, target);
  m.ssim = ssim(pred, target);
  return m;
}

template Tensor<float> l1_loss<float>(const Tensor<float>&, const Tensor<float>&, const std::optional<Tensor<float>>&);
template Tensor<double> l1_loss<double>(const Tensor<double>&, const Tensor<double>&,
                                        const std::optional<Tensor<double>>&);
template Tensor<float> dice_loss<float>(const Tensor<float>&, const Tensor<float>&, float);
template Tensor<double> dice_loss<double>(const Tensor<double>&, const Tensor<double>&, double);
template Loss<float> loss_total<float>(const renderer::RenderOutput<float>&, const Tensor<float>&,
                                       const Tensor<float>&, const LossWeights&);
template Loss<double> loss_total<double>(const renderer::RenderOutput<double>&, const Tensor<double>&,
                                         const Tensor<double>&, const LossWeights&);

}  // namespace cvthead::training
