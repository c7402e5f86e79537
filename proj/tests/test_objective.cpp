#include <cmath>
#include <cstring>

#include "doctest.h"
#include "helpers.hpp"
#include "maskjepa/model.hpp"
#include "maskjepa/objective.hpp"
#include "maskjepa/ops.hpp"
#include "maskjepa/trainer.hpp"

using namespace mjepa;
using testutil::random_tensor;

namespace {

template <typename T>
Tensor<T> layer_normed(const Tensor<T>& x) {
  NoGradGuard g;
  return ops::layer_norm(Var<T>::constant(x), {}, {}).value();
}

MaskGrid half_mask() { return MaskGrid{2, 2, 2, 0.5, {1, 0, 0, 1}}; }

}  // namespace

TEST_CASE("recon loss is zero at LN(target)") {
  const auto target = random_tensor<float>({16, 8}, 1, -4.0, 4.0);
  const auto pred = Var<float>::constant(layer_normed(target));
  CHECK(std::abs(recon_loss(pred, Var<float>::constant(target), half_mask()).item()) <= 1e-6);
}

TEST_CASE("recon loss of a constant offset is its square") {
  const auto target = random_tensor<double>({16, 8}, 2);
  Tensor<double> pred = layer_normed(target);
  for (auto& v : pred.storage()) v += 0.3;
  const MaskGrid one{2, 2, 2, 0.25, {0, 1, 0, 0}};
  CHECK(recon_loss(Var<double>::constant(pred), Var<double>::constant(target), one).item() ==
        doctest::Approx(0.09).epsilon(1e-12));
}

TEST_CASE("recon loss matches a brute-force masked MSE") {
  const auto target = random_tensor<double>({16, 8}, 3);
  const auto pred = random_tensor<double>({16, 8}, 4);
  const auto ln = layer_normed(target);
  const auto cells = half_mask().cell_mask();
  double acc = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < 16; ++r) {
    for (std::size_t c = 0; c < 8; ++c) {
      const double d = (pred[r * 8 + c] - ln[r * 8 + c]) * (cells[r] ? 1.0 : 0.0);
      acc += d * d;
    }
    count += cells[r] ? 8 : 0;
  }
  CHECK(recon_loss(Var<double>::constant(pred), Var<double>::constant(target), half_mask()).item() ==
        doctest::Approx(acc / static_cast<double>(count)).epsilon(1e-12));
}

TEST_CASE("recon loss ignores visible cells") {
  auto target = random_tensor<float>({16, 8}, 5);
  auto pred = random_tensor<float>({16, 8}, 6);
  const float base = recon_loss(Var<float>::constant(pred), Var<float>::constant(target), half_mask()).item();
  const auto cells = half_mask().cell_mask();
  for (std::size_t r = 0; r < 16; ++r) {
    if (cells[r]) continue;
    for (std::size_t c = 0; c < 8; ++c) {
      pred[r * 8 + c] += 7.0f;
      target[r * 8 + c] -= 3.0f;
    }
  }
  const float after = recon_loss(Var<float>::constant(pred), Var<float>::constant(target), half_mask()).item();
  CHECK(std::memcmp(&base, &after, sizeof(float)) == 0);
}

TEST_CASE("recon loss is invariant to per-position affine target changes") {
  // LN carries eps = 1e-5, so invariance is only as good as eps / variance;
  // feature-scale targets keep that well under the tolerance.
  const auto target = random_tensor<double>({16, 8}, 7, -10.0, 10.0);
  const auto pred = Var<double>::constant(random_tensor<double>({16, 8}, 8));
  Tensor<double> moved = target;
  for (std::size_t r = 0; r < 16; ++r) {
    const double lambda = 0.5 + 0.25 * static_cast<double>(r), shift = -2.0 + 0.3 * static_cast<double>(r);
    for (std::size_t c = 0; c < 8; ++c) moved[r * 8 + c] = lambda * target[r * 8 + c] + shift;
  }
  const double a = recon_loss(pred, Var<double>::constant(target), half_mask()).item();
  const double b = recon_loss(pred, Var<double>::constant(moved), half_mask()).item();
  CHECK(std::abs(a - b) < 1e-6);
}

TEST_CASE("recon loss with nothing masked is an error") {
  const auto t = Var<float>::constant(Tensor<float>({16, 8}));
  CHECK_THROWS_AS(recon_loss(t, t, MaskGrid{2, 2, 2, 0.0, {0, 0, 0, 0}}), std::invalid_argument);
}

TEST_CASE("recon loss never sends gradient into the target") {
  auto target = Var<float>::leaf(random_tensor<float>({16, 8}, 9), true);
  auto pred = Var<float>::leaf(random_tensor<float>({16, 8}, 10), true);
  backward(recon_loss(pred, target, half_mask()));
  CHECK(pred.has_grad());
  CHECK_FALSE(target.has_grad());
}

TEST_CASE("denoise loss") {
  const auto clean = random_tensor<double>({2, 3, 8, 8}, 11, 0.0, 1.0);
  const auto noise_low = random_tensor<double>({2, 3, 2, 2}, 12);

  SUBCASE("zero at the noise target") {
    CHECK(denoise_loss(Var<double>::constant(noise_low), clean, noise_low, DenoiseTarget::gaussian_noise).item() == 0.0);
  }
  SUBCASE("constant offset gives its square") {
    Tensor<double> p = noise_low;
    for (auto& v : p.storage()) v += 0.25;
    CHECK(denoise_loss(Var<double>::constant(p), clean, noise_low, DenoiseTarget::gaussian_noise).item() ==
          doctest::Approx(0.0625).epsilon(1e-12));
  }
  SUBCASE("raw image target is the 4x4 average pool") {
    Tensor<double> pooled({2, 3, 2, 2});
    for (std::size_t nc = 0; nc < 6; ++nc) {
      for (std::size_t y = 0; y < 2; ++y) {
        for (std::size_t x = 0; x < 2; ++x) {
          double s = 0.0;
          for (std::size_t dy = 0; dy < 4; ++dy) {
            for (std::size_t dx = 0; dx < 4; ++dx) s += clean[nc * 64 + (y * 4 + dy) * 8 + x * 4 + dx];
          }
          pooled[nc * 4 + y * 2 + x] = s / 16.0;
        }
      }
    }
    CHECK(denoise_loss(Var<double>::constant(pooled), clean, noise_low, DenoiseTarget::raw_image).item() ==
          doctest::Approx(0.0).epsilon(1e-14));
    const auto pred = random_tensor<double>({2, 3, 2, 2}, 13);
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.numel(); ++i) acc += (pred[i] - pooled[i]) * (pred[i] - pooled[i]);
    CHECK(denoise_loss(Var<double>::constant(pred), clean, noise_low, DenoiseTarget::raw_image).item() ==
          doctest::Approx(acc / 24.0).epsilon(1e-12));
  }
  SUBCASE("brute force against the noise target") {
    const auto pred = random_tensor<double>({2, 3, 2, 2}, 14);
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.numel(); ++i) acc += (pred[i] - noise_low[i]) * (pred[i] - noise_low[i]);
    CHECK(denoise_loss(Var<double>::constant(pred), clean, noise_low, DenoiseTarget::gaussian_noise).item() ==
          doctest::Approx(acc / 24.0).epsilon(1e-12));
  }
}

TEST_CASE("final loss is the plain sum") {
  auto s = [](double a, double b) {
    return final_loss(Var<double>::constant(Tensor<double>({1}, a)), Var<double>::constant(Tensor<double>({1}, b))).item();
  };
  CHECK(s(0.0, 0.0) == 0.0);
  CHECK(s(1.5, 2.5) == 4.0);
}

TEST_CASE("gradient of L_final is the sum of the component gradients") {
  TrainConfig cfg;
  cfg.image_size = 32;
  cfg.channels = 16;
  cfg.blocks_l = 1;
  cfg.blocks_m = 1;
  cfg.queries = 4;
  cfg.heads = 2;
  auto model = ModelState<double>::create(cfg.model_config(), 3);
  std::mt19937_64 rng(4);
  const auto image = random_tensor<double>({1, 3, 32, 32}, 5, 0.0, 1.0);
  const auto inputs = draw_step_inputs<double>(cfg, 1, rng);
  const auto params = model.online_parameters();

  auto grads_of = [&](bool recon, bool denoise) {
    zero_grads(params);
    LossSwitches sw;
    sw.use_recon = recon;
    sw.use_denoise = denoise;
    backward(compute_losses(model, image, inputs, sw).l_final);
    std::vector<Tensor<double>> out;
    for (const auto& p : params) out.push_back(p.var.has_grad() ? p.var.grad() : Tensor<double>(p.var.shape()));
    return out;
  };
  const auto both = grads_of(true, true), r = grads_of(true, false), d = grads_of(false, true);
  double worst = 0.0;
  for (std::size_t i = 0; i < both.size(); ++i) {
    for (std::size_t j = 0; j < both[i].numel(); ++j) {
      worst = std::max(worst, std::abs(both[i][j] - (r[i][j] + d[i][j])));
    }
  }
  CHECK(worst < 1e-12);
}

TEST_CASE("denoise target names") {
  CHECK(parse_denoise_target("noise") == DenoiseTarget::gaussian_noise);
  CHECK(parse_denoise_target("image") == DenoiseTarget::raw_image);
  CHECK(parse_denoise_target("gaussian_noise") == DenoiseTarget::gaussian_noise);
  CHECK(to_string(DenoiseTarget::raw_image) == "raw_image");
  CHECK_THROWS(parse_denoise_target("pixels"));
}
