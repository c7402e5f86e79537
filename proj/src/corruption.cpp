#include "maskjepa/corruption.hpp"

#include <stdexcept>

namespace mjepa {

namespace {

template <typename T>
void fill_block_noise(T* low, T* full, std::size_t h, std::size_t w, std::size_t s, double sigma,
                      std::mt19937_64& rng) {
  const std::size_t lh = h / s, lw = w / s;
  std::normal_distribution<double> dist(0.0, 1.0);
  for (std::size_t i = 0; i < 3 * lh * lw; ++i) low[i] = static_cast<T>(sigma * dist(rng));
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) full[(c * h + y) * w + x] = low[(c * lh + y / s) * lw + x / s];
    }
  }
}

void check_noise_args(std::size_t h, std::size_t w, int factor, double sigma) {
  if (factor < 1 || h % static_cast<std::size_t>(factor) || w % static_cast<std::size_t>(factor)) {
    throw std::invalid_argument("make_block_noise: " + std::to_string(h) + "x" + std::to_string(w) +
                                " not divisible by expansion factor " + std::to_string(factor));
  }
  if (!(sigma >= 0.0)) throw std::invalid_argument("make_block_noise: sigma must be >= 0");
}

}  // namespace

template <typename T>
NoisePair<T> make_block_noise(std::size_t h, std::size_t w, int factor, double sigma, std::mt19937_64& rng) {
  check_noise_args(h, w, factor, sigma);
  const auto s = static_cast<std::size_t>(factor);
  NoisePair<T> out{Tensor<T>({3, h / s, w / s}), Tensor<T>({3, h, w}), sigma, factor};
  fill_block_noise(out.low.ptr(), out.full.ptr(), h, w, s, sigma, rng);
  return out;
}

template <typename T>
NoisePair<T> make_batch_noise(std::size_t batch, std::size_t h, std::size_t w, int factor, double sigma,
                              std::mt19937_64& rng) {
  check_noise_args(h, w, factor, sigma);
  const auto s = static_cast<std::size_t>(factor);
  NoisePair<T> out{Tensor<T>({batch, 3, h / s, w / s}), Tensor<T>({batch, 3, h, w}), sigma, factor};
  for (std::size_t n = 0; n < batch; ++n) {
    std::mt19937_64 stream(rng());
    fill_block_noise(out.low.ptr() + n * 3 * (h / s) * (w / s), out.full.ptr() + n * 3 * h * w, h, w, s, sigma,
                     stream);
  }
  return out;
}

template <typename T>
Tensor<T> corrupt(const Tensor<T>& x, const Tensor<T>& eps) {
  if (x.shape() != eps.shape()) throw_shape_error("corrupt", x.shape(), eps.shape());
  Tensor<T> out = x;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += eps[i];
  return out;
}

template NoisePair<float> make_block_noise(std::size_t, std::size_t, int, double, std::mt19937_64&);
template NoisePair<double> make_block_noise(std::size_t, std::size_t, int, double, std::mt19937_64&);
template NoisePair<float> make_batch_noise(std::size_t, std::size_t, std::size_t, int, double, std::mt19937_64&);
template NoisePair<double> make_batch_noise(std::size_t, std::size_t, std::size_t, int, double, std::mt19937_64&);
template Tensor<float> corrupt(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> corrupt(const Tensor<double>&, const Tensor<double>&);

}  // namespace mjepa
