#pragma once

#include <random>

#include "maskjepa/layers.hpp"

namespace mjepa {

// Gaussian noise drawn at 1/s resolution and expanded so each value covers an
// s x s pixel block: full[c,i,j] == low[c, i/s, j/s].
template <typename T>
struct NoisePair {
  Tensor<T> low;   // [N,3,H/s,W/s]
  Tensor<T> full;  // [N,3,H,W]
  double sigma = 0.0;
  int factor = 1;
};

// Single image: low is [3,H/s,W/s], full is [3,H,W].
template <typename T>
NoisePair<T> make_block_noise(std::size_t h, std::size_t w, int factor, double sigma, std::mt19937_64& rng);

// Batch of independent per-image draws. Each image gets its own stream seeded from `rng`.
template <typename T>
NoisePair<T> make_batch_noise(std::size_t batch, std::size_t h, std::size_t w, int factor, double sigma,
                              std::mt19937_64& rng);

// x' = x + eps, elementwise, no clamping.
template <typename T>
Tensor<T> corrupt(const Tensor<T>& x, const Tensor<T>& eps);

// 1x1 conv C -> 3 on F_{i_last}.
template <typename T>
class DenoiseHead {
 public:
  DenoiseHead() = default;
  DenoiseHead(std::size_t channels, std::mt19937_64& rng) : conv_(channels, 3, 1, 1, rng) {}

  Var<T> forward(const Var<T>& f_last) const { return conv_(f_last); }
  void visit(const VarVisitor<T>& fn) { conv_.visit("denoise_head.conv", fn); }
  ParameterList<T> parameters() const {
    ParameterList<T> out;
    const_cast<DenoiseHead&>(*this).visit([&](const std::string& n, Var<T>& v) { out.push_back({n, v, true}); });
    return out;
  }

 private:
  Conv2d<T> conv_;
};

}  // namespace mjepa
