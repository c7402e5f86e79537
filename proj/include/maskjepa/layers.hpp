#pragma once

#include <random>
#include <string>

#include "maskjepa/ops.hpp"
#include "maskjepa/parameter.hpp"

namespace mjepa {

template <typename T>
struct Conv2d {
  Var<T> weight;  // [cout, cin, k, k]
  Var<T> bias;    // [cout]
  int stride = 1;
  int padding = 0;

  Conv2d() = default;
  Conv2d(std::size_t cin, std::size_t cout, int kernel, int stride_, std::mt19937_64& rng, double gain = 1.0)
      : weight(make_param<T>({cout, cin, static_cast<std::size_t>(kernel), static_cast<std::size_t>(kernel)})),
        bias(make_param<T>({cout})),
        stride(stride_),
        padding(kernel / 2) {
    init_kaiming(weight, rng, gain);
  }

  Var<T> operator()(const Var<T>& x) const { return ops::conv2d(x, weight, bias, stride, padding); }

  void visit(const std::string& prefix, const VarVisitor<T>& fn) {
    fn(prefix + ".weight", weight);
    fn(prefix + ".bias", bias);
  }
};

template <typename T>
struct Linear {
  Var<T> weight;  // [out, in]
  Var<T> bias;    // [out]

  Linear() = default;
  Linear(std::size_t in, std::size_t out, std::mt19937_64& rng)
      : weight(make_param<T>({out, in})), bias(make_param<T>({out})) {
    init_xavier(weight, rng);
  }

  Var<T> operator()(const Var<T>& x) const { return ops::linear(x, weight, bias); }

  void visit(const std::string& prefix, const VarVisitor<T>& fn) {
    fn(prefix + ".weight", weight);
    fn(prefix + ".bias", bias);
  }
};

template <typename T>
struct LayerNorm {
  Var<T> gamma;
  Var<T> beta;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t dim) : gamma(make_param<T>({dim})), beta(make_param<T>({dim})) {
    fill_value(gamma, T(1));
  }

  Var<T> operator()(const Var<T>& x) const { return ops::layer_norm(x, gamma, beta); }

  void visit(const std::string& prefix, const VarVisitor<T>& fn) {
    fn(prefix + ".gamma", gamma);
    fn(prefix + ".beta", beta);
  }
};

}  // namespace mjepa
