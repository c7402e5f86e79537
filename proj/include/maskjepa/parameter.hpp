#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "maskjepa/autograd.hpp"

namespace mjepa {

template <typename T>
struct Parameter {
  std::string name;  // dotted path, unique within a model
  Var<T> var;
  bool trainable = true;
};

template <typename T>
using ParameterList = std::vector<Parameter<T>>;

// Callback over parameter slots; may rebind the Var (used for deep copies).
template <typename T>
using VarVisitor = std::function<void(const std::string&, Var<T>&)>;

template <typename T>
Var<T> make_param(Shape shape) {
  return Var<T>::leaf(Tensor<T>(std::move(shape)), true);
}

// N(0, std^2) fill; draws in float64 so float/double models match.
template <typename T>
void init_normal(Var<T>& v, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& x : v.mutable_value().storage()) x = static_cast<T>(dist(rng));
}

// Kaiming-normal for a weight whose fan-in is the product of dims 1.. (GELU gain ~ ReLU).
template <typename T>
void init_kaiming(Var<T>& v, std::mt19937_64& rng, double gain = 1.0) {
  const auto& s = v.shape();
  std::size_t fan_in = 1;
  for (std::size_t i = 1; i < s.size(); ++i) fan_in *= s[i];
  init_normal(v, gain * std::sqrt(2.0 / static_cast<double>(fan_in)), rng);
}

// Xavier-uniform-like normal init for attention/linear weights [out,in].
template <typename T>
void init_xavier(Var<T>& v, std::mt19937_64& rng) {
  const auto& s = v.shape();
  const double fan = static_cast<double>(s.at(0) + s.at(1));
  init_normal(v, std::sqrt(2.0 / fan), rng);
}

template <typename T>
void fill_value(Var<T>& v, T value) {
  v.mutable_value().fill(value);
}

template <typename T>
void zero_grads(const ParameterList<T>& params) {
  for (const auto& p : params) {
    auto v = p.var;
    v.clear_grad();
  }
}

}  // namespace mjepa
