#pragma once

#include <cstdint>
#include <vector>

#include "maskjepa/corruption.hpp"
#include "maskjepa/encoder.hpp"
#include "maskjepa/objective.hpp"
#include "maskjepa/predictor.hpp"

namespace mjepa {

struct ModelConfig {
  EncoderConfig encoder;
  PredictorConfig predictor;
};

// Online parameters θ (encoder, predictor, denoise head) and target θ̄
// (backbone + pixel decoder only).
template <typename T>
struct ModelState {
  ModelConfig config;
  Encoder<T> online;
  Predictor<T> predictor;
  DenoiseHead<T> denoise_head;
  Encoder<T> target;

  // θ from `seed`; θ̄ is an exact copy of the online encoder.
  static ModelState create(const ModelConfig& config, std::uint64_t seed);

  ParameterList<T> online_parameters() const;
  // Named like the online encoder entries ("backbone.*", "pixel_decoder.*").
  ParameterList<T> target_parameters() const;
  // Re-initializes the predictor from `seed` (fresh weights, same shapes).
  void reinit_predictor(std::uint64_t seed);
};

// Noise and per-image masks that drive one loss evaluation.
template <typename T>
struct StepInputs {
  NoisePair<T> noise;
  std::vector<MaskGrid> masks;  // one per image; empty when reconstruction is off
};

struct LossSwitches {
  bool use_recon = true;
  bool use_denoise = true;
  DenoiseTarget denoise_mode = DenoiseTarget::gaussian_noise;
};

template <typename T>
struct LossGraph {
  Var<T> l_recon;    // undefined when reconstruction is off
  Var<T> l_denoise;  // undefined when denoising is off
  Var<T> l_final;
  std::size_t masked_cells = 0;
};

// Full forward: target(x), online(x + eps), masked prediction, denoise head, losses.
// Per-image reconstruction losses are averaged over the batch.
template <typename T>
LossGraph<T> compute_losses(const ModelState<T>& model, const Tensor<T>& clean, const StepInputs<T>& inputs,
                            const LossSwitches& switches);

}  // namespace mjepa
