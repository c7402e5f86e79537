#include "maskjepa/model.hpp"

#include <random>
#include <stdexcept>

namespace mjepa {

template <typename T>
ModelState<T> ModelState<T>::create(const ModelConfig& config, std::uint64_t seed) {
  if (config.encoder.channels != config.predictor.channels) {
    throw std::invalid_argument("model: encoder and predictor channel widths differ");
  }
  std::mt19937_64 rng(seed);
  ModelState state;
  state.config = config;
  state.online = Encoder<T>(config.encoder, rng);
  state.predictor = Predictor<T>(config.predictor, rng);
  state.denoise_head = DenoiseHead<T>(config.encoder.channels, rng);
  state.target = state.online.clone(false);
  return state;
}

template <typename T>
ParameterList<T> ModelState<T>::online_parameters() const {
  ParameterList<T> out = online.parameters();
  for (auto& p : predictor.parameters()) out.push_back(std::move(p));
  for (auto& p : denoise_head.parameters()) out.push_back(std::move(p));
  return out;
}

template <typename T>
ParameterList<T> ModelState<T>::target_parameters() const {
  ParameterList<T> out = target.parameters();
  for (auto& p : out) p.trainable = false;
  return out;
}

template <typename T>
void ModelState<T>::reinit_predictor(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  predictor = Predictor<T>(config.predictor, rng);
}

template <typename T>
LossGraph<T> compute_losses(const ModelState<T>& model, const Tensor<T>& clean, const StepInputs<T>& inputs,
                            const LossSwitches& switches) {
  if (!switches.use_recon && !switches.use_denoise) {
    throw std::invalid_argument("compute_losses: both losses disabled");
  }
  LossGraph<T> out;
  const Var<T> corrupted = Var<T>::constant(corrupt(clean, inputs.noise.full));
  const FeaturePyramid<T> online = model.online.forward(corrupted);

  if (switches.use_recon) {
    const int s = model.config.encoder.s_i1;
    const FeaturePyramid<T> target = target_forward(model.target, Var<T>::constant(clean));
    const Var<T>& f_online = online.at(s);
    const Var<T>& f_target = target.at(s);
    const std::size_t batch = clean.dim(0), h = f_online.dim(2), w = f_online.dim(3);
    if (inputs.masks.size() != batch) {
      throw std::invalid_argument("compute_losses: expected one mask per image");
    }
    Var<T> total;
    for (std::size_t n = 0; n < batch; ++n) {
      Var<T> prediction = model.predictor.forward(ops::image_tokens(f_online, n), h, w, inputs.masks[n]);
      Var<T> target_tokens;
      {
        NoGradGuard no_grad;
        target_tokens = ops::image_tokens(f_target, n);
      }
      Var<T> l = recon_loss(prediction, target_tokens, inputs.masks[n]);
      total = total.defined() ? ops::add(total, l) : l;
      out.masked_cells += inputs.masks[n].masked_count() * inputs.masks[n].patch * inputs.masks[n].patch;
    }
    out.l_recon = ops::scale(total, T(1) / static_cast<T>(batch));
  }

  if (switches.use_denoise) {
    Var<T> prediction = model.denoise_head.forward(online.at(model.config.encoder.s_last));
    out.l_denoise = denoise_loss(prediction, clean, inputs.noise.low, switches.denoise_mode);
  }

  if (out.l_recon.defined() && out.l_denoise.defined()) out.l_final = final_loss(out.l_recon, out.l_denoise);
  else out.l_final = out.l_recon.defined() ? out.l_recon : out.l_denoise;
  return out;
}

template struct ModelState<float>;
template struct ModelState<double>;
template LossGraph<float> compute_losses(const ModelState<float>&, const Tensor<float>&, const StepInputs<float>&,
                                         const LossSwitches&);
template LossGraph<double> compute_losses(const ModelState<double>&, const Tensor<double>&, const StepInputs<double>&,
                                          const LossSwitches&);

}  // namespace mjepa
