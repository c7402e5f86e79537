#pragma once

#include <string>

#include "maskjepa/predictor.hpp"

namespace mjepa {

enum class DenoiseTarget { raw_image, gaussian_noise };

std::string to_string(DenoiseTarget mode);
DenoiseTarget parse_denoise_target(const std::string& text);  // "image"/"raw_image", "noise"/"gaussian_noise"

struct LossReport {
  double l_recon = 0.0;
  double l_denoise = 0.0;
  double l_final = 0.0;
  std::size_t masked_cell_count = 0;
  DenoiseTarget denoise_mode = DenoiseTarget::gaussian_noise;
};

// Masked-region l2 between F_trans and LN(target) (per-position layer norm over
// channels, no affine). Mean over masked cells x channels. target is treated
// as a constant. Throws std::invalid_argument when nothing is masked.
template <typename T>
Var<T> recon_loss(const Var<T>& f_trans, const Var<T>& target_tokens, const MaskGrid& grid);

// prediction: [N,3,H/s,W/s]. raw_image compares with s x s average-pooled x,
// gaussian_noise with the low-resolution noise draw.
template <typename T>
Var<T> denoise_loss(const Var<T>& prediction, const Tensor<T>& clean, const Tensor<T>& noise_low, DenoiseTarget mode);

template <typename T>
Var<T> final_loss(const Var<T>& l_recon, const Var<T>& l_denoise) {
  return ops::add(l_recon, l_denoise);
}

}  // namespace mjepa
