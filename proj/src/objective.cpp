#include "maskjepa/objective.hpp"

#include <stdexcept>

namespace mjepa {

std::string to_string(DenoiseTarget mode) {
  return mode == DenoiseTarget::raw_image ? "raw_image" : "gaussian_noise";
}

DenoiseTarget parse_denoise_target(const std::string& text) {
  if (text == "image" || text == "raw_image") return DenoiseTarget::raw_image;
  if (text == "noise" || text == "gaussian_noise") return DenoiseTarget::gaussian_noise;
  throw std::invalid_argument("unknown denoise target '" + text + "' (expected image|noise)");
}

template <typename T>
Var<T> recon_loss(const Var<T>& f_trans, const Var<T>& target_tokens, const MaskGrid& grid) {
  if (grid.masked_count() == 0) {
    throw std::invalid_argument("recon_loss: mask grid has zero masked patches; loss over an empty region is undefined");
  }
  if (f_trans.shape() != target_tokens.shape()) throw_shape_error("recon_loss", f_trans.shape(), target_tokens.shape());
  Var<T> normalized;
  {
    NoGradGuard no_grad;
    normalized = ops::layer_norm(Var<T>::constant(target_tokens.value()), Var<T>(), Var<T>());
  }
  return ops::masked_mse(f_trans, normalized, grid.cell_mask());
}

template <typename T>
Var<T> denoise_loss(const Var<T>& prediction, const Tensor<T>& clean, const Tensor<T>& noise_low, DenoiseTarget mode) {
  Tensor<T> target;
  if (mode == DenoiseTarget::gaussian_noise) {
    target = noise_low;
  } else {
    if (clean.rank() != 4 || prediction.shape().size() != 4 || prediction.dim(2) == 0 ||
        clean.dim(2) % prediction.dim(2)) {
      throw_shape_error("denoise_loss", prediction.shape(), clean.shape());
    }
    NoGradGuard no_grad;
    const int factor = static_cast<int>(clean.dim(2) / prediction.dim(2));
    target = ops::avg_pool(Var<T>::constant(clean), factor).value();
  }
  return ops::mse(prediction, Var<T>::constant(std::move(target)));
}

template Var<float> recon_loss(const Var<float>&, const Var<float>&, const MaskGrid&);
template Var<double> recon_loss(const Var<double>&, const Var<double>&, const MaskGrid&);
template Var<float> denoise_loss(const Var<float>&, const Tensor<float>&, const Tensor<float>&, DenoiseTarget);
template Var<double> denoise_loss(const Var<double>&, const Tensor<double>&, const Tensor<double>&, DenoiseTarget);

}  // namespace mjepa
