#include "maskjepa/encoder.hpp"

#include <stdexcept>

namespace mjepa {

void EncoderConfig::validate() const {
  if (channels == 0 || channels % 4) {
    throw std::invalid_argument("encoder: channels must be a positive multiple of 4, got " + std::to_string(channels));
  }
  if (s_i1 != 8 && s_i1 != 16 && s_i1 != 32) {
    throw std::invalid_argument("encoder: s_i1 must be one of {8,16,32}, got " + std::to_string(s_i1));
  }
  if (s_last != 4) throw std::invalid_argument("encoder: s_last must be 4, got " + std::to_string(s_last));
  if (blocks_per_stage == 0) throw std::invalid_argument("encoder: blocks_per_stage must be >= 1");
}

void check_input_geometry(const Shape& s) {
  if (s.size() != 4 || s[1] != 3) {
    throw ShapeError("encoder: expected image batch [N,3,H,W], got " + shape_str(s));
  }
  if (s[2] == 0 || s[3] == 0 || s[2] % 32 || s[3] % 32) {
    throw ShapeError("encoder: H and W must be positive multiples of 32, got " + std::to_string(s[2]) + "x" +
                     std::to_string(s[3]));
  }
}

template <typename T>
Backbone<T>::Backbone(const EncoderConfig& config, std::mt19937_64& rng) {
  const auto widths = config.stage_widths();
  stem0_ = Conv2d<T>(3, widths[0], 3, 2, rng);
  stem1_ = Conv2d<T>(widths[0], widths[0], 3, 2, rng);
  for (std::size_t s = 0; s < 4; ++s) {
    if (s > 0) stages_[s].down = Conv2d<T>(widths[s - 1], widths[s], 3, 2, rng);
    for (std::size_t b = 0; b < config.blocks_per_stage; ++b) {
      // Second conv of each block starts small so the residual stream stays near identity.
      stages_[s].blocks.push_back({Conv2d<T>(widths[s], widths[s], 3, 1, rng),
                                   Conv2d<T>(widths[s], widths[s], 3, 1, rng, 0.25)});
    }
  }
}

template <typename T>
std::array<Var<T>, 4> Backbone<T>::forward(const Var<T>& image) const {
  check_input_geometry(image.shape());
  Var<T> x = ops::gelu(stem1_(ops::gelu(stem0_(image))));
  std::array<Var<T>, 4> out;
  for (std::size_t s = 0; s < 4; ++s) {
    if (stages_[s].down.weight.defined()) x = ops::gelu(stages_[s].down(x));
    for (const auto& block : stages_[s].blocks) {
      x = ops::gelu(ops::add(x, block.conv_b(ops::gelu(block.conv_a(x)))));
    }
    out[s] = x;
  }
  return out;
}

template <typename T>
void Backbone<T>::visit(const std::string& prefix, const VarVisitor<T>& fn) {
  stem0_.visit(prefix + ".stem.0", fn);
  stem1_.visit(prefix + ".stem.1", fn);
  for (std::size_t s = 0; s < 4; ++s) {
    const std::string sp = prefix + ".stage" + std::to_string(s + 1);
    if (stages_[s].down.weight.defined()) stages_[s].down.visit(sp + ".down", fn);
    for (std::size_t b = 0; b < stages_[s].blocks.size(); ++b) {
      const std::string bp = sp + ".block" + std::to_string(b);
      stages_[s].blocks[b].conv_a.visit(bp + ".conv_a", fn);
      stages_[s].blocks[b].conv_b.visit(bp + ".conv_b", fn);
    }
  }
}

template <typename T>
PixelDecoder<T>::PixelDecoder(const EncoderConfig& config, std::mt19937_64& rng) {
  const auto widths = config.stage_widths();
  for (std::size_t s = 0; s < 4; ++s) {
    lateral_[s] = Conv2d<T>(widths[s], config.channels, 1, 1, rng);
    output_[s] = Conv2d<T>(config.channels, config.channels, 3, 1, rng);
  }
}

template <typename T>
FeaturePyramid<T> PixelDecoder<T>::forward(const std::array<Var<T>, 4>& stages) const {
  FeaturePyramid<T> pyramid;
  Var<T> top = lateral_[3](stages[3]);
  pyramid.levels[kPyramidStrides[3]] = output_[3](top);
  for (int s = 2; s >= 0; --s) {
    top = ops::add(lateral_[s](stages[s]), ops::upsample_nearest2x(top));
    pyramid.levels[kPyramidStrides[s]] = output_[s](top);
  }
  return pyramid;
}

template <typename T>
void PixelDecoder<T>::visit(const std::string& prefix, const VarVisitor<T>& fn) {
  for (std::size_t s = 0; s < 4; ++s) {
    const std::string tag = ".s" + std::to_string(kPyramidStrides[s]);
    lateral_[s].visit(prefix + ".lateral" + tag, fn);
    output_[s].visit(prefix + ".output" + tag, fn);
  }
}

template <typename T>
Encoder<T>::Encoder(const EncoderConfig& config, std::mt19937_64& rng)
    : config_(config), backbone_((config.validate(), config), rng), decoder_(config, rng) {
  if (config_.freeze_backbone) {
    backbone_.visit("backbone", [](const std::string&, Var<T>& v) { v.set_requires_grad(false); });
  }
}

template <typename T>
FeaturePyramid<T> Encoder<T>::forward(const Var<T>& image) const {
  return decoder_.forward(backbone_.forward(image));
}

template <typename T>
void Encoder<T>::visit(const VarVisitor<T>& fn) {
  backbone_.visit("backbone", fn);
  decoder_.visit("pixel_decoder", fn);
}

template <typename T>
ParameterList<T> Encoder<T>::parameters() const {
  ParameterList<T> out;
  auto& self = const_cast<Encoder&>(*this);
  const bool backbone_trainable = !config_.freeze_backbone;
  self.backbone_.visit("backbone", [&](const std::string& name, Var<T>& v) {
    out.push_back({name, v, backbone_trainable});
  });
  self.decoder_.visit("pixel_decoder", [&](const std::string& name, Var<T>& v) { out.push_back({name, v, true}); });
  return out;
}

template <typename T>
Encoder<T> Encoder<T>::clone(bool requires_grad) const {
  Encoder copy = *this;
  copy.visit([&](const std::string&, Var<T>& v) { v = Var<T>::leaf(v.value(), requires_grad); });
  if (requires_grad && config_.freeze_backbone) {
    copy.backbone_.visit("backbone", [](const std::string&, Var<T>& v) { v.set_requires_grad(false); });
  }
  return copy;
}

template <typename T>
FeaturePyramid<T> target_forward(const Encoder<T>& target, const Var<T>& clean_image) {
  NoGradGuard no_grad;
  return target.forward(clean_image);
}

template class Backbone<float>;
template class Backbone<double>;
template class PixelDecoder<float>;
template class PixelDecoder<double>;
template class Encoder<float>;
template class Encoder<double>;
template FeaturePyramid<float> target_forward(const Encoder<float>&, const Var<float>&);
template FeaturePyramid<double> target_forward(const Encoder<double>&, const Var<double>&);

}  // namespace mjepa
