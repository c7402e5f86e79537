#pragma once

#include <array>
#include <map>
#include <random>
#include <vector>

#include "maskjepa/layers.hpp"

namespace mjepa {

inline constexpr std::array<int, 4> kPyramidStrides{4, 8, 16, 32};

struct EncoderConfig {
  std::size_t channels = 64;  // C, shared by every pyramid level
  int s_i1 = 8;               // stride of the feature that gets masked and reconstructed
  int s_last = 4;             // stride of the feature used for denoising
  std::size_t blocks_per_stage = 2;
  bool freeze_backbone = false;

  // Backbone widths per stage (strides 4, 8, 16, 32).
  std::array<std::size_t, 4> stage_widths() const {
    return {channels / 2, channels, channels, 2 * channels};
  }
  void validate() const;
};

// Pixel-decoder output F_i keyed by stride.
template <typename T>
struct FeaturePyramid {
  std::map<int, Var<T>> levels;

  const Var<T>& at(int stride) const { return levels.at(stride); }
  std::size_t channels() const { return levels.begin()->second.dim(1); }
};

// Throws if H or W is not a multiple of 32 or the input is not [N,3,H,W].
void check_input_geometry(const Shape& image_shape);

// Residual CNN: stem to stride 4, then four stages with stride-2 transitions.
template <typename T>
class Backbone {
 public:
  Backbone() = default;
  Backbone(const EncoderConfig& config, std::mt19937_64& rng);

  // Stage outputs at strides {4, 8, 16, 32}.
  std::array<Var<T>, 4> forward(const Var<T>& image) const;
  void visit(const std::string& prefix, const VarVisitor<T>& fn);

 private:
  struct ResidualBlock {
    Conv2d<T> conv_a, conv_b;
  };
  struct Stage {
    Conv2d<T> down;  // absent (undefined weight) for the first stage
    std::vector<ResidualBlock> blocks;
  };

  Conv2d<T> stem0_, stem1_;
  std::array<Stage, 4> stages_;
};

// Top-down FPN: lateral 1x1, nearest x2 upsample + add, 3x3 output conv.
template <typename T>
class PixelDecoder {
 public:
  PixelDecoder() = default;
  PixelDecoder(const EncoderConfig& config, std::mt19937_64& rng);

  FeaturePyramid<T> forward(const std::array<Var<T>, 4>& stages) const;
  void visit(const std::string& prefix, const VarVisitor<T>& fn);

 private:
  std::array<Conv2d<T>, 4> lateral_, output_;
};

// Backbone + pixel decoder. Used for both the online and the target branch.
template <typename T>
class Encoder {
 public:
  Encoder() = default;
  Encoder(const EncoderConfig& config, std::mt19937_64& rng);

  FeaturePyramid<T> forward(const Var<T>& image) const;

  // "backbone.*" and "pixel_decoder.*"; backbone entries carry trainable=false when frozen.
  ParameterList<T> parameters() const;

  // Deep copy with fresh leaves; `requires_grad` applies to every parameter.
  Encoder clone(bool requires_grad) const;

  const EncoderConfig& config() const { return config_; }
  const Backbone<T>& backbone() const { return backbone_; }

  // Visits every parameter slot with its dotted name.
  void visit(const VarVisitor<T>& fn);

 private:
  EncoderConfig config_;
  Backbone<T> backbone_;
  PixelDecoder<T> decoder_;
};

// Forward pass of the target branch: gradient tracking off (stop-gradient).
template <typename T>
FeaturePyramid<T> target_forward(const Encoder<T>& target, const Var<T>& clean_image);

}  // namespace mjepa
