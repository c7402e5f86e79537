#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include "maskjepa/layers.hpp"

namespace mjepa {

struct PredictorConfig {
  std::size_t cross_blocks = 9;  // L
  std::size_t self_blocks = 2;   // M, applied to the masked spatial tokens before the query stack
  std::size_t queries = 100;     // N
  int heads = 4;
  std::size_t channels = 64;
  std::size_t ffn_hidden = 0;  // 0 -> 2 * channels
  bool attn_scale = true;      // divide logits by sqrt(head dim)

  std::size_t hidden() const { return ffn_hidden ? ffn_hidden : 2 * channels; }
  void validate() const;
};

// Patch-level mask over the F_{i1} grid. `patch` is measured in feature cells.
struct MaskGrid {
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  std::size_t patch = 1;
  double ratio = 0.0;
  std::vector<std::uint8_t> masked;  // grid_h * grid_w, row-major, 1 = masked

  std::size_t patches() const { return grid_h * grid_w; }
  std::size_t masked_count() const;
  std::size_t cells_h() const { return grid_h * patch; }
  std::size_t cells_w() const { return grid_w * patch; }
  // Per-cell mask over the (grid_h*patch) x (grid_w*patch) feature grid.
  std::vector<std::uint8_t> cell_mask() const;
};

// Masks exactly round(ratio * patches) patches, uniformly without replacement.
MaskGrid sample_mask(std::size_t grid_h, std::size_t grid_w, std::size_t patch, double ratio,
                     std::mt19937_64& rng);

// Grid that tiles an h x w feature map with `patch`-cell patches; throws if it does not divide.
MaskGrid sample_mask_for_feature(std::size_t h, std::size_t w, std::size_t patch, double ratio,
                                 std::mt19937_64& rng);

// tokens: [h*w, C] of one image. Masked cells become `token`, the rest pass through bitwise.
template <typename T>
Var<T> apply_mask(const Var<T>& tokens, std::size_t h, std::size_t w, const MaskGrid& grid, const Var<T>& token);

// 2D sinusoidal embedding [h*w, C]: first C/2 channels encode the row, the rest the
// column; within each half channel 2i is sin(pos / 10000^(2i/(C/2))) and 2i+1 the cosine.
template <typename T>
Tensor<T> positional_embedding(std::size_t h, std::size_t w, std::size_t channels);

// Pre-norm multi-head self-attention + FFN, both residual. `pos` (optional) is
// added to the query/key inputs.
template <typename T>
class SelfAttentionBlock {
 public:
  SelfAttentionBlock() = default;
  SelfAttentionBlock(const PredictorConfig& config, std::mt19937_64& rng);

  Var<T> forward(const Var<T>& x, const Var<T>& pos = {}) const;
  void visit(const std::string& prefix, const VarVisitor<T>& fn);

 private:
  int heads_ = 1;
  bool scaled_ = true;
  LayerNorm<T> norm_attn_, norm_ffn_;
  Linear<T> q_, k_, v_, o_, ffn1_, ffn2_;
};

// Query update: X_l = softmax(f_Q(X) f_K(mem+pos)^T / sqrt(d)) f_V(mem+pos) + X,
// followed by query self-attention and FFN sub-layers.
template <typename T>
class CrossAttentionBlock {
 public:
  CrossAttentionBlock() = default;
  CrossAttentionBlock(const PredictorConfig& config, std::mt19937_64& rng);

  // Cross-attention sub-layer only, with its residual.
  Var<T> cross_attend(const Var<T>& queries, const Var<T>& memory, const Var<T>& pos,
                      Tensor<T>* weights_out = nullptr) const;
  Var<T> forward(const Var<T>& queries, const Var<T>& memory, const Var<T>& pos) const;
  void visit(const std::string& prefix, const VarVisitor<T>& fn);

 private:
  int heads_ = 1;
  bool scaled_ = true;
  Linear<T> f_q_, f_k_, f_v_;
  SelfAttentionBlock<T> tail_;
};

// Transformer decoder recast as the JEPA predictor.
template <typename T>
class Predictor {
 public:
  Predictor() = default;
  Predictor(const PredictorConfig& config, std::mt19937_64& rng);

  // masked: [h*w, C] output of apply_mask. Returns F_trans as [h*w, C].
  Var<T> predict(const Var<T>& masked, std::size_t h, std::size_t w) const;

  // Convenience: apply_mask with the learned token, then predict.
  Var<T> forward(const Var<T>& tokens, std::size_t h, std::size_t w, const MaskGrid& grid) const;

  const Var<T>& mask_token() const { return mask_token_; }
  const Var<T>& queries() const { return queries_; }
  const PredictorConfig& config() const { return config_; }

  // Names are rooted at "predictor.".
  void visit(const VarVisitor<T>& fn);
  ParameterList<T> parameters() const;

 private:
  PredictorConfig config_;
  Var<T> mask_token_;  // [C]
  Var<T> queries_;     // [N, C], X_0
  std::vector<SelfAttentionBlock<T>> self_blocks_;
  std::vector<CrossAttentionBlock<T>> cross_blocks_;
  // Reconstruction head: spatial positions attend over X_L, then f_L.
  LayerNorm<T> head_norm_;
  Linear<T> head_q_, head_k_, head_v_, f_l_;
};

}  // namespace mjepa
