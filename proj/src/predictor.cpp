#include "maskjepa/predictor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace mjepa {

void PredictorConfig::validate() const {
  if (cross_blocks < 1) throw std::invalid_argument("predictor: L (cross-attention blocks) must be >= 1");
  if (queries < 1) throw std::invalid_argument("predictor: N (queries) must be >= 1");
  if (heads < 1 || channels % static_cast<std::size_t>(heads)) {
    throw std::invalid_argument("predictor: channels " + std::to_string(channels) + " not divisible by heads " +
                                std::to_string(heads));
  }
}

std::size_t MaskGrid::masked_count() const {
  return static_cast<std::size_t>(std::count_if(masked.begin(), masked.end(), [](auto m) { return m != 0; }));
}

std::vector<std::uint8_t> MaskGrid::cell_mask() const {
  const std::size_t ch = cells_h(), cw = cells_w();
  std::vector<std::uint8_t> cells(ch * cw);
  for (std::size_t y = 0; y < ch; ++y) {
    for (std::size_t x = 0; x < cw; ++x) cells[y * cw + x] = masked[(y / patch) * grid_w + x / patch];
  }
  return cells;
}

MaskGrid sample_mask(std::size_t grid_h, std::size_t grid_w, std::size_t patch, double ratio,
                     std::mt19937_64& rng) {
  if (grid_h == 0 || grid_w == 0) throw std::invalid_argument("sample_mask: empty grid");
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw std::invalid_argument("sample_mask: ratio must lie in [0,1]");
  if (patch == 0) throw std::invalid_argument("sample_mask: patch size must be >= 1");
  MaskGrid grid{grid_h, grid_w, patch, ratio, std::vector<std::uint8_t>(grid_h * grid_w, 0)};
  const std::size_t total = grid.patches();
  const auto target = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(total)));
  // Partial Fisher-Yates: the first `target` slots are a uniform sample.
  std::vector<std::size_t> order(total);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = 0; i < target; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, total - 1);
    std::swap(order[i], order[pick(rng)]);
    grid.masked[order[i]] = 1;
  }
  return grid;
}

MaskGrid sample_mask_for_feature(std::size_t h, std::size_t w, std::size_t patch, double ratio,
                                 std::mt19937_64& rng) {
  if (patch == 0 || h % patch || w % patch) {
    throw std::invalid_argument("sample_mask: patch " + std::to_string(patch) + " does not tile feature " +
                                std::to_string(h) + "x" + std::to_string(w));
  }
  return sample_mask(h / patch, w / patch, patch, ratio, rng);
}

template <typename T>
Var<T> apply_mask(const Var<T>& tokens, std::size_t h, std::size_t w, const MaskGrid& grid, const Var<T>& token) {
  if (grid.cells_h() != h || grid.cells_w() != w || tokens.shape().size() != 2 || tokens.dim(0) != h * w) {
    throw ShapeError("apply_mask: grid " + std::to_string(grid.grid_h) + "x" + std::to_string(grid.grid_w) +
                     " of patch " + std::to_string(grid.patch) + " does not tile feature " + std::to_string(h) + "x" +
                     std::to_string(w) + " (tokens " + shape_str(tokens.shape()) + ")");
  }
  return ops::mask_substitute(tokens, grid.cell_mask(), token);
}

template <typename T>
Tensor<T> positional_embedding(std::size_t h, std::size_t w, std::size_t channels) {
  if (channels == 0 || channels % 4) {
    throw std::invalid_argument("positional_embedding: channels must be divisible by 4, got " +
                                std::to_string(channels));
  }
  const std::size_t half = channels / 2;
  Tensor<T> out({h * w, channels});
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      T* row = out.ptr() + (y * w + x) * channels;
      for (std::size_t i = 0; i < half / 2; ++i) {
        const double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(half));
        row[2 * i] = static_cast<T>(std::sin(static_cast<double>(y) * freq));
        row[2 * i + 1] = static_cast<T>(std::cos(static_cast<double>(y) * freq));
        row[half + 2 * i] = static_cast<T>(std::sin(static_cast<double>(x) * freq));
        row[half + 2 * i + 1] = static_cast<T>(std::cos(static_cast<double>(x) * freq));
      }
    }
  }
  return out;
}

template <typename T>
SelfAttentionBlock<T>::SelfAttentionBlock(const PredictorConfig& config, std::mt19937_64& rng)
    : heads_(config.heads),
      scaled_(config.attn_scale),
      norm_attn_(config.channels),
      norm_ffn_(config.channels),
      q_(config.channels, config.channels, rng),
      k_(config.channels, config.channels, rng),
      v_(config.channels, config.channels, rng),
      o_(config.channels, config.channels, rng),
      ffn1_(config.channels, config.hidden(), rng),
      ffn2_(config.hidden(), config.channels, rng) {}

template <typename T>
Var<T> SelfAttentionBlock<T>::forward(const Var<T>& x, const Var<T>& pos) const {
  Var<T> h = norm_attn_(x);
  Var<T> qk_in = pos.defined() ? ops::add(h, pos) : h;
  Var<T> attn = ops::attention(q_(qk_in), k_(qk_in), v_(h), heads_, scaled_);
  Var<T> y = ops::add(x, o_(attn));
  return ops::add(y, ffn2_(ops::gelu(ffn1_(norm_ffn_(y)))));
}

template <typename T>
void SelfAttentionBlock<T>::visit(const std::string& prefix, const VarVisitor<T>& fn) {
  norm_attn_.visit(prefix + ".norm_attn", fn);
  q_.visit(prefix + ".q", fn);
  k_.visit(prefix + ".k", fn);
  v_.visit(prefix + ".v", fn);
  o_.visit(prefix + ".o", fn);
  norm_ffn_.visit(prefix + ".norm_ffn", fn);
  ffn1_.visit(prefix + ".ffn1", fn);
  ffn2_.visit(prefix + ".ffn2", fn);
}

template <typename T>
CrossAttentionBlock<T>::CrossAttentionBlock(const PredictorConfig& config, std::mt19937_64& rng)
    : heads_(config.heads),
      scaled_(config.attn_scale),
      f_q_(config.channels, config.channels, rng),
      f_k_(config.channels, config.channels, rng),
      f_v_(config.channels, config.channels, rng),
      tail_(config, rng) {}

template <typename T>
Var<T> CrossAttentionBlock<T>::cross_attend(const Var<T>& queries, const Var<T>& memory, const Var<T>& pos,
                                            Tensor<T>* weights_out) const {
  Var<T> kv_in = pos.defined() ? ops::add(memory, pos) : memory;
  Var<T> attn = ops::attention(f_q_(queries), f_k_(kv_in), f_v_(kv_in), heads_, scaled_, weights_out);
  return ops::add(attn, queries);
}

template <typename T>
Var<T> CrossAttentionBlock<T>::forward(const Var<T>& queries, const Var<T>& memory, const Var<T>& pos) const {
  return tail_.forward(cross_attend(queries, memory, pos));
}

template <typename T>
void CrossAttentionBlock<T>::visit(const std::string& prefix, const VarVisitor<T>& fn) {
  f_q_.visit(prefix + ".f_q", fn);
  f_k_.visit(prefix + ".f_k", fn);
  f_v_.visit(prefix + ".f_v", fn);
  tail_.visit(prefix + ".self", fn);
}

template <typename T>
Predictor<T>::Predictor(const PredictorConfig& config, std::mt19937_64& rng) : config_(config) {
  config_.validate();
  const std::size_t c = config_.channels;
  mask_token_ = make_param<T>({c});
  init_normal(mask_token_, 0.02, rng);
  queries_ = make_param<T>({config_.queries, c});
  init_normal(queries_, 1.0, rng);
  for (std::size_t m = 0; m < config_.self_blocks; ++m) self_blocks_.emplace_back(config_, rng);
  for (std::size_t l = 0; l < config_.cross_blocks; ++l) cross_blocks_.emplace_back(config_, rng);
  head_norm_ = LayerNorm<T>(c);
  head_q_ = Linear<T>(c, c, rng);
  head_k_ = Linear<T>(c, c, rng);
  head_v_ = Linear<T>(c, c, rng);
  f_l_ = Linear<T>(c, c, rng);
}

template <typename T>
Var<T> Predictor<T>::predict(const Var<T>& masked, std::size_t h, std::size_t w) const {
  if (masked.shape() != Shape{h * w, config_.channels}) {
    throw_shape_error("predict_features", masked.shape(), Shape{h * w, config_.channels});
  }
  Var<T> pos = Var<T>::constant(positional_embedding<T>(h, w, config_.channels));
  Var<T> memory = masked;
  for (const auto& block : self_blocks_) memory = block.forward(memory, pos);
  Var<T> x = queries_;
  for (const auto& block : cross_blocks_) x = block.forward(x, memory, pos);
  Var<T> xl = head_norm_(x);
  Var<T> spatial = ops::attention(head_q_(ops::add(memory, pos)), head_k_(xl), head_v_(xl), config_.heads,
                                  config_.attn_scale);
  return f_l_(spatial);
}

template <typename T>
Var<T> Predictor<T>::forward(const Var<T>& tokens, std::size_t h, std::size_t w, const MaskGrid& grid) const {
  return predict(apply_mask(tokens, h, w, grid, mask_token_), h, w);
}

template <typename T>
void Predictor<T>::visit(const VarVisitor<T>& fn) {
  fn("predictor.mask_token", mask_token_);
  fn("predictor.queries", queries_);
  for (std::size_t m = 0; m < self_blocks_.size(); ++m) self_blocks_[m].visit("predictor.self" + std::to_string(m), fn);
  for (std::size_t l = 0; l < cross_blocks_.size(); ++l) {
    cross_blocks_[l].visit("predictor.cross" + std::to_string(l), fn);
  }
  head_norm_.visit("predictor.head.norm", fn);
  head_q_.visit("predictor.head.q", fn);
  head_k_.visit("predictor.head.k", fn);
  head_v_.visit("predictor.head.v", fn);
  f_l_.visit("predictor.head.f_l", fn);
}

template <typename T>
ParameterList<T> Predictor<T>::parameters() const {
  ParameterList<T> out;
  const_cast<Predictor&>(*this).visit([&](const std::string& name, Var<T>& v) { out.push_back({name, v, true}); });
  return out;
}

template class SelfAttentionBlock<float>;
template class SelfAttentionBlock<double>;
template class CrossAttentionBlock<float>;
template class CrossAttentionBlock<double>;
template class Predictor<float>;
template class Predictor<double>;
template Var<float> apply_mask(const Var<float>&, std::size_t, std::size_t, const MaskGrid&, const Var<float>&);
template Var<double> apply_mask(const Var<double>&, std::size_t, std::size_t, const MaskGrid&, const Var<double>&);
template Tensor<float> positional_embedding(std::size_t, std::size_t, std::size_t);
template Tensor<double> positional_embedding(std::size_t, std::size_t, std::size_t);

}  // namespace mjepa
