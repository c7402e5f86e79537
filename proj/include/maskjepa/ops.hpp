#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "maskjepa/autograd.hpp"

// Differentiable op set. Feature maps are NCHW, token matrices are [rows, C].
namespace mjepa::ops {

template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T factor);

// a:[m,k] (or [k,m] if trans_a) times b:[k,n] (or [n,k] if trans_b).
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b, bool trans_a = false, bool trans_b = false);

// x:[n,in], weight:[out,in], bias:[out] or undefined -> [n,out].
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias);

// Row-wise softmax over the last dim, max-subtracted.
template <typename T> Var<T> softmax(const Var<T>& x);

// Normalizes each row of the last dim. Zero-variance rows map to zero
// (eps sits in the denominator). gamma/beta may be undefined (no affine).
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5));

template <typename T> Var<T> gelu(const Var<T>& x);
template <typename T> Var<T> relu(const Var<T>& x);

// x:[N,Cin,H,W], weight:[Cout,Cin,k,k], bias:[Cout] or undefined.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int stride, int padding);

template <typename T> Var<T> upsample_nearest2x(const Var<T>& x);

// Non-overlapping kernel=stride=factor average pooling on NCHW.
template <typename T> Var<T> avg_pool(const Var<T>& x, int factor);

// x:[rows,C]; rows with mask[r]!=0 are replaced by token:[C].
template <typename T>
Var<T> mask_substitute(const Var<T>& x, const std::vector<std::uint8_t>& row_mask, const Var<T>& token);

template <typename T> Var<T> sum(const Var<T>& x);
template <typename T> Var<T> mean(const Var<T>& x);

// Mean of squared differences over all elements.
template <typename T> Var<T> mse(const Var<T>& pred, const Var<T>& target);

// Mean of squared differences over rows with mask[r]!=0 and all columns.
// Throws std::invalid_argument if no row is selected.
template <typename T>
Var<T> masked_mse(const Var<T>& pred, const Var<T>& target, const std::vector<std::uint8_t>& row_mask);

// Mean softmax cross-entropy; logits:[n,K], labels in [0,K) (negative = ignored).
template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, const std::vector<int>& labels);

// [N,C,H,W] -> [H*W, C] for image n.
template <typename T> Var<T> image_tokens(const Var<T>& x, std::size_t n);

// [H*W, C] -> [1,C,H,W].
template <typename T> Var<T> tokens_to_image(const Var<T>& tokens, std::size_t h, std::size_t w);

// Multi-head scaled dot-product attention. q:[n,C], k,v:[m,C]; C split into
// `heads` contiguous slices. If `weights_out` is given it receives the
// attention probabilities as [heads, n, m].
template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads, bool scaled,
                 Tensor<T>* weights_out = nullptr);

// Row-broadcast add: x:[rows,C] + row:[C] (or x + table when shapes match).
template <typename T> Var<T> add_rows(const Var<T>& x, const Var<T>& row);

}  // namespace mjepa::ops
