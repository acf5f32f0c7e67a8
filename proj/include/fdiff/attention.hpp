#ifndef FDIFF_ATTENTION_HPP
#define FDIFF_ATTENTION_HPP

#include <cmath>
#include <optional>
#include <string>

#include "fdiff/tensor.hpp"

namespace fdiff {

template <typename T>
struct AttentionParams {
    Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;  // each projection d -> d
};

template <typename T>
struct AttentionOut {
    Tensor<T> out;                    // [B, Lq, d]
    Tensor<T> attn;                   // [B, h, Lq, Lkv] row-stochastic
    std::optional<Tensor<T>> cross;   // [B, h, Lq, L_text] when text given
};

namespace detail {

template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, int h) {
    const int B = x.dim(0), L = x.dim(1), d = x.dim(2);
    return permute_axes(reshape(x, {B, L, h, d / h}), {0, 2, 1, 3});
}

template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x) {
    const int B = x.dim(0), h = x.dim(1), L = x.dim(2), dh = x.dim(3);
    return reshape(permute_axes(x, {0, 2, 1, 3}), {B, L, h * dh});
}

}  // namespace detail

// Scaled dot-product attention with scale 1/sqrt(d/h). Self-attention when
// q_src == kv_src, cross-attention otherwise. When `added_kv` is supplied the
// same K/V projections are applied to it and the per-head results of both
// attentions are summed before the shared output projection (the added
// text-to-image term costs no extra parameters).
template <typename T>
AttentionOut<T> multi_head_attention(const Tensor<T>& q_src, const Tensor<T>& kv_src,
                                     const AttentionParams<T>& p, int heads,
                                     const Tensor<T>* added_kv = nullptr) {
    const int d = q_src.dim(-1);
    if (d % heads != 0)
        throw ConfigError("attention: embed dim " + std::to_string(d) + " not divisible by " +
                          std::to_string(heads) + " heads");
    const T att_scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d / heads)));

    Tensor<T> q = detail::split_heads(linear(q_src, p.wq, p.bq), heads);
    Tensor<T> k = detail::split_heads(linear(kv_src, p.wk, p.bk), heads);
    Tensor<T> v = detail::split_heads(linear(kv_src, p.wv, p.bv), heads);

    Tensor<T> attn = softmax_rows(scale(matmul(q, k, true), att_scale));
    Tensor<T> ctx = matmul(attn, v);

    AttentionOut<T> res;
    res.attn = attn;
    if (added_kv) {
        Tensor<T> k2 = detail::split_heads(linear(*added_kv, p.wk, p.bk), heads);
        Tensor<T> v2 = detail::split_heads(linear(*added_kv, p.wv, p.bv), heads);
        Tensor<T> cross = softmax_rows(scale(matmul(q, k2, true), att_scale));
        res.cross = cross;
        ctx = add(ctx, matmul(cross, v2));
    }
    res.out = linear(detail::merge_heads(ctx), p.wo, p.bo);
    return res;
}

}  // namespace fdiff

#endif
