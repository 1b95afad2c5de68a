#pragma once

#include <cstdint>
#include <vector>

#include "care/common.hpp"
#include "care/tensor.hpp"

// Pre-norm transformer layer shared by the common/semantic/acoustic encoders
// and the pseudo-text teacher: multi-head self-attention plus a 4x-width
// feed-forward, residual around each sublayer.

namespace care {

template <typename S>
struct LinearT {
    TensorT<S> w;  // [in, out]
    TensorT<S> b;  // [out]
};

template <typename S>
LinearT<S> linear_init(std::size_t in, std::size_t out, Rng& rng) {
    const double bound = std::sqrt(6.0 / (in + out));
    std::vector<S> w(in * out);
    for (auto& v : w) v = static_cast<S>(rng.uniform(-bound, bound));
    return {TensorT<S>::from_data({in, out}, std::move(w)), TensorT<S>::zeros({out})};
}

template <typename S>
TensorT<S> linear_forward(const LinearT<S>& lin, const TensorT<S>& x) {
    return add_rowvec(matmul(x, lin.w), lin.b);
}

template <typename S>
struct LayerNormParamsT {
    TensorT<S> gain, bias;
};

template <typename S>
LayerNormParamsT<S> layer_norm_init(std::size_t d) {
    return {TensorT<S>::full({d}, S(1)), TensorT<S>::zeros({d})};
}

template <typename S>
struct TransformerLayerT {
    LinearT<S> wq, wk, wv, wo;
    LayerNormParamsT<S> ln_attn, ln_ffn;
    LinearT<S> ff1, ff2;
};

template <typename S>
TransformerLayerT<S> transformer_layer_init(std::size_t width, Rng& rng) {
    TransformerLayerT<S> layer;
    layer.wq = linear_init<S>(width, width, rng);
    layer.wk = linear_init<S>(width, width, rng);
    layer.wv = linear_init<S>(width, width, rng);
    layer.wo = linear_init<S>(width, width, rng);
    layer.ln_attn = layer_norm_init<S>(width);
    layer.ln_ffn = layer_norm_init<S>(width);
    layer.ff1 = linear_init<S>(width, width * 4, rng);
    layer.ff2 = linear_init<S>(width * 4, width, rng);
    return layer;
}

// Additive attention bias from validity flags: 0 for valid keys, a large
// negative number for padding keys so their softmax weight underflows to 0.
template <typename S>
TensorT<S> attention_mask_bias(const std::vector<std::uint8_t>& valid) {
    const std::size_t t = valid.size();
    std::vector<S> bias(t * t, S(0));
    for (std::size_t q = 0; q < t; ++q)
        for (std::size_t k = 0; k < t; ++k)
            if (!valid[k]) bias[q * t + k] = S(-1e9);
    return TensorT<S>::from_data({t, t}, std::move(bias));
}

// x: [T, C]; mask_bias: [T, T] additive (undefined tensor = no masking).
template <typename S>
TensorT<S> transformer_layer_forward(const TransformerLayerT<S>& layer, const TensorT<S>& x,
                                     std::size_t heads, const TensorT<S>& mask_bias) {
    const std::size_t width = x.dim(1);
    if (heads == 0 || width % heads != 0)
        throw ConfigError("transformer: heads must divide width (" + std::to_string(heads) +
                          " vs " + std::to_string(width) + ")");
    const std::size_t dh = width / heads;
    const S inv_sqrt_dh = S(1) / std::sqrt(static_cast<S>(dh));

    TensorT<S> xn = layer_norm(x, layer.ln_attn.gain, layer.ln_attn.bias, S(1e-5));
    TensorT<S> q = linear_forward(layer.wq, xn);
    TensorT<S> k = linear_forward(layer.wk, xn);
    TensorT<S> v = linear_forward(layer.wv, xn);

    std::vector<TensorT<S>> ctx;
    ctx.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        TensorT<S> qh = slice_cols(q, h * dh, dh);
        TensorT<S> kh = slice_cols(k, h * dh, dh);
        TensorT<S> vh = slice_cols(v, h * dh, dh);
        TensorT<S> scores = scale(matmul(qh, transpose(kh)), inv_sqrt_dh);
        if (mask_bias.defined()) scores = add(scores, mask_bias);
        ctx.push_back(matmul(softmax_rows(scores), vh));
    }
    TensorT<S> attn_out = linear_forward(layer.wo, concat_cols(ctx));
    TensorT<S> mid = add(x, attn_out);

    TensorT<S> mn = layer_norm(mid, layer.ln_ffn.gain, layer.ln_ffn.bias, S(1e-5));
    TensorT<S> ff = linear_forward(layer.ff2, gelu(linear_forward(layer.ff1, mn)));
    return add(mid, ff);
}

// Fixed sinusoidal position signal, added once after the feature extractor.
template <typename S>
TensorT<S> sinusoid_positions(std::size_t t, std::size_t d) {
    std::vector<S> pos(t * d);
    for (std::size_t p = 0; p < t; ++p) {
        for (std::size_t i = 0; i < d; i += 2) {
            const double angle =
                static_cast<double>(p) / std::pow(10000.0, static_cast<double>(i) / d);
            pos[p * d + i] = static_cast<S>(std::sin(angle));
            if (i + 1 < d) pos[p * d + i + 1] = static_cast<S>(std::cos(angle));
        }
    }
    return TensorT<S>::from_data({t, d}, std::move(pos));
}

}  // namespace care
