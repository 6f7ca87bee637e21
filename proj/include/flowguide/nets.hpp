#pragma once

// Velocity-prediction networks u(x_t, v, t).
//
// Two architectures share one conditioning scheme: per block, a zero-initialized
// linear map of concat(time_embed(t), v) produces (scale, shift, gate) triplets
// that modulate a non-affine layer norm and gate the residual branch. With zero
// gates every block starts as the identity, and the zero-initialized output
// projection makes the whole network output exactly zero at initialization.
//
//   mlp               — residual MLP over (B, data_dim) rows, per-row t and v
//   adaln_transformer — self-attention stack over one (L, data_dim) token
//                       sequence with a single shared condition vector

#include <cmath>
#include <string>
#include <vector>

#include "params.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace flowguide {

enum class Arch { mlp, adaln_transformer };

inline std::string arch_name(Arch a) { return a == Arch::mlp ? "mlp" : "adaln_transformer"; }

struct VelocityNetConfig {
    Arch arch          = Arch::mlp;
    int depth          = 4;
    int width          = 128;
    int heads          = 4;
    int data_dim       = 2;
    int cond_dim       = 8;
    int time_embed_dim = 32;

    int cond_input_dim() const { return time_embed_dim + cond_dim; }

    void validate() const {
        if (depth < 1 || width < 1 || heads < 1 || data_dim < 1 || cond_dim < 1 || time_embed_dim < 1)
            throw TensorError("VelocityNetConfig: all dims must be >= 1");
        if (time_embed_dim % 2 != 0) throw TensorError("VelocityNetConfig: time_embed_dim must be even");
        if (arch == Arch::adaln_transformer && width % heads != 0)
            throw TensorError("VelocityNetConfig: width must be divisible by heads");
    }
};

// ---------------------------------------------------------------------------
// time embedding: half sin / half cos at geometrically spaced frequencies,
// freq_i = 10000^(-i/(dim/2)), i = 0..dim/2-1, applied to t in [0,1].
// ---------------------------------------------------------------------------

inline std::vector<double> time_embed_values(double t, int dim) {
    if (dim < 2 || dim % 2 != 0) throw TensorError("time_embed: dim must be even and >= 2");
    if (!(t >= 0.0 && t <= 1.0)) throw TensorError("time_embed: t must lie in [0,1]");
    int half = dim / 2;
    std::vector<double> out(static_cast<size_t>(dim));
    for (int i = 0; i < half; ++i) {
        double freq               = std::exp(-std::log(10000.0) * static_cast<double>(i) / half);
        out[static_cast<size_t>(i)]        = std::sin(t * freq);
        out[static_cast<size_t>(half + i)] = std::cos(t * freq);
    }
    return out;
}

template <typename S>
Tensor<S> time_embed(double t, int dim) {
    auto v = time_embed_values(t, dim);
    return Tensor<S>::from_data({dim}, std::vector<S>(v.begin(), v.end()));
}

template <typename S>
Tensor<S> time_embed_batch(const std::vector<double>& ts, int dim) {
    std::vector<S> out;
    out.reserve(ts.size() * static_cast<size_t>(dim));
    for (double t : ts) {
        auto row = time_embed_values(t, dim);
        out.insert(out.end(), row.begin(), row.end());
    }
    return Tensor<S>::from_data({static_cast<int64_t>(ts.size()), dim}, std::move(out));
}

template <typename S>
Tensor<S> null_condition(int cond_dim) {
    if (cond_dim < 1) throw TensorError("null_condition: cond_dim must be >= 1");
    return Tensor<S>::zeros({cond_dim});
}

// ---------------------------------------------------------------------------
// parameter construction
// ---------------------------------------------------------------------------

template <typename S>
ParamStore<S> init_params(const VelocityNetConfig& cfg, uint64_t seed) {
    cfg.validate();
    Pcg32 rng(seed, rng_stream::kParamInit);
    ParamStore<S> p;
    int64_t W = cfg.width, D = cfg.data_dim, C = cfg.cond_input_dim();

    auto linear = [&](const std::string& name, int64_t in, int64_t out, bool zero) {
        p.add(name + ".w", {in, out},
              zero ? init::zeros<S>(in * out) : init::fan_in_normal<S>(in, in * out, rng));
        p.add(name + ".b", {out}, init::zeros<S>(out));
    };

    if (cfg.arch == Arch::mlp) {
        linear("in", D, W, false);
        for (int i = 0; i < cfg.depth; ++i) {
            std::string blk = "blk" + std::to_string(i);
            linear(blk + ".mod", C, 3 * W, true);  // zero: blocks start as identity
            linear(blk + ".fc1", W, W, false);
            linear(blk + ".fc2", W, W, false);
        }
    } else {
        linear("tok", D, W, false);
        for (int i = 0; i < cfg.depth; ++i) {
            std::string blk = "blk" + std::to_string(i);
            linear(blk + ".mod", C, 6 * W, true);
            linear(blk + ".attn.q", W, W, false);
            linear(blk + ".attn.k", W, W, false);
            linear(blk + ".attn.v", W, W, false);
            linear(blk + ".attn.o", W, W, false);
            linear(blk + ".fc1", W, W, false);
            linear(blk + ".fc2", W, W, false);
        }
    }
    linear("final.mod", C, 2 * W, true);
    linear("out", W, D, true);  // zero output projection: u == 0 at init
    return p;
}

// ---------------------------------------------------------------------------
// forward passes
// ---------------------------------------------------------------------------

namespace detail {

template <typename S>
Tensor<S> affine(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
    return add(matmul(x, w), b);
}

// sinusoidal positional embedding for token sequences, (L, W) constant
template <typename S>
Tensor<S> positional_embedding(int64_t len, int64_t width) {
    std::vector<S> out(static_cast<size_t>(len * width));
    for (int64_t pos = 0; pos < len; ++pos)
        for (int64_t j = 0; j < width; ++j) {
            double freq = std::exp(-std::log(10000.0) * static_cast<double>(2 * (j / 2)) / static_cast<double>(width));
            double v    = (j % 2 == 0) ? std::sin(pos * freq) : std::cos(pos * freq);
            out[static_cast<size_t>(pos * width + j)] = static_cast<S>(v);
        }
    return Tensor<S>::from_data({len, width}, std::move(out));
}

template <typename S>
struct Modulation {
    Tensor<S> scale, shift, gate;
};

template <typename S>
Tensor<S> modulate(const Tensor<S>& h_norm, const Tensor<S>& scale, const Tensor<S>& shift) {
    return add(add(h_norm, mul(h_norm, scale)), shift);
}

template <typename S>
Tensor<S> mlp_forward(const VelocityNetConfig& cfg, const BoundParams<S>& params, const Tensor<S>& x,
                      const Tensor<S>& cond, int tap_layer, Tensor<S>* hidden_out) {
    int64_t W = cfg.width;
    auto P = [&](const std::string& n) -> const Tensor<S>& { return params.at(n); };

    auto h = affine(x, P("in.w"), P("in.b"));
    for (int i = 0; i < cfg.depth; ++i) {
        std::string blk = "blk" + std::to_string(i);
        auto mod        = affine(cond, P(blk + ".mod.w"), P(blk + ".mod.b"));
        auto sc         = slice(mod, 1, 0, W);
        auto sh         = slice(mod, 1, W, W);
        auto gate       = slice(mod, 1, 2 * W, W);
        auto hm         = modulate(layer_norm(h), sc, sh);
        auto f          = affine(gelu_tanh(affine(hm, P(blk + ".fc1.w"), P(blk + ".fc1.b"))),
                                 P(blk + ".fc2.w"), P(blk + ".fc2.b"));
        h               = add(h, mul(gate, f));
        if (hidden_out && tap_layer == i + 1) *hidden_out = h;
    }
    auto modf = affine(cond, P("final.mod.w"), P("final.mod.b"));
    auto hm   = modulate(layer_norm(h), slice(modf, 1, 0, W), slice(modf, 1, W, W));
    return affine(hm, P("out.w"), P("out.b"));
}

template <typename S>
Tensor<S> attention(const VelocityNetConfig& cfg, const BoundParams<S>& params, const std::string& blk,
                    const Tensor<S>& hm) {
    auto P     = [&](const std::string& n) -> const Tensor<S>& { return params.at(n); };
    int64_t W  = cfg.width;
    int64_t hd = W / cfg.heads;
    S scale    = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd)));

    auto q = affine(hm, P(blk + ".attn.q.w"), P(blk + ".attn.q.b"));
    auto k = affine(hm, P(blk + ".attn.k.w"), P(blk + ".attn.k.b"));
    auto v = affine(hm, P(blk + ".attn.v.w"), P(blk + ".attn.v.b"));

    std::vector<Tensor<S>> heads;
    heads.reserve(static_cast<size_t>(cfg.heads));
    for (int hdx = 0; hdx < cfg.heads; ++hdx) {
        auto qh  = slice(q, 1, hdx * hd, hd);
        auto kh  = slice(k, 1, hdx * hd, hd);
        auto vh  = slice(v, 1, hdx * hd, hd);
        auto att = softmax(mul(matmul(qh, kh, false, true), scale));
        heads.push_back(matmul(att, vh));
    }
    return affine(concat(heads, 1), P(blk + ".attn.o.w"), P(blk + ".attn.o.b"));
}

template <typename S>
Tensor<S> transformer_forward(const VelocityNetConfig& cfg, const BoundParams<S>& params, const Tensor<S>& x,
                              const Tensor<S>& cond, int tap_layer, Tensor<S>* hidden_out) {
    int64_t L = x.dim(0), W = cfg.width;
    auto P = [&](const std::string& n) -> const Tensor<S>& { return params.at(n); };

    auto h = add(affine(x, P("tok.w"), P("tok.b")), positional_embedding<S>(L, W));
    for (int i = 0; i < cfg.depth; ++i) {
        std::string blk = "blk" + std::to_string(i);
        auto mod        = affine(cond, P(blk + ".mod.w"), P(blk + ".mod.b"));  // (1, 6W)
        auto sc1  = slice(mod, 1, 0, W);
        auto sh1  = slice(mod, 1, W, W);
        auto g1   = slice(mod, 1, 2 * W, W);
        auto sc2  = slice(mod, 1, 3 * W, W);
        auto sh2  = slice(mod, 1, 4 * W, W);
        auto g2   = slice(mod, 1, 5 * W, W);

        auto attn = attention(cfg, params, blk, modulate(layer_norm(h), sc1, sh1));
        h         = add(h, mul(g1, attn));
        auto hm   = modulate(layer_norm(h), sc2, sh2);
        auto f    = affine(gelu_tanh(affine(hm, P(blk + ".fc1.w"), P(blk + ".fc1.b"))),
                           P(blk + ".fc2.w"), P(blk + ".fc2.b"));
        h         = add(h, mul(g2, f));
        if (hidden_out && tap_layer == i + 1) *hidden_out = h;
    }
    auto modf = affine(cond, P("final.mod.w"), P("final.mod.b"));
    auto hm   = modulate(layer_norm(h), slice(modf, 1, 0, W), slice(modf, 1, W, W));
    return affine(hm, P("out.w"), P("out.b"));
}

}  // namespace detail

// Batched forward pass.
//   x    — (B, data_dim) for mlp, (L, data_dim) token sequence for the transformer
//   cond — (B, cond_dim) per-row conditions, or (cond_dim,) shared
//   ts   — per-row t values (size B), or a single shared t
// Returns u with the shape of x. When hidden_out is supplied, the residual
// stream after block `tap_layer` (1-based) is exposed for the alignment loss.
template <typename S>
Tensor<S> velocity_forward(const VelocityNetConfig& cfg, const BoundParams<S>& params, const Tensor<S>& x,
                           const Tensor<S>& cond, const std::vector<double>& ts, int tap_layer = 0,
                           Tensor<S>* hidden_out = nullptr) {
    cfg.validate();
    if (x.rank() != 2 || x.dim(1) != cfg.data_dim)
        throw ShapeError("velocity_forward: x must be (rows, data_dim), got " + shape_str(x.shape()));
    int64_t rows = x.dim(0);
    if (hidden_out && (tap_layer < 1 || tap_layer > cfg.depth))
        throw ShapeError("velocity_forward: tap_layer out of range");

    int64_t cond_rows = cfg.arch == Arch::mlp ? rows : 1;
    Tensor<S> cmat;
    if (cond.rank() == 1) {
        if (cond.dim(0) != cfg.cond_dim) throw ShapeError("velocity_forward: condition dim mismatch");
        cmat = broadcast_to(reshape(cond, {1, cfg.cond_dim}), {cond_rows, cfg.cond_dim});
    } else if (cond.rank() == 2) {
        if (cond.dim(0) != cond_rows || cond.dim(1) != cfg.cond_dim)
            throw ShapeError("velocity_forward: condition shape mismatch, got " + shape_str(cond.shape()));
        cmat = cond;
    } else {
        throw ShapeError("velocity_forward: condition must be rank 1 or 2");
    }

    std::vector<double> tvec = ts;
    if (cfg.arch == Arch::adaln_transformer && tvec.size() != 1)
        throw ShapeError("velocity_forward: transformer takes a single t per sequence");
    if (static_cast<int64_t>(tvec.size()) == 1 && cond_rows > 1)
        tvec.assign(static_cast<size_t>(cond_rows), tvec[0]);
    if (static_cast<int64_t>(tvec.size()) != cond_rows)
        throw ShapeError("velocity_forward: t count must match rows");

    auto cfull = concat<S>({time_embed_batch<S>(tvec, cfg.time_embed_dim), cmat}, 1);
    if (cfg.arch == Arch::mlp)
        return detail::mlp_forward(cfg, params, x, cfull, tap_layer, hidden_out);
    return detail::transformer_forward(cfg, params, x, cfull, tap_layer, hidden_out);
}

// Store-level convenience; binds fresh (ungradded by default) leaves per call.
template <typename S>
Tensor<S> velocity_forward(const VelocityNetConfig& cfg, const ParamStore<S>& params, const Tensor<S>& x,
                           const Tensor<S>& cond, const std::vector<double>& ts, bool trainable = false,
                           int tap_layer = 0, Tensor<S>* hidden_out = nullptr) {
    auto bound = bind_params(params, trainable);
    return velocity_forward(cfg, bound, x, cond, ts, tap_layer, hidden_out);
}

// Single-condition convenience: u(x_t, v, t) with one shared condition and t.
template <typename S>
Tensor<S> forward(const VelocityNetConfig& cfg, const ParamStore<S>& params, const Tensor<S>& x_t,
                  const Tensor<S>& v, double t) {
    return velocity_forward(cfg, params, x_t, v, std::vector<double>{t});
}

}  // namespace flowguide
