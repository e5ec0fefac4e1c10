// nn.hpp - minimal dense feedforward engine: GELU, dropout, exact
// reverse-mode gradients. Sized for nets of a few thousand parameters;
// everything is double precision and allocation-simple on purpose.
#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "ctirf/common.hpp"

namespace ctirf {

enum class Activation { gelu, identity };

// One dense layer. Weights are row-major (out x in).
struct LayerParams {
    std::size_t in = 0;
    std::size_t out = 0;
    std::vector<double> w;
    std::vector<double> b;
    Activation act = Activation::identity;
};

using Ffn = std::vector<LayerParams>;

// GELU(v) = v * sigmoid(1.702 v).
inline double gelu(double v) { return v * sigmoid(1.702 * v); }

inline double gelu_grad(double v) {
    const double s = sigmoid(1.702 * v);
    return s + 1.702 * v * s * (1.0 - s);
}

inline double activation_eval(Activation a, double v) {
    return a == Activation::gelu ? gelu(v) : v;
}

inline double activation_grad(Activation a, double v) {
    return a == Activation::gelu ? gelu_grad(v) : 1.0;
}

// Builds [in -> hidden...-> out] with GELU on hidden layers, identity output.
inline Ffn make_ffn(std::size_t in_dim, const std::vector<std::size_t>& hidden,
                    std::size_t out_dim) {
    Ffn net;
    std::size_t prev = in_dim;
    for (std::size_t h : hidden) {
        LayerParams layer;
        layer.in = prev;
        layer.out = h;
        layer.w.assign(h * prev, 0.0);
        layer.b.assign(h, 0.0);
        layer.act = Activation::gelu;
        net.push_back(std::move(layer));
        prev = h;
    }
    LayerParams last;
    last.in = prev;
    last.out = out_dim;
    last.w.assign(out_dim * prev, 0.0);
    last.b.assign(out_dim, 0.0);
    last.act = Activation::identity;
    net.push_back(std::move(last));
    return net;
}

// Glorot-uniform weights, zero biases.
inline void glorot_init(Ffn& net, Rng& rng) {
    for (auto& layer : net) {
        const double limit =
            std::sqrt(6.0 / static_cast<double>(layer.in + layer.out));
        for (auto& w : layer.w) w = rng.uniform(-limit, limit);
        for (auto& b : layer.b) b = 0.0;
    }
}

// Keep-indicators for the hidden layers of a net (output layer never masked).
struct DropoutMask {
    double rate = 0.0;
    double scale = 1.0;                          // 1/(1-rate)
    std::vector<std::vector<std::uint8_t>> keep; // one vector per hidden layer
};

inline DropoutMask sample_dropout_mask(double rate,
                                       const std::vector<std::size_t>& widths,
                                       Rng& rng) {
    if (rate < 0.0 || rate >= 1.0)
        throw ConfigError("dropout rate must lie in [0, 1), got " +
                          std::to_string(rate));
    DropoutMask mask;
    mask.rate = rate;
    mask.scale = 1.0 / (1.0 - rate);
    mask.keep.reserve(widths.size());
    for (std::size_t w : widths) {
        std::vector<std::uint8_t> keep(w, 1);
        if (rate > 0.0)
            for (auto& k : keep) k = rng.bernoulli(1.0 - rate) ? 1 : 0;
        mask.keep.push_back(std::move(keep));
    }
    return mask;
}

inline std::vector<std::size_t> hidden_widths(const Ffn& net) {
    std::vector<std::size_t> widths;
    for (std::size_t l = 0; l + 1 < net.size(); ++l) widths.push_back(net[l].out);
    return widths;
}

// Everything backward needs: the input and per-layer pre/post activations
// (post includes the dropout scaling when a mask was applied).
struct FfnTrace {
    std::vector<double> input;
    std::vector<std::vector<double>> pre;
    std::vector<std::vector<double>> post;

    const std::vector<double>& output() const { return post.back(); }
};

inline FfnTrace ffn_forward(const Ffn& net, const std::vector<double>& input,
                            const DropoutMask* mask = nullptr) {
    if (net.empty()) throw ConfigError("ffn_forward: empty network");
    if (input.size() != net.front().in)
        throw ConfigError("ffn_forward: input size " + std::to_string(input.size()) +
                          " != layer fan-in " + std::to_string(net.front().in));
    if (mask && mask->keep.size() + 1 != net.size() && !(net.size() == 1 && mask->keep.empty()))
        throw ConfigError("ffn_forward: mask/layer count mismatch");

    FfnTrace trace;
    trace.input = input;
    trace.pre.resize(net.size());
    trace.post.resize(net.size());
    const std::vector<double>* cur = &trace.input;
    for (std::size_t l = 0; l < net.size(); ++l) {
        const auto& layer = net[l];
        if (cur->size() != layer.in)
            throw ConfigError("ffn_forward: layer " + std::to_string(l) +
                              " fan-in mismatch");
        auto& z = trace.pre[l];
        z.assign(layer.out, 0.0);
        for (std::size_t o = 0; o < layer.out; ++o) {
            double acc = layer.b[o];
            const double* wrow = layer.w.data() + o * layer.in;
            for (std::size_t i = 0; i < layer.in; ++i) acc += wrow[i] * (*cur)[i];
            z[o] = acc;
        }
        auto& a = trace.post[l];
        a.resize(layer.out);
        const bool masked = mask && l < mask->keep.size();
        for (std::size_t o = 0; o < layer.out; ++o) {
            double v = activation_eval(layer.act, z[o]);
            if (masked) v = mask->keep[l][o] ? v * mask->scale : 0.0;
            a[o] = v;
        }
        cur = &a;
    }
    return trace;
}

// Gradients of <upstream, output> with respect to every weight, bias, and
// the network input. Shapes mirror the Ffn exactly.
struct GradientBuffer {
    struct LayerGrad {
        std::vector<double> w;
        std::vector<double> b;
    };
    std::vector<LayerGrad> layers;
    std::vector<double> input;
};

inline GradientBuffer zeros_like(const Ffn& net) {
    GradientBuffer g;
    g.layers.resize(net.size());
    for (std::size_t l = 0; l < net.size(); ++l) {
        g.layers[l].w.assign(net[l].w.size(), 0.0);
        g.layers[l].b.assign(net[l].b.size(), 0.0);
    }
    g.input.assign(net.empty() ? 0 : net.front().in, 0.0);
    return g;
}

// Accumulates into `grads` (so several upstream signals can be folded into
// one buffer); masks are constants, exactly as during the forward pass.
inline void ffn_backward(const Ffn& net, const FfnTrace& trace,
                         const std::vector<double>& upstream,
                         GradientBuffer& grads,
                         const DropoutMask* mask = nullptr) {
    if (trace.pre.size() != net.size() || trace.post.size() != net.size())
        throw ConfigError("ffn_backward: trace/layer mismatch");
    if (upstream.size() != net.back().out)
        throw ConfigError("ffn_backward: upstream size mismatch");
    if (grads.layers.size() != net.size())
        throw ConfigError("ffn_backward: gradient buffer shape mismatch");

    std::vector<double> d = upstream;  // dL/d(post-activation of layer l)
    for (std::size_t li = net.size(); li-- > 0;) {
        const auto& layer = net[li];
        const bool masked = mask && li < mask->keep.size();
        std::vector<double> dz(layer.out);
        for (std::size_t o = 0; o < layer.out; ++o) {
            double g = d[o];
            if (masked) g = mask->keep[li][o] ? g * mask->scale : 0.0;
            dz[o] = g * activation_grad(layer.act, trace.pre[li][o]);
        }
        const std::vector<double>& a_prev =
            li == 0 ? trace.input : trace.post[li - 1];
        auto& lg = grads.layers[li];
        for (std::size_t o = 0; o < layer.out; ++o) {
            lg.b[o] += dz[o];
            double* gw = lg.w.data() + o * layer.in;
            for (std::size_t i = 0; i < layer.in; ++i) gw[i] += dz[o] * a_prev[i];
        }
        std::vector<double> dprev(layer.in, 0.0);
        for (std::size_t o = 0; o < layer.out; ++o) {
            const double* wrow = layer.w.data() + o * layer.in;
            for (std::size_t i = 0; i < layer.in; ++i) dprev[i] += wrow[i] * dz[o];
        }
        d = std::move(dprev);
    }
    for (std::size_t i = 0; i < d.size(); ++i) grads.input[i] += d[i];
}

// strength * mean of squared weight entries (biases excluded).
inline double l2_penalty(const Ffn& net, double strength) {
    if (strength < 0.0) throw ConfigError("l2 strength must be nonnegative");
    double sum_sq = 0.0;
    std::size_t count = 0;
    for (const auto& layer : net) {
        for (double w : layer.w) sum_sq += w * w;
        count += layer.w.size();
    }
    return count == 0 ? 0.0 : strength * sum_sq / static_cast<double>(count);
}

// Gradient of l2_penalty: 2*strength*w/count per weight entry.
inline void l2_penalty_grad(const Ffn& net, double strength, GradientBuffer& grads) {
    std::size_t count = 0;
    for (const auto& layer : net) count += layer.w.size();
    if (count == 0 || strength == 0.0) return;
    const double c = 2.0 * strength / static_cast<double>(count);
    for (std::size_t l = 0; l < net.size(); ++l)
        for (std::size_t i = 0; i < net[l].w.size(); ++i)
            grads.layers[l].w[i] += c * net[l].w[i];
}

inline std::size_t param_count(const Ffn& net) {
    std::size_t n = 0;
    for (const auto& layer : net) n += layer.w.size() + layer.b.size();
    return n;
}

}  // namespace ctirf
