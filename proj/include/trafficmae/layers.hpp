#pragma once

#include <string>
#include <utility>
#include <vector>

#include "trafficmae/tensor.hpp"

namespace tmae {

/// Named parameter list. Registration order is fixed and drives the
/// optimizer, serialization, and parameter counting.
using ParamList = std::vector<std::pair<std::string, Tensor>>;

inline std::vector<Tensor> param_tensors(const ParamList& params) {
    std::vector<Tensor> out;
    out.reserve(params.size());
    for (const auto& [name, t] : params) out.push_back(t);
    return out;
}

inline std::size_t count_scalars(const ParamList& params) {
    std::size_t n = 0;
    for (const auto& [name, t] : params) n += t.size();
    return n;
}

class DenseLayer {
public:
    DenseLayer() = default;
    DenseLayer(std::size_t in, std::size_t out, Activation act, Rng& rng)
        : act_(act),
          W_(glorot_uniform({out, in}, in, out, rng)),
          b_(Tensor::zeros({out}, true)) {}

    Tensor forward(const Tensor& x) const { return dense(x, W_, b_, act_); }

    std::size_t in_dim() const { return W_.dim(1); }
    std::size_t out_dim() const { return W_.dim(0); }
    Activation activation() const { return act_; }

    void collect(const std::string& prefix, ParamList& out) const {
        out.emplace_back(prefix + ".W", W_);
        out.emplace_back(prefix + ".b", b_);
    }

private:
    Activation act_ = Activation::Linear;
    Tensor W_, b_;
};

class Conv1dLayer {
public:
    Conv1dLayer() = default;
    Conv1dLayer(std::size_t filters, std::size_t kernel, std::size_t channels_in,
                Activation act, bool same_padding, Rng& rng)
        : act_(act),
          same_(same_padding),
          K_(glorot_uniform({filters, kernel, channels_in}, kernel * channels_in,
                            filters, rng)),
          b_(Tensor::zeros({filters}, true)) {}

    Tensor forward(const Tensor& x) const { return conv1d(x, K_, b_, act_, same_); }

    std::size_t filters() const { return K_.dim(0); }
    std::size_t kernel() const { return K_.dim(1); }

    void collect(const std::string& prefix, ParamList& out) const {
        out.emplace_back(prefix + ".K", K_);
        out.emplace_back(prefix + ".b", b_);
    }

private:
    Activation act_ = Activation::Linear;
    bool same_ = false;
    Tensor K_, b_;
};

class GruLayer {
public:
    GruLayer() = default;
    GruLayer(std::size_t input, std::size_t hidden, bool return_sequences, Rng& rng)
        : return_sequences_(return_sequences) {
        p_.W_c = glorot_uniform({hidden, input}, input, hidden, rng);
        p_.W_r = glorot_uniform({hidden, input}, input, hidden, rng);
        p_.W = glorot_uniform({hidden, input}, input, hidden, rng);
        p_.U_c = glorot_uniform({hidden, hidden}, hidden, hidden, rng);
        p_.U_r = glorot_uniform({hidden, hidden}, hidden, hidden, rng);
        p_.U = glorot_uniform({hidden, hidden}, hidden, hidden, rng);
    }

    /**
     * x: [B x T x F]. Optional step mask (B*T, 1 keeps the update, 0 carries
     * the previous hidden state through). Returns [B x T x E] when
     * return_sequences, else the last hidden state [B x E].
     */
    Tensor forward(const Tensor& x, const std::vector<double>* mask = nullptr) const {
        const std::size_t B = x.dim(0), T = x.dim(1);
        Tensor h = Tensor::zeros({B, p_.hidden()});
        std::vector<Tensor> steps;
        if (return_sequences_) steps.reserve(T);
        for (std::size_t t = 0; t < T; ++t) {
            Tensor h_new = gru_step(time_slice(x, t), h, p_);
            if (mask) {
                std::vector<double> m(B);
                for (std::size_t b = 0; b < B; ++b) m[b] = (*mask)[b * T + t];
                Tensor mt = Tensor::from(std::move(m), {B});
                h = add(mul_colvec(h_new, mt), mul_colvec(h, affine(mt, -1.0, 1.0)));
            } else {
                h = h_new;
            }
            if (return_sequences_) steps.push_back(h);
        }
        return return_sequences_ ? stack_time(steps) : h;
    }

    std::size_t hidden() const { return p_.hidden(); }
    const GruParams& params() const { return p_; }

    void collect(const std::string& prefix, ParamList& out) const {
        out.emplace_back(prefix + ".W_c", p_.W_c);
        out.emplace_back(prefix + ".W_r", p_.W_r);
        out.emplace_back(prefix + ".W", p_.W);
        out.emplace_back(prefix + ".U_c", p_.U_c);
        out.emplace_back(prefix + ".U_r", p_.U_r);
        out.emplace_back(prefix + ".U", p_.U);
    }

private:
    bool return_sequences_ = false;
    GruParams p_;
};

class EmbeddingLayer {
public:
    EmbeddingLayer() = default;
    EmbeddingLayer(std::size_t vocab, std::size_t dim, int mask_value, Rng& rng)
        : mask_value_(mask_value),
          W_(glorot_uniform({vocab, dim}, vocab, dim, rng)) {}

    EmbeddingLookup forward(const std::vector<std::vector<int>>& tokens) const {
        return embedding_lookup(tokens, W_, mask_value_);
    }

    std::size_t vocab() const { return W_.dim(0); }
    std::size_t dim() const { return W_.dim(1); }

    void collect(const std::string& prefix, ParamList& out) const {
        out.emplace_back(prefix + ".W", W_);
    }

private:
    int mask_value_ = 0;
    Tensor W_;
};

/// Inverted dropout; active only when `training` and p > 0.
inline Tensor dropout(const Tensor& x, double p, bool training, Rng& rng) {
    if (!training || p <= 0.0) return x;
    if (p >= 1.0) throw ArgumentError("dropout: rate must be < 1");
    std::uniform_real_distribution<double> dist(0.0, 1.0);
    auto keep = std::make_shared<std::vector<double>>(x.size());
    const double inv = 1.0 / (1.0 - p);
    for (auto& k : *keep) k = dist(rng) < p ? 0.0 : inv;
    auto node = detail::make_node(x.shape(), {x.node()});
    for (std::size_t i = 0; i < x.size(); ++i)
        node->value[i] = x.value()[i] * (*keep)[i];
    TensorNode* out = node.get();
    auto xn = x.node();
    node->backward_fn = [out, xn, keep]() {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t i = 0; i < out->grad.size(); ++i)
            xn->grad[i] += out->grad[i] * (*keep)[i];
    };
    return Tensor(node);
}

}  // namespace tmae
