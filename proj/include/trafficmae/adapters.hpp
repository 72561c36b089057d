#pragma once

#include <memory>
#include <string>
#include <vector>

#include "trafficmae/layers.hpp"
#include "trafficmae/tensor.hpp"

namespace tmae {

/// One batch of raw measurements for a single modality. Numeric modalities
/// fill `values`; the payload modality carries token ids instead.
struct ModalityBatch {
    Tensor values;
    std::vector<std::vector<int>> tokens;

    std::size_t batch_size() const {
        return tokens.empty() ? values.dim(0) : tokens.size();
    }
};

struct AdapterSpec {
    std::string kind;                // payload | stats | sequence | subnet | entity
    std::string modality;            // payload | statistics | sequences | subnet | entity
    Shape input_shape;               // per-sample raw shape
    std::size_t l1 = 32;             // adapted representation width
    std::size_t feature_count = 0;   // reconstructed scalar count, drives loss weights
    std::vector<std::string> layers; // human-readable stack description
};

/**
 * Per-modality encoder/decoder pair projecting one raw measurement type into
 * the shared l1-dimensional space and back. Encoder output is always
 * [B x l1]; decoder output matches the raw input shape. Decoder output
 * layers are linear.
 */
class Adapter {
public:
    virtual ~Adapter() = default;

    const AdapterSpec& spec() const { return spec_; }
    std::size_t l1() const { return spec_.l1; }

    /// Adapted representation, [B x l1].
    virtual Tensor encode(const ModalityBatch& input) const = 0;

    /// Reconstruction from an l1-dimensional code, [B x input_shape].
    virtual Tensor decode(const Tensor& code) const = 0;

    /// Target tensor the decoder output is compared against.
    virtual Tensor reconstruction_target(const ModalityBatch& input) const {
        return input.values;
    }

    /// Optional per-element loss weights (payload masks padded positions).
    virtual std::shared_ptr<std::vector<double>> loss_mask(const ModalityBatch&) const {
        return nullptr;
    }

    virtual void collect_params(const std::string& prefix, ParamList& out) const = 0;

    Activation decoder_output_activation() const { return Activation::Linear; }

protected:
    AdapterSpec spec_;
};

// ---------------------------------------------------------------------------
// Payload: Embedding(257, 64) + Masking(0) + GRU(64) + GRU(32) + Dense stack;
// decoder rebuilds the 32 normalized byte values through a repeated-code GRU.
// ---------------------------------------------------------------------------
class PayloadAdapter final : public Adapter {
public:
    static constexpr std::size_t kTokens = 32;
    static constexpr std::size_t kVocab = 257;  // bytes 0..255 shifted by 1, pad 0
    static constexpr std::size_t kEmbedDim = 64;

    PayloadAdapter(std::size_t l1, Rng& rng)
        : embedding_(kVocab, kEmbedDim, 0, rng),
          gru1_(kEmbedDim, 64, true, rng),
          gru2_(64, 32, false, rng),
          enc1_(32, 64, Activation::ReLU, rng),
          enc2_(64, l1, Activation::ReLU, rng),
          dec1_(l1, l1, Activation::ReLU, rng),
          dec2_(l1, 64, Activation::ReLU, rng),
          dec_gru_(64, 64, true, rng),
          dec_out_(64, 1, Activation::Linear, rng) {
        spec_.kind = "payload";
        spec_.modality = "payload";
        spec_.input_shape = {kTokens, 1};
        spec_.l1 = l1;
        spec_.feature_count = kTokens;
        spec_.layers = {"Embedding(257,64)", "Masking(0)", "GRU(64,seq)",
                        "GRU(32)", "Dense(64,relu)", "Dense(l1,relu)",
                        "Dense(l1,relu)", "Dense(64,relu)", "Repeat(32)",
                        "GRU(64,seq)", "TimeDistributedDense(1,linear)"};
    }

    Tensor encode(const ModalityBatch& input) const override {
        if (input.tokens.empty())
            throw ShapeError("payload adapter expects token input");
        for (const auto& row : input.tokens)
            if (row.size() != kTokens)
                throw ShapeError("payload adapter expects 32 tokens per sample");
        auto lk = embedding_.forward(input.tokens);
        Tensor seq = gru1_.forward(lk.output, &lk.mask);
        Tensor last = gru2_.forward(seq, &lk.mask);
        return enc2_.forward(enc1_.forward(last));
    }

    Tensor decode(const Tensor& code) const override {
        Tensor h = dec2_.forward(dec1_.forward(code));
        Tensor seq = dec_gru_.forward(repeat_vector(h, kTokens));
        const std::size_t B = code.dim(0);
        Tensor flat = reshape(seq, {B * kTokens, 64});
        return reshape(dec_out_.forward(flat), {B, kTokens, 1});
    }

    Tensor reconstruction_target(const ModalityBatch& input) const override {
        const std::size_t B = input.tokens.size();
        std::vector<double> target(B * kTokens);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t t = 0; t < kTokens; ++t) {
                const int tok = input.tokens[b][t];
                target[b * kTokens + t] = tok > 0 ? (tok - 1) / 255.0 : 0.0;
            }
        return Tensor::from(std::move(target), {B, kTokens, 1});
    }

    std::shared_ptr<std::vector<double>> loss_mask(const ModalityBatch& input) const override {
        const std::size_t B = input.tokens.size();
        auto mask = std::make_shared<std::vector<double>>(B * kTokens);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t t = 0; t < kTokens; ++t)
                (*mask)[b * kTokens + t] = input.tokens[b][t] != 0 ? 1.0 : 0.0;
        return mask;
    }

    void collect_params(const std::string& p, ParamList& out) const override {
        embedding_.collect(p + "embedding", out);
        gru1_.collect(p + "enc_gru1", out);
        gru2_.collect(p + "enc_gru2", out);
        enc1_.collect(p + "enc_dense1", out);
        enc2_.collect(p + "enc_dense2", out);
        dec1_.collect(p + "dec_dense1", out);
        dec2_.collect(p + "dec_dense2", out);
        dec_gru_.collect(p + "dec_gru", out);
        dec_out_.collect(p + "dec_out", out);
    }

private:
    EmbeddingLayer embedding_;
    GruLayer gru1_, gru2_;
    DenseLayer enc1_, enc2_, dec1_, dec2_;
    GruLayer dec_gru_;
    DenseLayer dec_out_;
};

// ---------------------------------------------------------------------------
// Statistics: a single fully connected projection each way.
// ---------------------------------------------------------------------------
class StatsAdapter final : public Adapter {
public:
    StatsAdapter(std::size_t n_stats, std::size_t l1, Rng& rng)
        : enc_(n_stats, l1, Activation::ReLU, rng),
          dec_(l1, n_stats, Activation::Linear, rng) {
        spec_.kind = "stats";
        spec_.modality = "statistics";
        spec_.input_shape = {n_stats};
        spec_.l1 = l1;
        spec_.feature_count = n_stats;
        spec_.layers = {"Dense(l1,relu)", "Dense(n_stats,linear)"};
    }

    Tensor encode(const ModalityBatch& input) const override {
        return enc_.forward(input.values);
    }
    Tensor decode(const Tensor& code) const override { return dec_.forward(code); }

    void collect_params(const std::string& p, ParamList& out) const override {
        enc_.collect(p + "enc", out);
        dec_.collect(p + "dec", out);
    }

private:
    DenseLayer enc_, dec_;
};

// ---------------------------------------------------------------------------
// Sequences: Conv1D(32, kernel 3) + MaxPool(2) + Dense(l1); decoder widens
// back through same-length convolutions and upsampling to k x channels.
// ---------------------------------------------------------------------------
class SequenceAdapter final : public Adapter {
public:
    SequenceAdapter(std::size_t k, std::size_t channels, std::size_t l1, Rng& rng)
        : k_(k), channels_(channels) {
        if (k < 3) throw ShapeError("sequence adapter needs k >= 3");
        conv_out_ = k - 2;
        if (conv_out_ < 2) throw ShapeError("sequence adapter needs k >= 4 for pooling");
        pooled_ = (conv_out_ - 2) / 2 + 1;
        flat_ = pooled_ * 32;

        enc_conv_ = Conv1dLayer(32, 3, channels, Activation::ReLU, false, rng);
        enc_dense_ = DenseLayer(flat_, l1, Activation::ReLU, rng);
        dec1_ = DenseLayer(l1, l1, Activation::ReLU, rng);
        dec2_ = DenseLayer(l1, flat_, Activation::ReLU, rng);
        dec_conv1_ = Conv1dLayer(32, 3, 32, Activation::ReLU, true, rng);
        dec_conv2_ = Conv1dLayer(4, 3, 32, Activation::ReLU, true, rng);
        dec_out_ = DenseLayer(pooled_ * 4 * 4, k * channels, Activation::Linear, rng);

        spec_.kind = "sequence";
        spec_.modality = "sequences";
        spec_.input_shape = {k, channels};
        spec_.l1 = l1;
        spec_.feature_count = k * channels;
        spec_.layers = {"Conv1D(32,3,relu)", "MaxPool1D(2)", "Flatten",
                        "Dense(l1,relu)", "Dense(l1,relu)",
                        "Dense(" + std::to_string(flat_) + ",relu)",
                        "Conv1D(32,3,same,relu)", "UpSampling1D(2)",
                        "Conv1D(4,3,same,relu)", "UpSampling1D(2)",
                        "Dense(kxchannels,linear)"};
    }

    Tensor encode(const ModalityBatch& input) const override {
        const Tensor& x = input.values;  // [B x k x channels]
        if (x.rank() != 3 || x.dim(1) != k_ || x.dim(2) != channels_)
            throw ShapeError("sequence adapter expects [B x " + std::to_string(k_) +
                             " x " + std::to_string(channels_) + "] input");
        Tensor pooled = maxpool1d(enc_conv_.forward(x), 2, 2);
        return enc_dense_.forward(reshape(pooled, {x.dim(0), flat_}));
    }

    Tensor decode(const Tensor& code) const override {
        const std::size_t B = code.dim(0);
        Tensor h = dec2_.forward(dec1_.forward(code));
        Tensor grid = reshape(h, {B, pooled_, 32});
        Tensor up1 = upsample1d(dec_conv1_.forward(grid), 2);
        Tensor up2 = upsample1d(dec_conv2_.forward(up1), 2);
        Tensor flat = reshape(up2, {B, pooled_ * 4 * 4});
        return reshape(dec_out_.forward(flat), {B, k_, channels_});
    }

    void collect_params(const std::string& p, ParamList& out) const override {
        enc_conv_.collect(p + "enc_conv", out);
        enc_dense_.collect(p + "enc_dense", out);
        dec1_.collect(p + "dec_dense1", out);
        dec2_.collect(p + "dec_dense2", out);
        dec_conv1_.collect(p + "dec_conv1", out);
        dec_conv2_.collect(p + "dec_conv2", out);
        dec_out_.collect(p + "dec_out", out);
    }

    std::size_t flat_width() const { return flat_; }

private:
    std::size_t k_, channels_, conv_out_ = 0, pooled_ = 0, flat_ = 0;
    Conv1dLayer enc_conv_;
    DenseLayer enc_dense_, dec1_, dec2_;
    Conv1dLayer dec_conv1_, dec_conv2_;
    DenseLayer dec_out_;
};

// ---------------------------------------------------------------------------
// Subnet: four normalized octets through a two-GRU encoder; decoder repeats
// the code four times and regresses one value per octet.
// ---------------------------------------------------------------------------
class SubnetAdapter final : public Adapter {
public:
    static constexpr std::size_t kOctets = 4;

    SubnetAdapter(std::size_t l1, Rng& rng)
        : gru1_(1, 32, true, rng),
          gru2_(32, 32, false, rng),
          enc1_(32, 64, Activation::ReLU, rng),
          enc2_(64, l1, Activation::ReLU, rng),
          dec1_(l1, l1, Activation::ReLU, rng),
          dec2_(l1, 64, Activation::ReLU, rng),
          dec_gru_(64, 32, true, rng),
          dec_out_(32, 1, Activation::Linear, rng) {
        spec_.kind = "subnet";
        spec_.modality = "subnet";
        spec_.input_shape = {kOctets, 1};
        spec_.l1 = l1;
        spec_.feature_count = kOctets;
        spec_.layers = {"GRU(32,seq)", "GRU(32)", "Dense(64,relu)", "Dense(l1,relu)",
                        "Dense(l1,relu)", "Dense(64,relu)", "Repeat(4)",
                        "GRU(32,seq)", "TimeDistributedDense(1,linear)"};
    }

    Tensor encode(const ModalityBatch& input) const override {
        const Tensor& x = input.values;
        if (x.rank() != 3 || x.dim(1) != kOctets || x.dim(2) != 1)
            throw ShapeError("subnet adapter expects [B x 4 x 1] input");
        Tensor last = gru2_.forward(gru1_.forward(x));
        return enc2_.forward(enc1_.forward(last));
    }

    Tensor decode(const Tensor& code) const override {
        const std::size_t B = code.dim(0);
        Tensor h = dec2_.forward(dec1_.forward(code));
        Tensor seq = dec_gru_.forward(repeat_vector(h, kOctets));
        Tensor flat = reshape(seq, {B * kOctets, 32});
        return reshape(dec_out_.forward(flat), {B, kOctets, 1});
    }

    void collect_params(const std::string& p, ParamList& out) const override {
        gru1_.collect(p + "enc_gru1", out);
        gru2_.collect(p + "enc_gru2", out);
        enc1_.collect(p + "enc_dense1", out);
        enc2_.collect(p + "enc_dense2", out);
        dec1_.collect(p + "dec_dense1", out);
        dec2_.collect(p + "dec_dense2", out);
        dec_gru_.collect(p + "dec_gru", out);
        dec_out_.collect(p + "dec_out", out);
    }

private:
    GruLayer gru1_, gru2_;
    DenseLayer enc1_, enc2_, dec1_, dec2_;
    GruLayer dec_gru_;
    DenseLayer dec_out_;
};

// ---------------------------------------------------------------------------
// Entity: a dense projection over the pre-trained, frozen embedding vector.
// ---------------------------------------------------------------------------
class EntityAdapter final : public Adapter {
public:
    EntityAdapter(std::size_t embedding_dim, std::size_t l1, Rng& rng,
                  const std::string& entity_name = "entity")
        : enc_(embedding_dim, l1, Activation::ReLU, rng),
          dec_(l1, embedding_dim, Activation::Linear, rng) {
        spec_.kind = "entity";
        spec_.modality = entity_name;
        spec_.input_shape = {embedding_dim};
        spec_.l1 = l1;
        spec_.feature_count = embedding_dim;
        spec_.layers = {"Dense(l1,relu)", "Dense(E,linear)"};
    }

    Tensor encode(const ModalityBatch& input) const override {
        return enc_.forward(input.values);
    }
    Tensor decode(const Tensor& code) const override { return dec_.forward(code); }

    void collect_params(const std::string& p, ParamList& out) const override {
        enc_.collect(p + "enc", out);
        dec_.collect(p + "dec", out);
    }

private:
    DenseLayer enc_, dec_;
};

// ---------------------------------------------------------------------------
// Builders
// ---------------------------------------------------------------------------

inline std::unique_ptr<Adapter> build_payload_adapter(std::size_t l1, Rng& rng) {
    if (l1 < 1) throw ArgumentError("build_payload_adapter: l1 must be >= 1");
    return std::make_unique<PayloadAdapter>(l1, rng);
}

inline std::unique_ptr<Adapter> build_stats_adapter(std::size_t n_stats, std::size_t l1,
                                                    Rng& rng) {
    if (n_stats < 1) throw ArgumentError("build_stats_adapter: n_stats must be >= 1");
    return std::make_unique<StatsAdapter>(n_stats, l1, rng);
}

inline std::unique_ptr<Adapter> build_sequence_adapter(std::size_t k, std::size_t channels,
                                                       std::size_t l1, Rng& rng) {
    return std::make_unique<SequenceAdapter>(k, channels, l1, rng);
}

inline std::unique_ptr<Adapter> build_subnet_adapter(std::size_t l1, Rng& rng) {
    if (l1 < 1) throw ArgumentError("build_subnet_adapter: l1 must be >= 1");
    return std::make_unique<SubnetAdapter>(l1, rng);
}

inline std::unique_ptr<Adapter> build_entity_adapter(std::size_t embedding_dim,
                                                     std::size_t l1, Rng& rng,
                                                     const std::string& name = "entity") {
    if (embedding_dim < 1) throw ArgumentError("build_entity_adapter: E must be >= 1");
    return std::make_unique<EntityAdapter>(embedding_dim, l1, rng, name);
}

inline ParamList adapter_params(const Adapter& a) {
    ParamList out;
    a.collect_params("adapter." + a.spec().modality + ".", out);
    return out;
}

}  // namespace tmae
