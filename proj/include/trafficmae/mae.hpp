#pragma once

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <map>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "trafficmae/adapters.hpp"
#include "trafficmae/serialize.hpp"

namespace tmae {

struct MAEConfig {
    std::size_t l1 = 32;
    std::size_t l2 = 512;
    std::size_t l3 = 256;
    std::size_t l4 = 64;
    int epochs = 150;
    std::size_t batch_size = 64;
    double lr = 1e-3;
    std::uint64_t seed = 1;
};

/// Whole-dataset multimodal input, keyed by adapter modality name. Every
/// modality must hold the same number of samples in the same order.
using MultimodalData = std::map<std::string, ModalityBatch>;

namespace detail {

inline ModalityBatch take_rows(const ModalityBatch& mb,
                               const std::vector<std::size_t>& idx) {
    ModalityBatch out;
    if (!mb.tokens.empty()) {
        out.tokens.reserve(idx.size());
        for (auto i : idx) out.tokens.push_back(mb.tokens[i]);
        return out;
    }
    const Shape& s = mb.values.shape();
    std::size_t row = 1;
    for (std::size_t d = 1; d < s.size(); ++d) row *= s[d];
    std::vector<double> v(idx.size() * row);
    for (std::size_t r = 0; r < idx.size(); ++r)
        std::copy_n(mb.values.value().data() + idx[r] * row, row, v.data() + r * row);
    Shape ns = s;
    ns[0] = idx.size();
    out.values = Tensor::from(std::move(v), std::move(ns));
    return out;
}

}  // namespace detail

/**
 * Adapters feeding a shared integration autoencoder. The n adapted l1-wide
 * codes are concatenated and funneled l2 -> l3 -> l4; the decoder mirrors the
 * funnel and fans back out to n slices of width l1, one per adapter decoder.
 * Per-modality reconstruction losses are weighted by feature count.
 */
class MultimodalAutoencoder {
public:
    MultimodalAutoencoder(std::vector<std::unique_ptr<Adapter>> adapters,
                          MAEConfig config, Rng& rng)
        : cfg_(config), adapters_(std::move(adapters)) {
        if (adapters_.empty())
            throw ConfigError("multimodal autoencoder needs at least one adapter");
        if (!(cfg_.l2 > cfg_.l3 && cfg_.l3 > cfg_.l4))
            throw ConfigError("integration widths must narrow: l2 > l3 > l4");
        for (const auto& a : adapters_)
            if (a->l1() != cfg_.l1)
                throw ConfigError("adapter '" + a->spec().modality +
                                  "' width differs from configured l1");
        std::map<std::string, int> seen;
        for (const auto& a : adapters_)
            if (++seen[a->spec().modality] > 1)
                throw ConfigError("duplicate adapter modality '" +
                                  a->spec().modality + "'");

        const std::size_t n = adapters_.size();
        enc_l2_ = DenseLayer(n * cfg_.l1, cfg_.l2, Activation::ReLU, rng);
        enc_l3_ = DenseLayer(cfg_.l2, cfg_.l3, Activation::ReLU, rng);
        enc_l4_ = DenseLayer(cfg_.l3, cfg_.l4, Activation::ReLU, rng);
        dec_l3_ = DenseLayer(cfg_.l4, cfg_.l3, Activation::ReLU, rng);
        dec_l2_ = DenseLayer(cfg_.l3, cfg_.l2, Activation::ReLU, rng);
        fanout_ = DenseLayer(cfg_.l2, n * cfg_.l1, Activation::ReLU, rng);

        double total = 0.0;
        for (const auto& a : adapters_) total += static_cast<double>(a->spec().feature_count);
        for (const auto& a : adapters_)
            loss_weights_.push_back(static_cast<double>(a->spec().feature_count) / total);
    }

    const MAEConfig& config() const { return cfg_; }
    const std::vector<std::unique_ptr<Adapter>>& adapters() const { return adapters_; }
    const std::vector<double>& loss_weights() const { return loss_weights_; }

    /// Gather one batch, checking that every modality is present and aligned.
    std::vector<ModalityBatch> gather(const MultimodalData& data,
                                      const std::vector<std::size_t>& idx) const {
        std::vector<ModalityBatch> out;
        out.reserve(adapters_.size());
        for (const auto& a : adapters_) {
            auto it = data.find(a->spec().modality);
            if (it == data.end())
                throw DataError("modality '" + a->spec().modality +
                                "' missing from input data");
            out.push_back(detail::take_rows(it->second, idx));
        }
        return out;
    }

    std::size_t sample_count(const MultimodalData& data) const {
        std::size_t n = 0;
        bool first = true;
        for (const auto& a : adapters_) {
            auto it = data.find(a->spec().modality);
            if (it == data.end())
                throw DataError("modality '" + a->spec().modality +
                                "' missing from input data");
            const std::size_t bn = it->second.batch_size();
            if (first) {
                n = bn;
                first = false;
            } else if (bn != n) {
                throw DataError("modality '" + a->spec().modality + "' has " +
                                std::to_string(bn) + " samples, expected " +
                                std::to_string(n));
            }
        }
        return n;
    }

    /// Deep representation for a prepared batch, [B x l4].
    Tensor encode(const std::vector<ModalityBatch>& batch) const {
        std::vector<Tensor> codes;
        codes.reserve(adapters_.size());
        for (std::size_t i = 0; i < adapters_.size(); ++i)
            codes.push_back(adapters_[i]->encode(batch[i]));
        return enc_l4_.forward(enc_l3_.forward(enc_l2_.forward(concat_cols(codes))));
    }

    /// Per-modality reconstructions from a deep code, adapter order.
    std::vector<Tensor> decode(const Tensor& code) const {
        Tensor wide = fanout_.forward(dec_l2_.forward(dec_l3_.forward(code)));
        std::vector<Tensor> out;
        out.reserve(adapters_.size());
        for (std::size_t i = 0; i < adapters_.size(); ++i)
            out.push_back(adapters_[i]->decode(
                slice_cols(wide, i * cfg_.l1, cfg_.l1)));
        return out;
    }

    /// Feature-count-weighted reconstruction loss over a prepared batch.
    Tensor reconstruction_loss(const std::vector<ModalityBatch>& batch) const {
        std::vector<Tensor> recon = decode(encode(batch));
        Tensor total;
        for (std::size_t i = 0; i < adapters_.size(); ++i) {
            Tensor target = adapters_[i]->reconstruction_target(batch[i]);
            auto mask = adapters_[i]->loss_mask(batch[i]);
            Tensor part = mask ? loss_mse_masked(target, recon[i], mask)
                               : loss_mse(target, recon[i]);
            Tensor weighted = scale(part, loss_weights_[i]);
            total = i == 0 ? weighted : add(total, weighted);
        }
        return total;
    }

    ParamList params() const {
        ParamList out;
        for (const auto& a : adapters_)
            a->collect_params("adapter." + a->spec().modality + ".", out);
        enc_l2_.collect("integration.enc_l2", out);
        enc_l3_.collect("integration.enc_l3", out);
        enc_l4_.collect("integration.enc_l4", out);
        dec_l3_.collect("integration.dec_l3", out);
        dec_l2_.collect("integration.dec_l2", out);
        fanout_.collect("integration.fanout", out);
        return out;
    }

    std::size_t trainable_count() const { return count_scalars(params()); }

private:
    MAEConfig cfg_;
    std::vector<std::unique_ptr<Adapter>> adapters_;
    DenseLayer enc_l2_, enc_l3_, enc_l4_, dec_l3_, dec_l2_, fanout_;
    std::vector<double> loss_weights_;
};

inline MultimodalAutoencoder assemble_mae(
    std::vector<std::unique_ptr<Adapter>> adapters, const MAEConfig& config, Rng& rng) {
    return MultimodalAutoencoder(std::move(adapters), config, rng);
}

struct MAETrainResult {
    std::vector<double> epoch_loss;  // mean weighted batch loss per epoch
};

/// Minibatch Adam training of the full stack. Deterministic for a fixed
/// config seed: shuffling is the only source of randomness.
inline MAETrainResult train_mae(MultimodalAutoencoder& model, const MultimodalData& data,
                                int epochs_override = -1) {
    const MAEConfig& cfg = model.config();
    const std::size_t N = model.sample_count(data);
    if (N == 0) throw DataError("train_mae: empty dataset");
    const int epochs = epochs_override >= 0 ? epochs_override : cfg.epochs;

    auto params = param_tensors(model.params());
    AdamState adam;
    adam.lr = cfg.lr;
    Rng rng(cfg.seed);

    std::vector<std::size_t> order(N);
    std::iota(order.begin(), order.end(), 0);

    MAETrainResult result;
    for (int epoch = 0; epoch < epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < N; start += cfg.batch_size) {
            const std::size_t end = std::min(N, start + cfg.batch_size);
            std::vector<std::size_t> idx(order.begin() + start, order.begin() + end);
            auto batch = model.gather(data, idx);
            Tensor loss = model.reconstruction_loss(batch);
            zero_grads(params);
            backprop(loss);
            adam_step(params, adam);
            loss_sum += loss.item();
            ++batches;
        }
        result.epoch_loss.push_back(batches ? loss_sum / batches : 0.0);
    }
    return result;
}

struct EmbeddingSet {
    std::vector<std::string> ids;
    std::size_t dim = 0;
    std::vector<double> values;  // row-major ids.size() x dim

    const double* row(std::size_t i) const { return values.data() + i * dim; }
};

/// Deep codes for every sample, computed in deterministic chunks.
inline EmbeddingSet embed_dataset(const MultimodalAutoencoder& model,
                                  const MultimodalData& data,
                                  const std::vector<std::string>& ids,
                                  std::size_t chunk = 256) {
    const std::size_t N = model.sample_count(data);
    if (ids.size() != N)
        throw ArgumentError("embed_dataset: id count does not match sample count");
    EmbeddingSet out;
    out.ids = ids;
    out.dim = model.config().l4;
    out.values.reserve(N * out.dim);
    for (std::size_t start = 0; start < N; start += chunk) {
        const std::size_t end = std::min(N, start + chunk);
        std::vector<std::size_t> idx(end - start);
        std::iota(idx.begin(), idx.end(), start);
        Tensor code = model.encode(model.gather(data, idx));
        out.values.insert(out.values.end(), code.value().begin(), code.value().end());
    }
    return out;
}

inline void write_embeddings_csv(const std::string& path, const EmbeddingSet& e) {
    std::FILE* f = std::fopen(path.c_str(), "w");
    if (!f) throw DataError("write_embeddings_csv: cannot open " + path);
    std::fputs("sample_id", f);
    for (std::size_t d = 0; d < e.dim; ++d) std::fprintf(f, ",e%zu", d);
    std::fputc('\n', f);
    for (std::size_t i = 0; i < e.ids.size(); ++i) {
        std::fputs(e.ids[i].c_str(), f);
        for (std::size_t d = 0; d < e.dim; ++d)
            std::fprintf(f, ",%.17g", e.row(i)[d]);
        std::fputc('\n', f);
    }
    std::fclose(f);
}

inline EmbeddingSet read_embeddings_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("read_embeddings_csv: cannot open " + path);
    std::string line;
    if (!std::getline(is, line) || line.rfind("sample_id,", 0) != 0)
        throw ParseError("embeddings csv: bad header in " + path);
    EmbeddingSet out;
    out.dim = static_cast<std::size_t>(std::count(line.begin(), line.end(), ','));
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::size_t pos = line.find(',');
        if (pos == std::string::npos)
            throw ParseError("embeddings csv: no values at line " +
                             std::to_string(lineno));
        out.ids.push_back(line.substr(0, pos));
        std::size_t count = 0;
        const char* p = line.c_str() + pos;
        while (*p == ',') {
            char* endp = nullptr;
            out.values.push_back(std::strtod(p + 1, &endp));
            if (endp == p + 1)
                throw ParseError("embeddings csv: bad number at line " +
                                 std::to_string(lineno));
            p = endp;
            ++count;
        }
        if (count != out.dim)
            throw ParseError("embeddings csv: expected " + std::to_string(out.dim) +
                             " values at line " + std::to_string(lineno));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Model persistence
// ---------------------------------------------------------------------------

inline void save_model(const MultimodalAutoencoder& model, const std::string& path) {
    Container c;
    c.kind = "mae";
    const MAEConfig& cfg = model.config();
    c.config = {{"l1", cfg.l1},     {"l2", cfg.l2},
                {"l3", cfg.l3},     {"l4", cfg.l4},
                {"epochs", cfg.epochs}, {"batch_size", cfg.batch_size},
                {"lr", cfg.lr},     {"seed", cfg.seed}};
    c.config["adapters"] = nlohmann::json::array();
    for (const auto& a : model.adapters()) {
        const AdapterSpec& s = a->spec();
        c.config["adapters"].push_back({{"kind", s.kind},
                                        {"modality", s.modality},
                                        {"input_shape", s.input_shape},
                                        {"l1", s.l1}});
    }
    for (const auto& [name, t] : model.params())
        c.arrays.push_back({name, t.shape(), t.value()});
    write_container(path, c);
}

inline std::unique_ptr<Adapter> rebuild_adapter(const nlohmann::json& e, Rng& rng) {
    const std::string kind = e.at("kind").get<std::string>();
    const Shape shape = e.at("input_shape").get<Shape>();
    const std::size_t l1 = e.at("l1").get<std::size_t>();
    if (kind == "payload") return build_payload_adapter(l1, rng);
    if (kind == "stats") return build_stats_adapter(shape.at(0), l1, rng);
    if (kind == "sequence")
        return build_sequence_adapter(shape.at(0), shape.at(1), l1, rng);
    if (kind == "subnet") return build_subnet_adapter(l1, rng);
    if (kind == "entity")
        return build_entity_adapter(shape.at(0), l1, rng,
                                    e.at("modality").get<std::string>());
    throw CorruptionError("unknown adapter kind '" + kind + "' in saved model");
}

inline MultimodalAutoencoder load_model(const std::string& path) {
    Container c = read_container(path);
    if (c.kind != "mae")
        throw CorruptionError("expected a model container, found kind '" + c.kind + "'");
    MAEConfig cfg;
    cfg.l1 = c.config.at("l1").get<std::size_t>();
    cfg.l2 = c.config.at("l2").get<std::size_t>();
    cfg.l3 = c.config.at("l3").get<std::size_t>();
    cfg.l4 = c.config.at("l4").get<std::size_t>();
    cfg.epochs = c.config.value("epochs", cfg.epochs);
    cfg.batch_size = c.config.value("batch_size", cfg.batch_size);
    cfg.lr = c.config.value("lr", cfg.lr);
    cfg.seed = c.config.value("seed", cfg.seed);

    Rng rng(cfg.seed);
    std::vector<std::unique_ptr<Adapter>> adapters;
    for (const auto& e : c.config.at("adapters"))
        adapters.push_back(rebuild_adapter(e, rng));
    MultimodalAutoencoder model(std::move(adapters), cfg, rng);

    std::map<std::string, Tensor> by_name;
    for (const auto& [name, t] : model.params()) by_name.emplace(name, t);
    for (const auto& a : c.arrays) {
        auto it = by_name.find(a.name);
        if (it == by_name.end())
            throw CorruptionError("saved model has unknown array '" + a.name + "'");
        Tensor& t = it->second;
        if (t.shape() != a.shape)
            throw CorruptionError("shape mismatch for array '" + a.name + "'");
        t.mutable_value() = a.data;
        by_name.erase(it);
    }
    if (!by_name.empty())
        throw CorruptionError("saved model is missing array '" +
                              by_name.begin()->first + "'");
    return model;
}

}  // namespace tmae
