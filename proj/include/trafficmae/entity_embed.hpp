#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "trafficmae/errors.hpp"
#include "trafficmae/tensor.hpp"

namespace tmae {

/// Token string <-> id map with occurrence counts. Ids are assigned by
/// descending frequency, ties broken lexically, so the mapping is
/// deterministic for a given input.
struct Vocabulary {
    std::vector<std::string> id_to_token;
    std::unordered_map<std::string, int> token_to_id;
    std::vector<std::int64_t> counts;

    std::size_t size() const { return id_to_token.size(); }

    int id_of(const std::string& token) const {
        auto it = token_to_id.find(token);
        return it == token_to_id.end() ? -1 : it->second;
    }
};

struct Corpus {
    std::vector<std::vector<int>> sentences;
    Vocabulary vocabulary;
};

/// One entity observation: who, against which service key, when.
struct EntityEvent {
    std::string entity;
    std::string service_key;
    double timestamp = 0.0;
};

inline Vocabulary build_vocabulary(const std::vector<std::vector<std::string>>& sentences,
                                   int min_count) {
    if (min_count < 1) throw ArgumentError("build_vocabulary: min_count must be >= 1");
    std::map<std::string, std::int64_t> freq;
    for (const auto& s : sentences)
        for (const auto& tok : s) ++freq[tok];

    std::vector<std::pair<std::string, std::int64_t>> kept;
    for (const auto& [tok, n] : freq)
        if (n >= min_count) kept.emplace_back(tok, n);
    std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });

    Vocabulary v;
    for (const auto& [tok, n] : kept) {
        v.token_to_id[tok] = static_cast<int>(v.id_to_token.size());
        v.id_to_token.push_back(tok);
        v.counts.push_back(n);
    }
    return v;
}

/// Tokenize sentences against a vocabulary, dropping OOV tokens.
inline Corpus make_corpus(const std::vector<std::vector<std::string>>& sentences,
                          int min_count = 1) {
    Corpus c;
    c.vocabulary = build_vocabulary(sentences, min_count);
    for (const auto& s : sentences) {
        std::vector<int> ids;
        for (const auto& tok : s) {
            const int id = c.vocabulary.id_of(tok);
            if (id >= 0) ids.push_back(id);
        }
        if (!ids.empty()) c.sentences.push_back(std::move(ids));
    }
    return c;
}

/**
 * Group events into co-occurrence sentences: one sentence per
 * (service_key, time-window bucket), entities ordered by timestamp.
 * Buckets are half-open and aligned to the earliest timestamp. A
 * window <= 0 puts every event of a service key into one sentence,
 * which is the per-sender sequence strategy when the service key is
 * the sender and the entity is the targeted port.
 */
inline std::vector<std::vector<std::string>> build_cooccurrence_sentences(
    std::vector<EntityEvent> events, double window_seconds) {
    if (events.empty()) return {};
    double t0 = events.front().timestamp;
    for (const auto& e : events) t0 = std::min(t0, e.timestamp);

    std::stable_sort(events.begin(), events.end(),
                     [](const EntityEvent& a, const EntityEvent& b) {
                         return a.timestamp < b.timestamp;
                     });

    std::map<std::pair<std::string, std::int64_t>, std::vector<std::string>> groups;
    for (const auto& e : events) {
        const std::int64_t bucket =
            window_seconds > 0.0
                ? static_cast<std::int64_t>(std::floor((e.timestamp - t0) / window_seconds))
                : 0;
        groups[{e.service_key, bucket}].push_back(e.entity);
    }
    std::vector<std::vector<std::string>> out;
    out.reserve(groups.size());
    for (auto& [key, sentence] : groups) out.push_back(std::move(sentence));
    return out;
}

inline Corpus build_cooccurrence_corpus(const std::vector<EntityEvent>& events,
                                        double window_seconds, int min_count = 1) {
    return make_corpus(build_cooccurrence_sentences(events, window_seconds), min_count);
}

/// All ordered (target, context) pairs within a half-window of c positions.
inline std::vector<std::pair<int, int>> generate_training_pairs(
    const std::vector<int>& sentence, int c) {
    if (c < 1) throw ArgumentError("generate_training_pairs: half-window must be >= 1");
    std::vector<std::pair<int, int>> pairs;
    const int n = static_cast<int>(sentence.size());
    for (int i = 0; i < n; ++i) {
        const int lo = std::max(0, i - c);
        const int hi = std::min(n - 1, i + c);
        for (int j = lo; j <= hi; ++j)
            if (j != i) pairs.emplace_back(sentence[i], sentence[j]);
    }
    return pairs;
}

/// Vocabulary-indexed entity vectors W in R^{N x E}.
struct EmbeddingMatrix {
    std::vector<double> W;  // row-major N x E
    std::size_t dimension = 0;
    Vocabulary vocabulary;

    std::size_t rows() const { return vocabulary.size(); }

    const double* row(std::size_t i) const { return W.data() + i * dimension; }
};

struct SkipgramConfig {
    std::size_t dimension = 64;
    int half_window = 5;
    int negatives = 5;
    int epochs = 50;
    double lr = 0.025;
    double lr_min = 1e-4;
    std::uint64_t seed = 1;
};

struct SkipgramResult {
    EmbeddingMatrix embeddings;
    std::vector<double> epoch_loss;  // negative-sampling objective, per-pair average
};

/**
 * Skip-gram with negative sampling. Negatives are drawn from the unigram
 * distribution raised to 0.75. Deterministic for a fixed seed: sentences and
 * pairs are visited in corpus order and all randomness flows from one
 * generator.
 */
inline SkipgramResult train_skipgram(const Corpus& corpus, const SkipgramConfig& cfg) {
    const std::size_t N = corpus.vocabulary.size();
    if (N == 0) throw DataError("train_skipgram: empty vocabulary");
    if (cfg.dimension < 1) throw ArgumentError("train_skipgram: dimension must be >= 1");
    const std::size_t E = cfg.dimension;

    Rng rng(cfg.seed);
    std::uniform_real_distribution<double> init(-0.5 / static_cast<double>(E),
                                                0.5 / static_cast<double>(E));
    std::vector<double> W(N * E);
    for (auto& w : W) w = init(rng);
    std::vector<double> Wo(N * E, 0.0);

    // cumulative unigram^0.75 table for negative sampling
    std::vector<double> cum(N);
    double total = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
        total += std::pow(static_cast<double>(corpus.vocabulary.counts[i]), 0.75);
        cum[i] = total;
    }
    std::uniform_real_distribution<double> unif(0.0, total);
    auto draw_negative = [&]() {
        const double u = unif(rng);
        return static_cast<int>(std::lower_bound(cum.begin(), cum.end(), u) - cum.begin());
    };

    std::size_t total_pairs = 0;
    for (const auto& s : corpus.sentences) {
        const std::size_t n = s.size();
        if (n < 2) continue;
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t lo = i >= static_cast<std::size_t>(cfg.half_window)
                                       ? i - cfg.half_window : 0;
            const std::size_t hi = std::min(n - 1, i + cfg.half_window);
            total_pairs += hi - lo;  // window size minus the target itself
        }
    }
    const std::size_t schedule = std::max<std::size_t>(1, total_pairs * cfg.epochs);

    auto sigma = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
    std::vector<double> grad_in(E);

    SkipgramResult result;
    std::size_t processed = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        double loss_sum = 0.0;
        std::size_t loss_n = 0;
        for (const auto& sentence : corpus.sentences) {
            for (const auto& [target, context] : generate_training_pairs(sentence, cfg.half_window)) {
                const double frac = static_cast<double>(processed) / schedule;
                const double lr = std::max(cfg.lr_min, cfg.lr * (1.0 - frac));
                ++processed;

                double* vin = W.data() + static_cast<std::size_t>(target) * E;
                std::fill(grad_in.begin(), grad_in.end(), 0.0);
                double pair_loss = 0.0;

                for (int k = 0; k <= cfg.negatives; ++k) {
                    int out;
                    double label;
                    if (k == 0) {
                        out = context;
                        label = 1.0;
                    } else {
                        out = draw_negative();
                        if (out == target) continue;
                        label = 0.0;
                    }
                    double* vout = Wo.data() + static_cast<std::size_t>(out) * E;
                    double dot = 0.0;
                    for (std::size_t d = 0; d < E; ++d) dot += vin[d] * vout[d];
                    const double p = sigma(dot);
                    pair_loss -= label > 0.5 ? std::log(std::max(p, 1e-12))
                                             : std::log(std::max(1.0 - p, 1e-12));
                    const double g = (p - label) * lr;
                    for (std::size_t d = 0; d < E; ++d) {
                        grad_in[d] += g * vout[d];
                        vout[d] -= g * vin[d];
                    }
                }
                for (std::size_t d = 0; d < E; ++d) vin[d] -= grad_in[d];
                loss_sum += pair_loss;
                ++loss_n;
            }
        }
        result.epoch_loss.push_back(loss_n ? loss_sum / static_cast<double>(loss_n) : 0.0);
    }

    result.embeddings.W = std::move(W);
    result.embeddings.dimension = E;
    result.embeddings.vocabulary = corpus.vocabulary;
    return result;
}

struct EntityVector {
    std::vector<double> values;
    bool oov = false;  // OOV yields a zero vector, flagged
};

inline EntityVector embed_entity(const EmbeddingMatrix& m, const std::string& token) {
    const int id = m.vocabulary.id_of(token);
    if (id < 0) return {std::vector<double>(m.dimension, 0.0), true};
    return {std::vector<double>(m.row(static_cast<std::size_t>(id)),
                                m.row(static_cast<std::size_t>(id)) + m.dimension),
            false};
}

inline double cosine_similarity(const std::vector<double>& a,
                                const std::vector<double>& b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace tmae
