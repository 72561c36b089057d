#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "trafficmae/entity_embed.hpp"
#include "trafficmae/errors.hpp"

namespace tmae {

/// One observation unit (flow/session sample) in the canonical schema.
struct CanonicalRecord {
    std::string sample_id;
    std::optional<std::string> label;
    std::optional<std::string> session_id;
    std::optional<std::vector<std::uint8_t>> payload;
    std::optional<std::vector<std::pair<std::string, double>>> stats;
    std::optional<std::vector<std::vector<double>>> sequences;  // rows x channels
    std::optional<std::map<std::string, std::string>> entities; // ip/port/subnet
};

struct Dataset {
    std::vector<CanonicalRecord> records;
    std::set<std::string> manifest;     // modalities populated in every record
    std::vector<std::string> classes;   // sorted unique labels

    std::size_t size() const { return records.size(); }
};

// ---------------------------------------------------------------------------
// Hex payload helpers
// ---------------------------------------------------------------------------

inline std::string to_hex(const std::vector<std::uint8_t>& bytes) {
    static const char* digits = "0123456789abcdef";
    std::string s;
    s.reserve(bytes.size() * 2);
    for (auto b : bytes) {
        s.push_back(digits[b >> 4]);
        s.push_back(digits[b & 0xf]);
    }
    return s;
}

inline std::vector<std::uint8_t> from_hex(const std::string& s) {
    if (s.size() % 2 != 0) throw ParseError("hex payload has odd length");
    auto nibble = [](char c) -> int {
        if (c >= '0' && c <= '9') return c - '0';
        if (c >= 'a' && c <= 'f') return c - 'a' + 10;
        if (c >= 'A' && c <= 'F') return c - 'A' + 10;
        return -1;
    };
    std::vector<std::uint8_t> out(s.size() / 2);
    for (std::size_t i = 0; i < out.size(); ++i) {
        const int hi = nibble(s[2 * i]), lo = nibble(s[2 * i + 1]);
        if (hi < 0 || lo < 0) throw ParseError("hex payload has invalid digit");
        out[i] = static_cast<std::uint8_t>((hi << 4) | lo);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Canonical JSON-lines IO
// ---------------------------------------------------------------------------

namespace detail {

inline std::set<std::string> record_modalities(const CanonicalRecord& r) {
    std::set<std::string> m;
    if (r.payload) m.insert("payload");
    if (r.stats) m.insert("stats");
    if (r.sequences) m.insert("sequences");
    if (r.entities) m.insert("entities");
    return m;
}

inline CanonicalRecord parse_record(const nlohmann::ordered_json& j, std::size_t lineno) {
    if (!j.is_object())
        throw ParseError("line " + std::to_string(lineno) + ": record is not an object");
    if (!j.contains("sample_id") || !j["sample_id"].is_string())
        throw ParseError("line " + std::to_string(lineno) + ": missing sample_id");
    CanonicalRecord r;
    r.sample_id = j["sample_id"].get<std::string>();
    try {
        if (j.contains("label")) r.label = j["label"].get<std::string>();
        if (j.contains("session_id")) r.session_id = j["session_id"].get<std::string>();
        if (j.contains("payload")) r.payload = from_hex(j["payload"].get<std::string>());
        if (j.contains("stats")) {
            std::vector<std::pair<std::string, double>> stats;
            for (const auto& [k, v] : j["stats"].items())
                stats.emplace_back(k, v.get<double>());
            r.stats = std::move(stats);
        }
        if (j.contains("sequences"))
            r.sequences = j["sequences"].get<std::vector<std::vector<double>>>();
        if (j.contains("entities"))
            r.entities = j["entities"].get<std::map<std::string, std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("line " + std::to_string(lineno) + ": " + e.what());
    } catch (const ParseError& e) {
        throw ParseError("line " + std::to_string(lineno) + ": " + e.what());
    }
    if (detail::record_modalities(r).empty())
        throw ParseError("line " + std::to_string(lineno) + ": record has no modality");
    return r;
}

}  // namespace detail

/// Validate manifest consistency and build the class list.
inline Dataset finalize_dataset(std::vector<CanonicalRecord> records) {
    Dataset d;
    d.records = std::move(records);
    std::set<std::string> ids, labels;
    for (const auto& r : d.records) {
        if (!ids.insert(r.sample_id).second)
            throw SchemaError("duplicate sample_id '" + r.sample_id + "'");
        for (const auto& m : detail::record_modalities(r)) d.manifest.insert(m);
        if (r.label) labels.insert(*r.label);
    }
    for (const auto& r : d.records) {
        const auto have = detail::record_modalities(r);
        for (const auto& m : d.manifest)
            if (!have.count(m))
                throw SchemaError("record '" + r.sample_id + "' is missing modality '" +
                                  m + "' declared by the dataset");
    }
    d.classes.assign(labels.begin(), labels.end());
    return d;
}

inline Dataset load_canonical(std::istream& is) {
    std::vector<CanonicalRecord> records;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::ordered_json j;
        try {
            j = nlohmann::ordered_json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw ParseError("line " + std::to_string(lineno) + ": " + e.what());
        }
        records.push_back(detail::parse_record(j, lineno));
    }
    return finalize_dataset(std::move(records));
}

inline Dataset load_canonical(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("load_canonical: cannot open " + path);
    return load_canonical(is);
}

inline void save_canonical(std::ostream& os, const Dataset& d) {
    for (const auto& r : d.records) {
        nlohmann::ordered_json j;
        j["sample_id"] = r.sample_id;
        if (r.label) j["label"] = *r.label;
        if (r.session_id) j["session_id"] = *r.session_id;
        if (r.payload) j["payload"] = to_hex(*r.payload);
        if (r.stats) {
            nlohmann::ordered_json s = nlohmann::ordered_json::object();
            for (const auto& [k, v] : *r.stats) s[k] = v;
            j["stats"] = std::move(s);
        }
        if (r.sequences) j["sequences"] = *r.sequences;
        if (r.entities) j["entities"] = *r.entities;
        os << j.dump() << '\n';
    }
}

inline void save_canonical(const std::string& path, const Dataset& d) {
    std::ofstream os(path);
    if (!os) throw DataError("save_canonical: cannot open " + path);
    save_canonical(os, d);
}

// ---------------------------------------------------------------------------
// Per-modality preprocessing
// ---------------------------------------------------------------------------

/// Byte b maps to token b+1; right-padded with 0 to length n, truncated beyond.
inline std::vector<int> tokenize_payload(const std::vector<std::uint8_t>& bytes,
                                         std::size_t n = 32) {
    if (n < 1) throw ArgumentError("tokenize_payload: n must be >= 1");
    std::vector<int> tokens(n, 0);
    const std::size_t m = std::min(n, bytes.size());
    for (std::size_t i = 0; i < m; ++i) tokens[i] = static_cast<int>(bytes[i]) + 1;
    return tokens;
}

/// Per-feature z-score fitted on training rows only. Features with
/// std < 1e-9 normalize to 0.
class Normalizer {
public:
    void fit(const std::vector<std::vector<double>>& rows) {
        if (rows.empty()) throw DataError("Normalizer::fit: no rows");
        const std::size_t d = rows[0].size();
        mean_.assign(d, 0.0);
        std_.assign(d, 0.0);
        for (const auto& r : rows) {
            if (r.size() != d) throw ShapeError("Normalizer::fit: ragged rows");
            for (std::size_t i = 0; i < d; ++i) mean_[i] += r[i];
        }
        for (auto& m : mean_) m /= static_cast<double>(rows.size());
        for (const auto& r : rows)
            for (std::size_t i = 0; i < d; ++i) {
                const double x = r[i] - mean_[i];
                std_[i] += x * x;
            }
        for (auto& s : std_) s = std::sqrt(s / static_cast<double>(rows.size()));
        fitted_ = true;
    }

    std::vector<double> transform(const std::vector<double>& row) const {
        if (!fitted_) throw StateError("Normalizer used before fitting");
        if (row.size() != mean_.size())
            throw ShapeError("Normalizer::transform: width mismatch");
        std::vector<double> out(row.size());
        for (std::size_t i = 0; i < row.size(); ++i)
            out[i] = std_[i] < 1e-9 ? 0.0 : (row[i] - mean_[i]) / std_[i];
        return out;
    }

    /// Restore previously fitted moments verbatim (e.g. from a saved model).
    static Normalizer from_moments(std::vector<double> mean, std::vector<double> stddev) {
        if (mean.size() != stddev.size())
            throw ShapeError("Normalizer::from_moments: width mismatch");
        Normalizer n;
        n.mean_ = std::move(mean);
        n.std_ = std::move(stddev);
        n.fitted_ = true;
        return n;
    }

    bool fitted() const { return fitted_; }
    const std::vector<double>& mean() const { return mean_; }
    const std::vector<double>& stddev() const { return std_; }

private:
    bool fitted_ = false;
    std::vector<double> mean_, std_;
};

/// Leakage-guarded fit: every row carries its fold tag and rows belonging to
/// the held-out fold are rejected outright rather than silently skipped.
inline Normalizer fit_normalizer(const std::vector<std::vector<double>>& rows,
                                 const std::vector<int>& fold_of_row, int held_out_fold) {
    if (rows.size() != fold_of_row.size())
        throw ArgumentError("fit_normalizer: fold tags do not match rows");
    for (std::size_t i = 0; i < rows.size(); ++i)
        if (fold_of_row[i] == held_out_fold)
            throw DataError("fit_normalizer: row " + std::to_string(i) +
                            " belongs to held-out fold " + std::to_string(held_out_fold));
    Normalizer n;
    n.fit(rows);
    return n;
}

/// Zero-pad/truncate rows to k and zero-fill missing trailing channels.
inline std::vector<std::vector<double>> pad_sequences(
    const std::vector<std::vector<double>>& seq, std::size_t k = 32,
    std::size_t channels = 4) {
    for (const auto& row : seq)
        if (row.size() > channels)
            throw ShapeError("pad_sequences: input has " + std::to_string(row.size()) +
                             " channels, configured maximum is " +
                             std::to_string(channels));
    std::vector<std::vector<double>> out(k, std::vector<double>(channels, 0.0));
    for (std::size_t t = 0; t < std::min(k, seq.size()); ++t)
        std::copy(seq[t].begin(), seq[t].end(), out[t].begin());
    return out;
}

/// Four octets scaled by 1/255 with octets beyond the prefix zeroed.
inline std::array<double, 4> subnet_octets(const std::string& address, int prefix_len) {
    if (prefix_len != 8 && prefix_len != 16 && prefix_len != 24 && prefix_len != 32)
        throw ArgumentError("subnet_octets: prefix length must be 8, 16, 24 or 32");
    std::array<int, 4> oct{};
    std::size_t pos = 0;
    for (int i = 0; i < 4; ++i) {
        if (pos >= address.size() || !std::isdigit(static_cast<unsigned char>(address[pos])))
            throw ParseError("subnet_octets: malformed address '" + address + "'");
        int v = 0;
        std::size_t len = 0;
        while (pos < address.size() &&
               std::isdigit(static_cast<unsigned char>(address[pos])) && len < 4) {
            v = v * 10 + (address[pos] - '0');
            ++pos;
            ++len;
        }
        if (len > 3 || v > 255)
            throw ParseError("subnet_octets: octet out of range in '" + address + "'");
        oct[i] = v;
        if (i < 3) {
            if (pos >= address.size() || address[pos] != '.')
                throw ParseError("subnet_octets: malformed address '" + address + "'");
            ++pos;
        }
    }
    if (pos != address.size())
        throw ParseError("subnet_octets: trailing characters in '" + address + "'");
    std::array<double, 4> out{};
    for (int i = 0; i < 4; ++i)
        out[i] = (i * 8 < prefix_len) ? oct[i] / 255.0 : 0.0;
    return out;
}

/// Shannon entropy of the label distribution over the log of the class count.
inline double balance_coefficient(const std::vector<std::string>& labels) {
    std::map<std::string, std::size_t> counts;
    for (const auto& l : labels) ++counts[l];
    if (counts.size() < 2)
        throw ArgumentError("balance_coefficient needs at least 2 distinct classes");
    const double n = static_cast<double>(labels.size());
    double h = 0.0;
    for (const auto& [cls, c] : counts) {
        const double p = static_cast<double>(c) / n;
        h -= p * std::log(p);
    }
    return h / std::log(static_cast<double>(counts.size()));
}

// ---------------------------------------------------------------------------
// Raw-concatenation baseline
// ---------------------------------------------------------------------------

struct ConcatConfig {
    bool use_entities = true;
    std::vector<std::string> entity_keys = {"ip", "port"};
    bool use_stats = true;
    bool use_sequences = true;
    std::size_t seq_k = 32;
    std::size_t seq_channels = 4;
    bool use_payload = true;
    std::size_t payload_n = 32;
};

/**
 * Fixed concatenation order: entity embeddings (in entity_keys order), stats,
 * flattened padded sequences, normalized payload bytes. The order is a frozen
 * part of the contract; reordering must not change downstream metrics.
 */
inline std::vector<double> build_concat_baseline(
    const CanonicalRecord& r,
    const std::map<std::string, EmbeddingMatrix>& entity_embeddings,
    const ConcatConfig& cfg = {}) {
    std::vector<double> out;
    if (cfg.use_entities) {
        if (!r.entities)
            throw DataError("record '" + r.sample_id + "' has no entities");
        for (const auto& key : cfg.entity_keys) {
            auto eit = entity_embeddings.find(key);
            if (eit == entity_embeddings.end())
                throw DataError("no embedding table for entity '" + key + "'");
            auto vit = r.entities->find(key);
            if (vit == r.entities->end())
                throw DataError("record '" + r.sample_id + "' lacks entity '" + key + "'");
            auto vec = embed_entity(eit->second, vit->second);
            out.insert(out.end(), vec.values.begin(), vec.values.end());
        }
    }
    if (cfg.use_stats) {
        if (!r.stats) throw DataError("record '" + r.sample_id + "' has no stats");
        for (const auto& [name, v] : *r.stats) out.push_back(v);
    }
    if (cfg.use_sequences) {
        if (!r.sequences)
            throw DataError("record '" + r.sample_id + "' has no sequences");
        for (const auto& row : pad_sequences(*r.sequences, cfg.seq_k, cfg.seq_channels))
            out.insert(out.end(), row.begin(), row.end());
    }
    if (cfg.use_payload) {
        if (!r.payload) throw DataError("record '" + r.sample_id + "' has no payload");
        for (int tok : tokenize_payload(*r.payload, cfg.payload_n))
            out.push_back(tok > 0 ? (tok - 1) / 255.0 : 0.0);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic surrogate generator
// ---------------------------------------------------------------------------

enum class SignalPlacement { Entity, Stats, Both };

struct SyntheticSpec {
    std::size_t n_samples = 2000;
    std::size_t n_classes = 5;
    SignalPlacement signal = SignalPlacement::Both;
    double noise = 0.1;                 // probability of off-class draws / jitter scale
    std::size_t n_stats = 12;
    std::size_t seq_k = 32;
    std::size_t seq_channels = 4;
    std::size_t payload_len = 32;       // maximum payload length
    std::size_t sessions_per_class = 20;
    std::size_t ips_per_class = 4;
    std::size_t ports_per_class = 3;
};

/**
 * Desk-scale surrogate dataset. Entity signal comes from class-specific IP
 * and port pools (entities of one class co-occur against the same service
 * keys); stats signal from class-conditional Gaussian mean shifts. Payload
 * carries a noisy class motif; sequences are mostly noise with a weak
 * stats-mode shift. Deterministic for a fixed seed.
 */
inline Dataset generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
    if (spec.n_classes < 2)
        throw ConfigError("generate_synthetic: need at least 2 classes");
    if (spec.n_samples < 1)
        throw ConfigError("generate_synthetic: need at least 1 sample");
    if (spec.noise < 0.0 || spec.noise > 1.0)
        throw ConfigError("generate_synthetic: noise must lie in [0,1]");

    Rng rng(seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const bool entity_signal = spec.signal != SignalPlacement::Stats;
    const bool stats_signal = spec.signal != SignalPlacement::Entity;

    // class-specific entity pools; class c owns 10.(c+1).x.1 addresses and a
    // dedicated port range, so same-class entities co-occur
    std::vector<std::vector<std::string>> class_ips(spec.n_classes),
        class_ports(spec.n_classes);
    for (std::size_t c = 0; c < spec.n_classes; ++c) {
        for (std::size_t i = 0; i < spec.ips_per_class; ++i)
            class_ips[c].push_back("10." + std::to_string(c + 1) + "." +
                                   std::to_string(i + 1) + ".1");
        for (std::size_t p = 0; p < spec.ports_per_class; ++p)
            class_ports[c].push_back(std::to_string(1000 + c * 100 + p));
    }

    // class-conditional stat means: distinct binary-ish patterns scaled up
    std::vector<std::vector<double>> stat_means(spec.n_classes,
                                                std::vector<double>(spec.n_stats, 0.0));
    for (std::size_t c = 0; c < spec.n_classes; ++c)
        for (std::size_t i = 0; i < spec.n_stats; ++i)
            stat_means[c][i] = ((c + i) % spec.n_classes) * 2.0;

    // class payload motifs over the first bytes
    std::vector<std::vector<std::uint8_t>> motifs(spec.n_classes);
    for (std::size_t c = 0; c < spec.n_classes; ++c) {
        motifs[c].resize(8);
        for (std::size_t i = 0; i < 8; ++i)
            motifs[c][i] = static_cast<std::uint8_t>((37 * (c + 1) + 11 * i) % 256);
    }

    auto pick = [&](const std::vector<std::string>& pool) {
        std::uniform_int_distribution<std::size_t> d(0, pool.size() - 1);
        return pool[d(rng)];
    };

    std::vector<CanonicalRecord> records;
    records.reserve(spec.n_samples);
    for (std::size_t i = 0; i < spec.n_samples; ++i) {
        const std::size_t c = i % spec.n_classes;
        CanonicalRecord r;
        r.sample_id = "syn" + std::to_string(i);
        r.label = "class" + std::to_string(c);
        std::uniform_int_distribution<std::size_t> sess(0, spec.sessions_per_class - 1);
        r.session_id = "sess_" + std::to_string(c) + "_" + std::to_string(sess(rng));

        // entities: class pool, or any class's pool at the noise rate
        const std::size_t ec = (entity_signal && unif(rng) >= spec.noise)
                                   ? c
                                   : static_cast<std::size_t>(unif(rng) * spec.n_classes) %
                                         spec.n_classes;
        std::map<std::string, std::string> ents;
        ents["ip"] = pick(class_ips[ec]);
        ents["port"] = pick(class_ports[ec]);
        ents["subnet"] = ents["ip"];
        r.entities = std::move(ents);

        // stats: class mean shift (or common zero mean) plus unit noise
        std::vector<std::pair<std::string, double>> stats;
        for (std::size_t s = 0; s < spec.n_stats; ++s) {
            const double mu = stats_signal ? stat_means[c][s] : 0.0;
            stats.emplace_back("f" + std::to_string(s), mu + gauss(rng));
        }
        r.stats = std::move(stats);

        // sequences: noise with a weak class shift when stats carry signal
        std::vector<std::vector<double>> seq(spec.seq_k,
                                             std::vector<double>(spec.seq_channels));
        for (auto& row : seq)
            for (auto& v : row)
                v = gauss(rng) + (stats_signal ? 0.1 * static_cast<double>(c) : 0.0);
        r.sequences = std::move(seq);

        // payload: class motif head, random tail, variable length
        std::uniform_int_distribution<std::size_t> plen(8, spec.payload_len);
        std::vector<std::uint8_t> payload(plen(rng));
        std::uniform_int_distribution<int> byte(0, 255);
        for (std::size_t b = 0; b < payload.size(); ++b) {
            if (b < motifs[c].size() && unif(rng) >= spec.noise)
                payload[b] = motifs[c][b];
            else
                payload[b] = static_cast<std::uint8_t>(byte(rng));
        }
        r.payload = std::move(payload);

        records.push_back(std::move(r));
    }
    return finalize_dataset(std::move(records));
}

/// Entity observations for co-occurrence training, derived from record order:
/// the record index stands in for the timestamp.
inline std::vector<EntityEvent> derive_entity_events(const Dataset& d,
                                                     const std::string& entity_key,
                                                     const std::string& service_key) {
    std::vector<EntityEvent> events;
    for (std::size_t i = 0; i < d.records.size(); ++i) {
        const auto& r = d.records[i];
        if (!r.entities) continue;
        auto e = r.entities->find(entity_key);
        auto s = r.entities->find(service_key);
        if (e == r.entities->end() || s == r.entities->end()) continue;
        events.push_back({e->second, s->second, static_cast<double>(i)});
    }
    return events;
}

}  // namespace tmae
