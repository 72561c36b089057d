#pragma once

#include <algorithm>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "trafficmae/dataio.hpp"
#include "trafficmae/evalkit.hpp"
#include "trafficmae/mae.hpp"

namespace tmae {

/// Stage seeds derive from the experiment seed and a stage tag so that
/// separately invoked stages reproduce the single-run pipeline exactly.
inline std::uint64_t derive_seed(std::uint64_t base, const std::string& tag) {
    return base ^ detail::fnv1a64(reinterpret_cast<const unsigned char*>(tag.data()),
                                  tag.size());
}

struct PipelineConfig {
    // data source: a canonical JSON-lines path or an inline synthetic spec
    std::string dataset_path;
    bool use_synthetic = true;
    SyntheticSpec synth;

    // entity embeddings
    std::vector<std::string> entity_keys = {"ip", "port"};
    SkipgramConfig skipgram;
    double cooccurrence_window = 60.0;
    int min_count = 1;

    // modality mix feeding the autoencoder and the concat baseline
    bool use_payload = true;
    bool use_stats = true;
    bool use_sequences = true;
    bool use_subnet = false;
    bool use_entities = true;
    std::size_t payload_n = 32;
    std::size_t seq_k = 32;
    std::size_t seq_channels = 4;
    int subnet_prefix = 24;

    MAEConfig mae;

    // downstream protocol
    int folds = 5;
    std::string classifier = "mlp";  // mlp | rf | knn
    MLPConfig mlp;
    RFConfig rf;
    std::size_t knn_k = 7;
    std::vector<std::string> arms = {"mae", "concat"};
    std::string exclude_class;  // e.g. "unknown"; still feeds self-supervised stages

    std::uint64_t seed = 1;
    std::string outdir;
};

// ---------------------------------------------------------------------------
// Config parsing (JSON with validated field names)
// ---------------------------------------------------------------------------

namespace detail {

inline void check_fields(const nlohmann::json& j, const char* where,
                         const std::set<std::string>& allowed) {
    for (const auto& [key, v] : j.items())
        if (!allowed.count(key))
            throw ConfigError(std::string(where) + ": unknown field '" + key + "'");
}

}  // namespace detail

inline SyntheticSpec parse_synthetic_spec(const nlohmann::json& j) {
    detail::check_fields(j, "synthetic",
                         {"n_samples", "n_classes", "signal", "noise", "n_stats",
                          "seq_k", "seq_channels", "payload_len", "sessions_per_class",
                          "ips_per_class", "ports_per_class"});
    SyntheticSpec s;
    s.n_samples = j.value("n_samples", s.n_samples);
    s.n_classes = j.value("n_classes", s.n_classes);
    if (j.contains("signal")) {
        const std::string sig = j["signal"].get<std::string>();
        if (sig == "entity")
            s.signal = SignalPlacement::Entity;
        else if (sig == "stats")
            s.signal = SignalPlacement::Stats;
        else if (sig == "both")
            s.signal = SignalPlacement::Both;
        else
            throw ConfigError("synthetic.signal: expected entity|stats|both, got '" +
                              sig + "'");
    }
    s.noise = j.value("noise", s.noise);
    s.n_stats = j.value("n_stats", s.n_stats);
    s.seq_k = j.value("seq_k", s.seq_k);
    s.seq_channels = j.value("seq_channels", s.seq_channels);
    s.payload_len = j.value("payload_len", s.payload_len);
    s.sessions_per_class = j.value("sessions_per_class", s.sessions_per_class);
    s.ips_per_class = j.value("ips_per_class", s.ips_per_class);
    s.ports_per_class = j.value("ports_per_class", s.ports_per_class);
    return s;
}

inline PipelineConfig parse_pipeline_config(const nlohmann::json& j) {
    detail::check_fields(
        j, "config",
        {"dataset", "synthetic", "entity_keys", "skipgram", "cooccurrence_window",
         "min_count", "modalities", "mae", "folds", "classifier", "mlp", "rf",
         "knn_k", "arms", "exclude_class", "seed", "outdir", "subnet_prefix"});
    PipelineConfig c;
    if (!j.contains("seed"))
        throw ConfigError("config: field 'seed' is required for reproducibility");
    c.seed = j["seed"].get<std::uint64_t>();

    if (j.contains("dataset")) {
        c.dataset_path = j["dataset"].get<std::string>();
        c.use_synthetic = false;
    }
    if (j.contains("synthetic")) {
        if (!c.use_synthetic)
            throw ConfigError("config: 'dataset' and 'synthetic' are exclusive");
        c.synth = parse_synthetic_spec(j["synthetic"]);
    } else if (c.use_synthetic) {
        // default synthetic spec applies
    }

    if (j.contains("entity_keys"))
        c.entity_keys = j["entity_keys"].get<std::vector<std::string>>();
    if (j.contains("skipgram")) {
        const auto& s = j["skipgram"];
        detail::check_fields(s, "skipgram",
                             {"dimension", "half_window", "negatives", "epochs", "lr",
                              "lr_min"});
        c.skipgram.dimension = s.value("dimension", c.skipgram.dimension);
        c.skipgram.half_window = s.value("half_window", c.skipgram.half_window);
        c.skipgram.negatives = s.value("negatives", c.skipgram.negatives);
        c.skipgram.epochs = s.value("epochs", c.skipgram.epochs);
        c.skipgram.lr = s.value("lr", c.skipgram.lr);
        c.skipgram.lr_min = s.value("lr_min", c.skipgram.lr_min);
    }
    c.cooccurrence_window = j.value("cooccurrence_window", c.cooccurrence_window);
    c.min_count = j.value("min_count", c.min_count);
    c.subnet_prefix = j.value("subnet_prefix", c.subnet_prefix);

    if (j.contains("modalities")) {
        const auto& m = j["modalities"];
        detail::check_fields(m, "modalities",
                             {"payload", "stats", "sequences", "subnet", "entities",
                              "payload_n", "seq_k", "seq_channels"});
        c.use_payload = m.value("payload", c.use_payload);
        c.use_stats = m.value("stats", c.use_stats);
        c.use_sequences = m.value("sequences", c.use_sequences);
        c.use_subnet = m.value("subnet", c.use_subnet);
        c.use_entities = m.value("entities", c.use_entities);
        c.payload_n = m.value("payload_n", c.payload_n);
        c.seq_k = m.value("seq_k", c.seq_k);
        c.seq_channels = m.value("seq_channels", c.seq_channels);
    }
    if (j.contains("mae")) {
        const auto& m = j["mae"];
        detail::check_fields(m, "mae",
                             {"l1", "l2", "l3", "l4", "epochs", "batch_size", "lr"});
        c.mae.l1 = m.value("l1", c.mae.l1);
        c.mae.l2 = m.value("l2", c.mae.l2);
        c.mae.l3 = m.value("l3", c.mae.l3);
        c.mae.l4 = m.value("l4", c.mae.l4);
        c.mae.epochs = m.value("epochs", c.mae.epochs);
        c.mae.batch_size = m.value("batch_size", c.mae.batch_size);
        c.mae.lr = m.value("lr", c.mae.lr);
    }
    c.folds = j.value("folds", c.folds);
    c.classifier = j.value("classifier", c.classifier);
    if (c.classifier != "mlp" && c.classifier != "rf" && c.classifier != "knn")
        throw ConfigError("config: classifier must be mlp|rf|knn, got '" +
                          c.classifier + "'");
    if (j.contains("mlp")) {
        const auto& m = j["mlp"];
        detail::check_fields(m, "mlp",
                             {"hidden1", "hidden2", "dropout", "epochs", "batch_size",
                              "lr"});
        c.mlp.hidden1 = m.value("hidden1", c.mlp.hidden1);
        c.mlp.hidden2 = m.value("hidden2", c.mlp.hidden2);
        c.mlp.dropout = m.value("dropout", c.mlp.dropout);
        c.mlp.epochs = m.value("epochs", c.mlp.epochs);
        c.mlp.batch_size = m.value("batch_size", c.mlp.batch_size);
        c.mlp.lr = m.value("lr", c.mlp.lr);
    }
    if (j.contains("rf")) {
        const auto& m = j["rf"];
        detail::check_fields(m, "rf", {"n_trees", "max_features", "min_samples_leaf"});
        c.rf.n_trees = m.value("n_trees", c.rf.n_trees);
        c.rf.max_features = m.value("max_features", c.rf.max_features);
        c.rf.min_samples_leaf = m.value("min_samples_leaf", c.rf.min_samples_leaf);
    }
    c.knn_k = j.value("knn_k", c.knn_k);
    if (j.contains("arms")) c.arms = j["arms"].get<std::vector<std::string>>();
    c.exclude_class = j.value("exclude_class", c.exclude_class);
    c.outdir = j.value("outdir", c.outdir);
    if (c.folds < 2) throw ConfigError("config: folds must be >= 2");
    return c;
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

inline Dataset prepare_dataset(const PipelineConfig& cfg) {
    if (cfg.use_synthetic)
        return generate_synthetic(cfg.synth, derive_seed(cfg.seed, "synth"));
    return load_canonical(cfg.dataset_path);
}

/**
 * One embedding table per entity key. IP-style entities co-occur against the
 * other key within a record-index window; the last configured key uses the
 * per-sender strategy (one sentence per opposite entity) when only two keys
 * are configured, which mirrors ports grouped per sender.
 */
inline std::map<std::string, EmbeddingMatrix> train_entity_tables(
    const Dataset& d, const PipelineConfig& cfg) {
    std::map<std::string, EmbeddingMatrix> tables;
    for (std::size_t i = 0; i < cfg.entity_keys.size(); ++i) {
        const std::string& key = cfg.entity_keys[i];
        const std::string service =
            cfg.entity_keys[(i + 1) % cfg.entity_keys.size()];
        if (cfg.entity_keys.size() < 2)
            throw ConfigError("entity training needs at least 2 entity keys");
        const double window = key == "port" ? 0.0 : cfg.cooccurrence_window;
        auto events = derive_entity_events(d, key, service);
        auto corpus = build_cooccurrence_corpus(events, window, cfg.min_count);
        SkipgramConfig sg = cfg.skipgram;
        sg.seed = derive_seed(cfg.seed, "entity:" + key);
        tables[key] = train_skipgram(corpus, sg).embeddings;
    }
    return tables;
}

/// Everything the embed stage needs beyond the autoencoder weights: frozen
/// entity tables and the whole-dataset normalizers for stats and sequences.
struct PipelineModel {
    MultimodalAutoencoder mae;
    std::map<std::string, EmbeddingMatrix> entity_tables;
    Normalizer stats_norm;
    Normalizer seq_norm;
    PipelineConfig cfg;
};

namespace detail {

inline std::vector<double> record_stats(const CanonicalRecord& r) {
    if (!r.stats) throw DataError("record '" + r.sample_id + "' has no stats");
    std::vector<double> v;
    v.reserve(r.stats->size());
    for (const auto& [k, x] : *r.stats) v.push_back(x);
    return v;
}

inline std::vector<double> record_sequences_flat(const CanonicalRecord& r,
                                                 std::size_t k, std::size_t ch) {
    if (!r.sequences) throw DataError("record '" + r.sample_id + "' has no sequences");
    std::vector<double> v;
    v.reserve(k * ch);
    for (const auto& row : pad_sequences(*r.sequences, k, ch))
        v.insert(v.end(), row.begin(), row.end());
    return v;
}

}  // namespace detail

/// Assemble the autoencoder's input tensors for a dataset, using the given
/// (already fitted) normalizers.
inline MultimodalData build_multimodal_data(const Dataset& d,
                                            const PipelineModel& model) {
    const PipelineConfig& cfg = model.cfg;
    const std::size_t N = d.size();
    MultimodalData out;

    if (cfg.use_payload) {
        ModalityBatch mb;
        for (const auto& r : d.records) {
            if (!r.payload)
                throw DataError("record '" + r.sample_id + "' has no payload");
            // the payload adapter's token window is fixed by its architecture
            mb.tokens.push_back(tokenize_payload(*r.payload, PayloadAdapter::kTokens));
        }
        out["payload"] = std::move(mb);
    }
    if (cfg.use_stats) {
        std::vector<double> flat;
        std::size_t dim = 0;
        for (const auto& r : d.records) {
            auto v = model.stats_norm.transform(detail::record_stats(r));
            dim = v.size();
            flat.insert(flat.end(), v.begin(), v.end());
        }
        ModalityBatch mb;
        mb.values = Tensor::from(std::move(flat), {N, dim});
        out["statistics"] = std::move(mb);
    }
    if (cfg.use_sequences) {
        std::vector<double> flat;
        for (const auto& r : d.records) {
            auto v = model.seq_norm.transform(
                detail::record_sequences_flat(r, cfg.seq_k, cfg.seq_channels));
            flat.insert(flat.end(), v.begin(), v.end());
        }
        ModalityBatch mb;
        mb.values = Tensor::from(std::move(flat), {N, cfg.seq_k, cfg.seq_channels});
        out["sequences"] = std::move(mb);
    }
    if (cfg.use_subnet) {
        std::vector<double> flat;
        for (const auto& r : d.records) {
            if (!r.entities || !r.entities->count("subnet"))
                throw DataError("record '" + r.sample_id + "' has no subnet entity");
            auto o = subnet_octets(r.entities->at("subnet"), cfg.subnet_prefix);
            flat.insert(flat.end(), o.begin(), o.end());
        }
        ModalityBatch mb;
        mb.values = Tensor::from(std::move(flat), {N, 4, 1});
        out["subnet"] = std::move(mb);
    }
    if (cfg.use_entities) {
        for (const auto& [key, table] : model.entity_tables) {
            std::vector<double> flat;
            for (const auto& r : d.records) {
                if (!r.entities || !r.entities->count(key))
                    throw DataError("record '" + r.sample_id + "' has no entity '" +
                                    key + "'");
                auto v = embed_entity(table, r.entities->at(key));
                flat.insert(flat.end(), v.values.begin(), v.values.end());
            }
            ModalityBatch mb;
            mb.values = Tensor::from(std::move(flat), {N, table.dimension});
            out["entity_" + key] = std::move(mb);
        }
    }
    if (out.empty()) throw ConfigError("no modalities enabled");
    return out;
}

/// Train entity tables (unless provided), fit normalizers, assemble adapters,
/// and train the autoencoder on the whole dataset (self-supervised; no labels
/// are consulted, so fold leakage does not arise here).
inline PipelineModel train_pipeline(const Dataset& d, const PipelineConfig& cfg,
                                    std::map<std::string, EmbeddingMatrix> tables = {}) {
    PipelineConfig c = cfg;
    if (c.use_entities && tables.empty()) tables = train_entity_tables(d, c);

    Normalizer stats_norm, seq_norm;
    if (c.use_stats) {
        std::vector<std::vector<double>> rows;
        for (const auto& r : d.records) rows.push_back(detail::record_stats(r));
        stats_norm.fit(rows);
    }
    if (c.use_sequences) {
        std::vector<std::vector<double>> rows;
        for (const auto& r : d.records)
            rows.push_back(detail::record_sequences_flat(r, c.seq_k, c.seq_channels));
        seq_norm.fit(rows);
    }

    Rng rng(derive_seed(c.seed, "mae-init"));
    std::vector<std::unique_ptr<Adapter>> adapters;
    if (c.use_payload) adapters.push_back(build_payload_adapter(c.mae.l1, rng));
    if (c.use_stats) {
        if (d.records.empty() || !d.records[0].stats)
            throw DataError("stats modality enabled but absent from the dataset");
        adapters.push_back(
            build_stats_adapter(d.records[0].stats->size(), c.mae.l1, rng));
    }
    if (c.use_sequences)
        adapters.push_back(
            build_sequence_adapter(c.seq_k, c.seq_channels, c.mae.l1, rng));
    if (c.use_subnet) adapters.push_back(build_subnet_adapter(c.mae.l1, rng));
    if (c.use_entities)
        for (const auto& [key, table] : tables)
            adapters.push_back(build_entity_adapter(table.dimension, c.mae.l1, rng,
                                                    "entity_" + key));

    MAEConfig mc = c.mae;
    mc.seed = derive_seed(c.seed, "mae-train");
    PipelineModel model{assemble_mae(std::move(adapters), mc, rng), std::move(tables),
                        std::move(stats_norm), std::move(seq_norm), std::move(c)};
    train_mae(model.mae, build_multimodal_data(d, model));
    return model;
}

inline EmbeddingSet pipeline_embed(const PipelineModel& model, const Dataset& d) {
    std::vector<std::string> ids;
    ids.reserve(d.size());
    for (const auto& r : d.records) ids.push_back(r.sample_id);
    return embed_dataset(model.mae, build_multimodal_data(d, model), ids);
}

// ---------------------------------------------------------------------------
// Entity table persistence
// ---------------------------------------------------------------------------

inline void save_entity_table(const EmbeddingMatrix& m, const std::string& key,
                              const std::string& path) {
    Container c;
    c.kind = "entity_embeddings";
    c.config = {{"key", key},
                {"dimension", m.dimension},
                {"tokens", m.vocabulary.id_to_token},
                {"counts", m.vocabulary.counts}};
    c.arrays.push_back({"W", {m.rows(), m.dimension}, m.W});
    write_container(path, c);
}

inline EmbeddingMatrix load_entity_table(const std::string& path) {
    Container c = read_container(path);
    if (c.kind != "entity_embeddings")
        throw CorruptionError("expected an entity-embedding container, found kind '" +
                              c.kind + "'");
    EmbeddingMatrix m;
    m.dimension = c.config.at("dimension").get<std::size_t>();
    m.vocabulary.id_to_token = c.config.at("tokens").get<std::vector<std::string>>();
    m.vocabulary.counts = c.config.at("counts").get<std::vector<std::int64_t>>();
    for (std::size_t i = 0; i < m.vocabulary.id_to_token.size(); ++i)
        m.vocabulary.token_to_id[m.vocabulary.id_to_token[i]] = static_cast<int>(i);
    if (c.arrays.size() != 1 || c.arrays[0].name != "W")
        throw CorruptionError("entity-embedding container must hold exactly one array 'W'");
    if (c.arrays[0].shape != Shape{m.rows(), m.dimension})
        throw CorruptionError("entity-embedding matrix shape disagrees with vocabulary");
    m.W = std::move(c.arrays[0].data);
    return m;
}

// ---------------------------------------------------------------------------
// Pipeline model persistence
// ---------------------------------------------------------------------------

inline void save_pipeline_model(const PipelineModel& m, const std::string& path) {
    Container c;
    c.kind = "pipeline";
    const MAEConfig& mc = m.mae.config();
    c.config["mae"] = {{"l1", mc.l1}, {"l2", mc.l2}, {"l3", mc.l3}, {"l4", mc.l4},
                       {"epochs", mc.epochs}, {"batch_size", mc.batch_size},
                       {"lr", mc.lr}, {"seed", mc.seed}};
    c.config["adapters"] = nlohmann::json::array();
    for (const auto& a : m.mae.adapters()) {
        const AdapterSpec& s = a->spec();
        c.config["adapters"].push_back({{"kind", s.kind},
                                        {"modality", s.modality},
                                        {"input_shape", s.input_shape},
                                        {"l1", s.l1}});
    }
    c.config["modalities"] = {{"payload", m.cfg.use_payload},
                              {"stats", m.cfg.use_stats},
                              {"sequences", m.cfg.use_sequences},
                              {"subnet", m.cfg.use_subnet},
                              {"entities", m.cfg.use_entities},
                              {"payload_n", m.cfg.payload_n},
                              {"seq_k", m.cfg.seq_k},
                              {"seq_channels", m.cfg.seq_channels}};
    c.config["subnet_prefix"] = m.cfg.subnet_prefix;
    c.config["seed"] = m.cfg.seed;

    for (const auto& [name, t] : m.mae.params())
        c.arrays.push_back({name, t.shape(), t.value()});

    nlohmann::json vocabs = nlohmann::json::object();
    for (const auto& [key, table] : m.entity_tables) {
        vocabs[key] = {{"tokens", table.vocabulary.id_to_token},
                       {"counts", table.vocabulary.counts},
                       {"dimension", table.dimension}};
        c.arrays.push_back({"frozen.entity_" + key + ".W",
                            {table.rows(), table.dimension}, table.W});
    }
    c.config["entity_vocabularies"] = std::move(vocabs);

    if (m.stats_norm.fitted()) {
        c.arrays.push_back({"frozen.stats_norm.mean", {m.stats_norm.mean().size()},
                            m.stats_norm.mean()});
        c.arrays.push_back({"frozen.stats_norm.std", {m.stats_norm.stddev().size()},
                            m.stats_norm.stddev()});
    }
    if (m.seq_norm.fitted()) {
        c.arrays.push_back({"frozen.seq_norm.mean", {m.seq_norm.mean().size()},
                            m.seq_norm.mean()});
        c.arrays.push_back({"frozen.seq_norm.std", {m.seq_norm.stddev().size()},
                            m.seq_norm.stddev()});
    }
    write_container(path, c);
}

inline PipelineModel load_pipeline_model(const std::string& path) {
    Container c = read_container(path);
    if (c.kind != "pipeline")
        throw CorruptionError("expected a pipeline container, found kind '" + c.kind +
                              "'");
    PipelineConfig cfg;
    cfg.seed = c.config.value("seed", std::uint64_t{1});
    cfg.subnet_prefix = c.config.value("subnet_prefix", cfg.subnet_prefix);
    const auto& mods = c.config.at("modalities");
    cfg.use_payload = mods.at("payload").get<bool>();
    cfg.use_stats = mods.at("stats").get<bool>();
    cfg.use_sequences = mods.at("sequences").get<bool>();
    cfg.use_subnet = mods.at("subnet").get<bool>();
    cfg.use_entities = mods.at("entities").get<bool>();
    cfg.payload_n = mods.at("payload_n").get<std::size_t>();
    cfg.seq_k = mods.at("seq_k").get<std::size_t>();
    cfg.seq_channels = mods.at("seq_channels").get<std::size_t>();

    const auto& mj = c.config.at("mae");
    MAEConfig mc;
    mc.l1 = mj.at("l1").get<std::size_t>();
    mc.l2 = mj.at("l2").get<std::size_t>();
    mc.l3 = mj.at("l3").get<std::size_t>();
    mc.l4 = mj.at("l4").get<std::size_t>();
    mc.epochs = mj.value("epochs", mc.epochs);
    mc.batch_size = mj.value("batch_size", mc.batch_size);
    mc.lr = mj.value("lr", mc.lr);
    mc.seed = mj.value("seed", mc.seed);
    cfg.mae = mc;

    Rng rng(mc.seed);
    std::vector<std::unique_ptr<Adapter>> adapters;
    for (const auto& e : c.config.at("adapters"))
        adapters.push_back(rebuild_adapter(e, rng));

    std::map<std::string, ArrayRecord> arrays;
    for (auto& a : c.arrays) arrays.emplace(a.name, std::move(a));
    auto take = [&](const std::string& name) -> ArrayRecord {
        auto it = arrays.find(name);
        if (it == arrays.end())
            throw CorruptionError("pipeline model is missing array '" + name + "'");
        ArrayRecord r = std::move(it->second);
        arrays.erase(it);
        return r;
    };

    std::map<std::string, EmbeddingMatrix> tables;
    const nlohmann::json vocabs =
        c.config.value("entity_vocabularies", nlohmann::json::object());
    for (const auto& [key, vj] : vocabs.items()) {
        EmbeddingMatrix m;
        m.dimension = vj.at("dimension").get<std::size_t>();
        m.vocabulary.id_to_token = vj.at("tokens").get<std::vector<std::string>>();
        m.vocabulary.counts = vj.at("counts").get<std::vector<std::int64_t>>();
        for (std::size_t i = 0; i < m.vocabulary.id_to_token.size(); ++i)
            m.vocabulary.token_to_id[m.vocabulary.id_to_token[i]] =
                static_cast<int>(i);
        m.W = take("frozen.entity_" + key + ".W").data;
        tables[key] = std::move(m);
    }

    Normalizer stats_norm, seq_norm;
    if (arrays.count("frozen.stats_norm.mean"))
        stats_norm = Normalizer::from_moments(take("frozen.stats_norm.mean").data,
                                              take("frozen.stats_norm.std").data);
    if (arrays.count("frozen.seq_norm.mean"))
        seq_norm = Normalizer::from_moments(take("frozen.seq_norm.mean").data,
                                            take("frozen.seq_norm.std").data);

    PipelineModel model{MultimodalAutoencoder(std::move(adapters), mc, rng),
                        std::move(tables), std::move(stats_norm), std::move(seq_norm),
                        std::move(cfg)};
    std::map<std::string, Tensor> by_name;
    for (const auto& [name, t] : model.mae.params()) by_name.emplace(name, t);
    for (auto& [name, a] : arrays) {
        auto it = by_name.find(name);
        if (it == by_name.end())
            throw CorruptionError("pipeline model has unknown array '" + name + "'");
        if (it->second.shape() != a.shape)
            throw CorruptionError("shape mismatch for array '" + name + "'");
        it->second.mutable_value() = std::move(a.data);
        by_name.erase(it);
    }
    if (!by_name.empty())
        throw CorruptionError("pipeline model is missing array '" +
                              by_name.begin()->first + "'");
    return model;
}

// ---------------------------------------------------------------------------
// Ablation arms and evaluation
// ---------------------------------------------------------------------------

/// Feature rows for one ablation arm. "mae" consumes precomputed embeddings;
/// every other arm derives features from the records and frozen tables.
inline std::vector<std::vector<double>> arm_features(
    const std::string& arm, const Dataset& d,
    const std::map<std::string, EmbeddingMatrix>& tables,
    const EmbeddingSet* embeddings, const PipelineConfig& cfg) {
    std::vector<std::vector<double>> X;
    X.reserve(d.size());
    if (arm == "mae") {
        if (!embeddings) throw ConfigError("mae arm needs embeddings");
        std::map<std::string, std::size_t> row_of;
        for (std::size_t i = 0; i < embeddings->ids.size(); ++i)
            row_of[embeddings->ids[i]] = i;
        for (const auto& r : d.records) {
            auto it = row_of.find(r.sample_id);
            if (it == row_of.end())
                throw DataError("no embedding for sample '" + r.sample_id + "'");
            X.emplace_back(embeddings->row(it->second),
                           embeddings->row(it->second) + embeddings->dim);
        }
        return X;
    }
    ConcatConfig cc;
    cc.entity_keys = cfg.entity_keys;
    cc.seq_k = cfg.seq_k;
    cc.seq_channels = cfg.seq_channels;
    cc.payload_n = cfg.payload_n;
    if (arm == "concat") {
        cc.use_entities = cfg.use_entities;
        cc.use_stats = cfg.use_stats;
        cc.use_sequences = cfg.use_sequences;
        cc.use_payload = cfg.use_payload;
    } else if (arm == "entities") {
        cc.use_stats = cc.use_sequences = cc.use_payload = false;
    } else if (arm == "stats") {
        cc.use_entities = cc.use_sequences = cc.use_payload = false;
    } else if (arm == "sequences") {
        cc.use_entities = cc.use_stats = cc.use_payload = false;
    } else if (arm == "payload") {
        cc.use_entities = cc.use_stats = cc.use_sequences = false;
    } else if (arm == "quantities") {
        cc.use_entities = cc.use_payload = false;
    } else {
        throw ConfigError("unknown ablation arm '" + arm + "'");
    }
    for (const auto& r : d.records) X.push_back(build_concat_baseline(r, tables, cc));
    return X;
}

struct FoldMetrics {
    int fold = 0;
    double macro_f1 = 0.0;
    double weighted_f1 = 0.0;
    std::size_t test_size = 0;
};

struct ArmReport {
    std::string arm;
    std::string classifier;
    std::size_t dimension = 0;
    std::size_t trainables = 0;
    std::vector<FoldMetrics> per_fold;
    double macro_f1_mean = 0.0;
    double weighted_f1_mean = 0.0;
};

/// Cross-validate one feature matrix under a shared fold plan. Fold features
/// are z-scored with statistics from the training folds only.
inline ArmReport evaluate_arm(const std::string& arm,
                              const std::vector<std::vector<double>>& X,
                              const std::vector<std::string>& y,
                              const std::vector<std::string>& ids,
                              const FoldPlan& plan, const PipelineConfig& cfg) {
    if (X.size() != y.size() || X.size() != ids.size())
        throw ArgumentError("evaluate_arm: input sizes disagree");
    ArmReport rep;
    rep.arm = arm;
    rep.classifier = cfg.classifier;
    rep.dimension = X.empty() ? 0 : X[0].size();

    std::vector<int> fold_of(X.size());
    for (std::size_t i = 0; i < X.size(); ++i) fold_of[i] = plan.fold_of(ids[i]);

    for (int f = 0; f < plan.k; ++f) {
        std::vector<std::vector<double>> train_X, test_X;
        std::vector<int> train_tags;
        std::vector<std::string> train_y, test_y;
        for (std::size_t i = 0; i < X.size(); ++i) {
            if (fold_of[i] == f) {
                test_X.push_back(X[i]);
                test_y.push_back(y[i]);
            } else {
                train_X.push_back(X[i]);
                train_tags.push_back(fold_of[i]);
                train_y.push_back(y[i]);
            }
        }
        if (train_X.empty() || test_X.empty())
            throw DataError("fold " + std::to_string(f) + " is degenerate");

        Normalizer norm = fit_normalizer(train_X, train_tags, f);
        for (auto& r : train_X) r = norm.transform(r);
        for (auto& r : test_X) r = norm.transform(r);

        std::vector<std::string> pred;
        if (cfg.classifier == "mlp") {
            MLPConfig mcfg = cfg.mlp;
            mcfg.seed = derive_seed(cfg.seed, "arm:" + arm + ":fold:" +
                                                  std::to_string(f));
            auto clf = train_mlp_classifier(train_X, train_y, mcfg);
            pred = clf.predict(detail::rows_tensor(test_X));
            rep.trainables = count_trainables(clf);
        } else if (cfg.classifier == "rf") {
            RFConfig rcfg = cfg.rf;
            rcfg.seed = derive_seed(cfg.seed, "arm:" + arm + ":fold:" +
                                                  std::to_string(f));
            auto rf = train_random_forest(train_X, train_y, rcfg);
            pred = rf.predict(test_X);
        } else {
            pred = knn_classify(train_X, train_y, test_X, cfg.knn_k);
        }
        auto scores = f1_scores(pred, test_y);
        rep.per_fold.push_back({f, scores.macro_f1, scores.weighted_f1, test_y.size()});
        rep.macro_f1_mean += scores.macro_f1;
        rep.weighted_f1_mean += scores.weighted_f1;
    }
    rep.macro_f1_mean /= static_cast<double>(plan.k);
    rep.weighted_f1_mean /= static_cast<double>(plan.k);
    return rep;
}

inline std::string fold_plan_hash(const FoldPlan& plan) {
    std::string blob = plan.grouping_key + "|" + std::to_string(plan.k);
    for (const auto& [id, f] : plan.assignments)
        blob += "|" + id + ":" + std::to_string(f);
    return detail::hex64(detail::fnv1a64(
        reinterpret_cast<const unsigned char*>(blob.data()), blob.size()));
}

struct ExperimentResult {
    FoldPlan plan;
    std::string plan_hash;
    std::vector<ArmReport> arms;
    double balance = 0.0;
};

/// Labeled view for supervised stages: the excluded class (if any) is dropped
/// here but still participates in entity/MAE training upstream.
inline Dataset supervised_view(const Dataset& d, const std::string& exclude_class) {
    std::vector<CanonicalRecord> keep;
    for (const auto& r : d.records) {
        if (!r.label) continue;
        if (!exclude_class.empty() && *r.label == exclude_class) continue;
        keep.push_back(r);
    }
    if (keep.empty()) throw DataError("no labeled records left for evaluation");
    return finalize_dataset(std::move(keep));
}

/**
 * The full experimental protocol: self-supervised stages on all records,
 * supervised cross-validation per arm on the labeled (non-excluded) view,
 * with one shared fold plan across arms.
 */
inline ExperimentResult run_experiment(const Dataset& d, const PipelineConfig& cfg,
                                       EmbeddingSet* embeddings_out = nullptr,
                                       int threads = 1) {
    const bool needs_model =
        std::count(cfg.arms.begin(), cfg.arms.end(), "mae") > 0;
    const bool needs_tables =
        cfg.use_entities &&
        (needs_model || std::count_if(cfg.arms.begin(), cfg.arms.end(),
                                      [](const std::string& a) {
                                          return a == "concat" || a == "entities";
                                      }) > 0);

    std::map<std::string, EmbeddingMatrix> tables;
    if (needs_tables) tables = train_entity_tables(d, cfg);

    std::optional<EmbeddingSet> embeddings;
    std::optional<PipelineModel> model;
    if (needs_model) {
        model.emplace(train_pipeline(d, cfg, tables));
        embeddings = pipeline_embed(*model, d);
        if (embeddings_out) *embeddings_out = *embeddings;
    }

    Dataset sup = supervised_view(d, cfg.exclude_class);
    ExperimentResult res;
    res.plan = stratified_session_kfold(sup, cfg.folds, derive_seed(cfg.seed, "folds"));
    res.plan_hash = fold_plan_hash(res.plan);
    std::vector<std::string> labels, ids;
    for (const auto& r : sup.records) {
        labels.push_back(*r.label);
        ids.push_back(r.sample_id);
    }
    res.balance = sup.classes.size() >= 2 ? balance_coefficient(labels) : 1.0;

    // arms are independent given the shared fold plan, so they may run in
    // parallel; seeds are derived per arm, so the schedule cannot change results
    res.arms.resize(cfg.arms.size());
    const int cap = std::max(1, threads);
    std::vector<std::exception_ptr> errors(cfg.arms.size());
    auto eval_one = [&](std::size_t i) {
        try {
            auto X = arm_features(cfg.arms[i], sup, tables,
                                  embeddings ? &*embeddings : nullptr, cfg);
            res.arms[i] = evaluate_arm(cfg.arms[i], X, labels, ids, res.plan, cfg);
        } catch (...) {
            errors[i] = std::current_exception();
        }
    };
    for (std::size_t start = 0; start < cfg.arms.size();
         start += static_cast<std::size_t>(cap)) {
        std::vector<std::thread> pool;
        const std::size_t end =
            std::min(cfg.arms.size(), start + static_cast<std::size_t>(cap));
        if (end - start == 1) {
            eval_one(start);
        } else {
            for (std::size_t i = start; i < end; ++i)
                pool.emplace_back(eval_one, i);
            for (auto& t : pool) t.join();
        }
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    return res;
}

inline nlohmann::ordered_json report_json(const ExperimentResult& r,
                                          const PipelineConfig& cfg) {
    nlohmann::ordered_json j;
    j["seed"] = cfg.seed;
    j["classifier"] = cfg.classifier;
    j["balance_coefficient"] = r.balance;
    j["fold_plan"] = {{"k", r.plan.k},
                      {"grouping", r.plan.grouping_key},
                      {"hash", r.plan_hash},
                      {"warnings", r.plan.warnings}};
    j["arms"] = nlohmann::ordered_json::object();
    for (const auto& arm : r.arms) {
        nlohmann::ordered_json a;
        a["classifier"] = arm.classifier;
        a["dimension"] = arm.dimension;
        a["trainables"] = arm.trainables;
        a["macro_f1_mean"] = arm.macro_f1_mean;
        a["weighted_f1_mean"] = arm.weighted_f1_mean;
        a["per_fold"] = nlohmann::ordered_json::array();
        for (const auto& f : arm.per_fold)
            a["per_fold"].push_back({{"fold", f.fold},
                                     {"macro_f1", f.macro_f1},
                                     {"weighted_f1", f.weighted_f1},
                                     {"test_size", f.test_size}});
        j["arms"][arm.arm] = std::move(a);
    }
    return j;
}

}  // namespace tmae
