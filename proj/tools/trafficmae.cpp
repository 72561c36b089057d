// trafficmae: multi-modal representation learning for network traffic.
//
// Subcommands cover the whole workflow: synthesizing or ingesting canonical
// datasets, training entity embeddings and the multimodal autoencoder,
// producing embeddings, and running evaluations, ablations, purity curves
// and grid searches. All randomness flows from the config seed; staged runs
// reproduce single-shot runs exactly.

#include <CLI11.hpp>

#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "trafficmae/pipeline.hpp"

namespace {

constexpr const char* kVersion = "1.0.0";

int thread_cap() {
    const char* env = std::getenv("TRAFFICMAE_THREADS");
    if (!env || !*env) return 1;
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (*end != '\0' || v < 1)
        throw tmae::ConfigError(
            "TRAFFICMAE_THREADS must be a positive integer, got '" +
            std::string(env) + "'");
    return static_cast<int>(v);
}

nlohmann::json load_config_json(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw tmae::ConfigError("cannot open config file '" + path + "'");
    try {
        return nlohmann::json::parse(is);
    } catch (const nlohmann::json::parse_error& e) {
        throw tmae::ConfigError("config file '" + path + "': " + e.what());
    }
}

std::string config_hash(const nlohmann::json& j) {
    const std::string s = j.dump();
    return tmae::detail::hex64(tmae::detail::fnv1a64(
        reinterpret_cast<const unsigned char*>(s.data()), s.size()));
}

/// Provenance manifest written next to artifacts. Timestamps live here and
/// only here so the artifacts themselves stay byte-reproducible.
void write_manifest(const std::string& artifact_path, const nlohmann::json& cfg,
                    std::uint64_t seed) {
    nlohmann::ordered_json m;
    m["tool"] = "trafficmae";
    m["version"] = kVersion;
    m["container_format_version"] = tmae::kFormatVersion;
    m["seed"] = seed;
    m["config_hash"] = config_hash(cfg);
    char buf[32];
    std::time_t now = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&now, &tm);
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    m["created_utc"] = buf;
    std::ofstream os(artifact_path + ".manifest.json");
    if (!os)
        throw tmae::DataError("cannot write manifest for '" + artifact_path + "'");
    os << m.dump(2) << "\n";
}

void write_text(const std::string& path, const std::string& body) {
    std::ofstream os(path);
    if (!os) throw tmae::DataError("cannot open '" + path + "' for writing");
    os << body;
}

std::map<std::string, tmae::EmbeddingMatrix> load_entity_dir(
    const std::string& dir, const std::vector<std::string>& keys) {
    std::map<std::string, tmae::EmbeddingMatrix> tables;
    for (const auto& key : keys) {
        const std::string path = dir + "/entity_" + key + ".bin";
        if (!std::filesystem::exists(path))
            throw tmae::DataError("entity table not found: " + path);
        tables[key] = tmae::load_entity_table(path);
    }
    return tables;
}

// -------------------------------------------------------------------------
// Subcommand bodies (each throws; main maps exceptions to exit codes)
// -------------------------------------------------------------------------

struct CommonOpts {
    std::string config_path;
    std::string out;
};

void cmd_synth(const std::string& config_path, const std::string& out) {
    nlohmann::json j = load_config_json(config_path);
    tmae::PipelineConfig cfg = tmae::parse_pipeline_config(j);
    if (!cfg.use_synthetic)
        throw tmae::ConfigError("synth requires a 'synthetic' config (or defaults), "
                                "not a 'dataset' path");
    tmae::Dataset d = tmae::prepare_dataset(cfg);
    tmae::save_canonical(out, d);
    write_manifest(out, j, cfg.seed);
    std::cout << "wrote " << d.size() << " records to " << out << "\n";
}

void cmd_ingest(const std::string& format, const std::string& in,
                const std::string& out) {
    if (format != "canonical")
        throw tmae::ConfigError("unsupported ingest format '" + format +
                                "' (supported: canonical)");
    tmae::Dataset d = tmae::load_canonical(in);
    tmae::save_canonical(out, d);
    std::cout << "validated and wrote " << d.size() << " records to " << out << "\n";
}

void cmd_train_entities(const std::string& config_path, const std::string& out_dir) {
    nlohmann::json j = load_config_json(config_path);
    tmae::PipelineConfig cfg = tmae::parse_pipeline_config(j);
    tmae::Dataset d = tmae::prepare_dataset(cfg);
    auto tables = tmae::train_entity_tables(d, cfg);
    std::filesystem::create_directories(out_dir);
    for (const auto& [key, table] : tables) {
        const std::string path = out_dir + "/entity_" + key + ".bin";
        tmae::save_entity_table(table, key, path);
        std::cout << "wrote " << table.rows() << " x " << table.dimension
                  << " table to " << path << "\n";
    }
    write_manifest(out_dir + "/entities", j, cfg.seed);
}

void cmd_train_mae(const std::string& config_path, const std::string& out,
                   const std::string& entities_dir) {
    nlohmann::json j = load_config_json(config_path);
    tmae::PipelineConfig cfg = tmae::parse_pipeline_config(j);
    tmae::Dataset d = tmae::prepare_dataset(cfg);
    std::map<std::string, tmae::EmbeddingMatrix> tables;
    if (!entities_dir.empty())
        tables = load_entity_dir(entities_dir, cfg.entity_keys);
    tmae::PipelineModel model = tmae::train_pipeline(d, cfg, std::move(tables));
    tmae::save_pipeline_model(model, out);
    write_manifest(out, j, cfg.seed);
    std::cout << "trained autoencoder (" << model.mae.trainable_count()
              << " trainables) -> " << out << "\n";
}

void cmd_embed(const std::string& model_path, const std::string& dataset_path,
               const std::string& out) {
    tmae::PipelineModel model = tmae::load_pipeline_model(model_path);
    tmae::Dataset d = tmae::load_canonical(dataset_path);
    tmae::EmbeddingSet e = tmae::pipeline_embed(model, d);
    tmae::write_embeddings_csv(out, e);
    std::cout << "wrote " << e.ids.size() << " x " << e.dim << " embeddings to "
              << out << "\n";
}

void cmd_evaluate(const std::string& config_path, const std::string& out,
                  const std::string& embeddings_out, const std::string& model_out,
                  bool is_ablation) {
    nlohmann::json j = load_config_json(config_path);
    tmae::PipelineConfig cfg = tmae::parse_pipeline_config(j);
    if (is_ablation && !j.contains("arms"))
        cfg.arms = {"mae", "concat", "entities", "stats", "sequences", "payload"};
    tmae::Dataset d = tmae::prepare_dataset(cfg);

    tmae::EmbeddingSet embeddings;
    tmae::ExperimentResult res =
        tmae::run_experiment(d, cfg, &embeddings, thread_cap());
    nlohmann::ordered_json report = tmae::report_json(res, cfg);
    report["config_hash"] = config_hash(j);
    write_text(out, report.dump(2) + "\n");
    write_manifest(out, j, cfg.seed);
    if (!embeddings_out.empty()) {
        if (embeddings.ids.empty())
            throw tmae::ConfigError(
                "--embeddings-out requires the 'mae' arm to be enabled");
        tmae::write_embeddings_csv(embeddings_out, embeddings);
    }
    if (!model_out.empty()) {
        // rerun the training stages deterministically to capture the model
        auto tables = cfg.use_entities
                          ? tmae::train_entity_tables(d, cfg)
                          : std::map<std::string, tmae::EmbeddingMatrix>{};
        tmae::save_pipeline_model(tmae::train_pipeline(d, cfg, std::move(tables)),
                                  model_out);
        write_manifest(model_out, j, cfg.seed);
    }
    for (const auto& arm : res.arms)
        std::cout << arm.arm << ": macro_f1=" << arm.macro_f1_mean
                  << " weighted_f1=" << arm.weighted_f1_mean << "\n";
}

void cmd_purity(const std::string& embeddings_path, const std::string& dataset_path,
                std::vector<std::size_t> ks, const std::string& out) {
    if (ks.empty()) ks = {1, 3, 5, 10, 20};
    tmae::EmbeddingSet e = tmae::read_embeddings_csv(embeddings_path);
    tmae::Dataset d = tmae::load_canonical(dataset_path);
    std::map<std::string, std::string> label_of;
    for (const auto& r : d.records)
        if (r.label) label_of[r.sample_id] = *r.label;
    std::vector<std::vector<double>> X;
    std::vector<std::string> y;
    for (std::size_t i = 0; i < e.ids.size(); ++i) {
        auto it = label_of.find(e.ids[i]);
        if (it == label_of.end())
            throw tmae::DataError("no label for embedded sample '" + e.ids[i] + "'");
        X.emplace_back(e.row(i), e.row(i) + e.dim);
        y.push_back(it->second);
    }
    std::string csv = "K,purity\n";
    for (std::size_t k : ks) {
        std::vector<std::string> warnings;
        const double p = tmae::knn_class_probability(X, y, k, &warnings);
        for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
        csv += std::to_string(k) + "," + std::to_string(p) + "\n";
        std::cout << "K=" << k << " purity=" << p << "\n";
    }
    write_text(out, csv);
}

void cmd_gridsearch(const std::string& config_path, std::vector<std::size_t> l1s,
                    std::vector<std::size_t> l4s, const std::string& out) {
    nlohmann::json j = load_config_json(config_path);
    tmae::PipelineConfig base = tmae::parse_pipeline_config(j);
    if (l1s.empty()) l1s = {16, 32, 64};
    if (l4s.empty()) l4s = {32, 64, 128};
    base.arms = {"mae"};
    tmae::Dataset d = tmae::prepare_dataset(base);

    struct Cell {
        std::size_t l1, l4;
        double macro_f1 = 0.0;
    };
    std::vector<Cell> cells;
    for (std::size_t l1 : l1s)
        for (std::size_t l4 : l4s) {
            if (l4 >= base.mae.l3)
                throw tmae::ConfigError("gridsearch: l4=" + std::to_string(l4) +
                                        " must stay below l3=" +
                                        std::to_string(base.mae.l3));
            cells.push_back({l1, l4, 0.0});
        }

    const int cap = thread_cap();
    std::vector<std::exception_ptr> errors(cells.size());
    auto run_cell = [&](std::size_t i) {
        try {
            tmae::PipelineConfig cfg = base;
            cfg.mae.l1 = cells[i].l1;
            cfg.mae.l4 = cells[i].l4;
            tmae::ExperimentResult r = tmae::run_experiment(d, cfg);
            cells[i].macro_f1 = r.arms.at(0).macro_f1_mean;
        } catch (...) {
            errors[i] = std::current_exception();
        }
    };
    for (std::size_t start = 0; start < cells.size();
         start += static_cast<std::size_t>(cap)) {
        const std::size_t end =
            std::min(cells.size(), start + static_cast<std::size_t>(cap));
        if (end - start == 1) {
            run_cell(start);
        } else {
            std::vector<std::thread> pool;
            for (std::size_t i = start; i < end; ++i) pool.emplace_back(run_cell, i);
            for (auto& t : pool) t.join();
        }
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);

    std::string csv = "l1,l4,macro_f1\n";
    for (const auto& c : cells) {
        char line[96];
        std::snprintf(line, sizeof line, "%zu,%zu,%.17g\n", c.l1, c.l4, c.macro_f1);
        csv += line;
        std::cout << "l1=" << c.l1 << " l4=" << c.l4 << " macro_f1=" << c.macro_f1
                  << "\n";
    }
    write_text(out, csv);
    write_manifest(out, j, base.seed);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"multi-modal representation learning for network traffic"};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);

    std::string config_path, out, in, format = "canonical", entities_dir;
    std::string model_path, dataset_path, embeddings_path, embeddings_out, model_out;
    std::vector<std::size_t> k_list, l1_list, l4_list;

    auto* synth = app.add_subcommand("synth", "generate a synthetic canonical dataset");
    synth->add_option("--config", config_path, "experiment config (json)")->required();
    synth->add_option("--out", out, "output dataset (jsonl)")->required();

    auto* ingest = app.add_subcommand("ingest", "validate and rewrite a dataset");
    ingest->add_option("--format", format, "input format (canonical)");
    ingest->add_option("--in", in, "input path")->required();
    ingest->add_option("--out", out, "output dataset (jsonl)")->required();

    auto* te = app.add_subcommand("train-entities", "train entity embedding tables");
    te->add_option("--config", config_path, "experiment config (json)")->required();
    te->add_option("--out-dir", out, "output directory")->required();

    auto* tm = app.add_subcommand("train-mae", "train the multimodal autoencoder");
    tm->add_option("--config", config_path, "experiment config (json)")->required();
    tm->add_option("--out", out, "output model path")->required();
    tm->add_option("--entities", entities_dir,
                   "directory with pre-trained entity tables");

    auto* em = app.add_subcommand("embed", "embed a dataset with a trained model");
    em->add_option("--model", model_path, "trained model path")->required();
    em->add_option("--dataset", dataset_path, "canonical dataset (jsonl)")->required();
    em->add_option("--out", out, "output embeddings (csv)")->required();

    auto* ev = app.add_subcommand("evaluate", "run the evaluation protocol");
    ev->add_option("--config", config_path, "experiment config (json)")->required();
    ev->add_option("--out", out, "output report (json)")->required();
    ev->add_option("--embeddings-out", embeddings_out, "also write embeddings (csv)");
    ev->add_option("--model-out", model_out, "also save the trained model");

    auto* ab = app.add_subcommand("ablate", "run the full modality ablation");
    ab->add_option("--config", config_path, "experiment config (json)")->required();
    ab->add_option("--out", out, "output report (json)")->required();

    auto* pu = app.add_subcommand("purity", "neighborhood purity of embeddings");
    pu->add_option("--embeddings", embeddings_path, "embeddings (csv)")->required();
    pu->add_option("--dataset", dataset_path, "labeled canonical dataset (jsonl)")
        ->required();
    pu->add_option("--k-list", k_list, "neighborhood sizes")->delimiter(',');
    pu->add_option("--out", out, "output curve (csv)")->required();

    auto* gs = app.add_subcommand("gridsearch", "sweep autoencoder widths");
    gs->add_option("--config", config_path, "experiment config (json)")->required();
    gs->add_option("--l1", l1_list, "adapter widths to sweep")->delimiter(',');
    gs->add_option("--l4", l4_list, "code widths to sweep")->delimiter(',');
    gs->add_option("--out", out, "output table (csv)")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    }

    try {
        if (synth->parsed()) cmd_synth(config_path, out);
        else if (ingest->parsed()) cmd_ingest(format, in, out);
        else if (te->parsed()) cmd_train_entities(config_path, out);
        else if (tm->parsed()) cmd_train_mae(config_path, out, entities_dir);
        else if (em->parsed()) cmd_embed(model_path, dataset_path, out);
        else if (ev->parsed())
            cmd_evaluate(config_path, out, embeddings_out, model_out, false);
        else if (ab->parsed()) cmd_evaluate(config_path, out, "", "", true);
        else if (pu->parsed()) cmd_purity(embeddings_path, dataset_path, k_list, out);
        else if (gs->parsed()) cmd_gridsearch(config_path, l1_list, l4_list, out);
    } catch (const tmae::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const tmae::ArgumentError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const tmae::ParseError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const tmae::SchemaError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const tmae::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const tmae::StateError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const tmae::ShapeError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const tmae::VocabularyError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const tmae::VersionError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const tmae::CorruptionError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
