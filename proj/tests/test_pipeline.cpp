#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>

#include "test_helpers.hpp"
#include "trafficmae/pipeline.hpp"

using namespace tmae;

namespace {

/// Small everything: the point here is wiring, not model quality.
PipelineConfig tiny_config() {
    PipelineConfig c;
    c.seed = 7;
    c.synth.n_samples = 120;
    c.synth.n_classes = 3;
    c.synth.payload_len = 16;
    c.synth.seq_k = 8;
    c.synth.n_stats = 6;
    c.synth.sessions_per_class = 6;
    c.skipgram.dimension = 8;
    c.skipgram.epochs = 3;
    c.payload_n = 16;
    c.seq_k = 8;
    c.mae.l1 = 8;
    c.mae.l2 = 32;
    c.mae.l3 = 16;
    c.mae.l4 = 8;
    c.mae.epochs = 2;
    c.mae.batch_size = 32;
    c.folds = 3;
    c.mlp.hidden1 = 32;
    c.mlp.hidden2 = 16;
    c.mlp.epochs = 10;
    c.mlp.batch_size = 32;
    c.arms = {"mae", "concat", "stats"};
    return c;
}

std::string temp_path(const char* name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("pipeline config parsing validates fields and values") {
    nlohmann::json j = {{"seed", 3},
                        {"folds", 4},
                        {"classifier", "rf"},
                        {"mae", {{"l1", 16}, {"l4", 32}}},
                        {"arms", {"concat"}}};
    PipelineConfig c = parse_pipeline_config(j);
    CHECK(c.seed == 3);
    CHECK(c.folds == 4);
    CHECK(c.classifier == "rf");
    CHECK(c.mae.l1 == 16);
    CHECK(c.mae.l4 == 32);
    CHECK(c.mae.l2 == 512);  // default survives partial override
    CHECK(c.arms == std::vector<std::string>{"concat"});
    CHECK(c.use_synthetic);

    CHECK_THROWS_AS(parse_pipeline_config({{"seed", 1}, {"bogus", 2}}), ConfigError);
    CHECK_THROWS_WITH(parse_pipeline_config({{"seed", 1}, {"bogus", 2}}),
                      Catch::Matchers::ContainsSubstring("bogus"));
    CHECK_THROWS_AS(parse_pipeline_config({{"folds", 4}}), ConfigError);  // no seed
    CHECK_THROWS_AS(parse_pipeline_config(
                        {{"seed", 1}, {"dataset", "x.jsonl"}, {"synthetic", {{"n_samples", 10}}}}),
                    ConfigError);
    CHECK_THROWS_AS(parse_pipeline_config({{"seed", 1}, {"classifier", "svm"}}),
                    ConfigError);
    CHECK_THROWS_AS(parse_pipeline_config({{"seed", 1}, {"folds", 1}}), ConfigError);
    CHECK_THROWS_AS(
        parse_pipeline_config({{"seed", 1}, {"synthetic", {{"signal", "nope"}}}}),
        ConfigError);
    CHECK_THROWS_AS(parse_pipeline_config({{"seed", 1}, {"mlp", {{"width", 9}}}}),
                    ConfigError);
}

TEST_CASE("stage seeds are stable and distinct per tag") {
    CHECK(derive_seed(5, "mae-train") == derive_seed(5, "mae-train"));
    CHECK(derive_seed(5, "mae-train") != derive_seed(5, "entity:ip"));
    CHECK(derive_seed(5, "mae-train") != derive_seed(6, "mae-train"));
}

TEST_CASE("full experiment produces a coherent, deterministic report") {
    PipelineConfig cfg = tiny_config();
    Dataset d = prepare_dataset(cfg);
    REQUIRE(d.size() == 120);

    ExperimentResult r1 = run_experiment(d, cfg);
    REQUIRE(r1.arms.size() == 3);
    CHECK(r1.plan.k == 3);
    CHECK(r1.plan_hash.size() == 16);
    CHECK(r1.balance == Catch::Approx(1.0));  // balanced synthetic classes
    for (const auto& arm : r1.arms) {
        CHECK(arm.per_fold.size() == 3);
        CHECK(arm.macro_f1_mean >= 0.0);
        CHECK(arm.macro_f1_mean <= 1.0);
        std::size_t total = 0;
        for (const auto& f : arm.per_fold) total += f.test_size;
        CHECK(total == 120);
    }
    CHECK(r1.arms[0].dimension == cfg.mae.l4);
    // concat: 2 entity tables x 8 + 6 stats + 8x4 sequences + 16 payload bytes
    CHECK(r1.arms[1].dimension == 2 * 8 + 6 + 8 * 4 + 16);
    CHECK(r1.arms[2].dimension == 6);
    CHECK(r1.arms[0].trainables > 0);  // mlp classifier size is reported

    ExperimentResult r2 = run_experiment(d, cfg);
    CHECK(report_json(r1, cfg).dump() == report_json(r2, cfg).dump());

    PipelineConfig other = cfg;
    other.seed = 8;
    ExperimentResult r3 = run_experiment(d, other);
    CHECK(report_json(r1, cfg).dump() != report_json(r3, other).dump());
}

TEST_CASE("staged runs match the single-shot pipeline") {
    PipelineConfig cfg = tiny_config();
    Dataset d = prepare_dataset(cfg);

    PipelineModel one_shot = train_pipeline(d, cfg);
    auto tables = train_entity_tables(d, cfg);
    PipelineModel staged = train_pipeline(d, cfg, tables);

    EmbeddingSet a = pipeline_embed(one_shot, d);
    EmbeddingSet b = pipeline_embed(staged, d);
    REQUIRE(a.values.size() == b.values.size());
    for (std::size_t i = 0; i < a.values.size(); ++i)
        CHECK(a.values[i] == b.values[i]);
}

TEST_CASE("pipeline model round-trips bit-exactly through disk") {
    PipelineConfig cfg = tiny_config();
    Dataset d = prepare_dataset(cfg);
    PipelineModel model = train_pipeline(d, cfg);
    EmbeddingSet before = pipeline_embed(model, d);

    const std::string path = temp_path("tmae_pipeline_model.bin");
    save_pipeline_model(model, path);
    PipelineModel loaded = load_pipeline_model(path);
    EmbeddingSet after = pipeline_embed(loaded, d);
    std::remove(path.c_str());

    REQUIRE(before.values.size() == after.values.size());
    for (std::size_t i = 0; i < before.values.size(); ++i)
        CHECK(before.values[i] == after.values[i]);
    CHECK(before.ids == after.ids);
}

TEST_CASE("supervised view drops the excluded class but keeps the rest") {
    PipelineConfig cfg = tiny_config();
    Dataset d = prepare_dataset(cfg);
    const std::string excluded = *d.records[0].label;
    Dataset sup = supervised_view(d, excluded);
    CHECK(sup.size() == 80);
    for (const auto& r : sup.records) CHECK(*r.label != excluded);
    CHECK(supervised_view(d, "").size() == 120);
}

TEST_CASE("arm feature construction rejects unknown arms") {
    PipelineConfig cfg = tiny_config();
    Dataset d = prepare_dataset(cfg);
    auto tables = train_entity_tables(d, cfg);
    CHECK_THROWS_AS(arm_features("mystery", d, tables, nullptr, cfg), ConfigError);
    CHECK_THROWS_AS(arm_features("mae", d, tables, nullptr, cfg), ConfigError);

    auto stats = arm_features("stats", d, tables, nullptr, cfg);
    REQUIRE(stats.size() == 120);
    CHECK(stats[0].size() == 6);
    auto ents = arm_features("entities", d, tables, nullptr, cfg);
    CHECK(ents[0].size() == 16);
    auto quant = arm_features("quantities", d, tables, nullptr, cfg);
    CHECK(quant[0].size() == 6 + 8 * 4);
}

TEST_CASE("fold plan hash reflects the assignment content") {
    PipelineConfig cfg = tiny_config();
    Dataset d = prepare_dataset(cfg);
    FoldPlan p1 = stratified_session_kfold(d, 3, 1);
    FoldPlan p2 = stratified_session_kfold(d, 3, 1);
    FoldPlan p3 = stratified_session_kfold(d, 3, 2);
    CHECK(fold_plan_hash(p1) == fold_plan_hash(p2));
    CHECK(fold_plan_hash(p1) != fold_plan_hash(p3));
}
