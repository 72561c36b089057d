#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "trafficmae/errors.hpp"

// End-to-end exercises of the command-line tool: workflow composability,
// deterministic artifacts, and the exit-code contract (2 for configuration
// problems, 3 for data problems).

namespace fs = std::filesystem;

namespace {

std::string cli_path() {
    const char* p = std::getenv("TRAFFICMAE_BIN");
    if (!p) throw std::runtime_error("TRAFFICMAE_BIN is not set");
    return p;
}

struct RunResult {
    int exit_code = -1;
    std::string output;  // stdout + stderr
};

RunResult run(const std::string& args, const std::string& env = "") {
    const std::string log = (fs::temp_directory_path() / "tmae_cli_log.txt").string();
    const std::string cmd = env + (env.empty() ? "" : " ") + cli_path() + " " + args +
                            " > " + log + " 2>&1";
    const int rc = std::system(cmd.c_str());
    RunResult r;
    r.exit_code = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
    std::ifstream is(log);
    std::stringstream ss;
    ss << is.rdbuf();
    r.output = ss.str();
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    REQUIRE(is.good());
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

/// Shared workspace with a small config and synthesized dataset.
struct Workspace {
    fs::path dir;

    Workspace() {
        dir = fs::temp_directory_path() / "tmae_cli_ws";
        fs::remove_all(dir);
        fs::create_directories(dir);
        std::ofstream cfg(dir / "cfg.json");
        cfg << R"({
  "seed": 5,
  "synthetic": {"n_samples": 120, "n_classes": 3, "payload_len": 16,
                "seq_k": 8, "n_stats": 6, "sessions_per_class": 6},
  "skipgram": {"dimension": 8, "epochs": 3},
  "modalities": {"seq_k": 8},
  "mae": {"l1": 8, "l2": 32, "l3": 16, "l4": 8, "epochs": 1, "batch_size": 32},
  "folds": 3,
  "mlp": {"hidden1": 32, "hidden2": 16, "epochs": 5, "batch_size": 32},
  "arms": ["mae", "stats"]
})";
        cfg.close();
        REQUIRE(run("synth --config " + (dir / "cfg.json").string() + " --out " +
                    (dir / "d.jsonl").string())
                    .exit_code == 0);
    }

    std::string cfg() const { return (dir / "cfg.json").string(); }
    std::string data() const { return (dir / "d.jsonl").string(); }
    std::string at(const char* name) const { return (dir / name).string(); }
};

Workspace& ws() {
    static Workspace w;
    return w;
}

}  // namespace

TEST_CASE("cli: synth output is a valid canonical dataset and ingest round-trips") {
    auto r = run("ingest --in " + ws().data() + " --out " + ws().at("d2.jsonl"));
    CHECK(r.exit_code == 0);
    CHECK(slurp(ws().data()) == slurp(ws().at("d2.jsonl")));
}

TEST_CASE("cli: staged training equals one-shot training byte for byte") {
    REQUIRE(run("train-entities --config " + ws().cfg() + " --out-dir " +
                ws().at("ents"))
                .exit_code == 0);
    REQUIRE(run("train-mae --config " + ws().cfg() + " --out " + ws().at("m1.bin") +
                " --entities " + ws().at("ents"))
                .exit_code == 0);
    REQUIRE(run("train-mae --config " + ws().cfg() + " --out " + ws().at("m2.bin"))
                .exit_code == 0);
    CHECK(slurp(ws().at("m1.bin")) == slurp(ws().at("m2.bin")));
}

TEST_CASE("cli: embed composes with evaluate's embeddings output") {
    REQUIRE(run("embed --model " + ws().at("m1.bin") + " --dataset " + ws().data() +
                " --out " + ws().at("e1.csv"))
                .exit_code == 0);
    REQUIRE(run("evaluate --config " + ws().cfg() + " --out " + ws().at("r1.json") +
                " --embeddings-out " + ws().at("e2.csv"))
                .exit_code == 0);
    CHECK(slurp(ws().at("e1.csv")) == slurp(ws().at("e2.csv")));
}

TEST_CASE("cli: evaluation reports are byte-identical across reruns and threads") {
    REQUIRE(run("evaluate --config " + ws().cfg() + " --out " + ws().at("r2.json"))
                .exit_code == 0);
    CHECK(slurp(ws().at("r1.json")) == slurp(ws().at("r2.json")));
    REQUIRE(run("evaluate --config " + ws().cfg() + " --out " + ws().at("r3.json"),
                "TRAFFICMAE_THREADS=2")
                .exit_code == 0);
    CHECK(slurp(ws().at("r1.json")) == slurp(ws().at("r3.json")));
}

TEST_CASE("cli: purity writes a curve over the requested neighborhood sizes") {
    auto r = run("purity --embeddings " + ws().at("e1.csv") + " --dataset " +
                 ws().data() + " --k-list 1,5 --out " + ws().at("p.csv"));
    REQUIRE(r.exit_code == 0);
    const std::string csv = slurp(ws().at("p.csv"));
    CHECK(csv.rfind("K,purity\n1,", 0) == 0);
    CHECK(csv.find("\n5,") != std::string::npos);
}

TEST_CASE("cli: configuration problems exit with code 2 and name the issue") {
    {
        std::ofstream bad(ws().at("bad.json"));
        bad << R"({"seed": 1, "mystery_knob": 3})";
    }
    auto r = run("evaluate --config " + ws().at("bad.json") + " --out " +
                 ws().at("x.json"));
    CHECK(r.exit_code == 2);
    CHECK(r.output.find("mystery_knob") != std::string::npos);

    r = run("evaluate --config " + ws().at("nonexistent.json") + " --out " +
            ws().at("x.json"));
    CHECK(r.exit_code == 2);

    r = run("evaluate --config " + ws().cfg());  // missing required --out
    CHECK(r.exit_code == 2);

    r = run("purity --embeddings " + ws().at("e1.csv") + " --dataset " + ws().data() +
            " --k-list 9999 --out " + ws().at("p2.csv"));
    CHECK(r.exit_code == 2);

    r = run("evaluate --config " + ws().cfg() + " --out " + ws().at("x.json"),
            "TRAFFICMAE_THREADS=banana");
    CHECK(r.exit_code == 2);
    CHECK(r.output.find("TRAFFICMAE_THREADS") != std::string::npos);
}

TEST_CASE("cli: data problems exit with code 3 and a diagnostic, not a crash") {
    {
        std::ofstream bad(ws().at("bad.jsonl"));
        bad << "{\"sample_id\": \"a\", \"payload\": \"zz\"}\n";
    }
    auto r = run("ingest --in " + ws().at("bad.jsonl") + " --out " +
                 ws().at("y.jsonl"));
    CHECK(r.exit_code == 3);
    CHECK(r.output.find("line 1") != std::string::npos);

    {
        std::ofstream garbage(ws().at("garbage.bin"), std::ios::binary);
        garbage << "not a container at all";
    }
    r = run("embed --model " + ws().at("garbage.bin") + " --dataset " + ws().data() +
            " --out " + ws().at("z.csv"));
    CHECK(r.exit_code == 3);

    r = run("ingest --format pcap --in " + ws().data() + " --out " +
            ws().at("y.jsonl"));
    CHECK(r.exit_code == 2);  // unsupported format is a config problem
}

TEST_CASE("cli: ablation covers the default arms in one shared protocol") {
    {
        std::ofstream cfg(ws().at("ab.json"));
        // no explicit arms: ablate falls back to the full arm set
        cfg << R"({
  "seed": 5,
  "synthetic": {"n_samples": 120, "n_classes": 3, "payload_len": 16,
                "seq_k": 8, "n_stats": 6, "sessions_per_class": 6},
  "skipgram": {"dimension": 8, "epochs": 3},
  "modalities": {"seq_k": 8},
  "mae": {"l1": 8, "l2": 32, "l3": 16, "l4": 8, "epochs": 1, "batch_size": 32},
  "folds": 3,
  "mlp": {"hidden1": 32, "hidden2": 16, "epochs": 5, "batch_size": 32}
})";
    }
    auto r = run("ablate --config " + ws().at("ab.json") + " --out " +
                 ws().at("ab.json.out"), "TRAFFICMAE_THREADS=3");
    REQUIRE(r.exit_code == 0);
    const std::string report = slurp(ws().at("ab.json.out"));
    for (const char* arm :
         {"\"mae\"", "\"concat\"", "\"entities\"", "\"stats\"", "\"sequences\"",
          "\"payload\""})
        CHECK(report.find(arm) != std::string::npos);
    // every arm is scored under the same fold-plan hash
    CHECK(report.find("\"hash\"") != std::string::npos);
}

TEST_CASE("cli: gridsearch sweeps widths into a csv table") {
    auto r = run("gridsearch --config " + ws().cfg() + " --l1 8 --l4 4,8 --out " +
                 ws().at("grid.csv"), "TRAFFICMAE_THREADS=2");
    REQUIRE(r.exit_code == 0);
    const std::string csv = slurp(ws().at("grid.csv"));
    CHECK(csv.rfind("l1,l4,macro_f1\n", 0) == 0);
    CHECK(csv.find("\n8,4,") != std::string::npos);
    CHECK(csv.find("\n8,8,") != std::string::npos);

    r = run("gridsearch --config " + ws().cfg() + " --l1 8 --l4 64 --out " +
            ws().at("grid2.csv"));
    CHECK(r.exit_code == 2);  // l4 must stay below l3
}

TEST_CASE("cli: artifacts come with a provenance manifest") {
    const std::string manifest = slurp(ws().at("r1.json.manifest.json"));
    CHECK(manifest.find("\"config_hash\"") != std::string::npos);
    CHECK(manifest.find("\"seed\": 5") != std::string::npos);
    CHECK(manifest.find("\"created_utc\"") != std::string::npos);
    // the report itself carries no timestamp, keeping reruns byte-identical
    CHECK(slurp(ws().at("r1.json")).find("created_utc") == std::string::npos);
}
