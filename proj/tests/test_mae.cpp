#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "test_helpers.hpp"
#include "trafficmae/mae.hpp"

using namespace tmae;

namespace {

MAEConfig tiny_config() {
    MAEConfig cfg;
    cfg.l1 = 8;
    cfg.l2 = 16;
    cfg.l3 = 12;
    cfg.l4 = 6;
    cfg.epochs = 5;
    cfg.batch_size = 8;
    cfg.seed = 3;
    return cfg;
}

std::vector<std::unique_ptr<Adapter>> tiny_adapters(std::size_t l1, Rng& rng) {
    std::vector<std::unique_ptr<Adapter>> a;
    a.push_back(build_stats_adapter(6, l1, rng));
    a.push_back(build_entity_adapter(10, l1, rng, "ip"));
    return a;
}

// low-rank data: both modalities are linear images of 3 latent factors, so a
// 6-wide bottleneck can reconstruct them well
MultimodalData tiny_data(std::size_t N, Rng& rng) {
    const std::size_t L = 3;
    auto latents = test::random_vec(N * L, rng);
    auto proj_s = test::random_vec(L * 6, rng);
    auto proj_i = test::random_vec(L * 10, rng);
    std::vector<double> sv(N * 6, 0.0), iv(N * 10, 0.0);
    for (std::size_t r = 0; r < N; ++r)
        for (std::size_t l = 0; l < L; ++l) {
            for (std::size_t c = 0; c < 6; ++c)
                sv[r * 6 + c] += latents[r * L + l] * proj_s[l * 6 + c];
            for (std::size_t c = 0; c < 10; ++c)
                iv[r * 10 + c] += latents[r * L + l] * proj_i[l * 10 + c];
        }
    MultimodalData d;
    ModalityBatch stats, ip;
    stats.values = Tensor::from(std::move(sv), {N, 6});
    ip.values = Tensor::from(std::move(iv), {N, 10});
    d["statistics"] = std::move(stats);
    d["ip"] = std::move(ip);
    return d;
}

std::vector<std::string> make_ids(std::size_t N) {
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < N; ++i) ids.push_back("s" + std::to_string(i));
    return ids;
}

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("assembly validates its configuration") {
    Rng rng(1);
    MAEConfig cfg = tiny_config();

    CHECK_THROWS_AS(assemble_mae({}, cfg, rng), ConfigError);

    MAEConfig wide = cfg;
    wide.l3 = wide.l2;  // funnel must narrow strictly
    CHECK_THROWS_AS(assemble_mae(tiny_adapters(cfg.l1, rng), wide, rng), ConfigError);

    // adapter width must match the configured l1
    CHECK_THROWS_AS(assemble_mae(tiny_adapters(4, rng), cfg, rng), ConfigError);

    std::vector<std::unique_ptr<Adapter>> dup;
    dup.push_back(build_stats_adapter(6, cfg.l1, rng));
    dup.push_back(build_stats_adapter(6, cfg.l1, rng));
    CHECK_THROWS_AS(assemble_mae(std::move(dup), cfg, rng), ConfigError);
}

TEST_CASE("integration input width is the sum of adapted widths") {
    Rng rng(2);
    MAEConfig cfg = tiny_config();
    std::vector<std::unique_ptr<Adapter>> a;
    a.push_back(build_stats_adapter(6, cfg.l1, rng));
    a.push_back(build_entity_adapter(10, cfg.l1, rng, "ip"));
    a.push_back(build_entity_adapter(5, cfg.l1, rng, "port"));
    auto model = assemble_mae(std::move(a), cfg, rng);

    for (const auto& [name, t] : model.params()) {
        if (name == "integration.enc_l2.W")
            CHECK(t.shape() == Shape{cfg.l2, 3 * cfg.l1});  // 3 x 8 = 24 in
        if (name == "integration.fanout.W")
            CHECK(t.shape() == Shape{3 * cfg.l1, cfg.l2});
    }

    // trainables = adapters + both integration stacks, by closed form
    auto dense = [](std::size_t in, std::size_t out) { return in * out + out; };
    std::size_t adapters_n = 0;
    for (const auto& ad : model.adapters())
        adapters_n += count_scalars(adapter_params(*ad));
    const std::size_t expected = adapters_n + dense(24, 16) + dense(16, 12) +
                                 dense(12, 6) + dense(6, 12) + dense(12, 16) +
                                 dense(16, 24);
    CHECK(model.trainable_count() == expected);
}

TEST_CASE("loss weights are proportional to reconstructed feature counts") {
    Rng rng(3);
    MAEConfig cfg = tiny_config();
    auto model = assemble_mae(tiny_adapters(cfg.l1, rng), cfg, rng);
    REQUIRE(model.loss_weights().size() == 2);
    CHECK(model.loss_weights()[0] == Catch::Approx(6.0 / 16.0));
    CHECK(model.loss_weights()[1] == Catch::Approx(10.0 / 16.0));

    double sum = 0.0;
    for (double w : model.loss_weights()) sum += w;
    CHECK(sum == Catch::Approx(1.0));
}

TEST_CASE("missing or misaligned modalities are reported by name") {
    Rng rng(4);
    MAEConfig cfg = tiny_config();
    auto model = assemble_mae(tiny_adapters(cfg.l1, rng), cfg, rng);

    MultimodalData data = tiny_data(4, rng);
    data.erase("ip");
    CHECK_THROWS_WITH(model.sample_count(data),
                      Catch::Matchers::ContainsSubstring("ip"));

    MultimodalData skewed = tiny_data(4, rng);
    ModalityBatch shorter;
    shorter.values = Tensor::from(test::random_vec(3 * 10, rng), {3, 10});
    skewed["ip"] = std::move(shorter);
    CHECK_THROWS_AS(model.sample_count(skewed), DataError);
}

TEST_CASE("encode and decode shapes round the fan-out") {
    Rng rng(5);
    MAEConfig cfg = tiny_config();
    auto model = assemble_mae(tiny_adapters(cfg.l1, rng), cfg, rng);
    MultimodalData data = tiny_data(7, rng);

    std::vector<std::size_t> idx{0, 2, 4};
    auto batch = model.gather(data, idx);
    Tensor code = model.encode(batch);
    REQUIRE(code.shape() == Shape{3, cfg.l4});

    auto recon = model.decode(code);
    REQUIRE(recon.size() == 2);
    CHECK(recon[0].shape() == Shape{3, 6});
    CHECK(recon[1].shape() == Shape{3, 10});
}

TEST_CASE("training reduces the weighted reconstruction loss") {
    Rng rng(6);
    MAEConfig cfg = tiny_config();
    cfg.epochs = 40;
    auto model = assemble_mae(tiny_adapters(cfg.l1, rng), cfg, rng);
    MultimodalData data = tiny_data(32, rng);

    auto result = train_mae(model, data);
    REQUIRE(result.epoch_loss.size() == 40);
    CHECK(result.epoch_loss.back() < 0.5 * result.epoch_loss.front());
    for (double l : result.epoch_loss) CHECK(std::isfinite(l));

    CHECK_THROWS_AS(train_mae(model, MultimodalData{}), DataError);
}

TEST_CASE("training and embedding are deterministic per seed") {
    MAEConfig cfg = tiny_config();
    cfg.epochs = 6;

    auto run = [&](std::uint64_t seed) {
        MAEConfig c = cfg;
        c.seed = seed;
        Rng rng(seed);
        auto model = assemble_mae(tiny_adapters(c.l1, rng), c, rng);
        Rng drng(99);
        MultimodalData data = tiny_data(16, drng);
        train_mae(model, data);
        return embed_dataset(model, data, make_ids(16));
    };

    auto a = run(42), b = run(42), c = run(43);
    CHECK(a.values == b.values);
    CHECK(a.values != c.values);
}

TEST_CASE("embedding is chunk-invariant and exports cleanly") {
    Rng rng(8);
    MAEConfig cfg = tiny_config();
    auto model = assemble_mae(tiny_adapters(cfg.l1, rng), cfg, rng);
    MultimodalData data = tiny_data(10, rng);
    auto ids = make_ids(10);

    auto small = embed_dataset(model, data, ids, 3);
    auto big = embed_dataset(model, data, ids, 1000);
    CHECK(small.values == big.values);
    CHECK(small.dim == cfg.l4);
    CHECK(small.ids == ids);

    CHECK_THROWS_AS(embed_dataset(model, data, make_ids(9)), ArgumentError);

    const std::string path = temp_path("tmae_embed_test.csv");
    write_embeddings_csv(path, small);
    std::ifstream is(path);
    std::string header;
    std::getline(is, header);
    CHECK(header == "sample_id,e0,e1,e2,e3,e4,e5");
    is.close();

    auto back = read_embeddings_csv(path);
    CHECK(back.ids == small.ids);
    CHECK(back.dim == small.dim);
    CHECK(back.values == small.values);  // %.17g round-trips doubles exactly
    std::remove(path.c_str());
}

TEST_CASE("model persistence round trip is bit exact") {
    Rng rng(9);
    MAEConfig cfg = tiny_config();
    cfg.epochs = 3;
    std::vector<std::unique_ptr<Adapter>> a;
    a.push_back(build_stats_adapter(6, cfg.l1, rng));
    a.push_back(build_subnet_adapter(cfg.l1, rng));
    auto model = assemble_mae(std::move(a), cfg, rng);

    MultimodalData data;
    Rng drng(10);
    ModalityBatch stats, subnet;
    stats.values = Tensor::from(test::random_vec(12 * 6, drng), {12, 6});
    subnet.values = Tensor::from(test::random_vec(12 * 4, drng, 0.0, 1.0), {12, 4, 1});
    data["statistics"] = std::move(stats);
    data["subnet"] = std::move(subnet);
    train_mae(model, data);

    const std::string path = temp_path("tmae_model_test.bin");
    save_model(model, path);
    auto loaded = load_model(path);

    auto orig = model.params();
    auto back = loaded.params();
    REQUIRE(orig.size() == back.size());
    for (std::size_t i = 0; i < orig.size(); ++i) {
        CHECK(orig[i].first == back[i].first);
        CHECK(orig[i].second.value() == back[i].second.value());
    }

    auto e1 = embed_dataset(model, data, make_ids(12));
    auto e2 = embed_dataset(loaded, data, make_ids(12));
    CHECK(e1.values == e2.values);
    std::remove(path.c_str());
}

TEST_CASE("containers reject unknown versions and corruption") {
    const std::string path = temp_path("tmae_container_test.bin");

    SECTION("future format version") {
        nlohmann::json manifest = {{"format_version", 999}, {"kind", "mae"}};
        const std::string m = manifest.dump();
        std::ofstream os(path, std::ios::binary);
        os.write("TMC1", 4);
        std::uint64_t len = m.size();
        for (int i = 0; i < 8; ++i) os.put(static_cast<char>(len >> (8 * i)));
        os.write(m.data(), static_cast<std::streamsize>(m.size()));
        os.close();
        CHECK_THROWS_AS(read_container(path), VersionError);
    }

    SECTION("bad magic") {
        std::ofstream os(path, std::ios::binary);
        os.write("NOPE", 4);
        os.close();
        CHECK_THROWS_AS(read_container(path), CorruptionError);
    }

    SECTION("truncation and byte flips in a real model file") {
        Rng rng(11);
        MAEConfig cfg = tiny_config();
        std::vector<std::unique_ptr<Adapter>> a;
        a.push_back(build_stats_adapter(4, cfg.l1, rng));
        a.push_back(build_entity_adapter(5, cfg.l1, rng, "ip"));
        save_model(assemble_mae(std::move(a), cfg, rng), path);

        std::ifstream is(path, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(is)),
                          std::istreambuf_iterator<char>());
        is.close();

        std::ofstream trunc(path, std::ios::binary);
        trunc.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 16));
        trunc.close();
        CHECK_THROWS_AS(read_container(path), CorruptionError);

        std::string flipped = bytes;
        flipped[flipped.size() - 8] ^= 0x40;  // inside the last array payload
        std::ofstream bad(path, std::ios::binary);
        bad.write(flipped.data(), static_cast<std::streamsize>(flipped.size()));
        bad.close();
        CHECK_THROWS_AS(read_container(path), CorruptionError);

        // the pristine bytes still load
        std::ofstream good(path, std::ios::binary);
        good.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        good.close();
        CHECK_NOTHROW(load_model(path));
    }

    std::remove(path.c_str());
}

TEST_CASE("gradients through the full stack match finite differences") {
    Rng rng(12);
    MAEConfig cfg = tiny_config();
    auto model = assemble_mae(tiny_adapters(cfg.l1, rng), cfg, rng);
    MultimodalData data = tiny_data(3, rng);
    auto batch = model.gather(data, {0, 1, 2});

    std::vector<Tensor> probe;
    for (const auto& [name, t] : model.params())
        if (name.find("integration.") != std::string::npos ||
            name.find(".enc.b") != std::string::npos)
            probe.push_back(t);
    REQUIRE_FALSE(probe.empty());
    auto build = [&]() { return model.reconstruction_loss(batch); };
    CHECK(test::max_grad_rel_err(build, probe, 1e-5) < 1e-4);
}
