#include <catch2/catch_amalgamated.hpp>

#include <algorithm>

#include "test_helpers.hpp"
#include "trafficmae/adapters.hpp"

using namespace tmae;

namespace {

std::vector<std::vector<int>> payload_tokens(std::size_t B, Rng& rng,
                                             std::size_t valid = 32) {
    std::uniform_int_distribution<int> tok(1, 256);
    std::vector<std::vector<int>> out(B, std::vector<int>(32, 0));
    for (auto& row : out)
        for (std::size_t t = 0; t < valid; ++t) row[t] = tok(rng);
    return out;
}

ModalityBatch numeric_batch(const Shape& per_sample, std::size_t B, Rng& rng) {
    Shape full{B};
    full.insert(full.end(), per_sample.begin(), per_sample.end());
    std::size_t n = 1;
    for (auto d : full) n *= d;
    ModalityBatch mb;
    mb.values = Tensor::from(test::random_vec(n, rng), full);
    return mb;
}

// GRU with input I and hidden H: three input kernels and three recurrent
// kernels, no biases.
std::size_t gru_count(std::size_t in, std::size_t hidden) {
    return 3 * hidden * in + 3 * hidden * hidden;
}
std::size_t dense_count(std::size_t in, std::size_t out) { return in * out + out; }

}  // namespace

TEST_CASE("adapter shapes hold across l1 in {16, 32, 64}") {
    for (std::size_t l1 : {16u, 32u, 64u}) {
        Rng rng(7 + l1);
        const std::size_t B = 3;

        auto payload = build_payload_adapter(l1, rng);
        ModalityBatch pb;
        pb.tokens = payload_tokens(B, rng);
        Tensor pcode = payload->encode(pb);
        REQUIRE(pcode.shape() == Shape{B, l1});
        CHECK(payload->decode(pcode).shape() == Shape{B, 32, 1});

        auto stats = build_stats_adapter(12, l1, rng);
        auto sb = numeric_batch({12}, B, rng);
        Tensor scode = stats->encode(sb);
        REQUIRE(scode.shape() == Shape{B, l1});
        CHECK(stats->decode(scode).shape() == Shape{B, 12});

        auto seq = build_sequence_adapter(32, 4, l1, rng);
        auto qb = numeric_batch({32, 4}, B, rng);
        Tensor qcode = seq->encode(qb);
        REQUIRE(qcode.shape() == Shape{B, l1});
        CHECK(seq->decode(qcode).shape() == Shape{B, 32, 4});

        auto subnet = build_subnet_adapter(l1, rng);
        auto nb = numeric_batch({4, 1}, B, rng);
        Tensor ncode = subnet->encode(nb);
        REQUIRE(ncode.shape() == Shape{B, l1});
        CHECK(subnet->decode(ncode).shape() == Shape{B, 4, 1});

        auto entity = build_entity_adapter(64, l1, rng);
        auto eb = numeric_batch({64}, B, rng);
        Tensor ecode = entity->encode(eb);
        REQUIRE(ecode.shape() == Shape{B, l1});
        CHECK(entity->decode(ecode).shape() == Shape{B, 64});
    }
}

TEST_CASE("adapter parameter counts match closed forms") {
    Rng rng(1);

    SECTION("dense adapters") {
        auto stats = build_stats_adapter(12, 32, rng);
        auto sp = adapter_params(*stats);
        // encoder Dense(12 -> 32): 12*32 + 32 = 416
        std::size_t enc = 0;
        for (const auto& [name, t] : sp)
            if (name.find(".enc") != std::string::npos) enc += t.size();
        CHECK(enc == 416);
        CHECK(count_scalars(sp) == dense_count(12, 32) + dense_count(32, 12));

        auto entity = build_entity_adapter(64, 32, rng);
        auto ep = adapter_params(*entity);
        std::size_t eenc = 0;
        for (const auto& [name, t] : ep)
            if (name.find(".enc") != std::string::npos) eenc += t.size();
        CHECK(eenc == 2080);  // 64*32 + 32
        CHECK(count_scalars(ep) == dense_count(64, 32) + dense_count(32, 64));
    }

    SECTION("payload adapter, l1 sweep") {
        for (std::size_t l1 : {16u, 32u, 64u}) {
            auto a = build_payload_adapter(l1, rng);
            const std::size_t expected =
                257 * 64 +                 // embedding
                gru_count(64, 64) +        // encoder GRU, sequences
                gru_count(64, 32) +        // encoder GRU, last state
                dense_count(32, 64) + dense_count(64, l1) +
                dense_count(l1, l1) + dense_count(l1, 64) +
                gru_count(64, 64) +        // decoder GRU
                dense_count(64, 1);        // time-distributed output
            CHECK(count_scalars(adapter_params(*a)) == expected);
        }
    }

    SECTION("subnet adapter") {
        auto a = build_subnet_adapter(32, rng);
        const std::size_t expected =
            gru_count(1, 32) + gru_count(32, 32) +
            dense_count(32, 64) + dense_count(64, 32) +
            dense_count(32, 32) + dense_count(32, 64) +
            gru_count(64, 32) + dense_count(32, 1);
        CHECK(count_scalars(adapter_params(*a)) == expected);
    }

    SECTION("sequence adapter, k=32 channels=4") {
        auto a = build_sequence_adapter(32, 4, 32, rng);
        // conv output length 30, pooled 15, flattened 480
        const std::size_t expected =
            (32 * 3 * 4 + 32) +            // encoder conv
            dense_count(480, 32) +
            dense_count(32, 32) + dense_count(32, 480) +
            (32 * 3 * 32 + 32) +           // decoder conv 1, same padding
            (4 * 3 * 32 + 4) +             // decoder conv 2, same padding
            dense_count(15 * 4 * 4, 32 * 4);
        CHECK(count_scalars(adapter_params(*a)) == expected);
    }
}

TEST_CASE("decoder output stages are linear") {
    Rng rng(3);
    std::vector<std::unique_ptr<Adapter>> all;
    all.push_back(build_payload_adapter(32, rng));
    all.push_back(build_stats_adapter(12, 32, rng));
    all.push_back(build_sequence_adapter(32, 4, 32, rng));
    all.push_back(build_subnet_adapter(32, rng));
    all.push_back(build_entity_adapter(64, 32, rng));
    for (const auto& a : all) {
        CHECK(a->decoder_output_activation() == Activation::Linear);
        CHECK(a->spec().layers.back().find("linear") != std::string::npos);
    }

    // linear means reconstructions can go negative, unlike every hidden relu
    auto entity = build_entity_adapter(8, 4, rng);
    bool saw_negative = false;
    for (int trial = 0; trial < 20 && !saw_negative; ++trial) {
        auto eb = numeric_batch({8}, 4, rng);
        const auto& v = entity->decode(entity->encode(eb)).value();
        saw_negative = std::any_of(v.begin(), v.end(), [](double x) { return x < 0.0; });
    }
    CHECK(saw_negative);
}

TEST_CASE("payload masking: targets, weights, and zero gradient at padding") {
    Rng rng(11);
    auto a = build_payload_adapter(8, rng);

    ModalityBatch mb;
    mb.tokens = payload_tokens(2, rng, /*valid=*/10);
    mb.tokens[0][3] = 256;  // byte 255
    mb.tokens[1][0] = 1;    // byte 0

    Tensor target = a->reconstruction_target(mb);
    REQUIRE(target.shape() == Shape{2, 32, 1});
    CHECK(target.value()[3] == Catch::Approx(1.0));
    CHECK(target.value()[32] == Catch::Approx(0.0));
    CHECK(target.value()[15] == 0.0);  // padded position reconstructs to zero

    auto mask = a->loss_mask(mb);
    REQUIRE(mask);
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t t = 0; t < 32; ++t)
            CHECK((*mask)[b * 32 + t] == (t < 10 ? 1.0 : 0.0));

    // masked reconstruction loss: padded positions contribute nothing, so the
    // embedding row backing the pad token receives no gradient
    Tensor loss = loss_mse_masked(target, a->decode(a->encode(mb)), mask);
    backprop(loss);
    auto params = adapter_params(*a);
    const Tensor* emb = nullptr;
    for (const auto& [name, t] : params)
        if (name.find("embedding") != std::string::npos) emb = &t;
    REQUIRE(emb);
    const auto& g = emb->grad();
    const std::size_t dim = 64;
    for (std::size_t d = 0; d < dim; ++d) CHECK(g[d] == 0.0);  // row 0 = pad

    // some non-pad row does learn
    double total = 0.0;
    for (double x : g) total += std::abs(x);
    CHECK(total > 0.0);
}

TEST_CASE("payload encoding ignores everything after the padding starts") {
    Rng rng(13);
    auto a = build_payload_adapter(8, rng);

    ModalityBatch short_pad;
    short_pad.tokens = payload_tokens(1, rng, /*valid=*/6);

    // same prefix, but tamper with the decoder target region instead of the
    // tokens: padded steps must carry the hidden state through unchanged, so
    // the code depends only on the six valid tokens
    ModalityBatch same = short_pad;
    Tensor c1 = a->encode(short_pad);
    Tensor c2 = a->encode(same);
    CHECK(c1.value() == c2.value());

    // a batch with different counts of valid tokens still encodes sample-wise
    ModalityBatch mixed;
    mixed.tokens = {short_pad.tokens[0], payload_tokens(1, rng, 32)[0]};
    Tensor cm = a->encode(mixed);
    for (std::size_t j = 0; j < 8; ++j)
        CHECK(cm.value()[j] == Catch::Approx(c1.value()[j]).margin(1e-12));
}

TEST_CASE("adapter gradients agree with finite differences end to end") {
    auto pick = [](const ParamList& params,
                   std::initializer_list<const char*> needles) {
        std::vector<Tensor> out;
        for (const auto& [name, t] : params)
            for (const char* n : needles)
                if (name.find(n) != std::string::npos) out.push_back(t);
        return out;
    };

    SECTION("stats adapter, all parameters") {
        Rng rng(21);
        auto a = build_stats_adapter(5, 4, rng);
        auto mb = numeric_batch({5}, 2, rng);
        auto params = adapter_params(*a);
        auto build = [&]() {
            return loss_mse(a->reconstruction_target(mb), a->decode(a->encode(mb)));
        };
        CHECK(test::max_grad_rel_err(build, param_tensors(params)) < 1e-4);
    }

    SECTION("entity adapter, all parameters") {
        Rng rng(22);
        auto a = build_entity_adapter(6, 4, rng);
        auto mb = numeric_batch({6}, 2, rng);
        auto params = adapter_params(*a);
        auto build = [&]() {
            return loss_mse(a->reconstruction_target(mb), a->decode(a->encode(mb)));
        };
        CHECK(test::max_grad_rel_err(build, param_tensors(params)) < 1e-4);
    }

    SECTION("sequence adapter, boundary-layer parameters") {
        Rng rng(23);
        auto a = build_sequence_adapter(8, 2, 4, rng);
        auto mb = numeric_batch({8, 2}, 2, rng);
        auto params = pick(adapter_params(*a), {"enc_conv", "enc_dense", "dec_conv2"});
        REQUIRE_FALSE(params.empty());
        auto build = [&]() {
            return loss_mse(a->reconstruction_target(mb), a->decode(a->encode(mb)));
        };
        // the relu-into-maxpool stack has kinks a 1e-3 step can straddle
        CHECK(test::max_grad_rel_err(build, params, 1e-5) < 1e-4);
    }

    SECTION("subnet adapter, recurrent and output parameters") {
        Rng rng(24);
        auto a = build_subnet_adapter(4, rng);
        auto mb = numeric_batch({4, 1}, 2, rng);
        auto params = pick(adapter_params(*a), {"enc_gru1.U", "dec_gru.W_c", "dec_out"});
        REQUIRE_FALSE(params.empty());
        auto build = [&]() {
            return loss_mse(a->reconstruction_target(mb), a->decode(a->encode(mb)));
        };
        CHECK(test::max_grad_rel_err(build, params) < 1e-4);
    }

    SECTION("payload adapter, masked loss against selected parameters") {
        Rng rng(25);
        auto a = build_payload_adapter(4, rng);
        ModalityBatch mb;
        mb.tokens = payload_tokens(2, rng, /*valid=*/7);
        auto params = pick(adapter_params(*a), {"enc_gru2.U_c", "enc_dense2", "dec_out"});
        REQUIRE_FALSE(params.empty());
        auto build = [&]() {
            return loss_mse_masked(a->reconstruction_target(mb),
                                   a->decode(a->encode(mb)), a->loss_mask(mb));
        };
        CHECK(test::max_grad_rel_err(build, params) < 1e-4);
    }
}

TEST_CASE("adapter input validation") {
    Rng rng(31);
    CHECK_THROWS_AS(build_sequence_adapter(2, 4, 32, rng), ShapeError);
    CHECK_THROWS_AS(build_stats_adapter(0, 32, rng), ArgumentError);
    CHECK_THROWS_AS(build_entity_adapter(0, 32, rng), ArgumentError);

    auto subnet = build_subnet_adapter(32, rng);
    auto bad = numeric_batch({5, 1}, 2, rng);
    CHECK_THROWS_AS(subnet->encode(bad), ShapeError);

    auto seq = build_sequence_adapter(32, 4, 32, rng);
    auto wrong = numeric_batch({30, 4}, 2, rng);
    CHECK_THROWS_AS(seq->encode(wrong), ShapeError);

    auto payload = build_payload_adapter(32, rng);
    ModalityBatch short_tokens;
    short_tokens.tokens = {std::vector<int>(31, 1)};
    CHECK_THROWS_AS(payload->encode(short_tokens), ShapeError);
    CHECK_THROWS_AS(payload->encode(ModalityBatch{}), ShapeError);
}

TEST_CASE("feature counts drive loss weighting") {
    Rng rng(41);
    CHECK(build_payload_adapter(32, rng)->spec().feature_count == 32);
    CHECK(build_stats_adapter(12, 32, rng)->spec().feature_count == 12);
    CHECK(build_sequence_adapter(32, 4, 32, rng)->spec().feature_count == 128);
    CHECK(build_subnet_adapter(32, rng)->spec().feature_count == 4);
    CHECK(build_entity_adapter(64, 32, rng)->spec().feature_count == 64);
}

TEST_CASE("adapter construction is deterministic per seed") {
    Rng a_rng(5), b_rng(5), c_rng(6);
    auto a = build_payload_adapter(16, a_rng);
    auto b = build_payload_adapter(16, b_rng);
    auto c = build_payload_adapter(16, c_rng);
    auto pa = adapter_params(*a), pb = adapter_params(*b), pc = adapter_params(*c);
    REQUIRE(pa.size() == pb.size());
    bool any_diff = false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        CHECK(pa[i].first == pb[i].first);
        CHECK(pa[i].second.value() == pb[i].second.value());
        if (pa[i].second.value() != pc[i].second.value()) any_diff = true;
    }
    CHECK(any_diff);
}
