#include <catch2/catch_amalgamated.hpp>

#include <cstdint>
#include <vector>

#include "cause/bench.hpp"
#include "cause/data.hpp"

using cause::CompressionReport;
using cause::CostBreakdown;
using cause::ItemCatalog;
using cause::ModelConfig;
using cause::TimingStats;
using cause::ValidationError;

namespace {

ModelConfig paper_shape_config() {
    ModelConfig cfg;
    cfg.hidden_dim = 64;
    cfg.num_layers = 3;
    cfg.num_heads = 8;
    cfg.ffn_expansion = 4;
    cfg.item_vocab = 512;
    cfg.action_vocab = 4;
    cfg.user_vocab = 8;
    cfg.category_vocab = 16;
    cfg.max_recent = 128;
    return cfg;
}

// Independent integer-arithmetic oracle for the cost formula.
std::int64_t cost_oracle(std::int64_t H, std::int64_t L, std::int64_t D, std::int64_t r) {
    return H * L * L * D + H * L * D * D * r;
}

}  // namespace

TEST_CASE("doubling the sequence length quadruples attention and doubles the ffn term") {
    auto a = cause::flop_cost(3, 100, 64, 4);
    auto b = cause::flop_cost(3, 200, 64, 4);
    CHECK(b.attention_cost == 4.0 * a.attention_cost);
    CHECK(b.ffn_cost == 2.0 * a.ffn_cost);
}

TEST_CASE("cost parts are nonnegative, echo their inputs, and sum to the total") {
    for (std::int64_t L : {8, 268, 1024, 4096}) {
        auto c = cause::flop_cost(3, L, 64, 4);
        CHECK(c.layers == 3);
        CHECK(c.seq_len == L);
        CHECK(c.hidden_dim == 64);
        CHECK(c.ffn_ratio == 4);
        CHECK(c.attention_cost >= 0.0);
        CHECK(c.ffn_cost >= 0.0);
        CHECK(c.total == c.attention_cost + c.ffn_cost);
        CHECK(c.total == static_cast<double>(cost_oracle(3, L, 64, 4)));
    }
}

TEST_CASE("production-shape cost ratios") {
    const double r_4096_1024 =
        cause::flop_cost(3, 4096, 64, 4).total / cause::flop_cost(3, 1024, 64, 4).total;
    CHECK(r_4096_1024 == Catch::Approx(13.6).margin(1e-12));
    CHECK(r_4096_1024 ==
          Catch::Approx(static_cast<double>(cost_oracle(3, 4096, 64, 4)) /
                        static_cast<double>(cost_oracle(3, 1024, 64, 4)))
              .margin(1e-12));

    // Uncompressed interleaving of a 512-event window vs the compressed
    // assembly 4 + 8 + 2*128 = 268.
    const double r_1024_268 = cause::flop_cost(3, 1024, 64, 4).total / cause::flop_cost(3, 268, 64, 4).total;
    CHECK(r_1024_268 ==
          Catch::Approx(static_cast<double>(cost_oracle(3, 1024, 64, 4)) /
                        static_cast<double>(cost_oracle(3, 268, 64, 4)))
              .margin(1e-12));
    CHECK(r_1024_268 == Catch::Approx(9.3335).margin(1e-3));
}

TEST_CASE("cost model rejects non-positive dimensions") {
    CHECK_THROWS_AS(cause::flop_cost(0, 10, 64, 4), ValidationError);
    CHECK_THROWS_AS(cause::flop_cost(3, 0, 64, 4), ValidationError);
    CHECK_THROWS_AS(cause::flop_cost(3, 10, 0, 4), ValidationError);
    CHECK_THROWS_AS(cause::flop_cost(3, 10, 64, 0), ValidationError);
}

TEST_CASE("timing harness validates its inputs") {
    auto cfg = paper_shape_config();
    CHECK_THROWS_AS(cause::time_forward<double>(cfg, 256, 1, 1, 4), ValidationError);
    CHECK_THROWS_AS(cause::time_forward<double>(cfg, 6, 1, 1, 5), ValidationError);
    CHECK_THROWS_AS(cause::time_forward<double>(cfg, 256, 0, 1, 5), ValidationError);
    CHECK_THROWS_AS(cause::time_forward<double>(cfg, 256, 1, -1, 5), ValidationError);
}

TEST_CASE("wall clock grows with sequence length in the attention-dominant band") {
    auto cfg = paper_shape_config();
    auto t128 = cause::time_forward<double>(cfg, 128, 1, 1, 5, 0);
    auto t256 = cause::time_forward<double>(cfg, 256, 1, 1, 5, 0);
    auto t1024 = cause::time_forward<double>(cfg, 1024, 1, 1, 7, 0);

    for (const auto& t : {t128, t256, t1024}) {
        CHECK(t.min_ms <= t.mean_ms);
        CHECK(t.min_ms > 0.0);
    }
    CHECK(t128.reps == 5);
    CHECK(t1024.warmup == 1);

    CHECK(t1024.mean_ms > t128.mean_ms);
    CHECK(t1024.mean_ms > t256.mean_ms);
    CHECK(t256.mean_ms > t128.mean_ms);

    const double ratio = t1024.mean_ms / t256.mean_ms;
    INFO("mean(1024)/mean(256) = " << ratio);
    CHECK(ratio >= 4.0);
    CHECK(ratio <= 16.0);

    INFO("std/mean at L=1024: " << t1024.std_ms / t1024.mean_ms);
    CHECK(t1024.std_ms / t1024.mean_ms < 0.2);
}

TEST_CASE("wall clock grows with depth") {
    auto cfg = paper_shape_config();
    auto shallow_cfg = cfg;
    shallow_cfg.num_layers = 1;
    auto deep = cause::time_forward<double>(cfg, 256, 1, 1, 5, 0);
    auto shallow = cause::time_forward<double>(shallow_cfg, 256, 1, 1, 5, 0);
    CHECK(deep.mean_ms > shallow.mean_ms);
}

TEST_CASE("compression accounting on long histories hits the compressed length") {
    // One 2000-event log cycling 500 items over 16 categories.
    cause::UserSequence seq;
    seq.user_id = 0;
    for (std::int64_t t = 0; t < 2000; ++t) seq.events.push_back({0, t % 500, 0, t, t});
    ItemCatalog cat;
    cat.num_items = 500;
    cat.num_categories = 16;
    for (std::int64_t i = 0; i < 500; ++i) cat.categories_of.push_back({i % 16});

    auto rep = cause::compression_report({seq}, cat, 8, 32, 128);
    REQUIRE(rep.users.size() == 1);
    const auto& u = rep.users[0];
    CHECK(u.raw_events == 2000);
    CHECK(u.buckets == 8);  // 16 populated categories, top 8 kept
    CHECK(u.slen == 4 + 8 + 256);
    CHECK(u.slen <= 268);
    CHECK(u.uncompressed_len == 4 + 2 * 2000);
    CHECK(u.retained_events <= 8 * 32);
    CHECK(u.retained_events > 0);
    CHECK(u.flop_ratio > 1.0);
    CHECK(rep.mean_flop_ratio == u.flop_ratio);
}

TEST_CASE("a history shorter than the window compresses nothing") {
    cause::UserSequence seq;
    seq.user_id = 3;
    for (std::int64_t t = 0; t < 50; ++t) seq.events.push_back({3, t % 10, 0, t, t});
    ItemCatalog cat;
    cat.num_items = 10;
    cat.num_categories = 4;
    for (std::int64_t i = 0; i < 10; ++i) cat.categories_of.push_back({i % 4});

    auto rep = cause::compression_report({seq}, cat, 8, 32, 128);
    const auto& u = rep.users[0];
    CHECK(u.buckets == 0);
    CHECK(u.retained_events == 0);
    CHECK(u.slen == 4 + 2 * 50);
    CHECK(u.uncompressed_len == u.slen);
    CHECK(u.flop_ratio == 1.0);
}

TEST_CASE("reported sLen equals the assembled sequence length") {
    cause::SynthConfig sc;
    sc.num_users = 10;
    sc.num_items = 200;
    sc.num_categories = 12;
    sc.num_actions = 3;
    sc.events_per_user = 300;
    sc.seed = 13;
    auto data = cause::generate_synthetic(sc);

    const std::int64_t V = 8, G = 32, iLen = 64;
    auto rep = cause::compression_report(data.users, data.catalog, V, G, iLen);

    ModelConfig cfg;
    cfg.hidden_dim = 16;
    cfg.num_layers = 1;
    cfg.num_heads = 2;
    cfg.item_vocab = data.catalog.num_items;
    cfg.action_vocab = data.num_actions;
    cfg.user_vocab = sc.num_users;
    cfg.category_vocab = data.catalog.num_categories;
    cfg.max_recent = iLen;
    cfg.V_max = V;
    cfg.G_max = G;

    REQUIRE(rep.users.size() == data.users.size());
    for (std::size_t i = 0; i < data.users.size(); ++i) {
        const auto& seq = data.users[i];
        auto [history, recent] = cause::partition_history_recent(seq, iLen);
        auto assembled = cause::assemble_sequence(seq.user_id, cause::compress(history, data.catalog, V, G),
                                                  recent, data.catalog, cfg);
        CHECK(assembled.length() == rep.users[i].slen);
    }
}

TEST_CASE("aggregates are sums and means of the per-user rows") {
    cause::UserSequence a, b;
    a.user_id = 0;
    b.user_id = 1;
    for (std::int64_t t = 0; t < 20; ++t) a.events.push_back({0, t % 6, 0, t, t});
    for (std::int64_t t = 0; t < 4; ++t) b.events.push_back({1, t % 6, 0, t, t});
    ItemCatalog cat;
    cat.num_items = 6;
    cat.num_categories = 3;
    for (std::int64_t i = 0; i < 6; ++i) cat.categories_of.push_back({i % 3});

    auto rep = cause::compression_report({a, b}, cat, 2, 4, 8);
    REQUIRE(rep.users.size() == 2);
    CHECK(rep.total_raw == 24);
    CHECK(rep.total_retained == rep.users[0].retained_events + rep.users[1].retained_events);
    CHECK(rep.mean_slen ==
          (static_cast<double>(rep.users[0].slen) + static_cast<double>(rep.users[1].slen)) / 2.0);
    CHECK(rep.mean_flop_ratio == (rep.users[0].flop_ratio + rep.users[1].flop_ratio) / 2.0);

    // User a: 20 events, window 8 -> 12 in history over 3 categories, V=2.
    CHECK(rep.users[0].buckets == 2);
    CHECK(rep.users[0].slen == 4 + 2 + 16);
    // User b: 4 events, all inside the window.
    CHECK(rep.users[1].buckets == 0);
    CHECK(rep.users[1].slen == 4 + 8);
    CHECK(rep.users[1].flop_ratio == 1.0);

    CHECK_THROWS_AS(cause::compression_report({}, cat, 2, 4, 8), cause::EmptyInputError);
}

TEST_CASE("report and stats serialize with the expected fields") {
    auto c = cause::flop_cost(3, 268, 64, 4);
    auto cj = c.to_json();
    CHECK(cj.at("total").get<double>() == c.total);
    CHECK(cj.at("attention_cost").get<double>() == c.attention_cost);
    CHECK(cj.at("seq_len").get<std::int64_t>() == 268);

    cause::UserSequence seq;
    seq.user_id = 0;
    for (std::int64_t t = 0; t < 10; ++t) seq.events.push_back({0, t % 4, 0, t, t});
    ItemCatalog cat;
    cat.num_items = 4;
    cat.num_categories = 2;
    for (std::int64_t i = 0; i < 4; ++i) cat.categories_of.push_back({i % 2});
    auto rep = cause::compression_report({seq}, cat, 2, 4, 4);
    auto rj = rep.to_json();
    CHECK(rj.at("users").size() == 1);
    CHECK(rj.at("users")[0].at("slen").get<std::int64_t>() == rep.users[0].slen);
    CHECK(rj.at("cost_model").at("hidden_dim").get<std::int64_t>() == 64);
    CHECK(rj.at("total_raw").get<std::int64_t>() == 10);
}
