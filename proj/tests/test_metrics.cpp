#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "cause/data.hpp"
#include "cause/metrics.hpp"
#include "cause/rng.hpp"

using cause::EvalCase;
using cause::EvalProtocol;
using cause::EvalReport;
using cause::EvalSegment;
using cause::Interaction;
using cause::ItemCatalog;
using cause::ModelConfig;
using cause::Parameters;
using cause::Rng;
using cause::ValidationError;

namespace {

ModelConfig small_config(std::int64_t items, std::int64_t users) {
    ModelConfig cfg;
    cfg.hidden_dim = 16;
    cfg.num_layers = 1;
    cfg.num_heads = 2;
    cfg.ffn_expansion = 2;
    cfg.item_vocab = items;
    cfg.action_vocab = 3;
    cfg.user_vocab = users;
    cfg.category_vocab = 8;
    cfg.max_recent = 16;
    cfg.V_max = 4;
    cfg.G_max = 8;
    return cfg;
}

ItemCatalog modulo_catalog(std::int64_t items, std::int64_t cats) {
    ItemCatalog cat;
    cat.num_items = items;
    cat.num_categories = cats;
    for (std::int64_t i = 0; i < items; ++i) cat.categories_of.push_back({i % cats});
    return cat;
}

// Brute-force rank: stable sort of candidate indices by descending score.
std::int64_t oracle_rank(const std::vector<double>& scores, std::int64_t target) {
    std::vector<std::int64_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::int64_t a, std::int64_t b) {
        return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
    });
    for (std::size_t r = 0; r < idx.size(); ++r) {
        if (idx[r] == target) return static_cast<std::int64_t>(r) + 1;
    }
    return -1;
}

}  // namespace

TEST_CASE("rank of a unique maximum is 1") {
    CHECK(cause::rank_of_target<double>({0.1, 0.9, 0.3}, 1) == 1);
    CHECK(cause::rank_of_target<double>({5.0}, 0) == 1);
}

TEST_CASE("all-equal scores rank by candidate index") {
    std::vector<double> flat(201, 0.25);
    CHECK(cause::rank_of_target(flat, 0) == 1);
    CHECK(cause::rank_of_target(flat, 200) == 201);
    CHECK(cause::rank_of_target(flat, 7) == 8);
}

TEST_CASE("rank matches a stable-sort oracle on random scores with ties") {
    Rng rng(42);
    for (int iter = 0; iter < 200; ++iter) {
        const auto n = static_cast<std::int64_t>(2 + rng.below(40));
        std::vector<double> scores;
        for (std::int64_t i = 0; i < n; ++i) {
            scores.push_back(static_cast<double>(rng.below(8)));  // small support forces ties
        }
        const auto target = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(n)));
        CHECK(cause::rank_of_target(scores, target) == oracle_rank(scores, target));
    }
}

TEST_CASE("rank rejects bad input") {
    CHECK_THROWS_AS(cause::rank_of_target<double>({1.0, 2.0}, 2), ValidationError);
    CHECK_THROWS_AS(cause::rank_of_target<double>({1.0, 2.0}, -1), ValidationError);
    CHECK_THROWS_AS(cause::rank_of_target<double>({1.0, std::numeric_limits<double>::quiet_NaN()}, 0),
                    ValidationError);
    CHECK_THROWS_AS(cause::rank_of_target<double>({1.0, std::numeric_limits<double>::infinity()}, 0),
                    ValidationError);
}

TEST_CASE("metric closed forms") {
    CHECK(cause::ndcg_at_k(1, 1) == 1.0);
    CHECK(cause::mrr(1) == 1.0);
    CHECK(cause::ndcg_at_k(3, 10) == Catch::Approx(0.5).epsilon(1e-12));
    CHECK(cause::mrr(3) == Catch::Approx(1.0 / 3.0).epsilon(1e-12));
    CHECK(cause::ndcg_at_k(15, 10) == 0.0);
    CHECK(cause::ndcg_at_k(15, 20) == Catch::Approx(0.25).epsilon(1e-12));
    CHECK_THROWS_AS(cause::ndcg_at_k(0, 5), ValidationError);
    CHECK_THROWS_AS(cause::ndcg_at_k(3, 0), ValidationError);
    CHECK_THROWS_AS(cause::mrr(0), ValidationError);
}

TEST_CASE("improving the rank never decreases a metric; N@k non-decreasing in k") {
    const std::vector<std::int64_t> ks{1, 10, 20, 100, 200};
    for (std::int64_t rank = 2; rank <= 250; ++rank) {
        for (std::int64_t k : ks) {
            CHECK(cause::ndcg_at_k(rank - 1, k) >= cause::ndcg_at_k(rank, k));
        }
        CHECK(cause::mrr(rank - 1) > cause::mrr(rank));
        for (std::size_t i = 1; i < ks.size(); ++i) {
            CHECK(cause::ndcg_at_k(rank, ks[i]) >= cause::ndcg_at_k(rank, ks[i - 1]));
        }
    }
}

TEST_CASE("protocol parsing") {
    CHECK(EvalProtocol::parse("full").kind == EvalProtocol::Kind::full);
    const auto s = EvalProtocol::parse("sampled:200", 7);
    CHECK(s.kind == EvalProtocol::Kind::sampled);
    CHECK(s.num_sampled == 200);
    CHECK(s.seed == 7);
    CHECK(s.describe() == "sampled:200");
    CHECK(EvalProtocol::parse("full").describe() == "full");
    CHECK_THROWS_AS(EvalProtocol::parse("sampled:"), ValidationError);
    CHECK_THROWS_AS(EvalProtocol::parse("sampled:0"), ValidationError);
    CHECK_THROWS_AS(EvalProtocol::parse("topk:5"), ValidationError);
}

TEST_CASE("eval cases from a leave-one-out split") {
    // One user, events 0..5; LOO: train 0..3, val 4, test 5.
    cause::UserSequence seq;
    seq.user_id = 0;
    for (std::int64_t t = 0; t < 6; ++t) seq.events.push_back({0, t, 0, 10 + t, t});
    auto split = cause::split({seq}, {});
    auto cat = modulo_catalog(8, 4);

    auto val_cases = cause::make_eval_cases(split, EvalSegment::validation, cat, 2, 4, 8);
    REQUIRE(val_cases.size() == 1);
    CHECK(val_cases[0].target_item == 4);
    REQUIRE(val_cases[0].recent.size() == 2);  // last iLen=2 of train
    CHECK(val_cases[0].recent[0].item_id == 2);
    CHECK(val_cases[0].recent[1].item_id == 3);
    CHECK(!val_cases[0].plan.buckets.empty());  // items 0,1 compressed away

    auto test_cases = cause::make_eval_cases(split, EvalSegment::test, cat, 2, 4, 8);
    REQUIRE(test_cases.size() == 1);
    CHECK(test_cases[0].target_item == 5);
    CHECK(test_cases[0].recent[1].item_id == 4);  // val event joins the prefix
}

TEST_CASE("a target whose table row matches the query embedding ranks first") {
    auto cfg = small_config(20, 2);
    auto cat = modulo_catalog(20, 8);
    auto params = cause::init_parameters<double>(cfg, 3);

    // Item 19 never appears in the input, so editing its row cannot disturb
    // the forward pass.
    EvalCase ec;
    ec.user_id = 0;
    ec.recent = {{0, 1, 0, 100, 0}, {0, 5, 1, 101, 1}, {0, 9, 2, 102, 2}};
    ec.target_item = 19;

    cause::TokenSequence seq = cause::assemble_sequence(ec.user_id, ec.plan, ec.recent, cat, cfg);
    cause::NoGradGuard ng;
    auto out = cause::forward({seq}, params, cfg, cat);
    const std::int64_t last = seq.length() - 1;
    for (std::int64_t d = 0; d < cfg.hidden_dim; ++d) {
        params.item_table.at(19, d) = 1000.0 * out.at(last, d);
    }

    auto rep = cause::evaluate(std::vector<EvalCase>{ec}, params, cfg, cat, EvalProtocol::full());
    CHECK(rep.n_at_1 == 1.0);
    CHECK(rep.mrr == 1.0);
    CHECK(rep.mean_rank == 1.0);
    CHECK(rep.num_users == 1);
}

TEST_CASE("untrained model ranks a random target uniformly: mean rank near (N+1)/2") {
    const std::int64_t items = 101, users = 50;
    auto cfg = small_config(items, users);
    auto cat = modulo_catalog(items, 8);

    Rng rng(11);
    std::vector<EvalCase> cases;
    for (std::int64_t u = 0; u < users; ++u) {
        EvalCase ec;
        ec.user_id = u;
        for (std::int64_t t = 0; t < 3; ++t) {
            ec.recent.push_back({u, static_cast<std::int64_t>(rng.below(items)),
                                 static_cast<std::int64_t>(rng.below(3)), 100 + t, t});
        }
        ec.target_item = static_cast<std::int64_t>(rng.below(items));
        cases.push_back(ec);
    }

    double grand = 0.0;
    const int seeds = 5;
    for (int s = 0; s < seeds; ++s) {
        auto params = cause::init_parameters<double>(cfg, 100 + static_cast<std::uint64_t>(s));
        grand += cause::evaluate(cases, params, cfg, cat, EvalProtocol::full()).mean_rank;
    }
    grand /= seeds;
    const double expected = (static_cast<double>(items) + 1.0) / 2.0;
    CHECK(std::abs(grand - expected) / expected < 0.10);
}

TEST_CASE("sampled candidates can only improve on full-catalog metrics") {
    cause::SynthConfig sc;
    sc.num_users = 30;
    sc.num_items = 120;
    sc.num_categories = 8;
    sc.num_actions = 3;
    sc.events_per_user = 40;
    sc.seed = 5;
    auto data = cause::generate_synthetic(sc);
    auto split = cause::split(data.users, {});

    auto cfg = small_config(data.catalog.num_items, sc.num_users);
    cfg.category_vocab = data.catalog.num_categories;
    auto cases = cause::make_eval_cases(split, EvalSegment::validation, data.catalog, cfg.max_recent, cfg.V_max,
                                        cfg.G_max);
    REQUIRE(cases.size() == 30);
    auto params = cause::init_parameters<double>(cfg, 1);

    auto full = cause::evaluate(cases, params, cfg, data.catalog, EvalProtocol::full());
    auto sampled = cause::evaluate(cases, params, cfg, data.catalog, EvalProtocol::sampled(50, 9));

    CHECK(sampled.n_at_1 >= full.n_at_1);
    CHECK(sampled.n_at_10 >= full.n_at_10);
    CHECK(sampled.n_at_20 >= full.n_at_20);
    CHECK(sampled.n_at_100 >= full.n_at_100);
    CHECK(sampled.n_at_200 >= full.n_at_200);
    CHECK(sampled.mrr >= full.mrr);
    CHECK(sampled.mean_rank <= full.mean_rank);

    SECTION("sampled protocol is deterministic given its seed") {
        auto again = cause::evaluate(cases, params, cfg, data.catalog, EvalProtocol::sampled(50, 9));
        CHECK(again.mrr == sampled.mrr);
        CHECK(again.n_at_10 == sampled.n_at_10);
        CHECK(again.mean_rank == sampled.mean_rank);
        auto other_seed = cause::evaluate(cases, params, cfg, data.catalog, EvalProtocol::sampled(50, 10));
        CHECK(other_seed.mean_rank != sampled.mean_rank);  // different candidate draws
    }

    SECTION("batching does not change results") {
        auto one_by_one = cause::evaluate(cases, params, cfg, data.catalog, EvalProtocol::full(), 1);
        CHECK(one_by_one.mrr == full.mrr);
        CHECK(one_by_one.mean_rank == full.mean_rank);
        CHECK(one_by_one.n_at_10 == full.n_at_10);
    }
}

TEST_CASE("report serialization carries metrics, protocol, and config hash") {
    auto cfg = small_config(20, 2);
    auto cat = modulo_catalog(20, 8);
    auto params = cause::init_parameters<double>(cfg, 3);
    std::vector<EvalCase> cases{{0, {}, {{0, 1, 0, 100, 0}}, 4}};
    auto rep = cause::evaluate(cases, params, cfg, cat, EvalProtocol::full());

    auto j = rep.to_json();
    CHECK(j.at("metrics").at("N@10").get<double>() == rep.n_at_10);
    CHECK(j.at("metrics").at("MRR").get<double>() == rep.mrr);
    CHECK(j.at("num_users").get<std::int64_t>() == 1);
    CHECK(j.at("protocol").get<std::string>() == "full");
    CHECK(j.at("config_hash").get<std::string>().size() == 16);
    CHECK(j.at("config_hash").get<std::string>() == cause::config_fingerprint(cfg));

    const std::string row = rep.csv_row();
    const std::string header = EvalReport::csv_header();
    CHECK(row.rfind("full,1,", 0) == 0);
    CHECK(std::count(row.begin(), row.end(), ',') == std::count(header.begin(), header.end(), ','));

    ModelConfig other = cfg;
    other.hidden_dim = 32;
    CHECK(cause::config_fingerprint(other) != cause::config_fingerprint(cfg));
}

TEST_CASE("evaluate rejects degenerate input") {
    auto cfg = small_config(20, 2);
    auto cat = modulo_catalog(20, 8);
    auto params = cause::init_parameters<double>(cfg, 3);
    CHECK_THROWS_AS(cause::evaluate<double>({}, params, cfg, cat, EvalProtocol::full()), cause::EmptyInputError);

    std::vector<EvalCase> no_recent{{0, {}, {}, 4}};
    CHECK_THROWS_AS(cause::evaluate(no_recent, params, cfg, cat, EvalProtocol::full()), ValidationError);

    std::vector<EvalCase> bad_target{{0, {}, {{0, 1, 0, 100, 0}}, 20}};
    CHECK_THROWS_AS(cause::evaluate(bad_target, params, cfg, cat, EvalProtocol::full()), ValidationError);
}
