#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <cause/model.hpp>

namespace cause {

// Analytic cost model of the backbone plus a wall-clock harness. The
// headline quantity everywhere is a ratio between two sequence lengths;
// absolute milliseconds are hardware-specific and never asserted on.

// Dominant per-forward cost terms (constants dropped): attention scales as
// H*L^2*D, the feed-forward stack as H*L*D^2*r.
struct CostBreakdown {
    std::int64_t layers = 0;      // H
    std::int64_t seq_len = 0;     // L
    std::int64_t hidden_dim = 0;  // D
    std::int64_t ffn_ratio = 0;   // r
    double attention_cost = 0.0;
    double ffn_cost = 0.0;
    double total = 0.0;

    nlohmann::json to_json() const {
        return nlohmann::json{{"layers", layers},
                              {"seq_len", seq_len},
                              {"hidden_dim", hidden_dim},
                              {"ffn_ratio", ffn_ratio},
                              {"attention_cost", attention_cost},
                              {"ffn_cost", ffn_cost},
                              {"total", total}};
    }
};

inline CostBreakdown flop_cost(std::int64_t layers, std::int64_t seq_len, std::int64_t hidden_dim,
                               std::int64_t ffn_ratio) {
    if (layers < 1 || seq_len < 1 || hidden_dim < 1 || ffn_ratio < 1) {
        throw ValidationError("flop_cost: all of H, L, D, r must be >= 1");
    }
    CostBreakdown c;
    c.layers = layers;
    c.seq_len = seq_len;
    c.hidden_dim = hidden_dim;
    c.ffn_ratio = ffn_ratio;
    const double H = static_cast<double>(layers), L = static_cast<double>(seq_len),
                 D = static_cast<double>(hidden_dim), r = static_cast<double>(ffn_ratio);
    c.attention_cost = H * L * L * D;
    c.ffn_cost = H * L * D * D * r;
    c.total = c.attention_cost + c.ffn_cost;
    return c;
}

struct TimingStats {
    double mean_ms = 0.0;
    double std_ms = 0.0;
    double min_ms = 0.0;
    std::int64_t warmup = 0;
    std::int64_t reps = 0;

    nlohmann::json to_json() const {
        return nlohmann::json{{"mean_ms", mean_ms}, {"std_ms", std_ms}, {"min_ms", min_ms},
                              {"warmup", warmup},   {"reps", reps}};
    }
};

namespace detail {

// A batch of valid random assemblies of exactly `target_len` tokens each:
// interleaved layout gives 4 + v + 2*L', so v soaks up parity.
inline std::vector<TokenSequence> timing_batch(const ModelConfig& base, std::int64_t target_len,
                                               std::int64_t batch, ItemCatalog& catalog_out, ModelConfig& cfg_out,
                                               std::uint64_t seed) {
    if (target_len < 8) throw ValidationError("time_forward: sequence length must be >= 8");
    if (batch < 1) throw ValidationError("time_forward: batch must be >= 1");
    const std::int64_t v = (target_len - 4) % 2 == 0 ? 0 : 1;
    const std::int64_t recent_len = (target_len - 4 - v) / 2;

    cfg_out = base;
    cfg_out.assembly_mode = AssemblyMode::interleaved;
    cfg_out.use_history = true;
    cfg_out.max_recent = std::max(base.max_recent, recent_len);
    cfg_out.validate();

    catalog_out = ItemCatalog{};
    catalog_out.num_items = cfg_out.item_vocab;
    catalog_out.num_categories = cfg_out.category_vocab;
    for (std::int64_t i = 0; i < cfg_out.item_vocab; ++i) {
        catalog_out.categories_of.push_back({i % cfg_out.category_vocab});
    }

    Rng rng = Rng(seed).child("timing");
    std::vector<TokenSequence> out;
    for (std::int64_t b = 0; b < batch; ++b) {
        BucketPlan plan;
        if (v == 1) {
            Bucket bucket;
            bucket.category_id = 0;
            bucket.items.push_back({static_cast<std::int64_t>(rng.below(cfg_out.item_vocab)), 1, 0});
            plan.buckets.push_back(bucket);
        }
        std::vector<Interaction> recent;
        for (std::int64_t t = 0; t < recent_len; ++t) {
            recent.push_back({b % cfg_out.user_vocab, static_cast<std::int64_t>(rng.below(cfg_out.item_vocab)),
                              static_cast<std::int64_t>(rng.below(cfg_out.action_vocab)), 100 + t, t});
        }
        auto seq = assemble_sequence(b % cfg_out.user_vocab, plan, recent, catalog_out, cfg_out);
        if (seq.length() != target_len) {
            throw ValidationError("time_forward: assembled " + std::to_string(seq.length()) + " tokens, wanted " +
                                  std::to_string(target_len));
        }
        out.push_back(std::move(seq));
    }
    return out;
}

}  // namespace detail

// Wall-clock of inference forward passes over random batches of exactly
// `seq_len` tokens. Strictly single-threaded; call on an otherwise idle
// machine when the numbers matter.
template <class T = double>
TimingStats time_forward(const ModelConfig& cfg, std::int64_t seq_len, std::int64_t batch, std::int64_t warmup,
                         std::int64_t reps, std::uint64_t seed = 0) {
    if (reps < 5) throw ValidationError("time_forward: need at least 5 repetitions, got " + std::to_string(reps));
    if (warmup < 0) throw ValidationError("time_forward: warmup must be >= 0");

    ItemCatalog catalog;
    ModelConfig run_cfg;
    auto sequences = detail::timing_batch(cfg, seq_len, batch, catalog, run_cfg, seed);
    Parameters<T> params = init_parameters<T>(run_cfg, seed);

    NoGradGuard inference;
    for (std::int64_t w = 0; w < warmup; ++w) forward(sequences, params, run_cfg, catalog);

    std::vector<double> ms;
    for (std::int64_t i = 0; i < reps; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        forward(sequences, params, run_cfg, catalog);
        const auto t1 = std::chrono::steady_clock::now();
        ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }

    TimingStats st;
    st.warmup = warmup;
    st.reps = reps;
    st.min_ms = ms[0];
    for (double v : ms) {
        st.mean_ms += v;
        st.min_ms = std::min(st.min_ms, v);
    }
    st.mean_ms /= static_cast<double>(reps);
    for (double v : ms) st.std_ms += (v - st.mean_ms) * (v - st.mean_ms);
    st.std_ms = std::sqrt(st.std_ms / static_cast<double>(reps));
    return st;
}

// Per-user compression accounting: how many raw history events survive into
// buckets, the resulting interleaved sequence length, and the analytic cost
// ratio against feeding the whole log through uncompressed.
struct UserCompression {
    std::int64_t user_id = 0;
    std::int64_t raw_events = 0;       // full log length
    std::int64_t retained_events = 0;  // distinct history events kept in buckets
    std::int64_t buckets = 0;          // v
    std::int64_t slen = 0;             // 4 + v + 2*|recent|
    std::int64_t uncompressed_len = 0; // 4 + 2*raw
    double flop_ratio = 1.0;           // cost(uncompressed) / cost(slen)
};

struct CompressionReport {
    std::vector<UserCompression> users;
    std::int64_t total_raw = 0;
    std::int64_t total_retained = 0;
    double mean_slen = 0.0;
    double mean_uncompressed_len = 0.0;
    double mean_flop_ratio = 0.0;
    std::int64_t layers = 0, hidden_dim = 0, ffn_ratio = 0;  // cost-model reference

    nlohmann::json to_json() const {
        nlohmann::json us = nlohmann::json::array();
        for (const auto& u : users) {
            us.push_back({{"user", u.user_id},
                          {"raw_events", u.raw_events},
                          {"retained_events", u.retained_events},
                          {"buckets", u.buckets},
                          {"slen", u.slen},
                          {"uncompressed_len", u.uncompressed_len},
                          {"flop_ratio", u.flop_ratio}});
        }
        return nlohmann::json{{"users", us},
                              {"total_raw", total_raw},
                              {"total_retained", total_retained},
                              {"mean_slen", mean_slen},
                              {"mean_uncompressed_len", mean_uncompressed_len},
                              {"mean_flop_ratio", mean_flop_ratio},
                              {"cost_model", {{"layers", layers}, {"hidden_dim", hidden_dim}, {"ffn_ratio", ffn_ratio}}}};
    }
};

inline CompressionReport compression_report(const std::vector<UserSequence>& logs, const ItemCatalog& catalog,
                                            std::int64_t V, std::int64_t G, std::int64_t iLen,
                                            std::int64_t layers = 3, std::int64_t hidden_dim = 64,
                                            std::int64_t ffn_ratio = 4) {
    if (logs.empty()) throw EmptyInputError("compression_report: no user logs");
    CompressionReport rep;
    rep.layers = layers;
    rep.hidden_dim = hidden_dim;
    rep.ffn_ratio = ffn_ratio;
    for (const auto& seq : logs) {
        UserCompression u;
        u.user_id = seq.user_id;
        u.raw_events = static_cast<std::int64_t>(seq.events.size());
        auto [history, recent] = partition_history_recent(seq, iLen);
        BucketPlan plan = compress(history, catalog, V, G);
        u.retained_events = static_cast<std::int64_t>(plan_events(plan).size());
        u.buckets = static_cast<std::int64_t>(plan.buckets.size());
        u.slen = 4 + u.buckets + 2 * static_cast<std::int64_t>(recent.size());
        u.uncompressed_len = 4 + 2 * u.raw_events;
        u.flop_ratio = flop_cost(layers, u.uncompressed_len, hidden_dim, ffn_ratio).total /
                       flop_cost(layers, u.slen, hidden_dim, ffn_ratio).total;
        rep.total_raw += u.raw_events;
        rep.total_retained += u.retained_events;
        rep.mean_slen += static_cast<double>(u.slen);
        rep.mean_uncompressed_len += static_cast<double>(u.uncompressed_len);
        rep.mean_flop_ratio += u.flop_ratio;
        rep.users.push_back(u);
    }
    const auto n = static_cast<double>(rep.users.size());
    rep.mean_slen /= n;
    rep.mean_uncompressed_len /= n;
    rep.mean_flop_ratio /= n;
    return rep;
}

}  // namespace cause
