#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <cause/model.hpp>

namespace cause {

// Ranking evaluation. Each held-out interaction contributes one rank: the
// position of the true next item among a candidate set scored by the model.
// Ranks are folded into nDCG@k (k in {1,10,20,100,200}) and MRR, averaged
// over users.

// 1-based rank of `target` inside `scores`. Ties are broken toward the
// smaller candidate index so results are deterministic.
template <class T>
std::int64_t rank_of_target(const std::vector<T>& scores, std::int64_t target) {
    const auto n = static_cast<std::int64_t>(scores.size());
    if (target < 0 || target >= n) {
        throw ValidationError("rank_of_target: target " + std::to_string(target) + " outside " + std::to_string(n) +
                              " candidates");
    }
    const T pivot = scores[static_cast<std::size_t>(target)];
    std::int64_t rank = 1;
    for (std::int64_t i = 0; i < n; ++i) {
        const T s = scores[static_cast<std::size_t>(i)];
        if (!std::isfinite(static_cast<double>(s))) {
            throw ValidationError("rank_of_target: non-finite score at index " + std::to_string(i));
        }
        if (s > pivot || (s == pivot && i < target)) ++rank;
    }
    return rank;
}

// Single-relevant-item nDCG: the one hit contributes 1/log2(rank+1) when it
// makes the cutoff, and the ideal DCG is 1.
inline double ndcg_at_k(std::int64_t rank, std::int64_t k) {
    if (rank < 1 || k < 1) {
        throw ValidationError("ndcg_at_k: rank and k must be >= 1, got rank=" + std::to_string(rank) +
                              " k=" + std::to_string(k));
    }
    if (rank > k) return 0.0;
    return 1.0 / std::log2(static_cast<double>(rank) + 1.0);
}

inline double mrr(std::int64_t rank) {
    if (rank < 1) throw ValidationError("mrr: rank must be >= 1, got " + std::to_string(rank));
    return 1.0 / static_cast<double>(rank);
}

// Candidate protocol: score the target against the whole catalog, or against
// the target plus `num_sampled` uniformly drawn non-target items. Sampling is
// keyed per user off `seed`, so results do not depend on batching order.
struct EvalProtocol {
    enum class Kind { full, sampled };
    Kind kind = Kind::full;
    std::int64_t num_sampled = 200;
    std::uint64_t seed = 0;

    static EvalProtocol full() { return EvalProtocol{}; }

    static EvalProtocol sampled(std::int64_t num, std::uint64_t seed) {
        if (num < 1) throw ValidationError("protocol: sampled candidate count must be >= 1");
        return EvalProtocol{Kind::sampled, num, seed};
    }

    // Accepts "full" or "sampled:K".
    static EvalProtocol parse(const std::string& text, std::uint64_t seed = 0) {
        if (text == "full") return full();
        if (text.rfind("sampled:", 0) == 0) {
            std::int64_t num = 0;
            try {
                num = std::stoll(text.substr(8));
            } catch (const std::exception&) {
                throw ValidationError("protocol: cannot parse candidate count in '" + text + "'");
            }
            return sampled(num, seed);
        }
        throw ValidationError("protocol: expected 'full' or 'sampled:K', got '" + text + "'");
    }

    std::string describe() const {
        return kind == Kind::full ? "full" : "sampled:" + std::to_string(num_sampled);
    }
};

struct EvalReport {
    double n_at_1 = 0.0;
    double n_at_10 = 0.0;
    double n_at_20 = 0.0;
    double n_at_100 = 0.0;
    double n_at_200 = 0.0;
    double mrr = 0.0;
    double mean_rank = 0.0;  // diagnostic, not a headline metric
    std::int64_t num_users = 0;
    std::string protocol;
    std::string config_hash;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["metrics"] = {{"N@1", n_at_1},   {"N@10", n_at_10},   {"N@20", n_at_20},
                        {"N@100", n_at_100}, {"N@200", n_at_200}, {"MRR", mrr}};
        j["mean_rank"] = mean_rank;
        j["num_users"] = num_users;
        j["protocol"] = protocol;
        j["config_hash"] = config_hash;
        return j;
    }

    static std::string csv_header() { return "protocol,num_users,n_at_1,n_at_10,n_at_20,n_at_100,n_at_200,mrr,config_hash"; }

    std::string csv_row() const {
        auto num = [](double v) {
            char buf[32];
            std::snprintf(buf, sizeof(buf), "%.6f", v);
            return std::string(buf);
        };
        return protocol + "," + std::to_string(num_users) + "," + num(n_at_1) + "," + num(n_at_10) + "," +
               num(n_at_20) + "," + num(n_at_100) + "," + num(n_at_200) + "," + num(mrr) + "," + config_hash;
    }
};

// Short stable hash of the model configuration, so reports can be matched to
// the checkpoint that produced them.
inline std::string config_fingerprint(const ModelConfig& cfg) {
    const std::string text = cfg.to_json().dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : text) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

// One ranking task: the model conditions on (compressed history, recent
// window) and must rank `target_item` highly.
struct EvalCase {
    std::int64_t user_id = 0;
    BucketPlan plan;
    std::vector<Interaction> recent;
    std::int64_t target_item = 0;
};

enum class EvalSegment { validation, test };

// Builds one case per user from a split: the conditioning prefix is train
// (validation) or train+val (test); the target is the first event of the
// chosen segment. Users whose prefix or segment is empty are skipped
// (possible under timestamp splits).
inline std::vector<EvalCase> make_eval_cases(const SplitResult& split, EvalSegment segment,
                                             const ItemCatalog& catalog, std::int64_t iLen, std::int64_t V,
                                             std::int64_t G) {
    std::vector<EvalCase> cases;
    for (const auto& us : split.users) {
        std::vector<Interaction> prefix = us.train;
        if (segment == EvalSegment::test) prefix.insert(prefix.end(), us.val.begin(), us.val.end());
        const auto& targets = segment == EvalSegment::validation ? us.val : us.test;
        if (prefix.empty() || targets.empty()) continue;
        UserSequence tmp{us.user_id, std::move(prefix)};
        auto [history, recent] = partition_history_recent(tmp, iLen);
        EvalCase ec;
        ec.user_id = us.user_id;
        ec.plan = compress(history, catalog, V, G);
        ec.recent = std::move(recent);
        ec.target_item = targets.front().item_id;
        cases.push_back(std::move(ec));
    }
    return cases;
}

namespace detail {

// Uniform non-target candidate id in [0, N); requires a second item to exist.
inline std::int64_t draw_non_target(std::int64_t num_items, std::int64_t target, Rng& rng) {
    if (num_items < 2) throw ValidationError("evaluate: sampled protocol needs an item vocab >= 2");
    std::int64_t c = target;
    while (c == target) c = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(num_items)));
    return c;
}

}  // namespace detail

// Scores every case's held-out item and averages the rank metrics. The query
// embedding is the output at the final position of the assembled sequence
// (the slot whose training label is the next item).
template <class T>
EvalReport evaluate(const std::vector<EvalCase>& cases, Parameters<T>& params, const ModelConfig& cfg,
                    const ItemCatalog& catalog, const EvalProtocol& protocol, std::int64_t batch_size = 32) {
    if (cases.empty()) throw EmptyInputError("evaluate: no eligible users");
    if (batch_size < 1) throw ValidationError("evaluate: batch_size must be >= 1");
    NoGradGuard inference;
    const Rng root(protocol.seed);

    double sum_n1 = 0.0, sum_n10 = 0.0, sum_n20 = 0.0, sum_n100 = 0.0, sum_n200 = 0.0;
    double sum_mrr = 0.0, sum_rank = 0.0;

    const auto total = static_cast<std::int64_t>(cases.size());
    for (std::int64_t start = 0; start < total; start += batch_size) {
        const std::int64_t stop = std::min(total, start + batch_size);
        std::vector<TokenSequence> batch;
        for (std::int64_t i = start; i < stop; ++i) {
            const auto& ec = cases[static_cast<std::size_t>(i)];
            if (ec.recent.empty()) {
                throw ValidationError("evaluate: user " + std::to_string(ec.user_id) + " has no recent events");
            }
            if (ec.target_item < 0 || ec.target_item >= cfg.item_vocab) {
                throw ValidationError("evaluate: target item " + std::to_string(ec.target_item) + " out of vocab " +
                                      std::to_string(cfg.item_vocab));
            }
            batch.push_back(assemble_sequence(ec.user_id, ec.plan, ec.recent, catalog, cfg));
        }
        std::int64_t padded = 0;
        Tensor<T> out = forward(batch, params, cfg, catalog, &padded);

        // One query row per case: the final real position of its sequence.
        const std::int64_t chunk = stop - start;
        Tensor<T> queries(chunk, cfg.hidden_dim);
        for (std::int64_t b = 0; b < chunk; ++b) {
            const std::int64_t row = b * padded + batch[static_cast<std::size_t>(b)].length() - 1;
            for (std::int64_t d = 0; d < cfg.hidden_dim; ++d) queries.at(b, d) = out.at(row, d);
        }

        Tensor<T> scores(0, 0);
        std::vector<std::int64_t> target_index(static_cast<std::size_t>(chunk), 0);
        if (protocol.kind == EvalProtocol::Kind::full) {
            scores = score_all_items(queries, params, cfg.temperature);
            for (std::int64_t b = 0; b < chunk; ++b) {
                target_index[static_cast<std::size_t>(b)] = cases[static_cast<std::size_t>(start + b)].target_item;
            }
        } else {
            // Candidate 0 is the target; the rest are per-user uniform draws.
            std::vector<std::vector<std::int64_t>> ids;
            for (std::int64_t b = 0; b < chunk; ++b) {
                const auto& ec = cases[static_cast<std::size_t>(start + b)];
                Rng user_rng = root.child("eval-user:" + std::to_string(ec.user_id));
                std::vector<std::int64_t> row{ec.target_item};
                for (std::int64_t k = 0; k < protocol.num_sampled; ++k) {
                    row.push_back(detail::draw_non_target(cfg.item_vocab, ec.target_item, user_rng));
                }
                ids.push_back(std::move(row));
            }
            scores = sampled_scores(queries, params.item_table, ids, static_cast<T>(cfg.temperature));
        }

        for (std::int64_t b = 0; b < chunk; ++b) {
            std::vector<T> row(static_cast<std::size_t>(scores.cols()));
            for (std::int64_t c = 0; c < scores.cols(); ++c) row[static_cast<std::size_t>(c)] = scores.at(b, c);
            const std::int64_t rank = rank_of_target(row, target_index[static_cast<std::size_t>(b)]);
            sum_n1 += ndcg_at_k(rank, 1);
            sum_n10 += ndcg_at_k(rank, 10);
            sum_n20 += ndcg_at_k(rank, 20);
            sum_n100 += ndcg_at_k(rank, 100);
            sum_n200 += ndcg_at_k(rank, 200);
            sum_mrr += mrr(rank);
            sum_rank += static_cast<double>(rank);
        }
    }

    EvalReport rep;
    const auto users = static_cast<double>(total);
    rep.n_at_1 = sum_n1 / users;
    rep.n_at_10 = sum_n10 / users;
    rep.n_at_20 = sum_n20 / users;
    rep.n_at_100 = sum_n100 / users;
    rep.n_at_200 = sum_n200 / users;
    rep.mrr = sum_mrr / users;
    rep.mean_rank = sum_rank / users;
    rep.num_users = total;
    rep.protocol = protocol.describe();
    rep.config_hash = config_fingerprint(cfg);
    for (double v : {rep.n_at_1, rep.n_at_10, rep.n_at_20, rep.n_at_100, rep.n_at_200, rep.mrr}) {
        if (v < 0.0 || v > 1.0) throw ValidationError("evaluate: metric outside [0,1]");
    }
    return rep;
}

}  // namespace cause
