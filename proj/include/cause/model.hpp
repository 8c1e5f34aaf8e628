#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "cause/compress.hpp"
#include "cause/data.hpp"
#include "cause/rng.hpp"
#include "cause/tensor.hpp"

namespace cause {

// The sequence model: embedding tables, bucket aggregation, token assembly
// (user + compressed history + recent interactions), a pre-norm causal
// transformer backbone, and dot-product scoring against the item table.

enum class AssemblyMode { interleaved, merged };

inline std::string to_string(AssemblyMode m) { return m == AssemblyMode::interleaved ? "interleaved" : "merged"; }
inline AssemblyMode assembly_from_string(const std::string& s) {
    if (s == "interleaved") return AssemblyMode::interleaved;
    if (s == "merged") return AssemblyMode::merged;
    throw ValidationError("unknown assembly mode '" + s + "'");
}

struct ModelConfig {
    std::int64_t hidden_dim = 64;
    std::int64_t num_layers = 3;
    std::int64_t num_heads = 8;
    std::int64_t ffn_expansion = 4;
    std::int64_t item_vocab = 1;
    std::int64_t action_vocab = 1;
    std::int64_t user_vocab = 1;
    std::int64_t category_vocab = 1;
    std::int64_t max_recent = 128;  // iLen
    std::int64_t V_max = 8;
    std::int64_t G_max = 32;
    double temperature = 0.1;
    AssemblyMode assembly_mode = AssemblyMode::interleaved;
    bool use_align = true;
    bool use_action_head = true;
    bool use_history = true;
    // Category integration on item tokens; off reproduces the "no item
    // feature" baseline that pairs with use_history=false.
    bool use_item_categories = true;

    void validate() const {
        if (hidden_dim < 1 || num_layers < 1 || num_heads < 1 || ffn_expansion < 1) {
            throw ValidationError("config: dims and layer counts must be >= 1");
        }
        if (hidden_dim % num_heads != 0) {
            throw ValidationError("config: hidden_dim " + std::to_string(hidden_dim) + " not divisible by num_heads " +
                                  std::to_string(num_heads));
        }
        if (item_vocab < 1 || action_vocab < 1 || user_vocab < 1 || category_vocab < 1) {
            throw ValidationError("config: all vocab sizes must be >= 1");
        }
        if (max_recent < 1 || V_max < 1 || G_max < 1) {
            throw ValidationError("config: max_recent, V_max, G_max must be >= 1");
        }
        if (temperature <= 0.0) throw ValidationError("config: temperature must be positive");
    }

    // Longest assembled sequence: separators + user + history + recent.
    std::int64_t max_positions() const { return 4 + V_max + 2 * max_recent; }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["hidden_dim"] = hidden_dim;
        j["num_layers"] = num_layers;
        j["num_heads"] = num_heads;
        j["ffn_expansion"] = ffn_expansion;
        j["item_vocab"] = item_vocab;
        j["action_vocab"] = action_vocab;
        j["user_vocab"] = user_vocab;
        j["category_vocab"] = category_vocab;
        j["max_recent"] = max_recent;
        j["V_max"] = V_max;
        j["G_max"] = G_max;
        j["temperature"] = temperature;
        j["assembly_mode"] = to_string(assembly_mode);
        j["use_align"] = use_align;
        j["use_action_head"] = use_action_head;
        j["use_history"] = use_history;
        j["use_item_categories"] = use_item_categories;
        return j;
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        c.hidden_dim = j.at("hidden_dim").get<std::int64_t>();
        c.num_layers = j.at("num_layers").get<std::int64_t>();
        c.num_heads = j.at("num_heads").get<std::int64_t>();
        c.ffn_expansion = j.at("ffn_expansion").get<std::int64_t>();
        c.item_vocab = j.at("item_vocab").get<std::int64_t>();
        c.action_vocab = j.at("action_vocab").get<std::int64_t>();
        c.user_vocab = j.at("user_vocab").get<std::int64_t>();
        c.category_vocab = j.at("category_vocab").get<std::int64_t>();
        c.max_recent = j.at("max_recent").get<std::int64_t>();
        c.V_max = j.at("V_max").get<std::int64_t>();
        c.G_max = j.at("G_max").get<std::int64_t>();
        c.temperature = j.at("temperature").get<double>();
        c.assembly_mode = assembly_from_string(j.at("assembly_mode").get<std::string>());
        c.use_align = j.at("use_align").get<bool>();
        c.use_action_head = j.at("use_action_head").get<bool>();
        c.use_history = j.at("use_history").get<bool>();
        c.use_item_categories = j.at("use_item_categories").get<bool>();
        c.validate();
        return c;
    }
};

// Special-token row indices in the dedicated table.
enum : std::int64_t { SPEC_SEG_USER = 0, SPEC_SEG_HIST = 1, SPEC_SEG_RECENT = 2, SPEC_PAD = 3 };

template <class T = double>
struct Parameters {
    using Tens = Tensor<T>;

    Tens item_table;     // N x D, shared by input tokens and the scoring head
    Tens category_table; // V^C x D, bucket embeddings and item-category features
    Tens user_table;     // M x D
    Tens action_table;   // T x D
    Tens special_table;  // 4 x D
    Tens pos_table;      // max_positions x D
    Tens w_align, b_align;
    Tens w_action, b_action;  // action head: D -> T

    struct Layer {
        Tens ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
        Tens ln2_g, ln2_b, w1, b1, w2, b2;
    };
    std::vector<Layer> layers;
    Tens lnf_g, lnf_b;

    // Stable name -> tensor listing; the order defines checkpoint layout and
    // Adam state identity.
    std::vector<std::pair<std::string, Tens*>> named() {
        std::vector<std::pair<std::string, Tens*>> out = {
            {"item_table", &item_table},     {"category_table", &category_table},
            {"user_table", &user_table},     {"action_table", &action_table},
            {"special_table", &special_table}, {"pos_table", &pos_table},
            {"w_align", &w_align},           {"b_align", &b_align},
            {"w_action", &w_action},         {"b_action", &b_action},
        };
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const std::string p = "layer" + std::to_string(l) + ".";
            auto& L = layers[l];
            out.emplace_back(p + "ln1_g", &L.ln1_g);
            out.emplace_back(p + "ln1_b", &L.ln1_b);
            out.emplace_back(p + "wq", &L.wq);
            out.emplace_back(p + "bq", &L.bq);
            out.emplace_back(p + "wk", &L.wk);
            out.emplace_back(p + "bk", &L.bk);
            out.emplace_back(p + "wv", &L.wv);
            out.emplace_back(p + "bv", &L.bv);
            out.emplace_back(p + "wo", &L.wo);
            out.emplace_back(p + "bo", &L.bo);
            out.emplace_back(p + "ln2_g", &L.ln2_g);
            out.emplace_back(p + "ln2_b", &L.ln2_b);
            out.emplace_back(p + "w1", &L.w1);
            out.emplace_back(p + "b1", &L.b1);
            out.emplace_back(p + "w2", &L.w2);
            out.emplace_back(p + "b2", &L.b2);
        }
        out.emplace_back("lnf_g", &lnf_g);
        out.emplace_back("lnf_b", &lnf_b);
        return out;
    }

    void mark_trainable() {
        for (auto& [name, t] : named()) t->set_requires_grad();
    }

    void zero_grad() {
        for (auto& [name, t] : named()) t->zero_grad();
    }
};

// Fresh parameters: weights and tables ~ N(0, 0.02), biases zero, layer-norm
// gains one.
template <class T = double>
Parameters<T> init_parameters(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    const std::int64_t D = cfg.hidden_dim, F = cfg.hidden_dim * cfg.ffn_expansion;
    Parameters<T> p;
    Rng rng = Rng(seed).child("init");
    auto normal = [&](std::int64_t r, std::int64_t c) {
        Tensor<T> t(r, c);
        for (std::int64_t i = 0; i < t.size(); ++i) t.data()[i] = static_cast<T>(rng.normal(0.0, 0.02));
        return t;
    };
    auto zeros = [&](std::int64_t r, std::int64_t c) { return Tensor<T>(r, c); };
    auto ones = [&](std::int64_t c) {
        Tensor<T> t(1, c);
        for (std::int64_t i = 0; i < c; ++i) t.data()[i] = T(1);
        return t;
    };

    p.item_table = normal(cfg.item_vocab, D);
    p.category_table = normal(cfg.category_vocab, D);
    p.user_table = normal(cfg.user_vocab, D);
    p.action_table = normal(cfg.action_vocab, D);
    p.special_table = normal(4, D);
    p.pos_table = normal(cfg.max_positions(), D);
    p.w_align = normal(D, D);
    p.b_align = zeros(1, D);
    p.w_action = normal(D, cfg.action_vocab);
    p.b_action = zeros(1, cfg.action_vocab);
    p.layers.resize(static_cast<std::size_t>(cfg.num_layers));
    for (auto& L : p.layers) {
        L.ln1_g = ones(D);
        L.ln1_b = zeros(1, D);
        L.wq = normal(D, D);
        L.bq = zeros(1, D);
        L.wk = normal(D, D);
        L.bk = zeros(1, D);
        L.wv = normal(D, D);
        L.bv = zeros(1, D);
        L.wo = normal(D, D);
        L.bo = zeros(1, D);
        L.ln2_g = ones(D);
        L.ln2_b = zeros(1, D);
        L.w1 = normal(D, F);
        L.b1 = zeros(1, F);
        L.w2 = normal(F, D);
        L.b2 = zeros(1, D);
    }
    p.lnf_g = ones(D);
    p.lnf_b = zeros(1, D);
    return p;
}

// ---------------------------------------------------------------------------
// token assembly
// ---------------------------------------------------------------------------

struct Token {
    enum class Kind { seg_user, seg_hist, seg_recent, user, history, item, action, merged, pad };
    Kind kind = Kind::pad;
    std::int64_t id = 0;      // user id / bucket index / item id / action id
    std::int64_t action = 0;  // merged tokens carry the action here

    bool operator==(const Token&) const = default;
};

struct TokenSequence {
    std::int64_t user_id = 0;
    std::vector<Token> tokens;
    // Per-position supervision; -1 = no target at that position.
    std::vector<std::int64_t> item_target;
    std::vector<std::int64_t> action_target;
    BucketPlan plan;  // referenced by history tokens

    std::int64_t length() const { return static_cast<std::int64_t>(tokens.size()); }
};

// One bucket's token embedding: mean over member items of the aligned item
// embedding, plus the bucket's category embedding. use_align=false drops the
// affine map.
template <class T>
Tensor<T> aggregate_bucket(const Bucket& bucket, Parameters<T>& params, const ModelConfig& cfg) {
    if (bucket.items.empty()) throw ValidationError("aggregate_bucket: empty bucket");
    if (static_cast<std::int64_t>(bucket.items.size()) > cfg.G_max) {
        throw ValidationError("aggregate_bucket: bucket of " + std::to_string(bucket.items.size()) +
                              " items exceeds G=" + std::to_string(cfg.G_max));
    }
    std::vector<std::int64_t> ids;
    for (const auto& it : bucket.items) ids.push_back(it.item_id);
    Tensor<T> mean = gather_mean_rows(params.item_table, {ids});
    if (cfg.use_align) mean = add_rowvec(matmul(mean, params.w_align), params.b_align);
    return add(mean, gather_rows(params.category_table, {bucket.category_id}));
}

// All bucket embeddings of a plan, in plan order: [v x D].
template <class T>
Tensor<T> build_history_tokens(const BucketPlan& plan, Parameters<T>& params, const ModelConfig& cfg) {
    const std::int64_t v = static_cast<std::int64_t>(plan.buckets.size());
    if (v == 0) return Tensor<T>(0, cfg.hidden_dim);
    std::vector<std::vector<std::int64_t>> groups;
    std::vector<std::int64_t> cat_ids;
    for (const auto& b : plan.buckets) {
        if (b.items.empty()) throw ValidationError("build_history_tokens: empty bucket");
        std::vector<std::int64_t> ids;
        for (const auto& it : b.items) ids.push_back(it.item_id);
        groups.push_back(std::move(ids));
        cat_ids.push_back(b.category_id);
    }
    Tensor<T> means = gather_mean_rows(params.item_table, groups);
    if (cfg.use_align) means = add_rowvec(matmul(means, params.w_align), params.b_align);
    return add(means, gather_rows(params.category_table, cat_ids));
}

// Lays out [SEG_USER, User, (SEG_HIST, History x v,)? SEG_RECENT, recent
// tokens] and the two supervision masks. `held_out_item` supplies the final
// position's next-item label during training; pass -1 at inference.
inline TokenSequence assemble_sequence(std::int64_t user_id, const BucketPlan& plan,
                                       const std::vector<Interaction>& recent, const ItemCatalog& catalog,
                                       const ModelConfig& cfg, std::int64_t held_out_item = -1) {
    const auto L = static_cast<std::int64_t>(recent.size());
    if (L > cfg.max_recent) {
        throw ValidationError("assemble: recent length " + std::to_string(L) + " exceeds iLen " +
                              std::to_string(cfg.max_recent) + " (caller must truncate)");
    }
    if (user_id < 0 || user_id >= cfg.user_vocab) {
        throw ValidationError("assemble: user " + std::to_string(user_id) + " out of vocab " +
                              std::to_string(cfg.user_vocab));
    }
    const std::int64_t v = cfg.use_history ? static_cast<std::int64_t>(plan.buckets.size()) : 0;
    if (v > cfg.V_max) {
        throw ValidationError("assemble: plan has " + std::to_string(v) + " buckets, V=" + std::to_string(cfg.V_max));
    }

    TokenSequence seq;
    seq.user_id = user_id;
    if (cfg.use_history) seq.plan = plan;
    auto push = [&](Token t, std::int64_t item_tgt = -1, std::int64_t action_tgt = -1) {
        seq.tokens.push_back(t);
        seq.item_target.push_back(item_tgt);
        seq.action_target.push_back(action_tgt);
    };

    push({Token::Kind::seg_user, 0, 0});
    push({Token::Kind::user, user_id, 0});
    if (cfg.use_history) {
        push({Token::Kind::seg_hist, 0, 0});
        for (std::int64_t j = 0; j < v; ++j) push({Token::Kind::history, j, 0});
    }
    push({Token::Kind::seg_recent, 0, 0});

    for (std::int64_t t = 0; t < L; ++t) {
        const auto& ev = recent[static_cast<std::size_t>(t)];
        if (ev.item_id < 0 || ev.item_id >= cfg.item_vocab) {
            throw ValidationError("assemble: item " + std::to_string(ev.item_id) + " out of vocab " +
                                  std::to_string(cfg.item_vocab));
        }
        if (ev.action_id < 0 || ev.action_id >= cfg.action_vocab) {
            throw ValidationError("assemble: action " + std::to_string(ev.action_id) + " out of vocab " +
                                  std::to_string(cfg.action_vocab));
        }
        const std::int64_t next_item = t + 1 < L ? recent[static_cast<std::size_t>(t + 1)].item_id : held_out_item;
        if (cfg.assembly_mode == AssemblyMode::interleaved) {
            // Item token predicts the current action; action token predicts
            // the next item.
            push({Token::Kind::item, ev.item_id, 0}, -1, cfg.use_action_head ? ev.action_id : -1);
            push({Token::Kind::action, ev.action_id, 0}, next_item, -1);
        } else {
            push({Token::Kind::merged, ev.item_id, ev.action_id}, next_item, -1);
        }
    }
    return seq;
}

// ---------------------------------------------------------------------------
// embedding + backbone
// ---------------------------------------------------------------------------

namespace detail {

// Batch embedding: one typed gather per token family plus a reordering
// gather, so the tape stays small regardless of sequence length. Sequences
// are suffix-padded to the longest length in the batch.
template <class T>
Tensor<T> embed_batch(const std::vector<TokenSequence>& batch, Parameters<T>& params, const ModelConfig& cfg,
                      std::int64_t padded_len, const ItemCatalog& catalog) {
    std::vector<std::int64_t> spec_ids;          // rows of special_table
    std::vector<std::int64_t> user_ids;
    std::vector<std::int64_t> action_ids;
    std::vector<std::int64_t> item_ids;          // item + merged tokens
    std::vector<std::vector<std::int64_t>> item_cat_groups;
    std::vector<std::int64_t> merged_action_ids;  // parallel to merged subset
    std::vector<TokenSequence const*> hist_owner;

    // Flat position -> (block, row-within-block); blocks are concatenated in
    // the fixed order below.
    enum Block { B_SPEC, B_USER, B_ACTION, B_ITEM, B_MERGED, B_HIST };
    std::vector<std::pair<Block, std::int64_t>> where;
    where.reserve(static_cast<std::size_t>(padded_len) * batch.size());

    std::vector<std::vector<std::int64_t>> hist_groups;
    std::vector<std::int64_t> hist_cat_ids;
    std::vector<std::int64_t> pos_ids;

    std::int64_t n_merged = 0;
    for (const auto& seq : batch) {
        if (seq.length() > padded_len) throw ValidationError("embed: sequence longer than padded length");
        for (std::int64_t t = 0; t < padded_len; ++t) {
            pos_ids.push_back(t);
            if (t >= seq.length()) {
                where.emplace_back(B_SPEC, static_cast<std::int64_t>(spec_ids.size()));
                spec_ids.push_back(SPEC_PAD);
                continue;
            }
            const Token& tok = seq.tokens[static_cast<std::size_t>(t)];
            switch (tok.kind) {
                case Token::Kind::seg_user:
                case Token::Kind::seg_hist:
                case Token::Kind::seg_recent:
                case Token::Kind::pad: {
                    where.emplace_back(B_SPEC, static_cast<std::int64_t>(spec_ids.size()));
                    const std::int64_t row = tok.kind == Token::Kind::seg_user     ? SPEC_SEG_USER
                                             : tok.kind == Token::Kind::seg_hist   ? SPEC_SEG_HIST
                                             : tok.kind == Token::Kind::seg_recent ? SPEC_SEG_RECENT
                                                                                   : SPEC_PAD;
                    spec_ids.push_back(row);
                    break;
                }
                case Token::Kind::user:
                    where.emplace_back(B_USER, static_cast<std::int64_t>(user_ids.size()));
                    user_ids.push_back(tok.id);
                    break;
                case Token::Kind::action:
                    where.emplace_back(B_ACTION, static_cast<std::int64_t>(action_ids.size()));
                    action_ids.push_back(tok.id);
                    break;
                case Token::Kind::item:
                    where.emplace_back(B_ITEM, static_cast<std::int64_t>(item_ids.size()));
                    item_ids.push_back(tok.id);
                    if (cfg.use_item_categories) item_cat_groups.push_back(catalog.categories(tok.id));
                    break;
                case Token::Kind::merged:
                    where.emplace_back(B_MERGED, n_merged++);
                    item_ids.push_back(tok.id);
                    if (cfg.use_item_categories) item_cat_groups.push_back(catalog.categories(tok.id));
                    merged_action_ids.push_back(tok.action);
                    break;
                case Token::Kind::history: {
                    where.emplace_back(B_HIST, static_cast<std::int64_t>(hist_groups.size()));
                    const Bucket& b = seq.plan.buckets.at(static_cast<std::size_t>(tok.id));
                    std::vector<std::int64_t> ids;
                    for (const auto& it : b.items) ids.push_back(it.item_id);
                    hist_groups.push_back(std::move(ids));
                    hist_cat_ids.push_back(b.category_id);
                    break;
                }
            }
        }
    }

    const std::int64_t D = cfg.hidden_dim;
    const std::int64_t n_item_like = static_cast<std::int64_t>(item_ids.size());
    const std::int64_t n_plain_item = n_item_like - n_merged;

    // Typed blocks. item/merged share the gather; merged rows additionally
    // receive their action embedding.
    Tensor<T> b_spec = gather_rows(params.special_table, spec_ids);
    Tensor<T> b_user = user_ids.empty() ? Tensor<T>(0, D) : gather_rows(params.user_table, user_ids);
    Tensor<T> b_action = action_ids.empty() ? Tensor<T>(0, D) : gather_rows(params.action_table, action_ids);

    Tensor<T> b_item_like(0, D);
    if (n_item_like > 0) {
        b_item_like = gather_rows(params.item_table, item_ids);
        if (cfg.use_item_categories) {
            b_item_like = add(b_item_like, gather_mean_rows(params.category_table, item_cat_groups));
        }
    }
    Tensor<T> b_item = n_plain_item > 0 ? slice_rows(b_item_like, 0, n_plain_item) : Tensor<T>(0, D);
    Tensor<T> b_merged(0, D);
    if (n_merged > 0) {
        // Plain item tokens come first in item_ids because interleaved and
        // merged modes never mix within a batch.
        b_merged = add(slice_rows(b_item_like, n_plain_item, n_item_like),
                       gather_rows(params.action_table, merged_action_ids));
    }
    Tensor<T> b_hist(0, D);
    if (!hist_groups.empty()) {
        Tensor<T> means = gather_mean_rows(params.item_table, hist_groups);
        if (cfg.use_align) means = add_rowvec(matmul(means, params.w_align), params.b_align);
        b_hist = add(means, gather_rows(params.category_table, hist_cat_ids));
    }

    // Concatenate the non-empty blocks and reorder into position order.
    std::vector<Tensor<T>> blocks;
    std::vector<std::int64_t> offsets(6, -1);
    auto add_block = [&](Block id, Tensor<T>& t) {
        if (t.rows() == 0) return;
        std::int64_t off = 0;
        for (const auto& b : blocks) off += b.rows();
        offsets[id] = off;
        blocks.push_back(t);
    };
    add_block(B_SPEC, b_spec);
    add_block(B_USER, b_user);
    add_block(B_ACTION, b_action);
    add_block(B_ITEM, b_item);
    add_block(B_MERGED, b_merged);
    add_block(B_HIST, b_hist);
    Tensor<T> all = concat_rows(blocks);

    std::vector<std::int64_t> order;
    order.reserve(where.size());
    for (const auto& [blk, row] : where) order.push_back(offsets[blk] + row);
    Tensor<T> x = gather_rows(all, order);
    return add(x, gather_rows(params.pos_table, pos_ids));
}

}  // namespace detail

// Full backbone: embeds the batch and runs H pre-norm blocks of causal
// multi-head attention and a GELU FFN, finishing with a layer norm. Output is
// the flattened [batch * padded_len, D] matrix of contextual embeddings.
template <class T>
Tensor<T> forward(const std::vector<TokenSequence>& batch, Parameters<T>& params, const ModelConfig& cfg,
                  const ItemCatalog& catalog, std::int64_t* padded_len_out = nullptr) {
    if (batch.empty()) throw ValidationError("forward: empty batch");
    std::int64_t padded = 0;
    for (const auto& s : batch) padded = std::max(padded, s.length());
    if (padded > cfg.max_positions()) {
        throw ValidationError("forward: sequence length " + std::to_string(padded) + " exceeds positional table " +
                              std::to_string(cfg.max_positions()));
    }
    if (padded_len_out) *padded_len_out = padded;

    Tensor<T> x = detail::embed_batch(batch, params, cfg, padded, catalog);
    for (auto& L : params.layers) {
        Tensor<T> h = layer_norm(x, L.ln1_g, L.ln1_b);
        Tensor<T> q = add_rowvec(matmul(h, L.wq), L.bq);
        Tensor<T> k = add_rowvec(matmul(h, L.wk), L.bk);
        Tensor<T> v = add_rowvec(matmul(h, L.wv), L.bv);
        Tensor<T> att = causal_attention(q, k, v, cfg.num_heads, padded);
        x = add(x, add_rowvec(matmul(att, L.wo), L.bo));
        Tensor<T> f = layer_norm(x, L.ln2_g, L.ln2_b);
        f = gelu(add_rowvec(matmul(f, L.w1), L.b1));
        x = add(x, add_rowvec(matmul(f, L.w2), L.b2));
    }
    return layer_norm(x, params.lnf_g, params.lnf_b);
}

// Dot-product item scores for one contextual embedding row against the tied
// item table: logit_c = <e', E_item[c]> / tau.
template <class T>
Tensor<T> score_items(const Tensor<T>& e_row, const std::vector<std::int64_t>& candidate_ids, Parameters<T>& params,
                      double tau) {
    if (tau <= 0.0) throw ValidationError("score_items: tau must be positive");
    if (e_row.rows() != 1) throw ValidationError("score_items: expected a single row, got " + e_row.shape_str());
    return sampled_scores(e_row, params.item_table, {candidate_ids}, static_cast<T>(tau));
}

// Full-catalog scores: [rows x N].
template <class T>
Tensor<T> score_all_items(const Tensor<T>& e_rows, Parameters<T>& params, double tau) {
    if (tau <= 0.0) throw ValidationError("score_items: tau must be positive");
    return scale(matmul(e_rows, params.item_table, false, true), static_cast<T>(1.0 / tau));
}

// ---------------------------------------------------------------------------
// checkpointing
// ---------------------------------------------------------------------------

// Binary blob of little-endian float32 values in named() order, plus a JSON
// manifest with the config and {name -> shape, byte offset}. save(load(f))
// reproduces f bit-exactly.
template <class T>
void save_checkpoint(const std::string& path_prefix, Parameters<T>& params, const ModelConfig& cfg) {
    std::ofstream bin(path_prefix + ".bin", std::ios::binary);
    if (!bin) throw ValidationError(path_prefix + ".bin: cannot open for writing");
    nlohmann::json manifest;
    manifest["config"] = cfg.to_json();
    nlohmann::json entries;
    std::int64_t offset = 0;
    for (auto& [name, t] : params.named()) {
        nlohmann::json e;
        e["shape"] = {t->rows(), t->cols()};
        e["offset"] = offset;
        entries[name] = e;
        for (std::int64_t i = 0; i < t->size(); ++i) {
            const float v = static_cast<float>(t->data()[i]);
            static_assert(sizeof(float) == 4);
            bin.write(reinterpret_cast<const char*>(&v), 4);
        }
        offset += t->size() * 4;
    }
    manifest["params"] = entries;
    std::ofstream man(path_prefix + ".json", std::ios::binary);
    if (!man) throw ValidationError(path_prefix + ".json: cannot open for writing");
    man << manifest.dump(2) << "\n";
}

template <class T>
std::pair<Parameters<T>, ModelConfig> load_checkpoint(const std::string& path_prefix) {
    std::ifstream man(path_prefix + ".json");
    if (!man) throw ValidationError(path_prefix + ".json: cannot open");
    nlohmann::json manifest;
    try {
        man >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(path_prefix + ".json: " + e.what());
    }
    ModelConfig cfg = ModelConfig::from_json(manifest.at("config"));
    Parameters<T> params = init_parameters<T>(cfg, 0);

    std::ifstream bin(path_prefix + ".bin", std::ios::binary);
    if (!bin) throw ValidationError(path_prefix + ".bin: cannot open");
    const nlohmann::json& entries = manifest.at("params");
    for (auto& [name, t] : params.named()) {
        if (!entries.contains(name)) throw ValidationError(path_prefix + ": checkpoint missing tensor '" + name + "'");
        const nlohmann::json& e = entries.at(name);
        const std::int64_t r = e.at("shape").at(0).get<std::int64_t>();
        const std::int64_t c = e.at("shape").at(1).get<std::int64_t>();
        if (r != t->rows() || c != t->cols()) {
            throw ValidationError(path_prefix + ": tensor '" + name + "' has shape " +
                                  Tensor<T>::shape_str(r, c) + ", expected " + t->shape_str());
        }
        bin.seekg(e.at("offset").get<std::int64_t>());
        for (std::int64_t i = 0; i < t->size(); ++i) {
            float v = 0;
            bin.read(reinterpret_cast<char*>(&v), 4);
            t->data()[i] = static_cast<T>(v);
        }
        if (!bin) throw ParseError(path_prefix + ".bin: truncated while reading '" + name + "'");
    }
    return {std::move(params), cfg};
}

}  // namespace cause
