#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <cause/metrics.hpp>

namespace cause {

// Training: uniform negative sampling, the contrastive next-item loss, the
// action cross-entropy, their sum over a batch, Adam, and the epoch loop
// with best-validation checkpointing.

struct TrainConfig {
    double learning_rate = 5e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    // Desk-scale budget; large runs use 200 epochs with the same early exit.
    std::int64_t epochs = 50;
    std::int64_t batch_size = 16;
    std::int64_t num_negatives = 200;  // K
    double tau = 0.1;
    std::uint64_t seed = 0;
    // Stop after this many validations without improvement (0 disables).
    std::int64_t patience = 10;

    void validate() const {
        if (learning_rate < 0.0) throw ValidationError("train config: learning_rate must be >= 0");
        if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
            throw ValidationError("train config: betas must lie in [0,1)");
        }
        if (adam_eps <= 0.0) throw ValidationError("train config: adam_eps must be positive");
        if (epochs < 1) throw ValidationError("train config: epochs must be >= 1");
        if (batch_size < 1) throw ValidationError("train config: batch_size must be >= 1");
        if (num_negatives < 1) throw ValidationError("train config: negatives must be >= 1");
        if (tau <= 0.0) throw ValidationError("train config: tau must be positive");
        if (patience < 0) throw ValidationError("train config: patience must be >= 0");
    }
};

// K uniform draws from [0, N) \ {positive}, with replacement among the draws.
inline std::vector<std::int64_t> sample_negatives(std::int64_t num_items, std::int64_t count, std::int64_t positive,
                                                  Rng& rng) {
    if (num_items < 2) {
        throw ValidationError("sample_negatives: need an item vocab >= 2, got " + std::to_string(num_items));
    }
    if (count < 1) throw ValidationError("sample_negatives: count must be >= 1");
    if (positive < 0 || positive >= num_items) {
        throw ValidationError("sample_negatives: positive " + std::to_string(positive) + " outside vocab " +
                              std::to_string(num_items));
    }
    std::vector<std::int64_t> out;
    out.reserve(static_cast<std::size_t>(count));
    while (static_cast<std::int64_t>(out.size()) < count) {
        const auto c = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(num_items)));
        if (c != positive) out.push_back(c);
    }
    return out;
}

// Contrastive next-item loss for one position: -log softmax over the positive
// plus K sampled negatives, logits = <e', E_item[c]> / tau.
template <class T>
Tensor<T> infonce_loss(const Tensor<T>& e_row, std::int64_t positive_id,
                       const std::vector<std::int64_t>& negative_ids, Parameters<T>& params, double tau) {
    if (negative_ids.empty()) throw ValidationError("infonce_loss: no negatives");
    for (std::int64_t id : negative_ids) {
        if (id == positive_id) {
            throw ValidationError("infonce_loss: positive " + std::to_string(positive_id) + " among negatives");
        }
    }
    std::vector<std::int64_t> ids{positive_id};
    ids.insert(ids.end(), negative_ids.begin(), negative_ids.end());
    Tensor<T> logits = score_items(e_row, ids, params, tau);
    return cross_entropy_rows(logits, {0});
}

// Cross-entropy of the action classifier softmax(e' W_a + b_a) at `label`.
template <class T>
Tensor<T> action_loss(const Tensor<T>& e_row, std::int64_t label, Parameters<T>& params) {
    const std::int64_t num_actions = params.w_action.cols();
    if (label < 0 || label >= num_actions) {
        throw ValidationError("action_loss: label " + std::to_string(label) + " outside [0," +
                              std::to_string(num_actions) + ")");
    }
    Tensor<T> logits = add_rowvec(matmul(e_row, params.w_action), params.b_action);
    return cross_entropy_rows(logits, {label});
}

template <class T>
struct LossBreakdown {
    Tensor<T> total{1, 1};
    Tensor<T> item{1, 1};
    Tensor<T> action{1, 1};
    std::int64_t num_item_targets = 0;
    std::int64_t num_action_targets = 0;
};

// Batch loss: mean contrastive loss over item-target positions, plus mean
// action cross-entropy over action-target positions (omitted when the action
// head is disabled). Negatives are drawn fresh for every target position.
template <class T>
LossBreakdown<T> total_loss(const std::vector<TokenSequence>& batch, Parameters<T>& params, const ModelConfig& cfg,
                            const ItemCatalog& catalog, const TrainConfig& tcfg, Rng& rng) {
    std::int64_t padded = 0;
    Tensor<T> out = forward(batch, params, cfg, catalog, &padded);

    std::vector<std::int64_t> item_rows, action_rows, action_labels;
    std::vector<std::vector<std::int64_t>> candidates;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const auto& seq = batch[b];
        for (std::int64_t t = 0; t < seq.length(); ++t) {
            const std::int64_t row = static_cast<std::int64_t>(b) * padded + t;
            const std::int64_t pos = seq.item_target[static_cast<std::size_t>(t)];
            if (pos >= 0) {
                item_rows.push_back(row);
                std::vector<std::int64_t> ids{pos};
                for (std::int64_t id : sample_negatives(cfg.item_vocab, tcfg.num_negatives, pos, rng)) {
                    ids.push_back(id);
                }
                candidates.push_back(std::move(ids));
            }
            const std::int64_t act = seq.action_target[static_cast<std::size_t>(t)];
            if (cfg.use_action_head && act >= 0) {
                action_rows.push_back(row);
                action_labels.push_back(act);
            }
        }
    }
    if (item_rows.empty()) throw ValidationError("total_loss: batch has no item targets");

    LossBreakdown<T> lb;
    lb.num_item_targets = static_cast<std::int64_t>(item_rows.size());
    Tensor<T> q = gather_rows(out, item_rows);
    Tensor<T> logits = sampled_scores(q, params.item_table, candidates, static_cast<T>(tcfg.tau));
    std::vector<std::int64_t> zeros(item_rows.size(), 0);  // positive sits at candidate index 0
    lb.item = mean_all(cross_entropy_rows(logits, zeros));

    if (!action_rows.empty()) {
        lb.num_action_targets = static_cast<std::int64_t>(action_rows.size());
        Tensor<T> qa = gather_rows(out, action_rows);
        Tensor<T> alog = add_rowvec(matmul(qa, params.w_action), params.b_action);
        lb.action = mean_all(cross_entropy_rows(alog, action_labels));
        lb.total = add(lb.item, lb.action);
    } else {
        lb.action = Tensor<T>::scalar(T(0));
        lb.total = lb.item;
    }
    return lb;
}

template <class T = double>
struct AdamState {
    std::vector<Tensor<T>> m, v;  // aligned with Parameters::named() order
    std::int64_t step = 0;

    static AdamState init(Parameters<T>& params) {
        AdamState st;
        for (auto& [name, t] : params.named()) {
            st.m.emplace_back(t->rows(), t->cols());
            st.v.emplace_back(t->rows(), t->cols());
        }
        return st;
    }
};

// Standard bias-corrected Adam over every named parameter, reading gradients
// accumulated in the tensors' grad buffers.
template <class T>
void adam_step(Parameters<T>& params, AdamState<T>& state, const TrainConfig& cfg) {
    auto named = params.named();
    if (state.m.size() != named.size() || state.v.size() != named.size()) {
        throw ValidationError("adam_step: state holds " + std::to_string(state.m.size()) + " buffers for " +
                              std::to_string(named.size()) + " parameters");
    }
    state.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < named.size(); ++i) {
        auto& [name, t] = named[i];
        if (!t->grad_ptr()) throw ValidationError("adam_step: parameter " + name + " has no gradient buffer");
        if (state.m[i].rows() != t->rows() || state.m[i].cols() != t->cols()) {
            throw ValidationError("adam_step: state shape mismatch for " + name);
        }
        auto& data = *t->data_ptr();
        auto& grad = *t->grad_ptr();
        auto& m = *state.m[i].data_ptr();
        auto& v = *state.v[i].data_ptr();
        for (std::size_t k = 0; k < data.size(); ++k) {
            const double g = static_cast<double>(grad[k]);
            if (!std::isfinite(g)) throw ValidationError("adam_step: non-finite gradient in " + name);
            m[k] = static_cast<T>(cfg.beta1 * static_cast<double>(m[k]) + (1.0 - cfg.beta1) * g);
            v[k] = static_cast<T>(cfg.beta2 * static_cast<double>(v[k]) + (1.0 - cfg.beta2) * g * g);
            const double m_hat = static_cast<double>(m[k]) / bc1;
            const double v_hat = static_cast<double>(v[k]) / bc2;
            data[k] -= static_cast<T>(cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.adam_eps));
        }
    }
}

struct EpochLog {
    std::int64_t epoch = 0;
    double train_loss = 0.0;
    double val_ndcg10 = 0.0;
    double wall_ms = 0.0;

    nlohmann::json to_json() const {
        return nlohmann::json{{"epoch", epoch}, {"train_loss", train_loss}, {"val_ndcg10", val_ndcg10},
                              {"wall_ms", wall_ms}};
    }
};

template <class T = double>
struct TrainResult {
    Parameters<T> params;       // after the last completed epoch
    Parameters<T> best_params;  // snapshot at the best validation nDCG@10
    std::vector<EpochLog> log;
    double best_val_ndcg10 = -1.0;
    std::int64_t best_epoch = -1;
    std::int64_t epochs_run = 0;
};

// Deep copy: tensors share storage on plain assignment, so a checkpoint
// snapshot must clone the buffers.
template <class T>
Parameters<T> clone_parameters(Parameters<T>& src, const ModelConfig& cfg) {
    Parameters<T> dst = init_parameters<T>(cfg, 0);
    auto s = src.named();
    auto d = dst.named();
    for (std::size_t i = 0; i < s.size(); ++i) *d[i].second->data_ptr() = *s[i].second->data_ptr();
    return dst;
}

// Epoch loop: one assembled sequence per user with >= 2 training events,
// shuffled into seeded batches; per-epoch train loss and validation nDCG@10;
// the best-validation parameters are retained (and written to
// `checkpoint_prefix` when given); per-epoch JSONL appended to `log_path`
// when given. wall_ms covers the optimization steps, not validation.
template <class T = double>
TrainResult<T> train(const SplitResult& split, const ItemCatalog& catalog, const ModelConfig& cfg,
                     const TrainConfig& tcfg, const std::string& log_path = "",
                     const std::string& checkpoint_prefix = "") {
    cfg.validate();
    tcfg.validate();

    // A user needs >= 2 train events to give any next-item target; the final
    // position stays unsupervised because its successor lives in val.
    std::vector<TokenSequence> sequences;
    for (const auto& us : split.users) {
        if (us.train.size() < 2) continue;
        UserSequence prefix{us.user_id, us.train};
        auto [history, recent] = partition_history_recent(prefix, cfg.max_recent);
        sequences.push_back(
            assemble_sequence(us.user_id, compress(history, catalog, cfg.V_max, cfg.G_max), recent, catalog, cfg));
    }
    if (sequences.empty()) throw EmptyInputError("train: no user has enough training events");

    const std::vector<EvalCase> val_cases =
        make_eval_cases(split, EvalSegment::validation, catalog, cfg.max_recent, cfg.V_max, cfg.G_max);
    if (val_cases.empty()) throw EmptyInputError("train: validation split is empty");

    TrainResult<T> result;
    result.params = init_parameters<T>(cfg, tcfg.seed);
    result.params.mark_trainable();
    AdamState<T> adam = AdamState<T>::init(result.params);
    const Rng root(tcfg.seed);

    std::ofstream log_out;
    if (!log_path.empty()) {
        log_out.open(log_path);
        if (!log_out) throw ValidationError(log_path + ": cannot open for writing");
    }

    std::vector<std::size_t> order(sequences.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    std::int64_t stagnant = 0;
    for (std::int64_t epoch = 0; epoch < tcfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        Rng shuffle_rng = root.child("shuffle:" + std::to_string(epoch));
        shuffle_rng.shuffle(order);
        Rng neg_rng = root.child("negatives:" + std::to_string(epoch));

        double loss_sum = 0.0;
        std::int64_t steps = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(tcfg.batch_size)) {
            const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(tcfg.batch_size));
            std::vector<TokenSequence> batch;
            for (std::size_t i = start; i < stop; ++i) batch.push_back(sequences[order[i]]);
            LossBreakdown<T> lb = total_loss(batch, result.params, cfg, catalog, tcfg, neg_rng);
            backward(lb.total);
            adam_step(result.params, adam, tcfg);
            result.params.zero_grad();
            loss_sum += static_cast<double>(lb.total.item());
            ++steps;
        }
        const auto t1 = std::chrono::steady_clock::now();

        EvalReport val = evaluate(val_cases, result.params, cfg, catalog, EvalProtocol::full());
        EpochLog entry;
        entry.epoch = epoch;
        entry.train_loss = loss_sum / static_cast<double>(steps);
        entry.val_ndcg10 = val.n_at_10;
        entry.wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
        result.log.push_back(entry);
        if (log_out) log_out << entry.to_json().dump() << "\n" << std::flush;

        result.epochs_run = epoch + 1;
        if (entry.val_ndcg10 > result.best_val_ndcg10) {
            result.best_val_ndcg10 = entry.val_ndcg10;
            result.best_epoch = epoch;
            result.best_params = clone_parameters(result.params, cfg);
            if (!checkpoint_prefix.empty()) save_checkpoint(checkpoint_prefix, result.best_params, cfg);
            stagnant = 0;
        } else {
            ++stagnant;
            if (tcfg.patience > 0 && stagnant >= tcfg.patience) break;
        }
    }
    return result;
}

}  // namespace cause
