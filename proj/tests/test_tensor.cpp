#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "cause/rng.hpp"
#include "cause/tensor.hpp"

using cause::backward;
using cause::finite_diff_check;
using cause::NoGradGuard;
using cause::Rng;
using D = cause::Tensor<double>;

namespace {

D random_tensor(Rng& rng, std::int64_t rows, std::int64_t cols, double lo = -1.0, double hi = 1.0) {
    D t(rows, cols);
    for (std::int64_t i = 0; i < t.size(); ++i) t.data()[i] = rng.uniform(lo, hi);
    return t;
}

// Straight transcription of causal multi-head attention used as a forward
// oracle for the fused op: no shared code with the library implementation.
D naive_attention(const D& q, const D& k, const D& v, std::int64_t heads, std::int64_t seq_len) {
    const std::int64_t rows = q.rows(), dim = q.cols();
    const std::int64_t dh = dim / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    D out(rows, dim);
    for (std::int64_t b = 0; b < rows / seq_len; ++b) {
        for (std::int64_t h = 0; h < heads; ++h) {
            for (std::int64_t t = 0; t < seq_len; ++t) {
                std::vector<double> w(t + 1);
                double denom = 0.0;
                for (std::int64_t s = 0; s <= t; ++s) {
                    double dot = 0.0;
                    for (std::int64_t j = 0; j < dh; ++j) {
                        dot += q.at(b * seq_len + t, h * dh + j) * k.at(b * seq_len + s, h * dh + j);
                    }
                    w[s] = std::exp(dot * scale);
                    denom += w[s];
                }
                for (std::int64_t s = 0; s <= t; ++s) {
                    for (std::int64_t j = 0; j < dh; ++j) {
                        out.at(b * seq_len + t, h * dh + j) += w[s] / denom * v.at(b * seq_len + s, h * dh + j);
                    }
                }
            }
        }
    }
    return out;
}

}  // namespace

TEST_CASE("matmul by identity returns input") {
    Rng rng(1);
    D x = random_tensor(rng, 3, 5);
    D eye(3, 3);
    for (int i = 0; i < 3; ++i) eye.at(i, i) = 1.0;
    D y = cause::matmul(eye, x);
    for (std::int64_t i = 0; i < x.size(); ++i) REQUIRE(y.data()[i] == x.data()[i]);
}

TEST_CASE("matmul against hand example") {
    D a = D::from_data(2, 3, {1, 2, 3, 4, 5, 6});
    D b = D::from_data(3, 2, {7, 8, 9, 10, 11, 12});
    D c = cause::matmul(a, b);
    REQUIRE(c.at(0, 0) == 58.0);
    REQUIRE(c.at(0, 1) == 64.0);
    REQUIRE(c.at(1, 0) == 139.0);
    REQUIRE(c.at(1, 1) == 154.0);
}

TEST_CASE("matmul transpose flags agree with explicit transpose") {
    Rng rng(2);
    D a = random_tensor(rng, 4, 3);
    D b = random_tensor(rng, 4, 5);
    // a^T * b computed two ways
    D at(3, 4);
    for (int i = 0; i < 4; ++i) {
        for (int j = 0; j < 3; ++j) at.at(j, i) = a.at(i, j);
    }
    D ref = cause::matmul(at, b);
    D got = cause::matmul(a, b, true, false);
    for (std::int64_t i = 0; i < ref.size(); ++i) REQUIRE(got.data()[i] == Catch::Approx(ref.data()[i]).epsilon(1e-12));
}

TEST_CASE("softmax of equal logits is uniform") {
    for (int w : {1, 3, 8}) {
        D x(2, w);
        for (std::int64_t i = 0; i < x.size(); ++i) x.data()[i] = 0.7;
        D p = cause::softmax_rows(x);
        for (std::int64_t i = 0; i < p.size(); ++i) REQUIRE(p.data()[i] == Catch::Approx(1.0 / w).epsilon(1e-12));
    }
}

TEST_CASE("softmax rows sum to one on unmasked entries") {
    Rng rng(3);
    D x = random_tensor(rng, 6, 9, -5.0, 5.0);
    D mask(6, 9);
    for (std::int64_t i = 0; i < mask.size(); ++i) {
        if (rng.uniform01() < 0.3) mask.data()[i] = cause::mask_off<double>;
    }
    D p = cause::softmax_masked(x, mask);
    for (int i = 0; i < 6; ++i) {
        double sum = 0.0;
        bool any = false;
        for (int j = 0; j < 9; ++j) {
            if (mask.at(i, j) == 0.0) any = true;
            else REQUIRE(p.at(i, j) == 0.0);
            sum += p.at(i, j);
        }
        if (any) REQUIRE(std::abs(sum - 1.0) < 1e-9);
    }
}

TEST_CASE("fully masked softmax rows are all zero") {
    D x = D::from_data(2, 3, {1, 2, 3, 4, 5, 6});
    D mask(2, 3);
    for (int j = 0; j < 3; ++j) mask.at(1, j) = cause::mask_off<double>;
    D p = cause::softmax_masked(x, mask);
    for (int j = 0; j < 3; ++j) {
        REQUIRE(p.at(0, j) > 0.0);
        REQUIRE(p.at(1, j) == 0.0);
    }
}

TEST_CASE("row mean of the 2x2 example") {
    D x = D::from_data(2, 2, {1, 0, 0, 1});
    D m = cause::mean_rows(x);
    REQUIRE(m.rows() == 1);
    REQUIRE(m.at(0, 0) == 0.5);
    REQUIRE(m.at(0, 1) == 0.5);
}

TEST_CASE("product rule via backward") {
    D x = D::scalar(2.0);
    D y = D::scalar(3.0);
    x.set_requires_grad();
    y.set_requires_grad();
    D loss = cause::mul(x, y);
    backward(loss);
    REQUIRE(x.grad()[0] == 3.0);
    REQUIRE(y.grad()[0] == 2.0);
}

TEST_CASE("gather fan-out accumulates") {
    D e(3, 2);
    for (std::int64_t i = 0; i < e.size(); ++i) e.data()[i] = double(i);
    e.set_requires_grad();
    D g = cause::gather_rows(e, {0, 0});
    D loss = cause::sum_all(g);
    backward(loss);
    REQUIRE(e.grad_at(0, 0) == 2.0);
    REQUIRE(e.grad_at(0, 1) == 2.0);
    REQUIRE(e.grad_at(1, 0) == 0.0);
    REQUIRE(e.grad_at(2, 1) == 0.0);
}

TEST_CASE("backward requires scalar connected loss") {
    D x = D::from_data(1, 2, {1, 2});
    x.set_requires_grad();
    D y = cause::scale(x, 2.0);
    REQUIRE_THROWS_AS(backward(y), std::invalid_argument);
    D z = D::scalar(1.0);
    REQUIRE_THROWS_AS(backward(z), std::invalid_argument);
}

TEST_CASE("shape mismatch errors name the op") {
    D a(2, 3), b(4, 2);
    try {
        cause::matmul(a, b);
        FAIL("expected throw");
    } catch (const std::invalid_argument& e) {
        REQUIRE(std::string(e.what()).find("matmul") != std::string::npos);
        REQUIRE(std::string(e.what()).find("2x3") != std::string::npos);
    }
    REQUIRE_THROWS_AS(cause::add(a, b), std::invalid_argument);
    REQUIRE_THROWS_AS(cause::add_rowvec(a, D(1, 2)), std::invalid_argument);
}

TEST_CASE("no-grad scope suppresses tape") {
    D x = D::scalar(2.0);
    x.set_requires_grad();
    NoGradGuard ng;
    D y = cause::scale(x, 3.0);
    REQUIRE(y.node() == nullptr);
    REQUIRE_FALSE(y.tracked());
}

TEST_CASE("checked mode rejects non-finite values") {
    cause::set_checked_mode(true);
    D x = D::scalar(1e308);
    REQUIRE_THROWS_AS(cause::mul(x, x), std::runtime_error);
    cause::set_checked_mode(false);
    REQUIRE_NOTHROW(cause::mul(x, x));
}

TEST_CASE("finite diff on quadratic is near exact") {
    Rng rng(4);
    D x = random_tensor(rng, 3, 4);
    const double err = finite_diff_check<double>([&]() { return cause::sum_all(cause::mul(x, x)); }, {&x});
    REQUIRE(err < 1e-6);
}

TEST_CASE("gradcheck: matmul all transpose combos") {
    Rng rng(5);
    for (int ta = 0; ta < 2; ++ta) {
        for (int tb = 0; tb < 2; ++tb) {
            D a = ta ? random_tensor(rng, 4, 3) : random_tensor(rng, 3, 4);
            D b = tb ? random_tensor(rng, 5, 4) : random_tensor(rng, 4, 5);
            const double err = finite_diff_check<double>(
                [&]() { return cause::sum_all(cause::matmul(a, b, ta != 0, tb != 0)); }, {&a, &b});
            INFO("ta=" << ta << " tb=" << tb);
            REQUIRE(err < 1e-4);
        }
    }
}

TEST_CASE("gradcheck: elementwise and reductions") {
    Rng rng(6);
    D a = random_tensor(rng, 3, 4);
    D b = random_tensor(rng, 3, 4);
    D pos = random_tensor(rng, 3, 4, 0.5, 2.0);
    REQUIRE(finite_diff_check<double>([&]() { return cause::mean_all(cause::add(a, b)); }, {&a, &b}) < 1e-4);
    REQUIRE(finite_diff_check<double>([&]() { return cause::sum_all(cause::sub(a, b)); }, {&a, &b}) < 1e-4);
    REQUIRE(finite_diff_check<double>([&]() { return cause::sum_all(cause::mul(a, b)); }, {&a, &b}) < 1e-4);
    REQUIRE(finite_diff_check<double>([&]() { return cause::sum_all(cause::scale(a, -1.7)); }, {&a}) < 1e-4);
    REQUIRE(finite_diff_check<double>([&]() { return cause::sum_all(cause::log_elem(pos)); }, {&pos}) < 1e-4);
    REQUIRE(finite_diff_check<double>([&]() { return cause::sum_all(cause::exp_elem(a)); }, {&a}) < 1e-4);
    REQUIRE(finite_diff_check<double>([&]() { return cause::sum_all(cause::gelu(a)); }, {&a}) < 1e-4);
    REQUIRE(finite_diff_check<double>([&]() { return cause::sum_all(cause::mean_rows(a)); }, {&a}) < 1e-4);
}

TEST_CASE("gradcheck: structural ops") {
    Rng rng(7);
    D a = random_tensor(rng, 3, 4);
    D b = random_tensor(rng, 2, 4);
    D bias = random_tensor(rng, 1, 4);
    REQUIRE(finite_diff_check<double>([&]() { return cause::sum_all(cause::add_rowvec(a, bias)); }, {&a, &bias}) < 1e-4);
    REQUIRE(finite_diff_check<double>(
                [&]() { return cause::sum_all(cause::mul(cause::concat_rows<double>({a, b}), cause::concat_rows<double>({a, b}))); },
                {&a, &b}) < 1e-4);
    REQUIRE(finite_diff_check<double>([&]() {
                D s = cause::slice_rows(a, 1, 3);
                return cause::sum_all(cause::mul(s, s));
            }, {&a}) < 1e-4);
    REQUIRE(finite_diff_check<double>([&]() {
                D s = cause::slice_cols(a, 1, 4);
                return cause::sum_all(cause::mul(s, s));
            }, {&a}) < 1e-4);
    REQUIRE(finite_diff_check<double>([&]() {
                D g = cause::gather_rows(a, {2, 0, 2, 1, 2});
                return cause::sum_all(cause::mul(g, g));
            }, {&a}) < 1e-4);
    REQUIRE(finite_diff_check<double>([&]() {
                D g = cause::gather_mean_rows(a, {{0, 2}, {}, {1, 1, 2}});
                return cause::sum_all(cause::mul(g, g));
            }, {&a}) < 1e-4);
}

TEST_CASE("grouped row mean pools and zeroes empty groups") {
    D t = D::from_data(3, 2, {1, 2, 3, 4, 5, 6});
    D m = cause::gather_mean_rows(t, {{0, 2}, {}});
    REQUIRE(m.at(0, 0) == 3.0);
    REQUIRE(m.at(0, 1) == 4.0);
    REQUIRE(m.at(1, 0) == 0.0);
    REQUIRE(m.at(1, 1) == 0.0);
}

TEST_CASE("gradcheck: softmax, layer norm, cross entropy") {
    Rng rng(8);
    D x = random_tensor(rng, 4, 6);
    D mask(4, 6);
    mask.at(0, 5) = cause::mask_off<double>;
    mask.at(2, 0) = cause::mask_off<double>;
    D w = random_tensor(rng, 4, 6);  // weights so the loss hits every prob entry unevenly
    REQUIRE(finite_diff_check<double>(
                [&]() { return cause::sum_all(cause::mul(cause::softmax_masked(x, mask), w)); }, {&x}) < 1e-4);

    D gamma = random_tensor(rng, 1, 6, 0.5, 1.5);
    D beta = random_tensor(rng, 1, 6);
    REQUIRE(finite_diff_check<double>(
                [&]() { return cause::sum_all(cause::mul(cause::layer_norm(x, gamma, beta), w)); },
                {&x, &gamma, &beta}) < 1e-4);

    std::vector<std::int64_t> labels = {3, 0, 5, 2};
    REQUIRE(finite_diff_check<double>(
                [&]() { return cause::mean_all(cause::cross_entropy_rows(x, labels)); }, {&x}) < 1e-4);
}

TEST_CASE("gradcheck: fused attention") {
    Rng rng(9);
    const std::int64_t seq = 5, dim = 8, heads = 2;
    D q = random_tensor(rng, 2 * seq, dim);
    D k = random_tensor(rng, 2 * seq, dim);
    D v = random_tensor(rng, 2 * seq, dim);
    D w = random_tensor(rng, 2 * seq, dim);
    REQUIRE(finite_diff_check<double>(
                [&]() { return cause::sum_all(cause::mul(cause::causal_attention(q, k, v, heads, seq), w)); },
                {&q, &k, &v}) < 1e-4);
}

TEST_CASE("fused attention matches naive oracle") {
    Rng rng(10);
    const std::int64_t seq = 6, dim = 12, heads = 3;
    D q = random_tensor(rng, 2 * seq, dim);
    D k = random_tensor(rng, 2 * seq, dim);
    D v = random_tensor(rng, 2 * seq, dim);
    D got = cause::causal_attention(q, k, v, heads, seq);
    D ref = naive_attention(q, k, v, heads, seq);
    for (std::int64_t i = 0; i < got.size(); ++i) {
        REQUIRE(got.data()[i] == Catch::Approx(ref.data()[i]).margin(1e-12));
    }
}

TEST_CASE("attention is causal and batch-isolated") {
    Rng rng(11);
    const std::int64_t seq = 4, dim = 6, heads = 2;
    D q = random_tensor(rng, 2 * seq, dim), k = random_tensor(rng, 2 * seq, dim), v = random_tensor(rng, 2 * seq, dim);
    D base = cause::causal_attention(q, k, v, heads, seq);
    // Perturb position 2 of block 0: outputs at positions 0..1 of block 0 and
    // the whole of block 1 must not move.
    for (std::int64_t j = 0; j < dim; ++j) {
        q.at(2, j) += 0.5;
        k.at(2, j) -= 0.3;
        v.at(2, j) += 0.9;
    }
    D bumped = cause::causal_attention(q, k, v, heads, seq);
    for (std::int64_t r : {0, 1, 4, 5, 6, 7}) {
        for (std::int64_t j = 0; j < dim; ++j) REQUIRE(bumped.at(r, j) == base.at(r, j));
    }
    bool later_changed = false;
    for (std::int64_t r : {2, 3}) {
        for (std::int64_t j = 0; j < dim; ++j) later_changed = later_changed || bumped.at(r, j) != base.at(r, j);
    }
    REQUIRE(later_changed);
}

TEST_CASE("gradcheck: sampled scores") {
    Rng rng(12);
    D queries = random_tensor(rng, 3, 5);
    D table = random_tensor(rng, 7, 5);
    std::vector<std::vector<std::int64_t>> ids = {{1, 4, 1}, {0, 6, 2}, {5, 5, 3}};
    D w = random_tensor(rng, 3, 3);
    REQUIRE(finite_diff_check<double>(
                [&]() { return cause::sum_all(cause::mul(cause::sampled_scores(queries, table, ids, 0.1), w)); },
                {&queries, &table}) < 1e-4);
}

TEST_CASE("gradcheck: InfoNCE-style loss wrt query, K=5 tau=0.1") {
    Rng rng(13);
    D query = random_tensor(rng, 1, 8, -0.3, 0.3);
    D table = random_tensor(rng, 20, 8, -0.3, 0.3);
    std::vector<std::vector<std::int64_t>> ids = {{7, 2, 11, 4, 19, 0}};  // positive first, then 5 negatives
    std::vector<std::int64_t> labels = {0};
    const double err = finite_diff_check<double>(
        [&]() { return cause::mean_all(cause::cross_entropy_rows(cause::sampled_scores(query, table, ids, 0.1), labels)); },
        {&query, &table});
    REQUIRE(err < 1e-4);
}

TEST_CASE("gradcheck: bucket aggregation wrt alignment weights") {
    // e_bucket = mean_i(W_align * e_item_i + b_align) + e_cat, as used by the
    // history compressor; checked wrt the alignment projection.
    Rng rng(14);
    D items = random_tensor(rng, 4, 6);
    D w_align = random_tensor(rng, 6, 6);
    D b_align = random_tensor(rng, 1, 6);
    D cat_row = random_tensor(rng, 1, 6);
    const double err = finite_diff_check<double>(
        [&]() {
            D proj = cause::add_rowvec(cause::matmul(items, w_align), b_align);
            D agg = cause::add(cause::mean_rows(proj), cat_row);
            return cause::sum_all(cause::mul(agg, agg));
        },
        {&w_align, &b_align});
    REQUIRE(err < 1e-4);
}

TEST_CASE("backward is deterministic for a fixed tape") {
    Rng rng(15);
    D a = random_tensor(rng, 4, 4);
    D b = random_tensor(rng, 4, 4);
    a.set_requires_grad();
    b.set_requires_grad();
    std::vector<double> first;
    for (int round = 0; round < 2; ++round) {
        a.zero_grad();
        b.zero_grad();
        D h = cause::gelu(cause::matmul(a, b));
        D loss = cause::mean_all(cause::mul(h, h));
        backward(loss);
        if (round == 0) {
            first.assign(a.grad(), a.grad() + a.size());
            first.insert(first.end(), b.grad(), b.grad() + b.size());
        } else {
            std::vector<double> second(a.grad(), a.grad() + a.size());
            second.insert(second.end(), b.grad(), b.grad() + b.size());
            REQUIRE(first == second);
        }
    }
}

TEST_CASE("gradient accumulates over fan-out through distinct ops") {
    D x = D::scalar(1.5);
    x.set_requires_grad();
    D y = cause::add(cause::mul(x, x), cause::scale(x, 3.0));  // x^2 + 3x
    backward(y);
    REQUIRE(x.grad()[0] == Catch::Approx(2.0 * 1.5 + 3.0).epsilon(1e-12));
}

TEST_CASE("cross entropy of uniform logits equals log of width") {
    D logits(4, 201);
    std::vector<std::int64_t> labels = {0, 13, 200, 77};
    D losses = cause::cross_entropy_rows(logits, labels);
    for (int i = 0; i < 4; ++i) {
        REQUIRE(losses.at(i, 0) == Catch::Approx(std::log(201.0)).epsilon(1e-12));
    }
}
