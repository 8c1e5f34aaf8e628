#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "cause/data.hpp"
#include "cause/rng.hpp"
#include "cause/tensor.hpp"

namespace cause {

// Lloyd's K-Means with k-means++ seeding, used to induce item categories
// from trained item embeddings when a dataset carries none.

struct KMeansResult {
    Tensor<double> centroids;  // k x d
    std::vector<std::int64_t> assignment;
    double inertia = 0.0;
    std::int64_t iterations_run = 0;
};

namespace detail {

inline double sq_dist(const double* a, const double* b, std::int64_t d) {
    double acc = 0.0;
    for (std::int64_t j = 0; j < d; ++j) {
        const double diff = a[j] - b[j];
        acc += diff * diff;
    }
    return acc;
}

}  // namespace detail

inline KMeansResult kmeans_fit(const Tensor<double>& points, std::int64_t k, std::uint64_t seed,
                               std::int64_t max_iter = 100, double tol = 1e-4) {
    const std::int64_t n = points.rows(), d = points.cols();
    if (k < 1 || n < k) {
        throw ValidationError("kmeans: need n >= k >= 1, got n=" + std::to_string(n) + " k=" + std::to_string(k));
    }
    points.check_finite("kmeans");

    // k-means++: first center uniform, then proportional to squared distance
    // from the nearest chosen center.
    Rng rng(seed);
    Tensor<double> centroids(k, d);
    std::vector<double> min_sq(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
    std::int64_t first = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(n)));
    std::copy(points.data() + first * d, points.data() + (first + 1) * d, centroids.data());
    for (std::int64_t c = 1; c < k; ++c) {
        double total = 0.0;
        for (std::int64_t i = 0; i < n; ++i) {
            min_sq[i] = std::min(min_sq[i], detail::sq_dist(points.data() + i * d, centroids.data() + (c - 1) * d, d));
            total += min_sq[i];
        }
        std::int64_t chosen = 0;
        if (total > 0.0) {
            double target = rng.uniform01() * total, acc = 0.0;
            for (std::int64_t i = 0; i < n; ++i) {
                acc += min_sq[i];
                if (acc >= target) {
                    chosen = i;
                    break;
                }
            }
        } else {
            chosen = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(n)));  // all points coincide
        }
        std::copy(points.data() + chosen * d, points.data() + (chosen + 1) * d, centroids.data() + c * d);
    }

    KMeansResult res;
    res.assignment.assign(static_cast<std::size_t>(n), 0);
    std::vector<std::int64_t> prev_assignment;
    std::vector<std::int64_t> counts(static_cast<std::size_t>(k), 0);
    Tensor<double> sums(k, d);
    double prev_inertia = std::numeric_limits<double>::infinity();

    // Every exit below happens right after centroids were set to the exact
    // means of res.assignment, so the converged-centroid property holds on
    // all paths.
    for (std::int64_t iter = 0; iter < max_iter; ++iter) {
        // Assignment step (ties to the lower cluster id).
        double inertia = 0.0;
        std::fill(counts.begin(), counts.end(), 0);
        std::fill(sums.data(), sums.data() + sums.size(), 0.0);
        for (std::int64_t i = 0; i < n; ++i) {
            double best = std::numeric_limits<double>::infinity();
            std::int64_t best_c = 0;
            for (std::int64_t c = 0; c < k; ++c) {
                const double sq = detail::sq_dist(points.data() + i * d, centroids.data() + c * d, d);
                if (sq < best) {
                    best = sq;
                    best_c = c;
                }
            }
            res.assignment[static_cast<std::size_t>(i)] = best_c;
            ++counts[static_cast<std::size_t>(best_c)];
            inertia += best;
            const double* p = points.data() + i * d;
            double* acc = sums.data() + best_c * d;
            for (std::int64_t j = 0; j < d; ++j) acc[j] += p[j];
        }
        if (inertia > prev_inertia + 1e-9 * (1.0 + prev_inertia)) {
            throw std::logic_error("kmeans: inertia increased from " + std::to_string(prev_inertia) + " to " +
                                   std::to_string(inertia));
        }
        prev_inertia = inertia;
        res.inertia = inertia;
        res.iterations_run = iter + 1;

        // Empty clusters seize the point farthest from its current centroid
        // (there is always a donor cluster with >= 2 points).
        bool repaired = false;
        for (std::int64_t c = 0; c < k; ++c) {
            if (counts[static_cast<std::size_t>(c)] > 0) continue;
            double worst = -1.0;
            std::int64_t worst_i = 0;
            for (std::int64_t i = 0; i < n; ++i) {
                const std::int64_t a = res.assignment[static_cast<std::size_t>(i)];
                if (counts[static_cast<std::size_t>(a)] <= 1) continue;  // don't empty another cluster
                const double sq = detail::sq_dist(points.data() + i * d, centroids.data() + a * d, d);
                if (sq > worst) {
                    worst = sq;
                    worst_i = i;
                }
            }
            const std::int64_t old = res.assignment[static_cast<std::size_t>(worst_i)];
            res.assignment[static_cast<std::size_t>(worst_i)] = c;
            --counts[static_cast<std::size_t>(old)];
            ++counts[static_cast<std::size_t>(c)];
            const double* p = points.data() + worst_i * d;
            for (std::int64_t j = 0; j < d; ++j) {
                sums.data()[old * d + j] -= p[j];
                sums.data()[c * d + j] += p[j];
            }
            repaired = true;
            prev_inertia = std::numeric_limits<double>::infinity();  // repair may bump inertia
        }

        const bool assignment_stable = !repaired && res.assignment == prev_assignment;
        prev_assignment = res.assignment;

        // Update step: centroids become the exact per-cluster means.
        double max_shift = 0.0;
        for (std::int64_t c = 0; c < k; ++c) {
            const double inv = 1.0 / static_cast<double>(counts[static_cast<std::size_t>(c)]);
            double shift_sq = 0.0;
            for (std::int64_t j = 0; j < d; ++j) {
                const double updated = sums.data()[c * d + j] * inv;
                const double diff = updated - centroids.data()[c * d + j];
                shift_sq += diff * diff;
                centroids.data()[c * d + j] = updated;
            }
            max_shift = std::max(max_shift, std::sqrt(shift_sq));
        }
        if (assignment_stable || max_shift < tol) break;
    }

    // Inertia against the final centroids.
    double inertia = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        inertia += detail::sq_dist(points.data() + i * d, centroids.data() + res.assignment[static_cast<std::size_t>(i)] * d, d);
    }
    res.inertia = inertia;
    res.centroids = centroids;
    return res;
}

// One category per item, equal to its cluster id.
inline ItemCatalog induce_catalog(const KMeansResult& result, std::int64_t k) {
    ItemCatalog cat;
    cat.num_items = static_cast<std::int64_t>(result.assignment.size());
    cat.num_categories = k;
    cat.categories_of.reserve(result.assignment.size());
    for (std::int64_t a : result.assignment) cat.categories_of.push_back({a});
    return cat;
}

}  // namespace cause
