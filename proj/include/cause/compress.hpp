#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cause/data.hpp"

namespace cause {

// Category-bucket compression of the long-term history: group events by
// category (an item joins every category it belongs to), keep the V buckets
// touched most recently, and inside each keep the G most recent items.

struct BucketItem {
    std::int64_t item_id = 0;
    std::int64_t timestamp = 0;
    std::int64_t seq_pos = 0;

    bool operator==(const BucketItem&) const = default;
};

// (timestamp, seq_pos) recency key; seq_pos breaks ties deterministically.
inline bool recency_less(const BucketItem& a, const BucketItem& b) {
    return a.timestamp != b.timestamp ? a.timestamp < b.timestamp : a.seq_pos < b.seq_pos;
}

struct Bucket {
    std::int64_t category_id = 0;
    std::vector<BucketItem> items;  // time-ascending

    const BucketItem& last() const { return items.back(); }

    bool operator==(const Bucket&) const = default;
};

struct BucketPlan {
    std::vector<Bucket> buckets;  // ascending by last-interaction recency
    std::int64_t V_max = 0;
    std::int64_t G_max = 0;

    bool operator==(const BucketPlan&) const = default;
};

// Step 1: one bucket per category that appears in the history; buckets keyed
// by category id, items time-ascending (history order is already ascending).
inline std::vector<Bucket> group_by_category(const std::vector<Interaction>& history, const ItemCatalog& catalog) {
    std::map<std::int64_t, Bucket> by_cat;
    for (const auto& ev : history) {
        if (ev.item_id < 0 || ev.item_id >= catalog.num_items) {
            throw ValidationError("compress: item " + std::to_string(ev.item_id) + " not in catalog of " +
                                  std::to_string(catalog.num_items) + " items");
        }
        const auto& cats = catalog.categories(ev.item_id);
        if (cats.empty()) {
            throw ValidationError("compress: item " + std::to_string(ev.item_id) + " has no categories");
        }
        for (std::int64_t c : cats) {
            Bucket& b = by_cat[c];
            b.category_id = c;
            b.items.push_back(BucketItem{ev.item_id, ev.timestamp, ev.seq_pos});
        }
    }
    std::vector<Bucket> out;
    out.reserve(by_cat.size());
    for (auto& [c, b] : by_cat) {
        std::sort(b.items.begin(), b.items.end(), recency_less);
        out.push_back(std::move(b));
    }
    return out;
}

// Step 2: keep the V buckets with the most recent last interaction (older
// category id wins ties), trim each to its G most recent items, and emit
// buckets ordered oldest-recency first so time increases toward the recent
// segment.
inline BucketPlan select_buckets(std::vector<Bucket> buckets, std::int64_t V, std::int64_t G) {
    if (V < 1 || G < 1) {
        throw ValidationError("compress: V and G must be >= 1, got V=" + std::to_string(V) +
                              " G=" + std::to_string(G));
    }
    // Most-recent-first with category id as the final tie-break, then take V.
    std::sort(buckets.begin(), buckets.end(), [](const Bucket& a, const Bucket& b) {
        if (a.last().timestamp != b.last().timestamp) return a.last().timestamp > b.last().timestamp;
        if (a.last().seq_pos != b.last().seq_pos) return a.last().seq_pos > b.last().seq_pos;
        return a.category_id < b.category_id;
    });
    if (static_cast<std::int64_t>(buckets.size()) > V) buckets.resize(static_cast<std::size_t>(V));

    for (Bucket& b : buckets) {
        if (static_cast<std::int64_t>(b.items.size()) > G) {
            b.items.erase(b.items.begin(), b.items.end() - G);  // items are time-ascending
        }
    }
    // Ascending by recency; equal-recency buckets (shared multi-category last
    // event) ascend by category id.
    std::sort(buckets.begin(), buckets.end(), [](const Bucket& a, const Bucket& b) {
        if (a.last().timestamp != b.last().timestamp) return a.last().timestamp < b.last().timestamp;
        if (a.last().seq_pos != b.last().seq_pos) return a.last().seq_pos < b.last().seq_pos;
        return a.category_id < b.category_id;
    });
    BucketPlan plan;
    plan.buckets = std::move(buckets);
    plan.V_max = V;
    plan.G_max = G;
    return plan;
}

inline BucketPlan compress(const std::vector<Interaction>& history, const ItemCatalog& catalog, std::int64_t V,
                           std::int64_t G) {
    return select_buckets(group_by_category(history, catalog), V, G);
}

// Retained events of a plan, flattened back to interaction form (used for
// the idempotence property and for compression-ratio reporting).
inline std::vector<Interaction> plan_events(const BucketPlan& plan, std::int64_t user_id = 0,
                                            std::int64_t action_id = 0) {
    std::vector<Interaction> out;
    for (const auto& b : plan.buckets) {
        for (const auto& it : b.items) {
            out.push_back(Interaction{user_id, it.item_id, action_id, it.timestamp, it.seq_pos});
        }
    }
    std::sort(out.begin(), out.end(), [](const Interaction& a, const Interaction& b) {
        return a.timestamp != b.timestamp ? a.timestamp < b.timestamp : a.seq_pos < b.seq_pos;
    });
    out.erase(std::unique(out.begin(), out.end(),
                          [](const Interaction& a, const Interaction& b) {
                              return a.timestamp == b.timestamp && a.seq_pos == b.seq_pos;
                          }),
              out.end());
    return out;
}

}  // namespace cause
