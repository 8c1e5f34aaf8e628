#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cause/rng.hpp"

namespace cause {

// Interaction logs: ingest, validate, split, synthesize, and the
// history/recent partition that everything downstream consumes.

struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct EmptyInputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Interaction {
    std::int64_t user_id = 0;
    std::int64_t item_id = 0;
    std::int64_t action_id = 0;
    std::int64_t timestamp = 0;
    // Per-user input ordinal assigned at load; breaks timestamp ties so
    // recency ordering is total and reproducible.
    std::int64_t seq_pos = 0;

    bool operator==(const Interaction&) const = default;
};

struct ItemCatalog {
    std::int64_t num_items = 0;
    std::int64_t num_categories = 0;
    // item_id -> sorted, deduplicated category ids; empty only for item ids
    // that were declared in a header but never observed.
    std::vector<std::vector<std::int64_t>> categories_of;

    const std::vector<std::int64_t>& categories(std::int64_t item) const {
        if (item < 0 || item >= static_cast<std::int64_t>(categories_of.size())) {
            throw ValidationError("catalog: item " + std::to_string(item) + " out of range [0," +
                                  std::to_string(categories_of.size()) + ")");
        }
        return categories_of[static_cast<std::size_t>(item)];
    }
};

struct UserSequence {
    std::int64_t user_id = 0;
    std::vector<Interaction> events;
};

struct Dataset {
    std::vector<UserSequence> users;  // sorted by user_id
    ItemCatalog catalog;
    std::int64_t num_users = 0;
    std::int64_t num_actions = 0;
};

enum class EventFormat { jsonl, tsv };

inline EventFormat format_from_name(const std::string& name) {
    if (name == "jsonl") return EventFormat::jsonl;
    if (name == "tsv") return EventFormat::tsv;
    throw ValidationError("unknown event format '" + name + "' (expected jsonl or tsv)");
}

namespace detail {

struct RawRecord {
    Interaction ev;
    std::vector<std::int64_t> cats;
};

inline std::int64_t json_int(const nlohmann::json& j, const char* key, const std::string& where) {
    if (!j.contains(key) || !j[key].is_number_integer()) {
        throw ParseError(where + ": missing or non-integer field '" + key + "'");
    }
    return j[key].get<std::int64_t>();
}

}  // namespace detail

// Reads one event log. Records are grouped per user, stably sorted by
// timestamp (input order breaks ties via seq_pos), and the catalog is the
// union of every record's declared categories. Vocabulary sizes come from an
// optional "#meta" header, else max-observed-id + 1.
inline Dataset load_events(const std::string& path, EventFormat format) {
    std::ifstream in(path);
    if (!in) throw ParseError(path + ": cannot open file");

    std::int64_t meta_users = -1, meta_items = -1, meta_actions = -1, meta_categories = -1;
    std::vector<detail::RawRecord> records;
    std::string line;
    std::int64_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string where = path + ":" + std::to_string(line_no);
        if (line.empty()) continue;
        if (line.rfind("#meta", 0) == 0) {
            if (line_no != 1) throw ParseError(where + ": #meta header allowed only on the first line");
            nlohmann::json meta;
            try {
                meta = nlohmann::json::parse(line.substr(5));
            } catch (const nlohmann::json::exception& e) {
                throw ParseError(where + ": bad #meta header: " + e.what());
            }
            meta_users = detail::json_int(meta, "users", where);
            meta_items = detail::json_int(meta, "items", where);
            meta_actions = detail::json_int(meta, "actions", where);
            meta_categories = detail::json_int(meta, "categories", where);
            continue;
        }
        detail::RawRecord rec;
        if (format == EventFormat::jsonl) {
            nlohmann::json j;
            try {
                j = nlohmann::json::parse(line);
            } catch (const nlohmann::json::exception& e) {
                throw ParseError(where + ": bad JSON: " + e.what());
            }
            rec.ev.user_id = detail::json_int(j, "user", where);
            rec.ev.item_id = detail::json_int(j, "item", where);
            rec.ev.action_id = detail::json_int(j, "action", where);
            rec.ev.timestamp = detail::json_int(j, "ts", where);
            if (!j.contains("cats") || !j["cats"].is_array()) {
                throw ParseError(where + ": missing or non-array field 'cats'");
            }
            for (const auto& c : j["cats"]) {
                if (!c.is_number_integer()) throw ParseError(where + ": non-integer category id");
                rec.cats.push_back(c.get<std::int64_t>());
            }
        } else {
            std::vector<std::string> cols;
            std::stringstream ss(line);
            std::string col;
            while (std::getline(ss, col, '\t')) cols.push_back(col);
            if (cols.size() != 5) {
                throw ParseError(where + ": expected 5 tab-separated columns, got " + std::to_string(cols.size()));
            }
            try {
                rec.ev.user_id = std::stoll(cols[0]);
                rec.ev.item_id = std::stoll(cols[1]);
                rec.ev.action_id = std::stoll(cols[2]);
                rec.ev.timestamp = std::stoll(cols[3]);
                std::stringstream cs(cols[4]);
                std::string cat;
                while (std::getline(cs, cat, '|')) rec.cats.push_back(std::stoll(cat));
            } catch (const std::exception&) {
                throw ParseError(where + ": non-integer field");
            }
        }
        if (rec.ev.user_id < 0 || rec.ev.item_id < 0 || rec.ev.action_id < 0) {
            throw ValidationError(where + ": negative id");
        }
        if (rec.cats.empty()) throw ValidationError(where + ": event declares no categories");
        for (std::int64_t c : rec.cats) {
            if (c < 0) throw ValidationError(where + ": negative category id");
        }
        records.push_back(std::move(rec));
    }
    if (records.empty()) throw EmptyInputError(path + ": no event records");

    std::int64_t max_user = -1, max_item = -1, max_action = -1, max_cat = -1;
    for (const auto& r : records) {
        max_user = std::max(max_user, r.ev.user_id);
        max_item = std::max(max_item, r.ev.item_id);
        max_action = std::max(max_action, r.ev.action_id);
        for (std::int64_t c : r.cats) max_cat = std::max(max_cat, c);
    }
    Dataset ds;
    ds.num_users = meta_users >= 0 ? meta_users : max_user + 1;
    ds.num_actions = meta_actions >= 0 ? meta_actions : max_action + 1;
    ds.catalog.num_items = meta_items >= 0 ? meta_items : max_item + 1;
    ds.catalog.num_categories = meta_categories >= 0 ? meta_categories : max_cat + 1;
    if (max_user >= ds.num_users || max_item >= ds.catalog.num_items || max_action >= ds.num_actions ||
        max_cat >= ds.catalog.num_categories) {
        throw ValidationError(path + ": id exceeds declared vocabulary size (users " + std::to_string(max_user + 1) +
                              "/" + std::to_string(ds.num_users) + ", items " + std::to_string(max_item + 1) + "/" +
                              std::to_string(ds.catalog.num_items) + ", actions " + std::to_string(max_action + 1) +
                              "/" + std::to_string(ds.num_actions) + ", categories " + std::to_string(max_cat + 1) +
                              "/" + std::to_string(ds.catalog.num_categories) + ")");
    }

    ds.catalog.categories_of.assign(static_cast<std::size_t>(ds.catalog.num_items), {});
    std::map<std::int64_t, std::vector<Interaction>> by_user;
    std::map<std::int64_t, std::int64_t> next_pos;
    for (const auto& r : records) {
        auto& cats = ds.catalog.categories_of[static_cast<std::size_t>(r.ev.item_id)];
        for (std::int64_t c : r.cats) {
            if (std::find(cats.begin(), cats.end(), c) == cats.end()) cats.push_back(c);
        }
        Interaction ev = r.ev;
        ev.seq_pos = next_pos[ev.user_id]++;
        by_user[ev.user_id].push_back(ev);
    }
    for (auto& cats : ds.catalog.categories_of) std::sort(cats.begin(), cats.end());
    for (auto& [uid, events] : by_user) {
        std::stable_sort(events.begin(), events.end(), [](const Interaction& a, const Interaction& b) {
            return a.timestamp != b.timestamp ? a.timestamp < b.timestamp : a.seq_pos < b.seq_pos;
        });
        ds.users.push_back(UserSequence{uid, std::move(events)});
    }
    return ds;
}

// Writes the dataset back out with a #meta header. Output is byte-stable:
// sorted JSON keys, no trailing whitespace, '\n' line endings.
inline void write_events(const std::string& path, const Dataset& ds, EventFormat format) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError(path + ": cannot open for writing");
    nlohmann::json meta;
    meta["users"] = ds.num_users;
    meta["items"] = ds.catalog.num_items;
    meta["actions"] = ds.num_actions;
    meta["categories"] = ds.catalog.num_categories;
    out << "#meta " << meta.dump() << "\n";
    for (const auto& user : ds.users) {
        for (const auto& ev : user.events) {
            const auto& cats = ds.catalog.categories(ev.item_id);
            if (format == EventFormat::jsonl) {
                nlohmann::json j;
                j["user"] = ev.user_id;
                j["item"] = ev.item_id;
                j["action"] = ev.action_id;
                j["ts"] = ev.timestamp;
                j["cats"] = cats;
                out << j.dump() << "\n";
            } else {
                out << ev.user_id << '\t' << ev.item_id << '\t' << ev.action_id << '\t' << ev.timestamp << '\t';
                for (std::size_t i = 0; i < cats.size(); ++i) {
                    if (i) out << '|';
                    out << cats[i];
                }
                out << "\n";
            }
        }
    }
}

// Standalone catalog file, one JSONL line per item: {"cats": [...], "item":
// i} in ascending item order, after a "#meta" header declaring the
// vocabulary sizes. Lines starting with '#' other than the meta header are
// ignored so writers can embed provenance comments.
inline void write_catalog(const std::string& path, const ItemCatalog& catalog, const std::string& comment = "") {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError(path + ": cannot open for writing");
    nlohmann::json meta;
    meta["items"] = catalog.num_items;
    meta["categories"] = catalog.num_categories;
    out << "#meta " << meta.dump() << "\n";
    if (!comment.empty()) out << "#config " << comment << "\n";
    for (std::int64_t i = 0; i < catalog.num_items; ++i) {
        nlohmann::json j;
        j["item"] = i;
        j["cats"] = catalog.categories_of[static_cast<std::size_t>(i)];
        out << j.dump() << "\n";
    }
}

inline ItemCatalog load_catalog(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError(path + ": cannot open file");
    std::int64_t meta_items = -1, meta_categories = -1;
    std::vector<std::pair<std::int64_t, std::vector<std::int64_t>>> rows;
    std::int64_t max_item = -1, max_cat = -1;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string where = path + ":" + std::to_string(line_no);
        if (line.empty()) continue;
        if (line[0] == '#') {
            if (line.rfind("#meta", 0) == 0) {
                nlohmann::json meta = nlohmann::json::parse(line.substr(5), nullptr, false);
                if (meta.is_discarded()) throw ParseError(where + ": malformed #meta header");
                if (meta.contains("items")) meta_items = detail::json_int(meta, "items", where);
                if (meta.contains("categories")) meta_categories = detail::json_int(meta, "categories", where);
            }
            continue;
        }
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded()) throw ParseError(where + ": malformed JSON");
        const std::int64_t item = detail::json_int(j, "item", where);
        if (!j.contains("cats") || !j["cats"].is_array()) {
            throw ParseError(where + ": missing or non-array field 'cats'");
        }
        std::vector<std::int64_t> cats;
        for (const auto& c : j["cats"]) {
            if (!c.is_number_integer()) throw ParseError(where + ": non-integer category id");
            cats.push_back(c.get<std::int64_t>());
        }
        if (item < 0) throw ValidationError(where + ": negative item id");
        if (cats.empty()) throw ValidationError(where + ": item declares no categories");
        for (std::int64_t c : cats) {
            if (c < 0) throw ValidationError(where + ": negative category id");
            max_cat = std::max(max_cat, c);
        }
        max_item = std::max(max_item, item);
        rows.emplace_back(item, std::move(cats));
    }
    if (rows.empty()) throw EmptyInputError(path + ": no catalog records");

    ItemCatalog cat;
    cat.num_items = meta_items >= 0 ? meta_items : max_item + 1;
    cat.num_categories = meta_categories >= 0 ? meta_categories : max_cat + 1;
    if (max_item >= cat.num_items || max_cat >= cat.num_categories) {
        throw ValidationError(path + ": id exceeds declared vocabulary size (items " + std::to_string(max_item + 1) +
                              "/" + std::to_string(cat.num_items) + ", categories " + std::to_string(max_cat + 1) +
                              "/" + std::to_string(cat.num_categories) + ")");
    }
    cat.categories_of.assign(static_cast<std::size_t>(cat.num_items), {});
    for (auto& [item, cats] : rows) {
        auto& dst = cat.categories_of[static_cast<std::size_t>(item)];
        if (!dst.empty()) throw ValidationError(path + ": duplicate entry for item " + std::to_string(item));
        std::sort(cats.begin(), cats.end());
        cats.erase(std::unique(cats.begin(), cats.end()), cats.end());
        dst = std::move(cats);
    }
    return cat;
}

// Splits a sequence into (everything earlier, last iLen events). The
// concatenation of the two parts is always the original sequence.
inline std::pair<std::vector<Interaction>, std::vector<Interaction>> partition_history_recent(
    const UserSequence& seq, std::int64_t iLen) {
    if (iLen < 1) throw ValidationError("partition: iLen must be >= 1, got " + std::to_string(iLen));
    const auto n = static_cast<std::int64_t>(seq.events.size());
    const std::int64_t cut = std::max<std::int64_t>(0, n - iLen);
    return {std::vector<Interaction>(seq.events.begin(), seq.events.begin() + cut),
            std::vector<Interaction>(seq.events.begin() + cut, seq.events.end())};
}

struct SplitSpec {
    enum class Mode { leave_one_out, timestamp_threshold };
    Mode mode = Mode::leave_one_out;
    // timestamp_threshold: ts < train_end -> train, ts < val_end -> val, else test.
    std::int64_t train_end = 0;
    std::int64_t val_end = 0;
};

// Per-user disjoint, exhaustive split. Users failing the leave-one-out
// minimum are dropped entirely and counted.
struct UserSplit {
    std::int64_t user_id = 0;
    std::vector<Interaction> train, val, test;
};

struct SplitResult {
    std::vector<UserSplit> users;
    std::int64_t skipped_users = 0;
};

inline SplitResult split(const std::vector<UserSequence>& seqs, const SplitSpec& spec) {
    if (spec.mode == SplitSpec::Mode::timestamp_threshold && spec.val_end < spec.train_end) {
        throw ValidationError("split: val_end precedes train_end");
    }
    SplitResult out;
    for (const auto& seq : seqs) {
        UserSplit us;
        us.user_id = seq.user_id;
        if (spec.mode == SplitSpec::Mode::leave_one_out) {
            const auto n = seq.events.size();
            if (n < 3) {
                ++out.skipped_users;
                continue;
            }
            us.train.assign(seq.events.begin(), seq.events.end() - 2);
            us.val.push_back(seq.events[n - 2]);
            us.test.push_back(seq.events[n - 1]);
        } else {
            for (const auto& ev : seq.events) {
                if (ev.timestamp < spec.train_end) us.train.push_back(ev);
                else if (ev.timestamp < spec.val_end) us.val.push_back(ev);
                else us.test.push_back(ev);
            }
        }
        out.users.push_back(std::move(us));
    }
    return out;
}

struct SynthConfig {
    std::int64_t num_users = 64;
    std::int64_t num_items = 512;
    std::int64_t num_categories = 16;
    std::int64_t num_actions = 4;
    std::int64_t events_per_user = 256;
    // Probability an event follows the user's stable category mixture rather
    // than the drifting short-term trend.
    double long_range_interest_strength = 0.7;
    // Per-event probability that the short-term trend jumps to a fresh category.
    double recency_drift = 0.05;
    std::uint64_t seed = 0;

    void validate() const {
        if (num_users < 1 || num_items < 1 || num_categories < 1 || num_actions < 1 || events_per_user < 1) {
            throw ValidationError("synth: all counts must be >= 1");
        }
        if (num_categories > num_items) {
            throw ValidationError("synth: num_categories " + std::to_string(num_categories) + " exceeds num_items " +
                                  std::to_string(num_items));
        }
        if (long_range_interest_strength < 0.0 || long_range_interest_strength > 1.0 || recency_drift < 0.0 ||
            recency_drift > 1.0) {
            throw ValidationError("synth: probabilities must lie in [0,1]");
        }
    }
};

// Synthetic log with a controllable long-range-interest signal: each user
// owns a stable mixture over a few preferred categories; events draw a
// category from that mixture with probability long_range_interest_strength
// and otherwise from a short-term trend that occasionally jumps. The item is
// uniform within the drawn category, so category identity is the only
// predictive structure; actions are uniform noise.
inline Dataset generate_synthetic(const SynthConfig& cfg) {
    cfg.validate();
    Rng root(cfg.seed);

    Dataset ds;
    ds.num_users = cfg.num_users;
    ds.num_actions = cfg.num_actions;
    ds.catalog.num_items = cfg.num_items;
    ds.catalog.num_categories = cfg.num_categories;
    ds.catalog.categories_of.assign(static_cast<std::size_t>(cfg.num_items), {});

    // Items: 1-3 categories each; item i always carries category i % C so
    // every category is populated.
    Rng item_rng = root.child("items");
    std::vector<std::vector<std::int64_t>> items_in_cat(static_cast<std::size_t>(cfg.num_categories));
    for (std::int64_t i = 0; i < cfg.num_items; ++i) {
        std::set<std::int64_t> cats{i % cfg.num_categories};
        const auto want = std::min<std::uint64_t>(1 + item_rng.below(3),  // 1-3 categories, capped by C
                                                  static_cast<std::uint64_t>(cfg.num_categories));
        while (cats.size() < want) cats.insert(static_cast<std::int64_t>(item_rng.below(cfg.num_categories)));
        auto& dst = ds.catalog.categories_of[static_cast<std::size_t>(i)];
        dst.assign(cats.begin(), cats.end());
        for (std::int64_t c : dst) items_in_cat[static_cast<std::size_t>(c)].push_back(i);
    }

    for (std::int64_t u = 0; u < cfg.num_users; ++u) {
        Rng rng = root.child("user:" + std::to_string(u));
        // Stable preference: 3 distinct categories (fewer if C < 3) with
        // random weights.
        const std::int64_t k_pref = std::min<std::int64_t>(3, cfg.num_categories);
        std::vector<std::int64_t> pref_cats;
        while (static_cast<std::int64_t>(pref_cats.size()) < k_pref) {
            const auto c = static_cast<std::int64_t>(rng.below(cfg.num_categories));
            if (std::find(pref_cats.begin(), pref_cats.end(), c) == pref_cats.end()) pref_cats.push_back(c);
        }
        std::vector<double> pref_w(pref_cats.size());
        for (auto& w : pref_w) w = rng.uniform(0.5, 1.5);

        std::int64_t trend = static_cast<std::int64_t>(rng.below(cfg.num_categories));
        UserSequence seq;
        seq.user_id = u;
        std::int64_t ts = 0;
        for (std::int64_t t = 0; t < cfg.events_per_user; ++t) {
            if (rng.uniform01() < cfg.recency_drift) trend = static_cast<std::int64_t>(rng.below(cfg.num_categories));
            std::int64_t cat;
            if (rng.uniform01() < cfg.long_range_interest_strength) {
                cat = pref_cats[rng.weighted(pref_w)];
            } else {
                cat = trend;
            }
            const auto& pool = items_in_cat[static_cast<std::size_t>(cat)];
            const std::int64_t item = pool[rng.below(pool.size())];
            ts += 1 + static_cast<std::int64_t>(rng.below(3));
            seq.events.push_back(Interaction{u, item, static_cast<std::int64_t>(rng.below(cfg.num_actions)), ts, t});
        }
        ds.users.push_back(std::move(seq));
    }
    return ds;
}

}  // namespace cause
