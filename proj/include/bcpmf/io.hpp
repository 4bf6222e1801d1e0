/*
 * Copyright 2026 the bcpmf authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#ifndef BCPMF_IO_HPP
#define BCPMF_IO_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "bcpmf/common.hpp"
#include "bcpmf/ratings.hpp"
#include "bcpmf/rng.hpp"

namespace bcpmf {

enum class RatingsFormat { MovieLensDat, TsvTriplets };

inline RatingsFormat ratings_format_from_string(const std::string& s) {
    if (s == "movielens_dat") return RatingsFormat::MovieLensDat;
    if (s == "tsv" || s == "tsv_triplets") return RatingsFormat::TsvTriplets;
    throw ConfigError("unknown ratings format: " + s);
}

/// Parsed dataset with contiguous zero-based indices plus the id maps needed
/// to report predictions against the original identifiers.
struct ParseResult {
    SparseRatings ratings;
    std::vector<long long> user_ids;  // internal index -> external id
    std::vector<long long> item_ids;
    int duplicate_count = 0;  // duplicate (user, item) pairs; last occurrence kept
};

namespace detail {

inline bool parse_ll(const std::string& s, long long& out) {
    if (s.empty()) return false;
    std::size_t pos = 0;
    try {
        out = std::stoll(s, &pos);
    } catch (...) {
        return false;
    }
    return pos == s.size();
}

inline bool parse_double(const std::string& s, double& out) {
    if (s.empty()) return false;
    std::size_t pos = 0;
    try {
        out = std::stod(s, &pos);
    } catch (...) {
        return false;
    }
    return pos == s.size() && std::isfinite(out);
}

inline std::vector<std::string> split_on(const std::string& line, const std::string& sep) {
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
        std::size_t pos = line.find(sep, start);
        if (pos == std::string::npos) {
            fields.push_back(line.substr(start));
            break;
        }
        fields.push_back(line.substr(start, pos - start));
        start = pos + sep.size();
    }
    return fields;
}

}  // namespace detail

/// Parses a ratings file. MovieLens lines are `UserID::MovieID::Rating::Timestamp`;
/// TSV lines are `user<TAB>item<TAB>rating`. External ids are reindexed to
/// contiguous zero-based indices in first-appearance order; duplicate
/// (user, item) pairs keep the last occurrence and bump duplicate_count.
inline ParseResult parse_ratings(const std::string& path, RatingsFormat format,
                                 double rating_lo = 1.0, double rating_hi = 5.0) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open ratings file: " + path);

    std::map<long long, int> user_index, item_index;
    std::vector<long long> user_ids, item_ids;
    // (user, item) -> slot in triplets, for last-occurrence dedup
    std::map<std::pair<int, int>, std::size_t> slot;
    std::vector<RatingEntry> triplets;
    int duplicates = 0;

    std::string line;
    long long line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;

        std::vector<std::string> fields = format == RatingsFormat::MovieLensDat
                                              ? detail::split_on(line, "::")
                                              : detail::split_on(line, "\t");
        std::size_t needed = format == RatingsFormat::MovieLensDat ? 4 : 3;
        long long uid = 0, iid = 0;
        double value = 0;
        if (fields.size() < needed || !detail::parse_ll(fields[0], uid) ||
            !detail::parse_ll(fields[1], iid) || !detail::parse_double(fields[2], value))
            throw ParseError(path + ":" + std::to_string(line_no) + ": malformed rating line");
        if (value < rating_lo || value > rating_hi)
            throw ConfigError(path + ":" + std::to_string(line_no) + ": rating " +
                              std::to_string(value) + " outside scale [" +
                              std::to_string(rating_lo) + ", " + std::to_string(rating_hi) + "]");

        auto [uit, unew] = user_index.try_emplace(uid, static_cast<int>(user_ids.size()));
        if (unew) user_ids.push_back(uid);
        auto [iit, inew] = item_index.try_emplace(iid, static_cast<int>(item_ids.size()));
        if (inew) item_ids.push_back(iid);
        int u = uit->second, i = iit->second;

        auto [sit, fresh] = slot.try_emplace({u, i}, triplets.size());
        if (fresh) {
            triplets.push_back({u, i, value});
        } else {
            triplets[sit->second].value = value;
            ++duplicates;
        }
    }

    SparseRatings ratings(static_cast<int>(user_ids.size()), static_cast<int>(item_ids.size()),
                          std::move(triplets));
    return {std::move(ratings), std::move(user_ids), std::move(item_ids), duplicates};
}

struct SplitSpec {
    double train_fraction = 0.70;
    double validation_fraction = 0.05;  // carved from the train share
    std::uint64_t seed = 0;
    int min_item_ratings = 0;  // drop items rated fewer times than this, before splitting
    bool require_coverage = true;

    void validate() const {
        if (!(train_fraction > 0 && train_fraction < 1))
            throw ConfigError("train_fraction must lie in (0, 1)");
        if (!(validation_fraction >= 0 && validation_fraction < 1))
            throw ConfigError("validation_fraction must lie in [0, 1)");
    }
};

struct SplitResult {
    SparseRatings train;
    SparseRatings validation;
    SparseRatings test;
};

/// Deterministic train/validation/test split. With require_coverage, one
/// entry per user and per item (of the post-filter dataset) is pinned to
/// train before random assignment, so no entity is unseen at training time.
inline SplitResult split(const SparseRatings& ratings, const SplitSpec& spec) {
    spec.validate();
    const int n = ratings.num_users();
    const int m = ratings.num_items();

    std::vector<RatingEntry> pool;
    pool.reserve(ratings.num_entries());
    if (spec.min_item_ratings > 0) {
        for (const auto& e : ratings.entries())
            if (ratings.count_for_item(e.item) >= spec.min_item_ratings) pool.push_back(e);
    } else {
        pool = ratings.entries();
    }

    RngStream rng(spec.seed, 0x5911ULL);  // dedicated split stream
    deterministic_shuffle(pool, rng);

    const std::size_t total = pool.size();
    const std::size_t train_share = static_cast<std::size_t>(std::llround(spec.train_fraction * total));
    const std::size_t val_target =
        static_cast<std::size_t>(std::llround(spec.validation_fraction * train_share));
    const std::size_t train_target = train_share - val_target;

    std::vector<bool> pinned(total, false);
    std::size_t pinned_count = 0;
    if (spec.require_coverage) {
        // first unassigned entry per entity in shuffled order; randomness of the
        // shuffle doubles as random pin selection
        std::vector<bool> user_covered(n, false), item_covered(m, false);
        for (std::size_t k = 0; k < total; ++k) {
            bool need = !user_covered[pool[k].user] || !item_covered[pool[k].item];
            if (need) {
                pinned[k] = true;
                ++pinned_count;
                user_covered[pool[k].user] = true;
                item_covered[pool[k].item] = true;
            }
        }
        if (pinned_count > train_target)
            throw ConfigError("coverage infeasible: pinned entries (" +
                              std::to_string(pinned_count) + ") exceed the train share (" +
                              std::to_string(train_target) + ")");
    }

    std::vector<RatingEntry> train, validation, test;
    train.reserve(train_target);
    std::size_t train_count = pinned_count, val_count = 0;
    for (std::size_t k = 0; k < total; ++k) {
        if (pinned[k]) {
            train.push_back(pool[k]);
            continue;
        }
        if (train_count < train_target) {
            train.push_back(pool[k]);
            ++train_count;
        } else if (val_count < val_target) {
            validation.push_back(pool[k]);
            ++val_count;
        } else {
            test.push_back(pool[k]);
        }
    }

    return {SparseRatings(n, m, std::move(train)), SparseRatings(n, m, std::move(validation)),
            SparseRatings(n, m, std::move(test))};
}

/// Quantile bins of per-user training rating counts. Edges are nearest-rank
/// empirical quantiles; boundary counts fall in the lower bin.
struct FrequencyBins {
    std::vector<int> edges;           // ascending, inclusive upper bounds
    std::vector<std::string> labels;  // "<=25", "26-71", ...

    /// Bin index for a training count; counts beyond the last edge land in
    /// the top bin.
    int bin_of(int count) const {
        for (std::size_t k = 0; k < edges.size(); ++k)
            if (count <= edges[k]) return static_cast<int>(k);
        return static_cast<int>(edges.size()) - 1;
    }
    std::size_t size() const { return edges.size(); }
};

inline FrequencyBins frequency_bins(const SparseRatings& train,
                                    const std::vector<double>& quantiles) {
    std::vector<int> counts;
    for (int i = 0; i < train.num_users(); ++i)
        if (train.count_for_user(i) > 0) counts.push_back(train.count_for_user(i));
    if (counts.empty()) throw ConfigError("frequency bins: empty training set");
    for (std::size_t k = 0; k < quantiles.size(); ++k) {
        if (!(quantiles[k] > 0 && quantiles[k] <= 1))
            throw ConfigError("quantiles must lie in (0, 1]");
        if (k > 0 && quantiles[k] <= quantiles[k - 1])
            throw ConfigError("quantiles must be ascending");
    }
    std::sort(counts.begin(), counts.end());

    FrequencyBins bins;
    for (double q : quantiles) {
        std::size_t rank = static_cast<std::size_t>(
            std::ceil(q * static_cast<double>(counts.size())));
        rank = std::min(std::max<std::size_t>(rank, 1), counts.size());
        int edge = counts[rank - 1];
        if (!bins.edges.empty() && edge <= bins.edges.back()) continue;  // merge degenerate bins
        bins.edges.push_back(edge);
    }
    for (std::size_t k = 0; k < bins.edges.size(); ++k) {
        if (k == 0)
            bins.labels.push_back("<=" + std::to_string(bins.edges[0]));
        else
            bins.labels.push_back(std::to_string(bins.edges[k - 1] + 1) + "-" +
                                  std::to_string(bins.edges[k]));
    }
    return bins;
}

// ---------------------------------------------------------------------------
// CSV artifacts

inline void write_split_csv(const std::string& path, const SplitResult& splits) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write split manifest: " + path);
    out << "user,item,rating,fold\n";
    auto dump = [&](const SparseRatings& r, const char* fold) {
        for (const auto& e : r.entries()) {
            char buf[64];
            std::snprintf(buf, sizeof buf, "%.17g", e.value);
            out << e.user << ',' << e.item << ',' << buf << ',' << fold << '\n';
        }
    };
    dump(splits.train, "train");
    dump(splits.validation, "validation");
    dump(splits.test, "test");
    if (!out) throw IoError("write failed: " + path);
}

inline SplitResult read_split_csv(const std::string& path, int num_users, int num_items) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open split manifest: " + path);
    std::string line;
    if (!std::getline(in, line) || line != "user,item,rating,fold")
        throw ParseError(path + ": missing split manifest header");
    std::vector<RatingEntry> train, validation, test;
    long long line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        auto fields = detail::split_on(line, ",");
        long long u = 0, i = 0;
        double v = 0;
        if (fields.size() != 4 || !detail::parse_ll(fields[0], u) ||
            !detail::parse_ll(fields[1], i) || !detail::parse_double(fields[2], v))
            throw ParseError(path + ":" + std::to_string(line_no) + ": malformed split row");
        RatingEntry e{static_cast<int>(u), static_cast<int>(i), v};
        if (fields[3] == "train")
            train.push_back(e);
        else if (fields[3] == "validation")
            validation.push_back(e);
        else if (fields[3] == "test")
            test.push_back(e);
        else
            throw ParseError(path + ":" + std::to_string(line_no) + ": unknown fold " + fields[3]);
    }
    return {SparseRatings(num_users, num_items, std::move(train)),
            SparseRatings(num_users, num_items, std::move(validation)),
            SparseRatings(num_users, num_items, std::move(test))};
}

inline void write_id_map(const std::string& path, const std::vector<long long>& ids) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write id map: " + path);
    out << "external_id,internal_index\n";
    for (std::size_t k = 0; k < ids.size(); ++k) out << ids[k] << ',' << k << '\n';
    if (!out) throw IoError("write failed: " + path);
}

}  // namespace bcpmf

#endif  // BCPMF_IO_HPP
