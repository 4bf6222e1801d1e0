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

#ifndef BCPMF_RATINGS_HPP
#define BCPMF_RATINGS_HPP

#include <algorithm>
#include <cstdint>
#include <unordered_set>
#include <utility>
#include <vector>

#include "bcpmf/common.hpp"

namespace bcpmf {

struct RatingEntry {
    int user;
    int item;
    double value;

    bool operator==(const RatingEntry&) const = default;
};

/// Immutable sparse rating matrix with dual adjacency indexes: every entry is
/// reachable both from its user row and from its item column. Construction
/// validates index ranges and rejects duplicate (user, item) pairs.
class SparseRatings {
  public:
    SparseRatings() = default;

    SparseRatings(int num_users, int num_items, std::vector<RatingEntry> entries)
        : num_users_(num_users), num_items_(num_items), entries_(std::move(entries)) {
        if (num_users_ < 0 || num_items_ < 0) throw ConfigError("negative matrix dimensions");
        by_user_.resize(num_users_);
        by_item_.resize(num_items_);
        std::unordered_set<std::uint64_t> seen;
        seen.reserve(entries_.size());
        for (const auto& e : entries_) {
            if (e.user < 0 || e.user >= num_users_ || e.item < 0 || e.item >= num_items_)
                throw ConfigError("rating entry index out of range");
            std::uint64_t key =
                (static_cast<std::uint64_t>(e.user) << 32) | static_cast<std::uint32_t>(e.item);
            if (!seen.insert(key).second)
                throw ConfigError("duplicate (user, item) pair in rating entries");
            by_user_[e.user].emplace_back(e.item, e.value);
            by_item_[e.item].emplace_back(e.user, e.value);
        }
    }

    int num_users() const { return num_users_; }
    int num_items() const { return num_items_; }
    std::size_t num_entries() const { return entries_.size(); }

    const std::vector<RatingEntry>& entries() const { return entries_; }
    const std::vector<std::pair<int, double>>& by_user(int i) const { return by_user_[i]; }
    const std::vector<std::pair<int, double>>& by_item(int j) const { return by_item_[j]; }

    /// n_i: number of items rated by user i.
    int count_for_user(int i) const { return static_cast<int>(by_user_[i].size()); }
    /// m_j: number of users who rated item j.
    int count_for_item(int j) const { return static_cast<int>(by_item_[j].size()); }

    /// Swaps the user/item roles; entry (i, j, r) maps to (j, i, r).
    SparseRatings transpose() const {
        std::vector<RatingEntry> flipped;
        flipped.reserve(entries_.size());
        for (const auto& e : entries_) flipped.push_back({e.item, e.user, e.value});
        return SparseRatings(num_items_, num_users_, std::move(flipped));
    }

  private:
    int num_users_ = 0;
    int num_items_ = 0;
    std::vector<RatingEntry> entries_;
    std::vector<std::vector<std::pair<int, double>>> by_user_;
    std::vector<std::vector<std::pair<int, double>>> by_item_;
};

}  // namespace bcpmf

#endif  // BCPMF_RATINGS_HPP
