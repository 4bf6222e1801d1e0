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

#include <algorithm>
#include <catch2/catch_amalgamated.hpp>

#include "bcpmf/model.hpp"
#include "support.hpp"

using namespace bcpmf;

TEST_CASE("sparse ratings bookkeeping") {
    SparseRatings r(2, 3, {{0, 2, 5.0}, {1, 0, 3.0}, {1, 2, 4.0}});
    CHECK(r.num_users() == 2);
    CHECK(r.num_items() == 3);
    CHECK(r.num_entries() == 3);
    CHECK(r.count_for_user(0) == 1);
    CHECK(r.count_for_user(1) == 2);
    CHECK(r.count_for_item(1) == 0);
    CHECK(r.count_for_item(2) == 2);

    SECTION("duplicate pairs are rejected") {
        CHECK_THROWS_AS(SparseRatings(2, 2, {{0, 1, 3.0}, {0, 1, 4.0}}), ConfigError);
    }
    SECTION("out-of-range indices are rejected") {
        CHECK_THROWS_AS(SparseRatings(2, 2, {{0, 2, 3.0}}), ConfigError);
    }
}

TEST_CASE("by_user and by_item enumerate the same entry set") {
    RngStream rng(11, 0);
    SparseRatings r = testing::random_ratings(6, 5, 0.4, rng);
    std::vector<RatingEntry> from_users, from_items;
    for (int i = 0; i < r.num_users(); ++i)
        for (const auto& [j, v] : r.by_user(i)) from_users.push_back({i, j, v});
    for (int j = 0; j < r.num_items(); ++j)
        for (const auto& [i, v] : r.by_item(j)) from_items.push_back({i, j, v});
    auto key = [](const RatingEntry& a, const RatingEntry& b) {
        return std::tie(a.user, a.item) < std::tie(b.user, b.item);
    };
    std::sort(from_users.begin(), from_users.end(), key);
    std::sort(from_items.begin(), from_items.end(), key);
    CHECK(from_users == from_items);
    CHECK(from_users.size() == r.num_entries());
}

TEST_CASE("transpose swaps roles") {
    SparseRatings r(2, 3, {{0, 2, 5.0}});
    SparseRatings t = r.transpose();
    CHECK(t.num_users() == 3);
    CHECK(t.num_items() == 2);
    REQUIRE(t.num_entries() == 1);
    CHECK(t.entries()[0] == RatingEntry{2, 0, 5.0});

    SECTION("double transpose is the identity") {
        RngStream rng(12, 0);
        SparseRatings big = testing::random_ratings(7, 4, 0.5, rng);
        SparseRatings twice = big.transpose().transpose();
        auto sorted = [](std::vector<RatingEntry> es) {
            std::sort(es.begin(), es.end(), [](const RatingEntry& a, const RatingEntry& b) {
                return std::tie(a.user, a.item) < std::tie(b.user, b.item);
            });
            return es;
        };
        CHECK(sorted(big.entries()) == sorted(twice.entries()));
    }
    SECTION("user counts become item counts") {
        RngStream rng(13, 0);
        SparseRatings big = testing::random_ratings(5, 6, 0.5, rng);
        SparseRatings t2 = big.transpose();
        for (int i = 0; i < big.num_users(); ++i)
            CHECK(big.count_for_user(i) == t2.count_for_item(i));
    }
}

TEST_CASE("side contribution") {
    SECTION("side term disabled returns the user vector") {
        SparseRatings r(1, 2, {{0, 0, 3.0}});
        FeatureState s = FeatureState::zeros(1, 2, 2);
        s.U.row(0) << 1.0, 2.0;
        ModelFlags flags{.user_features = true, .side_features = false};
        Vec out = side_contribution(0, s, r, flags);
        CHECK(out(0) == 1.0);
        CHECK(out(1) == 2.0);
    }
    SECTION("pure side average") {
        SparseRatings r(1, 3, {{0, 1, 3.0}, {0, 2, 4.0}});
        FeatureState s = FeatureState::zeros(1, 3, 2);
        s.W.row(1) << 2.0, 0.0;
        s.W.row(2) << 0.0, 4.0;
        ModelFlags flags{.user_features = false, .side_features = true};
        Vec out = side_contribution(0, s, r, flags);
        CHECK(out(0) == Catch::Approx(1.0));
        CHECK(out(1) == Catch::Approx(2.0));
    }
    SECTION("empty-sum convention for unrated users") {
        SparseRatings r(1, 2, {});
        FeatureState s = FeatureState::zeros(1, 2, 2);
        s.U.row(0) << 3.0, 3.0;
        ModelFlags flags{.user_features = true, .side_features = true};
        Vec out = side_contribution(0, s, r, flags);
        CHECK(out(0) == 3.0);
        CHECK(out(1) == 3.0);
    }
}

TEST_CASE("predict") {
    SparseRatings r(1, 1, {{0, 0, 2.0}});
    SECTION("all zeros predicts zero") {
        FeatureState s = FeatureState::zeros(1, 1, 2);
        CHECK(predict(0, 0, s, r, ModelFlags{}) == 0.0);
    }
    SECTION("bias plus dot product") {
        FeatureState s = FeatureState::zeros(1, 1, 2);
        s.gamma(0) = 0.5;
        s.eta(0) = 0.25;
        s.U.row(0) << 1.0, 1.0;
        s.V.row(0) << 2.0, -1.0;
        ModelFlags flags{.user_features = true, .side_features = false};
        CHECK(predict(0, 0, s, r, flags) == Catch::Approx(1.75));
    }
    SECTION("bias-only model") {
        FeatureState s = FeatureState::zeros(1, 1, 2);
        s.gamma(0) = 3.0;
        s.eta(0) = 0.5;
        s.U.row(0) << 9.0, 9.0;  // must be ignored with features off
        ModelFlags flags{.user_features = false, .side_features = false};
        CHECK(predict(0, 0, s, r, flags) == Catch::Approx(3.5));
    }
}

TEST_CASE("side sums cache matches direct computation") {
    RngStream rng(14, 0);
    SparseRatings r = testing::random_ratings(8, 6, 0.4, rng);
    FeatureState s = testing::random_features(8, 6, 3, rng);
    ModelFlags flags{.user_features = true, .side_features = true};
    SideSums sums = SideSums::build(s, r);
    for (int i = 0; i < 8; ++i) {
        Vec direct = side_contribution(i, s, r, flags);
        Vec cached = sums.combined(i, s, r, flags);
        CHECK((direct - cached).cwiseAbs().maxCoeff() < 1e-14);
    }
    SECTION("incremental delta keeps the cache current") {
        Eigen::RowVectorXd delta(3);
        delta << 0.5, -1.0, 0.25;
        s.W.row(2) += delta;
        sums.apply_side_delta(r, 2, delta);
        for (int i = 0; i < 8; ++i) {
            Vec direct = side_contribution(i, s, r, flags);
            Vec cached = sums.combined(i, s, r, flags);
            CHECK((direct - cached).cwiseAbs().maxCoeff() < 1e-14);
        }
    }
}
