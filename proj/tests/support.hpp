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

// Test-only helpers: KS test, finite differences, small random instances.

#ifndef BCPMF_TESTS_SUPPORT_HPP
#define BCPMF_TESTS_SUPPORT_HPP

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "bcpmf/model.hpp"
#include "bcpmf/ratings.hpp"
#include "bcpmf/rng.hpp"

namespace bcpmf::testing {

/// One-sample Kolmogorov-Smirnov statistic against an analytic CDF.
inline double ks_statistic(std::vector<double> samples,
                           const std::function<double(double)>& cdf) {
    std::sort(samples.begin(), samples.end());
    const double n = static_cast<double>(samples.size());
    double d = 0.0;
    for (std::size_t k = 0; k < samples.size(); ++k) {
        double f = cdf(samples[k]);
        d = std::max(d, std::abs(f - static_cast<double>(k) / n));
        d = std::max(d, std::abs(static_cast<double>(k + 1) / n - f));
    }
    return d;
}

/// Asymptotic KS p-value: Q(sqrt(n) * D) from the Kolmogorov distribution.
inline double ks_pvalue(double d, std::size_t n) {
    double lambda = (std::sqrt(static_cast<double>(n)) + 0.12 + 0.11 / std::sqrt(static_cast<double>(n))) * d;
    double sum = 0.0;
    for (int k = 1; k <= 100; ++k) {
        double term = 2.0 * std::pow(-1.0, k - 1) * std::exp(-2.0 * k * k * lambda * lambda);
        sum += term;
        if (std::abs(term) < 1e-12) break;
    }
    return std::clamp(sum, 0.0, 1.0);
}

/// Central finite difference of a scalar function of one coordinate.
inline double central_diff(const std::function<double(double)>& f, double x, double h) {
    return (f(x + h) - f(x - h)) / (2.0 * h);
}

/// A small random rating matrix where every user and item has at least one
/// entry; density controls how many of the remaining cells are observed.
inline SparseRatings random_ratings(int num_users, int num_items, double density, RngStream& rng,
                                    double lo = 1.0, double hi = 5.0) {
    std::vector<RatingEntry> entries;
    auto value = [&] { return lo + (hi - lo) * rng.uniform(); };
    for (int i = 0; i < num_users; ++i)
        entries.push_back({i, static_cast<int>(rng.bounded(num_items)), value()});
    std::vector<std::vector<bool>> used(num_users, std::vector<bool>(num_items, false));
    for (auto& e : entries) used[e.user][e.item] = true;
    for (int j = 0; j < num_items; ++j) {
        int i = static_cast<int>(rng.bounded(num_users));
        if (!used[i][j]) {
            entries.push_back({i, j, value()});
            used[i][j] = true;
        }
    }
    for (int i = 0; i < num_users; ++i)
        for (int j = 0; j < num_items; ++j)
            if (!used[i][j] && rng.uniform() < density) entries.push_back({i, j, value()});
    return SparseRatings(num_users, num_items, std::move(entries));
}

/// Random feature state with entries of moderate scale.
inline FeatureState random_features(int num_users, int num_items, int d, RngStream& rng,
                                    double scale = 0.5) {
    FeatureState s = FeatureState::zeros(num_users, num_items, d);
    auto fill = [&](auto& m) {
        for (int r = 0; r < m.rows(); ++r)
            for (int c = 0; c < m.cols(); ++c) m(r, c) = scale * rng.normal();
    };
    fill(s.U);
    fill(s.V);
    fill(s.W);
    for (int i = 0; i < num_users; ++i) s.gamma(i) = scale * rng.normal();
    for (int j = 0; j < num_items; ++j) s.eta(j) = scale * rng.normal();
    return s;
}

}  // namespace bcpmf::testing

#endif  // BCPMF_TESTS_SUPPORT_HPP
