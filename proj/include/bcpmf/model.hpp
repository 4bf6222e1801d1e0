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

#ifndef BCPMF_MODEL_HPP
#define BCPMF_MODEL_HPP

#include <cmath>
#include <limits>
#include <string>

#include "bcpmf/common.hpp"
#include "bcpmf/ratings.hpp"

namespace bcpmf {

/// Switches for the two optional feature families. With both off the model
/// is bias-only; with side features on, each user's effective vector is
/// offset by the average side vector of the items they rated.
struct ModelFlags {
    bool user_features = true;
    bool side_features = false;

    // Item vectors only matter when something multiplies them.
    bool item_features_active() const { return user_features || side_features; }
};

enum class PrecisionMode { Constant, Robust, Truncated };

inline std::string to_string(PrecisionMode m) {
    switch (m) {
        case PrecisionMode::Constant: return "constant";
        case PrecisionMode::Robust: return "robust";
        case PrecisionMode::Truncated: return "truncated";
    }
    return "?";
}

inline PrecisionMode precision_mode_from_string(const std::string& s) {
    if (s == "constant") return PrecisionMode::Constant;
    if (s == "robust") return PrecisionMode::Robust;
    if (s == "truncated") return PrecisionMode::Truncated;
    throw ConfigError("unknown precision mode: " + s);
}

/// All latent parameters: user/item/side vectors (one per row) and the two
/// bias vectors.
struct FeatureState {
    int d = 0;
    RowMat U;   // num_users x d
    RowMat V;   // num_items x d
    RowMat W;   // num_items x d, side vectors
    Vec gamma;  // user biases
    Vec eta;    // item biases

    static FeatureState zeros(int num_users, int num_items, int d) {
        FeatureState s;
        s.d = d;
        s.U = RowMat::Zero(num_users, d);
        s.V = RowMat::Zero(num_items, d);
        s.W = RowMat::Zero(num_items, d);
        s.gamma = Vec::Zero(num_users);
        s.eta = Vec::Zero(num_items);
        return s;
    }

    int num_users() const { return static_cast<int>(U.rows()); }
    int num_items() const { return static_cast<int>(V.rows()); }
};

/// Heteroskedastic precision factors. Constant mode pins alpha = beta = 1;
/// Truncated mode keeps every factor inside [lo, hi].
struct PrecisionState {
    Vec alpha;  // per-user factors
    Vec beta;   // per-item factors
    double tau = 1.0;
    PrecisionMode mode = PrecisionMode::Constant;
    double lo = 0.0;
    double hi = std::numeric_limits<double>::infinity();

    static PrecisionState constant(int num_users, int num_items, double tau = 1.0) {
        PrecisionState p;
        p.alpha = Vec::Ones(num_users);
        p.beta = Vec::Ones(num_items);
        p.tau = tau;
        p.mode = PrecisionMode::Constant;
        return p;
    }

    static PrecisionState ones(int num_users, int num_items, PrecisionMode mode, double lo = 0.0,
                               double hi = std::numeric_limits<double>::infinity()) {
        PrecisionState p = constant(num_users, num_items);
        p.mode = mode;
        if (mode == PrecisionMode::Truncated) {
            if (!(lo < hi)) throw ConfigError("truncation bounds require lo < hi");
            p.lo = lo;
            p.hi = hi;
        }
        return p;
    }
};

/// Gaussian mean/precision pair for one feature family.
struct HyperFamily {
    Vec mu;
    Mat lambda;

    static HyperFamily standard(int d) { return {Vec::Zero(d), Mat::Identity(d, d)}; }
};

/// Normal-Wishart state for the three feature families.
struct HyperState {
    HyperFamily user;
    HyperFamily item;
    HyperFamily side;

    static HyperState standard(int d) {
        return {HyperFamily::standard(d), HyperFamily::standard(d), HyperFamily::standard(d)};
    }
};

/// Fixed prior constants and model flags.
struct PriorConfig {
    Vec mu0;           // Normal-Wishart mean, shared by the three families
    double beta0 = 1.0;
    double nu0 = 0.0;  // Wishart dof, >= d
    Mat w0;            // Wishart scale, d x d SPD

    double a_user = 2.0, b_user = 2.0;  // Gamma prior on user precision factors
    double a_item = 2.0, b_item = 2.0;  // ... on item precision factors
    double a_tau = 2.0, b_tau = 2.0;    // ... on the global precision

    double mu_gamma = 0.0, lambda_gamma = 1.0;  // user bias prior
    double mu_eta = 0.0, lambda_eta = 1.0;      // item bias prior

    ModelFlags flags;
    double trunc_lo = 0.5, trunc_hi = 2.0;      // bounds for Truncated mode
    double rating_lo = 1.0, rating_hi = 5.0;    // declared rating scale

    static PriorConfig defaults(int d) {
        PriorConfig p;
        p.mu0 = Vec::Zero(d);
        p.nu0 = d + 1;
        p.w0 = Mat::Identity(d, d);
        return p;
    }

    void validate(int d) const {
        if (mu0.size() != d) throw ConfigError("mu0 dimension mismatch");
        if (!(beta0 > 0)) throw ConfigError("beta0 must be positive");
        if (nu0 < d) throw ConfigError("nu0 must be >= d");
        if (w0.rows() != d || w0.cols() != d) throw ConfigError("w0 dimension mismatch");
        if (!(a_user > 0 && b_user > 0 && a_item > 0 && b_item > 0 && a_tau > 0 && b_tau > 0))
            throw ConfigError("gamma prior shapes and rates must be positive");
        if (!(lambda_gamma > 0 && lambda_eta > 0))
            throw ConfigError("bias prior precisions must be positive");
        if (!(trunc_lo < trunc_hi)) throw ConfigError("truncation bounds require lo < hi");
        if (!(rating_lo < rating_hi)) throw ConfigError("rating bounds require lo < hi");
    }
};

/// Combined user/side contribution S_i: the user's own vector plus the
/// average side vector over the items they rated. Users with no ratings get
/// a zero side term (empty-sum convention).
inline Vec side_contribution(int i, const FeatureState& state, const SparseRatings& ratings,
                             const ModelFlags& flags) {
    Vec s = Vec::Zero(state.d);
    if (flags.user_features) s = state.U.row(i);
    if (flags.side_features) {
        const auto& rated = ratings.by_user(i);
        if (!rated.empty()) {
            Vec acc = Vec::Zero(state.d);
            for (const auto& [item, value] : rated) acc += state.W.row(item);
            s += acc / static_cast<double>(rated.size());
        }
    }
    return s;
}

/// Unclamped predicted rating: gamma_i + eta_j + S_i . V_j.
inline double predict(int i, int j, const FeatureState& state, const SparseRatings& ratings,
                      const ModelFlags& flags) {
    double r = state.gamma(i) + state.eta(j);
    if (flags.item_features_active())
        r += side_contribution(i, state, ratings, flags).dot(state.V.row(j));
    return r;
}

/// Running sums of each user's rated side vectors; engines keep this current
/// incrementally so S_i is O(d) to form inside sweeps.
struct SideSums {
    RowMat sum;  // num_users x d

    static SideSums build(const FeatureState& state, const SparseRatings& ratings) {
        SideSums s;
        s.sum = RowMat::Zero(ratings.num_users(), state.d);
        for (int i = 0; i < ratings.num_users(); ++i)
            for (const auto& [item, value] : ratings.by_user(i)) s.sum.row(i) += state.W.row(item);
        return s;
    }

    /// Propagates a change of side vector `item` to every user who rated it.
    void apply_side_delta(const SparseRatings& ratings, int item,
                          const Eigen::RowVectorXd& delta) {
        for (const auto& [user, value] : ratings.by_item(item)) sum.row(user) += delta;
    }

    /// S_i assembled from the cached sum.
    Vec combined(int i, const FeatureState& state, const SparseRatings& ratings,
                 const ModelFlags& flags) const {
        Vec s = Vec::Zero(state.d);
        if (flags.user_features) s = state.U.row(i);
        int n = ratings.count_for_user(i);
        if (flags.side_features && n > 0) s += sum.row(i).transpose() / static_cast<double>(n);
        return s;
    }
};

}  // namespace bcpmf

#endif  // BCPMF_MODEL_HPP
