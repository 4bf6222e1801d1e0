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

#ifndef BCPMF_MAP_HPP
#define BCPMF_MAP_HPP

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "bcpmf/common.hpp"
#include "bcpmf/model.hpp"
#include "bcpmf/ratings.hpp"
#include "bcpmf/rng.hpp"

namespace bcpmf {

/// Batch gradient descent settings for the staged point-estimate phase.
struct MapConfig {
    double learning_rate = 0.005;
    double momentum = 0.9;
    double tau_fixed = 1.0;       // global precision held fixed while fitting
    double lambda_bias = 0.02;    // quadratic penalty on biases
    double lambda_feature = 0.02; // quadratic penalty shared by U, V, W
    int max_epochs = 500;
    int patience = 3;             // epochs without validation improvement
    // Shrink the step and retry whenever a step raises the energy. Off by
    // default; the plain momentum schedule is the production path.
    bool halve_on_increase = false;
    double feature_init_scale = 0.01;

    void validate() const {
        if (!(learning_rate > 0)) throw ConfigError("learning_rate must be positive");
        if (!(momentum >= 0 && momentum < 1)) throw ConfigError("momentum must lie in [0, 1)");
        if (!(tau_fixed > 0)) throw ConfigError("tau_fixed must be positive");
        if (!(lambda_bias > 0) || !(lambda_feature > 0))
            throw ConfigError("penalties must be positive");
        if (max_epochs < 1 || patience < 1) throw ConfigError("epoch counts must be positive");
    }
};

/// Gradient of the penalized squared-error objective, block per parameter.
struct Gradients {
    RowMat dU, dV, dW;
    Vec dgamma, deta;

    static Gradients zeros(int num_users, int num_items, int d) {
        Gradients g;
        g.dU = RowMat::Zero(num_users, d);
        g.dV = RowMat::Zero(num_items, d);
        g.dW = RowMat::Zero(num_items, d);
        g.dgamma = Vec::Zero(num_users);
        g.deta = Vec::Zero(num_items);
        return g;
    }
};

/// Penalized weighted squared error:
///   E = (tau/2) sum alpha_i beta_j (r - rhat)^2
///     + (lambda_bias/2)(|gamma|^2 + |eta|^2)
///     + (lambda_feature/2)(|U|^2 + |V|^2 + |W|^2).
/// Constant-mode precisions reduce the data term to the plain squared error.
inline double energy(const FeatureState& params, const PrecisionState& prec,
                     const SparseRatings& ratings, const MapConfig& cfg, const ModelFlags& flags) {
    SideSums sums = SideSums::build(params, ratings);
    double data = 0.0;
    for (int i = 0; i < ratings.num_users(); ++i) {
        if (ratings.by_user(i).empty()) continue;
        Vec s = sums.combined(i, params, ratings, flags);
        for (const auto& [j, r] : ratings.by_user(i)) {
            double e = r - (params.gamma(i) + params.eta(j) + s.dot(params.V.row(j)));
            data += prec.alpha(i) * prec.beta(j) * e * e;
        }
    }
    double pen_bias = params.gamma.squaredNorm() + params.eta.squaredNorm();
    double pen_feat =
        params.U.squaredNorm() + params.V.squaredNorm() + params.W.squaredNorm();
    return 0.5 * prec.tau * data + 0.5 * cfg.lambda_bias * pen_bias +
           0.5 * cfg.lambda_feature * pen_feat;
}

/// Analytic gradient of energy() with respect to every parameter block,
/// including the (delta_W / n_i) chain through each rated side vector.
inline Gradients gradient(const FeatureState& params, const PrecisionState& prec,
                          const SparseRatings& ratings, const MapConfig& cfg,
                          const ModelFlags& flags) {
    Gradients g = Gradients::zeros(ratings.num_users(), ratings.num_items(), params.d);
    g.dgamma = cfg.lambda_bias * params.gamma;
    g.deta = cfg.lambda_bias * params.eta;
    g.dU = cfg.lambda_feature * params.U;
    g.dV = cfg.lambda_feature * params.V;
    g.dW = cfg.lambda_feature * params.W;

    SideSums sums = SideSums::build(params, ratings);
    for (int i = 0; i < ratings.num_users(); ++i) {
        const auto& rated = ratings.by_user(i);
        if (rated.empty()) continue;
        Vec s = sums.combined(i, params, ratings, flags);
        Vec acc = Vec::Zero(params.d);  // sum of tau alpha beta e V_j over the user's ratings
        for (const auto& [j, r] : rated) {
            double e = r - (params.gamma(i) + params.eta(j) + s.dot(params.V.row(j)));
            double w = prec.tau * prec.alpha(i) * prec.beta(j) * e;
            g.dgamma(i) -= w;
            g.deta(j) -= w;
            g.dV.row(j) -= w * s.transpose();
            acc += w * params.V.row(j).transpose();
        }
        if (flags.user_features) g.dU.row(i) -= acc.transpose();
        if (flags.side_features) {
            Vec shared = acc / static_cast<double>(rated.size());
            for (const auto& [k, r] : rated) g.dW.row(k) -= shared.transpose();
        }
    }
    return g;
}

struct MapTraceRow {
    int epoch;
    double energy;
    double rmse_train;
    double rmse_validation;  // NaN when no validation set
};

namespace detail {

inline double stage_rmse(const FeatureState& params, const SparseRatings& target,
                         const SparseRatings& train, const ModelFlags& flags) {
    if (target.num_entries() == 0) return std::numeric_limits<double>::quiet_NaN();
    SideSums sums = SideSums::build(params, train);
    double acc = 0.0;
    for (const auto& e : target.entries()) {
        Vec s = sums.combined(e.user, params, train, flags);
        double pred = params.gamma(e.user) + params.eta(e.item) + s.dot(params.V.row(e.item));
        acc += (e.value - pred) * (e.value - pred);
    }
    return std::sqrt(acc / static_cast<double>(target.num_entries()));
}

// One momentum descent loop shared by the bias and feature stages. `blocks`
// abstracts which parameter blocks move; everything else stays pinned.
struct DescentBlocks {
    std::vector<double*> data;
    std::vector<const double*> grad;
    std::vector<std::ptrdiff_t> size;

    void add(RowMat& p, const RowMat& g) {
        data.push_back(p.data());
        grad.push_back(g.data());
        size.push_back(p.size());
    }
    void add(Vec& p, const Vec& g) {
        data.push_back(p.data());
        grad.push_back(g.data());
        size.push_back(p.size());
    }
};

inline void run_descent(FeatureState& params, const SparseRatings& ratings,
                        const SparseRatings& validation, const MapConfig& cfg,
                        const ModelFlags& flags, bool move_biases, bool move_features,
                        std::vector<MapTraceRow>* trace) {
    PrecisionState prec = PrecisionState::constant(ratings.num_users(), ratings.num_items(),
                                                   cfg.tau_fixed);
    const bool has_validation = validation.num_entries() > 0;

    std::vector<std::vector<double>> velocity;
    auto step = [&](double lr) {
        Gradients g = gradient(params, prec, ratings, cfg, flags);
        DescentBlocks blocks;
        if (move_biases) {
            blocks.add(params.gamma, g.dgamma);
            blocks.add(params.eta, g.deta);
        }
        if (move_features) {
            if (flags.user_features) blocks.add(params.U, g.dU);
            if (flags.item_features_active()) blocks.add(params.V, g.dV);
            if (flags.side_features) blocks.add(params.W, g.dW);
        }
        if (velocity.empty())
            for (auto sz : blocks.size) velocity.emplace_back(static_cast<std::size_t>(sz), 0.0);
        for (std::size_t b = 0; b < blocks.data.size(); ++b)
            for (std::ptrdiff_t k = 0; k < blocks.size[b]; ++k) {
                velocity[b][k] = cfg.momentum * velocity[b][k] - lr * blocks.grad[b][k];
                blocks.data[b][k] += velocity[b][k];
            }
    };

    double lr = cfg.learning_rate;
    double prev_energy = energy(params, prec, ratings, cfg, flags);
    double best_val = std::numeric_limits<double>::infinity();
    FeatureState best = params;
    int stalled = 0;

    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        FeatureState before = params;
        auto velocity_before = velocity;
        step(lr);
        double e = energy(params, prec, ratings, cfg, flags);
        if (!std::isfinite(e))
            throw NumericalError("gradient descent diverged at epoch " + std::to_string(epoch));
        if (cfg.halve_on_increase && e > prev_energy) {
            params = before;
            velocity = velocity_before;
            for (auto& v : velocity) std::fill(v.begin(), v.end(), 0.0);
            lr *= 0.5;
            if (lr < 1e-15) break;
            continue;
        }

        double val_rmse = has_validation ? stage_rmse(params, validation, ratings, flags)
                                         : std::numeric_limits<double>::quiet_NaN();
        if (trace)
            trace->push_back({epoch, e, stage_rmse(params, ratings, ratings, flags), val_rmse});

        if (has_validation) {
            if (val_rmse < best_val - 1e-12) {
                best_val = val_rmse;
                best = params;
                stalled = 0;
            } else if (++stalled >= cfg.patience) {
                params = best;
                return;
            }
        }
        if (std::abs(prev_energy - e) < 1e-6 * std::max(1.0, std::abs(prev_energy))) {
            prev_energy = e;
            break;
        }
        prev_energy = e;
    }
    if (has_validation && best_val < std::numeric_limits<double>::infinity()) params = best;
}

}  // namespace detail

/// Bias stage: fits gamma and eta with all feature vectors pinned at zero.
/// Returns the best-validation iterate when a validation set is supplied.
inline std::pair<Vec, Vec> fit_biases(const SparseRatings& ratings,
                                      const SparseRatings& validation, const MapConfig& cfg,
                                      std::vector<MapTraceRow>* trace = nullptr) {
    cfg.validate();
    FeatureState params = FeatureState::zeros(ratings.num_users(), ratings.num_items(), 1);
    ModelFlags none{.user_features = false, .side_features = false};
    detail::run_descent(params, ratings, validation, cfg, none, /*move_biases=*/true,
                        /*move_features=*/false, trace);
    return {params.gamma, params.eta};
}

/// Feature stage: fits U, V, W jointly with the biases held fixed.
inline FeatureState fit_features(const SparseRatings& ratings, const SparseRatings& validation,
                                 const std::pair<Vec, Vec>& biases, const MapConfig& cfg,
                                 const ModelFlags& flags, int d, RngStream& rng,
                                 std::vector<MapTraceRow>* trace = nullptr) {
    cfg.validate();
    FeatureState params = FeatureState::zeros(ratings.num_users(), ratings.num_items(), d);
    params.gamma = biases.first;
    params.eta = biases.second;
    if (flags.item_features_active()) {
        auto init = [&](RowMat& m) {
            for (int r = 0; r < m.rows(); ++r)
                for (int c = 0; c < m.cols(); ++c) m(r, c) = cfg.feature_init_scale * rng.normal();
        };
        if (flags.user_features) init(params.U);
        init(params.V);
        if (flags.side_features) init(params.W);
        detail::run_descent(params, ratings, validation, cfg, flags, /*move_biases=*/false,
                            /*move_features=*/true, trace);
    }
    return params;
}

/// Coupled maximum-likelihood precisions given fixed MAP parameters:
///   alpha_i^-1 = tau * sum_j beta_j e_ij^2 / n_i,   beta_j analogous,
///   tau^-1     = sum_ij alpha_i beta_j e_ij^2 / #entries.
/// Iterated to a fixed point; Truncated mode clamps alpha and beta to
/// [lo, hi] after every sweep. Entities with no observations keep factor 1;
/// zero-residual entities are capped instead of diverging.
inline PrecisionState fit_precisions_mle(const FeatureState& params, const SparseRatings& ratings,
                                         const ModelFlags& flags, PrecisionMode mode,
                                         double lo = 0.5, double hi = 2.0) {
    const int n = ratings.num_users(), m = ratings.num_items();
    PrecisionState prec = PrecisionState::ones(n, m, mode, lo, hi);
    const double cap = 1e8;

    // residuals are fixed by the MAP parameters
    SideSums sums = SideSums::build(params, ratings);
    std::vector<std::vector<double>> sq_user(n);
    for (int i = 0; i < n; ++i) {
        Vec s = sums.combined(i, params, ratings, flags);
        for (const auto& [j, r] : ratings.by_user(i)) {
            double e = r - (params.gamma(i) + params.eta(j) + s.dot(params.V.row(j)));
            sq_user[i].push_back(e * e);
        }
    }

    auto clamp_factor = [&](double raw) {
        if (mode == PrecisionMode::Truncated) return std::clamp(raw, lo, hi);
        return std::min(raw, cap);
    };

    for (int sweep = 0; sweep < 500; ++sweep) {
        double max_rel = 0.0;
        auto track = [&](double before, double after) {
            max_rel = std::max(max_rel, std::abs(after - before) / std::max(1.0, std::abs(before)));
        };

        if (mode != PrecisionMode::Constant) {
            for (int i = 0; i < n; ++i) {
                const auto& rated = ratings.by_user(i);
                if (rated.empty()) continue;
                double acc = 0.0;
                for (std::size_t k = 0; k < rated.size(); ++k)
                    acc += prec.beta(rated[k].first) * sq_user[i][k];
                double inv = prec.tau * acc / static_cast<double>(rated.size());
                double next = inv > 0 ? clamp_factor(1.0 / inv)
                                      : (mode == PrecisionMode::Truncated ? hi : cap);
                track(prec.alpha(i), next);
                prec.alpha(i) = next;
            }
            std::vector<double> item_acc(m, 0.0);
            for (int i = 0; i < n; ++i) {
                const auto& rated = ratings.by_user(i);
                for (std::size_t k = 0; k < rated.size(); ++k)
                    item_acc[rated[k].first] += prec.alpha(i) * sq_user[i][k];
            }
            for (int j = 0; j < m; ++j) {
                int mj = ratings.count_for_item(j);
                if (mj == 0) continue;
                double inv = prec.tau * item_acc[j] / static_cast<double>(mj);
                double next = inv > 0 ? clamp_factor(1.0 / inv)
                                      : (mode == PrecisionMode::Truncated ? hi : cap);
                track(prec.beta(j), next);
                prec.beta(j) = next;
            }
        }

        double total = 0.0;
        for (int i = 0; i < n; ++i) {
            const auto& rated = ratings.by_user(i);
            for (std::size_t k = 0; k < rated.size(); ++k)
                total += prec.alpha(i) * prec.beta(rated[k].first) * sq_user[i][k];
        }
        double next_tau = cap;
        if (ratings.num_entries() > 0 && total > 0)
            next_tau = std::min(static_cast<double>(ratings.num_entries()) / total, cap);
        track(prec.tau, next_tau);
        prec.tau = next_tau;

        if (max_rel < 1e-8) break;
    }
    return prec;
}

/// MAP-driven Wishart scale: W0^-1 = diag(sum U U^T)/2 + diag(sum V V^T)/2,
/// returned as W0 itself. Raises if any feature dimension is degenerate.
inline Mat map_driven_scale_matrix(const FeatureState& params) {
    const int d = params.d;
    Vec diag = Vec::Zero(d);
    for (int t = 0; t < d; ++t)
        diag(t) = 0.5 * params.U.col(t).squaredNorm() + 0.5 * params.V.col(t).squaredNorm();
    Mat w0 = Mat::Zero(d, d);
    for (int t = 0; t < d; ++t) {
        if (!(diag(t) > 0))
            throw NumericalError("map-driven scale: zero diagonal in feature dimension " +
                                 std::to_string(t));
        w0(t, t) = 1.0 / diag(t);
    }
    return w0;
}

/// Full staged point-estimate phase: biases, then features, then the
/// precision fixed point.
inline std::pair<FeatureState, PrecisionState> run_map(
    const SparseRatings& ratings, const SparseRatings& validation, const MapConfig& cfg,
    const ModelFlags& flags, int d, PrecisionMode mode, double lo, double hi, RngStream& rng,
    std::vector<MapTraceRow>* trace = nullptr) {
    auto biases = fit_biases(ratings, validation, cfg, trace);
    FeatureState feats = fit_features(ratings, validation, biases, cfg, flags, d, rng, trace);
    PrecisionState prec = fit_precisions_mle(feats, ratings, flags, mode, lo, hi);
    return {std::move(feats), std::move(prec)};
}

}  // namespace bcpmf

#endif  // BCPMF_MAP_HPP
