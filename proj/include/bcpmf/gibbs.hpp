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

#ifndef BCPMF_GIBBS_HPP
#define BCPMF_GIBBS_HPP

#include <chrono>
#include <cstdint>
#include <optional>
#include <vector>

#include "bcpmf/common.hpp"
#include "bcpmf/distributions.hpp"
#include "bcpmf/model.hpp"
#include "bcpmf/ratings.hpp"
#include "bcpmf/rng.hpp"

namespace bcpmf {

struct GibbsConfig {
    int num_samples = 100;
    int burn_in = 0;  // samples discarded before the running average starts
    int thin = 1;
    std::uint64_t seed = 0;
    int threads = 1;

    // Debug / ablation switches.
    bool use_conditional_means = false;  // variance -> 0: deterministic coordinate scheme
    bool update_hyperparams = true;
    bool update_biases = true;
    bool update_precisions = true;
    bool items_first = false;      // scan items before users (either order is a valid scan)
    bool mirror_streams = false;   // swap user/item stream families (transposition checks)
    bool track_user_feature_variance = false;

    void validate() const {
        if (num_samples < 1) throw ConfigError("num_samples must be >= 1");
        if (burn_in < 0 || thin < 1) throw ConfigError("bad burn_in / thin");
        if (threads < 1) throw ConfigError("threads must be >= 1");
    }
};

struct GaussianConditional {
    Vec mean;
    Mat precision;
};

struct ScalarGaussianConditional {
    double mean;
    double precision;
};

struct GammaConditional {
    double shape;
    double rate;
};

struct NormalWishartConditional {
    Vec mean;      // mu_tilde
    double kappa;  // precision multiplier on the mean: N + beta0
    double dof;    // nu0 + N + 1
    Mat scale;     // W_tilde
};

/// Running mean of per-sample predictions over a fixed entry set.
struct RunningPrediction {
    std::vector<double> sums;
    long long count = 0;

    void init(std::size_t n) { sums.assign(n, 0.0); }
    void accumulate(const std::vector<double>& preds) {
        for (std::size_t k = 0; k < sums.size(); ++k) sums[k] += preds[k];
        ++count;
    }
    double mean(std::size_t k) const { return sums[k] / static_cast<double>(count); }

    double rmse(const std::vector<RatingEntry>& entries) const {
        if (entries.empty() || count == 0) return std::numeric_limits<double>::quiet_NaN();
        double acc = 0.0;
        for (std::size_t k = 0; k < entries.size(); ++k) {
            double e = entries[k].value - mean(k);
            acc += e * e;
        }
        return std::sqrt(acc / static_cast<double>(entries.size()));
    }
};

struct GibbsTraceRow {
    int iter;
    double rmse_train;
    double rmse_test;
    double tau;
    std::vector<double> alpha_sample;  // first few user factors
    std::vector<double> beta_sample;
    double elapsed_ms;
};

struct GibbsResult {
    RunningPrediction train_prediction;
    RunningPrediction target_prediction;
    std::vector<GibbsTraceRow> trace;
    // Welford accumulators for per-user feature variance across samples.
    RowMat user_feature_mean;
    RowMat user_feature_m2;
    long long variance_count = 0;
};

/// Normal-Wishart conditional for one feature family given its current
/// vectors. The empty family recovers the prior (up to the +1 dof carried by
/// the conditional mean's |Lambda|^(1/2) factor).
inline NormalWishartConditional hyper_conditional(const RowMat& features,
                                                  const PriorConfig& prior, const Mat& w0_inv) {
    const int d = static_cast<int>(features.cols());
    const double n = static_cast<double>(features.rows());
    NormalWishartConditional out;
    out.kappa = n + prior.beta0;
    out.dof = prior.nu0 + n + 1;

    Vec bar = n > 0 ? Vec(features.colwise().mean()) : Vec(Vec::Zero(d));
    out.mean = (n * bar + prior.beta0 * prior.mu0) / (n + prior.beta0);

    Mat scatter = Mat::Zero(d, d);
    for (int r = 0; r < features.rows(); ++r) {
        Vec dev = features.row(r).transpose() - bar;
        scatter.noalias() += dev * dev.transpose();
    }
    Vec dev0 = bar - prior.mu0;
    Mat w_inv = w0_inv + scatter +
                (n * prior.beta0 / (n + prior.beta0)) * (dev0 * dev0.transpose());
    out.scale = spd_inverse(w_inv, "hyper scale");
    return out;
}

inline HyperFamily sample_hyper(const NormalWishartConditional& c, RngStream& rng,
                                bool use_means = false) {
    HyperFamily fam;
    if (use_means) {
        fam.lambda = c.dof * c.scale;
        fam.mu = c.mean;
        return fam;
    }
    fam.lambda = sample_wishart(c.dof, c.scale, rng);
    fam.mu = sample_mvn(c.mean, Mat(c.kappa * fam.lambda), rng);
    return fam;
}

/// One-engine-owns-the-state Gibbs sampler over the full conditional set:
/// hyper-parameters, user features/biases/precisions, item
/// features/biases/precisions, side features, global precision.
class GibbsSampler {
  public:
    GibbsSampler(const SparseRatings& train, const PriorConfig& prior, FeatureState init,
                 PrecisionState prec, GibbsConfig cfg)
        : train_(train),
          prior_(prior),
          flags_(prior.flags),
          cfg_(cfg),
          feats_(std::move(init)),
          prec_(std::move(prec)) {
        cfg_.validate();
        prior_.validate(feats_.d);
        if (feats_.num_users() != train.num_users() || feats_.num_items() != train.num_items())
            throw ConfigError("feature state does not match the rating matrix");
        if (!flags_.user_features) feats_.U.setZero();
        if (!flags_.side_features) feats_.W.setZero();
        w0_inv_ = spd_inverse(prior_.w0, "prior scale");
        hyper_ = HyperState::standard(feats_.d);
        side_sums_ = SideSums::build(feats_, train_);

        const std::uint64_t user_base = cfg_.mirror_streams ? kItemBase : kUserBase;
        const std::uint64_t item_base = cfg_.mirror_streams ? kUserBase : kItemBase;
        user_streams_.reserve(train.num_users());
        for (int i = 0; i < train.num_users(); ++i)
            user_streams_.emplace_back(cfg_.seed, user_base + static_cast<std::uint64_t>(i));
        item_streams_.reserve(train.num_items());
        side_streams_.reserve(train.num_items());
        for (int j = 0; j < train.num_items(); ++j) {
            item_streams_.emplace_back(cfg_.seed, item_base + static_cast<std::uint64_t>(j));
            side_streams_.emplace_back(cfg_.seed, kSideBase + static_cast<std::uint64_t>(j));
        }
        hyper_user_stream_ = RngStream(cfg_.seed, cfg_.mirror_streams ? 2 : 1);
        hyper_item_stream_ = RngStream(cfg_.seed, cfg_.mirror_streams ? 1 : 2);
        hyper_side_stream_ = RngStream(cfg_.seed, 3);
        tau_stream_ = RngStream(cfg_.seed, 4);
    }

    const FeatureState& features() const { return feats_; }
    const PrecisionState& precisions() const { return prec_; }
    const HyperState& hypers() const { return hyper_; }
    FeatureState& features_mut() { return feats_; }
    PrecisionState& precisions_mut() { return prec_; }
    void set_hypers(HyperState h) { hyper_ = std::move(h); }

    // ---- conditionals (exposed so tests can check them against oracles) ----

    GaussianConditional user_feature_conditional(int i) const {
        GaussianConditional c{Vec(), hyper_.user.lambda};
        Vec rhs = hyper_.user.lambda * hyper_.user.mu;
        const double coef = prec_.tau * prec_.alpha(i);
        const int ni = train_.count_for_user(i);
        for (const auto& [j, r] : train_.by_user(i)) {
            Vec v = feats_.V.row(j);
            double resid = r - (feats_.gamma(i) + feats_.eta(j));
            if (flags_.side_features && ni > 0)
                resid -= side_sums_.sum.row(i).dot(feats_.V.row(j)) / static_cast<double>(ni);
            double w = coef * prec_.beta(j);
            c.precision.noalias() += w * v * v.transpose();
            rhs.noalias() += (w * resid) * v;
        }
        c.mean = chol_spd(c.precision, "user conditional").solve(rhs);
        return c;
    }

    GaussianConditional item_feature_conditional(int j) const {
        GaussianConditional c{Vec(), hyper_.item.lambda};
        Vec rhs = hyper_.item.lambda * hyper_.item.mu;
        const double coef = prec_.tau * prec_.beta(j);
        for (const auto& [i, r] : train_.by_item(j)) {
            Vec s = side_sums_.combined(i, feats_, train_, flags_);
            double resid = r - (feats_.gamma(i) + feats_.eta(j));
            double w = coef * prec_.alpha(i);
            c.precision.noalias() += w * s * s.transpose();
            rhs.noalias() += (w * resid) * s;
        }
        c.mean = chol_spd(c.precision, "item conditional").solve(rhs);
        return c;
    }

    GaussianConditional side_feature_conditional(int m) const {
        SidePhaseCache cache = build_side_cache(&m);
        return side_conditional_from(m, cache);
    }

    ScalarGaussianConditional user_bias_conditional(int i) const {
        const double coef = prec_.tau * prec_.alpha(i);
        double lam = prior_.lambda_gamma;
        double num = prior_.lambda_gamma * prior_.mu_gamma;
        Vec s = side_sums_.combined(i, feats_, train_, flags_);
        for (const auto& [j, r] : train_.by_user(i)) {
            double w = coef * prec_.beta(j);
            lam += w;
            num += w * (r - (feats_.eta(j) + s.dot(feats_.V.row(j))));
        }
        return {num / lam, lam};
    }

    ScalarGaussianConditional item_bias_conditional(int j) const {
        const double coef = prec_.tau * prec_.beta(j);
        double lam = prior_.lambda_eta;
        double num = prior_.lambda_eta * prior_.mu_eta;
        for (const auto& [i, r] : train_.by_item(j)) {
            Vec s = side_sums_.combined(i, feats_, train_, flags_);
            double w = coef * prec_.alpha(i);
            lam += w;
            num += w * (r - (feats_.gamma(i) + s.dot(feats_.V.row(j))));
        }
        return {num / lam, lam};
    }

    GammaConditional user_precision_conditional(int i) const {
        double shape = prior_.a_user + 0.5 * train_.count_for_user(i);
        double rate = prior_.b_user;
        Vec s = side_sums_.combined(i, feats_, train_, flags_);
        for (const auto& [j, r] : train_.by_user(i)) {
            double e = r - ((feats_.gamma(i) + feats_.eta(j)) + s.dot(feats_.V.row(j)));
            rate += 0.5 * prec_.tau * prec_.beta(j) * e * e;
        }
        return {shape, rate};
    }

    GammaConditional item_precision_conditional(int j) const {
        double shape = prior_.a_item + 0.5 * train_.count_for_item(j);
        double rate = prior_.b_item;
        for (const auto& [i, r] : train_.by_item(j)) {
            Vec s = side_sums_.combined(i, feats_, train_, flags_);
            double e = r - ((feats_.gamma(i) + feats_.eta(j)) + s.dot(feats_.V.row(j)));
            rate += 0.5 * prec_.tau * prec_.alpha(i) * e * e;
        }
        return {shape, rate};
    }

    GammaConditional tau_conditional() const {
        double shape = prior_.a_tau + 0.5 * static_cast<double>(train_.num_entries());
        double rate = prior_.b_tau;
        RowMat s = combined_matrix();
        // entry order, so the sum is invariant under transposed role swaps
        for (const auto& e : train_.entries()) {
            double resid = e.value - ((feats_.gamma(e.user) + feats_.eta(e.item)) +
                                      s.row(e.user).dot(feats_.V.row(e.item)));
            rate += 0.5 * prec_.alpha(e.user) * prec_.beta(e.item) * resid * resid;
        }
        return {shape, rate};
    }

    NormalWishartConditional hyper_conditional_for(char family) const {
        switch (family) {
            case 'U': return hyper_conditional(feats_.U, prior_, w0_inv_);
            case 'V': return hyper_conditional(feats_.V, prior_, w0_inv_);
            case 'W': return hyper_conditional(feats_.W, prior_, w0_inv_);
        }
        throw ConfigError("unknown hyper family");
    }

    // ---- single-site resampling (also the building blocks of sweep()) ----

    Vec resample_user_feature(int i) {
        Vec x = draw_gaussian(user_feature_conditional(i), user_streams_[i]);
        feats_.U.row(i) = x.transpose();
        return x;
    }

    Vec resample_item_feature(int j) {
        Vec x = draw_gaussian(item_feature_conditional(j), item_streams_[j]);
        feats_.V.row(j) = x.transpose();
        return x;
    }

    Vec resample_side_feature(int m) {
        Vec x = draw_gaussian(side_feature_conditional(m), side_streams_[m]);
        apply_side_update(m, x);
        return x;
    }

    double resample_user_bias(int i) {
        auto c = user_bias_conditional(i);
        feats_.gamma(i) = draw_scalar(c, user_streams_[i]);
        return feats_.gamma(i);
    }

    double resample_item_bias(int j) {
        auto c = item_bias_conditional(j);
        feats_.eta(j) = draw_scalar(c, item_streams_[j]);
        return feats_.eta(j);
    }

    double resample_user_precision(int i) {
        prec_.alpha(i) = draw_factor(user_precision_conditional(i), user_streams_[i]);
        return prec_.alpha(i);
    }

    double resample_item_precision(int j) {
        prec_.beta(j) = draw_factor(item_precision_conditional(j), item_streams_[j]);
        return prec_.beta(j);
    }

    double resample_tau() {
        auto c = tau_conditional();
        prec_.tau = cfg_.use_conditional_means ? c.shape / c.rate
                                               : sample_gamma(c.shape, c.rate, tau_stream_);
        return prec_.tau;
    }

    // ---- sweep phases ----

    void step_hyperparams() {
        if (flags_.user_features)
            hyper_.user = sample_hyper(hyper_conditional_for('U'), hyper_user_stream_,
                                       cfg_.use_conditional_means);
        if (flags_.item_features_active())
            hyper_.item = sample_hyper(hyper_conditional_for('V'), hyper_item_stream_,
                                       cfg_.use_conditional_means);
        if (flags_.side_features)
            hyper_.side = sample_hyper(hyper_conditional_for('W'), hyper_side_stream_,
                                       cfg_.use_conditional_means);
    }

    void step_users() {
        parallel_for(train_.num_users(), cfg_.threads, [this](int begin, int end) {
            for (int i = begin; i < end; ++i) {
                if (flags_.user_features) resample_user_feature(i);
                if (cfg_.update_biases) resample_user_bias(i);
                if (cfg_.update_precisions && prec_.mode != PrecisionMode::Constant)
                    resample_user_precision(i);
            }
        });
    }

    void step_items() {
        parallel_for(train_.num_items(), cfg_.threads, [this](int begin, int end) {
            for (int j = begin; j < end; ++j) {
                if (flags_.item_features_active()) resample_item_feature(j);
                if (cfg_.update_biases) resample_item_bias(j);
                if (cfg_.update_precisions && prec_.mode != PrecisionMode::Constant)
                    resample_item_precision(j);
            }
        });
    }

    /// Side features are sequential: each update shifts every rater's
    /// combined vector, which the next conditional must see.
    void step_sides() {
        if (!flags_.side_features) return;
        SidePhaseCache cache = build_side_cache(nullptr);
        for (int m = 0; m < train_.num_items(); ++m) {
            Vec x = draw_gaussian(side_conditional_from(m, cache), side_streams_[m]);
            apply_side_update(m, x);
        }
    }

    void sweep() {
        if (cfg_.update_hyperparams) step_hyperparams();
        if (cfg_.items_first) {
            step_items();
            step_users();
        } else {
            step_users();
            step_items();
        }
        step_sides();
        if (cfg_.update_precisions) resample_tau();
    }

    /// Current point predictions for an entry list (O(d) per entry).
    std::vector<double> predictions(const std::vector<RatingEntry>& entries) const {
        RowMat s = combined_matrix();
        std::vector<double> out;
        out.reserve(entries.size());
        for (const auto& e : entries)
            out.push_back((feats_.gamma(e.user) + feats_.eta(e.item)) +
                          s.row(e.user).dot(feats_.V.row(e.item)));
        return out;
    }

    /// Algorithm: for each sample, refresh hyper-parameters, sweep users,
    /// items, side features and the global precision, then fold the current
    /// predictions into the running averages.
    GibbsResult run(const SparseRatings& target) {
        GibbsResult result;
        std::vector<RatingEntry> train_entries = train_.entries();
        result.train_prediction.init(train_entries.size());
        result.target_prediction.init(target.num_entries());
        if (cfg_.track_user_feature_variance) {
            result.user_feature_mean = RowMat::Zero(train_.num_users(), feats_.d);
            result.user_feature_m2 = RowMat::Zero(train_.num_users(), feats_.d);
        }
        auto t0 = std::chrono::steady_clock::now();
        for (int t = 1; t <= cfg_.num_samples; ++t) {
            sweep();
            bool keep = t > cfg_.burn_in && ((t - cfg_.burn_in - 1) % cfg_.thin == 0);
            if (keep) {
                result.train_prediction.accumulate(predictions(train_entries));
                result.target_prediction.accumulate(predictions(target.entries()));
                if (cfg_.track_user_feature_variance) {
                    ++result.variance_count;
                    RowMat delta = feats_.U - result.user_feature_mean;
                    result.user_feature_mean += delta / static_cast<double>(result.variance_count);
                    result.user_feature_m2.array() +=
                        delta.array() * (feats_.U - result.user_feature_mean).array();
                }
            }
            GibbsTraceRow row;
            row.iter = t;
            row.rmse_train = result.train_prediction.rmse(train_entries);
            row.rmse_test = result.target_prediction.rmse(target.entries());
            row.tau = prec_.tau;
            for (int i = 0; i < std::min(3, train_.num_users()); ++i)
                row.alpha_sample.push_back(prec_.alpha(i));
            for (int j = 0; j < std::min(3, train_.num_items()); ++j)
                row.beta_sample.push_back(prec_.beta(j));
            row.elapsed_ms = std::chrono::duration<double, std::milli>(
                                 std::chrono::steady_clock::now() - t0)
                                 .count();
            result.trace.push_back(std::move(row));
        }
        return result;
    }

  private:
    static constexpr std::uint64_t kUserBase = 1ULL << 32;
    static constexpr std::uint64_t kItemBase = 2ULL << 32;
    static constexpr std::uint64_t kSideBase = 3ULL << 32;

    struct SidePhaseCache {
        // per-user: G_i = sum_j beta_j V_j V_j^T and
        // c_i = sum_j beta_j V_j (r - gamma_i - eta_j - delta_U U_i . V_j);
        // both are fixed while the W block sweeps.
        std::vector<Mat> g;
        RowMat c;
        std::vector<bool> built;
    };

    // Builds the cache for every user (only_item == nullptr) or just for the
    // raters of one item.
    SidePhaseCache build_side_cache(const int* only_item) const {
        SidePhaseCache cache;
        const int n = train_.num_users();
        cache.g.assign(n, Mat());
        cache.c = RowMat::Zero(n, feats_.d);
        cache.built.assign(n, false);
        auto build_user = [&](int i) {
            if (cache.built[i]) return;
            cache.built[i] = true;
            Mat g = Mat::Zero(feats_.d, feats_.d);
            Vec c = Vec::Zero(feats_.d);
            for (const auto& [j, r] : train_.by_user(i)) {
                Vec v = feats_.V.row(j);
                double resid = r - (feats_.gamma(i) + feats_.eta(j));
                if (flags_.user_features) resid -= feats_.U.row(i).dot(feats_.V.row(j));
                g.noalias() += prec_.beta(j) * v * v.transpose();
                c.noalias() += (prec_.beta(j) * resid) * v;
            }
            cache.g[i] = std::move(g);
            cache.c.row(i) = c.transpose();
        };
        if (only_item) {
            for (const auto& [i, r] : train_.by_item(*only_item)) build_user(i);
        } else {
            for (int i = 0; i < n; ++i)
                if (!train_.by_user(i).empty()) build_user(i);
        }
        return cache;
    }

    GaussianConditional side_conditional_from(int m, const SidePhaseCache& cache) const {
        GaussianConditional c{Vec(), hyper_.side.lambda};
        Vec rhs = hyper_.side.lambda * hyper_.side.mu;
        for (const auto& [i, r] : train_.by_item(m)) {
            const double ni = static_cast<double>(train_.count_for_user(i));
            const double w = prec_.tau * prec_.alpha(i);
            c.precision.noalias() += (w / (ni * ni)) * cache.g[i];
            // leave-one-out side average: (side_sum_i - W_m) / n_i
            Vec rest = (side_sums_.sum.row(i) - feats_.W.row(m)).transpose() / ni;
            rhs.noalias() +=
                (w / ni) * (cache.c.row(i).transpose() - cache.g[i] * rest);
        }
        c.mean = chol_spd(c.precision, "side conditional").solve(rhs);
        return c;
    }

    void apply_side_update(int m, const Vec& x) {
        Eigen::RowVectorXd delta = x.transpose() - feats_.W.row(m);
        feats_.W.row(m) = x.transpose();
        side_sums_.apply_side_delta(train_, m, delta);
    }

    Vec draw_gaussian(const GaussianConditional& c, RngStream& rng) {
        if (cfg_.use_conditional_means) return c.mean;
        return sample_mvn(c.mean, c.precision, rng);
    }

    double draw_scalar(const ScalarGaussianConditional& c, RngStream& rng) {
        if (cfg_.use_conditional_means) return c.mean;
        return c.mean + rng.normal() / std::sqrt(c.precision);
    }

    double draw_factor(const GammaConditional& c, RngStream& rng) {
        if (prec_.mode == PrecisionMode::Truncated) {
            if (cfg_.use_conditional_means)
                return truncated_gamma_point(c.shape, c.rate, prec_.lo, prec_.hi);
            return sample_truncated_gamma(c.shape, c.rate, prec_.lo, prec_.hi, rng);
        }
        if (cfg_.use_conditional_means) return c.shape / c.rate;
        return sample_gamma(c.shape, c.rate, rng);
    }

    // S_i for every user as a matrix; used for prediction passes.
    RowMat combined_matrix() const {
        RowMat s = RowMat::Zero(train_.num_users(), feats_.d);
        if (flags_.user_features) s = feats_.U;
        if (flags_.side_features)
            for (int i = 0; i < train_.num_users(); ++i) {
                int ni = train_.count_for_user(i);
                if (ni > 0) s.row(i) += side_sums_.sum.row(i) / static_cast<double>(ni);
            }
        return s;
    }

    const SparseRatings& train_;
    PriorConfig prior_;
    ModelFlags flags_;
    GibbsConfig cfg_;

    FeatureState feats_;
    PrecisionState prec_;
    HyperState hyper_;
    SideSums side_sums_;
    Mat w0_inv_;

    std::vector<RngStream> user_streams_;
    std::vector<RngStream> item_streams_;
    std::vector<RngStream> side_streams_;
    RngStream hyper_user_stream_;
    RngStream hyper_item_stream_;
    RngStream hyper_side_stream_;
    RngStream tau_stream_;
};

}  // namespace bcpmf

#endif  // BCPMF_GIBBS_HPP
