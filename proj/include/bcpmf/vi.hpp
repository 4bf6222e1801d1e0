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

#ifndef BCPMF_VI_HPP
#define BCPMF_VI_HPP

#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "bcpmf/common.hpp"
#include "bcpmf/distributions.hpp"
#include "bcpmf/model.hpp"
#include "bcpmf/ratings.hpp"

namespace bcpmf {

struct ViConfig {
    int max_updates = 100;
    double elbo_rel_tol = 1e-6;
    bool track_test_elbo = false;
    // Truncated mode substitutes a surrogate for E[alpha]: the clamped point
    // estimate (the default, matching the barrier view of the truncated
    // maximizer) or the exact truncated-Gamma mean.
    enum class TruncatedPolicy { ClampedPoint, ExactMean };
    TruncatedPolicy truncated_policy = TruncatedPolicy::ClampedPoint;
    int threads = 1;

    void validate() const {
        if (max_updates < 1) throw ConfigError("max_updates must be >= 1");
        if (!(elbo_rel_tol > 0)) throw ConfigError("elbo_rel_tol must be positive");
        if (threads < 1) throw ConfigError("threads must be >= 1");
    }
};

/// Gaussian factor stored by mean and covariance; logdet_prec = -log|cov|.
struct GaussianFactor {
    Vec mean;
    Mat cov;
    double logdet_prec = 0.0;
};

struct GammaFactor {
    double shape = 1.0;
    double rate = 1.0;
    double mean() const { return shape / rate; }
    double e_log() const { return e_log_gamma(shape, rate); }
    double entropy() const {
        return shape - std::log(rate) + std::lgamma(shape) + (1.0 - shape) * digamma(shape);
    }
};

/// Normal-Wishart factor over one family's (mean, precision), with the
/// expectation caches every update formula consumes.
struct NormalWishartFactor {
    Vec mean;      // mu_tilde
    double kappa;  // beta_tilde
    double dof;    // nu_tilde
    Mat scale;     // W_tilde

    Mat e_lambda;        // dof * scale
    Vec e_lambda_mean;   // e_lambda * mean
    double logdet_scale = 0.0;
    double e_logdet = 0.0;  // E[log |Lambda|]

    void refresh() {
        e_lambda = dof * scale;
        e_lambda_mean = e_lambda * mean;
        logdet_scale = logdet_from_llt(chol_spd(scale, "NW factor scale"));
        e_logdet = e_logdet_wishart(dof, static_cast<int>(scale.rows()), logdet_scale);
    }

    static NormalWishartFactor from_prior(const PriorConfig& prior) {
        NormalWishartFactor f;
        f.mean = prior.mu0;
        f.kappa = prior.beta0;
        f.dof = prior.nu0;
        f.scale = prior.w0;
        f.refresh();
        return f;
    }
};

/// Named pieces of the variational lower bound. Additive constants that are
/// independent of every variational parameter (the 2*pi factors and the
/// Wishart prior normalizer) are dropped consistently.
struct ElboTerms {
    double rating = 0.0;
    double feature_priors = 0.0;
    double bias_priors = 0.0;
    double precision_priors = 0.0;
    double hyper_priors = 0.0;
    double entropy = 0.0;

    double total() const {
        return rating + feature_priors + bias_priors + precision_priors + hyper_priors + entropy;
    }
};

struct ViTraceRow {
    int update;
    double elbo_train;  // NaN in Truncated mode
    double elbo_test;   // rating term on test entries; NaN unless tracked
    double rmse_train;
    double rmse_test;
};

struct ViResult {
    std::vector<ViTraceRow> curve;
    double best_test_rmse = std::numeric_limits<double>::quiet_NaN();
    int best_test_update = -1;
    double final_elbo = std::numeric_limits<double>::quiet_NaN();
    int updates_run = 0;
};

/// Coordinate-ascent mean-field engine. Every block update is the exact
/// maximizer of the lower bound given the other blocks, so the bound is
/// non-decreasing in Constant and Robust modes.
class MeanFieldEngine {
  public:
    MeanFieldEngine(const SparseRatings& train, const PriorConfig& prior, ViConfig cfg)
        : train_(train), prior_(prior), flags_(prior.flags), cfg_(cfg) {
        cfg_.validate();
        d_ = static_cast<int>(prior.mu0.size());
        prior_.validate(d_);
        w0_inv_ = spd_inverse(prior_.w0, "prior scale");
        prior_wishart_logz_ = 0.5 * prior_.nu0 * d_ * std::log(2.0) +
                              0.5 * prior_.nu0 * logdet_from_llt(chol_spd(prior_.w0)) +
                              log_multigamma(0.5 * prior_.nu0, d_);
        const int n = train.num_users(), m = train.num_items();

        Mat prior_prec = prior_.nu0 * prior_.w0;
        Mat prior_cov = spd_inverse(prior_prec, "prior feature precision");
        double prior_logdet = logdet_from_llt(chol_spd(prior_prec));

        mu_u_ = RowMat::Zero(n, d_);
        mu_v_ = RowMat::Zero(m, d_);
        mu_w_ = RowMat::Zero(m, d_);
        cov_u_.assign(n, prior_cov);
        cov_v_.assign(m, prior_cov);
        cov_w_.assign(m, prior_cov);
        logdet_u_ = Vec::Constant(n, prior_logdet);
        logdet_v_ = Vec::Constant(m, prior_logdet);
        logdet_w_ = Vec::Constant(m, prior_logdet);

        mu_gamma_ = Vec::Zero(n);
        mu_eta_ = Vec::Zero(m);
        lam_gamma_ = Vec::Constant(n, prior_.lambda_gamma);
        lam_eta_ = Vec::Constant(m, prior_.lambda_eta);

        alpha_.assign(n, {prior_.a_user, prior_.b_user});
        beta_.assign(m, {prior_.a_item, prior_.b_item});
        tau_ = {prior_.a_tau, prior_.b_tau};

        nw_user_ = NormalWishartFactor::from_prior(prior_);
        nw_item_ = NormalWishartFactor::from_prior(prior_);
        nw_side_ = NormalWishartFactor::from_prior(prior_);

        mode_ = PrecisionMode::Robust;
        rebuild_caches();
    }

    /// Means from a point estimate; spreads stay at prior scale.
    void init_from_map(const FeatureState& feats, PrecisionMode mode, double lo, double hi) {
        if (feats.d != d_) throw ConfigError("MAP state dimension mismatch");
        mode_ = mode;
        lo_ = lo;
        hi_ = hi;
        if (flags_.user_features) mu_u_ = feats.U;
        if (flags_.item_features_active()) mu_v_ = feats.V;
        if (flags_.side_features) mu_w_ = feats.W;
        mu_gamma_ = feats.gamma;
        mu_eta_ = feats.eta;
        rebuild_caches();
    }

    void set_mode(PrecisionMode mode, double lo = 0.5, double hi = 2.0) {
        mode_ = mode;
        lo_ = lo;
        hi_ = hi;
    }

    // ---- expectations ----

    double e_alpha(int i) const { return factor_mean(alpha_[i]); }
    double e_beta(int j) const { return factor_mean(beta_[j]); }
    double e_tau() const { return tau_.mean(); }

    /// Expected squared residual of one entry under the factorized posterior.
    double expected_sq_residual(int i, int j, double r) const {
        double resid = r - (mu_gamma_(i) + mu_eta_(j));
        double esr = resid * resid + 1.0 / lam_gamma_(i) + 1.0 / lam_eta_(j);
        if (flags_.item_features_active()) {
            esr -= 2.0 * resid * es_.row(i).dot(mu_v_.row(j));
            esr += (m2s_[i].cwiseProduct(m2v(j))).sum();
        }
        return esr;
    }

    // ---- block updates ----

    void update_hyper_user() { update_hyper(mu_u_, cov_u_, nw_user_); }
    void update_hyper_item() { update_hyper(mu_v_, cov_v_, nw_item_); }
    void update_hyper_side() { update_hyper(mu_w_, cov_w_, nw_side_); }

    void update_user_factor(int i) {
        Mat p = nw_user_.e_lambda;
        Vec rhs = nw_user_.e_lambda_mean;
        const double coef = e_tau() * e_alpha(i);
        const int ni = train_.count_for_user(i);
        for (const auto& [j, r] : train_.by_user(i)) {
            double w = coef * e_beta(j);
            double resid = r - (mu_gamma_(i) + mu_eta_(j));
            Vec lin = resid * mu_v_.row(j).transpose();
            if (flags_.side_features && ni > 0)
                lin -= m2v(j) * side_mean_sum_.row(i).transpose() / static_cast<double>(ni);
            rhs.noalias() += w * lin;
            p.noalias() += w * m2v(j);
        }
        assign_factor(mu_u_, cov_u_, logdet_u_, i, p, rhs);
        refresh_user_composite(i);
    }

    void update_item_factor(int j) {
        Mat p = nw_item_.e_lambda;
        Vec rhs = nw_item_.e_lambda_mean;
        const double coef = e_tau() * e_beta(j);
        for (const auto& [i, r] : train_.by_item(j)) {
            double w = coef * e_alpha(i);
            double resid = r - (mu_gamma_(i) + mu_eta_(j));
            rhs.noalias() += (w * resid) * es_.row(i).transpose();
            p.noalias() += w * m2s_[i];
        }
        assign_factor(mu_v_, cov_v_, logdet_v_, j, p, rhs);
    }

    void update_user_bias(int i) {
        double lam = prior_.lambda_gamma;
        double num = prior_.lambda_gamma * prior_.mu_gamma;
        const double coef = e_tau() * e_alpha(i);
        for (const auto& [j, r] : train_.by_user(i)) {
            double w = coef * e_beta(j);
            lam += w;
            num += w * (r - (mu_eta_(j) + es_.row(i).dot(mu_v_.row(j))));
        }
        mu_gamma_(i) = num / lam;
        lam_gamma_(i) = lam;
    }

    void update_item_bias(int j) {
        double lam = prior_.lambda_eta;
        double num = prior_.lambda_eta * prior_.mu_eta;
        const double coef = e_tau() * e_beta(j);
        for (const auto& [i, r] : train_.by_item(j)) {
            double w = coef * e_alpha(i);
            lam += w;
            num += w * (r - (mu_gamma_(i) + es_.row(i).dot(mu_v_.row(j))));
        }
        mu_eta_(j) = num / lam;
        lam_eta_(j) = lam;
    }

    void update_user_precision(int i) {
        double rate = prior_.b_user;
        for (const auto& [j, r] : train_.by_user(i))
            rate += 0.5 * e_tau() * e_beta(j) * expected_sq_residual(i, j, r);
        alpha_[i] = {prior_.a_user + 0.5 * train_.count_for_user(i), rate};
    }

    void update_item_precision(int j) {
        double rate = prior_.b_item;
        for (const auto& [i, r] : train_.by_item(j))
            rate += 0.5 * e_tau() * e_alpha(i) * expected_sq_residual(i, j, r);
        beta_[j] = {prior_.a_item + 0.5 * train_.count_for_item(j), rate};
    }

    void update_tau() {
        double rate = prior_.b_tau;
        for (const auto& e : train_.entries())
            rate += 0.5 * e_alpha(e.user) * e_beta(e.item) *
                    expected_sq_residual(e.user, e.item, e.value);
        tau_ = {prior_.a_tau + 0.5 * static_cast<double>(train_.num_entries()), rate};
    }

    /// Side phase; sequential because each accepted mean shifts every
    /// rater's combined vector.
    void update_side_factors() {
        if (!flags_.side_features) return;
        const int n = train_.num_users();
        // per-user pieces that stay fixed while the W block sweeps
        std::vector<Mat> g(n);
        RowMat c = RowMat::Zero(n, d_);
        for (int i = 0; i < n; ++i) {
            if (train_.by_user(i).empty()) continue;
            Mat gi = Mat::Zero(d_, d_);
            Vec ci = Vec::Zero(d_);
            for (const auto& [j, r] : train_.by_user(i)) {
                double eb = e_beta(j);
                gi.noalias() += eb * m2v(j);
                ci.noalias() += (eb * (r - (mu_gamma_(i) + mu_eta_(j)))) * mu_v_.row(j).transpose();
            }
            g[i] = std::move(gi);
            c.row(i) = ci.transpose();
        }
        const double etau = e_tau();
        for (int m = 0; m < train_.num_items(); ++m) {
            Mat p = nw_side_.e_lambda;
            Vec rhs = nw_side_.e_lambda_mean;
            for (const auto& [i, r] : train_.by_item(m)) {
                const double ni = static_cast<double>(train_.count_for_user(i));
                const double w = etau * e_alpha(i);
                p.noalias() += (w / (ni * ni)) * g[i];
                Vec rest = (side_mean_sum_.row(i) - mu_w_.row(m)).transpose() / ni;
                if (flags_.user_features) rest += mu_u_.row(i).transpose();
                rhs.noalias() += (w / ni) * (c.row(i).transpose() - g[i] * rest);
            }
            Vec old_mean = mu_w_.row(m).transpose();
            Mat old_cov = cov_w_[m];
            assign_factor(mu_w_, cov_w_, logdet_w_, m, p, rhs);
            Eigen::RowVectorXd dmean = mu_w_.row(m) - old_mean.transpose();
            Mat dcov = cov_w_[m] - old_cov;
            for (const auto& [i, r] : train_.by_item(m)) {
                side_mean_sum_.row(i) += dmean;
                side_cov_sum_[i] += dcov;
                refresh_user_composite(i);
            }
        }
    }

    /// One full parameter update in the documented order: hyper-parameters
    /// jointly, users, items, side features, global precision.
    void full_update() {
        if (flags_.user_features) update_hyper_user();
        if (flags_.item_features_active()) update_hyper_item();
        if (flags_.side_features) update_hyper_side();
        parallel_for(train_.num_users(), cfg_.threads, [this](int begin, int end) {
            for (int i = begin; i < end; ++i) {
                if (flags_.user_features) update_user_factor(i);
                update_user_bias(i);
                if (mode_ != PrecisionMode::Constant) update_user_precision(i);
            }
        });
        parallel_for(train_.num_items(), cfg_.threads, [this](int begin, int end) {
            for (int j = begin; j < end; ++j) {
                if (flags_.item_features_active()) update_item_factor(j);
                update_item_bias(j);
                if (mode_ != PrecisionMode::Constant) update_item_precision(j);
            }
        });
        update_side_factors();
        update_tau();
    }

    // ---- lower bound ----

    bool elbo_available() const { return mode_ != PrecisionMode::Truncated; }

    ElboTerms elbo() const {
        if (!elbo_available())
            throw ConfigError("ELBO unavailable in Truncated mode (normalizers not tractable)");
        ElboTerms t;
        t.rating = rating_term(train_);

        const bool robust = mode_ == PrecisionMode::Robust;
        // feature priors and entropies per family
        if (flags_.user_features)
            t.feature_priors += family_feature_prior(mu_u_, cov_u_, nw_user_);
        if (flags_.item_features_active())
            t.feature_priors += family_feature_prior(mu_v_, cov_v_, nw_item_);
        if (flags_.side_features)
            t.feature_priors += family_feature_prior(mu_w_, cov_w_, nw_side_);

        for (int i = 0; i < train_.num_users(); ++i)
            t.bias_priors += bias_prior_term(mu_gamma_(i), lam_gamma_(i), prior_.mu_gamma,
                                             prior_.lambda_gamma);
        for (int j = 0; j < train_.num_items(); ++j)
            t.bias_priors += bias_prior_term(mu_eta_(j), lam_eta_(j), prior_.mu_eta,
                                             prior_.lambda_eta);

        if (robust) {
            for (const auto& f : alpha_)
                t.precision_priors += gamma_prior_term(f, prior_.a_user, prior_.b_user);
            for (const auto& f : beta_)
                t.precision_priors += gamma_prior_term(f, prior_.a_item, prior_.b_item);
        }
        t.precision_priors += gamma_prior_term(tau_, prior_.a_tau, prior_.b_tau);

        if (flags_.user_features) t.hyper_priors += hyper_prior_term(nw_user_);
        if (flags_.item_features_active()) t.hyper_priors += hyper_prior_term(nw_item_);
        if (flags_.side_features) t.hyper_priors += hyper_prior_term(nw_side_);

        if (flags_.user_features) t.entropy += gaussian_block_entropy(logdet_u_);
        if (flags_.item_features_active()) t.entropy += gaussian_block_entropy(logdet_v_);
        if (flags_.side_features) t.entropy += gaussian_block_entropy(logdet_w_);
        for (int i = 0; i < train_.num_users(); ++i)
            t.entropy += 0.5 - 0.5 * std::log(lam_gamma_(i));
        for (int j = 0; j < train_.num_items(); ++j)
            t.entropy += 0.5 - 0.5 * std::log(lam_eta_(j));
        if (robust) {
            for (const auto& f : alpha_) t.entropy += f.entropy();
            for (const auto& f : beta_) t.entropy += f.entropy();
        }
        t.entropy += tau_.entropy();
        if (flags_.user_features) t.entropy += nw_entropy(nw_user_);
        if (flags_.item_features_active()) t.entropy += nw_entropy(nw_item_);
        if (flags_.side_features) t.entropy += nw_entropy(nw_side_);
        return t;
    }

    /// Rating-term-only bound on a held-out entry set (used as the "test
    /// lower bound" curve).
    double rating_term(const SparseRatings& entries) const {
        double acc = 0.0;
        const bool robust = mode_ == PrecisionMode::Robust;
        double elog_tau = tau_.e_log();
        for (const auto& e : entries.entries()) {
            double elog = elog_tau;
            if (robust) elog += alpha_[e.user].e_log() + beta_[e.item].e_log();
            acc += 0.5 * elog - 0.5 * e_tau() * e_alpha(e.user) * e_beta(e.item) *
                                    expected_sq_residual(e.user, e.item, e.value);
        }
        return acc;
    }

    // ---- predictions ----

    double predict_mean(int i, int j) const {
        double r = mu_gamma_(i) + mu_eta_(j);
        if (flags_.item_features_active()) r += es_.row(i).dot(mu_v_.row(j));
        return r;
    }

    double rmse(const SparseRatings& entries) const {
        if (entries.num_entries() == 0) return std::numeric_limits<double>::quiet_NaN();
        double acc = 0.0;
        for (const auto& e : entries.entries()) {
            double d = e.value - predict_mean(e.user, e.item);
            acc += d * d;
        }
        return std::sqrt(acc / static_cast<double>(entries.num_entries()));
    }

    /// Runs full updates until the relative lower-bound change falls under
    /// tolerance (where the bound exists) or max_updates is hit.
    ViResult run(const SparseRatings& test) {
        ViResult result;
        double prev = std::numeric_limits<double>::quiet_NaN();
        for (int t = 1; t <= cfg_.max_updates; ++t) {
            full_update();
            result.updates_run = t;
            ViTraceRow row;
            row.update = t;
            row.elbo_train = elbo_available() ? elbo().total()
                                              : std::numeric_limits<double>::quiet_NaN();
            row.elbo_test = (cfg_.track_test_elbo && elbo_available() && test.num_entries() > 0)
                                ? rating_term(test)
                                : std::numeric_limits<double>::quiet_NaN();
            row.rmse_train = rmse(train_);
            row.rmse_test = rmse(test);
            result.curve.push_back(row);
            if (!std::isnan(row.rmse_test) &&
                (result.best_test_update < 0 || row.rmse_test < result.best_test_rmse)) {
                result.best_test_rmse = row.rmse_test;
                result.best_test_update = t;
            }
            if (elbo_available()) {
                double cur = row.elbo_train;
                if (!std::isnan(prev) &&
                    std::abs(cur - prev) < cfg_.elbo_rel_tol * std::max(1.0, std::abs(prev)))
                    break;
                prev = cur;
            }
        }
        if (!result.curve.empty()) result.final_elbo = result.curve.back().elbo_train;
        return result;
    }

    // ---- state access (diagnostics and tests) ----

    const RowMat& user_means() const { return mu_u_; }
    const RowMat& item_means() const { return mu_v_; }
    const RowMat& side_means() const { return mu_w_; }
    const std::vector<Mat>& user_covs() const { return cov_u_; }
    const Vec& bias_user_means() const { return mu_gamma_; }
    const Vec& bias_user_precisions() const { return lam_gamma_; }
    const Vec& bias_item_means() const { return mu_eta_; }
    const Vec& bias_item_precisions() const { return lam_eta_; }
    const std::vector<GammaFactor>& alpha_factors() const { return alpha_; }
    const std::vector<GammaFactor>& beta_factors() const { return beta_; }
    const GammaFactor& tau_factor() const { return tau_; }
    const NormalWishartFactor& user_hyper() const { return nw_user_; }
    const NormalWishartFactor& item_hyper() const { return nw_item_; }
    const NormalWishartFactor& side_hyper() const { return nw_side_; }
    PrecisionMode mode() const { return mode_; }

    /// Point snapshot of the factor means (checkpoint / evaluation use).
    FeatureState mean_state() const {
        FeatureState f = FeatureState::zeros(train_.num_users(), train_.num_items(), d_);
        f.U = mu_u_;
        f.V = mu_v_;
        f.W = mu_w_;
        f.gamma = mu_gamma_;
        f.eta = mu_eta_;
        return f;
    }

    PrecisionState mean_precisions() const {
        PrecisionState p = PrecisionState::ones(train_.num_users(), train_.num_items(), mode_,
                                                mode_ == PrecisionMode::Truncated ? lo_ : 0.0,
                                                mode_ == PrecisionMode::Truncated
                                                    ? hi_
                                                    : std::numeric_limits<double>::infinity());
        if (mode_ != PrecisionMode::Constant) {
            for (int i = 0; i < train_.num_users(); ++i) p.alpha(i) = e_alpha(i);
            for (int j = 0; j < train_.num_items(); ++j) p.beta(j) = e_beta(j);
        }
        p.tau = e_tau();
        return p;
    }

    // test hooks: poke a mean, keep the composites coherent
    void set_user_mean(int i, const Vec& mu) {
        mu_u_.row(i) = mu.transpose();
        refresh_user_composite(i);
    }
    void set_item_mean(int j, const Vec& mu) {
        mu_v_.row(j) = mu.transpose();
        refresh_item_composite(j);
    }
    void set_side_mean(int m, const Vec& mu) {
        Eigen::RowVectorXd delta = mu.transpose() - mu_w_.row(m);
        mu_w_.row(m) = mu.transpose();
        for (const auto& [i, r] : train_.by_item(m)) {
            side_mean_sum_.row(i) += delta;
            refresh_user_composite(i);
        }
    }
    void set_bias_means(int i, int j, double g, double e) {
        if (i >= 0) mu_gamma_(i) = g;
        if (j >= 0) mu_eta_(j) = e;
    }
    void set_gamma_factor(int i, GammaFactor f) { alpha_[i] = f; }
    void shrink_all_covariances(double scale) {
        for (auto& c : cov_u_) c *= scale;
        for (auto& c : cov_v_) c *= scale;
        for (auto& c : cov_w_) c *= scale;
        lam_gamma_ /= scale;
        lam_eta_ /= scale;
        rebuild_caches();
    }

    void rebuild_caches() {
        const int n = train_.num_users();
        const int m = train_.num_items();
        side_mean_sum_ = RowMat::Zero(n, d_);
        side_cov_sum_.assign(n, Mat::Zero(d_, d_));
        if (flags_.side_features)
            for (int i = 0; i < n; ++i)
                for (const auto& [k, r] : train_.by_user(i)) {
                    side_mean_sum_.row(i) += mu_w_.row(k);
                    side_cov_sum_[i] += cov_w_[k];
                }
        es_ = RowMat::Zero(n, d_);
        m2s_.assign(n, Mat::Zero(d_, d_));
        for (int i = 0; i < n; ++i) refresh_user_composite(i);
        m2v_.assign(m, Mat::Zero(d_, d_));
        for (int j = 0; j < m; ++j) refresh_item_composite(j);
    }

  private:
    double factor_mean(const GammaFactor& f) const {
        switch (mode_) {
            case PrecisionMode::Constant: return 1.0;
            case PrecisionMode::Robust: return f.mean();
            case PrecisionMode::Truncated:
                return cfg_.truncated_policy == ViConfig::TruncatedPolicy::ClampedPoint
                           ? truncated_gamma_point(f.shape, f.rate, lo_, hi_)
                           : truncated_gamma_mean(f.shape, f.rate, lo_, hi_);
        }
        return 1.0;
    }

    const Mat& m2v(int j) const { return m2v_[j]; }

    // E[S_i] and E[S_i S_i^T] from the family caches.
    void refresh_user_composite(int i) {
        Vec mean = Vec::Zero(d_);
        Mat extra = Mat::Zero(d_, d_);
        if (flags_.user_features) {
            mean += mu_u_.row(i);
            extra += cov_u_[i];
        }
        const int ni = train_.count_for_user(i);
        if (flags_.side_features && ni > 0) {
            double inv = 1.0 / static_cast<double>(ni);
            mean += inv * side_mean_sum_.row(i).transpose();
            extra += (inv * inv) * side_cov_sum_[i];
        }
        es_.row(i) = mean.transpose();
        m2s_[i] = extra + mean * mean.transpose();
    }

    void refresh_item_composite(int j) { m2v_[j] = cov_v_[j] + mu_v_.row(j).transpose() * mu_v_.row(j); }

    void assign_factor(RowMat& means, std::vector<Mat>& covs, Vec& logdets, int k, const Mat& p,
                       const Vec& rhs) {
        auto llt = chol_spd(p, "variational factor precision");
        means.row(k) = llt.solve(rhs).transpose();
        covs[k] = llt.solve(Mat::Identity(d_, d_));
        logdets(k) = logdet_from_llt(llt);
        if (&means == &mu_v_) refresh_item_composite(k);
    }

    void update_hyper(const RowMat& means, const std::vector<Mat>& covs,
                      NormalWishartFactor& nw) {
        const double k = static_cast<double>(means.rows());
        Vec bar = k > 0 ? Vec(means.colwise().mean()) : Vec(Vec::Zero(d_));
        nw.mean = (k * bar + prior_.beta0 * prior_.mu0) / (k + prior_.beta0);
        nw.kappa = k + prior_.beta0;
        nw.dof = prior_.nu0 + k;
        Mat w_inv = w0_inv_;
        for (int r = 0; r < means.rows(); ++r) {
            Vec dev = means.row(r).transpose() - bar;
            w_inv.noalias() += dev * dev.transpose();
            w_inv += covs[r];
        }
        Vec dev0 = bar - prior_.mu0;
        w_inv.noalias() += (k * prior_.beta0 / (k + prior_.beta0)) * dev0 * dev0.transpose();
        nw.scale = spd_inverse(w_inv, "hyper factor scale");
        nw.refresh();
    }

    // E_Q[sum_k log p(feature_k | mu_F, Lambda_F)], 2*pi constants dropped.
    double family_feature_prior(const RowMat& means, const std::vector<Mat>& covs,
                                const NormalWishartFactor& nw) const {
        double acc = 0.0;
        for (int r = 0; r < means.rows(); ++r) {
            Vec dev = means.row(r).transpose() - nw.mean;
            double quad = dev.dot(nw.e_lambda * dev) + (nw.e_lambda.cwiseProduct(covs[r])).sum() +
                          d_ / nw.kappa;
            acc += 0.5 * nw.e_logdet - 0.5 * quad;
        }
        return acc;
    }

    static double bias_prior_term(double mu, double lam, double mu0, double lam0) {
        return 0.5 * std::log(lam0) - 0.5 * lam0 * (1.0 / lam + (mu - mu0) * (mu - mu0));
    }

    static double gamma_prior_term(const GammaFactor& f, double a0, double b0) {
        return a0 * std::log(b0) - std::lgamma(a0) + (a0 - 1.0) * f.e_log() - b0 * f.mean();
    }

    double hyper_prior_term(const NormalWishartFactor& nw) const {
        Vec dev0 = nw.mean - prior_.mu0;
        double mu_part = 0.5 * (d_ * std::log(prior_.beta0) + nw.e_logdet) -
                         0.5 * prior_.beta0 * (dev0.dot(nw.e_lambda * dev0) + d_ / nw.kappa);
        double lambda_part = 0.5 * (prior_.nu0 - d_ - 1.0) * nw.e_logdet -
                             0.5 * (w0_inv_.cwiseProduct(nw.e_lambda)).sum() - prior_wishart_logz_;
        return mu_part + lambda_part;
    }

    double gaussian_block_entropy(const Vec& logdets) const {
        double acc = 0.0;
        for (int k = 0; k < logdets.size(); ++k) acc += -0.5 * logdets(k) + 0.5 * d_;
        return acc;
    }

    static double log_multigamma(double x, int d) {
        double acc = 0.25 * d * (d - 1) * std::log(M_PI);
        for (int i = 1; i <= d; ++i) acc += std::lgamma(x + 0.5 * (1 - i));
        return acc;
    }

    double nw_entropy(const NormalWishartFactor& nw) const {
        double mu_part = 0.5 * d_ - 0.5 * (d_ * std::log(nw.kappa) + nw.e_logdet);
        double log_z = 0.5 * nw.dof * d_ * std::log(2.0) + 0.5 * nw.dof * nw.logdet_scale +
                       log_multigamma(0.5 * nw.dof, d_);
        double lambda_part = -0.5 * (nw.dof - d_ - 1.0) * nw.e_logdet + 0.5 * nw.dof * d_ + log_z;
        return mu_part + lambda_part;
    }

    const SparseRatings& train_;
    PriorConfig prior_;
    ModelFlags flags_;
    ViConfig cfg_;
    int d_;
    Mat w0_inv_;
    double prior_wishart_logz_ = 0.0;
    PrecisionMode mode_ = PrecisionMode::Robust;
    double lo_ = 0.5, hi_ = 2.0;

    RowMat mu_u_, mu_v_, mu_w_;
    std::vector<Mat> cov_u_, cov_v_, cov_w_;
    Vec logdet_u_, logdet_v_, logdet_w_;
    Vec mu_gamma_, mu_eta_, lam_gamma_, lam_eta_;
    std::vector<GammaFactor> alpha_, beta_;
    GammaFactor tau_;
    NormalWishartFactor nw_user_, nw_item_, nw_side_;

    // composites
    RowMat side_mean_sum_;              // sum of rated side means per user
    std::vector<Mat> side_cov_sum_;     // and of their covariances
    RowMat es_;                         // E[S_i]
    std::vector<Mat> m2s_;              // E[S_i S_i^T]
    std::vector<Mat> m2v_;              // E[V_j V_j^T]
};

}  // namespace bcpmf

#endif  // BCPMF_VI_HPP
