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

#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "bcpmf/gibbs.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace bcpmf;
using namespace bcpmf::testing;

namespace {

PriorConfig tiny_prior(int d, ModelFlags flags) {
    PriorConfig prior = PriorConfig::defaults(d);
    prior.flags = flags;
    return prior;
}

GibbsSampler make_sampler(const SparseRatings& r, const PriorConfig& prior, FeatureState feats,
                          PrecisionState prec, GibbsConfig cfg = {}) {
    return GibbsSampler(r, prior, std::move(feats), std::move(prec), cfg);
}

}  // namespace

TEST_CASE("hyper conditional") {
    PriorConfig prior = PriorConfig::defaults(1);
    prior.beta0 = 1.0;
    prior.nu0 = 2.0;
    prior.w0 = 1.5 * Mat::Identity(1, 1);
    Mat w0_inv = spd_inverse(prior.w0);

    SECTION("empty family recovers the prior with one extra dof") {
        RowMat empty(0, 1);
        auto c = hyper_conditional(empty, prior, w0_inv);
        CHECK(c.dof == Catch::Approx(prior.nu0 + 1));
        CHECK(c.kappa == Catch::Approx(prior.beta0));
        CHECK(c.mean(0) == Catch::Approx(0.0));
        CHECK(c.scale(0, 0) == Catch::Approx(1.5));
    }
    SECTION("features at the prior mean leave the mean untouched") {
        prior.mu0 = Vec::Constant(1, 0.7);
        RowMat feats(3, 1);
        feats << 0.7, 0.7, 0.7;
        auto c = hyper_conditional(feats, prior, w0_inv);
        CHECK(c.mean(0) == Catch::Approx(0.7));
        CHECK(c.scale(0, 0) == Catch::Approx(1.5));  // zero scatter
    }
    SECTION("two-point hand computation") {
        RowMat feats(2, 1);
        feats << 1.0, 3.0;
        auto c = hyper_conditional(feats, prior, w0_inv);
        CHECK(c.mean(0) == Catch::Approx(4.0 / 3.0));
        CHECK(c.kappa == Catch::Approx(3.0));
        CHECK(c.dof == Catch::Approx(prior.nu0 + 2 + 1));
        // scatter = (1-2)^2 + (3-2)^2 = 2; deviation term = (2*1/3) * 4
        double w_inv = 1.0 / 1.5 + 2.0 + (2.0 / 3.0) * 4.0;
        CHECK(c.scale(0, 0) == Catch::Approx(1.0 / w_inv));
    }
    SECTION("matches the textbook scatter identity at d=2") {
        RngStream rng(50, 0);
        PriorConfig p2 = PriorConfig::defaults(2);
        p2.mu0 << 0.3, -0.2;
        p2.beta0 = 1.7;
        RowMat feats(5, 2);
        for (int i = 0; i < feats.size(); ++i) feats(i / 2, i % 2) = rng.normal();
        auto c = hyper_conditional(feats, p2, spd_inverse(p2.w0));
        // alternate algebra: sum U U^T - N Ubar Ubar^T
        Vec bar = feats.colwise().mean();
        Mat scatter = Mat::Zero(2, 2);
        for (int i = 0; i < 5; ++i)
            scatter += feats.row(i).transpose() * feats.row(i);
        scatter -= 5.0 * bar * bar.transpose();
        Vec dev = bar - p2.mu0;
        Mat w_inv = Mat::Identity(2, 2) + scatter +
                    (5.0 * 1.7 / (5.0 + 1.7)) * dev * dev.transpose();
        CHECK((spd_inverse(c.scale) - w_inv).cwiseAbs().maxCoeff() < 1e-10);
    }
}

TEST_CASE("user feature conditional hand case") {
    // d=1, one rating, no side features: precision 1 + tau*alpha*beta*V^2 = 5,
    // mean = (1/5) * tau*alpha*beta*V*(r - gamma - eta) = 1.2
    ModelFlags flags{.user_features = true, .side_features = false};
    SparseRatings r(1, 1, {{0, 0, 3.0}});
    FeatureState f = FeatureState::zeros(1, 1, 1);
    f.V(0, 0) = 2.0;
    PrecisionState prec = PrecisionState::constant(1, 1);
    GibbsSampler s = make_sampler(r, tiny_prior(1, flags), f, prec);
    auto c = s.user_feature_conditional(0);
    CHECK(c.precision(0, 0) == Catch::Approx(5.0));
    CHECK(c.mean(0) == Catch::Approx(1.2));
}

TEST_CASE("side feature conditional hand case") {
    // single user with one rating on its own item, delta_U = 0:
    // precision 1 + tau*alpha*beta*V^2/n^2 = 2, mean = (r - gamma - eta)/2
    ModelFlags flags{.user_features = false, .side_features = true};
    SparseRatings r(1, 1, {{0, 0, 2.5}});
    FeatureState f = FeatureState::zeros(1, 1, 1);
    f.V(0, 0) = 1.0;
    f.gamma(0) = 0.25;
    f.eta(0) = 0.25;
    GibbsSampler s = make_sampler(r, tiny_prior(1, flags), f, PrecisionState::constant(1, 1));
    auto c = s.side_feature_conditional(0);
    CHECK(c.precision(0, 0) == Catch::Approx(2.0));
    CHECK(c.mean(0) == Catch::Approx((2.5 - 0.5) / 2.0));
}

TEST_CASE("bias conditional hand case") {
    // single rating, residual 2: precision 2, mean 1
    ModelFlags flags{.user_features = true, .side_features = false};
    SparseRatings r(1, 1, {{0, 0, 2.0}});
    FeatureState f = FeatureState::zeros(1, 1, 1);
    GibbsSampler s = make_sampler(r, tiny_prior(1, flags), f, PrecisionState::constant(1, 1));
    auto c = s.user_bias_conditional(0);
    CHECK(c.precision == Catch::Approx(2.0));
    CHECK(c.mean == Catch::Approx(1.0));
}

TEST_CASE("precision conditional hand cases") {
    ModelFlags flags{.user_features = true, .side_features = false};
    SparseRatings r(2, 2, {{0, 0, 3.0}, {0, 1, 3.0}, {1, 0, 3.0}, {1, 1, 3.0}});
    FeatureState f = FeatureState::zeros(2, 2, 1);
    PrecisionState prec = PrecisionState::ones(2, 2, PrecisionMode::Robust);
    GibbsSampler s = make_sampler(r, tiny_prior(1, flags), f, prec);
    SECTION("tau shape counts all entries") {
        auto c = s.tau_conditional();
        CHECK(c.shape == Catch::Approx(2.0 + 2.0));
    }
    SECTION("zero residuals leave the prior rate") {
        s.features_mut().gamma = Vec::Constant(2, 3.0);  // perfect fit via biases
        auto c = s.user_precision_conditional(0);
        CHECK(c.shape == Catch::Approx(2.0 + 1.0));
        CHECK(c.rate == Catch::Approx(2.0));
    }
}

TEST_CASE("prior recovery for unobserved entities") {
    ModelFlags flags{.user_features = true, .side_features = true};
    // user 1 and item 1 have no ratings; item 2 unrated so its side vector too
    SparseRatings r(2, 3, {{0, 0, 3.0}, {0, 2, 4.0}});
    RngStream rng(51, 0);
    FeatureState f = testing::random_features(2, 3, 2, rng);
    PriorConfig prior = tiny_prior(2, flags);
    GibbsSampler s = make_sampler(r, prior, f, PrecisionState::constant(2, 3));
    HyperState h = HyperState::standard(2);
    h.user.mu << 0.4, -0.3;
    h.user.lambda << 2, 0.2, 0.2, 1;
    h.item.mu << 0.1, 0.1;
    h.side.mu << -0.5, 0.2;
    s.set_hypers(h);

    auto cu = s.user_feature_conditional(1);
    CHECK((cu.mean - h.user.mu).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((cu.precision - h.user.lambda).cwiseAbs().maxCoeff() < 1e-12);

    auto ci = s.item_feature_conditional(1);
    CHECK((ci.mean - h.item.mu).cwiseAbs().maxCoeff() < 1e-12);

    auto cs = s.side_feature_conditional(1);
    CHECK((cs.mean - h.side.mu).cwiseAbs().maxCoeff() < 1e-12);

    auto cb = s.user_bias_conditional(1);
    CHECK(cb.mean == Catch::Approx(prior.mu_gamma));
    CHECK(cb.precision == Catch::Approx(prior.lambda_gamma));
}

TEST_CASE("conditionals match the log-joint oracle") {
    ModelFlags flags{.user_features = true, .side_features = true};
    RngStream rng(52, 0);
    const int n = 4, m = 3, d = 2;
    SparseRatings r = testing::random_ratings(n, m, 0.6, rng);
    FeatureState f = testing::random_features(n, m, d, rng);
    PriorConfig prior = tiny_prior(d, flags);
    prior.mu_gamma = 0.1;
    prior.lambda_gamma = 0.8;
    PrecisionState prec = PrecisionState::ones(n, m, PrecisionMode::Robust);
    for (int i = 0; i < n; ++i) prec.alpha(i) = 0.4 + rng.uniform();
    for (int j = 0; j < m; ++j) prec.beta(j) = 0.4 + rng.uniform();
    prec.tau = 1.3;

    GibbsSampler s = make_sampler(r, prior, f, prec);
    HyperState h;
    h.user = {Vec::Constant(d, 0.2), 2.0 * Mat::Identity(d, d)};
    h.item = {Vec::Constant(d, -0.1), 1.5 * Mat::Identity(d, d)};
    h.side = {Vec::Constant(d, 0.05), Mat::Identity(d, d)};
    s.set_hypers(h);

    // oracle state mirrors the sampler's
    FeatureState fs = s.features();
    PrecisionState ps = s.precisions();
    auto joint = [&] { return log_joint(fs, ps, h, r, prior, flags); };

    SECTION("user feature") {
        auto engine = s.user_feature_conditional(1);
        auto fit = fit_gaussian_conditional(
            d, [&](const Vec& x) { fs.U.row(1) = x.transpose(); }, joint);
        CHECK((fit.precision - engine.precision).cwiseAbs().maxCoeff() < 1e-9);
        CHECK((fit.mean - engine.mean).cwiseAbs().maxCoeff() < 1e-9);
    }
    SECTION("item feature") {
        auto engine = s.item_feature_conditional(2);
        auto fit = fit_gaussian_conditional(
            d, [&](const Vec& x) { fs.V.row(2) = x.transpose(); }, joint);
        CHECK((fit.precision - engine.precision).cwiseAbs().maxCoeff() < 1e-9);
        CHECK((fit.mean - engine.mean).cwiseAbs().maxCoeff() < 1e-9);
    }
    SECTION("side feature") {
        auto engine = s.side_feature_conditional(0);
        auto fit = fit_gaussian_conditional(
            d, [&](const Vec& x) { fs.W.row(0) = x.transpose(); }, joint);
        CHECK((fit.precision - engine.precision).cwiseAbs().maxCoeff() < 1e-9);
        CHECK((fit.mean - engine.mean).cwiseAbs().maxCoeff() < 1e-9);
    }
    SECTION("user bias") {
        auto engine = s.user_bias_conditional(0);
        auto fit = fit_gaussian_conditional(
            1, [&](const Vec& x) { fs.gamma(0) = x(0); }, joint);
        CHECK(fit.precision(0, 0) == Catch::Approx(engine.precision).margin(1e-9));
        CHECK(fit.mean(0) == Catch::Approx(engine.mean).margin(1e-9));
    }
    SECTION("user precision factor") {
        auto engine = s.user_precision_conditional(2);
        auto fit = fit_gamma_conditional([&](double a) {
            ps.alpha(2) = a;
            double v = joint();
            ps.alpha(2) = s.precisions().alpha(2);
            return v;
        });
        CHECK(fit.shape == Catch::Approx(engine.shape).margin(1e-9));
        CHECK(fit.rate == Catch::Approx(engine.rate).margin(1e-9));
    }
    SECTION("global precision") {
        auto engine = s.tau_conditional();
        auto fit = fit_gamma_conditional([&](double t) {
            ps.tau = t;
            double v = joint();
            ps.tau = s.precisions().tau;
            return v;
        });
        CHECK(fit.shape == Catch::Approx(engine.shape).margin(1e-9));
        CHECK(fit.rate == Catch::Approx(engine.rate).margin(1e-8));
    }
}

TEST_CASE("item conditional reduces to the classic form without side features") {
    ModelFlags flags{.user_features = true, .side_features = false};
    RngStream rng(53, 0);
    SparseRatings r = testing::random_ratings(4, 3, 0.6, rng);
    FeatureState f = testing::random_features(4, 3, 2, rng);
    GibbsSampler s = make_sampler(r, tiny_prior(2, flags), f, PrecisionState::constant(4, 3));
    auto c = s.item_feature_conditional(0);
    // classic item conditional assembled directly from U
    Mat p = Mat::Identity(2, 2);
    Vec rhs = Vec::Zero(2);
    for (const auto& [i, rv] : r.by_item(0)) {
        Vec u = f.U.row(i);
        p += u * u.transpose();
        rhs += (rv - f.gamma(i) - f.eta(0)) * u;
    }
    CHECK((c.precision - p).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((c.mean - Vec(p.ldlt().solve(rhs))).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("huge user precision drives the conditional to least squares") {
    ModelFlags flags{.user_features = true, .side_features = false};
    SparseRatings r(1, 3, {{0, 0, 2.0}, {0, 1, 1.0}, {0, 2, 3.0}});
    RngStream rng(54, 0);
    FeatureState f = testing::random_features(1, 3, 2, rng);
    f.gamma.setZero();
    f.eta.setZero();
    PrecisionState prec = PrecisionState::ones(1, 3, PrecisionMode::Robust);
    prec.alpha(0) = 1e8;
    GibbsSampler s = make_sampler(r, tiny_prior(2, flags), f, prec);
    auto c = s.user_feature_conditional(0);
    // normal equations of the user's own ratings
    Mat vtv = Mat::Zero(2, 2);
    Vec vtr = Vec::Zero(2);
    for (const auto& [j, rv] : r.by_user(0)) {
        Vec v = f.V.row(j);
        vtv += v * v.transpose();
        vtr += rv * v;
    }
    Vec ls = vtv.ldlt().solve(vtr);
    CHECK((c.mean - ls).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("huge bias prior precision pins the bias at its prior mean") {
    ModelFlags flags{.user_features = true, .side_features = false};
    SparseRatings r(1, 1, {{0, 0, 5.0}});
    PriorConfig prior = tiny_prior(1, flags);
    prior.lambda_gamma = 1e9;
    prior.mu_gamma = 0.25;
    GibbsSampler s = make_sampler(r, prior, FeatureState::zeros(1, 1, 1),
                                  PrecisionState::constant(1, 1));
    auto c = s.user_bias_conditional(0);
    CHECK(c.mean == Catch::Approx(0.25).margin(1e-6));
}

TEST_CASE("chain mechanics") {
    ModelFlags flags{.user_features = true, .side_features = true};
    RngStream rng(55, 0);
    const int n = 6, m = 5;
    SparseRatings r = testing::random_ratings(n, m, 0.5, rng);
    SparseRatings target = testing::random_ratings(n, m, 0.2, rng);
    PriorConfig prior = tiny_prior(2, flags);
    FeatureState init = testing::random_features(n, m, 2, rng, 0.1);
    PrecisionState prec = PrecisionState::ones(n, m, PrecisionMode::Robust);

    SECTION("one sample equals one composed sweep") {
        GibbsConfig cfg;
        cfg.num_samples = 1;
        cfg.seed = 99;
        GibbsSampler a = make_sampler(r, prior, init, prec, cfg);
        GibbsResult res = a.run(target);

        GibbsSampler b = make_sampler(r, prior, init, prec, cfg);
        b.sweep();
        auto preds = b.predictions(target.entries());
        REQUIRE(res.target_prediction.count == 1);
        for (std::size_t k = 0; k < preds.size(); ++k)
            CHECK(res.target_prediction.mean(k) == Catch::Approx(preds[k]).margin(1e-14));
    }
    SECTION("conditional-mean mode is a deterministic coordinate scheme") {
        GibbsConfig cfg;
        cfg.num_samples = 5;
        cfg.use_conditional_means = true;
        cfg.seed = 1;
        GibbsSampler a = make_sampler(r, prior, init, prec, cfg);
        GibbsSampler b = make_sampler(r, prior, init, prec, cfg);
        a.sweep();
        b.sweep();
        CHECK((a.features().U - b.features().U).cwiseAbs().maxCoeff() == 0.0);
        CHECK((a.precisions().alpha - b.precisions().alpha).cwiseAbs().maxCoeff() == 0.0);
    }
    SECTION("same seed reproduces the trace, any thread count") {
        GibbsConfig cfg;
        cfg.num_samples = 4;
        cfg.seed = 31;
        GibbsSampler a = make_sampler(r, prior, init, prec, cfg);
        GibbsConfig cfg4 = cfg;
        cfg4.threads = 4;
        GibbsSampler b = make_sampler(r, prior, init, prec, cfg4);
        GibbsResult ra = a.run(target);
        GibbsResult rb = b.run(target);
        for (std::size_t k = 0; k < ra.trace.size(); ++k) {
            CHECK(ra.trace[k].rmse_train == rb.trace[k].rmse_train);
            CHECK(ra.trace[k].tau == rb.trace[k].tau);
        }
        CHECK((a.features().U - b.features().U).cwiseAbs().maxCoeff() == 0.0);
    }
    SECTION("support invariants hold across sweeps") {
        GibbsConfig cfg;
        cfg.seed = 7;
        PrecisionState tprec = PrecisionState::ones(n, m, PrecisionMode::Truncated, 0.5, 2.0);
        GibbsSampler s = make_sampler(r, prior, init, tprec, cfg);
        for (int t = 0; t < 20; ++t) {
            s.sweep();
            CHECK(s.precisions().alpha.minCoeff() > 0.5);
            CHECK(s.precisions().alpha.maxCoeff() < 2.0);
            CHECK(s.precisions().beta.minCoeff() > 0.5);
            CHECK(s.precisions().beta.maxCoeff() < 2.0);
            CHECK(s.precisions().tau > 0.0);
            Eigen::LLT<Mat> llt(s.hypers().user.lambda);
            CHECK(llt.info() == Eigen::Success);
        }
    }
}

TEST_CASE("exchangeability under transposition") {
    // delta_W = 0 and fully symmetric priors: the chain run on the transposed
    // matrix with swapped streams and the swapped scan order must produce the
    // exact role-swapped trajectory.
    ModelFlags flags{.user_features = true, .side_features = false};
    RngStream rng(56, 0);
    const int n = 5, m = 4, d = 2;
    SparseRatings r = testing::random_ratings(n, m, 0.6, rng);
    PriorConfig prior = tiny_prior(d, flags);
    prior.mu_gamma = prior.mu_eta = 0.05;
    prior.lambda_gamma = prior.lambda_eta = 0.9;

    FeatureState init = testing::random_features(n, m, d, rng, 0.2);
    init.W.setZero();
    PrecisionState prec = PrecisionState::ones(n, m, PrecisionMode::Robust);

    SparseRatings rt = r.transpose();
    FeatureState init_t = FeatureState::zeros(m, n, d);
    init_t.U = init.V;
    init_t.V = init.U;
    init_t.gamma = init.eta;
    init_t.eta = init.gamma;
    PrecisionState prec_t = PrecisionState::ones(m, n, PrecisionMode::Robust);

    GibbsConfig cfg;
    cfg.num_samples = 6;
    cfg.seed = 123;
    GibbsConfig cfg_t = cfg;
    cfg_t.items_first = true;
    cfg_t.mirror_streams = true;

    GibbsSampler a = make_sampler(r, prior, init, prec, cfg);
    GibbsSampler b = make_sampler(rt, prior, init_t, prec_t, cfg_t);
    for (int t = 0; t < 6; ++t) {
        a.sweep();
        b.sweep();
    }
    CHECK((a.features().U - b.features().V).cwiseAbs().maxCoeff() == 0.0);
    CHECK((a.features().V - b.features().U).cwiseAbs().maxCoeff() == 0.0);
    CHECK((a.features().gamma - b.features().eta).cwiseAbs().maxCoeff() == 0.0);
    CHECK((a.precisions().alpha - b.precisions().beta).cwiseAbs().maxCoeff() == 0.0);
    CHECK(a.precisions().tau == b.precisions().tau);
    CHECK((a.hypers().user.lambda - b.hypers().item.lambda).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("stationarity smoke test") {
    // Data drawn from the model itself, chain initialized at the generating
    // parameters: the per-sweep training RMSE must show no trend.
    ModelFlags flags{.user_features = true, .side_features = false};
    RngStream rng(57, 0);
    const int n = 15, m = 12, d = 2;
    PriorConfig prior = tiny_prior(d, flags);

    FeatureState truth = FeatureState::zeros(n, m, d);
    RngStream gen(58, 0);
    for (int i = 0; i < n; ++i) {
        truth.gamma(i) = gen.normal();
        for (int t = 0; t < d; ++t) truth.U(i, t) = gen.normal();
    }
    for (int j = 0; j < m; ++j) {
        truth.eta(j) = gen.normal();
        for (int t = 0; t < d; ++t) truth.V(j, t) = gen.normal();
    }
    std::vector<RatingEntry> es;
    SparseRatings scaffold(n, m, {});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j)
            if (gen.uniform() < 0.6) {
                double mean = truth.gamma(i) + truth.eta(j) + truth.U.row(i).dot(truth.V.row(j));
                es.push_back({i, j, mean + gen.normal()});
            }
    SparseRatings r(n, m, es);
    // ratings are unbounded here; that is fine for the sampler

    GibbsConfig cfg;
    cfg.seed = 59;
    GibbsSampler s = make_sampler(r, prior, truth, PrecisionState::constant(n, m), cfg);
    std::vector<double> rmse;
    const int sweeps = 200;
    for (int t = 0; t < sweeps; ++t) {
        s.sweep();
        if (t >= sweeps / 2 && t % 5 == 0) {
            auto preds = s.predictions(r.entries());
            double acc = 0;
            for (std::size_t k = 0; k < preds.size(); ++k) {
                double e = r.entries()[k].value - preds[k];
                acc += e * e;
            }
            rmse.push_back(std::sqrt(acc / static_cast<double>(preds.size())));
        }
    }
    // OLS slope t-statistic over the retained sweeps
    const double len = static_cast<double>(rmse.size());
    double xbar = (len - 1) / 2, ybar = 0;
    for (double y : rmse) ybar += y;
    ybar /= len;
    double sxx = 0, sxy = 0;
    for (std::size_t k = 0; k < rmse.size(); ++k) {
        sxx += (k - xbar) * (k - xbar);
        sxy += (k - xbar) * (rmse[k] - ybar);
    }
    double slope = sxy / sxx;
    double sse = 0;
    for (std::size_t k = 0; k < rmse.size(); ++k) {
        double fit = ybar + slope * (k - xbar);
        sse += (rmse[k] - fit) * (rmse[k] - fit);
    }
    double se = std::sqrt(sse / (len - 2) / sxx);
    CHECK(std::abs(slope / se) < 3.0);
}
