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

#ifndef BCPMF_DISTRIBUTIONS_HPP
#define BCPMF_DISTRIBUTIONS_HPP

#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/gamma.hpp>
#include <cmath>
#include <limits>

#include "bcpmf/common.hpp"
#include "bcpmf/rng.hpp"

namespace bcpmf {

inline double digamma(double x) { return boost::math::digamma(x); }

/// Regularized lower incomplete gamma: P(X <= x) for X ~ Gamma(shape, rate).
inline double gamma_cdf(double shape, double rate, double x) {
    if (x <= 0.0) return 0.0;
    return boost::math::gamma_p(shape, rate * x);
}

/// E[log X] for X ~ Gamma(shape a, rate b): psi(a) - log(b).
inline double e_log_gamma(double shape, double rate) {
    return digamma(shape) - std::log(rate);
}

/// E[log |X|] for X ~ Wishart(dof, scale), scale d x d:
/// sum_i psi((dof + 1 - i) / 2) + d log 2 + log |scale|.
inline double e_logdet_wishart(double dof, const Mat& scale) {
    const int d = static_cast<int>(scale.rows());
    double acc = d * std::log(2.0) + logdet_from_llt(chol_spd(scale, "wishart scale"));
    for (int i = 1; i <= d; ++i) acc += digamma(0.5 * (dof + 1 - i));
    return acc;
}

inline double e_logdet_wishart(double dof, int d, double logdet_scale) {
    double acc = d * std::log(2.0) + logdet_scale;
    for (int i = 1; i <= d; ++i) acc += digamma(0.5 * (dof + 1 - i));
    return acc;
}

/// Maximizer of the truncated Gamma(a, b) density on [lo, hi] as used by the
/// truncated precision model: the unbounded point estimate a/b with barriers
/// at the truncation endpoints.
inline double truncated_gamma_point(double shape, double rate, double lo, double hi) {
    double x = shape / rate;
    if (x < lo) return lo;
    if (x > hi) return hi;
    return x;
}

/// Exact mean of Gamma(a, b) restricted to (lo, hi), via incomplete-gamma
/// ratios. Optional alternative to the point estimate above.
inline double truncated_gamma_mean(double shape, double rate, double lo, double hi) {
    double mass = gamma_cdf(shape, rate, hi) - gamma_cdf(shape, rate, lo);
    if (mass < 1e-300) throw NumericalError("truncated gamma: no mass inside bounds");
    double upper = gamma_cdf(shape + 1, rate, hi) - gamma_cdf(shape + 1, rate, lo);
    return (shape / rate) * upper / mass;
}

/// Gamma(shape a, rate b) sampler, Marsaglia-Tsang.
inline double sample_gamma(double shape, double rate, RngStream& rng) {
    if (!(shape > 0.0) || !(rate > 0.0)) throw ConfigError("gamma sampler: shape and rate must be positive");
    if (shape < 1.0) {
        // boost via Gamma(shape + 1) and a uniform power
        double u = rng.uniform_pos();
        return sample_gamma(shape + 1.0, rate, rng) * std::pow(u, 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
        double x, v;
        do {
            x = rng.normal();
            v = 1.0 + c * x;
        } while (v <= 0.0);
        v = v * v * v;
        double u = rng.uniform_pos();
        if (u < 1.0 - 0.0331 * x * x * x * x) return d * v / rate;
        if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v / rate;
    }
}

/// Draw from N(mean, precision) parameterized by the precision matrix.
/// Factors the precision (jitter retry inside chol_spd) and solves a
/// triangular system against standard normal noise.
inline Vec sample_mvn(const Vec& mean, const Mat& precision, RngStream& rng) {
    auto llt = chol_spd(precision, "mvn precision");
    Vec z(mean.size());
    for (int i = 0; i < z.size(); ++i) z(i) = rng.normal();
    // precision = L L^T, so x = L^-T z has covariance precision^-1
    llt.matrixU().solveInPlace(z);
    return mean + z;
}

/// Wishart draw given a factor A with A A^T = scale (Bartlett construction).
inline Mat sample_wishart_from_factor(double dof, const Mat& factor, RngStream& rng) {
    const int d = static_cast<int>(factor.rows());
    if (!(dof > d - 1)) throw ConfigError("wishart sampler: dof must exceed d - 1");
    Mat a = Mat::Zero(d, d);
    for (int i = 0; i < d; ++i) {
        a(i, i) = std::sqrt(sample_gamma(0.5 * (dof - i), 0.5, rng));  // chi2(dof - i)
        for (int j = 0; j < i; ++j) a(i, j) = rng.normal();
    }
    Mat la = factor * a;
    return la * la.transpose();
}

inline Mat sample_wishart(double dof, const Mat& scale, RngStream& rng) {
    auto llt = chol_spd(scale, "wishart scale");
    return sample_wishart_from_factor(dof, Mat(llt.matrixL()), rng);
}

/// Exact draw from Gamma(a, b) truncated to (lo, hi) by inverse-CDF with
/// bisection on the regularized incomplete gamma. Stateless per draw, which
/// keeps Gibbs sweeps reproducible under any entity ordering.
inline double sample_truncated_gamma(double shape, double rate, double lo, double hi,
                                     RngStream& rng) {
    if (!(lo < hi)) throw ConfigError("truncated gamma: requires lo < hi");
    double flo = gamma_cdf(shape, rate, lo);
    double fhi = gamma_cdf(shape, rate, hi);
    if (fhi - flo < 1e-300)
        throw NumericalError("truncated gamma: CDF mass inside bounds below 1e-300");
    double target = flo + rng.uniform_pos() * (fhi - flo);
    double a = lo, b = hi;
    for (int it = 0; it < 200 && (b - a) > 1e-12 * std::max(1.0, a); ++it) {
        double mid = 0.5 * (a + b);
        if (gamma_cdf(shape, rate, mid) < target)
            a = mid;
        else
            b = mid;
    }
    double x = 0.5 * (a + b);
    // keep the draw strictly interior
    if (x <= lo) x = std::nextafter(lo, hi);
    if (x >= hi) x = std::nextafter(hi, lo);
    return x;
}

/// CDF of the truncated Gamma(a, b) law on (lo, hi).
inline double truncated_gamma_cdf(double shape, double rate, double lo, double hi, double x) {
    if (x <= lo) return 0.0;
    if (x >= hi) return 1.0;
    double flo = gamma_cdf(shape, rate, lo);
    double fhi = gamma_cdf(shape, rate, hi);
    return (gamma_cdf(shape, rate, x) - flo) / (fhi - flo);
}

inline double normal_cdf(double x, double mean = 0.0, double sd = 1.0) {
    return 0.5 * std::erfc(-(x - mean) / (sd * std::sqrt(2.0)));
}

}  // namespace bcpmf

#endif  // BCPMF_DISTRIBUTIONS_HPP
