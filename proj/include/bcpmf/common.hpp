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

#ifndef BCPMF_COMMON_HPP
#define BCPMF_COMMON_HPP

#include <Eigen/Dense>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace bcpmf {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
// Per-entity feature matrices keep each entity's vector contiguous.
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Cholesky of an SPD matrix with a jitter retry: adds 1e-10*I up to
/// three times before giving up.
inline Eigen::LLT<Mat> chol_spd(const Mat& a, const char* what = "matrix") {
    Mat m = a;
    for (int attempt = 0; attempt <= 3; ++attempt) {
        if (attempt > 0) m += 1e-10 * Mat::Identity(a.rows(), a.cols());
        Eigen::LLT<Mat> llt(m);
        if (llt.info() == Eigen::Success) return llt;
    }
    throw NumericalError(std::string("Cholesky factorization failed for ") + what);
}

inline Mat spd_inverse(const Mat& a, const char* what = "matrix") {
    auto llt = chol_spd(a, what);
    return llt.solve(Mat::Identity(a.rows(), a.cols()));
}

inline double logdet_from_llt(const Eigen::LLT<Mat>& llt) {
    return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

/// Runs fn(begin, end) over [0, n) split into contiguous chunks. Results must
/// not depend on chunking; callers only write to disjoint per-index slots.
template <typename Fn>
void parallel_for(int n, int threads, Fn&& fn) {
    if (threads <= 1 || n < 2 * threads) {
        fn(0, n);
        return;
    }
    std::vector<std::thread> pool;
    int chunk = (n + threads - 1) / threads;
    for (int t = 0; t < threads; ++t) {
        int begin = t * chunk;
        int end = std::min(n, begin + chunk);
        if (begin >= end) break;
        pool.emplace_back([&fn, begin, end] { fn(begin, end); });
    }
    for (auto& th : pool) th.join();
}

}  // namespace bcpmf

#endif  // BCPMF_COMMON_HPP
