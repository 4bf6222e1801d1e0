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

#ifndef BCPMF_CHECKPOINT_HPP
#define BCPMF_CHECKPOINT_HPP

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>

#include "bcpmf/common.hpp"
#include "bcpmf/model.hpp"

namespace bcpmf {

struct Checkpoint {
    FeatureState features;
    PrecisionState precisions;
    ModelFlags flags;
};

/// Versioned text checkpoint. Values are written with 17 significant digits,
/// which round-trips IEEE doubles losslessly.
inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write checkpoint: " + path);
    const auto& f = ck.features;
    auto num = [](double v) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return std::string(buf);
    };

    out << "bcpmf-checkpoint 1\n";
    out << "dims " << f.num_users() << ' ' << f.num_items() << ' ' << f.d << '\n';
    out << "flags " << (ck.flags.user_features ? 1 : 0) << ' '
        << (ck.flags.side_features ? 1 : 0) << '\n';
    out << "mode " << to_string(ck.precisions.mode) << ' ' << num(ck.precisions.lo) << ' '
        << num(ck.precisions.hi) << '\n';
    out << "tau " << num(ck.precisions.tau) << '\n';

    auto write_vec = [&](const char* name, const Vec& v) {
        out << name << '\n';
        for (int k = 0; k < v.size(); ++k) out << num(v(k)) << (k + 1 < v.size() ? ' ' : '\n');
        if (v.size() == 0) out << '\n';
    };
    auto write_mat = [&](const char* name, const RowMat& m) {
        out << name << '\n';
        for (int r = 0; r < m.rows(); ++r)
            for (int c = 0; c < m.cols(); ++c) out << num(m(r, c)) << (c + 1 < m.cols() ? ' ' : '\n');
    };
    write_vec("gamma", f.gamma);
    write_vec("eta", f.eta);
    write_mat("U", f.U);
    write_mat("V", f.V);
    write_mat("W", f.W);
    write_vec("alpha", ck.precisions.alpha);
    write_vec("beta", ck.precisions.beta);
    if (!out) throw IoError("write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    std::string word;
    auto expect = [&](const std::string& want) {
        if (!(in >> word) || word != want)
            throw ParseError(path + ": expected '" + want + "', got '" + word + "'");
    };
    expect("bcpmf-checkpoint");
    int version = 0;
    if (!(in >> version) || version != 1)
        throw ParseError(path + ": unsupported checkpoint version");

    int n = 0, m = 0, d = 0;
    expect("dims");
    if (!(in >> n >> m >> d) || n < 0 || m < 0 || d < 0)
        throw ParseError(path + ": bad dims line");
    Checkpoint ck;
    ck.features = FeatureState::zeros(n, m, d);

    expect("flags");
    int u = 0, w = 0;
    if (!(in >> u >> w)) throw ParseError(path + ": bad flags line");
    ck.flags.user_features = u != 0;
    ck.flags.side_features = w != 0;

    expect("mode");
    std::string mode;
    double lo = 0, hi = 0;
    if (!(in >> mode >> lo >> hi)) throw ParseError(path + ": bad mode line");
    ck.precisions.mode = precision_mode_from_string(mode);
    ck.precisions.lo = lo;
    ck.precisions.hi = hi;

    expect("tau");
    if (!(in >> ck.precisions.tau)) throw ParseError(path + ": bad tau line");

    auto read_vec = [&](const char* name, Vec& v) {
        expect(name);
        for (int k = 0; k < v.size(); ++k)
            if (!(in >> v(k))) throw ParseError(path + ": truncated section " + name);
    };
    auto read_mat = [&](const char* name, RowMat& mt) {
        expect(name);
        for (int r = 0; r < mt.rows(); ++r)
            for (int c = 0; c < mt.cols(); ++c)
                if (!(in >> mt(r, c))) throw ParseError(path + ": truncated section " + name);
    };
    read_vec("gamma", ck.features.gamma);
    read_vec("eta", ck.features.eta);
    read_mat("U", ck.features.U);
    read_mat("V", ck.features.V);
    read_mat("W", ck.features.W);
    ck.precisions.alpha = Vec::Zero(n);
    ck.precisions.beta = Vec::Zero(m);
    read_vec("alpha", ck.precisions.alpha);
    read_vec("beta", ck.precisions.beta);
    return ck;
}

}  // namespace bcpmf

#endif  // BCPMF_CHECKPOINT_HPP
