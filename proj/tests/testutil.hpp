#pragma once

// Shared test oracles. These stay independent of the implementation paths
// they check: the dense inverse is Gauss-Jordan, gradients come from central
// finite differences.

#include <cmath>
#include <functional>
#include <vector>

#include "oae/error.hpp"
#include "oae/linalg.hpp"
#include "oae/rng.hpp"

namespace testutil {

inline oae::Mat random_mat(oae::Rng& rng, int r, int c, double lo = -1.0, double hi = 1.0) {
    oae::Mat m(r, c);
    for (double& x : m.d) x = rng.uniform(lo, hi);
    return m;
}

/// SPD matrix A^T A + ridge * I.
inline oae::Mat random_spd(oae::Rng& rng, int n, double ridge = 1.0) {
    oae::Mat a = random_mat(rng, n, n);
    oae::Mat g = oae::matmul_tn(a, a);
    for (int i = 0; i < n; ++i) g(i, i) += ridge;
    return g;
}

/// Dense inverse by Gauss-Jordan elimination with partial pivoting.
inline oae::Mat dense_inverse(const oae::Mat& a_in) {
    int n = a_in.rows;
    oae::Mat a = a_in;
    oae::Mat inv = oae::Mat::identity(n);
    for (int col = 0; col < n; ++col) {
        int piv = col;
        for (int i = col + 1; i < n; ++i)
            if (std::fabs(a(i, col)) > std::fabs(a(piv, col))) piv = i;
        if (a(piv, col) == 0.0) throw oae::NumericError("dense_inverse: singular");
        if (piv != col)
            for (int j = 0; j < n; ++j) {
                std::swap(a(col, j), a(piv, j));
                std::swap(inv(col, j), inv(piv, j));
            }
        double p = a(col, col);
        for (int j = 0; j < n; ++j) {
            a(col, j) /= p;
            inv(col, j) /= p;
        }
        for (int i = 0; i < n; ++i) {
            if (i == col) continue;
            double f = a(i, col);
            if (f == 0.0) continue;
            for (int j = 0; j < n; ++j) {
                a(i, j) -= f * a(col, j);
                inv(i, j) -= f * inv(col, j);
            }
        }
    }
    return inv;
}

/// Central finite differences of a scalar function of a flat parameter
/// vector: g_i = (f(x + h e_i) - f(x - h e_i)) / 2h.
inline std::vector<double> fd_gradient(const std::function<double(const std::vector<double>&)>& f,
                                       std::vector<double> x, double h) {
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        double x0 = x[i];
        x[i] = x0 + h;
        double fp = f(x);
        x[i] = x0 - h;
        double fm = f(x);
        x[i] = x0;
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

/// max_i |a_i - b_i| / (|b_i| + 1e-8)
inline double max_rel_err(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::fabs(a[i] - b[i]) / (std::fabs(b[i]) + 1e-8));
    return m;
}

}  // namespace testutil
