#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "oae/error.hpp"
#include "oae/linalg.hpp"

namespace oae {

struct SymEigenResult {
    std::vector<double> values;  // ascending
    Mat vectors;                 // columns, orthonormal, vectors.col(i) <-> values[i]
};

/// Dense symmetric eigendecomposition by cyclic Jacobi rotations.
/// Residual per pair is machine-level; iteration cap throws NumericError.
/// Ties are ordered deterministically by the post-sweep sort.
inline SymEigenResult sym_eigendecomposition(const Mat& a_in, double symmetry_tol = 1e-8) {
    if (a_in.rows != a_in.cols) throw DimensionError("sym_eigendecomposition: matrix not square");
    int n = a_in.rows;
    double scale = std::max(1.0, max_abs(a_in));
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j)
            if (std::fabs(a_in(i, j) - a_in(j, i)) > symmetry_tol * scale)
                throw NumericError("sym_eigendecomposition: input not symmetric at (" + std::to_string(i) +
                                   "," + std::to_string(j) + ")");

    Mat a = a_in;
    // Symmetrize exactly so rotations preserve symmetry bit-for-bit.
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
            double v = 0.5 * (a(i, j) + a(j, i));
            a(i, j) = v;
            a(j, i) = v;
        }
    Mat v = Mat::identity(n);

    auto off_norm = [&]() {
        double s = 0.0;
        for (int i = 0; i < n; ++i)
            for (int j = i + 1; j < n; ++j) s += a(i, j) * a(i, j);
        return std::sqrt(2.0 * s);
    };

    double anorm = frobenius(a);
    if (anorm == 0.0) anorm = 1.0;
    const int max_sweeps = 64;
    int sweep = 0;
    for (; sweep < max_sweeps; ++sweep) {
        double off = off_norm();
        if (off <= 1e-14 * anorm) break;
        // Skip rotations on already-tiny entries early in the sweep.
        double thresh = (sweep < 3) ? 0.2 * off / (n * n) : 0.0;
        for (int p = 0; p < n - 1; ++p) {
            for (int q = p + 1; q < n; ++q) {
                double apq = a(p, q);
                double g = 100.0 * std::fabs(apq);
                if (sweep > 3 && std::fabs(a(p, p)) + g == std::fabs(a(p, p)) &&
                    std::fabs(a(q, q)) + g == std::fabs(a(q, q))) {
                    a(p, q) = 0.0;
                    a(q, p) = 0.0;
                    continue;
                }
                if (std::fabs(apq) <= thresh) continue;
                double h = a(q, q) - a(p, p);
                double t;
                if (std::fabs(h) + g == std::fabs(h)) {
                    t = apq / h;
                } else {
                    double theta = 0.5 * h / apq;
                    t = 1.0 / (std::fabs(theta) + std::sqrt(1.0 + theta * theta));
                    if (theta < 0.0) t = -t;
                }
                double c = 1.0 / std::sqrt(1.0 + t * t);
                double s = t * c;
                double tau = s / (1.0 + c);
                double hpq = t * apq;
                a(p, p) -= hpq;
                a(q, q) += hpq;
                a(p, q) = 0.0;
                a(q, p) = 0.0;
                for (int i = 0; i < n; ++i) {
                    if (i != p && i != q) {
                        double aip = a(i, p), aiq = a(i, q);
                        a(i, p) = aip - s * (aiq + aip * tau);
                        a(p, i) = a(i, p);
                        a(i, q) = aiq + s * (aip - aiq * tau);
                        a(q, i) = a(i, q);
                    }
                    double vip = v(i, p), viq = v(i, q);
                    v(i, p) = vip - s * (viq + vip * tau);
                    v(i, q) = viq + s * (vip - viq * tau);
                }
            }
        }
    }
    if (sweep == max_sweeps) throw NumericError("sym_eigendecomposition: no convergence after 64 sweeps");

    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int i, int j) { return a(i, i) < a(j, j); });

    SymEigenResult out;
    out.values.resize(static_cast<std::size_t>(n));
    out.vectors = Mat(n, n);
    for (int j = 0; j < n; ++j) {
        int src = order[static_cast<std::size_t>(j)];
        out.values[static_cast<std::size_t>(j)] = a(src, src);
        for (int i = 0; i < n; ++i) out.vectors(i, j) = v(i, src);
    }
    return out;
}

}  // namespace oae
