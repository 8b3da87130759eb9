#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "oae/error.hpp"

namespace oae {

/// Dense row-major matrix of 64-bit floats. Vectors are n x 1.
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<double> d;

    Mat() = default;
    Mat(int r, int c, double fill = 0.0) : rows(r), cols(c), d(static_cast<std::size_t>(r) * c, fill) {}

    double& operator()(int i, int j) { return d[static_cast<std::size_t>(i) * cols + j]; }
    double operator()(int i, int j) const { return d[static_cast<std::size_t>(i) * cols + j]; }
    std::size_t size() const { return d.size(); }

    static Mat identity(int n) {
        Mat m(n, n);
        for (int i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }
};

inline bool all_finite(const Mat& a) {
    for (double x : a.d)
        if (!std::isfinite(x)) return false;
    return true;
}

inline double max_abs(const Mat& a) {
    double m = 0.0;
    for (double x : a.d) m = std::max(m, std::fabs(x));
    return m;
}

inline double frobenius(const Mat& a) {
    double s = 0.0;
    for (double x : a.d) s += x * x;
    return std::sqrt(s);
}

/// C = A * B
inline Mat matmul(const Mat& a, const Mat& b) {
    if (a.cols != b.rows)
        throw DimensionError("matmul: inner dimensions disagree (" + std::to_string(a.cols) + " vs " +
                             std::to_string(b.rows) + ")");
    Mat c(a.rows, b.cols);
    for (int i = 0; i < a.rows; ++i) {
        const double* ai = &a.d[static_cast<std::size_t>(i) * a.cols];
        double* ci = &c.d[static_cast<std::size_t>(i) * c.cols];
        for (int k = 0; k < a.cols; ++k) {
            double aik = ai[k];
            if (aik == 0.0) continue;
            const double* bk = &b.d[static_cast<std::size_t>(k) * b.cols];
            for (int j = 0; j < b.cols; ++j) ci[j] += aik * bk[j];
        }
    }
    return c;
}

/// C = A^T * B
inline Mat matmul_tn(const Mat& a, const Mat& b) {
    if (a.rows != b.rows) throw DimensionError("matmul_tn: row counts disagree");
    Mat c(a.cols, b.cols);
    for (int k = 0; k < a.rows; ++k) {
        const double* ak = &a.d[static_cast<std::size_t>(k) * a.cols];
        const double* bk = &b.d[static_cast<std::size_t>(k) * b.cols];
        for (int i = 0; i < a.cols; ++i) {
            double aki = ak[i];
            if (aki == 0.0) continue;
            double* ci = &c.d[static_cast<std::size_t>(i) * c.cols];
            for (int j = 0; j < b.cols; ++j) ci[j] += aki * bk[j];
        }
    }
    return c;
}

/// C = A * B^T
inline Mat matmul_nt(const Mat& a, const Mat& b) {
    if (a.cols != b.cols) throw DimensionError("matmul_nt: column counts disagree");
    Mat c(a.rows, b.rows);
    for (int i = 0; i < a.rows; ++i) {
        const double* ai = &a.d[static_cast<std::size_t>(i) * a.cols];
        double* ci = &c.d[static_cast<std::size_t>(i) * c.cols];
        for (int j = 0; j < b.rows; ++j) {
            const double* bj = &b.d[static_cast<std::size_t>(j) * b.cols];
            double s = 0.0;
            for (int k = 0; k < a.cols; ++k) s += ai[k] * bj[k];
            ci[j] = s;
        }
    }
    return c;
}

inline Mat transpose(const Mat& a) {
    Mat t(a.cols, a.rows);
    for (int i = 0; i < a.rows; ++i)
        for (int j = 0; j < a.cols; ++j) t(j, i) = a(i, j);
    return t;
}

/// Lower-triangular Cholesky factor of an SPD matrix. Throws SingularGramError
/// when a pivot is not strictly positive.
inline Mat cholesky(const Mat& g) {
    if (g.rows != g.cols) throw DimensionError("cholesky: matrix not square");
    int n = g.rows;
    Mat l(n, n);
    for (int j = 0; j < n; ++j) {
        double diag = g(j, j);
        for (int k = 0; k < j; ++k) diag -= l(j, k) * l(j, k);
        if (!(diag > 0.0) || !std::isfinite(diag))
            throw SingularGramError("cholesky: non-positive pivot at index " + std::to_string(j));
        double ljj = std::sqrt(diag);
        l(j, j) = ljj;
        for (int i = j + 1; i < n; ++i) {
            double s = g(i, j);
            for (int k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
            l(i, j) = s / ljj;
        }
    }
    return l;
}

/// Cholesky with a jitter ladder: plain, then g + eps*I for
/// eps in {1e-10, 1e-8, 1e-6}. Near-duplicate basis columns early in training
/// need the retries. Returns the factor; reports the jitter actually used.
inline Mat cholesky_jittered(const Mat& g, double* jitter_used = nullptr) {
    static constexpr double ladder[] = {0.0, 1e-10, 1e-8, 1e-6};
    for (double eps : ladder) {
        Mat gj = g;
        if (eps > 0.0)
            for (int i = 0; i < g.rows; ++i) gj(i, i) += eps;
        try {
            Mat l = cholesky(gj);
            if (jitter_used) *jitter_used = eps;
            return l;
        } catch (const SingularGramError&) {
            // escalate
        }
    }
    throw SingularGramError("cholesky: matrix not positive definite after max jitter 1e-6");
}

/// Solve L * y = b (L lower triangular), b may have many columns.
/// `n` restricts the solve to the leading n x n block of L (prefix-Cholesky).
inline Mat solve_lower(const Mat& l, const Mat& b, int n = -1) {
    if (n < 0) n = l.rows;
    if (b.rows != n) throw DimensionError("solve_lower: rhs row count disagrees");
    Mat y = b;
    for (int i = 0; i < n; ++i) {
        for (int k = 0; k < i; ++k) {
            double lik = l(i, k);
            if (lik == 0.0) continue;
            for (int j = 0; j < b.cols; ++j) y(i, j) -= lik * y(k, j);
        }
        double lii = l(i, i);
        for (int j = 0; j < b.cols; ++j) y(i, j) /= lii;
    }
    return y;
}

/// Solve L^T * x = y (L lower triangular), leading n x n block.
inline Mat solve_lower_t(const Mat& l, const Mat& y, int n = -1) {
    if (n < 0) n = l.rows;
    if (y.rows != n) throw DimensionError("solve_lower_t: rhs row count disagrees");
    Mat x = y;
    for (int i = n - 1; i >= 0; --i) {
        for (int k = i + 1; k < n; ++k) {
            double lki = l(k, i);
            if (lki == 0.0) continue;
            for (int j = 0; j < y.cols; ++j) x(i, j) -= lki * x(k, j);
        }
        double lii = l(i, i);
        for (int j = 0; j < y.cols; ++j) x(i, j) /= lii;
    }
    return x;
}

/// Solve G x = b given the Cholesky factor L of (the leading block of) G.
inline Mat cholesky_solve(const Mat& l, const Mat& b, int n = -1) {
    return solve_lower_t(l, solve_lower(l, b, n), n);
}

/// Solve X R^T = B for X, with R upper triangular (used by the QR adjoint).
inline Mat solve_rt_right(const Mat& r, const Mat& b) {
    if (b.cols != r.rows) throw DimensionError("solve_rt_right: shapes disagree");
    int k = r.rows;
    Mat x = b;
    // Row i of X solves R x_i^T = b_i^T by back-substitution.
    for (int i = 0; i < b.rows; ++i) {
        double* xi = &x.d[static_cast<std::size_t>(i) * k];
        for (int j = k - 1; j >= 0; --j) {
            double s = xi[j];
            for (int t = j + 1; t < k; ++t) s -= r(j, t) * xi[t];
            xi[j] = s / r(j, j);
        }
    }
    return x;
}

struct QrResult {
    Mat q;  // n x k, orthonormal columns
    Mat r;  // k x k, upper triangular with positive diagonal
};

/// Reduced Householder QR of an n x k matrix (n >= k). Column signs are
/// flipped afterwards so diag(R) > 0, which pins the otherwise arbitrary
/// per-column sign. Throws DegenerateBasisError on numerical rank loss.
inline QrResult qr_reduced(const Mat& a) {
    int n = a.rows, k = a.cols;
    if (n < k) throw DimensionError("qr_reduced: need rows >= cols");
    Mat work = a;                       // becomes R in the upper triangle
    std::vector<std::vector<double>> vs;  // Householder vectors
    vs.reserve(k);
    double scale = max_abs(a);
    if (scale == 0.0) throw DegenerateBasisError("qr_reduced: zero matrix", 0);

    for (int j = 0; j < k; ++j) {
        // Householder vector for column j below the diagonal.
        double norm = 0.0;
        for (int i = j; i < n; ++i) norm += work(i, j) * work(i, j);
        norm = std::sqrt(norm);
        if (norm <= 1e-10 * scale) throw DegenerateBasisError("qr_reduced: rank deficient", j);
        double alpha = work(j, j) >= 0.0 ? -norm : norm;
        std::vector<double> v(static_cast<std::size_t>(n - j));
        v[0] = work(j, j) - alpha;
        for (int i = j + 1; i < n; ++i) v[i - j] = work(i, j);
        double vnorm2 = 0.0;
        for (double x : v) vnorm2 += x * x;
        if (vnorm2 > 0.0) {
            // Apply I - 2 v v^T / (v^T v) to the trailing columns.
            for (int c = j; c < k; ++c) {
                double dot = 0.0;
                for (int i = j; i < n; ++i) dot += v[i - j] * work(i, c);
                double f = 2.0 * dot / vnorm2;
                for (int i = j; i < n; ++i) work(i, c) -= f * v[i - j];
            }
        }
        work(j, j) = alpha;
        vs.push_back(std::move(v));
    }

    QrResult out;
    out.r = Mat(k, k);
    for (int i = 0; i < k; ++i)
        for (int j = i; j < k; ++j) out.r(i, j) = work(i, j);

    // Accumulate Q by applying the reflectors to the first k identity columns.
    out.q = Mat(n, k);
    for (int j = 0; j < k; ++j) out.q(j, j) = 1.0;
    for (int j = k - 1; j >= 0; --j) {
        const std::vector<double>& v = vs[static_cast<std::size_t>(j)];
        double vnorm2 = 0.0;
        for (double x : v) vnorm2 += x * x;
        if (vnorm2 == 0.0) continue;
        for (int c = 0; c < k; ++c) {
            double dot = 0.0;
            for (int i = j; i < n; ++i) dot += v[i - j] * out.q(i, c);
            double f = 2.0 * dot / vnorm2;
            for (int i = j; i < n; ++i) out.q(i, c) -= f * v[i - j];
        }
    }

    // Sign convention: positive diag(R).
    for (int j = 0; j < k; ++j) {
        if (out.r(j, j) < 0.0) {
            for (int c = j; c < k; ++c) out.r(j, c) = -out.r(j, c);
            for (int i = 0; i < n; ++i) out.q(i, j) = -out.q(i, j);
        }
    }
    return out;
}

/// max |Q^T Q - I|, the orthonormality defect.
inline double orthonormality_defect(const Mat& q) {
    Mat g = matmul_tn(q, q);
    for (int i = 0; i < g.rows; ++i) g(i, i) -= 1.0;
    return max_abs(g);
}

}  // namespace oae
