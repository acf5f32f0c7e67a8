#ifndef FDIFF_SVD_HPP
#define FDIFF_SVD_HPP

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "fdiff/errors.hpp"

namespace fdiff {

// One-sided Jacobi SVD, singular values only. Attention maps are at most a
// few hundred per side, so plain cyclic sweeps in double are plenty.
// m x n row-major input; returns the top k values, descending.
inline std::vector<double> svd_singular_values(const std::vector<double>& mat, int m, int n, int k) {
    if (m < 1 || n < 1) throw ArgError("svd: matrix extents must be >= 1");
    if (static_cast<size_t>(m) * n != mat.size()) throw DimError("svd: data size does not match m*n");
    if (k < 1 || k > std::min(m, n)) throw ArgError("svd: k=" + std::to_string(k) + " out of range for " +
                                                    std::to_string(m) + "x" + std::to_string(n));

    // Work on columns of A (or of A^T if m < n, singular values are shared).
    int rows = m, cols = n;
    std::vector<double> a;
    if (m >= n) {
        a = mat;
    } else {
        rows = n;
        cols = m;
        a.resize(mat.size());
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) a[static_cast<size_t>(j) * m + i] = mat[static_cast<size_t>(i) * n + j];
    }

    auto col_dot = [&](int p, int q) {
        double s = 0;
        for (int i = 0; i < rows; ++i) s += a[static_cast<size_t>(i) * cols + p] * a[static_cast<size_t>(i) * cols + q];
        return s;
    };

    const int max_sweeps = 60;
    const double tol = 1e-14;
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        double off = 0;
        for (int p = 0; p < cols - 1; ++p) {
            for (int q = p + 1; q < cols; ++q) {
                double app = col_dot(p, p);
                double aqq = col_dot(q, q);
                double apq = col_dot(p, q);
                if (std::abs(apq) <= tol * std::sqrt(app * aqq) || apq == 0.0) continue;
                off = std::max(off, std::abs(apq) / std::sqrt(std::max(app * aqq, 1e-300)));
                double tau = (aqq - app) / (2.0 * apq);
                double t = (tau >= 0 ? 1.0 : -1.0) / (std::abs(tau) + std::sqrt(1.0 + tau * tau));
                double c = 1.0 / std::sqrt(1.0 + t * t);
                double s = c * t;
                for (int i = 0; i < rows; ++i) {
                    double vp = a[static_cast<size_t>(i) * cols + p];
                    double vq = a[static_cast<size_t>(i) * cols + q];
                    a[static_cast<size_t>(i) * cols + p] = c * vp - s * vq;
                    a[static_cast<size_t>(i) * cols + q] = s * vp + c * vq;
                }
            }
        }
        if (off < 1e-15) break;
    }

    std::vector<double> sv(cols);
    for (int p = 0; p < cols; ++p) sv[p] = std::sqrt(std::max(col_dot(p, p), 0.0));
    std::sort(sv.begin(), sv.end(), std::greater<double>());
    sv.resize(k);
    return sv;
}

// Eigenvalues of a symmetric matrix via classic two-sided cyclic Jacobi.
// Used for the Gaussian-Frechet covariance terms.
inline std::vector<double> sym_eigenvalues(std::vector<double> a, int n) {
    if (static_cast<size_t>(n) * n != a.size()) throw DimError("sym_eigenvalues: data size does not match n*n");
    const int max_sweeps = 100;
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        double off = 0;
        for (int p = 0; p < n - 1; ++p)
            for (int q = p + 1; q < n; ++q) off += a[static_cast<size_t>(p) * n + q] * a[static_cast<size_t>(p) * n + q];
        if (off < 1e-24) break;
        for (int p = 0; p < n - 1; ++p) {
            for (int q = p + 1; q < n; ++q) {
                double apq = a[static_cast<size_t>(p) * n + q];
                if (apq == 0.0) continue;
                double app = a[static_cast<size_t>(p) * n + p];
                double aqq = a[static_cast<size_t>(q) * n + q];
                double tau = (aqq - app) / (2.0 * apq);
                double t = (tau >= 0 ? 1.0 : -1.0) / (std::abs(tau) + std::sqrt(1.0 + tau * tau));
                double c = 1.0 / std::sqrt(1.0 + t * t);
                double s = c * t;
                for (int i = 0; i < n; ++i) {
                    double aip = a[static_cast<size_t>(i) * n + p];
                    double aiq = a[static_cast<size_t>(i) * n + q];
                    a[static_cast<size_t>(i) * n + p] = c * aip - s * aiq;
                    a[static_cast<size_t>(i) * n + q] = s * aip + c * aiq;
                }
                for (int j = 0; j < n; ++j) {
                    double apj = a[static_cast<size_t>(p) * n + j];
                    double aqj = a[static_cast<size_t>(q) * n + j];
                    a[static_cast<size_t>(p) * n + j] = c * apj - s * aqj;
                    a[static_cast<size_t>(q) * n + j] = s * apj + c * aqj;
                }
            }
        }
    }
    std::vector<double> ev(n);
    for (int i = 0; i < n; ++i) ev[i] = a[static_cast<size_t>(i) * n + i];
    std::sort(ev.begin(), ev.end(), std::greater<double>());
    return ev;
}

}  // namespace fdiff

#endif
