#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "seqflow/gradcheck.hpp"
#include "seqflow/tensor.hpp"

// Brute-force verifiers used by the test suites. Nothing in here shares a
// numeric code path with the flows it checks: differencing, LU, and the
// Gaussian marginals are all written out independently.
namespace seqflow::oracles {

using VecMap = std::function<Tensor(const Tensor&)>;

namespace detail {

// log|det| via LU with partial pivoting. D is small (<= 16), no blocking.
inline double lu_logabsdet(std::vector<double> m, int d) {
    double logdet = 0.0;
    for (int k = 0; k < d; ++k) {
        int piv = k;
        for (int i = k + 1; i < d; ++i)
            if (std::abs(m[static_cast<size_t>(i) * d + k]) > std::abs(m[static_cast<size_t>(piv) * d + k]))
                piv = i;
        if (piv != k)
            for (int j = 0; j < d; ++j)
                std::swap(m[static_cast<size_t>(k) * d + j], m[static_cast<size_t>(piv) * d + j]);
        const double akk = m[static_cast<size_t>(k) * d + k];
        if (std::abs(akk) < 1e-300) throw NumericError("brute_jacobian_logdet: singular Jacobian");
        logdet += std::log(std::abs(akk));
        for (int i = k + 1; i < d; ++i) {
            const double f = m[static_cast<size_t>(i) * d + k] / akk;
            for (int j = k; j < d; ++j)
                m[static_cast<size_t>(i) * d + j] -= f * m[static_cast<size_t>(k) * d + j];
        }
    }
    return logdet;
}

inline std::vector<double> fd_jacobian(const VecMap& map, const Tensor& point, double h) {
    const int d = static_cast<int>(point.numel());
    std::vector<double> jac(static_cast<size_t>(d) * d);
    for (int j = 0; j < d; ++j) {
        Tensor xp = point, xm = point;
        xp[j] += h;
        xm[j] -= h;
        const Tensor fp = map(xp);
        const Tensor fm = map(xm);
        if (fp.numel() != d || fm.numel() != d)
            throw UsageError("oracle: map is not R^D -> R^D");
        for (int i = 0; i < d; ++i)
            jac[static_cast<size_t>(i) * d + j] = (fp[i] - fm[i]) / (2.0 * h);
    }
    return jac;
}

}  // namespace detail

// Central-difference D x D Jacobian of `map` at `point`, log|det| via LU.
inline double brute_jacobian_logdet(const VecMap& map, const Tensor& point, double h = 1e-5) {
    const int d = static_cast<int>(point.numel());
    if (d > 16) throw UsageError("brute_jacobian_logdet: D > 16 refused (cost guard)");
    return detail::lu_logabsdet(detail::fd_jacobian(map, point, h), d);
}

// Checks that every cross-timestep block of the Jacobian that would break
// causality (output step t against input step s > t) is numerically zero.
inline CheckReport block_structure_check(const VecMap& map, const Tensor& point, int T, int H,
                                         double tol = 1e-7, double h = 1e-5) {
    const int d = T * H;
    if (d > 16) throw UsageError("block_structure_check: T*H > 16 refused (cost guard)");
    if (point.numel() != d) throw UsageError("block_structure_check: point size != T*H");
    const std::vector<double> jac = detail::fd_jacobian(map, point, h);
    CheckReport rep;
    for (int t = 0; t < T; ++t)
        for (int s = t + 1; s < T; ++s)
            for (int i = 0; i < H; ++i)
                for (int j = 0; j < H; ++j) {
                    const double e = std::abs(jac[static_cast<size_t>(t * H + i) * d + (s * H + j)]);
                    ++rep.n_checked;
                    if (e > rep.max_abs_err) {
                        rep.max_abs_err = e;
                        rep.max_rel_err = e;
                        rep.location = "block(" + std::to_string(t + 1) + "," + std::to_string(s + 1) + ")";
                    }
                }
    rep.pass = rep.max_abs_err < tol;
    if (T == 1) rep.pass = true;  // no upper blocks exist
    return rep;
}

// Exhaustive check that the invertible maps on a finite set of size n are
// exactly the n! permutations. Maps are encoded as value tables.
struct DiscreteMapCensus {
    long long total = 0;       // n^n candidate functions
    long long invertible = 0;  // how many were bijections
    std::vector<std::vector<int>> permutations;
};

inline DiscreteMapCensus enumerate_discrete_invertible(int omega_size) {
    if (omega_size < 1 || omega_size > 6)
        throw UsageError("enumerate_discrete_invertible: omega size must be in [1,6]");
    DiscreteMapCensus census;
    const int n = omega_size;
    std::vector<int> table(static_cast<size_t>(n), 0);
    long long count = 1;
    for (int i = 0; i < n; ++i) count *= n;
    census.total = count;
    for (long long code = 0; code < count; ++code) {
        long long c = code;
        for (int i = 0; i < n; ++i) {
            table[static_cast<size_t>(i)] = static_cast<int>(c % n);
            c /= n;
        }
        std::vector<bool> hit(static_cast<size_t>(n), false);
        bool bijective = true;
        for (int i = 0; i < n && bijective; ++i) {
            if (hit[static_cast<size_t>(table[static_cast<size_t>(i)])]) bijective = false;
            hit[static_cast<size_t>(table[static_cast<size_t>(i)])] = true;
        }
        if (bijective) {
            ++census.invertible;
            census.permutations.push_back(table);
        }
    }
    return census;
}

// Exact log marginal likelihood of the toy linear-Gaussian model
//   z ~ N(0, I_m),  x = W z + b + eta,  eta ~ N(0, noise_cov)
// so x ~ N(b, W W^T + noise_cov). Dimensions <= 4; Cholesky written here.
inline double linear_gaussian_logml(const Tensor& W, const Tensor& b, const Tensor& noise_cov,
                                    const Tensor& x) {
    const int n = W.rows();
    const int m = W.cols();
    if (n > 4 || m > 4) throw UsageError("linear_gaussian_logml: dims > 4 refused");
    if (b.numel() != n || x.numel() != n || noise_cov.rows() != n || noise_cov.cols() != n)
        throw UsageError("linear_gaussian_logml: shape mismatch");

    std::vector<double> cov(static_cast<size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            double s = noise_cov.at(i, j);
            for (int k = 0; k < m; ++k) s += W.at(i, k) * W.at(j, k);
            cov[static_cast<size_t>(i) * n + j] = s;
        }

    // Cholesky cov = L L^T.
    std::vector<double> L(static_cast<size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j <= i; ++j) {
            double s = cov[static_cast<size_t>(i) * n + j];
            for (int k = 0; k < j; ++k)
                s -= L[static_cast<size_t>(i) * n + k] * L[static_cast<size_t>(j) * n + k];
            if (i == j) {
                if (s <= 0.0) throw NumericError("linear_gaussian_logml: covariance not PD");
                L[static_cast<size_t>(i) * n + i] = std::sqrt(s);
            } else {
                L[static_cast<size_t>(i) * n + j] = s / L[static_cast<size_t>(j) * n + j];
            }
        }

    // Solve L y = (x - b); logpdf = -0.5 |y|^2 - sum log L_ii - n/2 log 2pi.
    std::vector<double> y(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        double s = x[i] - b[i];
        for (int k = 0; k < i; ++k) s -= L[static_cast<size_t>(i) * n + k] * y[static_cast<size_t>(k)];
        y[static_cast<size_t>(i)] = s / L[static_cast<size_t>(i) * n + i];
    }
    double quad = 0.0, logdet_half = 0.0;
    for (int i = 0; i < n; ++i) {
        quad += y[static_cast<size_t>(i)] * y[static_cast<size_t>(i)];
        logdet_half += std::log(L[static_cast<size_t>(i) * n + i]);
    }
    return -0.5 * quad - logdet_half - 0.5 * n * std::log(2.0 * M_PI);
}

}  // namespace seqflow::oracles
