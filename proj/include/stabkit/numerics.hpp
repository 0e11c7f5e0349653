#pragma once

// Dense linear algebra and counter-based random sampling.
//
// Everything here is deliberately small: vectors are contiguous float64
// buffers, symmetric matrices are dense row-major, and the eigensolver is a
// cyclic Jacobi sweep meant as a ground-truth oracle at desk scale (N <= 512).

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <initializer_list>
#include <numbers>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "stabkit/errors.hpp"

namespace stabkit {

inline constexpr std::size_t kDenseOracleLimit = 512;

// ---------------------------------------------------------------------------
// Vector
// ---------------------------------------------------------------------------

class Vector {
public:
    Vector() = default;
    explicit Vector(std::size_t n, double fill = 0.0) : data_(n, fill) {}
    Vector(std::initializer_list<double> values) : data_(values) {}
    explicit Vector(std::vector<double> values) : data_(std::move(values)) {}

    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double* data() noexcept { return data_.data(); }
    const double* data() const noexcept { return data_.data(); }

    std::span<double> span() noexcept { return data_; }
    std::span<const double> span() const noexcept { return data_; }

    auto begin() noexcept { return data_.begin(); }
    auto end() noexcept { return data_.end(); }
    auto begin() const noexcept { return data_.begin(); }
    auto end() const noexcept { return data_.end(); }

    const std::vector<double>& values() const noexcept { return data_; }

    Vector& operator+=(const Vector& o) {
        check_same(o);
        for (std::size_t i = 0; i < size(); ++i) data_[i] += o.data_[i];
        return *this;
    }
    Vector& operator-=(const Vector& o) {
        check_same(o);
        for (std::size_t i = 0; i < size(); ++i) data_[i] -= o.data_[i];
        return *this;
    }
    Vector& operator*=(double s) {
        for (double& x : data_) x *= s;
        return *this;
    }

    friend bool operator==(const Vector&, const Vector&) = default;

private:
    void check_same(const Vector& o) const {
        if (o.size() != size()) {
            throw InvalidArgument("vector length mismatch: " + std::to_string(size()) + " vs " +
                                  std::to_string(o.size()));
        }
    }

    std::vector<double> data_;
};

inline Vector operator+(Vector a, const Vector& b) { return a += b; }
inline Vector operator-(Vector a, const Vector& b) { return a -= b; }
inline Vector operator*(double s, Vector a) { return a *= s; }
inline Vector operator*(Vector a, double s) { return a *= s; }

inline double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw InvalidArgument("dot: length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}
inline double dot(const Vector& a, const Vector& b) { return dot(a.span(), b.span()); }

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }
inline double norm2(const Vector& a) { return norm2(a.span()); }

/// y += alpha * x
inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
    if (x.size() != y.size()) throw InvalidArgument("axpy: length mismatch");
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}
inline void axpy(double alpha, const Vector& x, Vector& y) { axpy(alpha, x.span(), y.span()); }

inline bool all_finite(std::span<const double> a) {
    return std::all_of(a.begin(), a.end(), [](double x) { return std::isfinite(x); });
}
inline bool all_finite(const Vector& a) { return all_finite(a.span()); }

inline Vector unit_vector(std::size_t n, std::size_t i) {
    Vector e(n);
    e[i] = 1.0;
    return e;
}

// ---------------------------------------------------------------------------
// SymMatrix
// ---------------------------------------------------------------------------

/// Dense symmetric matrix, row-major. Construction stores (M + M^T)/2 so the
/// stored entries are exactly symmetric.
class SymMatrix {
public:
    SymMatrix() = default;

    explicit SymMatrix(std::size_t n) : n_(n), a_(n * n, 0.0) {}

    /// From a row-major n*n buffer; symmetrized.
    SymMatrix(std::size_t n, std::vector<double> row_major) : n_(n), a_(std::move(row_major)) {
        if (a_.size() != n * n) throw InvalidArgument("SymMatrix: buffer size is not n*n");
        symmetrize();
    }

    SymMatrix(std::initializer_list<std::initializer_list<double>> rows) : n_(rows.size()) {
        a_.reserve(n_ * n_);
        for (const auto& r : rows) {
            if (r.size() != n_) throw InvalidArgument("SymMatrix: rows must be square");
            a_.insert(a_.end(), r.begin(), r.end());
        }
        symmetrize();
    }

    static SymMatrix identity(std::size_t n) {
        SymMatrix m(n);
        for (std::size_t i = 0; i < n; ++i) m.a_[i * n + i] = 1.0;
        return m;
    }

    static SymMatrix diagonal(const Vector& d) {
        SymMatrix m(d.size());
        for (std::size_t i = 0; i < d.size(); ++i) m.a_[i * d.size() + i] = d[i];
        return m;
    }

    /// From columns c_j: builds sum_j scale_j c_j c_j^T. Handy for U diag(l) U^T.
    static SymMatrix from_spectrum(const std::vector<Vector>& columns, const Vector& eigenvalues) {
        if (columns.size() != eigenvalues.size()) throw InvalidArgument("from_spectrum: shape mismatch");
        const std::size_t n = columns.empty() ? 0 : columns.front().size();
        SymMatrix m(n);
        for (std::size_t j = 0; j < columns.size(); ++j) {
            const auto& c = columns[j];
            for (std::size_t r = 0; r < n; ++r) {
                const double s = eigenvalues[j] * c[r];
                for (std::size_t q = 0; q < n; ++q) m.a_[r * n + q] += s * c[q];
            }
        }
        m.symmetrize();
        return m;
    }

    std::size_t size() const noexcept { return n_; }
    bool empty() const noexcept { return n_ == 0; }

    double operator()(std::size_t i, std::size_t j) const { return a_[i * n_ + j]; }

    /// Writes both (i,j) and (j,i).
    void set(std::size_t i, std::size_t j, double v) {
        a_[i * n_ + j] = v;
        a_[j * n_ + i] = v;
    }

    const std::vector<double>& row_major() const noexcept { return a_; }

    Vector apply(const Vector& v) const {
        if (v.size() != n_) throw InvalidArgument("SymMatrix::apply: length mismatch");
        Vector out(n_);
        for (std::size_t i = 0; i < n_; ++i) {
            double s = 0.0;
            const double* row = &a_[i * n_];
            for (std::size_t j = 0; j < n_; ++j) s += row[j] * v[j];
            out[i] = s;
        }
        return out;
    }

    double quad_form(const Vector& v) const { return dot(v, apply(v)); }

    double trace() const {
        double t = 0.0;
        for (std::size_t i = 0; i < n_; ++i) t += a_[i * n_ + i];
        return t;
    }

    /// Tr(M^2) = ||M||_F^2 for symmetric M.
    double trace_of_square() const {
        double t = 0.0;
        for (double x : a_) t += x * x;
        return t;
    }

    double frobenius_norm() const { return std::sqrt(trace_of_square()); }

    bool all_finite() const { return stabkit::all_finite(std::span<const double>(a_)); }

    SymMatrix& operator+=(const SymMatrix& o) {
        check_same(o);
        for (std::size_t i = 0; i < a_.size(); ++i) a_[i] += o.a_[i];
        return *this;
    }
    SymMatrix& operator-=(const SymMatrix& o) {
        check_same(o);
        for (std::size_t i = 0; i < a_.size(); ++i) a_[i] -= o.a_[i];
        return *this;
    }
    SymMatrix& operator*=(double s) {
        for (double& x : a_) x *= s;
        return *this;
    }

    friend bool operator==(const SymMatrix&, const SymMatrix&) = default;

private:
    void symmetrize() {
        for (std::size_t i = 0; i < n_; ++i) {
            for (std::size_t j = i + 1; j < n_; ++j) {
                const double v = 0.5 * (a_[i * n_ + j] + a_[j * n_ + i]);
                a_[i * n_ + j] = v;
                a_[j * n_ + i] = v;
            }
        }
    }
    void check_same(const SymMatrix& o) const {
        if (o.n_ != n_) throw InvalidArgument("SymMatrix size mismatch");
    }

    std::size_t n_ = 0;
    std::vector<double> a_;
};

inline SymMatrix operator-(SymMatrix a, const SymMatrix& b) { return a -= b; }
inline SymMatrix operator+(SymMatrix a, const SymMatrix& b) { return a += b; }
inline SymMatrix operator*(double s, SymMatrix a) { return a *= s; }

// ---------------------------------------------------------------------------
// Counter-based RNG
// ---------------------------------------------------------------------------

namespace detail {

inline constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

/// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

}  // namespace detail

/// Derives an independent 64-bit seed from (seed, tag). Used to split one
/// user seed into per-replicate and per-component seeds.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) noexcept {
    return detail::mix64(detail::mix64(seed + detail::kGolden) ^ detail::mix64(tag * detail::kGolden + 1));
}

/// Counter-based random stream: draw i of stream (seed, stream_id) is a pure
/// function of (seed, stream_id, i). Copying a stream copies its position.
class RngStream {
public:
    constexpr RngStream(std::uint64_t seed, std::uint64_t stream_id) noexcept
        : seed_(seed), stream_id_(stream_id), key_(derive_seed(seed, stream_id)) {}

    std::uint64_t seed() const noexcept { return seed_; }
    std::uint64_t stream_id() const noexcept { return stream_id_; }
    std::uint64_t position() const noexcept { return counter_; }

    std::uint64_t next_u64() noexcept {
        return detail::mix64(key_ + (++counter_) * detail::kGolden);
    }

    /// Uniform on the open interval (0, 1).
    double next_uniform() noexcept {
        return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
    }

    double next_uniform(double lo, double hi) noexcept { return lo + (hi - lo) * next_uniform(); }

    /// Box-Muller, cosine branch only: two uniforms per normal.
    double next_normal() noexcept {
        const double u1 = next_uniform();
        const double u2 = next_uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

private:
    std::uint64_t seed_;
    std::uint64_t stream_id_;
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

/// n i.i.d. standard normal draws; advances `rng` by 2n counters.
inline Vector sample_std_normal(RngStream& rng, std::size_t n) {
    if (n == 0) throw InvalidArgument("sample_std_normal: n must be >= 1");
    Vector out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = rng.next_normal();
    return out;
}

// ---------------------------------------------------------------------------
// Dense symmetric eigendecomposition (cyclic Jacobi)
// ---------------------------------------------------------------------------

struct EigenDecomposition {
    Vector eigenvalues;            // descending by algebraic value
    std::vector<Vector> vectors;   // orthonormal, vectors[i] pairs with eigenvalues[i]
};

inline EigenDecomposition dense_sym_eigh(const SymMatrix& m) {
    const std::size_t n = m.size();
    if (n > kDenseOracleLimit) {
        throw SizeLimit("dense_sym_eigh: N=" + std::to_string(n) + " exceeds " +
                        std::to_string(kDenseOracleLimit));
    }
    if (!m.all_finite()) throw InvalidArgument("dense_sym_eigh: non-finite entries");

    std::vector<double> a = m.row_major();
    std::vector<double> v(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;

    const double fro = m.frobenius_norm();
    const double off_target = 1e-30 * fro * fro;
    for (int sweep = 0; sweep < 100 && fro > 0.0; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) off += a[p * n + q] * a[p * n + q];
        if (off <= off_target) break;

        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a[p * n + q];
                if (std::abs(apq) <= 1e-300) continue;
                const double theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t r = 0; r < n; ++r) {
                    const double arp = a[r * n + p];
                    const double arq = a[r * n + q];
                    a[r * n + p] = c * arp - s * arq;
                    a[r * n + q] = s * arp + c * arq;
                }
                for (std::size_t r = 0; r < n; ++r) {
                    const double apr = a[p * n + r];
                    const double aqr = a[q * n + r];
                    a[p * n + r] = c * apr - s * aqr;
                    a[q * n + r] = s * apr + c * aqr;
                }
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for (std::size_t r = 0; r < n; ++r) {
                    const double vrp = v[r * n + p];
                    const double vrq = v[r * n + q];
                    v[r * n + p] = c * vrp - s * vrq;
                    v[r * n + q] = s * vrp + c * vrq;
                }
            }
        }
    }

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return a[x * n + x] > a[y * n + y]; });

    EigenDecomposition out{Vector(n), {}};
    out.vectors.reserve(n);
    for (std::size_t j = 0; j < n; ++j) {
        const std::size_t col = order[j];
        out.eigenvalues[j] = a[col * n + col];
        Vector u(n);
        for (std::size_t r = 0; r < n; ++r) u[r] = v[r * n + col];
        out.vectors.push_back(std::move(u));
    }
    return out;
}

/// Spectral norm of a symmetric matrix via the dense oracle.
inline double spectral_norm(const SymMatrix& m) {
    if (m.empty()) return 0.0;
    const auto eig = dense_sym_eigh(m);
    return std::max(std::abs(eig.eigenvalues[0]), std::abs(eig.eigenvalues[m.size() - 1]));
}

// ---------------------------------------------------------------------------
// SPD solve (Cholesky)
// ---------------------------------------------------------------------------

inline Vector solve_spd(const SymMatrix& m, const Vector& b) {
    const std::size_t n = m.size();
    if (b.size() != n) throw InvalidArgument("solve_spd: rhs length mismatch");
    if (!m.all_finite() || !all_finite(b)) throw InvalidArgument("solve_spd: non-finite input");

    std::vector<double> l(n * n, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
        double d = m(j, j);
        for (std::size_t p = 0; p < j; ++p) d -= l[j * n + p] * l[j * n + p];
        if (!(d > 0.0)) throw FactorizationFailure(j, "solve_spd: matrix is not positive definite");
        const double ljj = std::sqrt(d);
        l[j * n + j] = ljj;
        for (std::size_t i = j + 1; i < n; ++i) {
            double s = m(i, j);
            for (std::size_t p = 0; p < j; ++p) s -= l[i * n + p] * l[j * n + p];
            l[i * n + j] = s / ljj;
        }
    }

    Vector y(n);
    for (std::size_t i = 0; i < n; ++i) {
        double s = b[i];
        for (std::size_t p = 0; p < i; ++p) s -= l[i * n + p] * y[p];
        y[i] = s / l[i * n + i];
    }
    Vector x(n);
    for (std::size_t ii = n; ii-- > 0;) {
        double s = y[ii];
        for (std::size_t p = ii + 1; p < n; ++p) s -= l[p * n + ii] * x[p];
        x[ii] = s / l[ii * n + ii];
    }
    return x;
}

// ---------------------------------------------------------------------------
// Small helpers shared across modules
// ---------------------------------------------------------------------------

/// Modified Gram-Schmidt, two passes. Columns that collapse below `drop_tol`
/// relative norm throw.
inline void orthonormalize(std::vector<Vector>& cols, double drop_tol = 1e-12) {
    for (std::size_t j = 0; j < cols.size(); ++j) {
        const double n0 = norm2(cols[j]);
        for (int pass = 0; pass < 2; ++pass) {
            for (std::size_t i = 0; i < j; ++i) axpy(-dot(cols[i], cols[j]), cols[i], cols[j]);
        }
        const double nj = norm2(cols[j]);
        if (!(nj > drop_tol * n0) || nj == 0.0) {
            throw InvalidArgument("orthonormalize: column " + std::to_string(j) + " is dependent");
        }
        cols[j] *= 1.0 / nj;
    }
}

/// ||U^T U - I||_F for a set of columns.
inline double orthonormality_error(const std::vector<Vector>& cols) {
    double s = 0.0;
    for (std::size_t i = 0; i < cols.size(); ++i) {
        for (std::size_t j = 0; j < cols.size(); ++j) {
            const double d = dot(cols[i], cols[j]) - (i == j ? 1.0 : 0.0);
            s += d * d;
        }
    }
    return std::sqrt(s);
}

/// ||U U^T - V V^T||_F without forming N x N matrices:
/// ||P - Q||_F^2 = |U| + |V| - 2 ||U^T V||_F^2 for orthonormal U, V.
inline double projector_distance(const std::vector<Vector>& u, const std::vector<Vector>& v) {
    double cross = 0.0;
    for (const auto& a : u)
        for (const auto& b : v) {
            const double d = dot(a, b);
            cross += d * d;
        }
    const double sq = static_cast<double>(u.size() + v.size()) - 2.0 * cross;
    return std::sqrt(std::max(0.0, sq));
}

/// Runs fn(i) for i in [0, n) over `threads` workers using static contiguous
/// chunks. Callers write into disjoint slots so results do not depend on the
/// thread count.
template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
    threads = std::max<std::size_t>(1, std::min(threads, n));
    if (threads == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    pool.reserve(threads);
    const std::size_t chunk = (n + threads - 1) / threads;
    for (std::size_t t = 0; t < threads; ++t) {
        const std::size_t lo = t * chunk;
        const std::size_t hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([lo, hi, t, &fn, &errors] {
            try {
                for (std::size_t i = lo; i < hi; ++i) fn(i);
            } catch (...) {
                errors[t] = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

}  // namespace stabkit
