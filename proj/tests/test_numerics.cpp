#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "stabkit/numerics.hpp"

using namespace stabkit;

namespace {

SymMatrix random_symmetric(std::size_t n, std::uint64_t seed) {
    RngStream rng(seed, 0);
    std::vector<double> a(n * n);
    for (auto& x : a) x = rng.next_normal();
    return SymMatrix(n, a);
}

double frob(const SymMatrix& m) { return std::sqrt(m.trace_of_square()); }

SymMatrix reconstruct(const EigenDecomposition& e) { return SymMatrix::from_spectrum(e.vectors, e.eigenvalues); }

}  // namespace

TEST(Rng, SameSeedAndStreamRepeat) {
    RngStream a(1, 0), b(1, 0);
    const Vector x = sample_std_normal(a, 3);
    const Vector y = sample_std_normal(b, 3);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(x[i], y[i]);
}

TEST(Rng, DistinctStreamsUncorrelated) {
    RngStream a(1, 0), b(1, 1);
    const std::size_t n = 10000;
    const Vector x = sample_std_normal(a, n);
    const Vector y = sample_std_normal(b, n);
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < n; ++i) mx += x[i], my += y[i];
    mx /= n;
    my /= n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    EXPECT_LT(std::abs(sxy / std::sqrt(sxx * syy)), 0.05);
}

TEST(Rng, MomentsOfAMillionDraws) {
    RngStream rng(7, 0);
    const std::size_t n = 1000000;
    const Vector x = sample_std_normal(rng, n);
    double m = 0;
    for (double v : x) m += v;
    m /= n;
    double var = 0;
    for (double v : x) var += (v - m) * (v - m);
    var /= n - 1;
    EXPECT_LT(std::abs(m), 4.0 / std::sqrt(double(n)));
    EXPECT_LT(std::abs(var - 1.0), 0.01);
}

TEST(Rng, ZeroLengthRejected) {
    RngStream rng(1, 0);
    try {
        sample_std_normal(rng, 0);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.category(), "invalid-argument");
    }
}

TEST(Rng, CounterAdvancesTwoPerNormal) {
    RngStream rng(3, 4);
    sample_std_normal(rng, 5);
    EXPECT_EQ(rng.position(), 10u);
}

TEST(Rng, UniformStaysInOpenInterval) {
    RngStream rng(11, 2);
    for (int i = 0; i < 100000; ++i) {
        const double u = rng.next_uniform();
        ASSERT_GT(u, 0.0);
        ASSERT_LT(u, 1.0);
    }
}

TEST(Rng, DerivedSeedsDiffer) {
    EXPECT_NE(derive_seed(1, 0), derive_seed(1, 1));
    EXPECT_NE(derive_seed(1, 0), derive_seed(2, 0));
    EXPECT_EQ(derive_seed(5, 9), derive_seed(5, 9));
}

TEST(Eigh, DiagonalFiveOne) {
    const auto e = dense_sym_eigh(SymMatrix::diagonal(Vector{1.0, 5.0}));
    EXPECT_DOUBLE_EQ(e.eigenvalues[0], 5.0);
    EXPECT_DOUBLE_EQ(e.eigenvalues[1], 1.0);
    EXPECT_NEAR(std::abs(e.vectors[0][1]), 1.0, 1e-14);
    EXPECT_NEAR(e.vectors[0][0], 0.0, 1e-14);
}

TEST(Eigh, IdentityReconstructs) {
    const auto e = dense_sym_eigh(SymMatrix::identity(4));
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(e.eigenvalues[i], 1.0, 1e-15);
    EXPECT_LE(frob(reconstruct(e) - SymMatrix::identity(4)), 1e-12);
    EXPECT_LE(orthonormality_error(e.vectors), 1e-12);
}

TEST(Eigh, RandomFiftyReconstructs) {
    const SymMatrix m = random_symmetric(50, 99);
    const auto e = dense_sym_eigh(m);
    EXPECT_LE(frob(reconstruct(e) - m), 1e-8 * frob(m));
}

TEST(Eigh, ResidualsAndOrderOnFiftyDraws) {
    for (std::uint64_t s = 0; s < 50; ++s) {
        const std::size_t n = 2 + s * 2;
        const SymMatrix m = random_symmetric(n, 1000 + s);
        const auto e = dense_sym_eigh(m);
        const double scale = 1.0 + spectral_norm(m);
        for (std::size_t i = 0; i < n; ++i) {
            Vector r = m.apply(e.vectors[i]);
            axpy(-e.eigenvalues[i], e.vectors[i], r);
            ASSERT_LE(norm2(r), 1e-8 * scale) << "n=" << n << " pair " << i;
            if (i > 0) {
                ASSERT_GE(e.eigenvalues[i - 1], e.eigenvalues[i]);
            }
        }
        ASSERT_LE(orthonormality_error(e.vectors), 1e-8);
    }
}

TEST(Eigh, OrdersAlgebraicallyNotByMagnitude) {
    const auto e = dense_sym_eigh(SymMatrix::diagonal(Vector{3.0, -5.0, 1.0}));
    EXPECT_DOUBLE_EQ(e.eigenvalues[0], 3.0);
    EXPECT_DOUBLE_EQ(e.eigenvalues[2], -5.0);
}

TEST(Eigh, SizeLimit) {
    try {
        dense_sym_eigh(SymMatrix(kDenseOracleLimit + 1));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.category(), "size-limit");
    }
}

TEST(Eigh, NonFiniteRejected) {
    SymMatrix m = SymMatrix::identity(3);
    m = m + SymMatrix::diagonal(Vector{0.0, std::nan(""), 0.0});
    try {
        dense_sym_eigh(m);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.category(), "invalid-argument");
    }
}

TEST(SpectralNorm, MatchesLargestMagnitude) {
    EXPECT_DOUBLE_EQ(spectral_norm(SymMatrix::diagonal(Vector{3.0, -5.0, 1.0})), 5.0);
}

TEST(SolveSpd, IdentitySystem) {
    const Vector b{1.0, -2.0, 3.5};
    const Vector x = solve_spd(SymMatrix::identity(3), b);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(x[i], b[i]);
}

TEST(SolveSpd, DiagonalSystem) {
    const Vector x = solve_spd(SymMatrix::diagonal(Vector{2.0, 4.0}), Vector{2.0, 8.0});
    EXPECT_DOUBLE_EQ(x[0], 1.0);
    EXPECT_DOUBLE_EQ(x[1], 2.0);
}

TEST(SolveSpd, RandomThirtyResidual) {
    const std::size_t n = 30;
    RngStream rng(5, 0);
    std::vector<Vector> cols;
    for (std::size_t j = 0; j < n; ++j) cols.push_back(sample_std_normal(rng, n));
    const SymMatrix m = SymMatrix::from_spectrum(cols, Vector(n, 1.0)) + SymMatrix::identity(n);
    const Vector b = sample_std_normal(rng, n);
    const Vector x = solve_spd(m, b);
    Vector r = m.apply(x);
    r -= b;
    EXPECT_LE(norm2(r), 1e-10 * (frob(m) * norm2(x) + norm2(b)));
}

TEST(SolveSpd, IndefiniteNamesPivot) {
    try {
        solve_spd(SymMatrix::diagonal(Vector{1.0, 2.0, -1.0}), Vector{1.0, 1.0, 1.0});
        FAIL();
    } catch (const FactorizationFailure& e) {
        EXPECT_EQ(e.category(), "factorization-failure");
        EXPECT_EQ(e.pivot(), 2u);
    }
}

TEST(SymMatrix, ConstructionSymmetrizes) {
    const SymMatrix m(2, {1.0, 2.0, 4.0, 3.0});
    EXPECT_DOUBLE_EQ(m(0, 1), 3.0);
    EXPECT_DOUBLE_EQ(m(1, 0), 3.0);
}

TEST(SymMatrix, TraceAndQuadForm) {
    const SymMatrix m{{2.0, 1.0}, {1.0, 3.0}};
    EXPECT_DOUBLE_EQ(m.trace(), 5.0);
    EXPECT_DOUBLE_EQ(m.trace_of_square(), 4.0 + 1.0 + 1.0 + 9.0);
    EXPECT_DOUBLE_EQ(m.quad_form(Vector{1.0, 1.0}), 7.0);
}

TEST(Orthonormalize, ProducesOrthonormalColumns) {
    RngStream rng(8, 0);
    std::vector<Vector> cols;
    for (int j = 0; j < 6; ++j) cols.push_back(sample_std_normal(rng, 20));
    orthonormalize(cols);
    EXPECT_EQ(cols.size(), 6u);
    EXPECT_LE(orthonormality_error(cols), 1e-12);
}

TEST(ProjectorDistance, ZeroForRotatedBasisOfSameSpan) {
    std::vector<Vector> a{Vector{1.0, 0.0, 0.0}, Vector{0.0, 1.0, 0.0}};
    const double c = std::cos(0.3), s = std::sin(0.3);
    std::vector<Vector> b{Vector{c, s, 0.0}, Vector{-s, c, 0.0}};
    EXPECT_NEAR(projector_distance(a, b), 0.0, 1e-14);
    std::vector<Vector> d{Vector{1.0, 0.0, 0.0}, Vector{0.0, 0.0, 1.0}};
    EXPECT_NEAR(projector_distance(a, d), std::sqrt(2.0), 1e-14);
}

TEST(ParallelFor, ResultIndependentOfThreadCount) {
    const std::size_t n = 5000;
    auto run = [&](std::size_t threads) {
        std::vector<double> v(n);
        parallel_for(n, threads, [&](std::size_t s) {
            RngStream r(42, s);
            v[s] = r.next_normal();
        });
        return v;
    };
    EXPECT_EQ(run(1), run(4));
}
