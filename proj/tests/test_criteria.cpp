#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "stabkit/criteria.hpp"
#include "stabkit/family_spec.hpp"

using namespace stabkit;

namespace {

LossFamily scalar_family(const std::vector<double>& m, const std::vector<double>& q = {}) {
    std::vector<QuadraticSample> s;
    for (std::size_t i = 0; i < m.size(); ++i) {
        QuadraticSample x;
        x.center = Vector{m[i]};
        x.curvature.diag = Vector{q.empty() ? 1.0 : q[i]};
        s.push_back(x);
    }
    return LossFamily(QuadraticFamily(1, s));
}

LossFamily ensemble(std::size_t n, std::size_t samples, std::uint64_t seed, std::size_t d_true = 3) {
    return FamilySpec({{"kind", "quadratic"},
                       {"N", n},
                       {"max_samples", samples},
                       {"seed", seed},
                       {"ensemble", {{"law", "top_heavy"}, {"d_true", d_true}}}})
        .build();
}

LossFamily identical_samples(std::size_t n, std::size_t count, double offset = 0.0) {
    RngStream rng(3, 0);
    QuadraticSample s;
    s.center = sample_std_normal(rng, n);
    s.curvature.diag = Vector(n, 2.0);
    s.offset = offset;
    return LossFamily(QuadraticFamily(n, std::vector<QuadraticSample>(count, s)));
}

SubspaceBasis unit_basis() {
    SubspaceBasis b;
    b.vectors = {Vector{1.0}};
    b.eigenvalues = Vector{1.0};
    b.residuals = Vector{0.0};
    return b;
}

SurrogateCoefficients coeffs(double a, Vector c, SymMatrix B, double sigma) {
    SurrogateCoefficients co;
    co.a = a;
    co.c = std::move(c);
    co.B = std::move(B);
    co.sigma = sigma;
    return co;
}

SymMatrix random_symmetric(std::size_t d, RngStream& rng) {
    std::vector<double> a(d * d);
    for (auto& x : a) x = rng.next_normal();
    return SymMatrix(d, a);
}

// Independent closed form: a^2 + a s^2 TrB + s^2 |c|^2 + s^4/4 (2 TrB^2 + TrB^2).
double gm_oracle(double a, const Vector& c, const SymMatrix& B, double s) {
    double tr = 0, tr2 = 0;
    for (std::size_t i = 0; i < B.size(); ++i) {
        tr += B(i, i);
        for (std::size_t j = 0; j < B.size(); ++j) tr2 += B(i, j) * B(i, j);
    }
    const double s2 = s * s;
    return a * a + a * s2 * tr + s2 * dot(c, c) + s2 * s2 / 4 * (2 * tr2 + tr * tr);
}

bool within(const CriterionEstimate& a, const CriterionEstimate& b, double z) {
    const double se = std::sqrt(a.std_error * a.std_error + b.std_error * b.std_error);
    return std::abs(a.value - b.value) <= z * se + 1e-14 * std::abs(b.value);
}

}  // namespace

TEST(Delta1, IdenticalSamplesZero) {
    const LossFamily f = identical_samples(4, 5);
    EXPECT_EQ(delta1(f, 3, Vector(4, 0.5)).value, 0.0);
}

TEST(Delta1, ScalarHandValues) {
    EXPECT_DOUBLE_EQ(delta1(scalar_family({0.0, 2.0}), 1, Vector{0.0}).value, 1.0);
    EXPECT_NEAR(delta1(scalar_family({0.0, 2.0, 1.0}), 2, Vector{1.0}).value, 1.0 / 6.0, 1e-15);
    const auto e = delta1(scalar_family({0.0, 2.0}), 1, Vector{0.0});
    EXPECT_EQ(e.estimator, EstimatorKind::delta1);
    EXPECT_EQ(e.samples, 0u);
    EXPECT_EQ(e.std_error, 0.0);
}

TEST(DeltaPMc, IdenticalSamplesZero) {
    const LossFamily f = identical_samples(3, 4);
    const auto e = delta_p_mc(f, 2, ProbeSpec{ProbeKind::full_gaussian, 0.5, nullptr, Vector(3)}, 2.0, 100, 1);
    EXPECT_EQ(e.value, 0.0);
    EXPECT_EQ(e.std_error, 0.0);
}

TEST(DeltaPMc, SmallSigmaCollapsesToPointCriterion) {
    const LossFamily f = ensemble(8, 6, 2);
    RngStream rng(1, 0);
    const Vector w = sample_std_normal(rng, 8);
    const double a = increment(f, 5, w);
    const auto e = delta_p_mc(f, 5, ProbeSpec{ProbeKind::full_gaussian, 1e-8, nullptr, w}, 2.0, 64, 3);
    EXPECT_LE(std::abs(e.value - a * a), 1e-4 * a * a);
}

TEST(DeltaPMc, QuadraticMatchesFullSpaceClosedForm) {
    const LossFamily f = ensemble(10, 9, 4);
    const Weights w = minimize(f, 8, Weights{Vector(10)}, 1e-6, 10);
    for (double sigma : {0.05, 0.3}) {
        const auto mc = delta_p_mc(f, 8, ProbeSpec{ProbeKind::full_gaussian, sigma, nullptr, w.w}, 2.0, 100000, 5, 2);
        const auto gm = full_space_gm_oracle(f, 8, w.w, sigma);
        EXPECT_TRUE(within(mc, gm, 4.0)) << mc.value << " vs " << gm.value << " se " << mc.std_error;
    }
}

TEST(DeltaPMc, RejectsBadArguments) {
    const LossFamily f = ensemble(4, 3, 1);
    const ProbeSpec ok{ProbeKind::full_gaussian, 0.1, nullptr, Vector(4)};
    EXPECT_THROW(delta_p_mc(f, 1, ok, 0.5, 10, 1), InvalidArgument);
    EXPECT_THROW(delta_p_mc(f, 1, ok, 2.0, 1, 1), InvalidArgument);
    EXPECT_THROW(delta_p_mc(f, 1, ProbeSpec{ProbeKind::subspace_gaussian, 0.1, nullptr, Vector(4)}, 2.0, 10, 1),
                 InvalidArgument);
    const SubspaceBasis wrong = unit_basis();
    EXPECT_THROW(delta_p_mc(f, 1, ProbeSpec{ProbeKind::subspace_gaussian, 0.1, &wrong, Vector(4)}, 2.0, 10, 1),
                 InvalidArgument);
}

TEST(DeltaPMc, ThreadCountDoesNotChangeResult) {
    const LossFamily f = ensemble(6, 5, 7);
    const ProbeSpec p{ProbeKind::full_gaussian, 0.2, nullptr, Vector(6, 0.1)};
    const auto a = delta_p_mc(f, 4, p, 2.0, 5000, 9, 1);
    const auto b = delta_p_mc(f, 4, p, 2.0, 5000, 9, 3);
    EXPECT_EQ(a.value, b.value);
    EXPECT_EQ(a.std_error, b.std_error);
}

TEST(DirectMc, IdenticalSamplesZero) {
    const LossFamily f = identical_samples(4, 3);
    const auto b = dense_top_d(SymMatrix::identity(4), 2);
    const auto e = direct_mc(f, 2, Vector(4), b, 0.1, 100, 1);
    EXPECT_EQ(e.value, 0.0);
    EXPECT_EQ(e.std_error, 0.0);
}

TEST(DirectMc, ScalarHandExample) {
    // q = (1, 3), k = 1, w* = 0: increment(z) = z^2 / 2, so E = 0.75 sigma^4.
    const LossFamily f = scalar_family({0.0, 0.0}, {1.0, 3.0});
    const double sigma = 0.5;
    const auto e = direct_mc(f, 1, Vector{0.0}, unit_basis(), sigma, 200000, 2);
    EXPECT_NEAR(e.value, 0.75 * std::pow(sigma, 4), 5 * e.std_error);
    EXPECT_EQ(e.estimator, EstimatorKind::direct_mc);
}

TEST(DirectMc, AgreesWithClosedFormOnQuadratics) {
    const LossFamily f = ensemble(20, 9, 8, 4);
    const Weights w = minimize(f, 8, Weights{Vector(20)}, 1e-6, 10);
    const auto b = dense_top_d(dense_hessian_oracle(f, 8, w.w), 4);
    for (double sigma : {1e-3, 0.1}) {
        const auto co = surrogate_coeffs(f, 8, w, b, sigma);
        const auto d = direct_mc(f, 8, w.w, b, sigma, 10000, 11);
        const auto q = quad_mc(co, 10000, 11);
        const auto g = gm_closed_form(co);
        EXPECT_TRUE(within(d, g, 4.0));
        EXPECT_TRUE(within(q, g, 4.0));
        EXPECT_TRUE(within(d, q, 4.0));
    }
}

TEST(SurrogateCoeffs, ScalarHandExample) {
    const LossFamily f = scalar_family({0.0, 0.0}, {1.0, 3.0});
    const auto co = surrogate_coeffs(f, 1, Weights{Vector{0.0}}, unit_basis(), 0.5);
    EXPECT_NEAR(co.a, 0.0, 1e-15);
    EXPECT_NEAR(co.c[0], 0.0, 1e-15);
    EXPECT_NEAR(co.B(0, 0), 1.0, 1e-14);
    EXPECT_NEAR(gm_closed_form(co).value, 0.75 * std::pow(0.5, 4), 1e-15);
}

TEST(SurrogateCoeffs, IdenticalSamplesAllZero) {
    const LossFamily f = identical_samples(5, 4, 0.3);
    const auto b = dense_top_d(SymMatrix::identity(5), 3);
    const Weights w = minimize(f, 3, Weights{Vector(5)}, 1e-6, 10);
    const auto co = surrogate_coeffs(f, 3, w, b, 0.1);
    EXPECT_NEAR(co.a, 0.0, 1e-15);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_NEAR(co.c[i], 0.0, 1e-14);
        for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(co.B(i, j), 0.0, 1e-14);
    }
}

TEST(SurrogateCoeffs, MatchesDenseOracle) {
    const LossFamily f = ensemble(40, 12, 9, 5);
    const Weights w = minimize(f, 10, Weights{Vector(40)}, 1e-6, 10);
    const SymMatrix hk = dense_hessian_oracle(f, 10, w.w);
    const SymMatrix hk1 = dense_hessian_oracle(f, 11, w.w);
    const auto b = dense_top_d(hk, 5);
    const auto co = surrogate_coeffs(f, 10, w, b, 1e-3);
    const SymMatrix diff = hk1 - hk;
    const Vector g = gradient(f, 11, w.w);
    for (std::size_t i = 0; i < 5; ++i) {
        EXPECT_NEAR(co.c[i], dot(b.vectors[i], g), 1e-12);
        for (std::size_t j = 0; j < 5; ++j) {
            const double oracle = dot(b.vectors[i], diff.apply(b.vectors[j]));
            EXPECT_NEAR(co.B(i, j), oracle, 1e-10);
        }
    }
    EXPECT_NEAR(co.a, empirical_risk(f, 11, w.w) - empirical_risk(f, 10, w.w), 1e-12);
    EXPECT_EQ(co.k, 10u);
    EXPECT_EQ(co.rank(), 5u);
}

TEST(QuadMc, ConstantIntegrand) {
    const auto e = quad_mc(coeffs(1.0, Vector(2), SymMatrix(2), 0.7), 100, 1);
    EXPECT_EQ(e.value, 1.0);
    EXPECT_EQ(e.std_error, 0.0);
}

TEST(QuadMc, FourthMomentOfGaussian) {
    const auto e = quad_mc(coeffs(0.0, Vector(1), SymMatrix::diagonal(Vector{2.0}), 1.0), 1000000, 2);
    EXPECT_NEAR(e.value, 3.0, 5 * e.std_error);
}

TEST(QuadMc, ConvergesToClosedForm) {
    RngStream rng(4, 0);
    for (int t = 0; t < 20; ++t) {
        const std::size_t d = 1 + t % 10;
        const auto co = coeffs(rng.next_normal(), sample_std_normal(rng, d), random_symmetric(d, rng),
                               rng.next_uniform(0.1, 1.0));
        const auto g = gm_closed_form(co);
        for (std::size_t S : {1000u, 10000u, 100000u}) {
            const auto q = quad_mc(co, S, derive_seed(t, S));
            EXPECT_LE(std::abs(q.value - g.value), 4 * q.std_error) << "set " << t << " S=" << S;
        }
    }
}

TEST(GmClosedForm, HandValues) {
    EXPECT_DOUBLE_EQ(gm_closed_form(coeffs(1.0, Vector(3), SymMatrix(3), 2.0)).value, 1.0);
    EXPECT_DOUBLE_EQ(gm_closed_form(coeffs(0.0, Vector{1.0, 0.0}, SymMatrix(2), 0.5)).value, 0.25);
    EXPECT_DOUBLE_EQ(gm_closed_form(coeffs(1.0, Vector{1.0}, SymMatrix::diagonal(Vector{2.0}), 1.0)).value, 7.0);
}

TEST(GmClosedForm, SevenCrossCheckedByQuadMc) {
    const auto co = coeffs(1.0, Vector{1.0}, SymMatrix::diagonal(Vector{2.0}), 1.0);
    const auto q = quad_mc(co, 1000000, 3);
    EXPECT_NEAR(q.value, 7.0, 5 * q.std_error);
}

TEST(GmClosedForm, MatchesIndependentFormula) {
    RngStream rng(5, 0);
    for (int t = 0; t < 50; ++t) {
        const std::size_t d = 1 + t % 8;
        const double a = rng.next_normal(), s = rng.next_uniform(0.01, 2.0);
        const Vector c = sample_std_normal(rng, d);
        const SymMatrix B = random_symmetric(d, rng);
        const double want = gm_oracle(a, c, B, s);
        EXPECT_NEAR(gm_closed_form(coeffs(a, c, B, s)).value, want, 1e-12 * std::abs(want));
    }
}

TEST(GmClosedForm, NeverNegative) {
    RngStream rng(6, 0);
    for (int t = 0; t < 200; ++t) {
        const std::size_t d = 1 + t % 6;
        const auto co = coeffs(rng.next_normal(), sample_std_normal(rng, d), random_symmetric(d, rng),
                               rng.next_uniform(0.01, 3.0));
        EXPECT_GE(gm_closed_form(co).value, 0.0);
    }
}

TEST(SpectralClosedForm, HandValues) {
    EXPECT_EQ(spectral_closed_form(Vector(3), 1.0).value, 0.0);
    EXPECT_DOUBLE_EQ(spectral_closed_form(Vector{1.0, 1.0}, 1.0).value, 2.0);
    EXPECT_DOUBLE_EQ(spectral_closed_form(Vector{3.0}, 1.0).value, 6.75);
    EXPECT_DOUBLE_EQ(gm_closed_form(coeffs(0.0, Vector(1), SymMatrix::diagonal(Vector{3.0}), 1.0)).value, 6.75);
}

TEST(SpectralClosedForm, EqualsClosedFormOnDiagonals) {
    RngStream rng(7, 0);
    for (int t = 0; t < 50; ++t) {
        const std::size_t d = 1 + t % 10;
        Vector delta(d);
        for (auto& x : delta) x = rng.next_uniform(-2.0, 2.0);
        const double s = rng.next_uniform(0.01, 2.0);
        const double sp = spectral_closed_form(delta, s).value;
        EXPECT_NEAR(gm_closed_form(coeffs(0.0, Vector(d), SymMatrix::diagonal(delta), s)).value, sp, 1e-12 * sp);
    }
}

TEST(SpectralClosedForm, RotationInvariant) {
    RngStream rng(8, 0);
    const std::size_t d = 5;
    std::vector<Vector> q;
    for (std::size_t j = 0; j < d; ++j) q.push_back(sample_std_normal(rng, d));
    orthonormalize(q);
    const Vector delta{2.0, -1.0, 0.5, 0.25, 3.0};
    const SymMatrix B = SymMatrix::from_spectrum(q, delta);
    const double sp = spectral_closed_form(delta, 0.3).value;
    EXPECT_NEAR(gm_closed_form(coeffs(0.0, Vector(d), B, 0.3)).value, sp, 1e-12 * sp);
}

TEST(Extremality, HandExample) {
    const auto r = extremality_argmax(Vector{3.0, 2.0, 1.0}, 2);
    EXPECT_EQ(r.index_set, (std::vector<std::size_t>{1, 2}));
    EXPECT_DOUBLE_EQ(r.objective, 51.0);
    EXPECT_TRUE(r.is_top_d);
    EXPECT_LT(2 * (9 + 1) + 16, r.objective);  // {1,3}: 36
    EXPECT_LT(2 * (4 + 1) + 9, r.objective);   // {2,3}: 19
}

TEST(Extremality, TiesReturnLeadingSet) {
    const auto r = extremality_argmax(Vector(6, 1.5), 3);
    EXPECT_EQ(r.index_set, (std::vector<std::size_t>{1, 2, 3}));
}

TEST(Extremality, SingleDominantDirection) {
    const auto r = extremality_argmax(Vector{5.0, 0.0, 0.0, 0.0}, 1);
    EXPECT_EQ(r.index_set, (std::vector<std::size_t>{1}));
    EXPECT_DOUBLE_EQ(r.objective, 75.0);
    EXPECT_DOUBLE_EQ(r.value, 75.0 / 4);
}

TEST(Extremality, TopSetWinsOnRandomSortedInputs) {
    RngStream rng(9, 0);
    for (int t = 0; t < 50; ++t) {
        const std::size_t n = 1 + t % 12;
        std::vector<double> v(n);
        for (auto& x : v) x = rng.next_uniform(0.0, 4.0);
        std::sort(v.begin(), v.end(), std::greater<>());
        for (std::size_t D = 1; D <= n; ++D) EXPECT_TRUE(extremality_argmax(Vector(v), D).is_top_d);
    }
}

TEST(Extremality, RejectsUnsortedOrNegative) {
    EXPECT_THROW(extremality_argmax(Vector{1.0, 2.0}, 1), InvalidArgument);
    EXPECT_THROW(extremality_argmax(Vector{1.0, -2.0}, 1), InvalidArgument);
    EXPECT_THROW(extremality_argmax(Vector{1.0}, 2), InvalidArgument);
}

TEST(BoundConstants, IdenticalSamples) {
    const LossFamily f = identical_samples(3, 4, 0.8);
    const Vector w = f.quadratic()->sample(1).center;  // loss = 0.8 here
    const auto c = empirical_bound_constants(f, 3, w);
    EXPECT_DOUBLE_EQ(c.M_loss, 0.8);
    EXPECT_NEAR(c.M_grad, norm2(f.sample_gradient(1, w)), 1e-15);
    EXPECT_NEAR(c.M_hess, 2.0, 1e-12);
}

TEST(BoundConstants, ScalarHandExample) {
    const auto c = empirical_bound_constants(scalar_family({0.0, 0.0}, {1.0, 3.0}), 1, Vector{0.0});
    EXPECT_EQ(c.M_loss, 0.0);
    EXPECT_EQ(c.M_grad, 0.0);
    EXPECT_NEAR(c.M_hess, 3.0, 1e-12);
}

TEST(RateBound, HandValues) {
    EXPECT_DOUBLE_EQ(rate_bound({1.0, 1.0, 1.0}, 1.0, 1, 1), 6.0);
    EXPECT_EQ(rate_bound({0.0, 0.0, 0.0}, 0.3, 4, 7), 0.0);
}

TEST(RateBound, DominatesDirectMcOnQuadraticSweep) {
    const LossFamily f = ensemble(24, 33, 10, 4);
    for (std::size_t k : {2u, 8u, 32u}) {
        const Weights w = minimize(f, k, Weights{Vector(24)}, 1e-6, 10);
        const auto c = empirical_bound_constants(f, k, w.w);
        const auto basis = dense_top_d(dense_hessian_oracle(f, k, w.w), 5);
        for (std::size_t D : {1u, 5u}) {
            for (double sigma : {1e-3, 1e-1}) {
                const auto e = direct_mc(f, k, w.w, basis.leading(D), sigma, 2000, 3);
                EXPECT_LE(e.value / rate_bound(c, sigma, D, k), 1.0) << "k=" << k << " D=" << D;
            }
        }
    }
}

TEST(Json, EstimateRoundTrip) {
    CriterionEstimate e{0.125, EstimatorKind::quad_mc, 4096, 1e-5, 77};
    const auto r = estimate_from_json(to_json(e));
    EXPECT_EQ(r.value, e.value);
    EXPECT_EQ(r.estimator, e.estimator);
    EXPECT_EQ(r.samples, e.samples);
    EXPECT_EQ(r.std_error, e.std_error);
    EXPECT_EQ(r.seed, e.seed);
}

TEST(Json, CoefficientsRoundTrip) {
    RngStream rng(11, 0);
    const auto co = coeffs(0.3, sample_std_normal(rng, 3), random_symmetric(3, rng), 0.01);
    const auto r = coefficients_from_json(to_json(co));
    EXPECT_EQ(r.a, co.a);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(r.c[i], co.c[i]);
        for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(r.B(i, j), co.B(i, j));
    }
    EXPECT_EQ(gm_closed_form(r).value, gm_closed_form(co).value);
}

TEST(Estimators, NamesRoundTrip) {
    for (auto k : {EstimatorKind::delta1, EstimatorKind::delta_p_mc, EstimatorKind::direct_mc, EstimatorKind::quad_mc,
                   EstimatorKind::gm_closed_form, EstimatorKind::spectral_closed_form})
        EXPECT_EQ(parse_estimator(to_string(k)), k);
    EXPECT_THROW(parse_estimator("median"), Error);
}
