#pragma once

// Stabilization criteria and their estimators.
//
// Monte Carlo draw s always comes from RngStream(seed, s): the full-space
// probe takes N normals from it, the subspace probe takes D. Subspace
// estimators that share a seed therefore share their z draws, which is what
// makes delta_p_mc(p = 2, subspace) and direct_mc bit-identical and
// quad_mc directly comparable to both.

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "json.hpp"
#include "stabkit/curvature.hpp"
#include "stabkit/errors.hpp"
#include "stabkit/loss_family.hpp"
#include "stabkit/numerics.hpp"

namespace stabkit {

enum class EstimatorKind { delta1, delta_p_mc, direct_mc, quad_mc, gm_closed_form, spectral_closed_form };

inline std::string to_string(EstimatorKind e) {
    switch (e) {
        case EstimatorKind::delta1: return "delta1";
        case EstimatorKind::delta_p_mc: return "delta_p_mc";
        case EstimatorKind::direct_mc: return "direct_mc";
        case EstimatorKind::quad_mc: return "quad_mc";
        case EstimatorKind::gm_closed_form: return "gm_closed_form";
        case EstimatorKind::spectral_closed_form: return "spectral_closed_form";
    }
    return "unknown";
}

inline EstimatorKind parse_estimator(const std::string& s) {
    for (auto e : {EstimatorKind::delta1, EstimatorKind::delta_p_mc, EstimatorKind::direct_mc, EstimatorKind::quad_mc,
                   EstimatorKind::gm_closed_form, EstimatorKind::spectral_closed_form})
        if (to_string(e) == s) return e;
    throw InvalidArgument("unknown estimator '" + s + "'");
}

enum class ProbeKind { point, full_gaussian, subspace_gaussian };

/// Probing law around `center`. `basis` is non-owning and must outlive the
/// spec; required for subspace_gaussian.
struct ProbeSpec {
    ProbeKind kind = ProbeKind::full_gaussian;
    double sigma = 0.0;
    const SubspaceBasis* basis = nullptr;
    Vector center;
};

struct SurrogateCoefficients {
    double a = 0.0;
    Vector c;
    SymMatrix B;
    double sigma = 0.0;
    std::size_t k = 0;
    double achieved_grad_norm = std::numeric_limits<double>::quiet_NaN();

    std::size_t rank() const noexcept { return c.size(); }
};

struct CriterionEstimate {
    double value = 0.0;
    EstimatorKind estimator = EstimatorKind::delta1;
    std::size_t samples = 0;
    double std_error = 0.0;
    std::uint64_t seed = 0;
};

struct BoundConstants {
    double M_loss = 0.0;
    double M_grad = 0.0;
    double M_hess = 0.0;
};

// ---------------------------------------------------------------------------
// Monte Carlo plumbing
// ---------------------------------------------------------------------------

namespace criteria_detail {

/// Mean and standard error of per-draw values; summation is sequential in
/// draw order regardless of how the values were produced.
inline std::pair<double, double> mean_and_stderr(const std::vector<double>& v) {
    const double n = static_cast<double>(v.size());
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= n;
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    const double sd = v.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
    return {mean, sd / std::sqrt(n)};
}

inline double abs_pow(double x, double p) {
    if (p == 2.0) return x * x;
    if (p == 1.0) return std::abs(x);
    return std::pow(std::abs(x), p);
}

/// Probe draw s: (w_s, z_s) where z_s are the subspace coordinates (empty for
/// the full-space probe).
inline Vector probe_point(const ProbeSpec& probe, std::uint64_t seed, std::size_t s) {
    RngStream rng(seed, s);
    if (probe.kind == ProbeKind::full_gaussian) {
        Vector w = probe.center;
        axpy(probe.sigma, sample_std_normal(rng, w.size()), w);
        return w;
    }
    Vector z = sample_std_normal(rng, probe.basis->rank());
    z *= probe.sigma;
    return probe.center + probe.basis->lift(z);
}

}  // namespace criteria_detail

// ---------------------------------------------------------------------------
// Criteria
// ---------------------------------------------------------------------------

/// |L_{k+1}(w*) - L_k(w*)|
inline CriterionEstimate delta1(const LossFamily& f, std::size_t k, const Vector& w_star) {
    return {std::abs(increment(f, k, w_star)), EstimatorKind::delta1, 0, 0.0, 0};
}

/// Monte Carlo estimate of E_q |L_{k+1}(w) - L_k(w)|^p for a Gaussian probe.
inline CriterionEstimate delta_p_mc(const LossFamily& f, std::size_t k, const ProbeSpec& probe, double p,
                                    std::size_t S, std::uint64_t seed, std::size_t threads = 1) {
    if (!(p >= 1.0)) throw InvalidArgument("delta_p_mc: p must be >= 1");
    if (probe.kind == ProbeKind::point) throw InvalidArgument("delta_p_mc: point probe; use delta1");
    if (S < 2) throw InvalidArgument("delta_p_mc: S must be >= 2");
    if (!(probe.sigma > 0.0)) throw InvalidArgument("delta_p_mc: sigma must be > 0");
    f.check_dim(probe.center);
    f.check_count(k + 1, "delta_p_mc");
    if (probe.kind == ProbeKind::subspace_gaussian) {
        if (probe.basis == nullptr || probe.basis->rank() == 0)
            throw InvalidArgument("delta_p_mc: subspace probe requires a basis");
        if (probe.basis->dimension() != f.dimension())
            throw InvalidArgument("delta_p_mc: basis N does not match family dimension");
    }
    std::vector<double> vals(S);
    parallel_for(S, threads, [&](std::size_t s) {
        vals[s] = criteria_detail::abs_pow(increment(f, k, criteria_detail::probe_point(probe, seed, s)), p);
    });
    const auto [mean, se] = criteria_detail::mean_and_stderr(vals);
    return {mean, EstimatorKind::delta_p_mc, S, se, seed};
}

/// Direct subspace Monte Carlo of the true criterion:
/// mean over z_s ~ N(0, sigma^2 I_D) of (L_{k+1} - L_k)(w* + U z_s)^2.
inline CriterionEstimate direct_mc(const LossFamily& f, std::size_t k, const Vector& w_star, const SubspaceBasis& basis,
                                   double sigma, std::size_t S, std::uint64_t seed, std::size_t threads = 1) {
    ProbeSpec probe{ProbeKind::subspace_gaussian, sigma, &basis, w_star};
    CriterionEstimate e = delta_p_mc(f, k, probe, 2.0, S, seed, threads);
    e.estimator = EstimatorKind::direct_mc;
    return e;
}

/// (a_k, c_k, B_k) at w* on span(U). a_k goes through the increment identity;
/// B_k is assembled from D HVPs with H^(k+1) and D with H^(k).
inline SurrogateCoefficients surrogate_coeffs(const LossFamily& f, std::size_t k, const Weights& w_star,
                                              const SubspaceBasis& basis, double sigma = 0.0) {
    f.check_count(k + 1, "surrogate_coeffs");
    f.check_dim(w_star.w);
    if (basis.dimension() != f.dimension()) throw InvalidArgument("surrogate_coeffs: basis N mismatch");
    const std::size_t d = basis.rank();
    SurrogateCoefficients out;
    out.k = k;
    out.sigma = sigma;
    out.achieved_grad_norm = w_star.grad_norm;
    out.a = increment(f, k, w_star.w);
    out.c = basis.project(gradient(f, k + 1, w_star.w));
    std::vector<double> b(d * d);
    for (std::size_t j = 0; j < d; ++j) {
        Vector col = hvp(f, k + 1, w_star.w, basis.vectors[j]);
        col -= hvp(f, k, w_star.w, basis.vectors[j]);
        const Vector proj = basis.project(col);
        for (std::size_t i = 0; i < d; ++i) b[i * d + j] = proj[i];
    }
    out.B = SymMatrix(d, std::move(b));
    return out;
}

/// Cross-check of B_k through A_k = (H_{k+1} - H^(k)) / (k+1), using the
/// per-sample HVP of sample k+1.
inline SymMatrix compressed_hessian_difference_single_sample(const LossFamily& f, std::size_t k, const Vector& w_star,
                                                             const SubspaceBasis& basis) {
    const std::size_t d = basis.rank();
    std::vector<double> b(d * d);
    const double scale = 1.0 / static_cast<double>(k + 1);
    for (std::size_t j = 0; j < d; ++j) {
        Vector col = f.sample_hvp(k + 1, w_star, basis.vectors[j]);
        col -= hvp(f, k, w_star, basis.vectors[j]);
        const Vector proj = basis.project(col);
        for (std::size_t i = 0; i < d; ++i) b[i * d + j] = scale * proj[i];
    }
    return SymMatrix(d, std::move(b));
}

/// Monte Carlo of the quadratic surrogate; O(S D^2), independent of N.
inline CriterionEstimate quad_mc(const SurrogateCoefficients& co, std::size_t S, std::uint64_t seed,
                                 std::size_t threads = 1) {
    if (S < 2) throw InvalidArgument("quad_mc: S must be >= 2");
    const std::size_t d = co.rank();
    if (co.B.size() != d) throw InvalidArgument("quad_mc: B and c dimensions differ");
    std::vector<double> vals(S);
    parallel_for(S, threads, [&](std::size_t s) {
        RngStream rng(seed, s);
        double q = co.a;
        if (d > 0) {
            Vector z = sample_std_normal(rng, d);
            z *= co.sigma;
            q += dot(co.c, z) + 0.5 * co.B.quad_form(z);
        }
        vals[s] = q * q;
    });
    const auto [mean, se] = criteria_detail::mean_and_stderr(vals);
    return {mean, EstimatorKind::quad_mc, S, se, seed};
}

/// Closed-form E[(a + c^T z + 1/2 z^T B z)^2], z ~ N(0, sigma^2 I_D):
/// a^2 + a sigma^2 Tr B + sigma^2 ||c||^2 + sigma^4/4 (2 Tr B^2 + (Tr B)^2).
inline CriterionEstimate gm_closed_form(const SurrogateCoefficients& co) {
    const double s2 = co.sigma * co.sigma;
    const double tr = co.B.empty() ? 0.0 : co.B.trace();
    const double tr2 = co.B.empty() ? 0.0 : co.B.trace_of_square();
    const double cc = co.c.empty() ? 0.0 : dot(co.c, co.c);
    const double quartic = 0.25 * s2 * s2 * (2.0 * tr2 + tr * tr);
    const double value = co.a * co.a + co.a * s2 * tr + s2 * cc + quartic;
    const double scale = co.a * co.a + std::abs(co.a) * s2 * std::abs(tr) + s2 * cc + quartic;
    if (value < -1e-12 * scale)
        throw Error("internal", "gm_closed_form: negative second moment " + std::to_string(value));
    return {std::max(0.0, value), EstimatorKind::gm_closed_form, 0, 0.0, 0};
}

/// sigma^4/4 (2 sum d_i^2 + (sum d_i)^2) for eigenvalue increments d_i.
inline CriterionEstimate spectral_closed_form(const Vector& deltas, double sigma) {
    double sum = 0.0, sq = 0.0;
    for (double d : deltas) {
        sum += d;
        sq += d * d;
    }
    const double s4 = sigma * sigma * sigma * sigma;
    return {0.25 * s4 * (2.0 * sq + sum * sum), EstimatorKind::spectral_closed_form, 0, 0.0, 0};
}

struct ExtremalityResult {
    std::vector<std::size_t> index_set;  // 1-based, ascending
    double objective = 0.0;              // F(I) = 2 sum d_i^2 + (sum d_i)^2
    double value = 0.0;                  // sigma^4/4 F(I)
    bool is_top_d = false;               // index_set == {1..D}
};

/// Brute force over all size-D index sets; ties keep the lexicographically
/// smallest set.
inline ExtremalityResult extremality_argmax(const Vector& deltas, std::size_t D, double sigma = 1.0) {
    const std::size_t n = deltas.size();
    if (n > 20) throw SizeLimit("extremality_argmax: N=" + std::to_string(n) + " exceeds 20");
    if (D < 1 || D > n) throw InvalidArgument("extremality_argmax: D must lie in [1, N]");
    for (std::size_t i = 0; i < n; ++i) {
        if (!(deltas[i] >= 0.0)) throw InvalidArgument("extremality_argmax: increments must be non-negative");
        if (i > 0 && deltas[i] > deltas[i - 1]) throw InvalidArgument("extremality_argmax: increments must be sorted non-increasing");
    }
    auto objective = [&](const std::vector<std::size_t>& idx) {
        double sum = 0.0, sq = 0.0;
        for (std::size_t i : idx) {
            sum += deltas[i];
            sq += deltas[i] * deltas[i];
        }
        return 2.0 * sq + sum * sum;
    };
    std::vector<std::size_t> idx(D);
    for (std::size_t i = 0; i < D; ++i) idx[i] = i;
    ExtremalityResult best;
    best.objective = -1.0;
    while (true) {
        const double fval = objective(idx);
        if (fval > best.objective) {
            best.objective = fval;
            best.index_set = idx;
        }
        // next combination in lexicographic order
        std::size_t pos = D;
        while (pos > 0 && idx[pos - 1] == n - D + pos - 1) --pos;
        if (pos == 0) break;
        ++idx[pos - 1];
        for (std::size_t j = pos; j < D; ++j) idx[j] = idx[j - 1] + 1;
    }
    best.is_top_d = true;
    for (std::size_t i = 0; i < D; ++i) {
        best.is_top_d = best.is_top_d && best.index_set[i] == i;
        ++best.index_set[i];
    }
    const double s4 = sigma * sigma * sigma * sigma;
    best.value = 0.25 * s4 * best.objective;
    return best;
}

namespace criteria_detail {

inline double operator_norm_power(const std::function<Vector(const Vector&)>& op, std::size_t n, std::uint64_t seed,
                                  std::size_t iters) {
    RngStream rng(seed, 0);
    Vector v = sample_std_normal(rng, n);
    v *= 1.0 / norm2(v);
    double est = 0.0;
    for (std::size_t t = 0; t < iters; ++t) {
        Vector y = op(v);
        const double ny = norm2(y);
        est = std::max({est, ny, std::abs(dot(v, y))});
        if (!(ny > 0.0)) break;
        v = (1.0 / ny) * std::move(y);
    }
    return est;
}

}  // namespace criteria_detail

/// ||H_i(w)||_2: exact (dense) for quadratic families with N <= 512, 300
/// power steps on per-sample HVPs otherwise.
inline double sample_hessian_norm(const LossFamily& f, std::size_t i, const Vector& w) {
    f.check_sample(i);
    const std::size_t n = f.dimension();
    if (const auto* q = f.quadratic(); q && n <= kDenseOracleLimit) return spectral_norm(q->hessian(i));
    return criteria_detail::operator_norm_power([&](const Vector& v) { return f.sample_hvp(i, w, v); }, n,
                                                derive_seed(0xB0, i), 300);
}

/// Empirical constants of the uniform-boundedness assumption at w*:
/// M_l = max_{i<=k+1} |l_i(w*)|, M_g = ||g_{k+1}(w*)||, M_H = max_{i<=k+1} ||H_i(w*)||_2.
/// `hess_norms`, when given, holds ||H_i|| at index i-1 (quadratic families,
/// where it does not depend on w).
inline BoundConstants empirical_bound_constants(const LossFamily& f, std::size_t k, const Vector& w_star,
                                                const std::vector<double>* hess_norms = nullptr) {
    f.check_count(k + 1, "empirical_bound_constants");
    f.check_dim(w_star);
    BoundConstants c;
    for (std::size_t i = 1; i <= k + 1; ++i) c.M_loss = std::max(c.M_loss, std::abs(f.sample_loss(i, w_star)));
    c.M_grad = norm2(f.sample_gradient(k + 1, w_star));
    if (hess_norms != nullptr && hess_norms->size() < k + 1)
        throw InvalidArgument("empirical_bound_constants: hess_norms shorter than k+1");
    for (std::size_t i = 1; i <= k + 1; ++i) {
        const double h = hess_norms != nullptr ? (*hess_norms)[i - 1] : sample_hessian_norm(f, i, w_star);
        c.M_hess = std::max(c.M_hess, h);
    }
    return c;
}

/// (12 M_l^2 + 3 sigma^2 M_g^2 + 3 sigma^4 (D^2 + 2D) M_H^2) / (k+1)^2
inline double rate_bound(const BoundConstants& c, double sigma, std::size_t D, std::size_t k) {
    if (k < 1) throw InvalidArgument("rate_bound: k must be >= 1");
    const double s2 = sigma * sigma;
    const double d = static_cast<double>(D);
    const double num = 12.0 * c.M_loss * c.M_loss + 3.0 * s2 * c.M_grad * c.M_grad +
                       3.0 * s2 * s2 * (d * d + 2.0 * d) * c.M_hess * c.M_hess;
    const double kp1 = static_cast<double>(k + 1);
    return num / (kp1 * kp1);
}

/// Full-space Gaussian-moment value of the isotropic mean-squared criterion:
/// the closed form with U = I_N, c = g^(k+1)(w*), B = H^(k+1) - H^(k). N <= 512.
inline CriterionEstimate full_space_gm_oracle(const LossFamily& f, std::size_t k, const Vector& w_star, double sigma) {
    SurrogateCoefficients co;
    co.k = k;
    co.sigma = sigma;
    co.a = increment(f, k, w_star);
    co.c = gradient(f, k + 1, w_star);
    co.B = dense_hessian_oracle(f, k + 1, w_star) - dense_hessian_oracle(f, k, w_star);
    return gm_closed_form(co);
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const CriterionEstimate& e) {
    return {{"value", e.value},
            {"estimator", to_string(e.estimator)},
            {"S", e.samples},
            {"std_error", e.std_error},
            {"seed", e.seed}};
}

inline CriterionEstimate estimate_from_json(const nlohmann::json& j) {
    CriterionEstimate e;
    e.value = j.at("value").get<double>();
    e.estimator = parse_estimator(j.at("estimator").get<std::string>());
    e.samples = j.at("S").get<std::size_t>();
    e.std_error = j.at("std_error").get<double>();
    e.seed = j.at("seed").get<std::uint64_t>();
    return e;
}

inline nlohmann::json to_json(const SurrogateCoefficients& c) {
    const std::size_t d = c.rank();
    nlohmann::json b = nlohmann::json::array();
    for (std::size_t i = 0; i < d; ++i) {
        std::vector<double> row(d);
        for (std::size_t j = 0; j < d; ++j) row[j] = c.B(i, j);
        b.push_back(row);
    }
    nlohmann::json out = {{"a", c.a}, {"c", c.c.values()}, {"B", b}, {"sigma", c.sigma}, {"k", c.k}};
    out["achieved_grad_norm"] = std::isfinite(c.achieved_grad_norm) ? nlohmann::json(c.achieved_grad_norm) : nlohmann::json();
    return out;
}

inline SurrogateCoefficients coefficients_from_json(const nlohmann::json& j) {
    SurrogateCoefficients c;
    c.a = j.at("a").get<double>();
    c.c = Vector(j.at("c").get<std::vector<double>>());
    const auto rows = j.at("B").get<std::vector<std::vector<double>>>();
    const std::size_t d = rows.size();
    std::vector<double> buf;
    for (const auto& r : rows) {
        if (r.size() != d) throw InvalidArgument("coefficients: B must be square");
        buf.insert(buf.end(), r.begin(), r.end());
    }
    c.B = SymMatrix(d, std::move(buf));
    if (c.c.size() != d) throw InvalidArgument("coefficients: length(c) != dim(B)");
    c.sigma = j.at("sigma").get<double>();
    c.k = j.at("k").get<std::size_t>();
    c.achieved_grad_norm = j.at("achieved_grad_norm").is_null() ? std::numeric_limits<double>::quiet_NaN()
                                                                 : j.at("achieved_grad_norm").get<double>();
    return c;
}

}  // namespace stabkit
