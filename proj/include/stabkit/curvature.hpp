#pragma once

// Matrix-free top-D eigenpairs of a symmetric operator by deflated, shifted
// power iteration, plus the on-disk form of the resulting basis.

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "stabkit/errors.hpp"
#include "stabkit/loss_family.hpp"
#include "stabkit/numerics.hpp"

namespace stabkit {

using LinearOperator = std::function<Vector(const Vector&)>;

struct EigSolverConfig {
    std::size_t D = 1;
    std::size_t max_iters = 1000;  // T_eig, per eigenpair
    double tol = 1e-6;
    std::size_t shift_probes = 30;
    std::uint64_t seed = 0;
};

/// Orthonormal top-D eigenvectors with eigenvalues in descending algebraic
/// order and the certified residual of each pair.
struct SubspaceBasis {
    std::vector<Vector> vectors;
    Vector eigenvalues;
    Vector residuals;
    std::size_t iterations_used = 0;
    std::size_t hvp_calls = 0;
    double wall_time = 0.0;
    double shift = 0.0;

    std::size_t rank() const noexcept { return vectors.size(); }
    std::size_t dimension() const noexcept { return vectors.empty() ? 0 : vectors.front().size(); }

    /// U z
    Vector lift(const Vector& z) const {
        if (z.size() != rank()) throw InvalidArgument("SubspaceBasis::lift: coordinate length mismatch");
        Vector out(dimension());
        for (std::size_t j = 0; j < rank(); ++j) axpy(z[j], vectors[j], out);
        return out;
    }

    /// U^T v
    Vector project(const Vector& v) const {
        Vector out(rank());
        for (std::size_t j = 0; j < rank(); ++j) out[j] = dot(vectors[j], v);
        return out;
    }

    /// The leading d pairs. Deflation is sequential, so this equals a fresh
    /// solve with D = d under the same seed.
    SubspaceBasis leading(std::size_t d) const {
        if (d > rank()) throw InvalidArgument("SubspaceBasis::leading: d exceeds basis rank");
        SubspaceBasis out = *this;
        out.vectors.resize(d);
        out.eigenvalues = Vector(std::vector<double>(eigenvalues.begin(), eigenvalues.begin() + d));
        out.residuals = Vector(std::vector<double>(residuals.begin(), residuals.begin() + d));
        return out;
    }
};

class EigenSolverNonConvergence : public Error {
public:
    EigenSolverNonConvergence(SubspaceBasis partial, std::size_t failed_index, const std::string& detail)
        : Error("non-convergence", detail), partial_(std::move(partial)), failed_index_(failed_index) {}

    /// Pairs found before the failure plus the failing pair (last entry).
    const SubspaceBasis& partial() const noexcept { return partial_; }
    std::size_t failed_index() const noexcept { return failed_index_; }

private:
    SubspaceBasis partial_;
    std::size_t failed_index_;
};

namespace curvature_detail {

inline constexpr double kInnerResidualFactor = 0.1;
inline constexpr std::size_t kStallIterations = 20;

inline void deflate(Vector& v, const std::vector<Vector>& found) {
    for (int pass = 0; pass < 2; ++pass)
        for (const auto& u : found) axpy(-dot(u, v), u, v);
}

inline bool normalize(Vector& v) {
    const double nv = norm2(v);
    if (!(nv > 0.0)) return false;
    v *= 1.0 / nv;
    return true;
}

}  // namespace curvature_detail

/// Sequential extraction of the algebraically largest eigenpairs.
///
/// A norm estimate mu from `shift_probes` plain power steps turns the
/// operator H + 1.1 mu I positive, so its dominant direction in the
/// complement of the pairs already found is the next algebraic-top
/// eigenvector. Iteration j stops once the Rayleigh quotient has settled
/// (|change| <= tol max(1, |lambda|)) and the residual is below
/// 0.1 tol (1 + |lambda_1|); each pair is then certified against
/// tol (1 + |lambda_1|) with one more operator call. The inner factor keeps
/// errors in earlier pairs from flooring the residual of later ones; when
/// such a floor is hit anyway (no 1% improvement for 20 steps) the iteration
/// stops as soon as the residual is within the certification bound.
inline SubspaceBasis top_d_eigenpairs(const LinearOperator& op, std::size_t n, const EigSolverConfig& cfg) {
    using namespace curvature_detail;
    if (cfg.D < 1) throw InvalidArgument("top_d_eigenpairs: D must be >= 1");
    if (cfg.D > n) throw InvalidArgument("top_d_eigenpairs: D=" + std::to_string(cfg.D) + " exceeds N=" + std::to_string(n));
    if (!(cfg.tol > 0.0)) throw InvalidArgument("top_d_eigenpairs: tol must be > 0");

    const auto t0 = std::chrono::steady_clock::now();
    SubspaceBasis out;
    auto apply = [&](const Vector& v) {
        ++out.hvp_calls;
        Vector y = op(v);
        if (y.size() != n) throw InvalidArgument("top_d_eigenpairs: operator returned wrong length");
        return y;
    };

    double norm_est = 0.0;
    {
        RngStream rng(cfg.seed, 0);
        Vector v = sample_std_normal(rng, n);
        normalize(v);
        for (std::size_t p = 0; p < cfg.shift_probes; ++p) {
            Vector y = apply(v);
            const double ny = norm2(y);
            norm_est = std::max({norm_est, std::abs(dot(v, y)), ny});
            if (!(ny > 0.0)) break;
            v = (1.0 / ny) * std::move(y);
        }
    }
    const double mu = norm_est > 0.0 ? 1.1 * norm_est : 1.0;
    out.shift = mu;

    std::vector<double> lambdas, residuals;
    for (std::size_t j = 0; j < cfg.D; ++j) {
        RngStream rng(cfg.seed, j + 1);
        Vector v = sample_std_normal(rng, n);
        deflate(v, out.vectors);
        if (!normalize(v)) throw InvalidArgument("top_d_eigenpairs: start vector collapsed under deflation");

        bool converged = false;
        double lam_prev = 0.0;
        double best_res = std::numeric_limits<double>::infinity();
        std::size_t best_t = 0;
        std::size_t t = 0;
        while (t < cfg.max_iters) {
            ++t;
            Vector y = apply(v);
            const double lam = dot(v, y);
            Vector r = y;
            axpy(-lam, v, r);
            const double res = norm2(r);
            const double lam1 = lambdas.empty() ? lam : lambdas.front();
            const double bound = cfg.tol * (1.0 + std::abs(lam1));
            if (res < 0.99 * best_res) {
                best_res = res;
                best_t = t;
            }
            const bool settled = t > 1 && std::abs(lam - lam_prev) <= cfg.tol * std::max(1.0, std::abs(lam));
            const bool stalled = res <= bound && t - best_t >= kStallIterations;
            if (settled && (res <= kInnerResidualFactor * bound || stalled)) {
                converged = true;
                break;
            }
            lam_prev = lam;
            axpy(mu, v, y);
            deflate(y, out.vectors);
            if (!normalize(y)) break;  // operator annihilated the complement
            v = std::move(y);
        }
        out.iterations_used += t;

        const Vector yc = apply(v);
        const double lam = dot(v, yc);
        Vector rc = yc;
        axpy(-lam, v, rc);
        const double res = norm2(rc);
        out.vectors.push_back(v);
        lambdas.push_back(lam);
        residuals.push_back(res);

        const double bound = cfg.tol * (1.0 + std::abs(lambdas.front()));
        if (!converged || res > bound) {
            out.eigenvalues = Vector(lambdas);
            out.residuals = Vector(residuals);
            out.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            throw EigenSolverNonConvergence(std::move(out), j,
                                            "eigenpair " + std::to_string(j + 1) + " not certified within " +
                                                std::to_string(cfg.max_iters) + " iterations (residual " +
                                                std::to_string(res) + ")");
        }
    }

    // Deflation already yields descending order on gapped spectra; sort to
    // make it an invariant.
    std::vector<std::size_t> order(cfg.D);
    for (std::size_t i = 0; i < cfg.D; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return lambdas[a] > lambdas[b]; });
    SubspaceBasis sorted = out;
    sorted.vectors.clear();
    sorted.eigenvalues = Vector(cfg.D);
    sorted.residuals = Vector(cfg.D);
    for (std::size_t i = 0; i < cfg.D; ++i) {
        sorted.vectors.push_back(out.vectors[order[i]]);
        sorted.eigenvalues[i] = lambdas[order[i]];
        sorted.residuals[i] = residuals[order[i]];
    }
    sorted.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return sorted;
}

inline std::size_t hvp_call_count(const SubspaceBasis& basis) { return basis.hvp_calls; }

/// H^(k)(w) as a matrix-free operator.
inline LinearOperator hessian_operator(const LossFamily& f, std::size_t k, const Vector& w) {
    return [&f, k, w](const Vector& v) { return hvp(f, k, w, v); };
}

/// Top-D pairs of H^(k)(w) from the dense oracle (N <= 512). Used where the
/// power iteration cannot separate clustered tail eigenvalues.
inline SubspaceBasis dense_top_d(const SymMatrix& h, std::size_t d) {
    if (d < 1 || d > h.size()) throw InvalidArgument("dense_top_d: D must lie in [1, N]");
    const auto t0 = std::chrono::steady_clock::now();
    const auto eig = dense_sym_eigh(h);
    SubspaceBasis out;
    out.eigenvalues = Vector(d);
    out.residuals = Vector(d);
    for (std::size_t j = 0; j < d; ++j) {
        out.vectors.push_back(eig.vectors[j]);
        out.eigenvalues[j] = eig.eigenvalues[j];
        Vector r = h.apply(eig.vectors[j]);
        axpy(-eig.eigenvalues[j], eig.vectors[j], r);
        out.residuals[j] = norm2(r);
    }
    out.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

/// max over trials of |u^T (H v) - v^T (H u)| / (||u|| ||v||).
inline double max_asymmetry(const LinearOperator& op, std::size_t n, std::size_t trials, std::uint64_t seed) {
    double worst = 0.0;
    for (std::size_t t = 0; t < trials; ++t) {
        RngStream rng(seed, t);
        const Vector u = sample_std_normal(rng, n);
        const Vector v = sample_std_normal(rng, n);
        const double a = std::abs(dot(u, op(v)) - dot(v, op(u))) / (norm2(u) * norm2(v));
        worst = std::max(worst, a);
    }
    return worst;
}

// ---------------------------------------------------------------------------
// Sidecar format: JSON header + little-endian float64 payload, D x N row-major.
// ---------------------------------------------------------------------------

inline constexpr const char* kSubspaceFormat = "stabkit-subspace";

namespace curvature_detail {

inline std::uint64_t to_little_endian(std::uint64_t v) {
    if constexpr (std::endian::native == std::endian::little) return v;
    std::uint64_t r = 0;
    for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xFF) << (8 * (7 - i));
    return r;
}

}  // namespace curvature_detail

/// Writes `<stem>.json` and `<stem>.bin`. `meta` is merged into the header
/// (cache keys etc.).
inline void save_subspace(const SubspaceBasis& b, const std::filesystem::path& stem, const nlohmann::json& meta = {}) {
    using curvature_detail::to_little_endian;
    const auto header_path = std::filesystem::path(stem.string() + ".json");
    const auto payload_path = std::filesystem::path(stem.string() + ".bin");
    if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());

    std::ofstream bin(payload_path, std::ios::binary | std::ios::trunc);
    if (!bin) throw IoError("cannot write " + payload_path.string());
    for (const auto& u : b.vectors) {
        for (double x : u) {
            const std::uint64_t le = to_little_endian(std::bit_cast<std::uint64_t>(x));
            bin.write(reinterpret_cast<const char*>(&le), sizeof le);
        }
    }
    bin.close();
    if (!bin) throw IoError("short write to " + payload_path.string());

    nlohmann::json h = meta.is_object() ? meta : nlohmann::json::object();
    h["format"] = kSubspaceFormat;
    h["version"] = 1;
    h["N"] = b.dimension();
    h["D"] = b.rank();
    h["eigenvalues"] = b.eigenvalues.values();
    h["residuals"] = b.residuals.values();
    h["iterations_used"] = b.iterations_used;
    h["hvp_calls"] = b.hvp_calls;
    h["payload"] = payload_path.filename().string();
    h["payload_bytes"] = b.rank() * b.dimension() * 8;
    h["layout"] = "float64 little-endian, D x N row-major";
    std::ofstream js(header_path, std::ios::trunc);
    if (!js) throw IoError("cannot write " + header_path.string());
    js << h.dump(2) << '\n';
}

/// Reads a sidecar written by save_subspace. Throws IoError on any
/// inconsistency (missing files, truncated payload, header mismatch).
inline SubspaceBasis load_subspace(const std::filesystem::path& stem, nlohmann::json* header_out = nullptr) {
    using curvature_detail::to_little_endian;
    const auto header_path = std::filesystem::path(stem.string() + ".json");
    std::ifstream js(header_path);
    if (!js) throw IoError("cannot read " + header_path.string());
    nlohmann::json h = nlohmann::json::parse(js, nullptr, false);
    if (h.is_discarded() || !h.is_object() || h.value("format", "") != kSubspaceFormat)
        throw IoError(header_path.string() + ": not a subspace header");
    std::size_t n = 0, d = 0;
    SubspaceBasis b;
    try {
        n = h.at("N").get<std::size_t>();
        d = h.at("D").get<std::size_t>();
        b.eigenvalues = Vector(h.at("eigenvalues").get<std::vector<double>>());
        b.residuals = Vector(h.at("residuals").get<std::vector<double>>());
        b.iterations_used = h.value("iterations_used", std::size_t{0});
    } catch (const nlohmann::json::exception& e) {
        throw IoError(header_path.string() + ": malformed header (" + e.what() + ")");
    }
    if (b.eigenvalues.size() != d || b.residuals.size() != d) throw IoError(header_path.string() + ": D mismatch");

    const auto payload_path = header_path.parent_path() / h.value("payload", stem.filename().string() + ".bin");
    std::error_code ec;
    const auto bytes = std::filesystem::file_size(payload_path, ec);
    if (ec || bytes != d * n * 8)
        throw IoError(payload_path.string() + ": payload size " + (ec ? std::string("unknown") : std::to_string(bytes)) +
                      " != " + std::to_string(d * n * 8));
    std::ifstream bin(payload_path, std::ios::binary);
    for (std::size_t j = 0; j < d; ++j) {
        Vector u(n);
        for (std::size_t i = 0; i < n; ++i) {
            std::uint64_t le = 0;
            bin.read(reinterpret_cast<char*>(&le), sizeof le);
            u[i] = std::bit_cast<double>(to_little_endian(le));
        }
        if (!bin || !all_finite(u)) throw IoError(payload_path.string() + ": corrupt payload");
        b.vectors.push_back(std::move(u));
    }
    if (header_out) *header_out = std::move(h);
    return b;
}

}  // namespace stabkit
