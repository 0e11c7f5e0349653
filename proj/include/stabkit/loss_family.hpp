#pragma once

// Growable per-sample loss families.
//
// Sample indices are 1-based throughout this header: sample i is the i-th
// draw of the nested sequence, L_k averages samples 1..k, and the increment
// at k adds sample k+1.

#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "stabkit/errors.hpp"
#include "stabkit/numerics.hpp"

namespace stabkit {

enum class FamilyKind { quadratic, mlp };

inline std::string to_string(FamilyKind k) { return k == FamilyKind::quadratic ? "quadratic" : "mlp"; }

// ---------------------------------------------------------------------------
// Quadratic family: l_i(w) = 1/2 (w - m_i)^T Q_i (w - m_i) + b_i
// ---------------------------------------------------------------------------

/// Q = dense + diag(diag) + sum_j f_j f_j^T. Any part may be empty; the
/// factored form keeps N = 10^4 ensembles at O(N r) per sample.
struct Curvature {
    SymMatrix dense;
    Vector diag;
    std::vector<Vector> factors;

    /// out += scale * Q v
    void apply_add(const Vector& v, double scale, Vector& out) const {
        if (!dense.empty()) axpy(scale, dense.apply(v), out);
        if (!diag.empty()) {
            for (std::size_t i = 0; i < v.size(); ++i) out[i] += scale * diag[i] * v[i];
        }
        for (const auto& f : factors) axpy(scale * dot(f, v), f, out);
    }

    Vector apply(const Vector& v) const {
        Vector out(v.size());
        apply_add(v, 1.0, out);
        return out;
    }

    double quad_form(const Vector& v) const {
        double q = 0.0;
        if (!dense.empty()) q += dense.quad_form(v);
        for (std::size_t i = 0; i < diag.size(); ++i) q += diag[i] * v[i] * v[i];
        for (const auto& f : factors) {
            const double p = dot(f, v);
            q += p * p;
        }
        return q;
    }

    SymMatrix to_dense(std::size_t n) const {
        SymMatrix m = dense.empty() ? SymMatrix(n) : dense;
        if (!diag.empty()) m += SymMatrix::diagonal(diag);
        if (!factors.empty()) m += SymMatrix::from_spectrum(factors, Vector(factors.size(), 1.0));
        return m;
    }
};

struct QuadraticSample {
    Vector center;
    Curvature curvature;
    double offset = 0.0;
};

class QuadraticFamily {
public:
    QuadraticFamily(std::size_t dim, std::vector<QuadraticSample> samples)
        : dim_(dim), samples_(std::move(samples)) {
        if (dim_ == 0) throw InvalidArgument("quadratic family: N must be >= 1");
        if (samples_.empty()) throw InvalidArgument("quadratic family: needs at least one sample");
        for (std::size_t i = 0; i < samples_.size(); ++i) {
            const auto& s = samples_[i];
            const auto& c = s.curvature;
            const bool ok = s.center.size() == dim_ && (c.dense.empty() || c.dense.size() == dim_) &&
                            (c.diag.empty() || c.diag.size() == dim_);
            bool factors_ok = true;
            for (const auto& f : c.factors) factors_ok = factors_ok && f.size() == dim_;
            if (!ok || !factors_ok) {
                throw InvalidArgument("quadratic family: sample " + std::to_string(i + 1) +
                                      " has a component whose length differs from N");
            }
        }
    }

    std::size_t dimension() const noexcept { return dim_; }
    std::size_t max_samples() const noexcept { return samples_.size(); }
    const QuadraticSample& sample(std::size_t i) const { return samples_.at(i - 1); }

    double loss(std::size_t i, const Vector& w) const {
        const auto& s = sample(i);
        return 0.5 * s.curvature.quad_form(w - s.center) + s.offset;
    }

    Vector gradient(std::size_t i, const Vector& w) const {
        const auto& s = sample(i);
        return s.curvature.apply(w - s.center);
    }

    Vector hvp(std::size_t i, const Vector& v) const { return sample(i).curvature.apply(v); }

    SymMatrix hessian(std::size_t i) const { return sample(i).curvature.to_dense(dim_); }

private:
    std::size_t dim_;
    std::vector<QuadraticSample> samples_;
};

// ---------------------------------------------------------------------------
// MLP family: l_i(w) = 1/2 ||f_w(x_i) - y_i||^2
// ---------------------------------------------------------------------------

enum class Activation { tanh, softplus };

inline std::string to_string(Activation a) { return a == Activation::tanh ? "tanh" : "softplus"; }

/// Fully connected network with a smooth activation on hidden layers and a
/// linear output layer. Flat parameter layout is layer-major; within a layer
/// the weight matrix (out x in, row-major) precedes the bias (out).
class MlpFamily {
public:
    MlpFamily(std::vector<std::size_t> layers, Activation activation, std::vector<Vector> inputs,
              std::vector<Vector> targets)
        : layers_(std::move(layers)),
          activation_(activation),
          inputs_(std::move(inputs)),
          targets_(std::move(targets)) {
        if (layers_.size() < 2) throw InvalidArgument("mlp family: needs at least input and output layer");
        for (std::size_t s : layers_)
            if (s == 0) throw InvalidArgument("mlp family: layer sizes must be >= 1");
        if (inputs_.empty() || inputs_.size() != targets_.size())
            throw InvalidArgument("mlp family: inputs/targets must be non-empty and equal length");
        for (std::size_t i = 0; i < inputs_.size(); ++i) {
            if (inputs_[i].size() != layers_.front() || targets_[i].size() != layers_.back())
                throw InvalidArgument("mlp family: sample " + std::to_string(i + 1) + " has wrong shape");
        }
        dim_ = 0;
        for (std::size_t l = 1; l < layers_.size(); ++l) dim_ += layers_[l] * layers_[l - 1] + layers_[l];
    }

    std::size_t dimension() const noexcept { return dim_; }
    std::size_t max_samples() const noexcept { return inputs_.size(); }
    const std::vector<std::size_t>& layers() const noexcept { return layers_; }
    Activation activation() const noexcept { return activation_; }
    const Vector& input(std::size_t i) const { return inputs_.at(i - 1); }
    const Vector& target(std::size_t i) const { return targets_.at(i - 1); }

    Vector forward(const Vector& x, const Vector& w) const {
        Vector a = x;
        std::size_t off = 0;
        for (std::size_t l = 1; l < layers_.size(); ++l) {
            Vector z = affine(l, a, w, off);
            if (l + 1 < layers_.size())
                for (double& v : z) v = act(v);
            a = std::move(z);
        }
        return a;
    }

    double loss(std::size_t i, const Vector& w) const {
        const Vector r = forward(input(i), w) - target(i);
        return 0.5 * dot(r, r);
    }

    /// Analytic backpropagation.
    Vector gradient(std::size_t i, const Vector& w) const {
        check_params(w);
        const std::size_t n_layers = layers_.size();
        std::vector<Vector> pre(n_layers);   // z_l
        std::vector<Vector> post(n_layers);  // a_l
        post[0] = input(i);
        std::vector<std::size_t> offsets(n_layers, 0);
        std::size_t off = 0;
        for (std::size_t l = 1; l < n_layers; ++l) {
            offsets[l] = off;
            pre[l] = affine(l, post[l - 1], w, off);
            post[l] = pre[l];
            if (l + 1 < n_layers)
                for (double& v : post[l]) v = act(v);
        }

        Vector grad(dim_);
        Vector delta = post[n_layers - 1] - target(i);
        for (std::size_t l = n_layers - 1; l >= 1; --l) {
            const std::size_t in = layers_[l - 1];
            const std::size_t out = layers_[l];
            const std::size_t w_off = offsets[l];
            const std::size_t b_off = w_off + out * in;
            for (std::size_t r = 0; r < out; ++r) {
                for (std::size_t c = 0; c < in; ++c) grad[w_off + r * in + c] = delta[r] * post[l - 1][c];
                grad[b_off + r] = delta[r];
            }
            if (l == 1) break;
            Vector back(in);
            for (std::size_t r = 0; r < out; ++r)
                for (std::size_t c = 0; c < in; ++c) back[c] += w[w_off + r * in + c] * delta[r];
            for (std::size_t c = 0; c < in; ++c) back[c] *= act_prime(pre[l - 1][c]);
            delta = std::move(back);
        }
        return grad;
    }

private:
    void check_params(const Vector& w) const {
        if (w.size() != dim_)
            throw InvalidArgument("mlp family: parameter vector has length " + std::to_string(w.size()) +
                                  ", expected " + std::to_string(dim_));
    }

    Vector affine(std::size_t l, const Vector& a, const Vector& w, std::size_t& off) const {
        if (l == 1) check_params(w);
        const std::size_t in = layers_[l - 1];
        const std::size_t out = layers_[l];
        Vector z(out);
        for (std::size_t r = 0; r < out; ++r) {
            double s = w[off + out * in + r];
            for (std::size_t c = 0; c < in; ++c) s += w[off + r * in + c] * a[c];
            z[r] = s;
        }
        off += out * in + out;
        return z;
    }

    double act(double z) const {
        if (activation_ == Activation::tanh) return std::tanh(z);
        return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
    }

    double act_prime(double z) const {
        if (activation_ == Activation::tanh) {
            const double t = std::tanh(z);
            return 1.0 - t * t;
        }
        return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
    }

    std::vector<std::size_t> layers_;
    Activation activation_;
    std::vector<Vector> inputs_;
    std::vector<Vector> targets_;
    std::size_t dim_ = 0;
};

// ---------------------------------------------------------------------------
// LossFamily
// ---------------------------------------------------------------------------

enum class Provenance { initial, minimizer };

struct Weights {
    Vector w;
    Provenance provenance = Provenance::initial;
    std::size_t k = 0;  // minimizer of L_k
    double grad_norm = std::numeric_limits<double>::quiet_NaN();
    bool converged = true;
    std::size_t iterations = 0;

    static Weights initial(Vector w) { return Weights{std::move(w)}; }
};

class LossFamily {
public:
    explicit LossFamily(QuadraticFamily q) : impl_(std::move(q)) {}
    explicit LossFamily(MlpFamily m) : impl_(std::move(m)) {}

    FamilyKind kind() const noexcept {
        return std::holds_alternative<QuadraticFamily>(impl_) ? FamilyKind::quadratic : FamilyKind::mlp;
    }

    std::size_t dimension() const {
        return std::visit([](const auto& f) { return f.dimension(); }, impl_);
    }
    std::size_t max_samples() const {
        return std::visit([](const auto& f) { return f.max_samples(); }, impl_);
    }

    const QuadraticFamily* quadratic() const noexcept { return std::get_if<QuadraticFamily>(&impl_); }
    const MlpFamily* mlp() const noexcept { return std::get_if<MlpFamily>(&impl_); }

    double sample_loss(std::size_t i, const Vector& w) const {
        check_sample(i);
        check_dim(w);
        return std::visit([&](const auto& f) { return f.loss(i, w); }, impl_);
    }

    Vector sample_gradient(std::size_t i, const Vector& w) const {
        check_sample(i);
        check_dim(w);
        return std::visit([&](const auto& f) { return f.gradient(i, w); }, impl_);
    }

    /// H_i(w) v. Exact for the quadratic family; central difference of the
    /// analytic per-sample gradient for the MLP.
    Vector sample_hvp(std::size_t i, const Vector& w, const Vector& v) const {
        check_sample(i);
        check_dim(w);
        check_dim(v);
        if (const auto* q = quadratic()) return q->hvp(i, v);
        const double h = fd_step(w, v);
        Vector gp = sample_gradient(i, w + h * v);
        gp -= sample_gradient(i, w - h * v);
        return (0.5 / h) * std::move(gp);
    }

    void check_sample(std::size_t i) const {
        if (i < 1 || i > max_samples())
            throw InvalidArgument("sample index " + std::to_string(i) + " outside [1, " +
                                  std::to_string(max_samples()) + "]");
    }

    void check_count(std::size_t k, const char* what) const {
        if (k < 1 || k > max_samples())
            throw InvalidArgument(std::string(what) + ": k=" + std::to_string(k) + " outside [1, " +
                                  std::to_string(max_samples()) + "]");
    }

    void check_dim(const Vector& w) const {
        if (w.size() != dimension())
            throw InvalidArgument("vector length " + std::to_string(w.size()) + " does not match N=" +
                                  std::to_string(dimension()));
    }

    /// sqrt(eps) (1 + ||w||) / ||v||
    static double fd_step(const Vector& w, const Vector& v) {
        const double nv = norm2(v);
        if (!(nv > 0.0)) throw InvalidArgument("hvp: direction vector is zero");
        return std::sqrt(std::numeric_limits<double>::epsilon()) * (1.0 + norm2(w)) / nv;
    }

private:
    std::variant<QuadraticFamily, MlpFamily> impl_;
};

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

inline double per_sample_loss(const LossFamily& f, std::size_t i, const Vector& w) {
    return f.sample_loss(i, w);
}

inline double empirical_risk(const LossFamily& f, std::size_t k, const Vector& w) {
    f.check_count(k, "empirical_risk");
    double s = 0.0;
    for (std::size_t i = 1; i <= k; ++i) s += f.sample_loss(i, w);
    return s / static_cast<double>(k);
}

inline Vector gradient(const LossFamily& f, std::size_t k, const Vector& w) {
    f.check_count(k, "gradient");
    Vector g(f.dimension());
    for (std::size_t i = 1; i <= k; ++i) g += f.sample_gradient(i, w);
    return (1.0 / static_cast<double>(k)) * std::move(g);
}

inline Vector hvp(const LossFamily& f, std::size_t k, const Vector& w, const Vector& v) {
    f.check_count(k, "hvp");
    f.check_dim(v);
    if (!(norm2(v) > 0.0)) throw InvalidArgument("hvp: direction vector is zero");
    if (const auto* q = f.quadratic()) {
        Vector out(f.dimension());
        for (std::size_t i = 1; i <= k; ++i) q->sample(i).curvature.apply_add(v, 1.0, out);
        return (1.0 / static_cast<double>(k)) * std::move(out);
    }
    const double h = LossFamily::fd_step(w, v);
    Vector gp = gradient(f, k, w + h * v);
    gp -= gradient(f, k, w - h * v);
    return (0.5 / h) * std::move(gp);
}

/// Materialized H^(k)(w). Quadratic: exact mean curvature. MLP: per-coordinate
/// central differences of the analytic gradient (step 1e-5 (1 + |w_j|)),
/// then symmetrized. Verification only.
inline SymMatrix dense_hessian_oracle(const LossFamily& f, std::size_t k, const Vector& w) {
    const std::size_t n = f.dimension();
    if (n > kDenseOracleLimit)
        throw SizeLimit("dense_hessian_oracle: N=" + std::to_string(n) + " exceeds " +
                        std::to_string(kDenseOracleLimit));
    f.check_count(k, "dense_hessian_oracle");
    f.check_dim(w);
    if (const auto* q = f.quadratic()) {
        SymMatrix h(n);
        for (std::size_t i = 1; i <= k; ++i) h += q->hessian(i);
        return (1.0 / static_cast<double>(k)) * std::move(h);
    }
    std::vector<double> cols(n * n);
    for (std::size_t j = 0; j < n; ++j) {
        const double h = 1e-5 * (1.0 + std::abs(w[j]));
        Vector wp = w, wm = w;
        wp[j] += h;
        wm[j] -= h;
        const Vector d = gradient(f, k, wp) - gradient(f, k, wm);
        for (std::size_t r = 0; r < n; ++r) cols[r * n + j] = d[r] / (2.0 * h);
    }
    return SymMatrix(n, std::move(cols));
}

/// L_{k+1}(w) - L_k(w) through the one-sample identity (l_{k+1}(w) - L_k(w)) / (k+1).
inline double increment(const LossFamily& f, std::size_t k, const Vector& w) {
    f.check_count(k + 1, "increment");
    return (f.sample_loss(k + 1, w) - empirical_risk(f, k, w)) / static_cast<double>(k + 1);
}

/// g^(k)(w0)^T delta + 1/2 delta^T H^(k)(w0) delta
inline double taylor_increment(const LossFamily& f, std::size_t k, const Vector& w0, const Vector& delta) {
    f.check_dim(delta);
    const double lin = dot(gradient(f, k, w0), delta);
    if (!(norm2(delta) > 0.0)) return lin;
    return lin + 0.5 * dot(delta, hvp(f, k, w0, delta));
}

/// L_k(w + delta) - L_k(w). Quadratic samples use (u + delta/2)^T Q delta with
/// u = w - m, which has no cancellation; MLP samples subtract.
inline double risk_difference(const LossFamily& f, std::size_t k, const Vector& w, const Vector& delta) {
    f.check_count(k, "risk_difference");
    f.check_dim(w);
    f.check_dim(delta);
    double s = 0.0;
    if (const auto* q = f.quadratic()) {
        for (std::size_t i = 1; i <= k; ++i) {
            const auto& smp = q->sample(i);
            Vector u = w - smp.center;
            axpy(0.5, delta, u);
            s += dot(u, smp.curvature.apply(delta));
        }
    } else {
        const Vector wd = w + delta;
        for (std::size_t i = 1; i <= k; ++i) s += f.sample_loss(i, wd) - f.sample_loss(i, w);
    }
    return s / static_cast<double>(k);
}

namespace detail {

inline Weights minimize_quadratic(const LossFamily& f, const QuadraticFamily& q, std::size_t k) {
    const std::size_t n = f.dimension();
    Weights out;
    out.provenance = Provenance::minimizer;
    out.k = k;
    if (n <= kDenseOracleLimit) {
        SymMatrix h(n);
        Vector rhs(n);
        for (std::size_t i = 1; i <= k; ++i) {
            const auto& s = q.sample(i);
            h += q.hessian(i);
            s.curvature.apply_add(s.center, 1.0, rhs);
        }
        out.w = solve_spd(h, rhs);
    } else {
        // Conjugate gradients on (sum Q_i) w = sum Q_i m_i.
        auto apply = [&](const Vector& v) {
            Vector r(n);
            for (std::size_t i = 1; i <= k; ++i) q.sample(i).curvature.apply_add(v, 1.0, r);
            return r;
        };
        Vector b(n);
        for (std::size_t i = 1; i <= k; ++i) {
            const auto& s = q.sample(i);
            s.curvature.apply_add(s.center, 1.0, b);
        }
        Vector x(n);
        Vector r = b;
        Vector p = r;
        double rr = dot(r, r);
        const double target = 1e-13 * static_cast<double>(k);
        std::size_t it = 0;
        for (; it < 20 * n && std::sqrt(rr) > target; ++it) {
            const Vector ap = apply(p);
            const double pap = dot(p, ap);
            if (!(pap > 0.0)) throw FactorizationFailure(it, "minimize: mean curvature is not positive definite");
            const double alpha = rr / pap;
            axpy(alpha, p, x);
            axpy(-alpha, ap, r);
            const double rr_new = dot(r, r);
            for (std::size_t j = 0; j < n; ++j) p[j] = r[j] + (rr_new / rr) * p[j];
            rr = rr_new;
        }
        out.iterations = it;
        out.w = std::move(x);
    }
    out.grad_norm = norm2(gradient(f, k, out.w));
    out.converged = true;
    return out;
}

}  // namespace detail

/// Minimizer of L_k. Quadratic: exact solve (tol and max_iters unused).
/// MLP: gradient descent with Armijo backtracking (c = 1e-4, halving) from
/// `init`; returns the iterate with the smallest gradient norm seen and flags
/// `converged = false` if tol was not reached.
inline Weights minimize(const LossFamily& f, std::size_t k, const Weights& init, double tol,
                        std::size_t max_iters) {
    if (!(tol > 0.0)) throw InvalidArgument("minimize: tol must be > 0");
    f.check_count(k, "minimize");
    if (const auto* q = f.quadratic()) return detail::minimize_quadratic(f, *q, k);

    f.check_dim(init.w);
    constexpr double c_armijo = 1e-4;
    Vector w = init.w;
    double loss = empirical_risk(f, k, w);
    Vector g = gradient(f, k, w);
    double gn = norm2(g);

    Weights best;
    best.provenance = Provenance::minimizer;
    best.k = k;
    best.w = w;
    best.grad_norm = gn;

    double step = 1.0;
    std::size_t it = 0;
    for (; it < max_iters && gn > tol; ++it) {
        step = std::min(step * 2.0, 1e3);
        bool accepted = false;
        while (step > 1e-30) {
            Vector trial = w;
            axpy(-step, g, trial);
            const double trial_loss = empirical_risk(f, k, trial);
            if (trial_loss <= loss - c_armijo * step * gn * gn) {
                w = std::move(trial);
                loss = trial_loss;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) break;
        g = gradient(f, k, w);
        gn = norm2(g);
        if (gn < best.grad_norm) {
            best.w = w;
            best.grad_norm = gn;
        }
    }
    best.iterations = it;
    best.converged = best.grad_norm <= tol;
    return best;
}

}  // namespace stabkit
