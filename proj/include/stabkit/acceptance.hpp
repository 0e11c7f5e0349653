#pragma once

// The acceptance suite: ten numbered criteria, each with a tolerance and a
// runtime limit. Shared by the acceptance test binary and `stabkit --check`.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "stabkit/criteria.hpp"
#include "stabkit/curvature.hpp"
#include "stabkit/experiments.hpp"
#include "stabkit/family_spec.hpp"
#include "stabkit/loss_family.hpp"
#include "stabkit/numerics.hpp"

namespace stabkit {

struct AcceptanceOptions {
    std::vector<int> only;  // empty: all
    std::size_t threads = 4;
    std::uint64_t seed = 20240917;
};

struct CriterionOutcome {
    int id = 0;
    std::string name;
    bool pass = false;
    double seconds = 0.0;
    double limit_s = 0.0;  // 0: no limit
    std::string detail;
    std::string csv;  // records, for the determinism rerun
};

namespace acceptance_detail {

struct Run {
    bool pass = true;
    std::string detail;
    std::vector<ExperimentRecord> records;

    void fail(const std::string& why) {
        if (pass) detail.clear();
        pass = false;
        if (detail.size() < 600) detail += why + "; ";
    }
    void note(const std::string& s) {
        if (pass) detail = s;
    }
};

inline ExperimentRecord record(const std::string& tag, std::size_t k, std::size_t D, double sigma,
                               const std::string& est, std::size_t S, double value, double se, std::uint64_t seed) {
    ExperimentRecord r;
    r.experiment = tag;
    r.k = k;
    r.D = D;
    r.sigma = sigma;
    r.estimator = est;
    r.S = S;
    r.value = value;
    r.std_error = se;
    r.seed = seed;
    return r;
}

inline void absorb(Run& run, const ExperimentResult& res, const std::vector<std::string>& names = {}) {
    for (const auto& p : res.properties) {
        if (!names.empty() && std::none_of(names.begin(), names.end(), [&](const std::string& n) {
                return p.name.rfind(n, 0) == 0;
            }))
            continue;
        if (!p.pass) run.fail(p.name + ": " + p.detail);
    }
    run.records.insert(run.records.end(), res.records.begin(), res.records.end());
}

inline std::string props_detail(const ExperimentResult& res, const std::vector<std::string>& names) {
    std::string out;
    for (const auto& p : res.properties)
        for (const auto& n : names)
            if (p.name.rfind(n, 0) == 0) out += p.name + ": " + p.detail + "; ";
    return out;
}

// 1 --------------------------------------------------------------------------

inline Run increment_identity(const AcceptanceOptions& o, const ExperimentContext&) {
    Run run;
    RngStream rng(derive_seed(o.seed, 1), 0);
    double worst = 0.0;
    for (std::size_t t = 0; t < 100; ++t) {
        json doc;
        const std::uint64_t fseed = derive_seed(o.seed, 100 + t);
        if (t % 2 == 0) {
            const std::size_t n = 2 + static_cast<std::size_t>(rng.next_uniform() * 22.0);
            doc = {{"kind", "quadratic"},
                   {"N", n},
                   {"max_samples", 40},
                   {"seed", fseed},
                   {"ensemble", {{"law", t % 4 == 0 ? "top_heavy" : "isotropic"}, {"d_true", std::min<std::size_t>(3, n)}}}};
        } else {
            doc = {{"kind", "mlp"},
                   {"max_samples", 40},
                   {"seed", fseed},
                   {"mlp", {{"layers", {3, 5, 2}}, {"activation", t % 4 == 1 ? "tanh" : "softplus"}}}};
        }
        const LossFamily f = FamilySpec(doc).build();
        const std::size_t k = 1 + static_cast<std::size_t>(rng.next_uniform() * 38.0);
        Vector w = sample_std_normal(rng, f.dimension());
        const double lhs = increment(f, k, w);
        // Oracle: plain difference of the two empirical risks in extended precision.
        long double sk = 0.0L;
        for (std::size_t i = 1; i <= k; ++i) sk += static_cast<long double>(f.sample_loss(i, w));
        const long double sk1 = sk + static_cast<long double>(f.sample_loss(k + 1, w));
        const long double rhs = sk1 / static_cast<long double>(k + 1) - sk / static_cast<long double>(k);
        const double rel = static_cast<double>(std::fabs(static_cast<long double>(lhs) - rhs) / std::fabs(rhs));
        worst = std::max(worst, rel);
        if (!(rel <= 1e-12)) run.fail("triple " + std::to_string(t) + " relative error " + format_real(rel));
        run.records.push_back(record("acceptance1", k, 0, 0.0, to_string(f.kind()), 0, rel, 0.0, fseed));
    }
    run.note("100 triples, worst relative error " + format_real(worst));
    return run;
}

// 2 --------------------------------------------------------------------------

inline Run gaussian_moment_identity(const AcceptanceOptions& o, const ExperimentContext&) {
    Run run;
    constexpr std::size_t S = 1000000;
    double worst_z = 0.0;
    for (std::size_t b = 0; b < 20; ++b) {
        const std::uint64_t seed = derive_seed(o.seed, 200 + b);
        RngStream rng(seed, S + 1);
        const std::size_t d = 1 + b % 10;
        std::vector<double> entries(d * d);
        for (auto& x : entries) x = rng.next_normal();
        const SymMatrix B(d, entries);
        const double sigma = 0.5 + rng.next_uniform();
        std::vector<double> vals(S);
        parallel_for(S, o.threads, [&](std::size_t s) {
            RngStream r(seed, s);
            Vector z = sample_std_normal(r, d);
            z *= sigma;
            const double q = B.quad_form(z);
            vals[s] = q * q;
        });
        const auto [mean, se] = criteria_detail::mean_and_stderr(vals);
        double tr = 0.0, tr2 = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            tr += B(i, i);
            for (std::size_t j = 0; j < d; ++j) tr2 += B(i, j) * B(j, i);
        }
        const double s4 = sigma * sigma * sigma * sigma;
        const double target = 2.0 * s4 * tr2 + s4 * tr * tr;
        const double z = std::abs(mean - target) / se;
        worst_z = std::max(worst_z, z);
        if (!(z <= 5.0)) run.fail("B#" + std::to_string(b) + " off by " + format_real(z) + " se");
        run.records.push_back(record("acceptance2", 0, d, sigma, "moment_mc", S, mean, se, seed));
        run.records.push_back(record("acceptance2", 0, d, sigma, "moment_closed_form", 0, target, 0.0, seed));
    }
    run.note("20 matrices, worst deviation " + format_real(worst_z) + " se");
    return run;
}

// 3, 4 -----------------------------------------------------------------------

inline json grid_family(const AcceptanceOptions& o) {
    return {{"kind", "quadratic"},
            {"N", 64},
            {"max_samples", 33},
            {"seed", derive_seed(o.seed, 3)},
            {"ensemble", {{"law", "top_heavy"}, {"d_true", 10}}}};
}

inline SweepConfig grid_config(const AcceptanceOptions& o, std::vector<std::string> estimators, bool with_bound) {
    json doc = {{"experiment", "decay"},
                {"family", grid_family(o)},
                {"k_grid", {2, 8, 32}},
                {"D_grid", {1, 5, 10}},
                {"sigma_grid", {1e-4, 1e-3, 1e-2}},
                {"S", 10000},
                {"seed", derive_seed(o.seed, 30)},
                {"threads", o.threads},
                {"with_bound", with_bound}};
    doc["estimators"] = estimators;
    return parse_sweep_config(doc);
}

inline Run estimator_agreement(const AcceptanceOptions& o, const ExperimentContext& ctx) {
    Run run;
    auto res = run_decay(grid_config(o, {"direct_mc", "quad_mc", "gm_closed_form"}, false), ctx);
    absorb(run, res, {"records_non_negative"});
    std::map<std::tuple<std::size_t, std::size_t, double>, std::map<std::string, const ExperimentRecord*>> cells;
    for (const auto& r : res.records) cells[{r.k, r.D, r.sigma}][r.estimator] = &r;
    std::size_t checked = 0;
    double worst = 0.0;
    for (const auto& [key, m] : cells) {
        const auto& [k, D, sigma] = key;
        const char* names[] = {"direct_mc", "quad_mc", "gm_closed_form"};
        for (const char* n : names)
            if (!m.count(n)) run.fail("missing " + std::string(n) + " at k=" + std::to_string(k));
        if (m.size() < 3) continue;
        for (int i = 0; i < 3; ++i) {
            for (int j = i + 1; j < 3; ++j) {
                const auto* a = m.at(names[i]);
                const auto* b = m.at(names[j]);
                const double se = std::sqrt(a->std_error * a->std_error + b->std_error * b->std_error);
                const double z = se > 0.0 ? std::abs(a->value - b->value) / se : (a->value == b->value ? 0.0 : INFINITY);
                worst = std::max(worst, z);
                ++checked;
                if (!(z <= 4.0))
                    run.fail(std::string(names[i]) + " vs " + names[j] + " at k=" + std::to_string(k) +
                             " D=" + std::to_string(D) + " sigma=" + format_real(sigma) + ": " + format_real(z) + " se");
            }
        }
    }
    if (cells.size() != 27) run.fail("expected 27 grid cells, got " + std::to_string(cells.size()));
    run.note(std::to_string(checked) + " pairs over " + std::to_string(cells.size()) + " cells, worst " +
             format_real(worst) + " combined se");
    return run;
}

inline Run rate_bound_and_slopes(const AcceptanceOptions& o, const ExperimentContext& ctx) {
    Run run;
    const auto grid = run_decay(grid_config(o, {"direct_mc"}, true), ctx);
    absorb(run, grid, {"rate_bound", "records_non_negative"});

    json fam = {{"kind", "quadratic"},
                {"N", 64},
                {"max_samples", 65},
                {"seed", derive_seed(o.seed, 4)},
                {"ensemble", {{"law", "top_heavy"}, {"d_true", 5}, {"center_scale", 0.1}}}};
    json doc = {{"experiment", "decay"},
                {"family", fam},
                {"k_grid", {8, 11, 16, 23, 32, 45, 64}},
                {"D_grid", {5}},
                {"sigma_grid", {1e-3}},
                {"S", 256},
                {"replicates", 128},
                {"fit_k_min", 8},
                {"estimators", {"delta1", "direct_mc"}},
                {"with_bound", false},
                {"seed", derive_seed(o.seed, 40)},
                {"threads", o.threads},
                {"expect", {{"slopes", {{"delta1", {-1.3, -0.7}}, {"direct_mc", {-2.3, -1.7}}}}}}};
    const auto decay = run_decay(parse_sweep_config(doc), ctx);
    absorb(run, decay, {"slope", "records_non_negative"});
    const std::size_t slope_props = std::count_if(decay.properties.begin(), decay.properties.end(),
                                                  [](const Property& p) { return p.name.rfind("slope", 0) == 0; });
    if (slope_props != 2) run.fail("expected 2 slope properties, got " + std::to_string(slope_props));
    run.note(props_detail(grid, {"rate_bound"}) + props_detail(decay, {"slope"}));
    return run;
}

// 5 --------------------------------------------------------------------------

inline Run spectral_and_extremality(const AcceptanceOptions& o, const ExperimentContext&) {
    Run run;
    RngStream rng(derive_seed(o.seed, 5), 0);
    double worst = 0.0;
    for (std::size_t t = 0; t < 50; ++t) {
        const std::size_t d = 1 + static_cast<std::size_t>(rng.next_uniform() * 10.0);
        Vector delta(d);
        for (std::size_t i = 0; i < d; ++i) delta[i] = rng.next_uniform(-3.0, 3.0);
        const double sigma = std::exp(rng.next_uniform(std::log(1e-3), std::log(2.0)));
        SurrogateCoefficients co;
        co.c = Vector(d);
        co.B = SymMatrix::diagonal(delta);
        co.sigma = sigma;
        const double gm = gm_closed_form(co).value;
        const double sp = spectral_closed_form(delta, sigma).value;
        const double rel = std::abs(gm - sp) / std::max(std::abs(sp), 1e-300);
        worst = std::max(worst, rel);
        if (!(rel <= 1e-12)) run.fail("diagonal " + std::to_string(t) + " relative gap " + format_real(rel));
        run.records.push_back(record("acceptance5", 0, d, sigma, "spectral_closed_form", 0, sp, 0.0, 0));
    }
    std::size_t sets = 0;
    for (std::size_t t = 0; t < 50; ++t) {
        const std::size_t n = 2 + static_cast<std::size_t>(rng.next_uniform() * 11.0);
        std::vector<double> v(n);
        for (auto& x : v) x = rng.next_uniform() < 0.15 ? 0.0 : rng.next_uniform(0.0, 5.0);
        if (t % 10 == 0) std::fill(v.begin(), v.end(), 1.5);  // all ties
        std::sort(v.begin(), v.end(), std::greater<>());
        const Vector deltas(v);
        for (std::size_t D = 1; D < n; ++D) {
            const auto ex = extremality_argmax(deltas, D);
            ++sets;
            double top = 0.0, top_sq = 0.0;
            for (std::size_t i = 0; i < D; ++i) {
                top += v[i];
                top_sq += v[i] * v[i];
            }
            bool ok = ex.index_set.size() == D && std::abs(ex.objective - (2.0 * top_sq + top * top)) <=
                                                      1e-12 * std::max(1.0, ex.objective);
            for (std::size_t i = 0; ok && i < D; ++i) ok = ex.index_set[i] == i + 1;
            if (!ok) run.fail("delta set " + std::to_string(t) + " D=" + std::to_string(D) + " argmax not {1..D}");
            run.records.push_back(record("acceptance5", n, D, 1.0, "extremality", 0, ex.objective, 0.0, 0));
        }
    }
    run.note("50 diagonals (worst relative gap " + format_real(worst) + "), " + std::to_string(sets) +
             " extremality problems");
    return run;
}

// 6 --------------------------------------------------------------------------

inline Run eigensolver_fidelity(const AcceptanceOptions& o, const ExperimentContext&) {
    Run run;
    constexpr std::size_t n = 80, D = 10;
    double worst_val = 0.0, worst_proj = 0.0, worst_orth = 0.0;
    for (std::size_t t = 0; t < 20; ++t) {
        const std::uint64_t seed = derive_seed(o.seed, 600 + t);
        RngStream rng(seed, 0);
        std::vector<Vector> q;
        for (std::size_t j = 0; j < n; ++j) q.push_back(sample_std_normal(rng, n));
        orthonormalize(q);
        Vector lam(n);
        lam[0] = rng.next_uniform(2.0, 6.0) * (rng.next_uniform() < 0.5 ? 1.0 : -1.0);
        lam[0] = std::abs(lam[0]);
        for (std::size_t j = 1; j <= D; ++j) lam[j] = lam[j - 1] - (0.1 + rng.next_uniform(0.0, 0.4));
        for (std::size_t j = D + 1; j < n; ++j) lam[j] = rng.next_uniform(-1.0 - lam[0], lam[D] - 0.1);
        const SymMatrix h = SymMatrix::from_spectrum(q, lam);

        EigSolverConfig cfg;
        cfg.D = D;
        cfg.max_iters = 5000;
        cfg.seed = seed;
        SubspaceBasis b;
        try {
            b = top_d_eigenpairs([&](const Vector& v) { return h.apply(v); }, n, cfg);
        } catch (const EigenSolverNonConvergence& e) {
            run.fail("matrix " + std::to_string(t) + ": " + e.what());
            continue;
        }
        const auto oracle = dense_sym_eigh(h);
        std::vector<Vector> top(oracle.vectors.begin(), oracle.vectors.begin() + D);
        double val = 0.0;
        for (std::size_t j = 0; j < D; ++j) val = std::max(val, std::abs(b.eigenvalues[j] - oracle.eigenvalues[j]));
        val /= 1.0 + std::abs(oracle.eigenvalues[0]);
        const double proj = projector_distance(b.vectors, top);
        const double orth = orthonormality_error(b.vectors);
        worst_val = std::max(worst_val, val);
        worst_proj = std::max(worst_proj, proj);
        worst_orth = std::max(worst_orth, orth);
        if (!(val <= 1e-6)) run.fail("matrix " + std::to_string(t) + " eigenvalue error " + format_real(val));
        if (!(proj <= 1e-4)) run.fail("matrix " + std::to_string(t) + " projector distance " + format_real(proj));
        if (!(orth <= 1e-8)) run.fail("matrix " + std::to_string(t) + " orthonormality " + format_real(orth));
        run.records.push_back(record("acceptance6", 0, D, 0.0, "eigenvalue_error", 0, val, 0.0, seed));
        run.records.push_back(record("acceptance6", 0, D, 0.0, "projector_distance", 0, proj, 0.0, seed));
        run.records.push_back(record("acceptance6", 0, D, 0.0, "hvp_calls", 0, static_cast<double>(b.hvp_calls), 0.0, seed));
    }
    const SymMatrix small = SymMatrix::diagonal(Vector{3.0, -5.0, 1.0});
    EigSolverConfig one;
    one.seed = o.seed;
    const auto top1 = top_d_eigenpairs([&](const Vector& v) { return small.apply(v); }, 3, one);
    if (!(std::abs(top1.eigenvalues[0] - 3.0) <= 1e-6 * 4.0))
        run.fail("diag(3,-5,1) returned " + format_real(top1.eigenvalues[0]));
    run.records.push_back(record("acceptance6", 0, 1, 0.0, "algebraic_top", 0, top1.eigenvalues[0], 0.0, o.seed));
    run.note("20 matrices: eigenvalue " + format_real(worst_val) + ", projector " + format_real(worst_proj) +
             ", orthonormality " + format_real(worst_orth) + "; diag(3,-5,1) -> " + format_real(top1.eigenvalues[0]));
    return run;
}

// 7 --------------------------------------------------------------------------

inline Run proxy_validity(const AcceptanceOptions& o, const ExperimentContext& ctx) {
    Run run;
    const json sigmas = {1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1};
    json mlp = {{"experiment", "proxy"},
                {"family",
                 {{"kind", "mlp"},
                  {"max_samples", 65},
                  {"seed", derive_seed(o.seed, 7)},
                  {"mlp", {{"layers", {4, 14, 2}}, {"activation", "tanh"}}}}},
                {"k_grid", {32}},
                {"sigma_grid", sigmas},
                {"proxy_draws", 64},
                {"minimizer_tol", 1e-4},
                {"seed", derive_seed(o.seed, 70)},
                {"threads", o.threads},
                {"expect",
                 {{"regime_split", {{"sigma_lo", 1e-4}, {"sigma_hi", 1e-2}, {"factor", 10}}},
                  {"small_sigma", {{"sigma", 1e-6}, {"max", 1e-2}}}}}};
    const auto a = run_proxy_validity(parse_sweep_config(mlp), ctx);
    absorb(run, a);
    json quad = mlp;
    quad["family"] = {{"kind", "quadratic"},
                      {"N", 64},
                      {"max_samples", 65},
                      {"seed", derive_seed(o.seed, 71)},
                      {"ensemble", {{"law", "top_heavy"}, {"d_true", 5}}}};
    quad["expect"] = {{"control_max", 1e-8}};
    const auto b = run_proxy_validity(parse_sweep_config(quad), ctx);
    absorb(run, b);
    if (b.properties.size() < 2) run.fail("quadratic control property missing");
    run.note(props_detail(a, {"proxy"}) + props_detail(b, {"quadratic"}));
    return run;
}

// 8 --------------------------------------------------------------------------

inline Run ratio(const AcceptanceOptions& o, const ExperimentContext& ctx) {
    Run run;
    json doc = {{"experiment", "ratio"},
                {"family",
                 {{"kind", "quadratic"},
                  {"N", 64},
                  {"max_samples", 65},
                  {"seed", derive_seed(o.seed, 8)},
                  {"ensemble", {{"law", "top_heavy"}, {"d_true", 5}}}}},
                {"k_grid", {8, 32}},
                {"D_grid", {5, 8, 64}},
                {"sigma_grid", {1e-4, 1e-3}},
                {"S", 4096},
                {"seed", derive_seed(o.seed, 80)},
                {"threads", o.threads},
                {"expect", {{"ratio_band", {{"range", {0.8, 1.2}}, {"D_min", 5}, {"sigma_max", 1e-3}}}}}};
    const auto res = run_ratio(parse_sweep_config(doc), ctx);
    absorb(run, res);
    const bool have_both = std::count_if(res.properties.begin(), res.properties.end(), [](const Property& p) {
                               return p.name == "ratio_band" || p.name == "ratio_full_rank_is_one";
                           }) == 2;
    if (!have_both) run.fail("ratio properties missing");
    run.note(props_detail(res, {"ratio"}));
    return run;
}

// 9 --------------------------------------------------------------------------

inline Run stage_timing(const AcceptanceOptions& o, const ExperimentContext& ctx) {
    Run run;
    json doc = {{"experiment", "estimators"},
                {"family",
                 {{"kind", "quadratic"},
                  {"N", 10000},
                  {"max_samples", 9},
                  {"seed", derive_seed(o.seed, 9)},
                  {"ensemble", {{"law", "top_heavy"}, {"d_true", 10}}}}},
                {"k_grid", {8}},
                {"D_grid", {10}},
                {"sigma_grid", {1e-3}},
                {"S_grid", {100, 1000, 10000}},
                {"seed", derive_seed(o.seed, 90)},
                {"expect", {{"speedup_min", 100}}}};
    const auto res = run_estimators(parse_sweep_config(doc), ctx);
    absorb(run, res);
    if (!ctx.determinism && res.properties.size() < 5) run.fail("timing properties missing");
    run.note(props_detail(res, {"stage", "direct_over_gm"}));
    return run;
}

struct Entry {
    int id;
    const char* name;
    double limit_s;
    Run (*fn)(const AcceptanceOptions&, const ExperimentContext&);
};

inline const std::vector<Entry>& entries() {
    static const std::vector<Entry> e = {
        {1, "increment identity", 1.0, increment_identity},
        {2, "Gaussian moment identity", 30.0, gaussian_moment_identity},
        {3, "estimator agreement on quadratic families", 120.0, estimator_agreement},
        {4, "rate bound and decay slopes", 180.0, rate_bound_and_slopes},
        {5, "spectral closed form and extremality", 10.0, spectral_and_extremality},
        {6, "eigensolver fidelity", 30.0, eigensolver_fidelity},
        {7, "quadratic-proxy regime split", 60.0, proxy_validity},
        {8, "subspace/full-space ratio", 120.0, ratio},
        {9, "stage-timing ordering", 300.0, stage_timing},
    };
    return e;
}

inline bool selected(const AcceptanceOptions& o, int id) {
    return o.only.empty() || std::find(o.only.begin(), o.only.end(), id) != o.only.end();
}

}  // namespace acceptance_detail

/// Runs criteria 1-9 (or the `only` subset), then criterion 10: the same
/// criteria again in determinism mode, comparing CSV bytes with timing
/// columns zeroed. `progress` is called after each criterion.
inline std::vector<CriterionOutcome> run_acceptance(
    const AcceptanceOptions& o, const std::function<void(const CriterionOutcome&)>& progress = {}) {
    using namespace acceptance_detail;
    std::vector<CriterionOutcome> out;
    auto run_one = [&](const Entry& e, bool determinism) {
        ExperimentContext ctx;
        ctx.determinism = determinism;
        CriterionOutcome c;
        c.id = e.id;
        c.name = e.name;
        c.limit_s = e.limit_s;
        const auto t0 = std::chrono::steady_clock::now();
        Run r;
        try {
            r = e.fn(o, ctx);
        } catch (const std::exception& ex) {
            r.fail(std::string("exception: ") + ex.what());
        }
        c.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        zero_timings(r.records);
        c.csv = emit_csv(r.records);
        c.pass = r.pass;
        c.detail = r.detail;
        if (!determinism && c.seconds >= e.limit_s) {
            c.pass = false;
            c.detail = "runtime " + format_real(c.seconds) + " s exceeds " + format_real(e.limit_s) + " s; " + c.detail;
        }
        return c;
    };

    for (const auto& e : entries()) {
        if (!selected(o, e.id)) continue;
        out.push_back(run_one(e, false));
        if (progress) progress(out.back());
    }
    if (selected(o, 10)) {
        CriterionOutcome ten;
        ten.id = 10;
        ten.name = "determinism";
        ten.pass = true;
        const auto t0 = std::chrono::steady_clock::now();
        std::size_t compared = 0;
        for (const auto& e : entries()) {
            if (!selected(o, e.id)) continue;
            const auto again = run_one(e, true);
            const auto first = std::find_if(out.begin(), out.end(), [&](const CriterionOutcome& c) { return c.id == e.id; });
            ++compared;
            if (first == out.end() || first->csv != again.csv) {
                ten.pass = false;
                ten.detail += "criterion " + std::to_string(e.id) + " CSV differs; ";
            }
        }
        ten.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (compared == 0) {
            ten.pass = false;
            ten.detail = "no criteria selected to compare";
        } else if (ten.pass) {
            ten.detail = std::to_string(compared) + " criteria byte-identical on rerun";
        }
        out.push_back(ten);
        if (progress) progress(out.back());
    }
    return out;
}

inline std::string format_outcome(const CriterionOutcome& c) {
    std::string s = std::string(c.pass ? "PASS" : "FAIL") + "  criterion " + std::to_string(c.id) + " (" + c.name +
                    ")  " + format_real(std::round(c.seconds * 1000.0) / 1000.0) + " s";
    if (c.limit_s > 0.0) s += " / " + format_real(c.limit_s) + " s";
    if (!c.detail.empty()) s += "  " + c.detail;
    return s;
}

}  // namespace stabkit
