#pragma once

// JSON family specifications and the synthetic ensembles built from them.
//
// A spec is either generative ("ensemble" / "mlp" blocks plus a seed) or
// explicit ("samples" / "data" arrays). Both forms build the same
// LossFamily; `materialize` turns the former into the latter.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "stabkit/errors.hpp"
#include "stabkit/loss_family.hpp"
#include "stabkit/numerics.hpp"

namespace stabkit {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Hashing
// ---------------------------------------------------------------------------

/// FNV-1a 64, used for cache keys and manifest content hashes.
inline std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<std::size_t>(i)] = digits[v & 0xF];
        v >>= 4;
    }
    return s;
}

// ---------------------------------------------------------------------------
// Schema helpers: every failure names the JSON pointer that caused it.
// ---------------------------------------------------------------------------

namespace spec_detail {

inline const json& require(const json& j, const std::string& key, const std::string& where) {
    if (!j.is_object() || !j.contains(key)) throw ConfigError(where + "/" + key + ": missing required field");
    return j.at(key);
}

inline double number(const json& j, const std::string& where) {
    if (!j.is_number()) throw ConfigError(where + ": expected a number");
    const double v = j.get<double>();
    if (!std::isfinite(v)) throw ConfigError(where + ": must be finite");
    return v;
}

inline double number_or(const json& j, const std::string& key, double fallback, const std::string& where) {
    if (!j.contains(key)) return fallback;
    return number(j.at(key), where + "/" + key);
}

inline std::uint64_t count(const json& j, const std::string& where) {
    if (!j.is_number_unsigned() && (!j.is_number_integer() || j.get<std::int64_t>() < 0))
        throw ConfigError(where + ": expected a non-negative integer");
    return j.get<std::uint64_t>();
}

inline std::uint64_t count_or(const json& j, const std::string& key, std::uint64_t fallback,
                              const std::string& where) {
    if (!j.contains(key)) return fallback;
    return count(j.at(key), where + "/" + key);
}

inline Vector vector(const json& j, const std::string& where) {
    if (!j.is_array()) throw ConfigError(where + ": expected an array of numbers");
    Vector v(j.size());
    for (std::size_t i = 0; i < j.size(); ++i) v[i] = number(j[i], where + "/" + std::to_string(i));
    return v;
}

inline std::pair<double, double> range(const json& j, const std::string& key, std::pair<double, double> fallback,
                                       const std::string& where) {
    if (!j.contains(key)) return fallback;
    const Vector v = vector(j.at(key), where + "/" + key);
    if (v.size() != 2 || v[0] > v[1]) throw ConfigError(where + "/" + key + ": expected [lo, hi] with lo <= hi");
    return {v[0], v[1]};
}

inline std::string text_or(const json& j, const std::string& key, const std::string& fallback,
                           const std::string& where) {
    if (!j.contains(key)) return fallback;
    if (!j.at(key).is_string()) throw ConfigError(where + "/" + key + ": expected a string");
    return j.at(key).get<std::string>();
}

}  // namespace spec_detail

// ---------------------------------------------------------------------------
// Quadratic ensembles
// ---------------------------------------------------------------------------

namespace spec_detail {

inline QuadraticFamily build_quadratic_ensemble(std::size_t n, std::size_t max_samples, std::uint64_t seed,
                                                const json& e) {
    const std::string where = "/ensemble";
    const std::string law = text_or(e, "law", "top_heavy", where);
    const double center_scale = number_or(e, "center_scale", 1.0, where);
    const double offset_scale = number_or(e, "offset_scale", 1.0, where);
    const double ridge = number_or(e, "ridge", 1e-6, where);
    if (ridge < 0.0) throw ConfigError(where + "/ridge: must be >= 0");

    auto finish = [&](QuadraticSample& s, RngStream& rng) {
        s.center = Vector(n);
        for (std::size_t j = 0; j < n; ++j) s.center[j] = center_scale * rng.next_normal();
        s.offset = offset_scale * rng.next_normal();
    };

    std::vector<QuadraticSample> samples;
    samples.reserve(max_samples);

    if (law == "isotropic") {
        const auto [lo, hi] = range(e, "iso_range", {1.0, 2.0}, where);
        for (std::size_t i = 1; i <= max_samples; ++i) {
            RngStream rng(seed, i);
            QuadraticSample s;
            s.curvature.diag = Vector(n, rng.next_uniform(lo, hi) + ridge);
            finish(s, rng);
            samples.push_back(std::move(s));
        }
        return QuadraticFamily(n, std::move(samples));
    }

    if (law != "top_heavy" && law != "identical")
        throw ConfigError(where + "/law: expected one of top_heavy, isotropic, identical");

    const std::size_t d_true = count_or(e, "d_true", 5, where);
    if (d_true < 1 || d_true > n) throw ConfigError(where + "/d_true: must lie in [1, N]");
    const auto [top_lo, top_hi] = range(e, "top_range", {1.0, 10.0}, where);
    const auto [tail_lo, tail_hi] = range(e, "tail_range", {0.0, 0.01}, where);
    if (top_lo <= 0.0 || tail_lo < 0.0) throw ConfigError(where + ": eigenvalue ranges must be non-negative");
    const double eig_jitter = number_or(e, "eig_jitter", 0.2, where);
    const double rot_jitter = number_or(e, "rotation_jitter", 0.1, where);
    if (eig_jitter < 0.0 || eig_jitter >= 1.0) throw ConfigError(where + "/eig_jitter: must lie in [0, 1)");

    // Shared dominant directions; each sample tilts them by rotation_jitter.
    std::vector<Vector> basis;
    {
        RngStream rng(seed, 0);
        for (std::size_t j = 0; j < d_true; ++j) basis.push_back(sample_std_normal(rng, n));
        orthonormalize(basis);
    }
    // Geometric spacing keeps the mean spectrum gapped.
    Vector base(d_true);
    for (std::size_t j = 0; j < d_true; ++j) {
        const double t = d_true == 1 ? 0.0 : static_cast<double>(j) / static_cast<double>(d_true - 1);
        base[j] = top_hi * std::pow(top_lo / top_hi, t);
    }

    auto make = [&](std::size_t i) {
        RngStream rng(seed, i);
        std::vector<Vector> dirs;
        const double scale = rot_jitter / std::sqrt(static_cast<double>(n));
        for (std::size_t j = 0; j < d_true; ++j) {
            Vector v = basis[j];
            for (std::size_t r = 0; r < n; ++r) v[r] += scale * rng.next_normal();
            dirs.push_back(std::move(v));
        }
        orthonormalize(dirs);
        QuadraticSample s;
        for (std::size_t j = 0; j < d_true; ++j) {
            const double lam = base[j] * (1.0 + eig_jitter * (2.0 * rng.next_uniform() - 1.0));
            s.curvature.factors.push_back(std::sqrt(lam) * dirs[j]);
        }
        s.curvature.diag = Vector(n);
        for (std::size_t r = 0; r < n; ++r) s.curvature.diag[r] = rng.next_uniform(tail_lo, tail_hi) + ridge;
        finish(s, rng);
        return s;
    };

    if (law == "identical") {
        const QuadraticSample s = make(1);
        samples.assign(max_samples, s);
    } else {
        for (std::size_t i = 1; i <= max_samples; ++i) samples.push_back(make(i));
    }
    return QuadraticFamily(n, std::move(samples));
}

inline QuadraticFamily build_quadratic_explicit(std::size_t n, const json& arr) {
    if (!arr.is_array() || arr.empty()) throw ConfigError("/samples: expected a non-empty array");
    std::vector<QuadraticSample> samples;
    for (std::size_t i = 0; i < arr.size(); ++i) {
        const std::string where = "/samples/" + std::to_string(i);
        const json& s = arr[i];
        QuadraticSample q;
        q.center = vector(require(s, "center", where), where + "/center");
        q.offset = number_or(s, "offset", 0.0, where);
        if (s.contains("dense")) {
            const json& d = s.at("dense");
            if (!d.is_array() || d.size() != n) throw ConfigError(where + "/dense: expected N rows");
            std::vector<double> buf;
            for (std::size_t r = 0; r < n; ++r) {
                const Vector row = vector(d[r], where + "/dense/" + std::to_string(r));
                if (row.size() != n) throw ConfigError(where + "/dense/" + std::to_string(r) + ": expected N entries");
                buf.insert(buf.end(), row.begin(), row.end());
            }
            q.curvature.dense = SymMatrix(n, std::move(buf));
        }
        if (s.contains("diag")) q.curvature.diag = vector(s.at("diag"), where + "/diag");
        if (s.contains("factors")) {
            const json& fs = s.at("factors");
            if (!fs.is_array()) throw ConfigError(where + "/factors: expected an array of vectors");
            for (std::size_t j = 0; j < fs.size(); ++j)
                q.curvature.factors.push_back(vector(fs[j], where + "/factors/" + std::to_string(j)));
        }
        if (q.center.size() != n) throw ConfigError(where + "/center: expected N entries");
        if (!q.curvature.diag.empty() && q.curvature.diag.size() != n)
            throw ConfigError(where + "/diag: expected N entries");
        for (std::size_t j = 0; j < q.curvature.factors.size(); ++j)
            if (q.curvature.factors[j].size() != n)
                throw ConfigError(where + "/factors/" + std::to_string(j) + ": expected N entries");
        samples.push_back(std::move(q));
    }
    return QuadraticFamily(n, std::move(samples));
}

}  // namespace spec_detail

// ---------------------------------------------------------------------------
// MLP families
// ---------------------------------------------------------------------------

namespace spec_detail {

inline Activation parse_activation(const std::string& s, const std::string& where) {
    if (s == "tanh") return Activation::tanh;
    if (s == "softplus") return Activation::softplus;
    throw ConfigError(where + ": expected tanh or softplus (non-smooth activations are not supported)");
}

inline std::vector<std::size_t> parse_layers(const json& j, const std::string& where) {
    if (!j.is_array() || j.size() < 2) throw ConfigError(where + ": expected at least two layer sizes");
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < j.size(); ++i) {
        const auto c = count(j[i], where + "/" + std::to_string(i));
        if (c == 0) throw ConfigError(where + "/" + std::to_string(i) + ": must be >= 1");
        out.push_back(c);
    }
    return out;
}

/// Random tanh teacher [in, hidden, out] with N(0, 1/fan_in) weights.
inline MlpFamily build_mlp(std::size_t max_samples, std::uint64_t seed, const json& m) {
    const std::string where = "/mlp";
    const auto layers = parse_layers(require(m, "layers", where), where + "/layers");
    const Activation act = parse_activation(text_or(m, "activation", "tanh", where), where + "/activation");
    const std::size_t hidden = count_or(m, "teacher_hidden", 8, where);
    const double noise = number_or(m, "noise", 0.1, where);
    const double input_scale = number_or(m, "input_scale", 1.0, where);
    const std::size_t in = layers.front();
    const std::size_t out = layers.back();

    MlpFamily teacher_shape({in, hidden, out}, Activation::tanh, {Vector(in)}, {Vector(out)});
    Vector teacher(teacher_shape.dimension());
    {
        RngStream rng(derive_seed(seed, 0x7eac4e7), 0);
        std::size_t off = 0;
        const std::size_t fan[2] = {in, hidden};
        const std::size_t outs[2] = {hidden, out};
        for (int l = 0; l < 2; ++l) {
            const double s = 1.0 / std::sqrt(static_cast<double>(fan[l]));
            for (std::size_t p = 0; p < outs[l] * fan[l] + outs[l]; ++p) teacher[off + p] = s * rng.next_normal();
            off += outs[l] * fan[l] + outs[l];
        }
    }

    std::vector<Vector> xs, ys;
    for (std::size_t i = 1; i <= max_samples; ++i) {
        RngStream rng(seed, i);
        Vector x(in);
        for (double& v : x) v = input_scale * rng.next_normal();
        Vector y = teacher_shape.forward(x, teacher);
        for (double& v : y) v += noise * rng.next_normal();
        xs.push_back(std::move(x));
        ys.push_back(std::move(y));
    }
    return MlpFamily(layers, act, std::move(xs), std::move(ys));
}

inline MlpFamily build_mlp_explicit(const json& m, const json& data) {
    const auto layers = parse_layers(require(m, "layers", "/mlp"), "/mlp/layers");
    const Activation act = parse_activation(text_or(m, "activation", "tanh", "/mlp"), "/mlp/activation");
    if (!data.is_array() || data.empty()) throw ConfigError("/data: expected a non-empty array");
    std::vector<Vector> xs, ys;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const std::string where = "/data/" + std::to_string(i);
        xs.push_back(vector(require(data[i], "x", where), where + "/x"));
        ys.push_back(vector(require(data[i], "y", where), where + "/y"));
    }
    return MlpFamily(layers, act, std::move(xs), std::move(ys));
}

}  // namespace spec_detail

// ---------------------------------------------------------------------------
// FamilySpec
// ---------------------------------------------------------------------------

class FamilySpec {
public:
    explicit FamilySpec(json doc) : doc_(std::move(doc)) { validate(); }

    const json& document() const noexcept { return doc_; }
    FamilyKind kind() const { return doc_.at("kind") == "quadratic" ? FamilyKind::quadratic : FamilyKind::mlp; }
    std::uint64_t seed() const { return doc_.value("seed", std::uint64_t{0}); }
    std::size_t max_samples() const { return doc_.at("max_samples").get<std::size_t>(); }

    /// Stable identity of the family: hash of the canonical (sorted-key) dump.
    std::string hash() const { return hex64(fnv1a64(doc_.dump())); }

    LossFamily build() const {
        using namespace spec_detail;
        const std::size_t ms = max_samples();
        if (kind() == FamilyKind::quadratic) {
            const std::size_t n = count(doc_.at("N"), "/N");
            if (doc_.contains("samples")) {
                auto q = build_quadratic_explicit(n, doc_.at("samples"));
                if (q.max_samples() != ms) throw ConfigError("/max_samples: does not match length of /samples");
                return LossFamily(std::move(q));
            }
            return LossFamily(build_quadratic_ensemble(n, ms, seed(), doc_.value("ensemble", json::object())));
        }
        const json& m = doc_.at("mlp");
        MlpFamily mlp = doc_.contains("data") ? build_mlp_explicit(m, doc_.at("data")) : build_mlp(ms, seed(), m);
        if (mlp.max_samples() != ms) throw ConfigError("/max_samples: does not match length of /data");
        if (doc_.contains("N") && count(doc_.at("N"), "/N") != mlp.dimension())
            throw ConfigError("/N: does not match parameter count " + std::to_string(mlp.dimension()) +
                              " implied by /mlp/layers");
        return LossFamily(std::move(mlp));
    }

    /// Seeded starting point for descent on MLP families (N(0, 1/fan_in)).
    /// Quadratic families start at the origin.
    Weights initial_weights(const LossFamily& f) const {
        Vector w(f.dimension());
        if (const auto* m = f.mlp()) {
            RngStream rng(derive_seed(seed(), 0x1417), 0);
            const double scale = doc_.at("mlp").value("init_scale", 1.0);
            std::size_t off = 0;
            const auto& ls = m->layers();
            for (std::size_t l = 1; l < ls.size(); ++l) {
                const double s = scale / std::sqrt(static_cast<double>(ls[l - 1]));
                for (std::size_t p = 0; p < ls[l] * ls[l - 1] + ls[l]; ++p) w[off + p] = s * rng.next_normal();
                off += ls[l] * ls[l - 1] + ls[l];
            }
        }
        return Weights::initial(std::move(w));
    }

private:
    void validate() const {
        using namespace spec_detail;
        if (!doc_.is_object()) throw ConfigError("/: family spec must be a JSON object");
        const json& kind = require(doc_, "kind", "");
        if (kind != "quadratic" && kind != "mlp") throw ConfigError("/kind: expected quadratic or mlp");
        if (count(require(doc_, "max_samples", ""), "/max_samples") < 2)
            throw ConfigError("/max_samples: must be >= 2");
        if (doc_.contains("seed")) count(doc_.at("seed"), "/seed");
        if (kind == "quadratic") {
            if (count(require(doc_, "N", ""), "/N") < 1) throw ConfigError("/N: must be >= 1");
        } else {
            require(doc_, "mlp", "");
        }
    }

    json doc_;
};

/// Explicit (materialized) form of a built family.
inline json materialize(const FamilySpec& spec, const LossFamily& f) {
    json out = spec.document();
    out.erase("ensemble");
    out["N"] = f.dimension();
    if (const auto* q = f.quadratic()) {
        json samples = json::array();
        for (std::size_t i = 1; i <= q->max_samples(); ++i) {
            const auto& s = q->sample(i);
            json js;
            js["center"] = s.center.values();
            js["offset"] = s.offset;
            if (!s.curvature.diag.empty()) js["diag"] = s.curvature.diag.values();
            if (!s.curvature.factors.empty()) {
                js["factors"] = json::array();
                for (const auto& fc : s.curvature.factors) js["factors"].push_back(fc.values());
            }
            if (!s.curvature.dense.empty()) {
                const std::size_t n = s.curvature.dense.size();
                json rows = json::array();
                for (std::size_t r = 0; r < n; ++r) {
                    std::vector<double> row(n);
                    for (std::size_t c = 0; c < n; ++c) row[c] = s.curvature.dense(r, c);
                    rows.push_back(row);
                }
                js["dense"] = rows;
            }
            samples.push_back(std::move(js));
        }
        out["samples"] = std::move(samples);
    } else if (const auto* m = f.mlp()) {
        json data = json::array();
        for (std::size_t i = 1; i <= m->max_samples(); ++i)
            data.push_back({{"x", m->input(i).values()}, {"y", m->target(i).values()}});
        out["data"] = std::move(data);
    }
    return out;
}

/// Applies `a.b.c=value` onto a JSON document. The value is parsed as JSON
/// when possible, otherwise stored as a string.
inline void apply_override(json& doc, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "': expected key=value");
    const std::string path = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);
    json value = json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;
    json* node = &doc;
    std::size_t start = 0;
    while (true) {
        const auto dot_pos = path.find('.', start);
        const std::string key = path.substr(start, dot_pos - start);
        if (key.empty()) throw ConfigError("override '" + assignment + "': empty path segment");
        if (dot_pos == std::string::npos) {
            (*node)[key] = std::move(value);
            return;
        }
        json& next = (*node)[key];
        if (next.is_null()) next = json::object();
        if (!next.is_object()) throw ConfigError("override '" + assignment + "': '" + key + "' is not an object");
        node = &next;
        start = dot_pos + 1;
    }
}

}  // namespace stabkit
