#pragma once

// Command-line front end. run_cli is the whole program; tools/stabkit_main.cpp
// only forwards argv and the standard streams.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "stabkit/acceptance.hpp"
#include "stabkit/criteria.hpp"
#include "stabkit/curvature.hpp"
#include "stabkit/errors.hpp"
#include "stabkit/experiments.hpp"
#include "stabkit/family_spec.hpp"

namespace stabkit {

inline constexpr const char* kToolVersion = "0.1.0";

/// Subspace cache on disk: one sidecar pair per key, named by the key id.
class FileSubspaceCache final : public SubspaceCache {
public:
    explicit FileSubspaceCache(std::filesystem::path dir) : dir_(std::move(dir)) {
        std::filesystem::create_directories(dir_);
    }

    std::filesystem::path stem(const BasisKey& key) const { return dir_ / key.id(); }

    std::optional<SubspaceBasis> load(const BasisKey& key, std::vector<std::string>& warnings) override {
        const auto s = stem(key);
        if (!std::filesystem::exists(s.string() + ".json") && !std::filesystem::exists(s.string() + ".bin"))
            return std::nullopt;
        try {
            json header;
            SubspaceBasis b = load_subspace(s, &header);
            if (!header.contains("key") || header.at("key") != key.to_json()) {
                warnings.push_back("cache entry " + key.id() + " has a mismatched key; recomputing");
                return std::nullopt;
            }
            return b;
        } catch (const std::exception& e) {
            warnings.push_back("cache entry " + key.id() + " is unreadable (" + std::string(e.what()) + "); recomputing");
            return std::nullopt;
        }
    }

    void store(const BasisKey& key, const SubspaceBasis& basis) override {
        save_subspace(basis, stem(key), {{"key", key.to_json()}});
    }

private:
    std::filesystem::path dir_;
};

namespace cli_detail {

struct Options {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::vector<std::string> overrides;
    bool force = false;
    std::size_t threads = 1;
    bool threads_given = false;
    bool determinism = false;
    std::string cache_dir;
    // gen-family
    bool materialize = false;
    // subspace / criterion
    std::size_t k = 1;
    std::size_t D = 1;
    double tol = 1e-6;
    std::size_t max_iters = 1000;
    std::string method = "auto";
    std::string estimator = "gm_closed_form";
    double sigma = 1e-3;
    std::size_t S = 4096;
    double p = 2.0;
};

inline std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw IoError("cannot read " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline json parse_json_file(const std::filesystem::path& p, const std::string& text) {
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(p.string() + ": " + e.what());
    }
}

inline std::optional<std::uint64_t> env_seed() {
    const char* s = std::getenv("STABKIT_SEED");
    if (s == nullptr || *s == '\0') return std::nullopt;
    std::uint64_t v = 0;
    const std::string_view sv(s);
    const auto [ptr, ec] = std::from_chars(sv.data(), sv.data() + sv.size(), v);
    if (ec != std::errc() || ptr != sv.data() + sv.size())
        throw ConfigError("STABKIT_SEED: expected a non-negative 64-bit integer, got '" + std::string(sv) + "'");
    return v;
}

/// Collects outputs, refuses to clobber, and writes run.json last.
class Run {
public:
    Run(const Options& o, std::string subcommand) : o_(o), subcommand_(std::move(subcommand)) {
        out_ = o.out;
        std::filesystem::create_directories(out_);
    }

    const std::filesystem::path& dir() const { return out_; }

    void claim(const std::vector<std::string>& names) {
        if (o_.force) return;
        for (const auto& n : names)
            if (std::filesystem::exists(out_ / n))
                throw IoError((out_ / n).string() + " exists; pass --force to overwrite");
        if (std::filesystem::exists(out_ / "run.json"))
            throw IoError((out_ / "run.json").string() + " exists; pass --force to overwrite");
    }

    void write(const std::string& name, const std::string& bytes) {
        std::ofstream f(out_ / name, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot write " + (out_ / name).string());
        f << bytes;
        if (!f) throw IoError("short write to " + (out_ / name).string());
        record(name, bytes);
    }

    void record(const std::string& name, const std::string& bytes) {
        outputs_.push_back({{"path", name}, {"fnv1a64", hex64(fnv1a64(bytes))}, {"bytes", bytes.size()}});
    }

    void record_file(const std::string& name) { record(name, read_file(out_ / name)); }

    void finish(const std::string& config_path, const std::string& config_text, std::uint64_t seed,
                std::size_t hits, std::size_t misses, const std::vector<std::string>& warnings, double wall) {
        json m = {{"tool", "stabkit"},
                  {"version", kToolVersion},
                  {"subcommand", subcommand_},
                  {"config", {{"path", config_path}, {"fnv1a64", hex64(fnv1a64(config_text))}}},
                  {"overrides", o_.overrides},
                  {"seed", seed},
                  {"threads", o_.threads},
                  {"determinism_check", o_.determinism},
                  {"wall_time_s", o_.determinism ? 0.0 : wall},
                  {"versions",
                   {{"compiler", __VERSION__},
                    {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                          std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                          std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
                    {"cli11", CLI11_VERSION}}},
                  {"outputs", outputs_},
                  {"cache", {{"hits", hits}, {"misses", misses}, {"dir", o_.cache_dir}}},
                  {"warnings", warnings}};
        std::ofstream f(out_ / "run.json", std::ios::trunc);
        if (!f) throw IoError("cannot write " + (out_ / "run.json").string());
        f << m.dump(2) << '\n';
    }

private:
    const Options& o_;
    std::string subcommand_;
    std::filesystem::path out_;
    json outputs_ = json::array();
};

struct Loaded {
    std::string text;
    json doc;
    std::filesystem::path base;
};

inline Loaded load_config(const Options& o) {
    Loaded l;
    l.text = read_file(o.config);
    l.doc = parse_json_file(o.config, l.text);
    for (const auto& a : o.overrides) apply_override(l.doc, a);
    l.base = std::filesystem::path(o.config).parent_path();
    return l;
}

/// A family document, either given directly or as the "family" member of a
/// sweep config (inline or a path).
inline json family_document(const Loaded& l) {
    if (!l.doc.is_object()) throw ConfigError("/: expected an object");
    if (!l.doc.contains("experiment")) return l.doc;
    return parse_sweep_config(l.doc, l.base).family;
}

inline std::uint64_t resolve_seed(const Options& o, std::uint64_t fallback) {
    if (o.seed) return *o.seed;
    if (auto e = env_seed()) return *e;
    return fallback;
}

inline std::string dump(const json& j) { return j.dump(2) + "\n"; }

// gen-family -----------------------------------------------------------------

inline void gen_family(const Options& o, std::uint64_t& seed_used, Run& run, const Loaded& l) {
    json doc = family_document(l);
    seed_used = resolve_seed(o, doc.value("seed", std::uint64_t{0}));
    doc["seed"] = seed_used;
    const FamilySpec spec(doc);
    std::vector<std::string> names{"family.json"};
    if (o.materialize) names.push_back("family.materialized.json");
    run.claim(names);
    run.write("family.json", dump(spec.document()));
    if (o.materialize) run.write("family.materialized.json", dump(materialize(spec, spec.build())));
}

// subspace / criterion ---------------------------------------------------------

/// Single-cell sweep config used to reuse the experiment plumbing.
inline SweepConfig cell_config(const Options& o, const json& family, std::uint64_t seed) {
    json doc = {{"experiment", "decay"},
                {"family", family},
                {"k_grid", {o.k}},
                {"D_grid", {o.D}},
                {"sigma_grid", {o.sigma}},
                {"S", o.S},
                {"seed", seed},
                {"threads", o.threads},
                {"basis_method", o.method},
                {"eig", {{"tol", o.tol}, {"max_iters", o.max_iters}}}};
    return parse_sweep_config(doc);
}

struct Cell {
    SweepConfig cfg;
    FamilySpec spec;
    LossFamily f;
    Weights w;
};

inline Cell prepare_cell(const Options& o, const json& family, std::uint64_t seed, ExperimentResult& res) {
    SweepConfig c = cell_config(o, family, seed);
    FamilySpec spec(c.family);
    LossFamily f = spec.build();
    experiments_detail::check_dimensions(c, f);
    Weights w = experiments_detail::minimize_at(c, f, o.k, spec.initial_weights(f), res, seed);
    return {std::move(c), std::move(spec), std::move(f), std::move(w)};
}

inline SubspaceBasis cell_basis(const Options& o, Cell& cell, SubspaceCache* cache, ExperimentResult& res) {
    ExperimentContext ctx;
    ctx.cache = cache;
    auto b = experiments_detail::acquire_basis(cell.cfg, ctx, cell.spec, cell.f, o.k, cell.w.w, o.D, res);
    if (!b) {
        std::string why = res.warnings.empty() ? "" : ": " + res.warnings.back();
        throw Error("eigensolver", "top-" + std::to_string(o.D) + " eigenpairs did not converge" + why);
    }
    return std::move(b->basis);
}

inline void subspace(const Options& o, std::vector<std::string>& warnings, std::uint64_t& seed_used, Run& run,
                     SubspaceCache* cache, ExperimentResult& res, const Loaded& l) {
    const json family = family_document(l);
    seed_used = resolve_seed(o, l.doc.value("seed", std::uint64_t{0}));
    run.claim({"subspace.json", "subspace.bin"});
    Cell cell = prepare_cell(o, family, seed_used, res);
    const SubspaceBasis b = cell_basis(o, cell, cache, res);
    const auto key = experiments_detail::basis_key(cell.cfg, cell.spec, cell.f, o.k, o.D);
    save_subspace(b, run.dir() / "subspace", {{"key", key.to_json()}, {"key_id", key.id()}});
    run.record_file("subspace.json");
    run.record_file("subspace.bin");
    warnings = res.warnings;
}

inline void criterion(const Options& o, std::vector<std::string>& warnings, std::uint64_t& seed_used, Run& run,
                      SubspaceCache* cache, ExperimentResult& res, const Loaded& l) {
    const json family = family_document(l);
    seed_used = resolve_seed(o, l.doc.value("seed", std::uint64_t{0}));
    const EstimatorKind kind = parse_estimator(o.estimator);
    run.claim({"criterion.json"});
    Cell cell = prepare_cell(o, family, seed_used, res);
    const std::uint64_t mc_seed = experiments_detail::cell_seed(seed_used, o.k, o.D, 0);
    json extra = json::object();
    CriterionEstimate e;
    switch (kind) {
        case EstimatorKind::delta1: e = delta1(cell.f, o.k, cell.w.w); break;
        case EstimatorKind::delta_p_mc:
            e = delta_p_mc(cell.f, o.k, ProbeSpec{ProbeKind::full_gaussian, o.sigma, nullptr, cell.w.w}, o.p, o.S,
                           mc_seed, o.threads);
            extra["p"] = o.p;
            break;
        default: {
            const SubspaceBasis b = cell_basis(o, cell, cache, res);
            extra["eigenvalues"] = b.eigenvalues.values();
            if (kind == EstimatorKind::direct_mc) {
                e = direct_mc(cell.f, o.k, cell.w.w, b, o.sigma, o.S, mc_seed, o.threads);
                break;
            }
            const SurrogateCoefficients co = surrogate_coeffs(cell.f, o.k, cell.w, b, o.sigma);
            extra["coefficients"] = to_json(co);
            if (kind == EstimatorKind::quad_mc) {
                e = quad_mc(co, o.S, mc_seed, o.threads);
            } else if (kind == EstimatorKind::gm_closed_form) {
                e = gm_closed_form(co);
            } else {
                // Spectral form of the curvature-change term alone (a = 0, c = 0).
                const auto eig = dense_sym_eigh(co.B);
                extra["B_eigenvalues"] = eig.eigenvalues.values();
                e = spectral_closed_form(eig.eigenvalues, o.sigma);
            }
        }
    }
    json out = {{"estimate", to_json(e)},
                {"k", o.k},
                {"D", o.D},
                {"sigma", o.sigma},
                {"family_hash", cell.spec.hash()},
                {"minimizer", {{"converged", cell.w.converged}, {"grad_norm", cell.w.grad_norm}}}};
    if (kind == EstimatorKind::delta1 || kind == EstimatorKind::delta_p_mc) out["D"] = 0;
    out.update(extra);
    run.write("criterion.json", dump(out));
    warnings = res.warnings;
}

// experiment -------------------------------------------------------------------

inline void experiment(const Options& o, std::vector<std::string>& warnings, std::uint64_t& seed_used, Run& run,
                       SubspaceCache* cache, ExperimentResult& out, const Loaded& l) {
    SweepConfig c = parse_sweep_config(l.doc, l.base);
    c.seed = resolve_seed(o, c.seed);
    if (o.threads_given) c.threads = o.threads;
    seed_used = c.seed;
    const std::string csv_name = to_string(c.experiment) + ".csv";
    run.claim({csv_name, "summary.json"});
    ExperimentContext ctx;
    ctx.cache = cache;
    ctx.determinism = o.determinism;
    out = run_experiment(c, ctx);
    run.write(csv_name, emit_csv(out.records));
    json summary = summary_json(out);
    if (o.determinism) summary.erase("timing");
    run.write("summary.json", dump(summary));
    warnings = out.warnings;
}

inline int check(std::ostream& out, const std::vector<int>& ids, std::size_t threads) {
    AcceptanceOptions a;
    a.only = ids;
    a.threads = threads;
    bool all = true;
    run_acceptance(a, [&](const CriterionOutcome& c) {
        out << format_outcome(c) << std::endl;
        all = all && c.pass;
    });
    return all ? 0 : 2;
}

inline std::string one_line(std::string s) {
    for (char& ch : s)
        if (ch == '\n' || ch == '\r') ch = ' ';
    return s;
}

}  // namespace cli_detail

inline int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    using namespace cli_detail;
    Options o;
    CLI::App app{"stabkit: loss-landscape stabilization criteria under one-sample growth", "stabkit"};
    app.set_version_flag("--version", kToolVersion);
    app.require_subcommand(0, 1);

    bool check_mode = false;
    std::vector<int> criteria_ids;
    app.add_flag("--check", check_mode, "Run the acceptance suite and print a pass/fail table");
    app.add_option("--criteria", criteria_ids, "Criteria to run with --check (default: all)")
        ->check(CLI::Range(1, 10))
        ->delimiter(',');
    app.add_option("--threads", o.threads, "Worker threads for --check")->check(CLI::PositiveNumber);

    auto common = [&](CLI::App* sc, bool needs_config) {
        auto* c = sc->add_option("--config", o.config, "JSON config")->check(CLI::ExistingFile);
        if (needs_config) c->required();
        sc->add_option("--out", o.out, "Output directory (created if absent)")->required();
        sc->add_option("--seed", o.seed, "64-bit seed (fallback: STABKIT_SEED)");
        sc->add_option("--set", o.overrides, "Override a config value: path.to.key=value (repeatable)");
        sc->add_flag("--force", o.force, "Overwrite existing result files");
        sc->add_option("--threads", o.threads, "Worker threads")->check(CLI::PositiveNumber);
        sc->add_flag("--determinism-check", o.determinism, "Zero timing fields; single timing repetition");
        sc->add_option("--cache-dir", o.cache_dir, "Subspace cache directory");
    };
    auto cell = [&](CLI::App* sc) {
        sc->add_option("--k", o.k, "Sample count k")->check(CLI::PositiveNumber);
        sc->add_option("--D", o.D, "Subspace dimension")->check(CLI::PositiveNumber);
        sc->add_option("--tol", o.tol, "Eigensolver tolerance")->check(CLI::PositiveNumber);
        sc->add_option("--max-iters", o.max_iters, "Eigensolver iterations per eigenpair")->check(CLI::PositiveNumber);
        sc->add_option("--method", o.method, "Basis method")->check(CLI::IsMember({"power", "dense", "auto"}));
    };

    auto* gen = app.add_subcommand("gen-family", "Validate a family spec and write family.json");
    common(gen, true);
    gen->add_flag("--materialize", o.materialize, "Also write the fully explicit family");

    auto* sub = app.add_subcommand("subspace", "Compute (or load) the top-D curvature subspace at w*_k");
    common(sub, true);
    cell(sub);

    auto* cri = app.add_subcommand("criterion", "Evaluate one criterion estimator at w*_k");
    common(cri, true);
    cell(cri);
    cri->add_option("--estimator", o.estimator, "delta1, delta_p_mc, direct_mc, quad_mc, gm_closed_form, spectral_closed_form");
    cri->add_option("--sigma", o.sigma, "Probe scale")->check(CLI::PositiveNumber);
    cri->add_option("--S", o.S, "Monte Carlo draws")->check(CLI::Range(std::size_t{2}, std::numeric_limits<std::size_t>::max()));
    cri->add_option("--p", o.p, "Exponent for delta_p_mc")->check(CLI::Range(1.0, std::numeric_limits<double>::max()));

    auto* exp = app.add_subcommand("experiment", "Run a sweep and write <experiment>.csv and summary.json");
    common(exp, true);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForVersion&) {
        out << kToolVersion << '\n';
        return 0;
    } catch (const CLI::ParseError& e) {
        err << e.what() << "\n\n" << app.help();
        return 1;
    }
    for (auto* sc : {gen, sub, cri, exp})
        if (sc->parsed()) o.threads_given = sc->count("--threads") > 0;

    if (check_mode) {
        if (!app.get_subcommands().empty()) {
            err << "--check takes no subcommand\n\n" << app.help();
            return 1;
        }
        try {
            return check(out, criteria_ids, o.threads);
        } catch (const std::exception& e) {
            err << "error: internal: " << one_line(e.what()) << '\n';
            return 2;
        }
    }
    if (app.get_subcommands().empty()) {
        err << "a subcommand is required\n\n" << app.help();
        return 1;
    }

    const auto t0 = std::chrono::steady_clock::now();
    try {
        const std::string name = app.get_subcommands().front()->get_name();
        Run run(o, name);
        std::vector<std::string> warnings;
        std::uint64_t seed = 0;
        std::optional<FileSubspaceCache> disk;
        if (!o.cache_dir.empty()) disk.emplace(o.cache_dir);
        SubspaceCache* cache = disk ? &*disk : nullptr;
        ExperimentResult res;
        const Loaded l = load_config(o);
        if (name == "gen-family") gen_family(o, seed, run, l);
        else if (name == "subspace") subspace(o, warnings, seed, run, cache, res, l);
        else if (name == "criterion") criterion(o, warnings, seed, run, cache, res, l);
        else experiment(o, warnings, seed, run, cache, res, l);
        const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        run.finish(o.config, l.text, seed, res.cache_hits, res.cache_misses, warnings, wall);
        for (const auto& w : warnings) err << "warning: " << one_line(w) << '\n';
        return 0;
    } catch (const Error& e) {
        err << "error: " << e.category() << ": " << one_line(e.what()) << '\n';
    } catch (const json::exception& e) {
        err << "error: config: " << one_line(e.what()) << '\n';
    } catch (const std::filesystem::filesystem_error& e) {
        err << "error: io: " << one_line(e.what()) << '\n';
    } catch (const std::exception& e) {
        err << "error: internal: " << one_line(e.what()) << '\n';
    }
    return 2;
}

}  // namespace stabkit
