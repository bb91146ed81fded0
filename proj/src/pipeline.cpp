#include "mmo/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

#include "json.hpp"
#include "mmo/csv.hpp"
#include "mmo/error.hpp"
#include "mmo/fileio.hpp"
#include "mmo/normalize.hpp"
#include "mmo/rng.hpp"

#ifndef MMO_VERSION
#define MMO_VERSION "0.0.0"
#endif

namespace mmo {

using nlohmann::json;

namespace {

constexpr int kReportSchemaVersion = 1;

const std::array<std::pair<Variant, const char*>, 6> kVariantNames{{
    {Variant::raw, "raw"},
    {Variant::averaged, "averaged"},
    {Variant::minimal_uni, "minimal-uni"},
    {Variant::minimal_multi, "minimal-multi"},
    {Variant::expanded_uni, "expanded-uni"},
    {Variant::expanded_multi, "expanded-multi"},
}};

std::string hex64(std::uint64_t v) {
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

json mat(const Eigen::MatrixXd& m) {
    json rows = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        json row = json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        rows.push_back(row);
    }
    return rows;
}

json opt_num(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

json estimate_json(const OverlapEstimate& e) {
    return {{"measure", to_string(e.measure)}, {"vowels", {e.vowel1, e.vowel2}}, {"context", e.context},
            {"scope", e.scope},               {"point", e.point},               {"lo", opt_num(e.lo)},
            {"hi", opt_num(e.hi)},             {"failed", e.failed},             {"replicates", e.replicates}};
}

std::string csv_text(const std::vector<OverlapEstimate>& est) {
    std::ostringstream ss;
    write_estimates_csv(ss, est);
    return ss.str();
}

}  // namespace

std::uint64_t fnv1a(const std::string& bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string to_string(Variant v) {
    for (const auto& [k, name] : kVariantNames)
        if (k == v) return name;
    return "?";
}

Variant parse_variant(const std::string& text) {
    for (const auto& [k, name] : kVariantNames)
        if (text == name) return k;
    throw ConfigError("unknown variant '" + text + "'");
}

bool is_modelled(Variant v) { return v != Variant::raw && v != Variant::averaged; }

std::string to_string(Normalization n) {
    switch (n) {
        case Normalization::lobanov: return "lobanov";
        case Normalization::lobanov_subset: return "lobanov-subset";
        case Normalization::precomputed: return "precomputed";
    }
    return "?";
}

Normalization parse_normalization(const std::string& text) {
    if (text == "lobanov") return Normalization::lobanov;
    if (text == "lobanov-subset") return Normalization::lobanov_subset;
    if (text == "precomputed") return Normalization::precomputed;
    throw ConfigError("unknown normalization '" + text + "'");
}

void RunConfig::validate() const {
    if (input.has_value() == synth.has_value()) throw ConfigError("config needs exactly one of 'input' and 'synth'");
    if (variants.empty()) throw ConfigError("config lists no variants");
    if (measures.empty()) throw ConfigError("config lists no measures");
    if (!has_seed) throw ConfigError("config has no seed");
    if (reps < 1) throw ConfigError("reps must be at least 1");
    if (draws < 2) throw ConfigError("draws must be at least 2");
    if (grid.resolution < 16) throw ConfigError("grid resolution must be at least 16");
    if (!(grid.padding > 0.0)) throw ConfigError("grid padding must be positive");
    if (!(ellipse_quantile > 0.0 && ellipse_quantile < 1.0)) throw ConfigError("ellipse quantile must lie in (0, 1)");
    if (max_iterations < 1) throw ConfigError("max_iterations must be positive");
    if (synth && synth->scenario != "default") scenario(synth->scenario);
    std::vector<Variant> seen;
    for (Variant v : variants) {
        if (std::find(seen.begin(), seen.end(), v) != seen.end()) throw ConfigError("variant listed twice: " + to_string(v));
        seen.push_back(v);
    }
}

std::string RunConfig::to_json() const {
    json j;
    j["kind"] = "mmo-run-config";
    j["schema_version"] = kReportSchemaVersion;
    j["input"] = input ? json(input->generic_string()) : json(nullptr);
    if (synth) {
        json s{{"scenario", synth->scenario}};
        s["seed"] = synth->seed ? json(*synth->seed) : json(nullptr);
        s["n_speakers"] = synth->n_speakers ? json(*synth->n_speakers) : json(nullptr);
        s["tokens_per_speaker"] = synth->tokens_per_speaker ? json(*synth->tokens_per_speaker) : json(nullptr);
        j["synth"] = s;
    } else {
        j["synth"] = nullptr;
    }
    j["normalization"] = normalization ? json(mmo::to_string(*normalization)) : json(nullptr);
    const SchemaMap& sm = loading.schema;
    j["schema"] = {{"speaker", sm.speaker}, {"word", sm.word},         {"vowel", sm.vowel},
                   {"context", sm.context}, {"f1", sm.f1},             {"f2", sm.f2},
                   {"duration", sm.duration}, {"following", sm.following}, {"stressed", sm.stressed},
                   {"f1_norm", sm.f1_norm}, {"f2_norm", sm.f2_norm}};
    j["max_bad_fraction"] = loading.max_bad_fraction;
    json f{{"vowels", filter.vowels}, {"contexts", filter.contexts}, {"require_stressed", filter.require_stressed}};
    f["word_allowlist"] = filter.word_allowlist ? json(*filter.word_allowlist) : json(nullptr);
    j["filter"] = f;
    json vs = json::array();
    for (Variant v : variants) vs.push_back(to_string(v));
    j["variants"] = vs;
    json ms = json::array();
    for (Measure m : measures) ms.push_back(to_string(m));
    j["measures"] = ms;
    j["reps"] = reps;
    j["draws"] = draws;
    j["seed"] = seed;
    j["by_speaker"] = by_speaker;
    j["word_policy"] = to_string(word_policy);
    j["grid"] = {{"resolution", grid.resolution}, {"padding", grid.padding}};
    j["ellipse_quantile"] = ellipse_quantile;
    j["fit"] = {{"max_iterations", max_iterations},
                {"gradient_tolerance", gradient_tolerance},
                {"block_diagonal_random", block_diagonal_random}};
    return j.dump(2) + "\n";
}

RunConfig RunConfig::from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    if (j.is_object() && j.value("kind", std::string()) == "mmo-manifest") j = j.at("config");
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    static const std::vector<std::string> known{"kind",     "schema_version", "input",      "synth",
                                                "normalization", "filter",   "variants",   "measures",
                                                "reps",     "draws",          "seed",       "by_speaker",
                                                "word_policy", "grid",        "ellipse_quantile", "fit",
                                                "schema",   "max_bad_fraction"};
    for (const auto& [key, value] : j.items()) {
        if (std::find(known.begin(), known.end(), key) == known.end()) throw ConfigError("unknown config key '" + key + "'");
    }
    RunConfig c;
    try {
        if (j.contains("input") && !j["input"].is_null()) c.input = j["input"].get<std::string>();
        if (j.contains("synth") && !j["synth"].is_null()) {
            const json& s = j["synth"];
            SynthInput si;
            si.scenario = s.at("scenario").get<std::string>();
            if (s.contains("seed") && !s["seed"].is_null()) si.seed = s["seed"].get<std::uint64_t>();
            if (s.contains("n_speakers") && !s["n_speakers"].is_null()) si.n_speakers = s["n_speakers"].get<int>();
            if (s.contains("tokens_per_speaker") && !s["tokens_per_speaker"].is_null())
                si.tokens_per_speaker = s["tokens_per_speaker"].get<int>();
            c.synth = si;
        }
        if (j.contains("normalization") && !j["normalization"].is_null())
            c.normalization = parse_normalization(j["normalization"].get<std::string>());
        if (j.contains("schema")) {
            const json& m = j["schema"];
            SchemaMap& sm = c.loading.schema;
            for (auto [key, field] : std::initializer_list<std::pair<const char*, std::string*>>{
                     {"speaker", &sm.speaker}, {"word", &sm.word}, {"vowel", &sm.vowel}, {"context", &sm.context},
                     {"f1", &sm.f1}, {"f2", &sm.f2}, {"duration", &sm.duration}, {"following", &sm.following},
                     {"stressed", &sm.stressed}, {"f1_norm", &sm.f1_norm}, {"f2_norm", &sm.f2_norm}}) {
                if (m.contains(key)) *field = m[key].get<std::string>();
            }
            for (const auto& [key, value] : m.items()) {
                static const std::set<std::string> fields{"speaker", "word", "vowel", "context", "f1", "f2",
                                                          "duration", "following", "stressed", "f1_norm", "f2_norm"};
                if (!fields.count(key)) throw ConfigError("unknown schema field '" + key + "'");
            }
        }
        if (j.contains("max_bad_fraction")) c.loading.max_bad_fraction = j["max_bad_fraction"].get<double>();
        if (j.contains("filter")) {
            const json& f = j["filter"];
            if (f.contains("vowels")) c.filter.vowels = f["vowels"].get<std::array<std::string, 2>>();
            if (f.contains("contexts")) c.filter.contexts = f["contexts"].get<std::array<std::string, 2>>();
            if (f.contains("require_stressed")) c.filter.require_stressed = f["require_stressed"].get<bool>();
            if (f.contains("word_allowlist") && !f["word_allowlist"].is_null())
                c.filter.word_allowlist = f["word_allowlist"].get<std::set<std::string>>();
        }
        if (j.contains("variants"))
            for (const auto& v : j["variants"]) c.variants.push_back(parse_variant(v.get<std::string>()));
        if (j.contains("measures"))
            for (const auto& m : j["measures"]) c.measures.push_back(parse_measure(m.get<std::string>()));
        if (j.contains("reps")) c.reps = j["reps"].get<int>();
        if (j.contains("draws")) c.draws = j["draws"].get<int>();
        if (j.contains("seed") && !j["seed"].is_null()) {
            c.seed = j["seed"].get<std::uint64_t>();
            c.has_seed = true;
        }
        if (j.contains("by_speaker")) c.by_speaker = j["by_speaker"].get<bool>();
        if (j.contains("word_policy")) c.word_policy = parse_word_policy(j["word_policy"].get<std::string>());
        if (j.contains("grid")) {
            c.grid.resolution = j["grid"].value("resolution", c.grid.resolution);
            c.grid.padding = j["grid"].value("padding", c.grid.padding);
        }
        if (j.contains("ellipse_quantile")) c.ellipse_quantile = j["ellipse_quantile"].get<double>();
        if (j.contains("fit")) {
            c.max_iterations = j["fit"].value("max_iterations", c.max_iterations);
            c.gradient_tolerance = j["fit"].value("gradient_tolerance", c.gradient_tolerance);
            c.block_diagonal_random = j["fit"].value("block_diagonal_random", c.block_diagonal_random);
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bad config value: ") + e.what());
    }
    return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) { return from_json(read_file(path)); }

TokenTable prepare_tokens(const TokenTable& loaded, const FilterSpec& filter, Normalization norm,
                          std::vector<std::string>* warnings) {
    FilterResult r = filter_tokens(loaded, filter);
    if (warnings) {
        for (const auto& e : r.empty_cells)
            warnings->push_back("no tokens of " + e.vowel + "/" + e.context +
                                (e.speaker ? " for speaker " + *e.speaker : std::string(" in the corpus")));
    }
    switch (norm) {
        case Normalization::precomputed:
            if (!r.table.normalized())
                throw ConfigError("precomputed normalization needs f1_norm and f2_norm on every token");
            return std::move(r.table);
        case Normalization::lobanov_subset: return lobanov_normalize(r.table, speaker_stats(r.table));
        case Normalization::lobanov: break;
    }
    // Stats over each speaker's whole inventory, applied to the subset.
    return lobanov_normalize(r.table, speaker_stats(loaded));
}

FittedModel fit_variant(const TokenTable& analysis, Variant v, const ModelSpec& levels, const FitConfig& config) {
    if (!is_modelled(v)) throw Error("variant " + to_string(v) + " is not modelled");
    ModelSpec spec = levels;
    spec.structure = (v == Variant::minimal_uni || v == Variant::minimal_multi) ? Structure::minimal : Structure::expanded;
    if (v == Variant::minimal_multi || v == Variant::expanded_multi) {
        spec.response = Response::multivariate;
        return fit(build_design(analysis, spec), config);
    }
    spec.response = Response::univariate_f1;
    const FittedModel f1 = fit(build_design(analysis, spec), config);
    spec.response = Response::univariate_f2;
    const FittedModel f2 = fit(build_design(analysis, spec), config);
    return combine_univariate(f1, f2);
}

namespace {

ModelSpec levels_of(const RunConfig& c) {
    ModelSpec s;
    s.vowel_levels = c.filter.vowels;
    s.context_levels = c.filter.contexts;
    return s;
}

std::string cell_label(const std::string& vowel, const std::string& context) { return vowel + "/" + context; }

void run_empirical(const ReportBundle& b, VariantResult& out) {
    const RunConfig& c = b.config;
    const bool averaged = out.variant == Variant::averaged;
    for (const auto& speaker : b.analysis.speakers()) {
        for (Measure m : c.measures) {
            for (const auto& ctx : c.filter.contexts) {
                try {
                    out.estimates.push_back(empirical_overlap(b.analysis, m, speaker, ctx, averaged,
                                                              {c.filter.vowels[0], c.filter.vowels[1]}, c.grid));
                } catch (const Error& e) {
                    out.warnings.push_back(e.what());
                }
            }
        }
    }
    // Pooled cell summaries for the ellipse plot.
    for (const auto& v : c.filter.vowels) {
        for (const auto& ctx : c.filter.contexts) {
            std::map<std::string, std::pair<Eigen::Vector2d, int>> by_word;
            std::vector<Eigen::Vector2d> pts;
            for (const auto& t : b.analysis.tokens()) {
                if (t.vowel != v || t.context != ctx) continue;
                const Eigen::Vector2d x(*t.f1_norm, *t.f2_norm);
                if (averaged) {
                    auto& acc = by_word[t.speaker + '\x1f' + t.word];
                    if (acc.second == 0) acc.first.setZero();
                    acc.first += x;
                    acc.second += 1;
                } else {
                    pts.push_back(x);
                }
            }
            for (const auto& [k, acc] : by_word) pts.push_back(acc.first / acc.second);
            if (pts.size() < 3) {
                out.warnings.push_back("too few points for the " + cell_label(v, ctx) + " ellipse");
                continue;
            }
            Sample2D s;
            s.points.resize(static_cast<Eigen::Index>(pts.size()), 2);
            for (std::size_t i = 0; i < pts.size(); ++i) s.points.row(static_cast<Eigen::Index>(i)) = pts[i].transpose();
            out.cells.emplace_back(cell_label(v, ctx), Gaussian2D{s.mean(), s.covariance()});
        }
    }
    for (auto& e : out.estimates) e.method = to_string(out.variant);
}

void run_modelled(const ReportBundle& b, VariantResult& out) {
    const RunConfig& c = b.config;
    FitConfig fc;
    fc.max_iterations = c.max_iterations;
    fc.gradient_tolerance = c.gradient_tolerance;
    fc.block_diagonal_random = c.block_diagonal_random;
    out.model = fit_variant(b.analysis, out.variant, levels_of(c), fc);
    const FittedModel& model = *out.model;
    if (!model.converged) out.warnings.push_back("optimizer did not reach the gradient tolerance");

    std::vector<ScopeSpec> scopes{ScopeSpec::average()};
    if (c.by_speaker)
        for (const auto& s : model.speakers()) scopes.push_back(ScopeSpec::for_speaker(s, c.word_policy));
    std::vector<OverlapRequest> requests;
    for (const auto& scope : scopes)
        for (Measure m : c.measures)
            for (const auto& ctx : c.filter.contexts)
                requests.push_back({m, CellSpec{c.filter.vowels[0], ctx, {}}, CellSpec{c.filter.vowels[1], ctx, {}}, scope});
    OverlapOptions opt;
    opt.reps = c.reps;
    opt.draws_per_rep = c.draws;
    opt.grid = c.grid;
    out.estimates = modelled_overlap_batch(model, requests, opt, derive_seed(c.seed, fnv1a(to_string(out.variant))));
    for (auto& e : out.estimates) e.method = to_string(out.variant);

    const ParamDraw point = point_draw(model);
    for (const auto& v : c.filter.vowels)
        for (const auto& ctx : c.filter.contexts)
            out.cells.emplace_back(cell_label(v, ctx),
                                   predictive_mean_cov(model, CellSpec{v, ctx, {}}, ScopeSpec::average(), point));
}

json fit_json(const FittedModel& m) {
    json comps = json::array();
    for (const auto& c : m.components)
        comps.push_back({{"response", to_string(c.response)},
                         {"deviance", c.deviance},
                         {"iterations", c.iterations},
                         {"gradient_norm", c.gradient_norm},
                         {"converged", c.converged},
                         {"degenerate_curvature", c.degenerate_curvature}});
    return {{"mode", to_string(m.mode)}, {"structure", to_string(m.spec.structure)},
            {"loglik", m.loglik},         {"converged", m.converged},
            {"beta", mat(m.beta)},        {"beta_se", mat(m.beta_se)},
            {"fixed_names", m.components.front().design->fixed_names},
            {"components", comps}};
}

void render(ReportBundle& b) {
    const RunConfig& c = b.config;
    json report;
    report["kind"] = "mmo-report";
    report["schema_version"] = kReportSchemaVersion;
    report["vowels"] = c.filter.vowels;
    report["contexts"] = c.filter.contexts;
    json variants = json::array();
    std::vector<svg::Interval> average_rows;
    for (const auto& vr : b.variants) {
        const std::string name = to_string(vr.variant);
        json v{{"variant", name}, {"ok", vr.ok}, {"error", vr.error}, {"warnings", vr.warnings}};
        if (!vr.ok) {
            variants.push_back(v);
            continue;
        }
        if (vr.model) v["fit"] = fit_json(*vr.model);
        json est = json::array();
        for (const auto& e : vr.estimates) est.push_back(estimate_json(e));
        v["estimates"] = est;

        // Ellipses of the average-speaker (modelled) or pooled (empirical) cells.
        json cells = json::array();
        std::vector<svg::LabeledEllipse> shapes;
        std::ostringstream ell_csv;
        csv::write_record(ell_csv, {"cell", "mean_f1", "mean_f2", "cov_11", "cov_12", "cov_22", "semi_major",
                                    "semi_minor", "angle", "quantile"});
        int series = 0;
        for (const auto& [label, g] : vr.cells) {
            json cell{{"cell", label}, {"mean", {g.mean[0], g.mean[1]}}, {"cov", mat(g.cov)}};
            try {
                const Ellipse e = ellipse_from_gaussian(g, c.ellipse_quantile);
                cell["ellipse"] = {{"center", {e.center[0], e.center[1]}},
                                   {"semi_major", e.semi_major},
                                   {"semi_minor", e.semi_minor},
                                   {"angle", e.angle},
                                   {"quantile", c.ellipse_quantile}};
                shapes.push_back({e, label, series});
                csv::write_record(ell_csv, {label, csv::format_double(g.mean[0]), csv::format_double(g.mean[1]),
                                            csv::format_double(g.cov(0, 0)), csv::format_double(g.cov(0, 1)),
                                            csv::format_double(g.cov(1, 1)), csv::format_double(e.semi_major),
                                            csv::format_double(e.semi_minor), csv::format_double(e.angle),
                                            csv::format_double(c.ellipse_quantile)});
            } catch (const Error&) {
                cell["ellipse"] = nullptr;
            }
            ++series;
            cells.push_back(cell);
        }
        v["cells"] = cells;
        variants.push_back(v);

        b.files["estimates_" + name + ".csv"] = csv_text(vr.estimates);
        b.files["ellipses_" + name + ".csv"] = ell_csv.str();
        b.files["ellipses_" + name + ".svg"] = svg::ellipses(shapes, name + ": " + csv::format_double(c.ellipse_quantile) + " quantile ellipses");

        // By-speaker first context vs second context, one file per measure.
        for (Measure m : c.measures) {
            std::map<std::string, std::array<double, 2>> pairs;
            for (const auto& e : vr.estimates) {
                if (e.measure != m || e.scope == "average") continue;
                auto [it, fresh] = pairs.try_emplace(e.scope, std::array<double, 2>{NAN, NAN});
                it->second[e.context == c.filter.contexts[0] ? 0 : 1] = e.point;
            }
            for (const auto& e : vr.estimates) {
                if (e.measure == m && e.scope == "average")
                    average_rows.push_back({name + " " + to_string(m) + " " + e.context, e.point, e.lo, e.hi});
            }
            if (pairs.empty()) continue;
            std::ostringstream pc;
            csv::write_record(pc, {"speaker", "measure", c.filter.contexts[0], c.filter.contexts[1], "method"});
            std::vector<svg::Point> pts;
            for (const auto& [spk, vals] : pairs) {
                csv::write_record(pc, {spk, to_string(m), csv::format_double(vals[0]), csv::format_double(vals[1]), name});
                pts.push_back({vals[1], vals[0], spk});
            }
            const std::string stem = "speakers_" + name + "_" + to_string(m);
            b.files[stem + ".csv"] = pc.str();
            b.files[stem + ".svg"] = svg::scatter(pts, name + " by-speaker " + to_string(m), c.filter.contexts[1],
                                                  c.filter.contexts[0]);
        }
    }
    report["variants"] = variants;
    if (b.truth) {
        json t = json::array();
        for (const auto& [key, v] : b.truth->true_overlap)
            t.push_back({{"context", key.first}, {"scope", key.second}, {"bhattacharyya", v}});
        report["truth"] = t;
        std::ostringstream tc;
        csv::write_record(tc, {"speaker", "context", "measure", "point"});
        for (const auto& [key, v] : b.truth->true_overlap)
            csv::write_record(tc, {key.second, key.first, "bhattacharyya", csv::format_double(v)});
        b.files["truth_overlap.csv"] = tc.str();
    }
    b.files["report.json"] = report.dump(1) + "\n";
    if (!average_rows.empty()) b.files["average_speaker.svg"] = svg::intervals(average_rows, "Average-speaker estimates", "value");

    json manifest;
    manifest["kind"] = "mmo-manifest";
    manifest["schema_version"] = kReportSchemaVersion;
    manifest["tool"] = "mmo";
    manifest["version"] = MMO_VERSION;
    manifest["eigen"] = std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                        std::to_string(EIGEN_MINOR_VERSION);
    manifest["config"] = json::parse(c.to_json());
    manifest["config_hash"] = hex64(fnv1a(c.to_json()));
    manifest["seed"] = c.seed;
    manifest["input"] = {{"source", b.analysis.provenance().source}, {"rows_read", b.analysis.provenance().rows_read},
                         {"rows_rejected", b.analysis.provenance().rows_rejected}, {"analysis_rows", b.analysis.size()}};
    json status = json::object();
    for (const auto& vr : b.variants)
        status[to_string(vr.variant)] = {{"ok", vr.ok}, {"error", vr.error}, {"warnings", vr.warnings.size()}};
    manifest["variants"] = status;
    manifest["warnings"] = b.warnings;
    json hashes = json::object();
    for (const auto& [file, text] : b.files) hashes[file] = hex64(fnv1a(text));
    manifest["files"] = hashes;
    b.files["manifest.json"] = manifest.dump(2) + "\n";
}

}  // namespace

ReportBundle run_pipeline(const RunConfig& config) {
    config.validate();
    ReportBundle b;
    b.config = config;
    Normalization norm;
    TokenTable loaded;
    if (config.synth) {
        TruthSpec spec = config.synth->scenario == "default" ? default_truth() : scenario(config.synth->scenario);
        if (config.synth->n_speakers) spec.n_speakers = *config.synth->n_speakers;
        if (config.synth->tokens_per_speaker) spec.tokens_per_speaker = *config.synth->tokens_per_speaker;
        spec.levels.vowel_levels = config.filter.vowels;
        spec.levels.context_levels = config.filter.contexts;
        b.truth = generate_corpus(spec, config.synth->seed.value_or(config.seed));
        loaded = b.truth->table;
        norm = config.normalization.value_or(Normalization::precomputed);
    } else {
        loaded = load_tokens(*config.input, config.loading);
        if (loaded.provenance().rows_rejected > 0)
            b.warnings.push_back(std::to_string(loaded.provenance().rows_rejected) + " input rows rejected");
        norm = config.normalization.value_or(Normalization::lobanov);
    }
    b.analysis = prepare_tokens(loaded, config.filter, norm, &b.warnings);

    for (Variant v : config.variants) {
        VariantResult r;
        r.variant = v;
        try {
            if (is_modelled(v)) run_modelled(b, r);
            else run_empirical(b, r);
            r.ok = true;
        } catch (const Error& e) {
            r.ok = false;
            r.error = e.what();
            r.estimates.clear();
            r.cells.clear();
        }
        b.variants.push_back(std::move(r));
    }
    render(b);
    return b;
}

void write_bundle(const ReportBundle& bundle, const std::filesystem::path& out_dir) {
    std::filesystem::create_directories(out_dir);
    for (const auto& [name, text] : bundle.files) {
        if (name == "manifest.json") continue;
        write_file_atomic(out_dir / name, text);
    }
    // Manifest last: its presence marks a complete run.
    write_file_atomic(out_dir / "manifest.json", bundle.files.at("manifest.json"));
}

}  // namespace mmo
