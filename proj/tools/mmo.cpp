#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "mmo/error.hpp"
#include "mmo/fileio.hpp"
#include "mmo/metrics.hpp"
#include "mmo/model_io.hpp"
#include "mmo/pipeline.hpp"
#include "mmo/rng.hpp"
#include "mmo/simulate.hpp"
#include "mmo/synth.hpp"

namespace {

using namespace mmo;

std::array<std::string, 2> split_pair(const std::string& text, const char* what) {
    const auto comma = text.find(',');
    if (comma == std::string::npos || text.find(',', comma + 1) != std::string::npos)
        throw ConfigError(std::string(what) + " takes two comma-separated levels");
    return {text.substr(0, comma), text.substr(comma + 1)};
}

TokenTable read_normalized(const std::string& path) {
    TokenTable t = load_tokens(std::filesystem::path(path));
    if (!t.normalized()) throw ConfigError(path + " has no f1_norm/f2_norm columns; run 'mmo ingest' first");
    return t;
}

template <class F>
std::string render(F&& f) {
    std::ostringstream ss;
    f(ss);
    return ss.str();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Modelled multivariate vowel overlap"};
    app.set_version_flag("--version", std::string(MMO_VERSION));
    app.require_subcommand(1);

    // run
    std::string config_path, out_dir;
    std::optional<std::uint64_t> seed_override;
    auto* run = app.add_subcommand("run", "Run every configured variant and write the report bundle");
    run->add_option("--config", config_path, "JSON run config (or a previous manifest.json)")->required();
    run->add_option("--out", out_dir, "Output directory")->required();
    run->add_option("--seed", seed_override, "Override the config seed");

    // synth
    std::string scenario_name = "default", synth_out;
    std::uint64_t synth_seed = 1;
    std::optional<int> synth_speakers, synth_tokens;
    auto* synth = app.add_subcommand("synth", "Generate a synthetic corpus with its ground truth");
    synth->add_option("--scenario", scenario_name,
                      "default, us-south-like, north-america-like, southern-england-like or scottish-like");
    synth->add_option("--seed", synth_seed, "Generator seed");
    synth->add_option("--speakers", synth_speakers, "Number of speakers");
    synth->add_option("--tokens", synth_tokens, "Tokens per speaker");
    synth->add_option("--out", synth_out, "Output directory (tokens.csv, truth.json)")->required();

    // ingest
    std::string ingest_in, ingest_out, norm_name = "lobanov", vowels = "IH,EH", contexts = "nasal,oral";
    bool keep_unstressed = false;
    auto* ingest = app.add_subcommand("ingest", "Load, filter and normalize a token CSV");
    ingest->add_option("--input", ingest_in, "Token CSV")->required();
    ingest->add_option("--out", ingest_out, "Normalized token CSV")->required();
    ingest->add_option("--normalization", norm_name, "lobanov, lobanov-subset or precomputed");
    ingest->add_option("--vowels", vowels, "Two vowel labels, first coded +0.5");
    ingest->add_option("--contexts", contexts, "Two context labels, first coded +0.5");
    ingest->add_flag("--keep-unstressed", keep_unstressed, "Do not drop unstressed tokens");

    // fit
    std::string fit_tokens, fit_out, variant_name = "minimal-multi";
    int max_iterations = 500;
    bool block_diagonal = false;
    auto* fitc = app.add_subcommand("fit", "Fit one modelled variant to normalized tokens");
    fitc->add_option("--tokens", fit_tokens, "Normalized token CSV")->required();
    fitc->add_option("--variant", variant_name, "minimal-multi, minimal-uni, expanded-multi or expanded-uni");
    fitc->add_option("--vowels", vowels, "Two vowel labels");
    fitc->add_option("--contexts", contexts, "Two context labels");
    fitc->add_option("--max-iterations", max_iterations, "Optimizer iteration cap");
    fitc->add_flag("--block-diagonal", block_diagonal, "No cross-formant random-effect covariance");
    fitc->add_option("--out", fit_out, "Model JSON")->required();

    // simulate
    std::string sim_model, sim_out, sim_vowel, sim_context, sim_speaker, policy_name = "marginalize";
    int sim_n = 1000;
    std::uint64_t sim_seed = 1;
    bool sim_point = false;
    auto* simc = app.add_subcommand("simulate", "Simulate one cell from a fitted model");
    simc->add_option("--model", sim_model, "Model JSON")->required();
    simc->add_option("--vowel", sim_vowel, "Vowel level")->required();
    simc->add_option("--context", sim_context, "Context level")->required();
    simc->add_option("--speaker", sim_speaker, "Speaker (default: average speaker)");
    simc->add_option("--word-policy", policy_name, "marginalize or zero");
    simc->add_option("-n,--points", sim_n, "Number of points");
    simc->add_option("--seed", sim_seed, "Seed");
    simc->add_flag("--point-estimate", sim_point, "Use the point estimate instead of a parameter draw");
    simc->add_option("--out", sim_out, "Samples CSV")->required();

    // measure
    std::string meas_model, meas_tokens, meas_out, measure_name = "bhattacharyya", empirical = "raw";
    int reps = 100, draws = 1000;
    std::uint64_t meas_seed = 1;
    bool meas_by_speaker = false;
    auto* meas = app.add_subcommand("measure", "Overlap estimates from a model or from normalized tokens");
    auto* model_opt = meas->add_option("--model", meas_model, "Model JSON (modelled estimates)");
    auto* tokens_opt = meas->add_option("--tokens", meas_tokens, "Normalized token CSV (empirical estimates)");
    model_opt->excludes(tokens_opt);
    meas->add_option("--measure", measure_name, "bhattacharyya, euclidean or pillai");
    meas->add_option("--empirical", empirical, "raw or averaged (with --tokens)");
    meas->add_option("--reps", reps, "Replicates");
    meas->add_option("--draws", draws, "Points per cell per replicate");
    meas->add_option("--seed", meas_seed, "Seed");
    meas->add_option("--word-policy", policy_name, "marginalize or zero");
    meas->add_flag("--by-speaker", meas_by_speaker, "Add one estimate per speaker");
    meas->add_option("--vowels", vowels, "Two vowel labels");
    meas->add_option("--contexts", contexts, "Two context labels");
    meas->add_option("--out", meas_out, "Estimates CSV")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*run) {
            RunConfig cfg = RunConfig::load(config_path);
            if (seed_override) {
                cfg.seed = *seed_override;
                cfg.has_seed = true;
            }
            const ReportBundle bundle = run_pipeline(cfg);
            write_bundle(bundle, out_dir);
            int failed = 0;
            for (const auto& w : bundle.warnings) std::cerr << "warning: " << w << '\n';
            for (const auto& v : bundle.variants) {
                std::cerr << to_string(v.variant) << ": " << (v.ok ? "ok" : "FAILED " + v.error) << '\n';
                for (const auto& w : v.warnings) std::cerr << "  warning: " << w << '\n';
                failed += v.ok ? 0 : 1;
            }
            std::cerr << "wrote " << bundle.files.size() << " files to " << out_dir << '\n';
            return failed == static_cast<int>(bundle.variants.size()) ? 1 : 0;
        }
        if (*synth) {
            TruthSpec spec = scenario_name == "default" ? default_truth() : scenario(scenario_name);
            if (synth_speakers) spec.n_speakers = *synth_speakers;
            if (synth_tokens) spec.tokens_per_speaker = *synth_tokens;
            const TruthBundle tb = generate_corpus(spec, synth_seed);
            const std::filesystem::path dir(synth_out);
            write_file_atomic(dir / "tokens.csv", render([&](std::ostream& o) { write_tokens(o, tb.table); }));
            write_file_atomic(dir / "truth.json", render([&](std::ostream& o) { write_truth_json(o, spec, tb, synth_seed); }));
            std::cerr << "wrote " << tb.table.size() << " tokens to " << (dir / "tokens.csv").string() << '\n';
            return 0;
        }
        if (*ingest) {
            FilterSpec filter;
            filter.vowels = split_pair(vowels, "--vowels");
            filter.contexts = split_pair(contexts, "--contexts");
            filter.require_stressed = !keep_unstressed;
            const Normalization norm = parse_normalization(norm_name);
            const TokenTable loaded = load_tokens(std::filesystem::path(ingest_in));
            for (const auto& b : loaded.provenance().bad_rows)
                std::cerr << "line " << b.line << ": " << b.reason << '\n';
            std::vector<std::string> warnings;
            const TokenTable out = prepare_tokens(loaded, filter, norm, &warnings);
            for (const auto& w : warnings) std::cerr << "warning: " << w << '\n';
            write_file_atomic(ingest_out, render([&](std::ostream& o) { write_tokens(o, out); }));
            std::cerr << "kept " << out.size() << " of " << loaded.size() << " tokens\n";
            return 0;
        }
        if (*fitc) {
            ModelSpec levels;
            levels.vowel_levels = split_pair(vowels, "--vowels");
            levels.context_levels = split_pair(contexts, "--contexts");
            FitConfig fc;
            fc.max_iterations = max_iterations;
            fc.block_diagonal_random = block_diagonal;
            const FittedModel m = fit_variant(read_normalized(fit_tokens), parse_variant(variant_name), levels, fc);
            save_model(std::filesystem::path(fit_out), m);
            std::cerr << "loglik " << m.loglik << (m.converged ? "" : " (not converged)") << '\n';
            return 0;
        }
        if (*simc) {
            const FittedModel m = load_model(std::filesystem::path(sim_model));
            const ScopeSpec scope = sim_speaker.empty()
                                        ? ScopeSpec::average()
                                        : ScopeSpec::for_speaker(sim_speaker, parse_word_policy(policy_name));
            const ParamDraw draw = sim_point ? point_draw(m) : draw_parameter(m, derive_seed(sim_seed, 0));
            Sample2D s = simulate_cell(m, CellSpec{sim_vowel, sim_context, {}}, scope, sim_n, draw, derive_seed(sim_seed, 1));
            s.rep = 0;
            write_file_atomic(sim_out, render([&](std::ostream& o) { write_samples_csv(o, {s}); }));
            return 0;
        }
        if (*meas) {
            const Measure measure = parse_measure(measure_name);
            const auto vl = split_pair(vowels, "--vowels");
            const auto cl = split_pair(contexts, "--contexts");
            std::vector<OverlapEstimate> est;
            if (!meas_model.empty()) {
                const FittedModel m = load_model(std::filesystem::path(meas_model));
                std::vector<ScopeSpec> scopes{ScopeSpec::average()};
                if (meas_by_speaker)
                    for (const auto& s : m.speakers()) scopes.push_back(ScopeSpec::for_speaker(s, parse_word_policy(policy_name)));
                std::vector<OverlapRequest> req;
                for (const auto& sc : scopes)
                    for (const auto& ctx : cl) req.push_back({measure, CellSpec{vl[0], ctx, {}}, CellSpec{vl[1], ctx, {}}, sc});
                OverlapOptions opt;
                opt.reps = reps;
                opt.draws_per_rep = draws;
                est = modelled_overlap_batch(m, req, opt, meas_seed);
                for (auto& e : est) e.method = "model";
            } else if (!meas_tokens.empty()) {
                const TokenTable t = read_normalized(meas_tokens);
                if (empirical != "raw" && empirical != "averaged") throw ConfigError("--empirical takes raw or averaged");
                for (const auto& s : t.speakers())
                    for (const auto& ctx : cl) {
                        try {
                            est.push_back(empirical_overlap(t, measure, s, ctx, empirical == "averaged", {vl[0], vl[1]}));
                        } catch (const InsufficientTokens& e) {
                            std::cerr << "skipped: " << e.what() << '\n';
                        }
                    }
            } else {
                throw ConfigError("measure needs --model or --tokens");
            }
            write_file_atomic(meas_out, render([&](std::ostream& o) { write_estimates_csv(o, est); }));
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
