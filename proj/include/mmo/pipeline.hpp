#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mmo/metrics.hpp"
#include "mmo/mixed_model.hpp"
#include "mmo/report.hpp"
#include "mmo/synth.hpp"
#include "mmo/tokens.hpp"

namespace mmo {

/// The six distribution types: empirical raw, empirical word-averaged, and
/// the minimal and expanded models fitted jointly or one formant at a time.
enum class Variant { raw, averaged, minimal_uni, minimal_multi, expanded_uni, expanded_multi };
std::string to_string(Variant v);
Variant parse_variant(const std::string& text);
bool is_modelled(Variant v);

// lobanov: speaker stats over the whole inventory; lobanov_subset: over the
// filtered vowels only; precomputed: keep the f1_norm/f2_norm columns.
enum class Normalization { lobanov, lobanov_subset, precomputed };
std::string to_string(Normalization n);
Normalization parse_normalization(const std::string& text);

struct SynthInput {
    std::string scenario;  // a four_dialect_scenarios key or "default"
    std::optional<std::uint64_t> seed;  // defaults to the run seed
    std::optional<int> n_speakers;
    std::optional<int> tokens_per_speaker;
};

struct RunConfig {
    std::optional<std::filesystem::path> input;
    std::optional<SynthInput> synth;
    std::optional<Normalization> normalization;  // lobanov for files, precomputed for synth
    LoadOptions loading;  // column names and bad-row tolerance
    FilterSpec filter;
    std::vector<Variant> variants;
    std::vector<Measure> measures;
    int reps = 100;
    int draws = 1000;
    std::uint64_t seed = 0;
    bool has_seed = false;
    bool by_speaker = true;
    WordPolicy word_policy = WordPolicy::marginalize;
    GridConfig grid;
    double ellipse_quantile = 0.1;
    int max_iterations = 500;
    double gradient_tolerance = 1e-6;
    bool block_diagonal_random = false;  // no cross-formant speaker or word covariance

    /// Throws ConfigError for an unusable config.
    void validate() const;

    /// Canonical JSON text; equal configs give equal bytes.
    std::string to_json() const;
    /// Accepts a config object or a run manifest (its embedded config).
    static RunConfig from_json(const std::string& text);
    static RunConfig load(const std::filesystem::path& path);
};

struct VariantResult {
    Variant variant = Variant::raw;
    bool ok = false;
    std::string error;
    std::vector<std::string> warnings;
    std::vector<OverlapEstimate> estimates;
    std::vector<std::pair<std::string, Gaussian2D>> cells;  // "vowel/context" -> average-speaker Gaussian
    std::optional<FittedModel> model;
};

struct ReportBundle {
    RunConfig config;
    TokenTable analysis;  // filtered, normalized tokens
    std::vector<std::string> warnings;
    std::optional<TruthBundle> truth;
    std::vector<VariantResult> variants;
    std::map<std::string, std::string> files;  // relative path -> contents, manifest included
};

/// Loads or synthesizes tokens, normalizes, runs every variant and renders
/// all outputs in memory. A failing variant is recorded and the rest still run.
ReportBundle run_pipeline(const RunConfig& config);

/// Writes every file of the bundle atomically under `out_dir`.
void write_bundle(const ReportBundle& bundle, const std::filesystem::path& out_dir);

/// Filters and normalizes. Empty-cell notices go to `warnings` when given.
TokenTable prepare_tokens(const TokenTable& loaded, const FilterSpec& filter, Normalization norm,
                          std::vector<std::string>* warnings = nullptr);

/// Fits one modelled variant on normalized tokens.
FittedModel fit_variant(const TokenTable& analysis, Variant v, const ModelSpec& levels, const FitConfig& config);

std::uint64_t fnv1a(const std::string& bytes);

}  // namespace mmo
