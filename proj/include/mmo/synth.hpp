#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "mmo/design.hpp"
#include "mmo/simulate.hpp"
#include "mmo/tokens.hpp"

namespace mmo {

enum class WordFrequency { uniform, zipf };

/// Ground truth for a synthetic corpus in normalized units. Cells are indexed
/// vowel_index * 2 + context_index with level order taken from `levels`.
struct TruthSpec {
    std::string name = "default";
    ModelSpec levels;          // vowel and context level names
    Eigen::MatrixXd beta;      // 4 x 2 sum-coded minimal coefficients
    Eigen::MatrixXd G_speaker; // 8 x 8, stacked [F1 slopes; F2 slopes]
    Eigen::Matrix2d G_word = Eigen::Matrix2d::Zero();
    std::array<Eigen::Matrix2d, 4> sigma;  // residual covariance per cell
    int n_speakers = 20;
    int n_words = 100;
    int tokens_per_speaker = 80;
    WordFrequency word_frequency = WordFrequency::zipf;
    double zipf_exponent = 1.0;
    double log_duration_mean = -2.1;  // about 120 ms
    double log_duration_sd = 0.3;

    /// Throws ConfigError unless counts are positive, covariances PSD and
    /// the Zipf exponent positive.
    void validate() const;

    /// Expected share of each word, rank order (word 0 most frequent).
    std::vector<double> word_probabilities() const;
    /// Cell of word w: words are dealt round-robin over the four cells.
    static int word_cell(int w) { return w % 4; }
};

/// Defaults: partial prenasal raising (true BA about 0.78 prenasal, 0.36
/// preoral), Zipf(1) word imbalance, word sd 0.3, 20 speakers, 100 words,
/// 80 tokens per speaker.
TruthSpec default_truth();

/// Builds beta from the four cell means (rows F1, F2 per cell).
Eigen::MatrixXd beta_from_cell_means(const std::array<Eigen::Vector2d, 4>& means);

using CellScopeKey = std::tuple<std::string, std::string, std::string>;  // vowel, context, scope

struct TruthBundle {
    TokenTable table;
    std::map<CellScopeKey, Gaussian2D> true_cell;
    std::map<std::pair<std::string, std::string>, double> true_overlap;  // (context, scope) -> BA
    std::map<std::string, Eigen::VectorXd> speaker_effects;             // length 8
    std::vector<Eigen::Vector2d> word_effects;
};

/// Tokens follow the minimal model equation. Formants are generated in
/// normalized units and also given in Hz (F1 = 500 + 70 z, F2 = 1800 + 200 z).
/// Speaker truth is mean + z b_s with covariance sigma + G_word; the average
/// speaker ignores every random effect. Deterministic in `seed`.
TruthBundle generate_corpus(const TruthSpec& spec, std::uint64_t seed);

/// Canned specs keyed "us-south-like", "north-america-like",
/// "southern-england-like", "scottish-like".
std::map<std::string, TruthSpec> four_dialect_scenarios();
TruthSpec scenario(const std::string& name);

void write_truth_json(std::ostream& out, const TruthSpec& spec, const TruthBundle& bundle, std::uint64_t seed);

}  // namespace mmo
