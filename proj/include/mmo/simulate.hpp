#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mmo/mixed_model.hpp"

namespace mmo {

struct CellSpec {
    std::string vowel;
    std::string context;
    // "log_duration": offset from the corpus mean log-duration (default 0).
    std::map<std::string, double> control_values;
};

enum class ScopeKind { average_speaker, by_speaker };
enum class WordPolicy { marginalize, zero };

std::string to_string(WordPolicy p);
WordPolicy parse_word_policy(const std::string& text);

struct ScopeSpec {
    ScopeKind kind = ScopeKind::average_speaker;
    std::string speaker;  // by_speaker only
    WordPolicy word_policy = WordPolicy::marginalize;

    static ScopeSpec average() { return {}; }
    static ScopeSpec for_speaker(std::string name, WordPolicy policy = WordPolicy::marginalize) {
        return {ScopeKind::by_speaker, std::move(name), policy};
    }
    // "average" or the speaker name.
    std::string label() const { return kind == ScopeKind::average_speaker ? "average" : speaker; }
};

struct Gaussian2D {
    Eigen::Vector2d mean = Eigen::Vector2d::Zero();
    Eigen::Matrix2d cov = Eigen::Matrix2d::Identity();
};

struct Sample2D {
    Eigen::MatrixX2d points;  // columns f1_norm, f2_norm
    std::string vowel;
    std::string context;
    std::string scope;
    int rep = -1;

    Eigen::Index size() const { return points.rows(); }
    Eigen::Vector2d mean() const;
    Eigen::Matrix2d covariance() const;  // divisor n - 1
};

/// Predictive Gaussian of one cell. The average speaker ignores every random
/// effect; a named speaker adds its conditional modes and, under the
/// marginalize policy, the word (and following-segment) variance.
Gaussian2D predictive_mean_cov(const FittedModel& model, const CellSpec& cell, const ScopeSpec& scope,
                               const ParamDraw& draw);

Sample2D simulate_cell(const FittedModel& model, const CellSpec& cell, const ScopeSpec& scope,
                       Eigen::Index n_points, const ParamDraw& draw, std::uint64_t seed);

/// n independent draws from `g`, deterministic in `seed`.
Eigen::MatrixX2d sample_gaussian(const Gaussian2D& g, Eigen::Index n, std::uint64_t seed);

// Columns f1, f2, vowel, context, scope, rep.
void write_samples_csv(std::ostream& out, const std::vector<Sample2D>& samples);

}  // namespace mmo
