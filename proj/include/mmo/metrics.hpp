#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mmo/mixed_model.hpp"
#include "mmo/simulate.hpp"
#include "mmo/tokens.hpp"

namespace mmo {

enum class Measure { bhattacharyya, euclidean, pillai };
std::string to_string(Measure m);
Measure parse_measure(const std::string& text);

struct GridConfig {
    int resolution = 100;
    double padding = 3.0;  // in bandwidths
};

/// Bhattacharyya affinity of two point clouds through kernel densities on a
/// shared grid with a shared pooled bandwidth. Symmetric, in [0, 1], and
/// exactly 1 for identical samples.
double ba_grid(const Sample2D& p, const Sample2D& q, const GridConfig& cfg = {});
double ba_grid(const Eigen::MatrixX2d& p, const Eigen::MatrixX2d& q, const GridConfig& cfg = {});

/// Closed-form affinity of two Gaussians. Throws SingularCovariance.
double ba_gaussian(const Gaussian2D& a, const Gaussian2D& b);

double euclidean_distance(const Sample2D& p, const Sample2D& q);
double euclidean_distance(const Eigen::MatrixX2d& p, const Eigen::MatrixX2d& q);

/// Pillai trace of the two-group MANOVA. Throws SingularScatter.
double pillai(const Sample2D& p, const Sample2D& q);
double pillai(const Eigen::MatrixX2d& p, const Eigen::MatrixX2d& q);

double measure_samples(Measure m, const Eigen::MatrixX2d& p, const Eigen::MatrixX2d& q, const GridConfig& cfg = {});

struct OverlapEstimate {
    Measure measure = Measure::bhattacharyya;
    std::string vowel1;
    std::string vowel2;
    std::string context;
    std::string scope;   // "average" or a speaker
    std::string method;  // variant label, e.g. "minimal-multi" or "raw"
    std::vector<double> replicates;  // NaN marks a failed replicate
    double point = 0.0;              // median of successful replicates
    std::optional<double> lo;        // 2.5th percentile
    std::optional<double> hi;        // 97.5th percentile
    std::size_t failed = 0;
};

/// Median and central 95% interval of the finite entries.
void summarize(OverlapEstimate& est);

struct OverlapRequest {
    Measure measure = Measure::bhattacharyya;
    CellSpec a;
    CellSpec b;
    ScopeSpec scope;
};

struct OverlapOptions {
    int reps = 100;
    int draws_per_rep = 1000;
    GridConfig grid;
    double max_failure_fraction = 0.1;
};

/// Every request shares the replicate's parameter draw; a cell's simulated
/// sample depends only on (seed, replicate, cell, scope), so a request gives
/// the same replicates alone or in a batch. Throws when failed replicates
/// exceed the allowed fraction.
std::vector<OverlapEstimate> modelled_overlap_batch(const FittedModel& model,
                                                    const std::vector<OverlapRequest>& requests,
                                                    const OverlapOptions& options, std::uint64_t seed);

OverlapEstimate modelled_overlap(const FittedModel& model, Measure measure, const std::pair<CellSpec, CellSpec>& cells,
                                 const ScopeSpec& scope, std::uint64_t seed, int reps = 100,
                                 int draws_per_rep = 1000, const GridConfig& grid = {});

/// Measure on one speaker's normalized tokens in one context. With
/// `word_averaged` each word is replaced by its mean. Single replicate, no
/// interval. Throws InsufficientTokens below two points per vowel.
OverlapEstimate empirical_overlap(const TokenTable& table, Measure measure, const std::string& speaker,
                                  const std::string& context, bool word_averaged,
                                  const std::pair<std::string, std::string>& vowels = {"IH", "EH"},
                                  const GridConfig& grid = {});

// Columns speaker, context, measure, point, lo, hi, method, failed.
void write_estimates_csv(std::ostream& out, const std::vector<OverlapEstimate>& estimates);

}  // namespace mmo
