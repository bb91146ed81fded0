#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mmo/tokens.hpp"

namespace mmo {

enum class Structure { minimal, expanded };
enum class Response { multivariate, univariate_f1, univariate_f2 };

std::string to_string(Structure s);
std::string to_string(Response r);
Structure parse_structure(const std::string& text);
Response parse_response(const std::string& text);

inline int response_dims(Response r) { return r == Response::multivariate ? 2 : 1; }

/// Declarative model structure. Level order fixes coefficient signs: the
/// first level of each factor is coded +0.5, the second -0.5.
struct ModelSpec {
    Structure structure = Structure::minimal;
    Response response = Response::multivariate;
    std::array<std::string, 2> vowel_levels{"IH", "EH"};
    std::array<std::string, 2> context_levels{"nasal", "oral"};
    // "log_duration_center" is filled by build_design for the expanded model.
    std::map<std::string, double> control_values;

    int fixed_columns() const { return structure == Structure::minimal ? 4 : 8; }
};

inline constexpr int kSpeakerSlopes = 4;   // intercept, vowel, context, vowel x context
inline constexpr int kVarianceColumns = 4; // same four columns drive the log-sd model

/// Sum-coded (+-0.5) predictor rows for one vowel x context cell.
struct CellCoding {
    double vowel = 0.0;
    double context = 0.0;

    // Fixed-effect row; `log_duration` is the centered log-duration value.
    Eigen::VectorXd fixed_row(Structure s, double log_duration = 0.0) const;
    Eigen::VectorXd speaker_row() const;   // length kSpeakerSlopes
    Eigen::VectorXd variance_row() const;  // length kVarianceColumns
};

CellCoding code_cell(const ModelSpec& spec, const std::string& vowel, const std::string& context);

/// Numeric encoding of the stacked response model.
struct DesignMatrices {
    ModelSpec spec;
    Eigen::MatrixXd X;          // n x p
    Eigen::MatrixXd Y;          // n x D normalized formants
    Eigen::MatrixXd V;          // n x m variance design (expanded only, else 0 columns)
    Eigen::MatrixXd Z_speaker;  // n x q per-speaker design
    std::vector<int> speaker_index;
    std::vector<int> word_index;
    std::vector<int> following_index;  // empty for the minimal structure
    std::vector<std::string> speakers;
    std::vector<std::string> words;
    std::vector<std::string> followings;
    std::vector<std::string> fixed_names;

    int n() const { return static_cast<int>(X.rows()); }
    int p() const { return static_cast<int>(X.cols()); }
    int dims() const { return static_cast<int>(Y.cols()); }
    bool has_following() const { return !following_index.empty(); }
    bool has_variance_model() const { return V.cols() > 0; }
};

/// Builds X, Z and Y from a normalized table. Word, speaker and following
/// indices are dense and 0-based in first-appearance order. Throws
/// MissingLevel when a factor level has no tokens.
DesignMatrices build_design(const TokenTable& table, const ModelSpec& spec);

}  // namespace mmo
