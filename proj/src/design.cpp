#include "mmo/design.hpp"

#include <cmath>
#include <unordered_map>

#include "mmo/error.hpp"

namespace mmo {

std::string to_string(Structure s) { return s == Structure::minimal ? "minimal" : "expanded"; }

std::string to_string(Response r) {
    switch (r) {
        case Response::multivariate: return "multivariate";
        case Response::univariate_f1: return "univariate_f1";
        case Response::univariate_f2: return "univariate_f2";
    }
    return "?";
}

Structure parse_structure(const std::string& text) {
    if (text == "minimal") return Structure::minimal;
    if (text == "expanded") return Structure::expanded;
    throw ConfigError("unknown model structure '" + text + "'");
}

Response parse_response(const std::string& text) {
    if (text == "multivariate") return Response::multivariate;
    if (text == "univariate_f1") return Response::univariate_f1;
    if (text == "univariate_f2") return Response::univariate_f2;
    throw ConfigError("unknown response '" + text + "'");
}

Eigen::VectorXd CellCoding::fixed_row(Structure s, double log_duration) const {
    const double vc = vowel * context;
    if (s == Structure::minimal) return Eigen::Vector4d(1.0, vowel, context, vc);
    Eigen::VectorXd row(8);
    row << 1.0, vowel, context, vc, log_duration, log_duration * vowel, log_duration * context,
        log_duration * vc;
    return row;
}

Eigen::VectorXd CellCoding::speaker_row() const {
    return Eigen::Vector4d(1.0, vowel, context, vowel * context);
}

Eigen::VectorXd CellCoding::variance_row() const { return speaker_row(); }

CellCoding code_cell(const ModelSpec& spec, const std::string& vowel, const std::string& context) {
    auto code = [](const std::array<std::string, 2>& levels, const std::string& value,
                   const char* factor) {
        if (value == levels[0]) return 0.5;
        if (value == levels[1]) return -0.5;
        throw ConfigError(std::string("'") + value + "' is not a level of " + factor);
    };
    return {code(spec.vowel_levels, vowel, "vowel"), code(spec.context_levels, context, "context")};
}

namespace {

int intern(std::unordered_map<std::string, int>& index, std::vector<std::string>& names,
           const std::string& key) {
    auto [it, inserted] = index.emplace(key, static_cast<int>(names.size()));
    if (inserted) names.push_back(key);
    return it->second;
}

}  // namespace

DesignMatrices build_design(const TokenTable& table, const ModelSpec& spec_in) {
    if (!table.normalized()) throw Error("build_design needs normalized formants");

    DesignMatrices d;
    d.spec = spec_in;
    const ModelSpec& spec = d.spec;
    const int n = static_cast<int>(table.size());
    const bool expanded = spec.structure == Structure::expanded;

    std::array<std::array<int, 2>, 2> seen{};  // [factor][level] counts
    for (const auto& t : table.tokens()) {
        for (int l = 0; l < 2; ++l) {
            if (t.vowel == spec.vowel_levels[l]) ++seen[0][l];
            if (t.context == spec.context_levels[l]) ++seen[1][l];
        }
    }
    for (int l = 0; l < 2; ++l) {
        if (!seen[0][l]) throw MissingLevel("vowel", spec.vowel_levels[l]);
        if (!seen[1][l]) throw MissingLevel("context", spec.context_levels[l]);
    }

    double center = 0.0;
    if (expanded) {
        for (const auto& t : table.tokens()) center += std::log(t.duration_s);
        center /= n;
        d.spec.control_values["log_duration_center"] = center;
    }

    const int p = spec.fixed_columns();
    const int dims = response_dims(spec.response);
    d.X.resize(n, p);
    d.Y.resize(n, dims);
    d.Z_speaker.resize(n, kSpeakerSlopes);
    if (expanded) d.V.resize(n, kVarianceColumns);
    d.speaker_index.resize(n);
    d.word_index.resize(n);
    if (expanded) d.following_index.resize(n);

    std::unordered_map<std::string, int> speaker_ids, word_ids, following_ids;
    for (int i = 0; i < n; ++i) {
        const auto& t = table[static_cast<std::size_t>(i)];
        const CellCoding cell = code_cell(spec, t.vowel, t.context);
        const double ld = expanded ? std::log(t.duration_s) - center : 0.0;
        d.X.row(i) = cell.fixed_row(spec.structure, ld).transpose();
        d.Z_speaker.row(i) = cell.speaker_row().transpose();
        if (expanded) d.V.row(i) = cell.variance_row().transpose();

        switch (spec.response) {
            case Response::multivariate:
                d.Y(i, 0) = *t.f1_norm;
                d.Y(i, 1) = *t.f2_norm;
                break;
            case Response::univariate_f1: d.Y(i, 0) = *t.f1_norm; break;
            case Response::univariate_f2: d.Y(i, 0) = *t.f2_norm; break;
        }
        d.speaker_index[i] = intern(speaker_ids, d.speakers, t.speaker);
        d.word_index[i] = intern(word_ids, d.words, t.word);
        if (expanded) d.following_index[i] = intern(following_ids, d.followings, t.following_segment);
    }

    d.fixed_names = {"intercept", "vowel", "context", "vowel:context"};
    if (expanded) {
        for (const char* name :
             {"log_duration", "log_duration:vowel", "log_duration:context",
              "log_duration:vowel:context"}) {
            d.fixed_names.emplace_back(name);
        }
    }
    return d;
}

}  // namespace mmo
