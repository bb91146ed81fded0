#include "mmo/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>

#include "json.hpp"

#include "mmo/error.hpp"
#include "mmo/metrics.hpp"
#include "mmo/rng.hpp"

namespace mmo {

namespace {

bool psd(const Eigen::MatrixXd& m) {
    if (m.rows() != m.cols() || !m.allFinite()) return false;
    if (!m.isApprox(m.transpose(), 1e-12) && (m - m.transpose()).norm() > 1e-12) return false;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m, Eigen::EigenvaluesOnly);
    return es.eigenvalues().minCoeff() >= -1e-12 * std::max(1.0, m.diagonal().cwiseAbs().maxCoeff());
}

// Lower factor with L L' = m for a PSD m; zero columns where m is singular.
Eigen::MatrixXd psd_factor(const Eigen::MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
    const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * ev.asDiagonal();
}

Eigen::VectorXd draw(const Eigen::MatrixXd& factor, Rng& rng, Normal& nd) {
    Eigen::VectorXd z(factor.cols());
    for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = nd(rng);
    return factor * z;
}

Eigen::Matrix2d cov2(double sd1, double sd2, double rho) {
    Eigen::Matrix2d m;
    m << sd1 * sd1, rho * sd1 * sd2, rho * sd1 * sd2, sd2 * sd2;
    return m;
}

// Diagonal speaker covariance from per-slope sds (intercept, vowel, context, interaction).
Eigen::MatrixXd speaker_cov(const Eigen::Vector4d& sd_f1, const Eigen::Vector4d& sd_f2) {
    Eigen::VectorXd d(8);
    d << sd_f1.array().square(), sd_f2.array().square();
    return d.asDiagonal();
}

nlohmann::json mat_json(const Eigen::MatrixXd& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        nlohmann::json row = nlohmann::json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        rows.push_back(row);
    }
    return rows;
}

TruthSpec make_scenario(const std::string& name, const std::array<Eigen::Vector2d, 4>& means, const Eigen::MatrixXd& g_speaker,
                        double word_sd) {
    TruthSpec s;
    s.name = name;
    s.beta = beta_from_cell_means(means);
    s.G_speaker = g_speaker;
    s.G_word = cov2(word_sd, word_sd, 0.0);
    s.sigma.fill(cov2(0.5, 0.5, 0.2));
    return s;
}

}  // namespace

void TruthSpec::validate() const {
    if (n_speakers < 1 || n_words < 1 || tokens_per_speaker < 1) throw ConfigError("synthetic counts must be positive");
    if (beta.rows() != 4 || beta.cols() != 2) throw ConfigError("beta must be 4 x 2");
    if (G_speaker.rows() != 8 || !psd(G_speaker)) throw ConfigError("speaker covariance must be 8 x 8 PSD");
    if (!psd(G_word)) throw ConfigError("word covariance must be PSD");
    for (const auto& s : sigma)
        if (!psd(s)) throw ConfigError("residual covariance must be PSD");
    if (word_frequency == WordFrequency::zipf && !(zipf_exponent > 0.0)) throw ConfigError("zipf exponent must be positive");
    if (!(log_duration_sd >= 0.0)) throw ConfigError("duration sd must be non-negative");
}

std::vector<double> TruthSpec::word_probabilities() const {
    std::vector<double> w(static_cast<std::size_t>(n_words));
    double total = 0.0;
    for (int k = 0; k < n_words; ++k) {
        w[k] = word_frequency == WordFrequency::zipf ? std::pow(k + 1.0, -zipf_exponent) : 1.0;
        total += w[k];
    }
    for (double& v : w) v /= total;
    return w;
}

Eigen::MatrixXd beta_from_cell_means(const std::array<Eigen::Vector2d, 4>& m) {
    // cells: 0 (v1,c1), 1 (v1,c2), 2 (v2,c1), 3 (v2,c2); first levels coded +0.5
    Eigen::MatrixXd b(4, 2);
    for (int d = 0; d < 2; ++d) {
        b(0, d) = 0.25 * (m[0][d] + m[1][d] + m[2][d] + m[3][d]);
        b(1, d) = 0.5 * ((m[0][d] - m[2][d]) + (m[1][d] - m[3][d]));
        b(2, d) = 0.5 * ((m[0][d] - m[1][d]) + (m[2][d] - m[3][d]));
        b(3, d) = (m[0][d] - m[2][d]) - (m[1][d] - m[3][d]);
    }
    return b;
}

TruthSpec default_truth() {
    using V = Eigen::Vector2d;
    const Eigen::Vector4d modest(0.15, 0.1, 0.1, 0.1);
    // Partial prenasal raising: both contrasts away from the BA ceiling.
    return make_scenario("default", {V(-0.5, 0.6), V(-0.4, 0.5), V(-0.1, 0.1), V(0.4, -0.5)},
                         speaker_cov(modest, modest), 0.3);
}

std::map<std::string, TruthSpec> four_dialect_scenarios() {
    using V = Eigen::Vector2d;
    const Eigen::Vector4d modest(0.15, 0.1, 0.1, 0.1);
    std::map<std::string, TruthSpec> out;
    // Prenasal IH and EH nearly coincide; preoral well apart.
    out.emplace("us-south-like",
                make_scenario("us-south-like", {V(-0.35, 0.55), V(-0.4, 0.5), V(-0.3, 0.45), V(0.4, -0.5)},
                              speaker_cov(modest, modest), 0.15));
    // Moderate prenasal raising whose size varies a lot between speakers.
    const Eigen::Vector4d wide(0.15, 0.15, 0.15, 0.5);
    out.emplace("north-america-like",
                make_scenario("north-america-like", {V(-0.5, 0.6), V(-0.4, 0.5), V(-0.1, 0.1), V(0.4, -0.5)},
                              speaker_cov(wide, wide), 0.15));
    // Separated in both contexts, almost no context effect on the contrast.
    const Eigen::Vector4d narrow(0.15, 0.1, 0.05, 0.05);
    out.emplace("southern-england-like",
                make_scenario("southern-england-like", {V(-0.35, 0.4), V(-0.375, 0.425), V(0.35, -0.4), V(0.375, -0.425)},
                              speaker_cov(narrow, narrow), 0.15));
    // Heavy overlap everywhere and no height difference.
    out.emplace("scottish-like",
                make_scenario("scottish-like", {V(0.0, 0.1), V(0.1, 0.15), V(0.0, 0.0), V(0.1, -0.05)},
                              speaker_cov(modest, modest), 0.15));
    return out;
}

TruthSpec scenario(const std::string& name) {
    auto all = four_dialect_scenarios();
    auto it = all.find(name);
    if (it == all.end()) throw ConfigError("unknown scenario '" + name + "'");
    return it->second;
}

TruthBundle generate_corpus(const TruthSpec& spec, std::uint64_t seed) {
    spec.validate();
    const ModelSpec& lv = spec.levels;
    Rng rng(seed);
    Normal nd;
    TruthBundle out;

    const Eigen::MatrixXd speaker_factor = psd_factor(spec.G_speaker);
    const Eigen::MatrixXd word_factor = psd_factor(spec.G_word);
    std::array<Eigen::MatrixXd, 4> sigma_factor;
    for (int c = 0; c < 4; ++c) sigma_factor[c] = psd_factor(spec.sigma[c]);

    std::array<CellCoding, 4> coding;
    std::array<Eigen::Vector2d, 4> cell_mean;
    for (int c = 0; c < 4; ++c) {
        coding[c] = code_cell(lv, lv.vowel_levels[c / 2], lv.context_levels[c % 2]);
        cell_mean[c] = spec.beta.transpose() * coding[c].fixed_row(Structure::minimal);
    }

    out.word_effects.resize(static_cast<std::size_t>(spec.n_words));
    for (auto& w : out.word_effects) w = draw(word_factor, rng, nd);

    std::vector<std::string> word_names(out.word_effects.size());
    std::vector<std::string> following(out.word_effects.size());
    static const char* nasals[] = {"N", "M", "NG"};
    static const char* orals[] = {"T", "D", "K", "S", "Z"};
    for (int w = 0; w < spec.n_words; ++w) {
        char buf[16];
        std::snprintf(buf, sizeof buf, "w%03d", w + 1);
        word_names[w] = buf;
        const bool nasal = TruthSpec::word_cell(w) % 2 == 0;
        following[w] = nasal ? nasals[(w / 4) % 3] : orals[(w / 4) % 5];
    }

    // Cumulative word law for inverse-CDF sampling.
    const std::vector<double> prob = spec.word_probabilities();
    std::vector<double> cdf(prob.size());
    double acc = 0.0;
    for (std::size_t k = 0; k < prob.size(); ++k) cdf[k] = (acc += prob[k]);
    cdf.back() = 1.0;

    std::vector<VowelToken> tokens;
    tokens.reserve(static_cast<std::size_t>(spec.n_speakers) * spec.tokens_per_speaker);
    for (int s = 0; s < spec.n_speakers; ++s) {
        char buf[16];
        std::snprintf(buf, sizeof buf, "s%02d", s + 1);
        const std::string speaker = buf;
        const Eigen::VectorXd b = draw(speaker_factor, rng, nd);
        out.speaker_effects[speaker] = b;
        for (int c = 0; c < 4; ++c) {
            const Eigen::VectorXd z = coding[c].speaker_row();
            Gaussian2D g;
            g.mean = cell_mean[c] + Eigen::Vector2d(z.dot(b.head(4)), z.dot(b.tail(4)));
            g.cov = spec.sigma[c] + spec.G_word;
            out.true_cell[{lv.vowel_levels[c / 2], lv.context_levels[c % 2], speaker}] = g;
        }
        for (int k = 0; k < spec.tokens_per_speaker; ++k) {
            const double u = Normal::uniform(rng);
            const int w = static_cast<int>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
            const int c = TruthSpec::word_cell(w);
            const Eigen::VectorXd z = coding[c].speaker_row();
            Eigen::Vector2d y = cell_mean[c] + Eigen::Vector2d(z.dot(b.head(4)), z.dot(b.tail(4))) + out.word_effects[w];
            y += draw(sigma_factor[c], rng, nd);
            VowelToken t;
            t.speaker = speaker;
            t.word = word_names[w];
            t.vowel = lv.vowel_levels[c / 2];
            t.context = lv.context_levels[c % 2];
            t.f1_norm = y[0];
            t.f2_norm = y[1];
            t.f1_hz = 500.0 + 70.0 * y[0];
            t.f2_hz = 1800.0 + 200.0 * y[1];
            t.duration_s = std::exp(spec.log_duration_mean + spec.log_duration_sd * nd(rng));
            t.following_segment = following[w];
            t.stressed = true;
            tokens.push_back(std::move(t));
        }
    }
    for (int c = 0; c < 4; ++c) {
        Gaussian2D g;
        g.mean = cell_mean[c];
        g.cov = spec.sigma[c];
        out.true_cell[{lv.vowel_levels[c / 2], lv.context_levels[c % 2], "average"}] = g;
    }

    std::vector<std::string> scopes{"average"};
    for (const auto& [name, b] : out.speaker_effects) scopes.push_back(name);
    for (const auto& scope : scopes) {
        for (const auto& ctx : lv.context_levels) {
            const auto& a = out.true_cell.at({lv.vowel_levels[0], ctx, scope});
            const auto& b = out.true_cell.at({lv.vowel_levels[1], ctx, scope});
            // A degenerate truth has no affinity; kept as NaN.
            try {
                out.true_overlap[{ctx, scope}] = ba_gaussian(a, b);
            } catch (const SingularCovariance&) {
                out.true_overlap[{ctx, scope}] = std::numeric_limits<double>::quiet_NaN();
            }
        }
    }

    Provenance prov;
    prov.source = "synth:" + spec.name + ":" + std::to_string(seed);
    prov.rows_read = tokens.size();
    out.table = TokenTable(std::move(tokens), std::move(prov));
    return out;
}

void write_truth_json(std::ostream& out, const TruthSpec& spec, const TruthBundle& bundle, std::uint64_t seed) {
    nlohmann::json j;
    j["schema_version"] = 1;
    j["scenario"] = spec.name;
    j["seed"] = seed;
    j["vowel_levels"] = spec.levels.vowel_levels;
    j["context_levels"] = spec.levels.context_levels;
    j["beta"] = mat_json(spec.beta);
    j["G_speaker"] = mat_json(spec.G_speaker);
    j["G_word"] = mat_json(spec.G_word);
    for (const auto& s : spec.sigma) j["sigma"].push_back(mat_json(s));
    j["n_speakers"] = spec.n_speakers;
    j["n_words"] = spec.n_words;
    j["tokens_per_speaker"] = spec.tokens_per_speaker;
    j["word_frequency"] = spec.word_frequency == WordFrequency::zipf ? "zipf" : "uniform";
    j["zipf_exponent"] = spec.zipf_exponent;
    j["log_duration"] = {{"mean", spec.log_duration_mean}, {"sd", spec.log_duration_sd}};
    nlohmann::json cells = nlohmann::json::array();
    for (const auto& [key, g] : bundle.true_cell) {
        cells.push_back({{"vowel", std::get<0>(key)},
                         {"context", std::get<1>(key)},
                         {"scope", std::get<2>(key)},
                         {"mean", {g.mean[0], g.mean[1]}},
                         {"cov", mat_json(g.cov)}});
    }
    j["true_cell"] = cells;
    nlohmann::json ov = nlohmann::json::array();
    for (const auto& [key, v] : bundle.true_overlap)
        ov.push_back({{"context", key.first}, {"scope", key.second}, {"bhattacharyya", v}});
    j["true_overlap"] = ov;
    out << j.dump(2) << '\n';
}

}  // namespace mmo
