#include "mmo/simulate.hpp"

#include <ostream>

#include "mmo/csv.hpp"
#include "mmo/error.hpp"
#include "mmo/rng.hpp"

namespace mmo {

std::string to_string(WordPolicy p) { return p == WordPolicy::marginalize ? "marginalize" : "zero"; }

WordPolicy parse_word_policy(const std::string& text) {
    if (text == "marginalize") return WordPolicy::marginalize;
    if (text == "zero") return WordPolicy::zero;
    throw ConfigError("unknown word policy '" + text + "'");
}

Eigen::Vector2d Sample2D::mean() const {
    if (points.rows() == 0) throw DegenerateSample("empty sample");
    return points.colwise().mean().transpose();
}

Eigen::Matrix2d Sample2D::covariance() const {
    if (points.rows() < 2) throw DegenerateSample("sample needs at least two points");
    const Eigen::RowVector2d m = points.colwise().mean();
    const Eigen::MatrixX2d c = points.rowwise() - m;
    return (c.transpose() * c) / static_cast<double>(points.rows() - 1);
}

Gaussian2D predictive_mean_cov(const FittedModel& model, const CellSpec& cell, const ScopeSpec& scope,
                               const ParamDraw& draw) {
    if (draw.beta.cols() != 2) throw Error("simulation needs a two-formant model");
    const CellCoding coding = code_cell(model.spec, cell.vowel, cell.context);
    double ld = 0.0;
    if (auto it = cell.control_values.find("log_duration"); it != cell.control_values.end()) ld = it->second;
    const Eigen::VectorXd x = coding.fixed_row(model.spec.structure, ld);
    Gaussian2D g;
    g.mean = draw.beta.transpose() * x;
    g.cov = draw.cov.residual.cov_at(coding.variance_row());
    if (scope.kind == ScopeKind::by_speaker) {
        auto it = model.modes.speaker.find(scope.speaker);
        if (it == model.modes.speaker.end()) throw UnknownSpeaker(scope.speaker);
        const Eigen::VectorXd z = coding.speaker_row();
        const Eigen::Index q = z.size();
        for (int d = 0; d < 2; ++d) g.mean[d] += z.dot(it->second.segment(d * q, q));
        if (scope.word_policy == WordPolicy::marginalize) {
            g.cov += draw.cov.G_word;
            if (draw.cov.G_following) g.cov += *draw.cov.G_following;
        }
    }
    g.cov = 0.5 * (g.cov + g.cov.transpose());
    return g;
}

Eigen::MatrixX2d sample_gaussian(const Gaussian2D& g, Eigen::Index n, std::uint64_t seed) {
    // Cholesky of a PSD 2x2; a vanishing variance gives a degenerate column.
    Eigen::Matrix2d L = Eigen::Matrix2d::Zero();
    const double a = std::max(g.cov(0, 0), 0.0);
    L(0, 0) = std::sqrt(a);
    if (L(0, 0) > 0.0) L(1, 0) = g.cov(1, 0) / L(0, 0);
    L(1, 1) = std::sqrt(std::max(g.cov(1, 1) - L(1, 0) * L(1, 0), 0.0));
    Rng rng(seed);
    Normal nd;
    Eigen::MatrixX2d pts(n, 2);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double z0 = nd(rng);
        const double z1 = nd(rng);
        pts(i, 0) = g.mean[0] + L(0, 0) * z0;
        pts(i, 1) = g.mean[1] + L(1, 0) * z0 + L(1, 1) * z1;
    }
    return pts;
}

Sample2D simulate_cell(const FittedModel& model, const CellSpec& cell, const ScopeSpec& scope,
                       Eigen::Index n_points, const ParamDraw& draw, std::uint64_t seed) {
    if (n_points < 2) throw DegenerateSample("simulate_cell needs at least two points");
    Sample2D s;
    s.points = sample_gaussian(predictive_mean_cov(model, cell, scope, draw), n_points, seed);
    s.vowel = cell.vowel;
    s.context = cell.context;
    s.scope = scope.label();
    return s;
}

void write_samples_csv(std::ostream& out, const std::vector<Sample2D>& samples) {
    csv::write_record(out, {"f1", "f2", "vowel", "context", "scope", "rep"});
    for (const auto& s : samples) {
        for (Eigen::Index i = 0; i < s.points.rows(); ++i) {
            csv::write_record(out, {csv::format_double(s.points(i, 0)), csv::format_double(s.points(i, 1)), s.vowel,
                                    s.context, s.scope, std::to_string(s.rep)});
        }
    }
}

}  // namespace mmo
