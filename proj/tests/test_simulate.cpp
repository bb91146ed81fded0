#include <doctest.h>

#include <cmath>
#include <sstream>

#include "mmo/error.hpp"
#include "mmo/simulate.hpp"
#include "test_support.hpp"

using namespace mmo;

namespace {

const FittedModel& model() {
    static const FittedModel m = testsupport::small_fit(testsupport::small_truth(), 11);
    return m;
}

}  // namespace

TEST_CASE("average speaker is x beta with the residual covariance") {
    const FittedModel& m = model();
    const ParamDraw d = point_draw(m);
    const Gaussian2D g = predictive_mean_cov(m, {"IH", "nasal", {}}, ScopeSpec::average(), d);
    const Eigen::Vector4d x(1, 0.5, 0.5, 0.25);
    CHECK((g.mean - m.beta.transpose() * x).norm() < 1e-14);
    CHECK((g.cov - m.cov.residual.Sigma).norm() < 1e-14);
}

TEST_CASE("speaker with zero modes adds only word variance") {
    FittedModel m = model();
    const std::string s = m.speakers().front();
    m.modes.speaker[s].setZero();
    const ParamDraw d = point_draw(m);
    const CellSpec cell{"EH", "oral", {}};
    const Gaussian2D avg = predictive_mean_cov(m, cell, ScopeSpec::average(), d);
    const Gaussian2D spk = predictive_mean_cov(m, cell, ScopeSpec::for_speaker(s), d);
    CHECK((spk.mean - avg.mean).norm() == 0.0);
    CHECK((spk.cov - (avg.cov + m.cov.G_word)).norm() < 1e-14);
    const Gaussian2D zero = predictive_mean_cov(m, cell, ScopeSpec::for_speaker(s, WordPolicy::zero), d);
    CHECK((zero.cov - avg.cov).norm() < 1e-14);
    CHECK(zero.cov(0, 0) <= spk.cov(0, 0));
    CHECK(zero.cov(1, 1) <= spk.cov(1, 1));
    CHECK_THROWS_AS(predictive_mean_cov(m, cell, ScopeSpec::for_speaker("nobody"), d), UnknownSpeaker);
}

TEST_CASE("speaker modes shift the mean through the slope row") {
    const FittedModel& m = model();
    const std::string s = m.speakers().back();
    const ParamDraw d = point_draw(m);
    const Gaussian2D avg = predictive_mean_cov(m, {"IH", "oral", {}}, ScopeSpec::average(), d);
    const Gaussian2D spk = predictive_mean_cov(m, {"IH", "oral", {}}, ScopeSpec::for_speaker(s), d);
    const Eigen::Vector4d z(1, 0.5, -0.5, -0.25);
    const Eigen::VectorXd& b = m.modes.speaker.at(s);
    CHECK(spk.mean[0] - avg.mean[0] == doctest::Approx(z.dot(b.head(4))));
    CHECK(spk.mean[1] - avg.mean[1] == doctest::Approx(z.dot(b.tail(4))));
}

TEST_CASE("log-linear residual: v.gamma = log 2 doubles the sd") {
    ModelSpec spec;
    spec.structure = Structure::expanded;
    FittedModel m;
    m.spec = spec;
    ParamDraw d;
    d.beta = Eigen::MatrixXd::Zero(8, 2);
    d.cov.G_word = Eigen::Matrix2d::Zero();
    d.cov.residual.log_linear = true;
    d.cov.residual.gamma = Eigen::MatrixXd::Zero(4, 2);
    d.cov.residual.gamma(0, 0) = std::log(0.3);
    d.cov.residual.rho = 0.25;
    const Gaussian2D base = predictive_mean_cov(m, {"IH", "oral", {}}, ScopeSpec::average(), d);
    d.cov.residual.gamma(1, 0) = 2.0 * std::log(2.0);  // vowel coded +0.5
    const Gaussian2D wide = predictive_mean_cov(m, {"IH", "oral", {}}, ScopeSpec::average(), d);
    CHECK(std::sqrt(wide.cov(0, 0)) == doctest::Approx(2.0 * std::sqrt(base.cov(0, 0))));
    CHECK(wide.cov(1, 1) == doctest::Approx(base.cov(1, 1)));
    CHECK(wide.cov(0, 1) == doctest::Approx(0.25 * std::sqrt(wide.cov(0, 0) * wide.cov(1, 1))));
}

TEST_CASE("simulation is reproducible and matches the target moments") {
    const FittedModel& m = model();
    const ParamDraw d = point_draw(m);
    const CellSpec cell{"EH", "nasal", {}};
    const Sample2D a = simulate_cell(m, cell, ScopeSpec::average(), 100000, d, 5);
    const Sample2D b = simulate_cell(m, cell, ScopeSpec::average(), 100000, d, 5);
    CHECK(a.points == b.points);
    CHECK(a.scope == "average");
    const Gaussian2D g = predictive_mean_cov(m, cell, ScopeSpec::average(), d);
    const Eigen::Matrix2d c = a.covariance();
    const double n = 100000;
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) {
            const double se = std::sqrt((g.cov(i, i) * g.cov(j, j) + g.cov(i, j) * g.cov(i, j)) / n);
            CHECK(std::abs(c(i, j) - g.cov(i, j)) < 3 * se);
        }
    for (int i = 0; i < 2; ++i) CHECK(std::abs(a.mean()[i] - g.mean[i]) < 3 * std::sqrt(g.cov(i, i) / n));
    CHECK_THROWS_AS(simulate_cell(m, cell, ScopeSpec::average(), 1, d, 5), DegenerateSample);
}

TEST_CASE("zero covariance collapses onto the mean") {
    Gaussian2D g;
    g.mean << 0.3, -0.7;
    g.cov.setZero();
    const Eigen::MatrixX2d pts = sample_gaussian(g, 50, 3);
    for (Eigen::Index i = 0; i < pts.rows(); ++i) CHECK(pts.row(i) == g.mean.transpose());
}

TEST_CASE("univariate pair simulates independent coordinates") {
    const auto truth = testsupport::small_truth();
    const FittedModel f1 = testsupport::small_fit(truth, 12, Response::univariate_f1);
    const FittedModel f2 = testsupport::small_fit(truth, 12, Response::univariate_f2);
    const FittedModel pair = combine_univariate(f1, f2);
    const Sample2D s = simulate_cell(pair, {"IH", "oral", {}}, ScopeSpec::average(), 100000, point_draw(pair), 8);
    const Eigen::Matrix2d c = s.covariance();
    CHECK(std::abs(c(0, 1) / std::sqrt(c(0, 0) * c(1, 1))) < 0.02);
}

TEST_CASE("vowel means average to intercept plus context effect") {
    const FittedModel& m = model();
    const ParamDraw d = point_draw(m);
    for (const char* ctx : {"nasal", "oral"}) {
        const double c = std::string(ctx) == "nasal" ? 0.5 : -0.5;
        const Gaussian2D ih = predictive_mean_cov(m, {"IH", ctx, {}}, ScopeSpec::average(), d);
        const Gaussian2D eh = predictive_mean_cov(m, {"EH", ctx, {}}, ScopeSpec::average(), d);
        for (int f = 0; f < 2; ++f)
            CHECK(std::abs(ih.mean[f] + eh.mean[f] - 2 * (m.beta(0, f) + c * m.beta(2, f))) < 1e-10);
    }
}

TEST_CASE("samples export as csv") {
    Sample2D s;
    s.points = Eigen::MatrixX2d::Zero(2, 2);
    s.points(1, 0) = 0.5;
    s.vowel = "IH";
    s.context = "oral";
    s.scope = "average";
    s.rep = 3;
    std::ostringstream out;
    write_samples_csv(out, {s});
    CHECK(out.str().rfind("f1,f2,vowel,context,scope,rep\n", 0) == 0);
    CHECK(out.str().find("0.5") != std::string::npos);
}
