#include <doctest.h>

#include <cmath>
#include <numbers>

#include "mmo/error.hpp"
#include "mmo/mixed_model.hpp"
#include "mmo/rng.hpp"
#include "test_support.hpp"

using namespace mmo;

namespace {

// Dense marginal covariance V of the stacked response (row i*D + d).
Eigen::MatrixXd dense_V(const DesignMatrices& d, const CovarianceParams& cov) {
    const int n = d.n(), D = d.dims(), q = static_cast<int>(d.Z_speaker.cols());
    const Eigen::Index N = static_cast<Eigen::Index>(n) * D;
    Eigen::MatrixXd V = Eigen::MatrixXd::Zero(N, N);
    for (int i = 0; i < n; ++i) {
        Eigen::VectorXd vrow = d.has_variance_model() ? Eigen::VectorXd(d.V.row(i).transpose()) : Eigen::VectorXd();
        V.block(i * D, i * D, D, D) += cov.residual.cov_at(vrow);
        for (int j = 0; j < n; ++j) {
            Eigen::MatrixXd zi = Eigen::MatrixXd::Zero(D, D * q), zj = Eigen::MatrixXd::Zero(D, D * q);
            for (int r = 0; r < D; ++r) {
                zi.block(r, r * q, 1, q) = d.Z_speaker.row(i);
                zj.block(r, r * q, 1, q) = d.Z_speaker.row(j);
            }
            if (d.speaker_index[i] == d.speaker_index[j]) V.block(i * D, j * D, D, D) += zi * cov.G_speaker * zj.transpose();
            if (d.word_index[i] == d.word_index[j]) V.block(i * D, j * D, D, D) += cov.G_word;
            if (d.has_following() && d.following_index[i] == d.following_index[j]) {
                V.block(i * D, j * D, D, D) += *cov.G_following;
            }
        }
    }
    return V;
}

double dense_deviance(const DesignMatrices& d, const CovarianceParams& cov, Eigen::VectorXd* beta_out = nullptr) {
    const int n = d.n(), D = d.dims(), p = d.p();
    const Eigen::MatrixXd V = dense_V(d, cov);
    Eigen::MatrixXd X = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n) * D, D * p);
    Eigen::VectorXd y(static_cast<Eigen::Index>(n) * D);
    for (int i = 0; i < n; ++i) {
        for (int r = 0; r < D; ++r) {
            X.block(i * D + r, r * p, 1, p) = d.X.row(i);
            y[i * D + r] = d.Y(i, r);
        }
    }
    Eigen::LLT<Eigen::MatrixXd> llt(V);
    const Eigen::MatrixXd VX = llt.solve(X);
    const Eigen::VectorXd beta = (X.transpose() * VX).ldlt().solve(VX.transpose() * y);
    const Eigen::VectorXd r = y - X * beta;
    if (beta_out) *beta_out = beta;
    const double logdet = 2.0 * Eigen::MatrixXd(llt.matrixL()).diagonal().array().log().sum();
    return static_cast<double>(n) * D * std::log(2 * std::numbers::pi) + logdet + r.dot(llt.solve(r));
}

Eigen::VectorXd perturbed_start(const DesignMatrices& d, const FitConfig& cfg, std::uint64_t seed) {
    ThetaLayout layout = theta_layout(d, cfg);
    Rng rng(seed);
    Normal nd;
    Eigen::VectorXd theta = layout.start;
    for (Eigen::Index k = 0; k < theta.size(); ++k) theta[k] += 0.3 * nd(rng);
    return theta;
}

}  // namespace

TEST_CASE("profiled deviance matches a dense marginal-likelihood computation") {
    for (auto s : {Structure::minimal, Structure::expanded}) {
        for (auto r : {Response::multivariate, Response::univariate_f2}) {
            auto d = testsupport::random_design(7, s, r, 4, 8, 12);
            FitConfig cfg;
            const Eigen::VectorXd theta = perturbed_start(*d, cfg, 11);
            const CovarianceParams cov = decode_theta(*d, theta, cfg);
            const double dense = dense_deviance(*d, cov);
            CHECK(profiled_deviance(theta, *d, cfg) == doctest::Approx(dense).epsilon(1e-10));
        }
    }
}

TEST_CASE("analytic gradient agrees with central differences") {
    for (auto s : {Structure::minimal, Structure::expanded}) {
        for (auto r : {Response::multivariate, Response::univariate_f1}) {
            auto d = testsupport::random_design(3, s, r, 5, 10, 16);
            FitConfig cfg;
            const Eigen::VectorXd theta = perturbed_start(*d, cfg, 5);
            const Eigen::VectorXd g = profiled_deviance_gradient(theta, *d, cfg);
            for (Eigen::Index k = 0; k < theta.size(); ++k) {
                const double h = 1e-5;
                Eigen::VectorXd tp = theta, tm = theta;
                tp[k] += h;
                tm[k] -= h;
                const double fd = (profiled_deviance(tp, *d, cfg) - profiled_deviance(tm, *d, cfg)) / (2 * h);
                CHECK(g[k] == doctest::Approx(fd).epsilon(1e-5).scale(1.0));
            }
        }
    }
}

TEST_CASE("encode and decode are inverse") {
    auto d = testsupport::random_design(9, Structure::expanded, Response::multivariate, 4, 8, 10);
    const Eigen::VectorXd theta = perturbed_start(*d, {}, 2);
    const Eigen::VectorXd back = encode_theta(*d, decode_theta(*d, theta));
    CHECK((back - theta).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("vanishing random variances approach the OLS Gaussian likelihood") {
    auto d = testsupport::random_design(21, Structure::minimal, Response::multivariate, 2, 4, 10);
    ThetaLayout layout = theta_layout(*d);
    Eigen::VectorXd theta = layout.start;
    for (std::size_t k = 0; k < layout.names.size(); ++k) {
        if (layout.names[k].rfind("residual", 0) == 0) continue;
        theta[static_cast<Eigen::Index>(k)] = layout.names[k].find("L[") != std::string::npos &&
                                                      std::isfinite(layout.lower[static_cast<Eigen::Index>(k)])
                                                  ? -10.0
                                                  : 0.0;
    }
    const CovarianceParams cov = decode_theta(*d, theta);
    // OLS per formant is GLS under a common residual covariance (SUR with identical regressors).
    const Eigen::MatrixXd B = (d->X.transpose() * d->X).ldlt().solve(d->X.transpose() * d->Y);
    const Eigen::MatrixXd R = d->Y - d->X * B;
    const Eigen::MatrixXd Sinv = cov.residual.Sigma.inverse();
    double ll = 0.0;
    for (int i = 0; i < d->n(); ++i) ll += R.row(i) * Sinv * R.row(i).transpose();
    ll += d->n() * (2 * std::log(2 * std::numbers::pi) + std::log(cov.residual.Sigma.determinant()));
    CHECK(profiled_deviance(theta, *d) == doctest::Approx(ll).epsilon(1e-6));
}

TEST_CASE("duplicating rows matches the dense oracle") {
    auto d = testsupport::random_design(4, Structure::minimal, Response::multivariate, 3, 6, 8);
    DesignMatrices dup = *d;
    const int n = d->n();
    auto stack = [](const Eigen::MatrixXd& a) {
        Eigen::MatrixXd o(a.rows() * 2, a.cols());
        o << a, a;
        return o;
    };
    dup.X = stack(d->X);
    dup.Y = stack(d->Y);
    dup.Z_speaker = stack(d->Z_speaker);
    for (int i = 0; i < n; ++i) {
        dup.speaker_index.push_back(d->speaker_index[i]);
        dup.word_index.push_back(d->word_index[i]);
    }
    const Eigen::VectorXd theta = perturbed_start(*d, {}, 8);
    CHECK(profiled_deviance(theta, dup) == doctest::Approx(dense_deviance(dup, decode_theta(dup, theta))).epsilon(1e-10));
}

TEST_CASE("fit converges and reports a small projected gradient") {
    auto d = testsupport::random_design(12, Structure::minimal, Response::multivariate, 10, 20, 40);
    FittedModel m = fit(d);
    CHECK(m.converged);
    CHECK(m.components[0].gradient_norm < 1e-5);
    CHECK_FALSE(m.components[0].degenerate_curvature);
    Eigen::VectorXd dense_beta;
    dense_deviance(*d, m.cov, &dense_beta);
    for (int dd = 0; dd < 2; ++dd) {
        for (int j = 0; j < 4; ++j) CHECK(m.beta(j, dd) == doctest::Approx(dense_beta[dd * 4 + j]).epsilon(1e-8));
    }
    for (auto& c : {m.cov.G_speaker, m.cov.G_word, m.cov.residual.Sigma}) {
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(c);
        CHECK(es.eigenvalues().minCoeff() >= -1e-10);
    }
}

TEST_CASE("noise-free data recover beta exactly with variances on the boundary") {
    auto base = testsupport::random_design(13, Structure::minimal, Response::multivariate, 4, 8, 12);
    DesignMatrices d = *base;
    Eigen::MatrixXd beta(4, 2);
    beta << 0.1, -0.2, 0.5, 0.3, -0.25, 0.1, 0.4, -0.6;
    d.Y = d.X * beta;
    FittedModel m = fit(d);
    CHECK((m.beta - beta).cwiseAbs().maxCoeff() < 1e-8);
    // Every log-sd heads for the floor. Off-diagonal Cholesky entries of a
    // column whose sd vanished are unidentified, so only the diagonals are checked.
    const ThetaLayout layout = theta_layout(d);
    for (std::size_t k = 0; k < layout.names.size(); ++k) {
        if (std::isfinite(layout.lower[static_cast<Eigen::Index>(k)])) {
            CHECK(m.components[0].theta_hat[static_cast<Eigen::Index>(k)] < -8.0);
        }
    }
    CHECK(m.cov.residual.Sigma.diagonal().maxCoeff() < 1e-4);
}

TEST_CASE("draws are deterministic and centred on beta") {
    auto d = testsupport::random_design(14, Structure::minimal, Response::multivariate, 8, 16, 30);
    FittedModel m = fit(d);
    auto a = draw_parameters(m, 5, 42);
    auto b = draw_parameters(m, 5, 42);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].beta == b[i].beta);
        CHECK(a[i].cov.G_speaker == b[i].cov.G_speaker);
    }
    const int n = 2000;
    auto draws = draw_parameters(m, n, 7);
    Eigen::MatrixXd mean = Eigen::MatrixXd::Zero(4, 2);
    for (const auto& x : draws) mean += x.beta / n;
    Eigen::MatrixXd sq = Eigen::MatrixXd::Zero(4, 2);
    for (const auto& x : draws) sq += (x.beta - mean).cwiseAbs2() / (n - 1);
    for (int j = 0; j < 4; ++j) {
        for (int k = 0; k < 2; ++k) CHECK(std::abs(mean(j, k) - m.beta(j, k)) < 3.5 * std::sqrt(sq(j, k) / n) + 1e-3 * m.beta_se(j, k));
    }
}

TEST_CASE("speaker intercept mode matches the scalar ridge formula") {
    // Intercept-only effects, one shared word pinned at the floor: each
    // speaker's mode is n g / (n g + s2) * (ybar_s - mu_hat).
    auto base = testsupport::random_design(15, Structure::minimal, Response::univariate_f1, 3, 4, 40);
    DesignMatrices d = *base;
    d.X = Eigen::MatrixXd::Ones(d.n(), 1);
    d.Z_speaker = Eigen::MatrixXd::Ones(d.n(), 1);
    d.fixed_names = {"intercept"};
    d.words = {"w"};
    std::fill(d.word_index.begin(), d.word_index.end(), 0);
    ThetaLayout layout = theta_layout(d);
    REQUIRE(layout.names.size() == 3);
    const double g = 0.3, s2 = 0.5;
    Eigen::VectorXd theta(3);
    theta << 0.5 * std::log(g), -10.0, 0.5 * std::log(s2);
    FittedModel m;
    m.spec = d.spec;
    m.mode = FitMode::univariate_f1;
    FitComponent c;
    c.response = Response::univariate_f1;
    c.design = std::make_shared<const DesignMatrices>(d);
    c.theta_hat = theta;
    c.active.assign(3, false);
    m.components.push_back(c);
    refresh_estimates(m);
    for (std::size_t s = 0; s < d.speakers.size(); ++s) {
        double sum = 0.0;
        int n = 0;
        for (int i = 0; i < d.n(); ++i) {
            if (d.speaker_index[static_cast<std::size_t>(i)] == static_cast<int>(s)) {
                sum += d.Y(i, 0);
                ++n;
            }
        }
        const double dev = sum / n - m.beta(0, 0);
        const double expected = n * g / (n * g + s2) * dev;
        const double mode = m.modes.speaker.at(d.speakers[s])[0];
        CHECK(mode == doctest::Approx(expected).epsilon(1e-6));
        CHECK(std::abs(mode) <= std::abs(dev));
    }
}

TEST_CASE("zero speaker covariance gives zero speaker modes") {
    auto d = testsupport::random_design(16, Structure::minimal, Response::multivariate, 5, 10, 20);
    FittedModel m = fit(d);
    CovarianceParams cov = m.cov;
    cov.G_speaker.setZero();
    m.components[0].theta_hat = encode_theta(*d, cov);
    refresh_estimates(m);
    for (const auto& [name, v] : m.modes.speaker) CHECK(v.cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("univariate pair equals the constrained multivariate fit") {
    // Data with no cross-formant correlation anywhere.
    auto base = testsupport::random_design(17, Structure::minimal, Response::multivariate, 10, 20, 40);
    FitConfig constrained;
    constrained.block_diagonal_random = true;
    constrained.independent_residual = true;
    FittedModel multi = fit(base, constrained);
    ModelSpec s1 = base->spec;
    auto d1 = std::make_shared<DesignMatrices>(*base);
    d1->Y = base->Y.col(0);
    d1->spec.response = Response::univariate_f1;
    auto d2 = std::make_shared<DesignMatrices>(*base);
    d2->Y = base->Y.col(1);
    d2->spec.response = Response::univariate_f2;
    FittedModel pair = combine_univariate(fit(d1), fit(d2));
    CHECK(pair.mode == FitMode::univariate_pair);
    CHECK((pair.beta - multi.beta).cwiseAbs().maxCoeff() < 1e-6);
    CHECK(pair.cov.G_speaker.topRightCorner(4, 4).cwiseAbs().maxCoeff() == 0.0);
    CHECK(pair.cov.residual.Sigma(0, 1) == 0.0);
}

TEST_CASE("intercept-only variance model reproduces the constant residual") {
    auto d = testsupport::random_design(18, Structure::expanded, Response::multivariate, 8, 16, 30);
    FitConfig cfg;
    cfg.variance_intercept_only = true;
    FittedModel a = fit(d, cfg);
    // Same data without the variance design.
    DesignMatrices flat = *d;
    flat.V.resize(flat.n(), 0);
    FittedModel b = fit(flat);
    const Eigen::MatrixXd sa = a.cov.residual.cov_at(Eigen::Vector4d(1, 0.5, 0.5, 0.25));
    CHECK((sa - b.cov.residual.Sigma).cwiseAbs().maxCoeff() < 1e-4);
}
