#include "mmo/mixed_model.hpp"

#include <cmath>

#include "lmm_problem.hpp"
#include "mmo/error.hpp"
#include "mmo/rng.hpp"
#include "optimizer.hpp"

namespace mmo {

std::string to_string(FitMode m) {
    switch (m) {
        case FitMode::multivariate: return "multivariate";
        case FitMode::univariate_f1: return "univariate_f1";
        case FitMode::univariate_f2: return "univariate_f2";
        case FitMode::univariate_pair: return "univariate_pair";
    }
    return "?";
}

FitMode parse_fit_mode(const std::string& text) {
    if (text == "multivariate") return FitMode::multivariate;
    if (text == "univariate_f1") return FitMode::univariate_f1;
    if (text == "univariate_f2") return FitMode::univariate_f2;
    if (text == "univariate_pair") return FitMode::univariate_pair;
    throw ConfigError("unknown fit mode '" + text + "'");
}

Eigen::MatrixXd ResidualParams::cov_at(const Eigen::VectorXd& variance_row) const {
    if (!log_linear) return Sigma;
    const Eigen::Index D = gamma.cols();
    Eigen::VectorXd sd(D);
    for (Eigen::Index d = 0; d < D; ++d) sd[d] = std::exp(variance_row.dot(gamma.col(d)));
    Eigen::MatrixXd c = sd.asDiagonal();
    c = c * c;
    if (D == 2) c(0, 1) = c(1, 0) = rho * sd[0] * sd[1];
    return c;
}

const std::vector<std::string>& FittedModel::speakers() const {
    if (components.empty() || !components.front().design) throw Error("model carries no design");
    return components.front().design->speakers;
}

namespace {

// Non-owning handle for callers that pass a design by reference.
std::shared_ptr<const DesignMatrices> borrow(const DesignMatrices& d) {
    return std::shared_ptr<const DesignMatrices>(std::shared_ptr<const DesignMatrices>{}, &d);
}

struct Piece {
    Eigen::MatrixXd beta;
    Eigen::MatrixXd beta_se;
    CovarianceParams cov;
    RandomEffectEstimates modes;
};

Piece evaluate_piece(const detail::LmmProblem& problem, const Eigen::VectorXd& theta) {
    const detail::Evaluation ev = problem.evaluate(theta, false);
    const int D = problem.dims();
    const int p = problem.design().p();
    Piece out;
    out.beta.resize(p, D);
    out.beta_se.resize(p, D);
    const Eigen::MatrixXd inv = ev.xvx.llt().solve(Eigen::MatrixXd::Identity(ev.xvx.rows(), ev.xvx.cols()));
    for (int d = 0; d < D; ++d) {
        for (int j = 0; j < p; ++j) {
            out.beta(j, d) = ev.beta[d * p + j];
            out.beta_se(j, d) = std::sqrt(std::max(0.0, inv(d * p + j, d * p + j)));
        }
    }
    out.cov = problem.unpack(theta);
    out.modes = problem.modes(theta, ev.v_hat);
    return out;
}

Eigen::MatrixXd block_diag(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(a.rows() + b.rows(), a.cols() + b.cols());
    out.topLeftCorner(a.rows(), a.cols()) = a;
    out.bottomRightCorner(b.rows(), b.cols()) = b;
    return out;
}

Eigen::VectorXd concat(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    Eigen::VectorXd out(a.size() + b.size());
    out << a, b;
    return out;
}

CovarianceParams merge_cov(const CovarianceParams& a, const CovarianceParams& b) {
    CovarianceParams out;
    out.G_speaker = block_diag(a.G_speaker, b.G_speaker);
    out.G_word = block_diag(a.G_word, b.G_word);
    if (a.G_following && b.G_following) out.G_following = block_diag(*a.G_following, *b.G_following);
    out.residual.log_linear = a.residual.log_linear;
    if (a.residual.log_linear) {
        out.residual.gamma.resize(a.residual.gamma.rows(), 2);
        out.residual.gamma << a.residual.gamma, b.residual.gamma;
        out.residual.rho = 0.0;
    } else {
        out.residual.Sigma = block_diag(a.residual.Sigma, b.residual.Sigma);
    }
    return out;
}

RandomEffectEstimates merge_modes(const RandomEffectEstimates& a, const RandomEffectEstimates& b) {
    RandomEffectEstimates out;
    auto join = [](const auto& x, const auto& y, auto& target) {
        for (const auto& [k, v] : x) {
            auto it = y.find(k);
            if (it == y.end()) throw Error("univariate fits disagree on level '" + k + "'");
            target[k] = concat(v, it->second);
        }
    };
    join(a.speaker, b.speaker, out.speaker);
    join(a.word, b.word, out.word);
    join(a.following, b.following, out.following);
    return out;
}

Piece merge(const Piece& a, const Piece& b) {
    Piece out;
    out.beta.resize(a.beta.rows(), 2);
    out.beta << a.beta, b.beta;
    out.beta_se.resize(a.beta.rows(), 2);
    out.beta_se << a.beta_se, b.beta_se;
    out.cov = merge_cov(a.cov, b.cov);
    out.modes = merge_modes(a.modes, b.modes);
    return out;
}

FitMode mode_for(Response r) {
    switch (r) {
        case Response::multivariate: return FitMode::multivariate;
        case Response::univariate_f1: return FitMode::univariate_f1;
        case Response::univariate_f2: return FitMode::univariate_f2;
    }
    return FitMode::multivariate;
}

// The optimizer and the Laplace curvature work on Cholesky diagonals directly
// (bounded below by exp(floor)) instead of their logs: near-zero variances then
// reach the boundary in finitely many steps and keep finite curvature.
std::vector<bool> scaled_slots(const detail::LmmProblem& p) {
    std::vector<bool> m;
    for (const auto& s : p.slots()) m.push_back(s.kind == detail::SlotKind::log_diag);
    return m;
}

Eigen::VectorXd to_internal(const Eigen::VectorXd& theta, const std::vector<bool>& mask) {
    Eigen::VectorXd phi = theta;
    for (Eigen::Index k = 0; k < phi.size(); ++k) {
        if (mask[static_cast<std::size_t>(k)]) phi[k] = std::exp(theta[k]);
    }
    return phi;
}

Eigen::VectorXd to_theta(const Eigen::VectorXd& phi, const std::vector<bool>& mask) {
    Eigen::VectorXd theta = phi;
    for (Eigen::Index k = 0; k < phi.size(); ++k) {
        if (mask[static_cast<std::size_t>(k)]) theta[k] = std::log(phi[k]);
    }
    return theta;
}

Eigen::VectorXd internal_lower(const detail::LmmProblem& p, const std::vector<bool>& mask) {
    return to_internal(p.lower(), mask);
}

// Deviance gradient with respect to the internal coordinates.
Eigen::VectorXd internal_gradient(const detail::LmmProblem& p, const std::vector<bool>& mask,
                                  const Eigen::VectorXd& phi, double* deviance = nullptr) {
    const detail::Evaluation ev = p.evaluate(to_theta(phi, mask), true);
    Eigen::VectorXd g = ev.gradient;
    for (Eigen::Index k = 0; k < g.size(); ++k) {
        if (mask[static_cast<std::size_t>(k)]) g[k] /= phi[k];
    }
    if (deviance) *deviance = ev.deviance;
    return g;
}

void compute_laplace(FitComponent& c) {
    const detail::LmmProblem& problem = *c.problem;
    const std::vector<bool> mask = scaled_slots(problem);
    const Eigen::VectorXd phi = to_internal(c.theta_hat, mask);
    const Eigen::VectorXd lower = internal_lower(problem, mask);
    c.free_index.clear();
    for (int k = 0; k < problem.n_params(); ++k) {
        if (!c.active[static_cast<std::size_t>(k)]) c.free_index.push_back(k);
    }
    const auto nf = static_cast<Eigen::Index>(c.free_index.size());
    c.laplace_factor.resize(0, 0);
    c.degenerate_curvature = false;
    if (nf == 0) return;
    Eigen::MatrixXd H(nf, nf);
    try {
        const Eigen::VectorXd g0 = internal_gradient(problem, mask, phi);
        for (Eigen::Index a = 0; a < nf; ++a) {
            const int k = c.free_index[static_cast<std::size_t>(a)];
            const double h = 1e-4 * std::max(1.0, std::abs(phi[k]));
            Eigen::VectorXd tp = phi;
            tp[k] += h;
            const Eigen::VectorXd gp = internal_gradient(problem, mask, tp);
            Eigen::VectorXd col;
            if (phi[k] - h >= lower[k]) {
                Eigen::VectorXd tm = phi;
                tm[k] -= h;
                col = (gp - internal_gradient(problem, mask, tm)) / (2.0 * h);
            } else {
                col = (gp - g0) / h;  // one-sided next to the bound
            }
            for (Eigen::Index b = 0; b < nf; ++b) H(b, a) = col[c.free_index[static_cast<std::size_t>(b)]];
        }
    } catch (const SingularSystem&) {
        c.degenerate_curvature = true;
        return;
    }
    const Eigen::MatrixXd info = 0.25 * (H + H.transpose());  // (d2 dev / 2), symmetrized
    Eigen::LLT<Eigen::MatrixXd> llt(info);
    if (!info.allFinite() || llt.info() != Eigen::Success) {
        c.degenerate_curvature = true;
        return;
    }
    c.laplace_factor = llt.matrixL();
}

FitComponent fit_component(std::shared_ptr<const DesignMatrices> design, const FitConfig& config) {
    FitComponent c;
    c.response = design->spec.response;
    c.design = design;
    auto problem = std::make_shared<const detail::LmmProblem>(design, config);
    c.problem = problem;
    const std::vector<bool> mask = scaled_slots(*problem);
    const detail::Objective objective = [&](const Eigen::VectorXd& x, double& f, Eigen::VectorXd& g) {
        try {
            g = internal_gradient(*problem, mask, x, &f);
            return std::isfinite(f) && g.allFinite();
        } catch (const SingularSystem&) {
            return false;
        }
    };
    const detail::MinimizeResult r =
        detail::minimize_bounded(objective, to_internal(problem->start(), mask), internal_lower(*problem, mask),
                                 mask, config.gradient_tolerance, config.max_iterations);
    c.theta_hat = to_theta(r.x, mask);
    c.active = r.active;
    c.deviance = r.f;
    c.gradient_norm = r.projected_gradient_norm;
    c.iterations = r.iterations;
    c.converged = r.converged;
    if (config.compute_laplace) {
        compute_laplace(c);
    } else {
        c.degenerate_curvature = true;
    }
    return c;
}

// Single-column view of a bivariate design.
std::shared_ptr<const DesignMatrices> slice_response(const DesignMatrices& d, int column) {
    auto out = std::make_shared<DesignMatrices>(d);
    out->Y = d.Y.col(column);
    out->spec.response = column == 0 ? Response::univariate_f1 : Response::univariate_f2;
    return out;
}

}  // namespace

void refresh_estimates(FittedModel& model) {
    if (model.components.empty()) throw Error("model has no fitted components");
    std::vector<Piece> pieces;
    model.converged = true;
    model.loglik = 0.0;
    for (auto& c : model.components) {
        if (!c.problem) c.problem = std::make_shared<const detail::LmmProblem>(c.design, model.config);
        pieces.push_back(evaluate_piece(*c.problem, c.theta_hat));
        model.converged = model.converged && c.converged;
        model.loglik += -0.5 * c.deviance;
    }
    const Piece all = pieces.size() == 2 ? merge(pieces[0], pieces[1]) : pieces[0];
    model.beta = all.beta;
    model.beta_se = all.beta_se;
    model.cov = all.cov;
    model.modes = all.modes;
}

FittedModel fit(std::shared_ptr<const DesignMatrices> design, const FitConfig& config) {
    if (!design) throw Error("fit needs a design");
    if (design->n() <= design->p()) throw Error("need more tokens than fixed effects");
    FittedModel m;
    m.spec = design->spec;
    m.config = config;
    m.mode = mode_for(design->spec.response);
    m.components.push_back(fit_component(std::move(design), config));
    refresh_estimates(m);
    return m;
}

FittedModel fit(const DesignMatrices& design, const FitConfig& config) {
    return fit(std::make_shared<const DesignMatrices>(design), config);
}

FittedModel combine_univariate(const FittedModel& f1, const FittedModel& f2) {
    if (f1.mode != FitMode::univariate_f1 || f2.mode != FitMode::univariate_f2) {
        throw Error("combine_univariate needs an F1 fit and an F2 fit");
    }
    if (f1.spec.structure != f2.spec.structure) throw Error("univariate fits use different structures");
    FittedModel m;
    m.spec = f1.spec;
    m.spec.response = Response::multivariate;
    m.config = f1.config;
    m.mode = FitMode::univariate_pair;
    m.components = {f1.components.front(), f2.components.front()};
    refresh_estimates(m);
    return m;
}

ThetaLayout theta_layout(const DesignMatrices& design, const FitConfig& config) {
    const detail::LmmProblem problem(borrow(design), config);
    ThetaLayout out;
    for (const auto& s : problem.slots()) out.names.push_back(s.name);
    out.lower = problem.lower();
    out.start = problem.start();
    return out;
}

Eigen::VectorXd encode_theta(const DesignMatrices& design, const CovarianceParams& cov,
                             const FitConfig& config) {
    return detail::LmmProblem(borrow(design), config).pack(cov);
}

CovarianceParams decode_theta(const DesignMatrices& design, const Eigen::VectorXd& theta,
                              const FitConfig& config) {
    return detail::LmmProblem(borrow(design), config).unpack(theta);
}

double profiled_deviance(const Eigen::VectorXd& theta, const DesignMatrices& design,
                         const FitConfig& config) {
    return detail::LmmProblem(borrow(design), config).evaluate(theta, false).deviance;
}

Eigen::VectorXd profiled_deviance_gradient(const Eigen::VectorXd& theta, const DesignMatrices& design,
                                           const FitConfig& config) {
    return detail::LmmProblem(borrow(design), config).evaluate(theta, true).gradient;
}

namespace {

Piece draw_piece(const FitComponent& c, Rng& rng, bool& point_mass) {
    const detail::LmmProblem& problem = *c.problem;
    Eigen::VectorXd theta = c.theta_hat;
    point_mass = c.degenerate_curvature;
    if (!c.degenerate_curvature && c.laplace_factor.size() > 0) {
        const std::vector<bool> mask = scaled_slots(problem);
        Eigen::VectorXd phi = to_internal(c.theta_hat, mask);
        const Eigen::VectorXd lower = internal_lower(problem, mask);
        const Eigen::VectorXd z = standard_normal(rng, c.laplace_factor.rows());
        const Eigen::VectorXd step = c.laplace_factor.transpose().triangularView<Eigen::Upper>().solve(z);
        for (std::size_t a = 0; a < c.free_index.size(); ++a) {
            const int k = c.free_index[a];
            phi[k] = std::max(lower[k], phi[k] + step[static_cast<Eigen::Index>(a)]);
        }
        theta = to_theta(phi, mask);
    }
    const detail::Evaluation ev = problem.evaluate(theta, false);
    Eigen::LLT<Eigen::MatrixXd> llt(ev.xvx);
    if (llt.info() != Eigen::Success) throw SingularSystem("fixed-effect precision is singular at a draw");
    const Eigen::VectorXd z = standard_normal(rng, ev.xvx.rows());
    const Eigen::VectorXd b = ev.beta + llt.matrixU().solve(z);
    const int D = problem.dims();
    const int p = problem.design().p();
    Piece out;
    out.beta.resize(p, D);
    for (int d = 0; d < D; ++d) {
        for (int j = 0; j < p; ++j) out.beta(j, d) = b[d * p + j];
    }
    out.cov = problem.unpack(theta);
    return out;
}

}  // namespace

ParamDraw draw_parameter(const FittedModel& model, std::uint64_t seed) {
    if (model.components.empty()) throw Error("model has no fitted components");
    std::vector<Piece> pieces;
    bool any_point_mass = false;
    for (std::size_t k = 0; k < model.components.size(); ++k) {
        const FitComponent& c = model.components[k];
        if (!c.problem) throw Error("model components lack their problem; call refresh_estimates");
        Rng rng(model.components.size() == 1 ? seed : derive_seed(seed, k));
        bool pm = false;
        pieces.push_back(draw_piece(c, rng, pm));
        any_point_mass = any_point_mass || pm;
    }
    Piece all = pieces.size() == 2 ? Piece{} : pieces[0];
    if (pieces.size() == 2) {
        all.beta.resize(pieces[0].beta.rows(), 2);
        all.beta << pieces[0].beta, pieces[1].beta;
        all.cov = merge_cov(pieces[0].cov, pieces[1].cov);
    }
    return {all.beta, all.cov, any_point_mass};
}

std::vector<ParamDraw> draw_parameters(const FittedModel& model, std::size_t n_draws, std::uint64_t seed) {
    std::vector<ParamDraw> out;
    out.reserve(n_draws);
    for (std::size_t i = 0; i < n_draws; ++i) out.push_back(draw_parameter(model, derive_seed(seed, i)));
    return out;
}

ParamDraw point_draw(const FittedModel& model) { return {model.beta, model.cov, false}; }

RandomEffectEstimates conditional_modes(const FittedModel& model, const DesignMatrices& design) {
    std::vector<Piece> pieces;
    for (const auto& c : model.components) {
        std::shared_ptr<const DesignMatrices> d = borrow(design);
        if (design.dims() == 2 && c.design->dims() == 1) {
            d = slice_response(design, c.response == Response::univariate_f2 ? 1 : 0);
        }
        const detail::LmmProblem problem(d, model.config);
        if (problem.n_params() != c.theta_hat.size()) throw Error("design does not match the fitted model");
        pieces.push_back(evaluate_piece(problem, c.theta_hat));
    }
    return pieces.size() == 2 ? merge_modes(pieces[0].modes, pieces[1].modes) : pieces[0].modes;
}

}  // namespace mmo
