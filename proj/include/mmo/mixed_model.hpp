#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mmo/design.hpp"

namespace mmo {

struct FitConfig {
    bool block_diagonal_random = false;  // zero every cross-formant random-effect covariance
    bool independent_residual = false;   // zero residual correlation
    bool variance_intercept_only = false;  // expanded: log-sd model with intercept only
    double gradient_tolerance = 1e-6;
    int max_iterations = 500;
    bool compute_laplace = true;
    double log_sd_floor = -10.0;  // lower bound for every log standard deviation
};

/// Residual covariance: either one D x D matrix, or per-token
/// sd_d = exp(v . gamma_d) with a shared correlation rho.
struct ResidualParams {
    bool log_linear = false;
    Eigen::MatrixXd Sigma;  // constant model
    Eigen::MatrixXd gamma;  // log-linear model, m x D
    double rho = 0.0;

    Eigen::MatrixXd cov_at(const Eigen::VectorXd& variance_row) const;
};

struct CovarianceParams {
    Eigen::MatrixXd G_speaker;  // (D q) x (D q), stacked [F1 slopes; F2 slopes]
    Eigen::MatrixXd G_word;     // D x D
    std::optional<Eigen::MatrixXd> G_following;
    ResidualParams residual;
};

struct RandomEffectEstimates {
    std::map<std::string, Eigen::VectorXd> speaker;  // length D q
    std::map<std::string, Eigen::VectorXd> word;     // length D
    std::map<std::string, Eigen::VectorXd> following;
};

struct ParamDraw {
    Eigen::MatrixXd beta;  // p x D
    CovarianceParams cov;
    bool point_mass = false;  // curvature was degenerate; theta held at its estimate
};

enum class FitMode { multivariate, univariate_f1, univariate_f2, univariate_pair };
std::string to_string(FitMode m);
FitMode parse_fit_mode(const std::string& text);

namespace detail {
class LmmProblem;
}

/// One marginal-likelihood optimization. A univariate pair carries two.
struct FitComponent {
    Response response = Response::multivariate;
    std::shared_ptr<const DesignMatrices> design;
    std::shared_ptr<const detail::LmmProblem> problem;
    Eigen::VectorXd theta_hat;
    std::vector<bool> active;        // pinned at the lower bound
    std::vector<int> free_index;     // theta entries covered by the Laplace factor
    // lower L with L L^T = curvature / 2 over free_index, in optimizer
    // coordinates: Cholesky diagonals unlogged, everything else as in theta
    Eigen::MatrixXd laplace_factor;
    bool degenerate_curvature = false;
    double deviance = 0.0;
    double gradient_norm = 0.0;
    int iterations = 0;
    bool converged = false;
};

struct FittedModel {
    ModelSpec spec;
    FitConfig config;
    FitMode mode = FitMode::multivariate;
    Eigen::MatrixXd beta;     // p x D
    Eigen::MatrixXd beta_se;  // p x D, from (X' V^-1 X)^-1 at theta_hat
    CovarianceParams cov;
    RandomEffectEstimates modes;
    double loglik = 0.0;
    bool converged = false;
    std::vector<FitComponent> components;

    int dims() const { return static_cast<int>(beta.cols()); }
    int p() const { return static_cast<int>(beta.rows()); }
    const std::vector<std::string>& speakers() const;
};

struct ThetaLayout {
    std::vector<std::string> names;
    Eigen::VectorXd lower;  // -inf where unbounded
    Eigen::VectorXd start;
};

ThetaLayout theta_layout(const DesignMatrices& design, const FitConfig& config = {});
Eigen::VectorXd encode_theta(const DesignMatrices& design, const CovarianceParams& cov,
                             const FitConfig& config = {});
CovarianceParams decode_theta(const DesignMatrices& design, const Eigen::VectorXd& theta,
                              const FitConfig& config = {});

/// -2 log-likelihood with fixed effects profiled out by generalized least
/// squares. theta holds log-Cholesky factors (log diagonal) of every
/// covariance and arctanh of the residual correlation.
double profiled_deviance(const Eigen::VectorXd& theta, const DesignMatrices& design,
                         const FitConfig& config = {});
Eigen::VectorXd profiled_deviance_gradient(const Eigen::VectorXd& theta,
                                           const DesignMatrices& design,
                                           const FitConfig& config = {});

FittedModel fit(std::shared_ptr<const DesignMatrices> design, const FitConfig& config = {});
FittedModel fit(const DesignMatrices& design, const FitConfig& config = {});

/// Assembles two single-formant fits into a two-dimensional model whose
/// cross-formant covariances are exactly zero.
FittedModel combine_univariate(const FittedModel& f1, const FittedModel& f2);

/// Laplace draws: theta ~ N(theta_hat, (curvature/2)^-1), then beta from its
/// exact conditional Gaussian given that theta. Deterministic in `seed`.
std::vector<ParamDraw> draw_parameters(const FittedModel& model, std::size_t n_draws,
                                       std::uint64_t seed);
ParamDraw draw_parameter(const FittedModel& model, std::uint64_t seed);
ParamDraw point_draw(const FittedModel& model);

/// Joint conditional modes of every random effect at theta_hat.
RandomEffectEstimates conditional_modes(const FittedModel& model, const DesignMatrices& design);

/// Rebuilds beta, covariances and modes from component theta_hat values.
/// Used by fit and by deserialization.
void refresh_estimates(FittedModel& model);

}  // namespace mmo
