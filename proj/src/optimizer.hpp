#pragma once

// Quasi-Newton minimizer with simple lower bounds. A parameter sitting on its
// bound with a positive gradient is held fixed for the step; the remaining
// ones take a BFGS step scaled back into the feasible box.

#include <functional>
#include <vector>

#include <Eigen/Dense>

namespace mmo::detail {

struct MinimizeResult {
    Eigen::VectorXd x;
    double f = 0.0;
    Eigen::VectorXd gradient;
    double projected_gradient_norm = 0.0;
    int iterations = 0;
    bool converged = false;
    std::vector<bool> active;
};

// Returns false when the objective cannot be evaluated at x.
using Objective = std::function<bool(const Eigen::VectorXd& x, double& f, Eigen::VectorXd& g)>;

// Convergence is judged on g_k * x_k for coordinates flagged in `log_scaled`
// (the gradient with respect to log x_k) and on g_k elsewhere.
MinimizeResult minimize_bounded(const Objective& objective, Eigen::VectorXd x0,
                                const Eigen::VectorXd& lower, const std::vector<bool>& log_scaled,
                                double tolerance, int max_iterations);

}  // namespace mmo::detail
