#include "optimizer.hpp"

#include <cmath>
#include <limits>

#include "mmo/error.hpp"

namespace mmo::detail {
namespace {

std::vector<bool> active_set(const Eigen::VectorXd& x, const Eigen::VectorXd& g,
                             const Eigen::VectorXd& lower) {
    std::vector<bool> a(static_cast<std::size_t>(x.size()));
    for (Eigen::Index k = 0; k < x.size(); ++k) a[static_cast<std::size_t>(k)] = x[k] <= lower[k] && g[k] > 0.0;
    return a;
}

double projected_norm(const Eigen::VectorXd& x, const Eigen::VectorXd& g, const std::vector<bool>& active,
                      const std::vector<bool>& log_scaled) {
    double s = 0.0;
    for (Eigen::Index k = 0; k < g.size(); ++k) {
        const auto uk = static_cast<std::size_t>(k);
        if (active[uk]) continue;
        const double gk = log_scaled[uk] ? g[k] * x[k] : g[k];
        s += gk * gk;
    }
    return std::sqrt(s);
}

}  // namespace

MinimizeResult minimize_bounded(const Objective& objective, Eigen::VectorXd x0,
                                const Eigen::VectorXd& lower, const std::vector<bool>& log_scaled,
                                double tolerance, int max_iterations) {
    const Eigen::Index n = x0.size();
    MinimizeResult res;
    res.x = x0.cwiseMax(lower);
    if (!objective(res.x, res.f, res.gradient)) throw SingularSystem("objective undefined at the start point");

    Eigen::MatrixXd B = Eigen::MatrixXd::Identity(n, n);
    bool fresh = true;  // B is still the identity
    for (res.iterations = 0; res.iterations < max_iterations; ++res.iterations) {
        res.active = active_set(res.x, res.gradient, lower);
        res.projected_gradient_norm = projected_norm(res.x, res.gradient, res.active, log_scaled);
        if (res.projected_gradient_norm < tolerance) {
            res.converged = true;
            return res;
        }
        std::vector<Eigen::Index> free;
        for (Eigen::Index k = 0; k < n; ++k) {
            if (!res.active[static_cast<std::size_t>(k)]) free.push_back(k);
        }
        const auto nf = static_cast<Eigen::Index>(free.size());
        Eigen::MatrixXd Bf(nf, nf);
        Eigen::VectorXd gf(nf);
        for (Eigen::Index a = 0; a < nf; ++a) {
            gf[a] = res.gradient[free[static_cast<std::size_t>(a)]];
            for (Eigen::Index b = 0; b < nf; ++b) Bf(a, b) = B(free[static_cast<std::size_t>(a)], free[static_cast<std::size_t>(b)]);
        }
        Eigen::LLT<Eigen::MatrixXd> llt(Bf);
        Eigen::VectorXd df;
        if (llt.info() == Eigen::Success) df = -llt.solve(gf);
        if (df.size() == 0 || !df.allFinite() || df.dot(gf) >= 0.0) {
            B.setIdentity();
            fresh = true;
            df = -gf;
        }
        Eigen::VectorXd d = Eigen::VectorXd::Zero(n);
        for (Eigen::Index a = 0; a < nf; ++a) d[free[static_cast<std::size_t>(a)]] = df[a];

        // The first step from an identity Hessian can be far too long.
        double alpha = fresh ? std::min(1.0, 1.0 / std::max(1.0, d.norm())) : 1.0;
        const double slack = 4.0 * std::numeric_limits<double>::epsilon() * std::abs(res.f);
        const double noise = 1e3 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(res.f));

        bool accepted = false;
        Eigen::VectorXd x_new, g_new;
        double f_new = 0.0;
        for (int ls = 0; ls < 60; ++ls) {
            x_new = (res.x + alpha * d).cwiseMax(lower);
            // Sufficient decrease measured along the projected step.
            const double decrease = res.gradient.dot(x_new - res.x);
            if (objective(x_new, f_new, g_new) && std::isfinite(f_new)) {
                if (f_new <= res.f + 1e-4 * std::min(decrease, 0.0) + slack) {
                    accepted = true;
                    break;
                }
                // Near the optimum f changes by less than its rounding noise;
                // accept then if the projected gradient shrinks.
                if (f_new <= res.f + noise &&
                    projected_norm(x_new, g_new, active_set(x_new, g_new, lower), log_scaled) <
                        res.projected_gradient_norm) {
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if (!accepted) {
            if (fresh) break;  // no descent even along the gradient
            B.setIdentity();
            fresh = true;
            continue;
        }
        const Eigen::VectorXd s = x_new - res.x;
        const Eigen::VectorXd y = g_new - res.gradient;
        res.x = x_new;
        res.f = f_new;
        res.gradient = g_new;
        const double sy = s.dot(y);
        if (sy > 1e-12 * s.norm() * y.norm() && sy > 0.0) {
            if (fresh) {
                B *= y.squaredNorm() / sy;
                fresh = false;
            }
            const Eigen::VectorXd Bs = B * s;
            B += (y * y.transpose()) / sy - (Bs * Bs.transpose()) / s.dot(Bs);
        }
        if (s.lpNorm<Eigen::Infinity>() == 0.0) break;
    }
    res.active = active_set(res.x, res.gradient, lower);
    res.projected_gradient_norm = projected_norm(res.x, res.gradient, res.active, log_scaled);
    res.converged = res.projected_gradient_norm < tolerance;
    return res;
}

}  // namespace mmo::detail
