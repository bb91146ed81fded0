#pragma once

#include <Eigen/Dense>

namespace mmo::kde {

struct Bandwidth {
    double h1 = 0.0;
    double h2 = 0.0;
};

/// Cell-centre nodes of a regular grid, one vector per axis.
struct Grid {
    Eigen::VectorXd x;
    Eigen::VectorXd y;
};

/// Per-axis h = pooled within-sample sd * (n_p + n_q)^(-1/6). Throws
/// DegenerateSample when either sample is constant on an axis.
Bandwidth pooled_bandwidth(const Eigen::MatrixX2d& p, const Eigen::MatrixX2d& q);

/// `resolution` cells per axis spanning the joint extent padded by
/// `padding` bandwidths on each side.
Grid make_grid(const Eigen::MatrixX2d& p, const Eigen::MatrixX2d& q, const Bandwidth& bw, int resolution,
               double padding);

/// Unnormalized product-Gaussian density at every node, rows along x.
/// Exact double loop over nodes and points; kept as the test oracle.
Eigen::MatrixXd density_reference(const Eigen::MatrixX2d& pts, const Grid& grid, const Bandwidth& bw);

/// Same quantity through the separable form Kx' Ky, parallel over chunks of
/// points. Kernels are cut at 8 bandwidths (relative weight below 1e-13) and
/// chunks are summed in a fixed order, so the result is independent of the
/// thread count.
Eigen::MatrixXd density(const Eigen::MatrixX2d& pts, const Grid& grid, const Bandwidth& bw);

/// sum sqrt(a_i b_i) / sqrt(sum a * sum b), capped at 1.
double affinity(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

}  // namespace mmo::kde
