#include "mmo/kde.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "mmo/error.hpp"

namespace mmo::kde {

namespace {

constexpr double kCutoff = 8.0;

Eigen::Vector2d centered_ss(const Eigen::MatrixX2d& s) {
    const Eigen::RowVector2d m = s.colwise().mean();
    return (s.rowwise() - m).colwise().squaredNorm().transpose();
}

Eigen::VectorXd axis_nodes(double lo, double hi, int resolution) {
    const double step = (hi - lo) / resolution;
    Eigen::VectorXd v(resolution);
    for (int i = 0; i < resolution; ++i) v[i] = lo + (i + 0.5) * step;
    return v;
}

}  // namespace

Bandwidth pooled_bandwidth(const Eigen::MatrixX2d& p, const Eigen::MatrixX2d& q) {
    if (p.rows() < 2 || q.rows() < 2) throw DegenerateSample("kernel density needs at least two points per sample");
    const Eigen::Vector2d sp = centered_ss(p);
    const Eigen::Vector2d sq = centered_ss(q);
    for (int d = 0; d < 2; ++d) {
        if (!(sp[d] > 0.0) || !(sq[d] > 0.0)) throw DegenerateSample("sample has zero variance on an axis");
    }
    const double n = static_cast<double>(p.rows() + q.rows());
    const Eigen::Vector2d sd = ((sp + sq) / (n - 2.0)).cwiseSqrt();
    const double factor = std::pow(n, -1.0 / 6.0);
    return {sd[0] * factor, sd[1] * factor};
}

Grid make_grid(const Eigen::MatrixX2d& p, const Eigen::MatrixX2d& q, const Bandwidth& bw, int resolution,
               double padding) {
    if (resolution < 16) throw ConfigError("grid resolution must be at least 16");
    if (!(padding > 0.0)) throw ConfigError("grid padding must be positive");
    const Eigen::RowVector2d lo = p.colwise().minCoeff().cwiseMin(q.colwise().minCoeff());
    const Eigen::RowVector2d hi = p.colwise().maxCoeff().cwiseMax(q.colwise().maxCoeff());
    if (!lo.allFinite() || !hi.allFinite()) throw DegenerateSample("sample has non-finite points");
    return {axis_nodes(lo[0] - padding * bw.h1, hi[0] + padding * bw.h1, resolution),
            axis_nodes(lo[1] - padding * bw.h2, hi[1] + padding * bw.h2, resolution)};
}

Eigen::MatrixXd density_reference(const Eigen::MatrixX2d& pts, const Grid& grid, const Bandwidth& bw) {
    Eigen::MatrixXd out(grid.x.size(), grid.y.size());
    for (Eigen::Index i = 0; i < grid.x.size(); ++i) {
        for (Eigen::Index j = 0; j < grid.y.size(); ++j) {
            double acc = 0.0;
            for (Eigen::Index n = 0; n < pts.rows(); ++n) {
                const double u = (grid.x[i] - pts(n, 0)) / bw.h1;
                const double v = (grid.y[j] - pts(n, 1)) / bw.h2;
                acc += std::exp(-0.5 * (u * u + v * v));
            }
            out(i, j) = acc;
        }
    }
    return out;
}

namespace {

// Kernel weights of one coordinate at every node of an evenly spaced axis,
// zero beyond the cutoff. Successive weights follow a two-multiply
// recurrence outwards from the nearest node, so each point costs three exps.
void axis_weights(double x, const Eigen::VectorXd& nodes, double h, double* out, Eigen::Index stride) {
    const Eigen::Index g = nodes.size();
    const double step = g > 1 ? (nodes[g - 1] - nodes[0]) / static_cast<double>(g - 1) : 1.0;
    const double inv_h2 = 1.0 / (h * h);
    auto ic = static_cast<Eigen::Index>(std::llround((x - nodes[0]) / step));
    ic = std::clamp<Eigen::Index>(ic, 0, g - 1);
    const auto w = static_cast<Eigen::Index>(std::ceil(kCutoff * h / step));
    const Eigen::Index lo = std::max<Eigen::Index>(0, ic - w);
    const Eigen::Index hi = std::min<Eigen::Index>(g - 1, ic + w);
    const double d = nodes[ic] - x;
    const double kc = std::exp(-0.5 * d * d * inv_h2);
    const double shrink = std::exp(-step * step * inv_h2);
    out[ic * stride] = kc;
    double k = kc;
    double r = std::exp(-(d * step + 0.5 * step * step) * inv_h2);
    for (Eigen::Index i = ic; i < hi; ++i) {
        k *= r;
        r *= shrink;
        out[(i + 1) * stride] = k;
    }
    k = kc;
    r = std::exp((d * step - 0.5 * step * step) * inv_h2);
    for (Eigen::Index i = ic; i > lo; --i) {
        k *= r;
        r *= shrink;
        out[(i - 1) * stride] = k;
    }
}

constexpr Eigen::Index kChunk = 2048;

}  // namespace

Eigen::MatrixXd density(const Eigen::MatrixX2d& pts, const Grid& grid, const Bandwidth& bw) {
    // The product kernel is separable: density = Kx' Ky with Kx (points x
    // x-nodes) and Ky (points x y-nodes). Chunks of points are summed in a
    // fixed order so the result does not depend on the thread count.
    const Eigen::Index n = pts.rows();
    const Eigen::Index gx = grid.x.size();
    const Eigen::Index gy = grid.y.size();
    const Eigen::Index chunks = std::max<Eigen::Index>(1, (n + kChunk - 1) / kChunk);
    std::vector<Eigen::MatrixXd> partial(static_cast<std::size_t>(chunks));
#pragma omp parallel for schedule(static)
    for (Eigen::Index c = 0; c < chunks; ++c) {
        const Eigen::Index first = c * kChunk;
        const Eigen::Index rows = std::min(kChunk, n - first);
        // one column per point keeps the writes contiguous
        Eigen::MatrixXd kx = Eigen::MatrixXd::Zero(gx, rows);
        Eigen::MatrixXd ky = Eigen::MatrixXd::Zero(gy, rows);
        for (Eigen::Index r = 0; r < rows; ++r) {
            axis_weights(pts(first + r, 0), grid.x, bw.h1, kx.col(r).data(), 1);
            axis_weights(pts(first + r, 1), grid.y, bw.h2, ky.col(r).data(), 1);
        }
        partial[static_cast<std::size_t>(c)].noalias() = kx * ky.transpose();
    }
    Eigen::MatrixXd out = std::move(partial[0]);
    for (std::size_t c = 1; c < partial.size(); ++c) out += partial[c];
    return out;
}

double affinity(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    const double ta = a.sum();
    const double tb = b.sum();
    if (!(ta > 0.0) || !(tb > 0.0)) throw DegenerateSample("density vanished on the grid");
    double acc = 0.0;
    for (Eigen::Index k = 0; k < a.size(); ++k) acc += std::sqrt(a.data()[k] * b.data()[k]);
    return std::min(1.0, acc / std::sqrt(ta * tb));
}

}  // namespace mmo::kde
