#pragma once

#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mmo/simulate.hpp"

namespace mmo {

struct Ellipse {
    Eigen::Vector2d center = Eigen::Vector2d::Zero();
    double semi_major = 0.0;
    double semi_minor = 0.0;
    double angle = 0.0;  // radians from the F1 axis to the major axis
};

/// Region of the Gaussian holding `quantile` of the mass: covariance axes
/// scaled by the chi-square (2 df) quantile, -2 log(1 - q).
Ellipse ellipse_from_gaussian(const Gaussian2D& g, double quantile);

/// Same for the Gaussian fitted to a sample. Throws DegenerateSample below
/// three points or for a singular covariance.
Ellipse emit_ellipse(const Sample2D& sample, double quantile);

namespace svg {

struct LabeledEllipse {
    Ellipse ellipse;
    std::string label;
    int series = 0;  // colour index
};

// Vowel-chart orientation: F2 grows leftwards, F1 grows downwards.
std::string ellipses(const std::vector<LabeledEllipse>& items, const std::string& title);

struct Point {
    double x = 0.0;
    double y = 0.0;
    std::string label;
};

// Scatter with a dashed y = x reference line.
std::string scatter(const std::vector<Point>& points, const std::string& title, const std::string& x_label,
                    const std::string& y_label);

struct Interval {
    std::string label;
    double point = 0.0;
    std::optional<double> lo;
    std::optional<double> hi;
};

// One row per interval: point marker with a horizontal error bar.
std::string intervals(const std::vector<Interval>& rows, const std::string& title, const std::string& x_label);

}  // namespace svg

}  // namespace mmo
