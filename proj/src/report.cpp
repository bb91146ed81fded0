#include "mmo/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "mmo/error.hpp"

namespace mmo {

Ellipse ellipse_from_gaussian(const Gaussian2D& g, double quantile) {
    if (!(quantile > 0.0 && quantile < 1.0)) throw ConfigError("ellipse quantile must lie in (0, 1)");
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(0.5 * (g.cov + g.cov.transpose()));
    if (es.info() != Eigen::Success || !(es.eigenvalues()[0] > 0.0)) throw DegenerateSample("covariance is singular");
    const double scale = -2.0 * std::log1p(-quantile);
    Ellipse e;
    e.center = g.mean;
    e.semi_major = std::sqrt(scale * es.eigenvalues()[1]);
    e.semi_minor = std::sqrt(scale * es.eigenvalues()[0]);
    const Eigen::Vector2d major = es.eigenvectors().col(1);
    e.angle = std::atan2(major[1], major[0]);
    if (e.angle > M_PI / 2) e.angle -= M_PI;
    if (e.angle <= -M_PI / 2) e.angle += M_PI;
    return e;
}

Ellipse emit_ellipse(const Sample2D& sample, double quantile) {
    if (sample.size() < 3) throw DegenerateSample("ellipse needs at least three points");
    Gaussian2D g;
    g.mean = sample.mean();
    g.cov = sample.covariance();
    if (!(g.cov.determinant() > 1e-14 * g.cov.trace() * g.cov.trace())) throw DegenerateSample("sample covariance is singular");
    return ellipse_from_gaussian(g, quantile);
}

namespace svg {

namespace {

constexpr double kWidth = 640;
constexpr double kHeight = 480;
constexpr double kMargin = 60;
const char* const kColours[] = {"#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02"};

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3f", v);
    return buf;
}

std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '&': out += "&amp;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

struct Range {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    void add(double v) {
        if (!std::isfinite(v)) return;
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    void finish() {
        if (!(lo <= hi)) lo = 0.0, hi = 1.0;
        if (hi - lo < 1e-9) lo -= 0.5, hi += 0.5;
        const double pad = 0.05 * (hi - lo);
        lo -= pad;
        hi += pad;
    }
};

// Maps data to pixels; `flip` reverses an axis.
struct Frame {
    Range x, y;
    bool flip_x = false;
    bool flip_y = false;
    double px(double v) const {
        double t = (v - x.lo) / (x.hi - x.lo);
        if (flip_x) t = 1.0 - t;
        return kMargin + t * (kWidth - 2 * kMargin);
    }
    double py(double v) const {
        double t = (v - y.lo) / (y.hi - y.lo);
        if (!flip_y) t = 1.0 - t;
        return kMargin + t * (kHeight - 2 * kMargin);
    }
};

std::string header(const std::string& title) {
    return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(kWidth) + "\" height=\"" + num(kHeight) +
           "\" font-family=\"sans-serif\" font-size=\"12\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
           "<text x=\"" + num(kWidth / 2) + "\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">" + escape(title) +
           "</text>\n";
}

std::string axes(const Frame& f, const std::string& x_label, const std::string& y_label) {
    std::string s = "<rect x=\"" + num(kMargin) + "\" y=\"" + num(kMargin) + "\" width=\"" + num(kWidth - 2 * kMargin) +
                    "\" height=\"" + num(kHeight - 2 * kMargin) + "\" fill=\"none\" stroke=\"#444\"/>\n";
    for (int k = 0; k <= 4; ++k) {
        const double vx = f.x.lo + k * (f.x.hi - f.x.lo) / 4;
        const double vy = f.y.lo + k * (f.y.hi - f.y.lo) / 4;
        s += "<text x=\"" + num(f.px(vx)) + "\" y=\"" + num(kHeight - kMargin + 16) + "\" text-anchor=\"middle\">" +
             num(vx) + "</text>\n";
        s += "<text x=\"" + num(kMargin - 6) + "\" y=\"" + num(f.py(vy) + 4) + "\" text-anchor=\"end\">" + num(vy) +
             "</text>\n";
    }
    s += "<text x=\"" + num(kWidth / 2) + "\" y=\"" + num(kHeight - 16) + "\" text-anchor=\"middle\">" +
         escape(x_label) + "</text>\n";
    s += "<text x=\"16\" y=\"" + num(kHeight / 2) + "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " +
         num(kHeight / 2) + ")\">" + escape(y_label) + "</text>\n";
    return s;
}

}  // namespace

std::string ellipses(const std::vector<LabeledEllipse>& items, const std::string& title) {
    Frame f;
    f.flip_x = true;  // F2 on x, decreasing rightwards
    f.flip_y = true;  // F1 on y, increasing downwards
    for (const auto& it : items) {
        const double r = it.ellipse.semi_major;
        f.x.add(it.ellipse.center[1] - r);
        f.x.add(it.ellipse.center[1] + r);
        f.y.add(it.ellipse.center[0] - r);
        f.y.add(it.ellipse.center[0] + r);
    }
    f.x.finish();
    f.y.finish();
    std::string s = header(title) + axes(f, "F2 (normalized)", "F1 (normalized)");
    for (const auto& it : items) {
        const auto& e = it.ellipse;
        const char* colour = kColours[static_cast<std::size_t>(it.series) % 6];
        // polyline through the ellipse in data space
        std::string pts;
        for (int k = 0; k <= 72; ++k) {
            const double t = 2 * M_PI * k / 72;
            const double a = e.semi_major * std::cos(t);
            const double b = e.semi_minor * std::sin(t);
            const double f1 = e.center[0] + a * std::cos(e.angle) - b * std::sin(e.angle);
            const double f2 = e.center[1] + a * std::sin(e.angle) + b * std::cos(e.angle);
            pts += num(f.px(f2)) + "," + num(f.py(f1)) + " ";
        }
        s += "<polyline fill=\"none\" stroke=\"" + std::string(colour) + "\" stroke-width=\"1.5\" points=\"" + pts +
             "\"/>\n";
        s += "<text x=\"" + num(f.px(e.center[1])) + "\" y=\"" + num(f.py(e.center[0])) +
             "\" text-anchor=\"middle\" fill=\"" + colour + "\">" + escape(it.label) + "</text>\n";
    }
    return s + "</svg>\n";
}

std::string scatter(const std::vector<Point>& points, const std::string& title, const std::string& x_label,
                    const std::string& y_label) {
    Frame f;
    for (const auto& p : points) {
        f.x.add(p.x);
        f.y.add(p.y);
    }
    // shared square range so y = x is the diagonal
    f.x.add(f.y.lo);
    f.x.add(f.y.hi);
    f.x.finish();
    f.y = f.x;
    std::string s = header(title) + axes(f, x_label, y_label);
    s += "<line x1=\"" + num(f.px(f.x.lo)) + "\" y1=\"" + num(f.py(f.y.lo)) + "\" x2=\"" + num(f.px(f.x.hi)) +
         "\" y2=\"" + num(f.py(f.y.hi)) + "\" stroke=\"#888\" stroke-dasharray=\"5,4\"/>\n";
    for (const auto& p : points) {
        if (!std::isfinite(p.x) || !std::isfinite(p.y)) continue;
        s += "<circle cx=\"" + num(f.px(p.x)) + "\" cy=\"" + num(f.py(p.y)) + "\" r=\"3.5\" fill=\"" + kColours[0] +
             "\"><title>" + escape(p.label) + "</title></circle>\n";
    }
    return s + "</svg>\n";
}

std::string intervals(const std::vector<Interval>& rows, const std::string& title, const std::string& x_label) {
    Frame f;
    for (const auto& r : rows) {
        f.x.add(r.point);
        if (r.lo) f.x.add(*r.lo);
        if (r.hi) f.x.add(*r.hi);
    }
    f.x.finish();
    f.y.lo = 0.0;
    f.y.hi = static_cast<double>(std::max<std::size_t>(rows.size(), 1));
    std::string s = header(title);
    s += "<rect x=\"" + num(kMargin) + "\" y=\"" + num(kMargin) + "\" width=\"" + num(kWidth - 2 * kMargin) +
         "\" height=\"" + num(kHeight - 2 * kMargin) + "\" fill=\"none\" stroke=\"#444\"/>\n";
    for (int k = 0; k <= 4; ++k) {
        const double vx = f.x.lo + k * (f.x.hi - f.x.lo) / 4;
        s += "<text x=\"" + num(f.px(vx)) + "\" y=\"" + num(kHeight - kMargin + 16) + "\" text-anchor=\"middle\">" +
             num(vx) + "</text>\n";
    }
    s += "<text x=\"" + num(kWidth / 2) + "\" y=\"" + num(kHeight - 16) + "\" text-anchor=\"middle\">" +
         escape(x_label) + "</text>\n";
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const double y = f.py(static_cast<double>(rows.size() - i) - 0.5);
        const auto& r = rows[i];
        if (r.lo && r.hi) {
            s += "<line x1=\"" + num(f.px(*r.lo)) + "\" y1=\"" + num(y) + "\" x2=\"" + num(f.px(*r.hi)) + "\" y2=\"" +
                 num(y) + "\" stroke=\"#444\"/>\n";
        }
        if (std::isfinite(r.point)) {
            s += "<circle cx=\"" + num(f.px(r.point)) + "\" cy=\"" + num(y) + "\" r=\"4\" fill=\"" + kColours[1] +
                 "\"/>\n";
        }
        s += "<text x=\"" + num(kMargin + 4) + "\" y=\"" + num(y - 6) + "\">" + escape(r.label) + "</text>\n";
    }
    return s + "</svg>\n";
}

}  // namespace svg

}  // namespace mmo
