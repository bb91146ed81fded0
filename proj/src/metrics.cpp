#include "mmo/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <ostream>

#include "mmo/csv.hpp"
#include "mmo/error.hpp"
#include "mmo/kde.hpp"
#include "mmo/rng.hpp"

namespace mmo {

std::string to_string(Measure m) {
    switch (m) {
        case Measure::bhattacharyya: return "bhattacharyya";
        case Measure::euclidean: return "euclidean";
        case Measure::pillai: return "pillai";
    }
    return "?";
}

Measure parse_measure(const std::string& text) {
    if (text == "bhattacharyya" || text == "ba") return Measure::bhattacharyya;
    if (text == "euclidean") return Measure::euclidean;
    if (text == "pillai") return Measure::pillai;
    throw ConfigError("unknown measure '" + text + "'");
}

double ba_grid(const Eigen::MatrixX2d& p, const Eigen::MatrixX2d& q, const GridConfig& cfg) {
    const kde::Bandwidth bw = kde::pooled_bandwidth(p, q);
    const kde::Grid grid = kde::make_grid(p, q, bw, cfg.resolution, cfg.padding);
    return kde::affinity(kde::density(p, grid, bw), kde::density(q, grid, bw));
}

double ba_grid(const Sample2D& p, const Sample2D& q, const GridConfig& cfg) { return ba_grid(p.points, q.points, cfg); }

double ba_gaussian(const Gaussian2D& a, const Gaussian2D& b) {
    const double da = a.cov.determinant();
    const double db = b.cov.determinant();
    if (!(da > 0.0) || !(db > 0.0) || a.cov(0, 0) <= 0.0 || b.cov(0, 0) <= 0.0)
        throw SingularCovariance("covariance is not positive definite");
    const Eigen::Matrix2d avg = 0.5 * (a.cov + b.cov);
    const Eigen::Vector2d diff = a.mean - b.mean;
    const double dm = avg.determinant();
    const double maha = diff.dot(avg.inverse() * diff);
    const double db_dist = 0.125 * maha + 0.5 * (std::log(dm) - 0.5 * (std::log(da) + std::log(db)));
    return std::min(1.0, std::exp(-db_dist));
}

double euclidean_distance(const Eigen::MatrixX2d& p, const Eigen::MatrixX2d& q) {
    if (p.rows() == 0 || q.rows() == 0) throw DegenerateSample("empty sample");
    return (p.colwise().mean() - q.colwise().mean()).norm();
}

double euclidean_distance(const Sample2D& p, const Sample2D& q) { return euclidean_distance(p.points, q.points); }

double pillai(const Eigen::MatrixX2d& p, const Eigen::MatrixX2d& q) {
    if (p.rows() + q.rows() < 4 || p.rows() == 0 || q.rows() == 0)
        throw SingularScatter("Pillai trace needs at least four points in two nonempty groups");
    const Eigen::RowVector2d mp = p.colwise().mean();
    const Eigen::RowVector2d mq = q.colwise().mean();
    const double np = static_cast<double>(p.rows());
    const double nq = static_cast<double>(q.rows());
    const Eigen::RowVector2d m = (np * mp + nq * mq) / (np + nq);
    const Eigen::MatrixX2d cp = p.rowwise() - mp;
    const Eigen::MatrixX2d cq = q.rowwise() - mq;
    const Eigen::Matrix2d E = cp.transpose() * cp + cq.transpose() * cq;
    const Eigen::Matrix2d H = np * (mp - m).transpose() * (mp - m) + nq * (mq - m).transpose() * (mq - m);
    const Eigen::Matrix2d T = H + E;
    const double det = T.determinant();
    if (!(det > 1e-12 * T.trace() * T.trace())) throw SingularScatter("total scatter is singular");
    return std::clamp((H * T.inverse()).trace(), 0.0, 1.0);
}

double pillai(const Sample2D& p, const Sample2D& q) { return pillai(p.points, q.points); }

double measure_samples(Measure m, const Eigen::MatrixX2d& p, const Eigen::MatrixX2d& q, const GridConfig& cfg) {
    switch (m) {
        case Measure::bhattacharyya: return ba_grid(p, q, cfg);
        case Measure::euclidean: return euclidean_distance(p, q);
        case Measure::pillai: return pillai(p, q);
    }
    throw Error("unknown measure");
}

namespace {

// Type-7 quantile of sorted data.
double quantile(const std::vector<double>& sorted, double prob) {
    const double h = (static_cast<double>(sorted.size()) - 1.0) * prob;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

std::uint64_t fnv1a(const std::string& text) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string cell_key(const CellSpec& c, const ScopeSpec& s) {
    std::string key = c.vowel + '\x1f' + c.context + '\x1f' + (s.kind == ScopeKind::average_speaker ? "\x01" : s.speaker) +
                      '\x1f' + to_string(s.word_policy);
    for (const auto& [k, v] : c.control_values) key += '\x1f' + k + '=' + csv::format_double(v);
    return key;
}

}  // namespace

void summarize(OverlapEstimate& est) {
    std::vector<double> ok;
    for (double v : est.replicates)
        if (std::isfinite(v)) ok.push_back(v);
    est.failed = est.replicates.size() - ok.size();
    if (ok.empty()) {
        est.point = std::numeric_limits<double>::quiet_NaN();
        est.lo.reset();
        est.hi.reset();
        return;
    }
    std::sort(ok.begin(), ok.end());
    est.point = quantile(ok, 0.5);
    if (ok.size() > 1) {
        est.lo = quantile(ok, 0.025);
        est.hi = quantile(ok, 0.975);
    } else {
        est.lo.reset();
        est.hi.reset();
    }
}

std::vector<OverlapEstimate> modelled_overlap_batch(const FittedModel& model,
                                                    const std::vector<OverlapRequest>& requests,
                                                    const OverlapOptions& options, std::uint64_t seed) {
    if (options.reps < 1) throw ConfigError("reps must be at least 1");
    if (options.draws_per_rep < 2) throw ConfigError("draws_per_rep must be at least 2");
    const std::size_t nreq = requests.size();
    const auto reps = static_cast<std::size_t>(options.reps);

    for (const auto& req : requests) {
        if (req.scope.kind == ScopeKind::by_speaker && !model.modes.speaker.count(req.scope.speaker))
            throw UnknownSpeaker(req.scope.speaker);
    }

    // Distinct cells needing point clouds.
    std::map<std::string, std::size_t> cell_index;
    std::vector<std::pair<const CellSpec*, const ScopeSpec*>> cells;
    std::vector<std::uint64_t> cell_salt;
    std::vector<std::pair<std::size_t, std::size_t>> req_cells(nreq);
    for (std::size_t r = 0; r < nreq; ++r) {
        if (requests[r].measure == Measure::euclidean) continue;
        auto slot = [&](const CellSpec& c) {
            const std::string key = cell_key(c, requests[r].scope);
            auto [it, fresh] = cell_index.emplace(key, cells.size());
            if (fresh) {
                cells.emplace_back(&c, &requests[r].scope);
                cell_salt.push_back(fnv1a(key));
            }
            return it->second;
        };
        req_cells[r] = {slot(requests[r].a), slot(requests[r].b)};
    }

    std::vector<std::vector<double>> values(nreq, std::vector<double>(reps, std::numeric_limits<double>::quiet_NaN()));
    std::vector<std::string> first_error(reps);
    const auto n_points = static_cast<Eigen::Index>(options.draws_per_rep);

#pragma omp parallel for schedule(dynamic, 1)
    for (std::size_t rep = 0; rep < reps; ++rep) {
        const std::uint64_t rep_seed = derive_seed(seed, rep);
        ParamDraw draw;
        try {
            draw = draw_parameter(model, derive_seed(rep_seed, 0));
        } catch (const Error& e) {
            first_error[rep] = e.what();
            continue;
        }
        std::vector<std::optional<Eigen::MatrixX2d>> clouds(cells.size());
        std::vector<std::string> cloud_error(cells.size());
        auto cloud = [&](std::size_t c) -> const Eigen::MatrixX2d& {
            if (!clouds[c]) {
                const Gaussian2D g = predictive_mean_cov(model, *cells[c].first, *cells[c].second, draw);
                clouds[c] = sample_gaussian(g, n_points, derive_seed(rep_seed, cell_salt[c]));
            }
            return *clouds[c];
        };
        for (std::size_t r = 0; r < nreq; ++r) {
            const OverlapRequest& req = requests[r];
            try {
                if (req.measure == Measure::euclidean) {
                    const Gaussian2D a = predictive_mean_cov(model, req.a, req.scope, draw);
                    const Gaussian2D b = predictive_mean_cov(model, req.b, req.scope, draw);
                    values[r][rep] = (a.mean - b.mean).norm();
                } else {
                    const auto& pa = cloud(req_cells[r].first);
                    const auto& pb = cloud(req_cells[r].second);
                    values[r][rep] = measure_samples(req.measure, pa, pb, options.grid);
                }
            } catch (const Error& e) {
                if (first_error[rep].empty()) first_error[rep] = e.what();
            }
        }
    }

    std::vector<OverlapEstimate> out;
    out.reserve(nreq);
    for (std::size_t r = 0; r < nreq; ++r) {
        OverlapEstimate est;
        est.measure = requests[r].measure;
        est.vowel1 = requests[r].a.vowel;
        est.vowel2 = requests[r].b.vowel;
        est.context = requests[r].a.context;
        est.scope = requests[r].scope.label();
        est.replicates = std::move(values[r]);
        summarize(est);
        if (static_cast<double>(est.failed) > options.max_failure_fraction * static_cast<double>(reps)) {
            std::string why;
            for (std::size_t k = 0; k < reps && why.empty(); ++k) why = first_error[k];
            throw Error(std::to_string(est.failed) + " of " + std::to_string(reps) + " replicates failed for " +
                        to_string(est.measure) + " " + est.vowel1 + "/" + est.vowel2 + " " + est.context + " (" +
                        est.scope + "): " + why);
        }
        out.push_back(std::move(est));
    }
    return out;
}

OverlapEstimate modelled_overlap(const FittedModel& model, Measure measure, const std::pair<CellSpec, CellSpec>& cells,
                                 const ScopeSpec& scope, std::uint64_t seed, int reps, int draws_per_rep,
                                 const GridConfig& grid) {
    OverlapOptions opt;
    opt.reps = reps;
    opt.draws_per_rep = draws_per_rep;
    opt.grid = grid;
    return modelled_overlap_batch(model, {{measure, cells.first, cells.second, scope}}, opt, seed).front();
}

OverlapEstimate empirical_overlap(const TokenTable& table, Measure measure, const std::string& speaker,
                                  const std::string& context, bool word_averaged,
                                  const std::pair<std::string, std::string>& vowels, const GridConfig& grid) {
    std::array<std::vector<Eigen::Vector2d>, 2> pts;
    // word -> (sum, count), kept in first-appearance order for determinism
    std::array<std::vector<std::pair<std::string, std::pair<Eigen::Vector2d, int>>>, 2> words;
    std::array<std::map<std::string, std::size_t>, 2> word_slot;
    for (const auto& t : table.tokens()) {
        if (t.speaker != speaker || t.context != context) continue;
        int v = t.vowel == vowels.first ? 0 : t.vowel == vowels.second ? 1 : -1;
        if (v < 0) continue;
        if (!t.f1_norm || !t.f2_norm) throw Error("empirical overlap needs normalized tokens");
        const Eigen::Vector2d x(*t.f1_norm, *t.f2_norm);
        if (word_averaged) {
            auto [it, fresh] = word_slot[v].emplace(t.word, words[v].size());
            if (fresh) words[v].push_back({t.word, {Eigen::Vector2d::Zero(), 0}});
            auto& acc = words[v][it->second].second;
            acc.first += x;
            acc.second += 1;
        } else {
            pts[v].push_back(x);
        }
    }
    if (word_averaged) {
        for (int v = 0; v < 2; ++v)
            for (const auto& w : words[v]) pts[v].push_back(w.second.first / w.second.second);
    }
    std::array<Eigen::MatrixX2d, 2> m;
    for (int v = 0; v < 2; ++v) {
        if (pts[v].size() < 2)
            throw InsufficientTokens("speaker '" + speaker + "' has fewer than two " +
                                     (word_averaged ? std::string("words") : std::string("tokens")) + " of " +
                                     (v == 0 ? vowels.first : vowels.second) + " in context " + context);
        m[v].resize(static_cast<Eigen::Index>(pts[v].size()), 2);
        for (std::size_t k = 0; k < pts[v].size(); ++k) m[v].row(static_cast<Eigen::Index>(k)) = pts[v][k].transpose();
    }
    OverlapEstimate est;
    est.measure = measure;
    est.vowel1 = vowels.first;
    est.vowel2 = vowels.second;
    est.context = context;
    est.scope = speaker;
    est.method = word_averaged ? "averaged" : "raw";
    est.replicates = {measure_samples(measure, m[0], m[1], grid)};
    est.point = est.replicates.front();
    return est;
}

void write_estimates_csv(std::ostream& out, const std::vector<OverlapEstimate>& estimates) {
    csv::write_record(out, {"speaker", "context", "measure", "point", "lo", "hi", "method", "failed"});
    auto opt = [](const std::optional<double>& v) { return v ? csv::format_double(*v) : std::string(); };
    for (const auto& e : estimates) {
        csv::write_record(out, {e.scope, e.context, to_string(e.measure), csv::format_double(e.point), opt(e.lo),
                                opt(e.hi), e.method, std::to_string(e.failed)});
    }
}

}  // namespace mmo
