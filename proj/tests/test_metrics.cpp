#include <doctest.h>
#include <omp.h>

#include <cmath>
#include <sstream>

#include "mmo/error.hpp"
#include "mmo/kde.hpp"
#include "mmo/metrics.hpp"
#include "test_support.hpp"

using namespace mmo;

namespace {

Eigen::MatrixX2d gauss(Eigen::Index n, std::uint64_t seed, double mx, double my = 0.0, double var = 1.0) {
    Gaussian2D g;
    g.mean << mx, my;
    g.cov = var * Eigen::Matrix2d::Identity();
    return sample_gaussian(g, n, seed);
}

Gaussian2D gaussian(double mx, double my, const Eigen::Matrix2d& cov) {
    Gaussian2D g;
    g.mean << mx, my;
    g.cov = cov;
    return g;
}

}  // namespace

TEST_CASE("closed-form affinity") {
    const Eigen::Matrix2d I = Eigen::Matrix2d::Identity();
    CHECK(ba_gaussian(gaussian(0, 0, I), gaussian(0, 0, I)) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(ba_gaussian(gaussian(0, 0, I), gaussian(2, 0, I)) == doctest::Approx(std::exp(-0.5)).epsilon(1e-12));
    CHECK(ba_gaussian(gaussian(0, 0, I), gaussian(0, 0, 4 * I)) == doctest::Approx(0.8).epsilon(1e-12));
    Eigen::Matrix2d s;
    s << 1, 0.3, 0.3, 2;
    const Gaussian2D a = gaussian(0.2, -1, s), b = gaussian(1, 0.5, I);
    CHECK(ba_gaussian(a, b) == ba_gaussian(b, a));
    double prev = 1.0;
    for (double d = 0.25; d < 4; d += 0.25) {
        const double v = ba_gaussian(gaussian(0, 0, s), gaussian(d, 0, s));
        CHECK(v < prev);
        prev = v;
    }
    CHECK_THROWS_AS(ba_gaussian(gaussian(0, 0, Eigen::Matrix2d::Zero()), b), SingularCovariance);
}

TEST_CASE("grid density agrees with the serial reference") {
    const Eigen::MatrixX2d p = gauss(700, 1, 0.0), q = gauss(500, 2, 1.0, 0.5, 2.0);
    const kde::Bandwidth bw = kde::pooled_bandwidth(p, q);
    const kde::Grid grid = kde::make_grid(p, q, bw, 40, 3.0);
    const Eigen::MatrixXd ref = kde::density_reference(p, grid, bw);
    const Eigen::MatrixXd fast = kde::density(p, grid, bw);
    CHECK((ref - fast).cwiseAbs().maxCoeff() / ref.maxCoeff() < 1e-10);
}

TEST_CASE("grid density does not depend on the thread count") {
    const Eigen::MatrixX2d p = gauss(9000, 3, 0.0), q = gauss(9000, 4, 0.7);
    const kde::Bandwidth bw = kde::pooled_bandwidth(p, q);
    const kde::Grid grid = kde::make_grid(p, q, bw, 100, 3.0);
    const int saved = omp_get_max_threads();
    omp_set_num_threads(1);
    const Eigen::MatrixXd one = kde::density(p, grid, bw);
    omp_set_num_threads(4);
    const Eigen::MatrixXd four = kde::density(p, grid, bw);
    omp_set_num_threads(saved);
    CHECK(one == four);
}

TEST_CASE("pooled bandwidth") {
    Eigen::MatrixX2d p(3, 2), q(3, 2);
    p << 0, 0, 1, 2, 2, 4;
    q << 5, 1, 6, 1, 7, 1.5;
    const kde::Bandwidth bw = kde::pooled_bandwidth(p, q);
    // pooled var on x: (2 + 2) / 4 = 1
    CHECK(bw.h1 == doctest::Approx(std::pow(6.0, -1.0 / 6.0)));
    q.col(1).setConstant(1.0);
    CHECK_THROWS_AS(kde::pooled_bandwidth(p, q), DegenerateSample);
}

TEST_CASE("grid affinity: identity, symmetry, bounds") {
    const Eigen::MatrixX2d p = gauss(1000, 5, 0.0), q = gauss(800, 6, 1.3, -0.4);
    CHECK(ba_grid(p, p) == 1.0);
    const double pq = ba_grid(p, q), qp = ba_grid(q, p);
    CHECK(pq == qp);
    CHECK(pq > 0.0);
    CHECK(pq < 1.0);
    CHECK(ba_grid(gauss(1000, 7, 0.0), gauss(1000, 8, 10.0)) < 0.01);
    GridConfig bad;
    bad.resolution = 8;
    CHECK_THROWS_AS(ba_grid(p, q, bad), ConfigError);
}

TEST_CASE("grid affinity matches the closed form at n = 50000") {
    const double v = ba_grid(gauss(50000, 9, 0.0), gauss(50000, 10, 2.0));
    CHECK(std::abs(v - std::exp(-0.5)) < 0.02);
}

TEST_CASE("grid affinity is translation invariant") {
    const Eigen::MatrixX2d p = gauss(3000, 11, 0.0), q = gauss(3000, 12, 1.0, 0.5);
    Eigen::MatrixX2d ps = p, qs = q;
    ps.col(0).array() += 3.21;
    qs.col(0).array() += 3.21;
    ps.col(1).array() -= 1.7;
    qs.col(1).array() -= 1.7;
    CHECK(std::abs(ba_grid(p, q) - ba_grid(ps, qs)) < 0.005);
}

TEST_CASE("euclidean distance of centroids") {
    Eigen::MatrixX2d p(2, 2), q(2, 2);
    p << -1, 0, 1, 0;
    q << 3, 3, 3, 5;
    CHECK(euclidean_distance(p, q) == doctest::Approx(5.0));
    CHECK(euclidean_distance(p, p) == 0.0);
    CHECK(euclidean_distance(p, q) == euclidean_distance(q, p));
}

TEST_CASE("pillai trace") {
    Eigen::MatrixX2d p(4, 2), q(4, 2);
    p << 1, 0, -1, 0, 0, 1, 0, -1;
    q << 2, 0, -2, 0, 0, 2, 0, -2;
    CHECK(pillai(p, q) == 0.0);

    Eigen::MatrixX2d a(2, 2), b(2, 2);
    a << 0, 0, 2, 0;
    b << 1, 2, 3, 3;
    // E = [[4,1],[1,.5]], H = [[1,2.5],[2.5,6.25]]  ->  tr(H (H+E)^-1) = 41/43
    CHECK(pillai(a, b) == doctest::Approx(41.0 / 43.0).epsilon(1e-12));

    const Eigen::MatrixX2d x = gauss(200, 13, 0.0);
    CHECK(pillai(x, gauss(200, 14, 50.0)) > 0.99);
    CHECK(pillai(x, gauss(200, 14, 0.5)) <= 1.0);
    Eigen::MatrixX2d one(1, 2), two(2, 2);
    one << 0, 0;
    two << 1, 1, 2, 2;
    CHECK_THROWS_AS(pillai(one, two), SingularScatter);
    Eigen::MatrixX2d line_a(2, 2), line_b(2, 2);
    line_a << 0, 0, 1, 0;
    line_b << 2, 0, 3, 0;
    CHECK_THROWS_AS(pillai(line_a, line_b), SingularScatter);
}

TEST_CASE("summary uses median and central 95 percent") {
    OverlapEstimate e;
    for (int i = 0; i <= 100; ++i) e.replicates.push_back(i);
    e.replicates.push_back(std::nan(""));
    summarize(e);
    CHECK(e.point == 50.0);
    CHECK(*e.lo == doctest::Approx(2.5));
    CHECK(*e.hi == doctest::Approx(97.5));
    CHECK(e.failed == 1);
}

namespace {

const FittedModel& fitted() {
    static const FittedModel m = testsupport::small_fit(testsupport::small_truth(), 21);
    return m;
}

}  // namespace

TEST_CASE("modelled overlap: determinism, batching, euclidean from means") {
    const FittedModel& m = fitted();
    const std::pair<CellSpec, CellSpec> oral{{"IH", "oral", {}}, {"EH", "oral", {}}};
    const OverlapEstimate a = modelled_overlap(m, Measure::bhattacharyya, oral, ScopeSpec::average(), 4, 10, 300);
    const OverlapEstimate b = modelled_overlap(m, Measure::bhattacharyya, oral, ScopeSpec::average(), 4, 10, 300);
    CHECK(a.replicates == b.replicates);
    REQUIRE(a.replicates.size() == 10);
    CHECK(a.lo.has_value());
    for (double v : a.replicates) CHECK((v >= 0.0 && v <= 1.0));

    OverlapOptions opt;
    opt.reps = 10;
    opt.draws_per_rep = 300;
    const std::string s = m.speakers().front();
    const auto batch = modelled_overlap_batch(
        m,
        {{Measure::pillai, oral.first, oral.second, ScopeSpec::for_speaker(s)},
         {Measure::bhattacharyya, oral.first, oral.second, ScopeSpec::average()},
         {Measure::euclidean, oral.first, oral.second, ScopeSpec::average()}},
        opt, 4);
    CHECK(batch[1].replicates == a.replicates);
    CHECK(batch[0].scope == s);

    // Euclidean replicates are distances between drawn cell means.
    for (int r = 0; r < 10; ++r) {
        const ParamDraw d = draw_parameter(m, derive_seed(derive_seed(4, static_cast<std::uint64_t>(r)), 0));
        const Eigen::Vector4d xa(1, 0.5, -0.5, -0.25), xb(1, -0.5, -0.5, 0.25);
        CHECK(batch[2].replicates[static_cast<std::size_t>(r)] ==
              doctest::Approx((d.beta.transpose() * (xa - xb)).norm()).epsilon(1e-12));
    }
    CHECK_THROWS_AS(modelled_overlap(m, Measure::bhattacharyya, oral, ScopeSpec::for_speaker("zz"), 4, 5, 100),
                    UnknownSpeaker);
}

TEST_CASE("modelled overlap: threads do not change replicates") {
    const FittedModel& m = fitted();
    const std::pair<CellSpec, CellSpec> nasal{{"IH", "nasal", {}}, {"EH", "nasal", {}}};
    const int saved = omp_get_max_threads();
    omp_set_num_threads(1);
    const auto one = modelled_overlap(m, Measure::bhattacharyya, nasal, ScopeSpec::average(), 8, 6, 200);
    omp_set_num_threads(3);
    const auto three = modelled_overlap(m, Measure::bhattacharyya, nasal, ScopeSpec::average(), 8, 6, 200);
    omp_set_num_threads(saved);
    CHECK(one.replicates == three.replicates);
}

TEST_CASE("merged truth gives affinity near one") {
    TruthSpec t = testsupport::small_truth();
    t.beta.row(1).setZero();  // no vowel effect
    t.beta.row(3).setZero();
    const FittedModel m = testsupport::small_fit(t, 22);
    const auto e = modelled_overlap(m, Measure::bhattacharyya, {{"IH", "oral", {}}, {"EH", "oral", {}}},
                                    ScopeSpec::average(), 5, 20);
    CHECK(e.point > 0.95);
}

TEST_CASE("modelled average-speaker affinity tracks the truth") {
    TruthSpec t = testsupport::small_truth(20, 80);
    const TruthBundle tb = generate_corpus(t, 23);
    const FittedModel m = fit(build_design(tb.table, ModelSpec{}));
    const auto e = modelled_overlap(m, Measure::bhattacharyya, {{"IH", "oral", {}}, {"EH", "oral", {}}},
                                    ScopeSpec::average(), 6, 20);
    CHECK(std::abs(e.point - tb.true_overlap.at({"oral", "average"})) < 0.05);
}

namespace {

TokenTable speaker_tokens(const std::vector<std::tuple<std::string, std::string, double, double>>& rows) {
    std::vector<VowelToken> out;
    for (const auto& [vowel, word, f1, f2] : rows) {
        VowelToken t;
        t.speaker = "s";
        t.word = word;
        t.vowel = vowel;
        t.context = "oral";
        t.f1_norm = f1;
        t.f2_norm = f2;
        out.push_back(t);
    }
    return TokenTable(out, {});
}

}  // namespace

TEST_CASE("empirical overlap, raw and word-averaged") {
    std::vector<std::tuple<std::string, std::string, double, double>> rows;
    Rng rng(4);
    Normal nd;
    for (int i = 0; i < 30; ++i) rows.emplace_back("IH", "i" + std::to_string(i), nd(rng), nd(rng));
    for (int i = 0; i < 30; ++i) rows.emplace_back("EH", "e" + std::to_string(i), 1 + nd(rng), nd(rng));
    const TokenTable unique = speaker_tokens(rows);
    for (Measure m : {Measure::bhattacharyya, Measure::euclidean, Measure::pillai}) {
        const auto raw = empirical_overlap(unique, m, "s", "oral", false);
        const auto avg = empirical_overlap(unique, m, "s", "oral", true);
        CHECK(raw.point == avg.point);
        CHECK_FALSE(raw.lo.has_value());
        CHECK(raw.method == "raw");
        CHECK(avg.method == "averaged");
    }

    auto dup = rows;
    for (int k = 0; k < 50; ++k) dup.emplace_back("EH", "e0", 4.0, 3.0);
    auto dedup = rows;
    std::get<2>(dedup[30]) = (std::get<2>(rows[30]) + 50 * 4.0) / 51;
    std::get<3>(dedup[30]) = (std::get<3>(rows[30]) + 50 * 3.0) / 51;
    const double raw = empirical_overlap(speaker_tokens(dup), Measure::bhattacharyya, "s", "oral", false).point;
    const double avg = empirical_overlap(speaker_tokens(dup), Measure::bhattacharyya, "s", "oral", true).point;
    const double direct = ba_grid(
        [&] {
            Eigen::MatrixX2d m(30, 2);
            for (int i = 0; i < 30; ++i) m.row(i) << std::get<2>(dedup[static_cast<std::size_t>(i)]), std::get<3>(dedup[static_cast<std::size_t>(i)]);
            return m;
        }(),
        [&] {
            Eigen::MatrixX2d m(30, 2);
            for (int i = 0; i < 30; ++i) m.row(i) << std::get<2>(dedup[static_cast<std::size_t>(30 + i)]), std::get<3>(dedup[static_cast<std::size_t>(30 + i)]);
            return m;
        }());
    CHECK(raw != avg);
    CHECK(avg == doctest::Approx(direct).epsilon(1e-12));

    const TokenTable thin = speaker_tokens({{"IH", "a", 0, 0}, {"EH", "b", 1, 1}, {"EH", "c", 2, 1}});
    CHECK_THROWS_AS(empirical_overlap(thin, Measure::bhattacharyya, "s", "oral", false), InsufficientTokens);
}

TEST_CASE("estimates export as csv") {
    OverlapEstimate e;
    e.scope = "average";
    e.context = "oral";
    e.point = 0.5;
    e.lo = 0.4;
    e.method = "minimal-multi";
    std::ostringstream out;
    write_estimates_csv(out, {e});
    CHECK(out.str() == "speaker,context,measure,point,lo,hi,method,failed\naverage,oral,bhattacharyya,0.5,0.40000000000000002,,minimal-multi,0\n");
}
