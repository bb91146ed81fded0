#include <doctest.h>

#include <cmath>

#include "mmo/design.hpp"
#include "mmo/error.hpp"
#include "test_support.hpp"

using namespace mmo;

TEST_CASE("sum-coded cell rows") {
    ModelSpec spec;
    const CellCoding c = code_cell(spec, "IH", "nasal");
    const Eigen::VectorXd x = c.fixed_row(Structure::minimal);
    CHECK(x.size() == 4);
    CHECK(x[0] == 1.0);
    CHECK(x[1] == 0.5);
    CHECK(x[2] == 0.5);
    CHECK(x[3] == 0.25);
    const CellCoding d = code_cell(spec, "EH", "oral");
    CHECK(d.vowel == -0.5);
    CHECK(d.context == -0.5);
    CHECK(d.fixed_row(Structure::expanded, 0.0).tail(4).isZero());
    CHECK_THROWS_AS(code_cell(spec, "AA", "oral"), ConfigError);
}

TEST_CASE("minimal and expanded designs") {
    const TokenTable t = testsupport::random_table(3, 4, 12, 24);
    ModelSpec spec;
    const DesignMatrices d = build_design(t, spec);
    CHECK(d.p() == 4);
    CHECK(d.Z_speaker.cols() == 4);
    CHECK(d.dims() == 2);
    CHECK(d.V.cols() == 0);
    CHECK_FALSE(d.has_following());
    CHECK(d.speakers.size() == 4);

    spec.structure = Structure::expanded;
    const DesignMatrices e = build_design(t, spec);
    CHECK(e.p() == 8);
    CHECK(e.V.cols() == 4);
    REQUIRE(e.has_following());
    // log-duration column is centred at the stored corpus mean
    CHECK(std::abs(e.X.col(4).mean()) < 1e-12);
    const double center = e.spec.control_values.at("log_duration_center");
    CHECK(e.X(0, 4) == doctest::Approx(std::log(t[0].duration_s) - center));
    for (int i = 0; i < e.n(); ++i) CHECK(e.X(i, 5) == doctest::Approx(e.X(i, 4) * e.X(i, 1)));

    spec.response = Response::univariate_f2;
    const DesignMatrices u = build_design(t, spec);
    CHECK(u.dims() == 1);
    CHECK(u.Y(0, 0) == *t[0].f2_norm);
}

TEST_CASE("nesting: words share following index, keep distinct word index") {
    const TokenTable t = testsupport::random_table(9, 3, 12, 40);
    ModelSpec spec;
    spec.structure = Structure::expanded;
    const DesignMatrices d = build_design(t, spec);
    bool shared = false;
    for (int i = 0; i < d.n() && !shared; ++i)
        for (int j = 0; j < d.n(); ++j)
            if (d.word_index[i] != d.word_index[j] && d.following_index[i] == d.following_index[j]) {
                shared = true;
                break;
            }
    CHECK(shared);
}

TEST_CASE("balanced data gives zero-mean factor columns") {
    std::vector<VowelToken> tokens;
    for (const char* v : {"IH", "EH"})
        for (const char* c : {"nasal", "oral"})
            for (int k = 0; k < 3; ++k) {
                VowelToken t;
                t.speaker = "s";
                t.word = std::string(v) + c + std::to_string(k);
                t.vowel = v;
                t.context = c;
                t.duration_s = 0.1;
                t.f1_norm = 0.1 * k;
                t.f2_norm = -0.1 * k;
                tokens.push_back(t);
            }
    const DesignMatrices d = build_design(TokenTable(tokens, {}), ModelSpec{});
    CHECK(d.X.col(1).sum() == 0.0);
    CHECK(d.X.col(2).sum() == 0.0);
}

TEST_CASE("missing level and determinism") {
    TokenTable t = testsupport::random_table(2, 3, 8, 20);
    std::vector<VowelToken> no_eh;
    for (const auto& x : t.tokens())
        if (x.vowel == "IH") no_eh.push_back(x);
    CHECK_THROWS_AS(build_design(TokenTable(no_eh, {}), ModelSpec{}), MissingLevel);
    const DesignMatrices a = build_design(t, ModelSpec{});
    const DesignMatrices b = build_design(t, ModelSpec{});
    CHECK(a.X == b.X);
    CHECK(a.Y == b.Y);
    CHECK(a.word_index == b.word_index);
}
