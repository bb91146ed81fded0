#include <doctest.h>

#include <cmath>

#include "mmo/error.hpp"
#include "mmo/normalize.hpp"
#include "mmo/rng.hpp"

using namespace mmo;

namespace {

VowelToken tok(const std::string& speaker, const std::string& vowel, double f1, double f2) {
    VowelToken t;
    t.speaker = speaker;
    t.word = vowel + std::to_string(f1);
    t.vowel = vowel;
    t.context = "oral";
    t.f1_hz = f1;
    t.f2_hz = f2;
    t.duration_s = 0.1;
    t.following_segment = "T";
    return t;
}

// Three-vowel speakers with random formants.
TokenTable inventory(std::uint64_t seed) {
    Rng rng(seed);
    Normal nd;
    std::vector<VowelToken> out;
    const char* vowels[] = {"IH", "EH", "AA"};
    const double f1[] = {420, 560, 750};
    const double f2[] = {2000, 1800, 1200};
    for (int s = 0; s < 3; ++s)
        for (int v = 0; v < 3; ++v)
            for (int k = 0; k < 15; ++k)
                out.push_back(tok("s" + std::to_string(s), vowels[v], f1[v] + 40 * nd(rng) + 30 * s,
                                  f2[v] + 120 * nd(rng) - 50 * s));
    return TokenTable(out, {});
}

}  // namespace

TEST_CASE("sample mean and sd per speaker") {
    const TokenTable t({tok("a", "IH", 400, 2000), tok("a", "IH", 500, 2100), tok("a", "IH", 600, 2200)}, {});
    const auto st = speaker_stats(t).at("a");
    CHECK(st.mean_f1 == doctest::Approx(500));
    CHECK(st.sd_f1 == doctest::Approx(100));
    CHECK(st.n_tokens == 3);
}

TEST_CASE("degenerate speakers are rejected") {
    CHECK_THROWS_AS(speaker_stats(TokenTable({tok("a", "IH", 400, 2000)}, {})), DegenerateSpeaker);
    CHECK_THROWS_AS(speaker_stats(TokenTable({tok("a", "IH", 400, 2000), tok("a", "EH", 400, 2100)}, {})),
                    DegenerateSpeaker);
}

TEST_CASE("z-scores and unknown speakers") {
    SpeakerStatsMap stats;
    stats["a"] = {"a", 500, 1500, 100, 200, 10};
    const TokenTable t({tok("a", "IH", 400, 1500)}, {});
    const TokenTable z = lobanov_normalize(t, stats);
    CHECK(*z[0].f1_norm == doctest::Approx(-1.0));
    CHECK(*z[0].f2_norm == doctest::Approx(0.0));
    CHECK(z[0].f1_hz == 400);
    CHECK_THROWS_AS(lobanov_normalize(TokenTable({tok("b", "IH", 400, 1500)}, {}), stats), UnknownSpeaker);
}

TEST_CASE("full inventory has mean 0 and sd 1 per speaker") {
    const TokenTable all = inventory(3);
    const TokenTable z = lobanov_normalize(all, speaker_stats(all));
    for (const std::string s : {"s0", "s1", "s2"}) {
        double m1 = 0, m2 = 0;
        int n = 0;
        for (const auto& t : z.tokens())
            if (t.speaker == s) m1 += *t.f1_norm, m2 += *t.f2_norm, ++n;
        m1 /= n;
        m2 /= n;
        double v1 = 0, v2 = 0;
        for (const auto& t : z.tokens())
            if (t.speaker == s) v1 += std::pow(*t.f1_norm - m1, 2), v2 += std::pow(*t.f2_norm - m2, 2);
        CHECK(std::abs(m1) < 1e-12);
        CHECK(std::abs(m2) < 1e-12);
        CHECK(std::abs(std::sqrt(v1 / (n - 1)) - 1.0) < 1e-12);
        CHECK(std::abs(std::sqrt(v2 / (n - 1)) - 1.0) < 1e-12);
    }
}

TEST_CASE("subset scored with full-inventory stats is not centred") {
    const TokenTable all = inventory(4);
    std::vector<VowelToken> sub;
    for (const auto& t : all.tokens())
        if (t.speaker == "s0" && t.vowel != "AA") sub.push_back(t);
    const TokenTable z = lobanov_normalize(TokenTable(sub, {}), speaker_stats(all));
    double m1 = 0;
    for (const auto& t : z.tokens()) m1 += *t.f1_norm;
    m1 /= static_cast<double>(z.size());
    CHECK(std::abs(m1) > 0.1);
}

TEST_CASE("affine rescaling of Hz leaves z-scores unchanged") {
    const TokenTable all = inventory(5);
    std::vector<VowelToken> scaled = all.tokens();
    for (auto& t : scaled) {
        t.f1_hz = 1.7 * t.f1_hz + 30;
        t.f2_hz = 1.7 * t.f2_hz + 30;
    }
    const TokenTable b(scaled, {});
    const TokenTable za = lobanov_normalize(all, speaker_stats(all));
    const TokenTable zb = lobanov_normalize(b, speaker_stats(b));
    for (std::size_t i = 0; i < za.size(); ++i) {
        CHECK(std::abs(*za[i].f1_norm - *zb[i].f1_norm) < 1e-9);
        CHECK(std::abs(*za[i].f2_norm - *zb[i].f2_norm) < 1e-9);
    }
}
