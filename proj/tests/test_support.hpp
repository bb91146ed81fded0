#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "mmo/design.hpp"
#include "mmo/rng.hpp"
#include "mmo/tokens.hpp"

namespace testsupport {

// Small random corpus with normalized formants already filled in.
inline mmo::TokenTable random_table(std::uint64_t seed, int speakers, int words, int tokens_per_speaker,
                                    double speaker_sd = 0.4, double word_sd = 0.3, double noise_sd = 0.5) {
    mmo::Rng rng(seed);
    mmo::Normal nd;
    const char* vowels[2] = {"IH", "EH"};
    const char* contexts[2] = {"nasal", "oral"};
    std::vector<double> word_f1(static_cast<std::size_t>(words)), word_f2(static_cast<std::size_t>(words));
    for (int w = 0; w < words; ++w) {
        word_f1[static_cast<std::size_t>(w)] = word_sd * nd(rng);
        word_f2[static_cast<std::size_t>(w)] = word_sd * nd(rng);
    }
    std::vector<mmo::VowelToken> tokens;
    for (int s = 0; s < speakers; ++s) {
        const double s1 = speaker_sd * nd(rng), s2 = speaker_sd * nd(rng);
        const double sv = 0.5 * speaker_sd * nd(rng);
        for (int k = 0; k < tokens_per_speaker; ++k) {
            const int w = static_cast<int>(rng() % static_cast<std::uint64_t>(words));
            const int v = w % 2, c = (w / 2) % 2;
            mmo::VowelToken t;
            t.speaker = "s" + std::to_string(s);
            t.word = "w" + std::to_string(w);
            t.vowel = vowels[v];
            t.context = contexts[c];
            t.following_segment = c == 0 ? (w % 3 ? "N" : "M") : (w % 3 ? "T" : "D");
            t.duration_s = std::exp(-2.3 + 0.3 * nd(rng));
            const double vc = v == 0 ? 0.5 : -0.5;
            const double cc = c == 0 ? 0.5 : -0.5;
            const double m1 = 0.1 - 0.5 * vc + 0.2 * cc + 0.6 * vc * cc + s1 + sv * vc;
            const double m2 = -0.2 + 0.4 * vc - 0.1 * cc - 0.5 * vc * cc + s2;
            const double e1 = noise_sd * nd(rng);
            const double e2 = noise_sd * (0.3 * e1 / noise_sd + 0.95 * nd(rng));
            t.f1_norm = m1 + word_f1[static_cast<std::size_t>(w)] + e1 + 0.2 * std::log(t.duration_s / 0.1);
            t.f2_norm = m2 + word_f2[static_cast<std::size_t>(w)] + e2;
            t.f1_hz = 500 + 70 * *t.f1_norm;
            t.f2_hz = 1800 + 200 * *t.f2_norm;
            tokens.push_back(t);
        }
    }
    return mmo::TokenTable(std::move(tokens), {});
}

inline std::shared_ptr<const mmo::DesignMatrices> random_design(std::uint64_t seed, mmo::Structure s,
                                                               mmo::Response r, int speakers = 6,
                                                               int words = 12, int tokens = 30) {
    mmo::ModelSpec spec;
    spec.structure = s;
    spec.response = r;
    return std::make_shared<const mmo::DesignMatrices>(
        mmo::build_design(random_table(seed, speakers, words, tokens), spec));
}

}  // namespace testsupport

#include "mmo/mixed_model.hpp"
#include "mmo/synth.hpp"

namespace testsupport {

// Small synthetic corpus from a truth spec, fitted with the minimal model.
inline mmo::FittedModel small_fit(const mmo::TruthSpec& truth, std::uint64_t seed, mmo::Response r = mmo::Response::multivariate) {
    const mmo::TruthBundle tb = mmo::generate_corpus(truth, seed);
    mmo::ModelSpec spec;
    spec.response = r;
    return mmo::fit(mmo::build_design(tb.table, spec));
}

inline mmo::TruthSpec small_truth(int speakers = 10, int tokens = 60) {
    mmo::TruthSpec t = mmo::default_truth();
    t.n_speakers = speakers;
    t.n_words = 40;
    t.tokens_per_speaker = tokens;
    return t;
}

}  // namespace testsupport
