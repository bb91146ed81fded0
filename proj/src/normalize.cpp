#include "mmo/normalize.hpp"

#include <cmath>
#include <vector>

#include "mmo/error.hpp"

namespace mmo {

SpeakerStatsMap speaker_stats(const TokenTable& table) {
    struct Acc {
        std::vector<double> f1, f2;
    };
    std::map<std::string, Acc> by_speaker;
    for (const auto& t : table.tokens()) {
        auto& acc = by_speaker[t.speaker];
        acc.f1.push_back(t.f1_hz);
        acc.f2.push_back(t.f2_hz);
    }

    // Two-pass mean / sum of squared deviations.
    auto moments = [](const std::vector<double>& xs) {
        double mean = 0.0;
        for (double x : xs) mean += x;
        mean /= static_cast<double>(xs.size());
        double ss = 0.0;
        for (double x : xs) ss += (x - mean) * (x - mean);
        return std::pair{mean, std::sqrt(ss / static_cast<double>(xs.size() - 1))};
    };

    SpeakerStatsMap out;
    for (const auto& [speaker, acc] : by_speaker) {
        if (acc.f1.size() < 2) throw DegenerateSpeaker(speaker, "fewer than 2 tokens");
        SpeakerStats s;
        s.speaker = speaker;
        s.n_tokens = acc.f1.size();
        std::tie(s.mean_f1, s.sd_f1) = moments(acc.f1);
        std::tie(s.mean_f2, s.sd_f2) = moments(acc.f2);
        if (!(s.sd_f1 > 0.0) || !(s.sd_f2 > 0.0)) throw DegenerateSpeaker(speaker, "zero formant sd");
        out.emplace(speaker, s);
    }
    return out;
}

TokenTable lobanov_normalize(const TokenTable& analysis, const SpeakerStatsMap& stats) {
    std::vector<VowelToken> tokens = analysis.tokens();
    for (auto& t : tokens) {
        auto it = stats.find(t.speaker);
        if (it == stats.end()) throw UnknownSpeaker(t.speaker);
        const SpeakerStats& s = it->second;
        t.f1_norm = (t.f1_hz - s.mean_f1) / s.sd_f1;
        t.f2_norm = (t.f2_hz - s.mean_f2) / s.sd_f2;
    }
    Provenance prov = analysis.provenance();
    prov.filters.emplace_back("lobanov");
    return TokenTable(std::move(tokens), std::move(prov));
}

}  // namespace mmo
