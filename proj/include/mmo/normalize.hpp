#pragma once

#include <cstddef>
#include <map>
#include <string>

#include "mmo/tokens.hpp"

namespace mmo {

struct SpeakerStats {
    std::string speaker;
    double mean_f1 = 0.0;
    double mean_f2 = 0.0;
    double sd_f1 = 0.0;  // sample sd, divisor n - 1
    double sd_f2 = 0.0;
    std::size_t n_tokens = 0;
};

using SpeakerStatsMap = std::map<std::string, SpeakerStats>;

// Per-speaker formant means and sample sds. Pass the speaker's whole vowel
// inventory, not the two-vowel analysis subset. Throws DegenerateSpeaker for
// fewer than two tokens or a zero sd.
SpeakerStatsMap speaker_stats(const TokenTable& table);

// Lobanov z-scores: f*_norm = (f*_hz - mean) / sd with the speaker's stats.
// Hz fields are kept. Throws UnknownSpeaker when a speaker has no stats.
TokenTable lobanov_normalize(const TokenTable& analysis, const SpeakerStatsMap& stats);

}  // namespace mmo
