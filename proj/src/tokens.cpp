#include "mmo/tokens.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <unordered_map>
#include <unordered_set>

#include "mmo/csv.hpp"
#include "mmo/error.hpp"

namespace mmo {
namespace {

std::optional<double> parse_double(const std::string& text) {
    if (text.empty()) return std::nullopt;
    double value = 0.0;
    const char* first = text.data();
    const char* last = first + text.size();
    while (first < last && *first == ' ') ++first;
    while (last > first && last[-1] == ' ') --last;
    auto [ptr, ec] = std::from_chars(first, last, value);
    if (ec != std::errc() || ptr != last || !std::isfinite(value)) return std::nullopt;
    return value;
}

std::optional<bool> parse_bool(std::string text) {
    std::transform(text.begin(), text.end(), text.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (text == "1" || text == "true" || text == "t" || text == "yes") return true;
    if (text == "0" || text == "false" || text == "f" || text == "no") return false;
    return std::nullopt;
}

struct Columns {
    std::size_t speaker, word, vowel, context, f1, f2, duration, following, stressed;
    std::optional<std::size_t> f1_norm, f2_norm;
};

Columns resolve_columns(const std::vector<std::string>& header, const SchemaMap& schema) {
    auto find = [&](const std::string& name) -> std::optional<std::size_t> {
        auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) return std::nullopt;
        return static_cast<std::size_t>(it - header.begin());
    };
    auto require = [&](const std::string& name) {
        auto idx = find(name);
        if (!idx) throw MissingColumn(name);
        return *idx;
    };
    Columns c{};
    c.speaker = require(schema.speaker);
    c.word = require(schema.word);
    c.vowel = require(schema.vowel);
    c.context = require(schema.context);
    c.f1 = require(schema.f1);
    c.f2 = require(schema.f2);
    c.duration = require(schema.duration);
    c.following = require(schema.following);
    c.stressed = require(schema.stressed);
    c.f1_norm = find(schema.f1_norm);
    c.f2_norm = find(schema.f2_norm);
    return c;
}

// Returns an empty string when the row is valid.
std::string parse_row(const std::vector<std::string>& fields, const Columns& c,
                      std::size_t width, VowelToken& token) {
    if (fields.size() != width) {
        return "expected " + std::to_string(width) + " fields, got " +
               std::to_string(fields.size());
    }
    token.speaker = fields[c.speaker];
    token.word = fields[c.word];
    token.vowel = fields[c.vowel];
    token.context = fields[c.context];
    token.following_segment = fields[c.following];
    if (token.speaker.empty()) return "empty speaker";
    if (token.vowel.empty() || token.context.empty()) return "empty vowel or context";

    auto f1 = parse_double(fields[c.f1]);
    auto f2 = parse_double(fields[c.f2]);
    auto dur = parse_double(fields[c.duration]);
    if (!f1) return "unparseable f1";
    if (!f2) return "unparseable f2";
    if (!dur) return "unparseable duration";
    if (*f1 <= 0.0 || *f2 <= 0.0) return "nonpositive formant";
    if (*dur <= 0.0) return "nonpositive duration";
    if (!(*f2 > *f1)) return "f2 not above f1";
    token.f1_hz = *f1;
    token.f2_hz = *f2;
    token.duration_s = *dur;

    auto stressed = parse_bool(fields[c.stressed]);
    if (!stressed) return "unparseable stressed flag";
    token.stressed = *stressed;

    token.f1_norm.reset();
    token.f2_norm.reset();
    if (c.f1_norm && c.f2_norm) {
        const auto& a = fields[*c.f1_norm];
        const auto& b = fields[*c.f2_norm];
        if (!a.empty() || !b.empty()) {
            auto n1 = parse_double(a);
            auto n2 = parse_double(b);
            if (!n1 || !n2) return "unparseable normalized formant";
            token.f1_norm = *n1;
            token.f2_norm = *n2;
        }
    }
    return {};
}

}  // namespace

std::vector<std::string> TokenTable::speakers() const {
    std::vector<std::string> out;
    std::unordered_set<std::string> seen;
    for (const auto& t : tokens_) {
        if (seen.insert(t.speaker).second) out.push_back(t.speaker);
    }
    return out;
}

bool TokenTable::normalized() const {
    return !tokens_.empty() && std::all_of(tokens_.begin(), tokens_.end(), [](const auto& t) {
        return t.f1_norm.has_value() && t.f2_norm.has_value();
    });
}

TokenTable load_tokens(std::istream& in, const LoadOptions& options, std::string source_name) {
    std::string line;
    if (!csv::read_line(in, line)) throw Error("CSV source '" + source_name + "' is empty");
    const auto header = csv::split_record(line);
    const Columns columns = resolve_columns(header, options.schema);

    Provenance prov;
    prov.source = std::move(source_name);
    std::vector<VowelToken> tokens;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        ++prov.rows_read;
        VowelToken token;
        auto reason = parse_row(csv::split_record(line), columns, header.size(), token);
        if (reason.empty()) {
            tokens.push_back(std::move(token));
        } else {
            prov.bad_rows.push_back({line_no, std::move(reason)});
        }
    }
    prov.rows_rejected = prov.bad_rows.size();
    if (prov.rows_read > 0 &&
        static_cast<double>(prov.rows_rejected) >
            options.max_bad_fraction * static_cast<double>(prov.rows_read)) {
        throw TooManyBadRows(prov.rows_rejected, prov.rows_read, prov.bad_rows.front().reason);
    }
    return TokenTable(std::move(tokens), std::move(prov));
}

TokenTable load_tokens(const std::filesystem::path& path, const LoadOptions& options) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open '" + path.string() + "'");
    return load_tokens(in, options, path.string());
}

void write_tokens(std::ostream& out, const TokenTable& table) {
    const bool with_norm = std::any_of(table.tokens().begin(), table.tokens().end(),
                                       [](const auto& t) { return t.f1_norm.has_value(); });
    std::vector<std::string> header{"speaker", "word",      "vowel",    "context", "f1",
                                    "f2",      "duration", "following", "stressed"};
    if (with_norm) {
        header.emplace_back("f1_norm");
        header.emplace_back("f2_norm");
    }
    csv::write_record(out, header);
    for (const auto& t : table.tokens()) {
        std::vector<std::string> row{t.speaker,
                                     t.word,
                                     t.vowel,
                                     t.context,
                                     csv::format_double(t.f1_hz),
                                     csv::format_double(t.f2_hz),
                                     csv::format_double(t.duration_s),
                                     t.following_segment,
                                     t.stressed ? "1" : "0"};
        if (with_norm) {
            row.push_back(t.f1_norm ? csv::format_double(*t.f1_norm) : "");
            row.push_back(t.f2_norm ? csv::format_double(*t.f2_norm) : "");
        }
        csv::write_record(out, row);
    }
}

std::string FilterSpec::describe() const {
    std::string s = "vowels=" + vowels[0] + "/" + vowels[1] + " contexts=" + contexts[0] + "/" +
                    contexts[1] + (require_stressed ? " stressed-only" : "");
    if (word_allowlist) s += " words=" + std::to_string(word_allowlist->size());
    return s;
}

FilterResult filter_tokens(const TokenTable& table, const FilterSpec& spec) {
    if (spec.vowels[0] == spec.vowels[1]) throw ConfigError("filter vowels must be distinct");
    if (spec.contexts[0] == spec.contexts[1]) throw ConfigError("filter contexts must be distinct");
    if (table.empty()) throw EmptyResult("cannot filter an empty table");

    auto matches = [&](const VowelToken& t) {
        if (t.vowel != spec.vowels[0] && t.vowel != spec.vowels[1]) return false;
        if (t.context != spec.contexts[0] && t.context != spec.contexts[1]) return false;
        if (spec.require_stressed && !t.stressed) return false;
        if (spec.word_allowlist && !spec.word_allowlist->count(t.word)) return false;
        return true;
    };

    FilterResult result;
    std::vector<VowelToken> kept;
    for (const auto& t : table.tokens()) {
        if (matches(t)) kept.push_back(t);
    }
    if (kept.empty()) throw EmptyResult("filter '" + spec.describe() + "' retained no rows");

    for (const auto& t : kept) ++result.counts[{t.vowel, t.context, t.speaker}];

    std::vector<std::string> speakers;
    std::unordered_set<std::string> seen;
    for (const auto& t : kept) {
        if (seen.insert(t.speaker).second) speakers.push_back(t.speaker);
    }
    for (const auto& v : spec.vowels) {
        for (const auto& c : spec.contexts) {
            std::size_t total = 0;
            for (const auto& s : speakers) {
                auto it = result.counts.find({v, c, s});
                const std::size_t n = it == result.counts.end() ? 0 : it->second;
                if (n == 0) result.empty_cells.push_back({s, v, c});
                total += n;
            }
            if (total == 0) result.empty_cells.push_back({std::nullopt, v, c});
        }
    }

    Provenance prov = table.provenance();
    prov.filters.push_back(spec.describe());
    result.table = TokenTable(std::move(kept), std::move(prov));
    return result;
}

}  // namespace mmo
