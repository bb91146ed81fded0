#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <vector>

namespace mmo {

/// One measured vowel token. Formants are taken at a single point in the
/// vowel upstream; the normalized fields stay empty until Lobanov scaling.
struct VowelToken {
    std::string speaker;
    std::string word;
    std::string vowel;
    std::string context;
    double f1_hz = 0.0;
    double f2_hz = 0.0;
    double duration_s = 0.0;
    std::string following_segment;
    bool stressed = true;
    std::optional<double> f1_norm;
    std::optional<double> f2_norm;
};

struct BadRow {
    std::size_t line = 0;  // 1-based, header is line 1
    std::string reason;
};

struct Provenance {
    std::string source;
    std::vector<std::string> filters;
    std::size_t rows_read = 0;
    std::size_t rows_rejected = 0;
    std::vector<BadRow> bad_rows;
};

/// Immutable, ordered collection of tokens.
class TokenTable {
public:
    TokenTable() = default;
    TokenTable(std::vector<VowelToken> tokens, Provenance provenance)
        : tokens_(std::move(tokens)), provenance_(std::move(provenance)) {}

    const std::vector<VowelToken>& tokens() const noexcept { return tokens_; }
    const Provenance& provenance() const noexcept { return provenance_; }
    std::size_t size() const noexcept { return tokens_.size(); }
    bool empty() const noexcept { return tokens_.empty(); }
    const VowelToken& operator[](std::size_t i) const { return tokens_[i]; }

    std::vector<std::string> speakers() const;  // first-appearance order
    bool normalized() const;                    // every token has both norm fields

private:
    std::vector<VowelToken> tokens_;
    Provenance provenance_;
};

/// Column names for each token field. Optional normalized columns are read
/// when present in the header.
struct SchemaMap {
    std::string speaker = "speaker";
    std::string word = "word";
    std::string vowel = "vowel";
    std::string context = "context";
    std::string f1 = "f1";
    std::string f2 = "f2";
    std::string duration = "duration";
    std::string following = "following";
    std::string stressed = "stressed";
    std::string f1_norm = "f1_norm";
    std::string f2_norm = "f2_norm";
};

struct LoadOptions {
    SchemaMap schema;
    double max_bad_fraction = 0.05;
};

TokenTable load_tokens(std::istream& csv_source, const LoadOptions& options = {},
                       std::string source_name = "<stream>");
TokenTable load_tokens(const std::filesystem::path& path, const LoadOptions& options = {});

// Writes the table with the default schema. Numbers use 17 significant digits
// so load_tokens reproduces every double exactly.
void write_tokens(std::ostream& out, const TokenTable& table);

struct FilterSpec {
    std::array<std::string, 2> vowels{"IH", "EH"};
    std::array<std::string, 2> contexts{"nasal", "oral"};
    bool require_stressed = true;
    std::optional<std::set<std::string>> word_allowlist;

    std::string describe() const;
};

struct EmptyCell {
    std::optional<std::string> speaker;  // empty for the global cell
    std::string vowel;
    std::string context;
};

struct FilterResult {
    TokenTable table;
    // (vowel, context, speaker) -> count, over the retained rows.
    std::map<std::tuple<std::string, std::string, std::string>, std::size_t> counts;
    std::vector<EmptyCell> empty_cells;
};

/// Keeps rows matching every predicate of `spec`, preserving input order.
/// Throws EmptyResult when nothing survives.
FilterResult filter_tokens(const TokenTable& table, const FilterSpec& spec);

}  // namespace mmo
