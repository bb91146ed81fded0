#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mmo {

// Base of every failure raised by the library. Callers that do not care
// about the specific condition can catch this alone.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class MissingColumn : public Error {
public:
    explicit MissingColumn(const std::string& column)
        : Error("missing column '" + column + "'"), column_(column) {}
    const std::string& column() const noexcept { return column_; }

private:
    std::string column_;
};

class TooManyBadRows : public Error {
public:
    TooManyBadRows(std::size_t bad, std::size_t total, const std::string& first_reason)
        : Error(std::to_string(bad) + " of " + std::to_string(total) +
                " rows rejected (first: " + first_reason + ")"),
          bad_(bad), total_(total) {}
    std::size_t bad() const noexcept { return bad_; }
    std::size_t total() const noexcept { return total_; }

private:
    std::size_t bad_;
    std::size_t total_;
};

class EmptyResult : public Error {
public:
    using Error::Error;
};

class DegenerateSpeaker : public Error {
public:
    explicit DegenerateSpeaker(const std::string& speaker, const std::string& why)
        : Error("speaker '" + speaker + "': " + why), speaker_(speaker) {}
    const std::string& speaker() const noexcept { return speaker_; }

private:
    std::string speaker_;
};

class UnknownSpeaker : public Error {
public:
    explicit UnknownSpeaker(const std::string& speaker)
        : Error("unknown speaker '" + speaker + "'"), speaker_(speaker) {}
    const std::string& speaker() const noexcept { return speaker_; }

private:
    std::string speaker_;
};

class MissingLevel : public Error {
public:
    MissingLevel(const std::string& factor, const std::string& level)
        : Error("factor '" + factor + "' has no tokens at level '" + level + "'") {}
};

class SingularSystem : public Error {
public:
    using Error::Error;
};

class DegenerateSample : public Error {
public:
    using Error::Error;
};

class SingularCovariance : public Error {
public:
    using Error::Error;
};

class SingularScatter : public Error {
public:
    using Error::Error;
};

class InsufficientTokens : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

}  // namespace mmo
