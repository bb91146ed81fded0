#pragma once

#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace mmo::csv {

// Splits one CSV record. Double-quoted fields may contain commas and
// doubled quotes; embedded newlines are not supported.
std::vector<std::string> split_record(std::string_view line);

// Reads the next non-empty line, stripping a trailing '\r'. Returns false at EOF.
bool read_line(std::istream& in, std::string& line);

// Quotes a field only when it needs it.
std::string escape(std::string_view field);

// Fixed 17-significant-digit rendering; parses back to the identical double.
std::string format_double(double value);

void write_record(std::ostream& out, const std::vector<std::string>& fields);

}  // namespace mmo::csv
