#pragma once

// RFC-4180 CSV reading and writing (UTF-8, header row, quoted fields with
// embedded commas, quotes, and newlines).

#include <string>
#include <vector>

namespace relrisk::csv {

struct CsvData {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

// Parses a whole file. Throws DataError on unbalanced quotes or ragged rows.
CsvData read_file(const std::string& path);

// Parses from an in-memory buffer (used by tests).
CsvData parse(const std::string& text, const std::string& origin);

// Writes header + rows, quoting only fields that need it. CRLF is not used;
// lines end with '\n'.
void write_file(const std::string& path, const CsvData& data);

std::string escape_field(const std::string& field);

}  // namespace relrisk::csv
