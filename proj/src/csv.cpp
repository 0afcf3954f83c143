#include "relrisk/csv.hpp"

#include <fstream>
#include <sstream>

#include "relrisk/common.hpp"

namespace relrisk::csv {

namespace {

// State machine over the raw buffer. Handles quoted fields, doubled quotes,
// and both \n and \r\n line ends.
std::vector<std::vector<std::string>> parse_records(const std::string& text,
                                                    const std::string& origin) {
  std::vector<std::vector<std::string>> records;
  std::vector<std::string> row;
  std::string field;
  bool in_quotes = false;
  bool field_started = false;
  size_t i = 0;
  const size_t n = text.size();

  auto end_field = [&] {
    row.push_back(std::move(field));
    field.clear();
    field_started = false;
  };
  auto end_row = [&] {
    end_field();
    records.push_back(std::move(row));
    row.clear();
  };

  while (i < n) {
    const char c = text[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < n && text[i + 1] == '"') {
          field.push_back('"');
          i += 2;
        } else {
          in_quotes = false;
          ++i;
        }
      } else {
        field.push_back(c);
        ++i;
      }
      continue;
    }
    switch (c) {
      case '"':
        if (!field.empty() || field_started) {
          throw DataError(origin + ": quote inside unquoted field");
        }
        in_quotes = true;
        field_started = true;
        ++i;
        break;
      case ',':
        end_field();
        ++i;
        break;
      case '\r':
        if (i + 1 < n && text[i + 1] == '\n') ++i;
        end_row();
        ++i;
        break;
      case '\n':
        end_row();
        ++i;
        break;
      default:
        field.push_back(c);
        field_started = true;
        ++i;
    }
  }
  if (in_quotes) throw DataError(origin + ": unterminated quoted field");
  if (field_started || !field.empty() || !row.empty()) end_row();
  return records;
}

}  // namespace

CsvData parse(const std::string& text, const std::string& origin) {
  auto records = parse_records(text, origin);
  CsvData out;
  if (records.empty()) throw DataError(origin + ": empty file (no header row)");
  out.header = std::move(records.front());
  const size_t width = out.header.size();
  out.rows.assign(std::make_move_iterator(records.begin() + 1),
                  std::make_move_iterator(records.end()));
  for (size_t r = 0; r < out.rows.size(); ++r) {
    if (out.rows[r].size() != width) {
      throw DataError(origin + ": row " + std::to_string(r + 2) + " has " +
                      std::to_string(out.rows[r].size()) + " fields, header has " +
                      std::to_string(width));
    }
  }
  return out;
}

CsvData read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open CSV file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse(buf.str(), path);
}

std::string escape_field(const std::string& field) {
  bool needs_quotes = false;
  for (char c : field) {
    if (c == ',' || c == '"' || c == '\n' || c == '\r') {
      needs_quotes = true;
      break;
    }
  }
  if (!needs_quotes) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += "\"\"";
    else out.push_back(c);
  }
  out += "\"";
  return out;
}

void write_file(const std::string& path, const CsvData& data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open CSV file for writing: " + path);
  auto write_row = [&out](const std::vector<std::string>& row) {
    for (size_t i = 0; i < row.size(); ++i) {
      if (i) out << ',';
      out << escape_field(row[i]);
    }
    out << '\n';
  };
  write_row(data.header);
  for (const auto& row : data.rows) write_row(row);
  if (!out) throw DataError("write failed: " + path);
}

}  // namespace relrisk::csv
