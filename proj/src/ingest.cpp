#include "relrisk/ingest.hpp"

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

#include "relrisk/csv.hpp"

namespace relrisk {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

bool is_missing_token(const std::string& s) { return s.empty() || s == "NA"; }

bool parse_double(const std::string& s, double& out) {
  const char* b = s.data();
  const char* e = b + s.size();
  auto res = std::from_chars(b, e, out);
  return res.ec == std::errc() && res.ptr == e;
}

bool parse_key(const std::string& s, int64_t& out) {
  const char* b = s.data();
  const char* e = b + s.size();
  auto res = std::from_chars(b, e, out);
  return res.ec == std::errc() && res.ptr == e;
}

ColumnKind infer_kind(const csv::CsvData& data, size_t col) {
  for (const auto& row : data.rows) {
    const std::string& cell = row[col];
    if (is_missing_token(cell)) continue;
    double d;
    if (!parse_double(cell, d)) return ColumnKind::categorical;
  }
  return ColumnKind::numeric;
}

Table load_one_table(const std::string& path, const TableSchema& schema) {
  csv::CsvData data = csv::read_file(path);
  Table table;
  table.name = schema.name;
  table.n_rows = data.rows.size();

  // Columns are ingested in header order; undeclared columns get an
  // inferred kind.
  for (size_t h = 0; h < data.header.size(); ++h) {
    const std::string& name = data.header[h];
    Column col;
    col.name = name;
    if (const auto* sc = schema.find_column(name)) {
      col.kind = sc->kind;
    } else {
      col.kind = infer_kind(data, h);
    }
    switch (col.kind) {
      case ColumnKind::key:
        col.keys.reserve(data.rows.size());
        for (size_t r = 0; r < data.rows.size(); ++r) {
          int64_t k;
          if (!parse_key(data.rows[r][h], k)) {
            throw DataError(path + ": non-integer key cell in column '" + name + "' row " +
                            std::to_string(r + 2));
          }
          col.keys.push_back(k);
        }
        break;
      case ColumnKind::numeric:
        col.nums.reserve(data.rows.size());
        for (size_t r = 0; r < data.rows.size(); ++r) {
          const std::string& cell = data.rows[r][h];
          if (is_missing_token(cell)) {
            col.nums.push_back(kMissing);
            continue;
          }
          double d;
          if (!parse_double(cell, d)) {
            throw DataError(path + ": non-numeric cell '" + cell + "' in column '" + name +
                            "' row " + std::to_string(r + 2));
          }
          col.nums.push_back(d);
        }
        break;
      case ColumnKind::categorical:
        col.codes.reserve(data.rows.size());
        for (size_t r = 0; r < data.rows.size(); ++r) col.intern(data.rows[r][h]);
        break;
    }
    table.columns.push_back(std::move(col));
  }

  for (const auto& sc : schema.columns) {
    if (!table.find(sc.name)) {
      throw DataError(path + ": header mismatch, declared column '" + sc.name + "' not found");
    }
  }
  return table;
}

void check_application_invariants(const RelationalDataset& ds) {
  const auto& schema = ds.table_schema(ds.application_table);
  const auto& app = ds.table(ds.application_table);
  if (!schema.primary_key) throw DataError("application table schema lacks a primary key");
  const auto& pk = app.col(*schema.primary_key);
  std::unordered_set<int64_t> seen;
  seen.reserve(pk.keys.size() * 2);
  for (int64_t k : pk.keys) {
    if (!seen.insert(k).second) {
      throw DataError("duplicate " + *schema.primary_key + " in application table: " +
                      std::to_string(k));
    }
  }
  const Column* label = app.find(ds.label_column);
  if (!label) throw DataError("application table lacks label column " + ds.label_column);
  for (size_t r = 0; r < label->nums.size(); ++r) {
    const double v = label->nums[r];
    if (is_missing(v) || (v != 0.0 && v != 1.0)) {
      throw DataError("label outside {0,1} at application row " + std::to_string(r + 1));
    }
  }
}

}  // namespace

std::vector<TableSchema> default_schema() {
  using K = ColumnKind;
  std::vector<TableSchema> schema;

  TableSchema app;
  app.name = "application";
  app.primary_key = "SK_ID_CURR";
  app.columns = {{"SK_ID_CURR", K::key}, {"TARGET", K::numeric}};
  schema.push_back(app);

  TableSchema bureau;
  bureau.name = "bureau";
  bureau.primary_key = "SK_ID_BUREAU";
  bureau.columns = {{"SK_ID_BUREAU", K::key}, {"SK_ID_CURR", K::key}};
  bureau.foreign_keys = {{"SK_ID_CURR", "application"}};
  schema.push_back(bureau);

  TableSchema prev;
  prev.name = "previous_application";
  prev.primary_key = "SK_ID_PREV";
  prev.columns = {{"SK_ID_PREV", K::key}, {"SK_ID_CURR", K::key}};
  prev.foreign_keys = {{"SK_ID_CURR", "application"}};
  schema.push_back(prev);

  for (const char* name : {"installments_payments", "pos_cash_balance", "credit_card_balance"}) {
    TableSchema child;
    child.name = name;
    child.columns = {{"SK_ID_PREV", K::key}, {"SK_ID_CURR", K::key}};
    child.foreign_keys = {{"SK_ID_PREV", "previous_application"}, {"SK_ID_CURR", "application"}};
    schema.push_back(child);
  }
  return schema;
}

RelationalDataset load_tables(const std::string& directory,
                              const std::vector<TableSchema>& schema) {
  RelationalDataset ds;
  ds.schema = schema;
  for (const auto& ts : schema) {
    const std::string path = (fs::path(directory) / (ts.name + ".csv")).string();
    if (!fs::exists(path)) throw DataError("missing file: " + path);
    ds.tables.emplace(ts.name, load_one_table(path, ts));
  }
  check_application_invariants(ds);
  return ds;
}

void write_tables(const RelationalDataset& ds, const std::string& directory) {
  fs::create_directories(directory);
  for (const auto& [name, table] : ds.tables) {
    csv::CsvData data;
    for (const auto& col : table.columns) data.header.push_back(col.name);
    data.rows.resize(table.n_rows);
    for (size_t r = 0; r < table.n_rows; ++r) {
      auto& row = data.rows[r];
      row.reserve(table.columns.size());
      for (const auto& col : table.columns) {
        switch (col.kind) {
          case ColumnKind::key:
            row.push_back(std::to_string(col.keys[r]));
            break;
          case ColumnKind::numeric:
            row.push_back(is_missing(col.nums[r]) ? std::string() : fmt_double(col.nums[r]));
            break;
          case ColumnKind::categorical:
            row.push_back(col.category_at(r));
            break;
        }
      }
    }
    csv::write_file((fs::path(directory) / (name + ".csv")).string(), data);
  }
}

size_t ValidationReport::total_orphans() const {
  size_t n = 0;
  for (const auto& o : orphan_counts) n += o.orphans;
  return n;
}

ValidationReport validate_schema(const RelationalDataset& ds) {
  ValidationReport report;
  for (const auto& ts : ds.schema) {
    const Table& table = ds.table(ts.name);
    report.row_counts.emplace_back(ts.name, table.n_rows);

    for (const auto& col : table.columns) {
      if (col.kind == ColumnKind::key) {
        std::unordered_set<int64_t> distinct(col.keys.begin(), col.keys.end());
        report.key_cardinalities.emplace_back(ts.name + "." + col.name, distinct.size());
      } else {
        report.missing_rates.push_back({ts.name, col.name, col.missing_rate()});
      }
    }

    for (const auto& fk : ts.foreign_keys) {
      const Table& target = ds.table(fk.target_table);
      const auto& target_schema = ds.table_schema(fk.target_table);
      if (!target_schema.primary_key) {
        report.violations.push_back("foreign key " + ts.name + "." + fk.column +
                                    " targets table without primary key");
        continue;
      }
      const auto& target_keys = target.col(*target_schema.primary_key).keys;
      std::unordered_set<int64_t> target_set(target_keys.begin(), target_keys.end());
      size_t orphans = 0;
      for (int64_t k : table.col(fk.column).keys) orphans += !target_set.count(k);
      report.orphan_counts.push_back({ts.name, fk.column, fk.target_table, orphans});
      if (orphans > 0) {
        report.violations.push_back(std::to_string(orphans) + " orphan rows in " + ts.name +
                                    " via " + fk.column);
      }
    }

    if (ts.primary_key) {
      const auto& keys = table.col(*ts.primary_key).keys;
      std::unordered_set<int64_t> distinct(keys.begin(), keys.end());
      if (distinct.size() != keys.size()) {
        report.violations.push_back("duplicate primary key values in " + ts.name);
      }
    }
  }
  return report;
}

std::string ValidationReport::to_text() const {
  std::ostringstream out;
  out << "== dataset validation ==\n";
  for (const auto& [name, rows] : row_counts) out << name << ": " << rows << " rows\n";
  out << "-- key cardinalities --\n";
  for (const auto& [key, n] : key_cardinalities) out << key << ": " << n << " distinct\n";
  out << "-- foreign keys --\n";
  for (const auto& o : orphan_counts) {
    out << o.table << "." << o.column << " -> " << o.target_table << ": " << o.orphans
        << " orphans\n";
  }
  out << "-- missing rates --\n";
  for (const auto& m : missing_rates) {
    out << m.table << "." << m.column << ": " << fmt_fixed(m.rate, 4) << "\n";
  }
  if (violations.empty()) {
    out << "no violations\n";
  } else {
    out << "-- violations --\n";
    for (const auto& v : violations) out << v << "\n";
  }
  return out.str();
}

std::string ValidationReport::to_json() const {
  json j;
  j["row_counts"] = json::object();
  for (const auto& [name, rows] : row_counts) j["row_counts"][name] = rows;
  j["key_cardinalities"] = json::object();
  for (const auto& [key, n] : key_cardinalities) j["key_cardinalities"][key] = n;
  j["orphans"] = json::array();
  for (const auto& o : orphan_counts) {
    j["orphans"].push_back({{"table", o.table},
                            {"column", o.column},
                            {"target", o.target_table},
                            {"count", o.orphans}});
  }
  j["missing_rates"] = json::array();
  for (const auto& m : missing_rates) {
    j["missing_rates"].push_back({{"table", m.table}, {"column", m.column}, {"rate", m.rate}});
  }
  j["violations"] = violations;
  return j.dump(2);
}

}  // namespace relrisk
