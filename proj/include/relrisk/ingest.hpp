#pragma once

// CSV ingestion and validation for the relational credit schema.

#include <string>
#include <vector>

#include "relrisk/table.hpp"

namespace relrisk {

struct FkOrphanCount {
  std::string table;
  std::string column;
  std::string target_table;
  size_t orphans = 0;
};

struct ColumnMissingRate {
  std::string table;
  std::string column;
  double rate = 0.0;
};

struct ValidationReport {
  std::vector<std::pair<std::string, size_t>> row_counts;   // table -> rows
  std::vector<FkOrphanCount> orphan_counts;
  std::vector<ColumnMissingRate> missing_rates;
  std::vector<std::pair<std::string, size_t>> key_cardinalities;  // "table.column" -> distinct
  std::vector<std::string> violations;

  size_t total_orphans() const;
  std::string to_text() const;
  std::string to_json() const;
};

// The six-table schema used for both synthetic generation and HCDR-style
// real data. Columns absent from this list are ingested with inferred kind.
std::vector<TableSchema> default_schema();

// Loads one CSV per declared table from `directory`. Declared columns must
// all appear in each file's header; undeclared header columns are ingested
// as numeric when every non-missing cell parses, else categorical.
// Throws DataError on: missing file, missing declared column, non-integer
// key cell, duplicate application primary key, label outside {0,1}.
RelationalDataset load_tables(const std::string& directory,
                              const std::vector<TableSchema>& schema);

// Writes one CSV per table (shortest round-trip formatting for numerics,
// empty cell for missing). load_tables over the output reproduces the
// dataset cell-for-cell.
void write_tables(const RelationalDataset& ds, const std::string& directory);

// Report-only: row counts, orphan counts, missing rates, key cardinalities.
ValidationReport validate_schema(const RelationalDataset& ds);

}  // namespace relrisk
