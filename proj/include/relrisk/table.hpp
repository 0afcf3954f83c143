#pragma once

// Typed in-memory relational tables. Numeric cells use NaN as the missing
// marker; categorical cells are interned per-column codes (-1 = missing).

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "relrisk/common.hpp"

namespace relrisk {

enum class ColumnKind { numeric, categorical, key };

struct SchemaColumn {
  std::string name;
  ColumnKind kind;
};

struct ForeignKey {
  std::string column;
  std::string target_table;
};

struct TableSchema {
  std::string name;
  std::vector<SchemaColumn> columns;
  std::optional<std::string> primary_key;
  std::vector<ForeignKey> foreign_keys;

  const SchemaColumn* find_column(const std::string& name) const;
};

struct Column {
  std::string name;
  ColumnKind kind = ColumnKind::numeric;
  std::vector<double> nums;        // numeric payload, NaN = missing
  std::vector<int64_t> keys;       // key payload
  std::vector<int32_t> codes;      // categorical payload, -1 = missing
  std::vector<std::string> dict;   // categorical dictionary, first-seen order

  size_t size() const {
    switch (kind) {
      case ColumnKind::numeric: return nums.size();
      case ColumnKind::key: return keys.size();
      case ColumnKind::categorical: return codes.size();
    }
    return 0;
  }

  double missing_rate() const;
  // Interns a categorical value; empty or "NA" maps to missing (-1).
  int32_t intern(const std::string& value);
  std::string category_at(size_t row) const;
};

struct Table {
  std::string name;
  size_t n_rows = 0;
  std::vector<Column> columns;

  Column* find(const std::string& col_name);
  const Column* find(const std::string& col_name) const;
  Column& col(const std::string& col_name);
  const Column& col(const std::string& col_name) const;
};

struct RelationalDataset {
  std::vector<TableSchema> schema;
  std::map<std::string, Table> tables;
  std::string application_table = "application";
  std::string label_column = "TARGET";

  Table& table(const std::string& name);
  const Table& table(const std::string& name) const;
  const TableSchema& table_schema(const std::string& name) const;
  size_t n_customers() const { return table(application_table).n_rows; }

  // Customer keys in table row order, and row lookup by key.
  const std::vector<int64_t>& customer_ids() const;
  std::vector<int> labels() const;  // per application row, {0,1}
};

// Cell-wise dataset equality (values, not internal code assignments).
bool datasets_equal(const RelationalDataset& a, const RelationalDataset& b);

}  // namespace relrisk
