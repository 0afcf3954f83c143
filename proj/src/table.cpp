#include "relrisk/table.hpp"

#include <algorithm>
#include <cmath>

namespace relrisk {

const SchemaColumn* TableSchema::find_column(const std::string& col_name) const {
  for (const auto& c : columns)
    if (c.name == col_name) return &c;
  return nullptr;
}

double Column::missing_rate() const {
  const size_t n = size();
  if (n == 0) return 0.0;
  size_t miss = 0;
  switch (kind) {
    case ColumnKind::numeric:
      for (double v : nums) miss += is_missing(v);
      break;
    case ColumnKind::categorical:
      for (int32_t c : codes) miss += (c < 0);
      break;
    case ColumnKind::key:
      break;  // keys are non-null by construction
  }
  return static_cast<double>(miss) / static_cast<double>(n);
}

int32_t Column::intern(const std::string& value) {
  if (value.empty() || value == "NA") {
    codes.push_back(-1);
    return -1;
  }
  for (size_t i = 0; i < dict.size(); ++i) {
    if (dict[i] == value) {
      codes.push_back(static_cast<int32_t>(i));
      return static_cast<int32_t>(i);
    }
  }
  dict.push_back(value);
  codes.push_back(static_cast<int32_t>(dict.size() - 1));
  return static_cast<int32_t>(dict.size() - 1);
}

std::string Column::category_at(size_t row) const {
  const int32_t c = codes[row];
  return c < 0 ? std::string() : dict[static_cast<size_t>(c)];
}

Column* Table::find(const std::string& col_name) {
  for (auto& c : columns)
    if (c.name == col_name) return &c;
  return nullptr;
}

const Column* Table::find(const std::string& col_name) const {
  for (const auto& c : columns)
    if (c.name == col_name) return &c;
  return nullptr;
}

Column& Table::col(const std::string& col_name) {
  if (auto* c = find(col_name)) return *c;
  throw DataError("table '" + name + "' has no column '" + col_name + "'");
}

const Column& Table::col(const std::string& col_name) const {
  if (const auto* c = find(col_name)) return *c;
  throw DataError("table '" + name + "' has no column '" + col_name + "'");
}

Table& RelationalDataset::table(const std::string& name) {
  auto it = tables.find(name);
  if (it == tables.end()) throw DataError("dataset has no table '" + name + "'");
  return it->second;
}

const Table& RelationalDataset::table(const std::string& name) const {
  auto it = tables.find(name);
  if (it == tables.end()) throw DataError("dataset has no table '" + name + "'");
  return it->second;
}

const TableSchema& RelationalDataset::table_schema(const std::string& name) const {
  for (const auto& s : schema)
    if (s.name == name) return s;
  throw DataError("schema has no table '" + name + "'");
}

const std::vector<int64_t>& RelationalDataset::customer_ids() const {
  const auto& app = table(application_table);
  const auto& pk = table_schema(application_table).primary_key;
  if (!pk) throw DataError("application table has no primary key");
  return app.col(*pk).keys;
}

std::vector<int> RelationalDataset::labels() const {
  const auto& col = table(application_table).col(label_column);
  std::vector<int> out(col.nums.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = col.nums[i] != 0.0 ? 1 : 0;
  return out;
}

namespace {

bool columns_equal(const Column& a, const Column& b) {
  if (a.name != b.name || a.kind != b.kind || a.size() != b.size()) return false;
  switch (a.kind) {
    case ColumnKind::numeric:
      for (size_t i = 0; i < a.nums.size(); ++i) {
        const bool ma = is_missing(a.nums[i]), mb = is_missing(b.nums[i]);
        if (ma != mb) return false;
        if (!ma && a.nums[i] != b.nums[i]) return false;
      }
      return true;
    case ColumnKind::key:
      return a.keys == b.keys;
    case ColumnKind::categorical:
      for (size_t i = 0; i < a.codes.size(); ++i)
        if (a.category_at(i) != b.category_at(i)) return false;
      return true;
  }
  return false;
}

}  // namespace

bool datasets_equal(const RelationalDataset& a, const RelationalDataset& b) {
  if (a.tables.size() != b.tables.size()) return false;
  for (const auto& [name, ta] : a.tables) {
    auto it = b.tables.find(name);
    if (it == b.tables.end()) return false;
    const Table& tb = it->second;
    if (ta.n_rows != tb.n_rows || ta.columns.size() != tb.columns.size()) return false;
    for (size_t c = 0; c < ta.columns.size(); ++c)
      if (!columns_equal(ta.columns[c], tb.columns[c])) return false;
  }
  return true;
}

}  // namespace relrisk
