#include "relrisk/features.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

namespace relrisk {

using nlohmann::json;

// ---------------------------------------------------------------------------
// FeatureMatrix

std::string lineage_name(Lineage lineage) {
  switch (lineage) {
    case Lineage::raw: return "raw";
    case Lineage::engineered: return "engineered";
    case Lineage::target_encoded: return "target-encoded";
    case Lineage::scaled: return "scaled";
  }
  return "?";
}

int FeatureMatrix::col_index(const std::string& name) const {
  for (size_t c = 0; c < columns.size(); ++c)
    if (columns[c].name == name) return static_cast<int>(c);
  return -1;
}

const FeatureColumn& FeatureMatrix::column(const std::string& name) const {
  const int c = col_index(name);
  if (c < 0) throw DataError("feature matrix has no column '" + name + "'");
  return columns[static_cast<size_t>(c)];
}

std::vector<size_t> FeatureMatrix::numeric_column_indices() const {
  std::vector<size_t> out;
  for (size_t c = 0; c < columns.size(); ++c)
    if (!columns[c].categorical) out.push_back(c);
  return out;
}

void FeatureMatrix::add_column(const FeatureColumn& meta, const std::vector<double>& col_values) {
  if (col_values.size() != n_rows()) throw DataError("add_column: row count mismatch");
  if (col_index(meta.name) >= 0) throw DataError("add_column: duplicate column " + meta.name);
  const size_t old_cols = columns.size();
  std::vector<double> next((old_cols + 1) * n_rows());
  for (size_t r = 0; r < n_rows(); ++r) {
    std::copy(values.begin() + r * old_cols, values.begin() + (r + 1) * old_cols,
              next.begin() + r * (old_cols + 1));
    next[r * (old_cols + 1) + old_cols] = col_values[r];
  }
  values = std::move(next);
  columns.push_back(meta);
}

void FeatureMatrix::drop_columns(const std::vector<std::string>& names) {
  std::vector<bool> drop(columns.size(), false);
  for (const auto& name : names) {
    const int c = col_index(name);
    if (c < 0) throw DataError("drop_columns: no column '" + name + "'");
    drop[static_cast<size_t>(c)] = true;
  }
  std::vector<FeatureColumn> kept_meta;
  std::vector<size_t> kept_idx;
  for (size_t c = 0; c < columns.size(); ++c) {
    if (!drop[c]) {
      kept_meta.push_back(columns[c]);
      kept_idx.push_back(c);
    }
  }
  std::vector<double> next(kept_idx.size() * n_rows());
  for (size_t r = 0; r < n_rows(); ++r)
    for (size_t k = 0; k < kept_idx.size(); ++k) next[r * kept_idx.size() + k] = at(r, kept_idx[k]);
  values = std::move(next);
  columns = std::move(kept_meta);
}

// ---------------------------------------------------------------------------
// EDA

double quantile_type7(const std::vector<double>& sorted_values, double q) {
  const size_t n = sorted_values.size();
  if (n == 0) throw DataError("quantile of empty sample");
  if (n == 1) return sorted_values[0];
  const double h = q * static_cast<double>(n - 1);
  const size_t lo = static_cast<size_t>(std::floor(h));
  if (lo + 1 >= n) return sorted_values[n - 1];
  const double frac = h - static_cast<double>(lo);
  return sorted_values[lo] + frac * (sorted_values[lo + 1] - sorted_values[lo]);
}

namespace {

std::vector<double> present_values(const FeatureMatrix& fm, size_t col) {
  std::vector<double> out;
  out.reserve(fm.n_rows());
  for (size_t r = 0; r < fm.n_rows(); ++r) {
    const double v = fm.at(r, col);
    if (!is_missing(v)) out.push_back(v);
  }
  return out;
}

// Adjusted Fisher-Pearson skewness with the (n-1)(n-2) correction.
double adjusted_skewness(const std::vector<double>& xs) {
  const size_t n = xs.size();
  if (n < 3) return 0.0;
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(n);
  double m2 = 0.0, m3 = 0.0;
  for (double x : xs) {
    const double d = x - mean;
    m2 += d * d;
    m3 += d * d * d;
  }
  m2 /= static_cast<double>(n);
  m3 /= static_cast<double>(n);
  if (m2 <= 0.0) return 0.0;
  const double g1 = m3 / std::pow(m2, 1.5);
  const double nn = static_cast<double>(n);
  return g1 * std::sqrt(nn * (nn - 1.0)) / (nn - 2.0);
}

double iqr_outlier_fraction(std::vector<double> xs) {
  if (xs.empty()) return 0.0;
  std::sort(xs.begin(), xs.end());
  const double q1 = quantile_type7(xs, 0.25);
  const double q3 = quantile_type7(xs, 0.75);
  const double iqr = q3 - q1;
  const double lo = q1 - 1.5 * iqr;
  const double hi = q3 + 1.5 * iqr;
  size_t out = 0;
  for (double x : xs) out += (x < lo || x > hi);
  return static_cast<double>(out) / static_cast<double>(xs.size());
}

}  // namespace

EdaReport eda_profile(const FeatureMatrix& fm, const std::vector<int>& labels) {
  EdaReport report;
  report.n_rows = fm.n_rows();
  for (size_t c : fm.numeric_column_indices()) {
    EdaColumn col;
    col.name = fm.columns[c].name;
    auto xs = present_values(fm, c);
    col.n_present = xs.size();
    col.missing_rate = fm.n_rows() == 0
                           ? 0.0
                           : 1.0 - static_cast<double>(xs.size()) / static_cast<double>(fm.n_rows());
    if (!xs.empty()) {
      double mean = 0.0;
      for (double x : xs) mean += x;
      mean /= static_cast<double>(xs.size());
      double var = 0.0;
      for (double x : xs) var += (x - mean) * (x - mean);
      var /= static_cast<double>(xs.size());
      col.mean = mean;
      col.stddev = std::sqrt(var);
      col.skewness = adjusted_skewness(xs);
      col.outlier_fraction = iqr_outlier_fraction(xs);
    }
    report.columns.push_back(std::move(col));
  }
  if (!labels.empty()) {
    double pos = 0.0;
    for (int y : labels) pos += y;
    report.label_positive_rate = pos / static_cast<double>(labels.size());
  }
  return report;
}

size_t EdaReport::count_missing_above(double threshold) const {
  size_t n = 0;
  for (const auto& c : columns) n += (c.missing_rate > threshold);
  return n;
}

size_t EdaReport::count_abs_skew_above(double threshold) const {
  size_t n = 0;
  for (const auto& c : columns) n += (std::abs(c.skewness) > threshold);
  return n;
}

std::string EdaReport::to_json() const {
  json j;
  j["n_rows"] = n_rows;
  j["label_positive_rate"] = label_positive_rate;
  j["columns"] = json::array();
  for (const auto& c : columns) {
    j["columns"].push_back({{"name", c.name},
                            {"missing_rate", c.missing_rate},
                            {"skewness", c.skewness},
                            {"outlier_fraction", c.outlier_fraction},
                            {"mean", c.mean},
                            {"stddev", c.stddev},
                            {"n_present", c.n_present}});
  }
  return j.dump(2);
}

std::string EdaReport::to_text() const {
  std::ostringstream out;
  out << "== eda profile: " << n_rows << " rows, " << columns.size() << " numeric columns ==\n";
  out << "label positive rate: " << fmt_fixed(label_positive_rate, 4) << "\n";
  out << "columns with missing rate > 0.80: " << count_missing_above(0.80) << "\n";
  out << "columns with |skew| > 5: " << count_abs_skew_above(5.0) << "\n";
  for (const auto& c : columns) {
    out << c.name << ": missing " << fmt_fixed(c.missing_rate, 4) << ", skew "
        << fmt_fixed(c.skewness, 3) << ", outliers " << fmt_fixed(c.outlier_fraction, 4) << "\n";
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Feature engineering

namespace {

struct ColumnsBuilder {
  size_t n_rows;
  std::vector<FeatureColumn> meta;
  std::vector<std::vector<double>> cols;

  explicit ColumnsBuilder(size_t n) : n_rows(n) {}

  std::vector<double>& add(const std::string& name, Lineage lineage) {
    meta.push_back({name, lineage, false, {}});
    cols.emplace_back(n_rows, kMissing);
    return cols.back();
  }

  std::vector<double>& add_categorical(const std::string& name,
                                       const std::vector<std::string>& dict) {
    meta.push_back({name, Lineage::raw, true, dict});
    cols.emplace_back(n_rows, kMissing);
    return cols.back();
  }

  FeatureMatrix materialize(std::vector<int64_t> row_ids) const {
    FeatureMatrix fm;
    fm.row_ids = std::move(row_ids);
    fm.columns = meta;
    fm.values.resize(n_rows * cols.size());
    for (size_t r = 0; r < n_rows; ++r)
      for (size_t c = 0; c < cols.size(); ++c) fm.values[r * cols.size() + c] = cols[c][r];
    return fm;
  }
};

double safe_ratio(double num, double den) {
  if (is_missing(num) || is_missing(den) || den == 0.0) return kMissing;
  return num / den;
}

// Streaming per-customer aggregates over non-missing values.
struct Agg {
  double sum = 0.0;
  double sumsq = 0.0;
  double max = 0.0;
  size_t n = 0;

  void push(double v) {
    if (is_missing(v)) return;
    if (n == 0 || v > max) max = v;
    sum += v;
    sumsq += v * v;
    ++n;
  }
  double mean() const { return n == 0 ? kMissing : sum / static_cast<double>(n); }
  double maxv() const { return n == 0 ? kMissing : max; }
  // Sample standard deviation; needs at least two values.
  double stddev() const {
    if (n < 2) return kMissing;
    const double m = sum / static_cast<double>(n);
    const double ss = std::max(0.0, sumsq - static_cast<double>(n) * m * m);
    return std::sqrt(ss / static_cast<double>(n - 1));
  }
};

// Maps each row of `table` to an application row, resolving through
// previous_application when the table lacks SK_ID_CURR. Orphans map to -1
// and are excluded from aggregates.
std::vector<int64_t> rows_to_customer(const RelationalDataset& ds, const Table& table,
                                      const std::unordered_map<int64_t, size_t>& app_row,
                                      const std::unordered_map<int64_t, size_t>& prev_row) {
  std::vector<int64_t> out(table.n_rows, -1);
  if (const Column* curr = table.find("SK_ID_CURR")) {
    for (size_t r = 0; r < table.n_rows; ++r) {
      auto it = app_row.find(curr->keys[r]);
      if (it != app_row.end()) out[r] = static_cast<int64_t>(it->second);
    }
    return out;
  }
  const Column* prev_key = table.find("SK_ID_PREV");
  if (!prev_key) return out;
  const Table& prev = ds.table("previous_application");
  const Column& prev_curr = prev.col("SK_ID_CURR");
  for (size_t r = 0; r < table.n_rows; ++r) {
    auto it = prev_row.find(prev_key->keys[r]);
    if (it == prev_row.end()) continue;
    auto jt = app_row.find(prev_curr.keys[it->second]);
    if (jt != app_row.end()) out[r] = static_cast<int64_t>(jt->second);
  }
  return out;
}

struct ChildSpec {
  const char* table;
  const char* prefix;
};

}  // namespace

FeatureMatrix engineer_features(const RelationalDataset& ds) {
  const Table& app = ds.table(ds.application_table);
  const auto& schema = ds.table_schema(ds.application_table);
  const size_t n = app.n_rows;

  std::unordered_map<int64_t, size_t> app_row;
  const auto& customer_keys = ds.customer_ids();
  app_row.reserve(n * 2);
  for (size_t r = 0; r < n; ++r) app_row.emplace(customer_keys[r], r);

  std::unordered_map<int64_t, size_t> prev_row;
  {
    const Table& prev = ds.table("previous_application");
    const Column& pk = prev.col("SK_ID_PREV");
    prev_row.reserve(prev.n_rows * 2);
    for (size_t r = 0; r < prev.n_rows; ++r) prev_row.emplace(pk.keys[r], r);
  }

  ColumnsBuilder b(n);

  // Raw application columns; keys and the label stay out of the matrix.
  for (const auto& col : app.columns) {
    if (col.kind == ColumnKind::key || col.name == ds.label_column) continue;
    if (col.kind == ColumnKind::numeric) {
      auto& dst = b.add(col.name, Lineage::raw);
      for (size_t r = 0; r < n; ++r) dst[r] = col.nums[r];
    } else {
      auto& dst = b.add_categorical(col.name, col.dict);
      for (size_t r = 0; r < n; ++r)
        dst[r] = col.codes[r] < 0 ? kMissing : static_cast<double>(col.codes[r]);
    }
  }
  (void)schema;

  // Affordability ratios.
  const Column* amt_credit = app.find("AMT_CREDIT");
  const Column* amt_income = app.find("AMT_INCOME_TOTAL");
  const Column* amt_annuity = app.find("AMT_ANNUITY");
  const Column* cnt_fam = app.find("CNT_FAM_MEMBERS");
  if (amt_credit && amt_income) {
    auto& dst = b.add("CREDIT_INCOME", Lineage::engineered);
    for (size_t r = 0; r < n; ++r) dst[r] = safe_ratio(amt_credit->nums[r], amt_income->nums[r]);
  }
  if (amt_annuity && amt_income) {
    auto& dst = b.add("ANNUITY_INCOME", Lineage::engineered);
    for (size_t r = 0; r < n; ++r) dst[r] = safe_ratio(amt_annuity->nums[r], amt_income->nums[r]);
  }
  if (amt_credit && cnt_fam) {
    auto& dst = b.add("LOAN_PER_FAM", Lineage::engineered);
    for (size_t r = 0; r < n; ++r) dst[r] = safe_ratio(amt_credit->nums[r], cnt_fam->nums[r]);
  }

  // Repayment behavior from installments.
  {
    const Table& ins = ds.table("installments_payments");
    const auto to_app = rows_to_customer(ds, ins, app_row, prev_row);
    const Column* pay = ins.find("AMT_PAYMENT");
    const Column* due = ins.find("AMT_INSTALMENT");
    const Column* due_day = ins.find("DAYS_INSTALMENT");
    const Column* paid_day = ins.find("DAYS_ENTRY_PAYMENT");

    std::vector<Agg> ratio(n);
    std::vector<size_t> late(n, 0), dated(n, 0);
    for (size_t r = 0; r < ins.n_rows; ++r) {
      if (to_app[r] < 0) continue;
      const size_t c = static_cast<size_t>(to_app[r]);
      if (pay && due) ratio[c].push(safe_ratio(pay->nums[r], due->nums[r]));
      if (due_day && paid_day && !is_missing(due_day->nums[r]) && !is_missing(paid_day->nums[r])) {
        ++dated[c];
        late[c] += paid_day->nums[r] > due_day->nums[r];
      }
    }
    if (pay && due) {
      auto& mean = b.add("INS_PAYMENT_RATIO_MEAN", Lineage::engineered);
      auto& sd = b.add("INS_PAYMENT_RATIO_STD", Lineage::engineered);
      for (size_t r = 0; r < n; ++r) {
        mean[r] = ratio[r].mean();
        sd[r] = ratio[r].stddev();
      }
      if (due_day && paid_day) {
        auto& late_rate = b.add("INS_LATE_RATE", Lineage::engineered);
        auto& burden = b.add("INS_PAYMENT_BURDEN", Lineage::engineered);
        for (size_t r = 0; r < n; ++r) {
          late_rate[r] = dated[r] == 0 ? kMissing
                                       : static_cast<double>(late[r]) / static_cast<double>(dated[r]);
          burden[r] = (is_missing(ratio[r].mean()) || is_missing(late_rate[r]))
                          ? kMissing
                          : ratio[r].mean() * late_rate[r];
        }
      }
    }
  }

  // Revolving utilization from credit cards.
  {
    const Table& cc = ds.table("credit_card_balance");
    const auto to_app = rows_to_customer(ds, cc, app_row, prev_row);
    const Column* bal = cc.find("AMT_BALANCE");
    const Column* lim = cc.find("AMT_CREDIT_LIMIT_ACTUAL");
    if (bal && lim) {
      std::vector<Agg> util(n);
      for (size_t r = 0; r < cc.n_rows; ++r) {
        if (to_app[r] < 0) continue;
        util[static_cast<size_t>(to_app[r])].push(safe_ratio(bal->nums[r], lim->nums[r]));
      }
      auto& mean = b.add("CC_UTILIZATION_MEAN", Lineage::engineered);
      auto& sd = b.add("CC_UTILIZATION_STD", Lineage::engineered);
      for (size_t r = 0; r < n; ++r) {
        mean[r] = util[r].mean();
        sd[r] = util[r].stddev();
      }
    }
  }

  // Generic child-table roll-ups: mean and max of every numeric column,
  // plus a per-customer row count.
  const ChildSpec children[] = {{"bureau", "BUREAU_"},
                                {"previous_application", "PREV_"},
                                {"installments_payments", "INS_"},
                                {"pos_cash_balance", "POS_"},
                                {"credit_card_balance", "CC_"}};
  for (const auto& spec : children) {
    const Table& child = ds.table(spec.table);
    const auto to_app = rows_to_customer(ds, child, app_row, prev_row);

    auto& count = b.add(std::string(spec.prefix) + "COUNT", Lineage::engineered);
    std::fill(count.begin(), count.end(), 0.0);
    for (size_t r = 0; r < child.n_rows; ++r)
      if (to_app[r] >= 0) count[static_cast<size_t>(to_app[r])] += 1.0;

    for (const auto& col : child.columns) {
      if (col.kind != ColumnKind::numeric) continue;
      std::vector<Agg> agg(n);
      for (size_t r = 0; r < child.n_rows; ++r) {
        if (to_app[r] < 0) continue;
        agg[static_cast<size_t>(to_app[r])].push(col.nums[r]);
      }
      auto& mean = b.add(std::string(spec.prefix) + col.name + "_MEAN", Lineage::engineered);
      auto& mx = b.add(std::string(spec.prefix) + col.name + "_MAX", Lineage::engineered);
      for (size_t r = 0; r < n; ++r) {
        mean[r] = agg[r].mean();
        mx[r] = agg[r].maxv();
      }
    }
  }

  return b.materialize(customer_keys);
}

// ---------------------------------------------------------------------------
// Target encoding

void target_encode(FeatureMatrix& fm, const std::string& column, const std::vector<int>& labels,
                   const std::vector<size_t>& train_rows) {
  const int ci = fm.col_index(column);
  if (ci < 0) throw DataError("target_encode: no column '" + column + "'");
  const size_t c = static_cast<size_t>(ci);
  if (!fm.columns[c].categorical) throw DataError("target_encode: column not categorical: " + column);
  if (labels.size() != fm.n_rows()) throw DataError("target_encode: label length mismatch");
  if (train_rows.empty()) throw DataError("target_encode: empty train set");

  auto code_of = [&](size_t r) -> int64_t {
    const double v = fm.at(r, c);
    return is_missing(v) ? -1 : static_cast<int64_t>(v);
  };

  std::unordered_map<int64_t, std::pair<double, size_t>> stats;  // code -> (pos, n)
  double global_pos = 0.0;
  for (size_t r : train_rows) {
    auto& s = stats[code_of(r)];
    s.first += labels[r];
    s.second += 1;
    global_pos += labels[r];
  }
  const double global_rate = global_pos / static_cast<double>(train_rows.size());

  std::vector<double> encoded(fm.n_rows());
  for (size_t r = 0; r < fm.n_rows(); ++r) {
    auto it = stats.find(code_of(r));
    encoded[r] = (it == stats.end() || it->second.second == 0)
                     ? global_rate
                     : it->second.first / static_cast<double>(it->second.second);
  }
  fm.add_column({column + "_TE", Lineage::target_encoded, false, {}}, encoded);
}

// ---------------------------------------------------------------------------
// Preprocessing

double signed_log1p(double x) {
  if (is_missing(x)) return kMissing;
  return x >= 0.0 ? std::log1p(x) : -std::log1p(-x);
}

namespace {

bool wants_log_robust(const std::string& name) {
  return name.find("AMT") != std::string::npos || name.find("SUM") != std::string::npos ||
         name.find("RATIO") != std::string::npos;
}

double median_of(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  return quantile_type7(xs, 0.5);
}

}  // namespace

PreprocessState fit_preprocess(const FeatureMatrix& fm, const std::vector<size_t>& train_rows,
                               const PreprocessConfig& config) {
  if (train_rows.empty()) throw DataError("fit_preprocess: empty train set");
  PreprocessState state;
  state.config = config;

  for (size_t c = 0; c < fm.n_cols(); ++c) {
    const auto& meta = fm.columns[c];
    if (meta.categorical) {
      state.dropped_columns.push_back(meta.name);
      continue;
    }
    std::vector<double> train_values;
    train_values.reserve(train_rows.size());
    for (size_t r : train_rows) {
      const double v = fm.at(r, c);
      if (!is_missing(v)) train_values.push_back(v);
    }
    const double missing_rate =
        1.0 - static_cast<double>(train_values.size()) / static_cast<double>(train_rows.size());
    if (missing_rate > config.drop_missing_above) {
      state.dropped_columns.push_back(meta.name);
      continue;
    }

    ColumnScale scale;
    scale.name = meta.name;
    scale.median = median_of(train_values);
    scale.log_robust = wants_log_robust(meta.name);

    // Imputed, transformed train sample for the scale statistics.
    std::vector<double> xs;
    xs.reserve(train_rows.size());
    for (size_t r : train_rows) {
      double v = fm.at(r, c);
      if (is_missing(v)) v = scale.median;
      if (scale.log_robust) v = signed_log1p(v);
      xs.push_back(v);
    }
    if (scale.log_robust) {
      std::vector<double> sorted = xs;
      std::sort(sorted.begin(), sorted.end());
      scale.center = quantile_type7(sorted, 0.5);
      const double iqr = quantile_type7(sorted, 0.75) - quantile_type7(sorted, 0.25);
      scale.scale = iqr > 0.0 ? iqr : 1.0;
    } else {
      double mean = 0.0;
      for (double x : xs) mean += x;
      mean /= static_cast<double>(xs.size());
      double var = 0.0;
      for (double x : xs) var += (x - mean) * (x - mean);
      var /= static_cast<double>(xs.size());
      const double sd = std::sqrt(var);
      scale.center = config.center_standardized ? mean : 0.0;
      scale.scale = sd > 0.0 ? sd : 1.0;
    }
    state.scales.push_back(std::move(scale));
  }
  return state;
}

FeatureMatrix apply_preprocess(const PreprocessState& state, const FeatureMatrix& fm) {
  // Strict column accounting: the matrix must carry exactly the fitted
  // columns plus the recorded drops.
  for (const auto& scale : state.scales) {
    const int c = fm.col_index(scale.name);
    if (c < 0) throw DataError("apply_preprocess: matrix lacks fitted column " + scale.name);
    if (fm.columns[static_cast<size_t>(c)].categorical)
      throw DataError("apply_preprocess: fitted column is categorical: " + scale.name);
  }
  for (const auto& meta : fm.columns) {
    bool known = false;
    for (const auto& scale : state.scales) known |= scale.name == meta.name;
    for (const auto& name : state.dropped_columns) known |= name == meta.name;
    if (!known) throw DataError("apply_preprocess: unknown column " + meta.name);
  }

  FeatureMatrix out;
  out.row_ids = fm.row_ids;
  out.columns.reserve(state.scales.size());
  for (const auto& scale : state.scales)
    out.columns.push_back({scale.name, Lineage::scaled, false, {}});
  out.values.resize(fm.n_rows() * state.scales.size());

  for (size_t k = 0; k < state.scales.size(); ++k) {
    const auto& scale = state.scales[k];
    const size_t src = static_cast<size_t>(fm.col_index(scale.name));
    for (size_t r = 0; r < fm.n_rows(); ++r) {
      double v = fm.at(r, src);
      if (is_missing(v)) v = scale.median;
      if (scale.log_robust) v = signed_log1p(v);
      out.values[r * state.scales.size() + k] = (v - scale.center) / scale.scale;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// PCA

void jacobi_eigh(std::vector<double> a, size_t m, std::vector<double>& eigenvalues,
                 std::vector<double>& eigenvectors) {
  if (a.size() != m * m) throw DataError("jacobi_eigh: matrix size mismatch");
  std::vector<double> v(m * m, 0.0);
  for (size_t i = 0; i < m; ++i) v[i * m + i] = 1.0;

  auto off_norm = [&] {
    double s = 0.0;
    for (size_t p = 0; p < m; ++p)
      for (size_t q = p + 1; q < m; ++q) s += a[p * m + q] * a[p * m + q];
    return s;
  };
  double frob = 0.0;
  for (double x : a) frob += x * x;
  const double tol = 1e-30 * std::max(frob, 1e-300);

  for (int sweep = 0; sweep < 100 && off_norm() > tol; ++sweep) {
    for (size_t p = 0; p < m; ++p) {
      for (size_t q = p + 1; q < m; ++q) {
        const double apq = a[p * m + q];
        if (apq == 0.0) continue;
        const double app = a[p * m + p];
        const double aqq = a[q * m + q];
        const double theta = (aqq - app) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;

        for (size_t i = 0; i < m; ++i) {
          const double aip = a[i * m + p];
          const double aiq = a[i * m + q];
          a[i * m + p] = c * aip - s * aiq;
          a[i * m + q] = s * aip + c * aiq;
        }
        for (size_t i = 0; i < m; ++i) {
          const double api = a[p * m + i];
          const double aqi = a[q * m + i];
          a[p * m + i] = c * api - s * aqi;
          a[q * m + i] = s * api + c * aqi;
        }
        for (size_t i = 0; i < m; ++i) {
          const double vip = v[i * m + p];
          const double viq = v[i * m + q];
          v[i * m + p] = c * vip - s * viq;
          v[i * m + q] = s * vip + c * viq;
        }
      }
    }
  }

  // Sort descending by eigenvalue; eigenvectors returned as rows.
  std::vector<size_t> order(m);
  for (size_t i = 0; i < m; ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](size_t x, size_t y) { return a[x * m + x] > a[y * m + y]; });
  eigenvalues.assign(m, 0.0);
  eigenvectors.assign(m * m, 0.0);
  for (size_t k = 0; k < m; ++k) {
    eigenvalues[k] = a[order[k] * m + order[k]];
    for (size_t i = 0; i < m; ++i) eigenvectors[k * m + i] = v[i * m + order[k]];
  }
}

PcaState fit_pca(const FeatureMatrix& fm, const std::vector<size_t>& train_rows,
                 double variance_target) {
  if (variance_target <= 0.0 || variance_target > 1.0)
    throw ConfigError("fit_pca: variance_target must be in (0,1]");
  if (train_rows.size() < 2) throw DataError("fit_pca: need at least 2 train rows");
  const size_t m = fm.n_cols();
  for (const auto& meta : fm.columns)
    if (meta.categorical) throw DataError("fit_pca: categorical column " + meta.name);

  PcaState state;
  state.n_features = m;
  state.mean.assign(m, 0.0);
  for (size_t r : train_rows) {
    for (size_t c = 0; c < m; ++c) {
      const double x = fm.at(r, c);
      if (is_missing(x)) throw DataError("fit_pca: missing value in column " + fm.columns[c].name);
      state.mean[c] += x;
    }
  }
  for (double& x : state.mean) x /= static_cast<double>(train_rows.size());

  std::vector<double> cov(m * m, 0.0);
  for (size_t r : train_rows) {
    for (size_t i = 0; i < m; ++i) {
      const double di = fm.at(r, i) - state.mean[i];
      for (size_t j = i; j < m; ++j) cov[i * m + j] += di * (fm.at(r, j) - state.mean[j]);
    }
  }
  const double denom = static_cast<double>(train_rows.size() - 1);
  for (size_t i = 0; i < m; ++i)
    for (size_t j = i; j < m; ++j) {
      cov[i * m + j] /= denom;
      cov[j * m + i] = cov[i * m + j];
    }

  std::vector<double> vectors;
  jacobi_eigh(cov, m, state.eigenvalues, vectors);
  for (double& ev : state.eigenvalues) ev = std::max(ev, 0.0);

  double total = 0.0;
  for (double ev : state.eigenvalues) total += ev;
  if (total <= 0.0) throw DataError("fit_pca: zero-variance matrix");

  double cum = 0.0;
  size_t k = 0;
  while (k < m) {
    cum += state.eigenvalues[k];
    ++k;
    if (cum / total >= variance_target) break;
  }
  state.n_components = k;
  state.components.assign(vectors.begin(), vectors.begin() + k * m);
  return state;
}

FeatureMatrix apply_pca(const PcaState& state, const FeatureMatrix& fm) {
  if (fm.n_cols() != state.n_features) throw DataError("apply_pca: column count mismatch");
  FeatureMatrix out;
  out.row_ids = fm.row_ids;
  for (size_t k = 0; k < state.n_components; ++k) {
    char name[16];
    std::snprintf(name, sizeof(name), "PC_%03zu", k);
    out.columns.push_back({name, Lineage::scaled, false, {}});
  }
  out.values.assign(fm.n_rows() * state.n_components, 0.0);
  for (size_t r = 0; r < fm.n_rows(); ++r) {
    for (size_t k = 0; k < state.n_components; ++k) {
      double dot = 0.0;
      for (size_t c = 0; c < state.n_features; ++c) {
        const double x = fm.at(r, c);
        if (is_missing(x)) throw DataError("apply_pca: missing value");
        dot += (x - state.mean[c]) * state.components[k * state.n_features + c];
      }
      out.values[r * state.n_components + k] = dot;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Correlation pruning and twins

std::vector<std::string> correlated_columns(const FeatureMatrix& fm,
                                            const std::vector<size_t>& train_rows,
                                            double threshold) {
  const auto numeric = fm.numeric_column_indices();
  std::vector<bool> dropped(numeric.size(), false);
  std::vector<std::string> out;

  for (size_t j = 1; j < numeric.size(); ++j) {
    for (size_t i = 0; i < j && !dropped[j]; ++i) {
      if (dropped[i]) continue;
      double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
      size_t n = 0;
      for (size_t r : train_rows) {
        const double x = fm.at(r, numeric[i]);
        const double y = fm.at(r, numeric[j]);
        if (is_missing(x) || is_missing(y)) continue;
        sx += x;
        sy += y;
        sxx += x * x;
        syy += y * y;
        sxy += x * y;
        ++n;
      }
      if (n < 3) continue;
      const double nn = static_cast<double>(n);
      const double cov = sxy - sx * sy / nn;
      const double vx = sxx - sx * sx / nn;
      const double vy = syy - sy * sy / nn;
      if (vx <= 0.0 || vy <= 0.0) continue;
      const double r2 = cov / std::sqrt(vx * vy);
      if (std::abs(r2) > threshold) {
        dropped[j] = true;
        out.push_back(fm.columns[numeric[j]].name);
      }
    }
  }
  return out;
}

void add_log1p_twins(FeatureMatrix& fm, const std::vector<std::string>& names) {
  for (const auto& name : names) {
    const int ci = fm.col_index(name);
    if (ci < 0) throw DataError("add_log1p_twins: no column '" + name + "'");
    std::vector<double> twin(fm.n_rows());
    for (size_t r = 0; r < fm.n_rows(); ++r)
      twin[r] = signed_log1p(fm.at(r, static_cast<size_t>(ci)));
    fm.add_column({"LOG1P_" + name, Lineage::engineered, false, {}}, twin);
  }
}

std::vector<std::string> heavy_tailed_columns(const FeatureMatrix& fm,
                                              const std::vector<size_t>& train_rows,
                                              double skew_threshold) {
  std::vector<std::string> out;
  for (size_t c : fm.numeric_column_indices()) {
    std::vector<double> xs;
    for (size_t r : train_rows) {
      const double v = fm.at(r, c);
      if (!is_missing(v)) xs.push_back(v);
    }
    if (std::abs(adjusted_skewness(xs)) > skew_threshold) out.push_back(fm.columns[c].name);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

std::string PreprocessState::to_json() const {
  json j;
  j["config"] = {{"drop_missing_above", config.drop_missing_above},
                 {"center_standardized", config.center_standardized}};
  j["dropped_columns"] = dropped_columns;
  j["scales"] = json::array();
  for (const auto& s : scales) {
    j["scales"].push_back({{"name", s.name},
                           {"median", s.median},
                           {"log_robust", s.log_robust},
                           {"center", s.center},
                           {"scale", s.scale}});
  }
  if (pca) {
    j["pca"] = {{"mean", pca->mean},
                {"components", pca->components},
                {"eigenvalues", pca->eigenvalues},
                {"n_components", pca->n_components},
                {"n_features", pca->n_features}};
  }
  return j.dump(2);
}

PreprocessState PreprocessState::from_json(const std::string& text) {
  json j = json::parse(text);
  PreprocessState state;
  state.config.drop_missing_above = j["config"]["drop_missing_above"].get<double>();
  state.config.center_standardized = j["config"]["center_standardized"].get<bool>();
  state.dropped_columns = j["dropped_columns"].get<std::vector<std::string>>();
  for (const auto& s : j["scales"]) {
    ColumnScale scale;
    scale.name = s["name"].get<std::string>();
    scale.median = s["median"].get<double>();
    scale.log_robust = s["log_robust"].get<bool>();
    scale.center = s["center"].get<double>();
    scale.scale = s["scale"].get<double>();
    state.scales.push_back(std::move(scale));
  }
  if (j.contains("pca")) {
    PcaState pca;
    pca.mean = j["pca"]["mean"].get<std::vector<double>>();
    pca.components = j["pca"]["components"].get<std::vector<double>>();
    pca.eigenvalues = j["pca"]["eigenvalues"].get<std::vector<double>>();
    pca.n_components = j["pca"]["n_components"].get<size_t>();
    pca.n_features = j["pca"]["n_features"].get<size_t>();
    state.pca = std::move(pca);
  }
  return state;
}

}  // namespace relrisk
