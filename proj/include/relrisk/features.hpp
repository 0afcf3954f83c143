#pragma once

// Customer-level feature pipeline: EDA profiling, engineered ratios and
// behavioral aggregates, target encoding, missingness pruning, imputation,
// mixed log-robust / standard scaling, correlation pruning, and PCA.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "relrisk/table.hpp"

namespace relrisk {

enum class Lineage { raw, engineered, target_encoded, scaled };

std::string lineage_name(Lineage lineage);

struct FeatureColumn {
  std::string name;
  Lineage lineage = Lineage::raw;
  bool categorical = false;        // values hold dictionary codes
  std::vector<std::string> dict;   // decode table for categorical columns
};

// Dense row-major matrix, one row per customer, NaN = missing. Categorical
// columns carry interned codes in the value slots plus a decode dictionary;
// models consume only the numeric columns.
struct FeatureMatrix {
  std::vector<int64_t> row_ids;  // SK_ID_CURR, application-table order
  std::vector<FeatureColumn> columns;
  std::vector<double> values;    // n_rows() x n_cols()

  size_t n_rows() const { return row_ids.size(); }
  size_t n_cols() const { return columns.size(); }
  double at(size_t r, size_t c) const { return values[r * columns.size() + c]; }
  double& at(size_t r, size_t c) { return values[r * columns.size() + c]; }

  int col_index(const std::string& name) const;        // -1 when absent
  const FeatureColumn& column(const std::string& name) const;
  std::vector<size_t> numeric_column_indices() const;

  void add_column(const FeatureColumn& meta, const std::vector<double>& col_values);
  void drop_columns(const std::vector<std::string>& names);
};

// ---------------------------------------------------------------------------
// EDA

struct EdaColumn {
  std::string name;
  double missing_rate = 0.0;
  double skewness = 0.0;          // adjusted Fisher-Pearson
  double outlier_fraction = 0.0;  // 1.5 x IQR rule, type-7 quantiles
  double mean = 0.0;
  double stddev = 0.0;
  size_t n_present = 0;
};

struct EdaReport {
  size_t n_rows = 0;
  std::vector<EdaColumn> columns;  // numeric columns only
  double label_positive_rate = 0.0;

  size_t count_missing_above(double threshold) const;
  size_t count_abs_skew_above(double threshold) const;
  std::string to_json() const;
  std::string to_text() const;
};

// Profiles every numeric column; labels give the class-balance line.
EdaReport eda_profile(const FeatureMatrix& fm, const std::vector<int>& labels);

// Type-7 quantile (linear interpolation) over the sorted values.
double quantile_type7(const std::vector<double>& sorted_values, double q);

// ---------------------------------------------------------------------------
// Feature engineering

// Flattens the relational dataset to one row per customer: raw application
// columns (identifiers and the label excluded), affordability ratios
// CREDIT_INCOME / ANNUITY_INCOME / LOAN_PER_FAM, repayment and utilization
// aggregates, and mean/max/count roll-ups of every child-table numeric
// column. Zero or missing denominators yield missing, never +-inf.
FeatureMatrix engineer_features(const RelationalDataset& ds);

// Appends `<column>_TE` holding the train-rows default rate per category.
// Categories absent from the train rows (and rows with missing category,
// when missing never occurs in train) receive the global train rate.
void target_encode(FeatureMatrix& fm, const std::string& column,
                   const std::vector<int>& labels, const std::vector<size_t>& train_rows);

// ---------------------------------------------------------------------------
// Preprocessing

struct PreprocessConfig {
  double drop_missing_above = 0.80;
  // Standard-scaled columns subtract the mean when true; the linear-model
  // pipeline disables centering.
  bool center_standardized = true;
};

struct ColumnScale {
  std::string name;
  double median = 0.0;     // imputation value (raw scale)
  bool log_robust = false; // signed log1p then (x - median) / IQR
  double center = 0.0;     // median (robust) or mean (standard); 0 if uncentered
  double scale = 1.0;      // IQR or std; 1 on degenerate columns
};

struct PcaState {
  std::vector<double> mean;        // per column
  std::vector<double> components;  // k x m row-major (rows = components)
  std::vector<double> eigenvalues; // all m, descending
  size_t n_components = 0;
  size_t n_features = 0;
};

struct PreprocessState {
  PreprocessConfig config;
  std::vector<std::string> dropped_columns;
  std::vector<ColumnScale> scales;  // kept numeric columns, output order
  std::optional<PcaState> pca;

  std::string to_json() const;
  static PreprocessState from_json(const std::string& text);
};

// Fits on train rows only: drops numeric columns whose train missing rate
// exceeds the threshold (and all categorical columns), stores train
// medians, and fits log1p+robust scaling for names containing AMT, SUM, or
// RATIO, standard scaling otherwise. Zero IQR/std degrades to centering
// with scale 1.
PreprocessState fit_preprocess(const FeatureMatrix& fm, const std::vector<size_t>& train_rows,
                               const PreprocessConfig& config);

// Applies a fitted state; the matrix must contain exactly the columns the
// state was fitted on (plus categorical columns, which are dropped).
FeatureMatrix apply_preprocess(const PreprocessState& state, const FeatureMatrix& fm);

// Signed log1p: sign(x) * log1p(|x|); equals log1p(x) for x >= 0.
double signed_log1p(double x);

// ---------------------------------------------------------------------------
// PCA (covariance eigendecomposition via cyclic Jacobi rotations)

// Requires a fully imputed and scaled matrix. Retains the minimal k whose
// cumulative explained variance reaches variance_target. Throws ConfigError
// when variance_target is outside (0, 1], DataError on missing values or a
// zero-variance matrix.
PcaState fit_pca(const FeatureMatrix& fm, const std::vector<size_t>& train_rows,
                 double variance_target);

// Projects onto the retained components; output columns PC_000..PC_k-1.
FeatureMatrix apply_pca(const PcaState& state, const FeatureMatrix& fm);

// Symmetric eigendecomposition helper (exposed for tests): returns
// eigenvalues descending and eigenvectors as rows, for the dense symmetric
// matrix a (m x m, row-major).
void jacobi_eigh(std::vector<double> a, size_t m, std::vector<double>& eigenvalues,
                 std::vector<double>& eigenvectors);

// ---------------------------------------------------------------------------
// Correlation pruning and log1p twins

// Returns the names to drop: for every pair of kept numeric columns with
// |Pearson r| > threshold over pairwise-present train rows, the later
// column (by index) is dropped. Deterministic single pass in column order.
std::vector<std::string> correlated_columns(const FeatureMatrix& fm,
                                            const std::vector<size_t>& train_rows,
                                            double threshold);

// Appends LOG1P_<name> twins (signed log1p) for the named columns.
void add_log1p_twins(FeatureMatrix& fm, const std::vector<std::string>& names);

// Heavy-tailed numeric columns by |skew| > threshold on train rows.
std::vector<std::string> heavy_tailed_columns(const FeatureMatrix& fm,
                                              const std::vector<size_t>& train_rows,
                                              double skew_threshold);

}  // namespace relrisk
