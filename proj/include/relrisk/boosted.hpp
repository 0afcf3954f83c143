#pragma once

// Tabular models: gradient-boosted decision trees with second-order (Newton)
// boosting on the logistic loss, an L2-regularized logistic-regression
// baseline fit with L-BFGS, isotonic calibration via pool-adjacent-violators,
// and the hybrid variant that appends graph embeddings as extra columns.
//
// Trees grow leaf-wise (best first) over exact sorted feature scans; missing
// values route to whichever side of each split maximizes gain, and the chosen
// direction is stored per node so inference follows the same path.

#include <cstdint>
#include <string>
#include <vector>

#include "relrisk/common.hpp"
#include "relrisk/features.hpp"
#include "relrisk/gnn.hpp"

namespace relrisk {

// ---------------------------------------------------------------------------
// Stratified cross-validation folds.

struct FoldPlan {
  int k = 0;
  std::vector<int> fold_of;  // per row, in [0, k)

  std::vector<uint32_t> fold_rows(int fold) const;      // rows assigned to `fold`
  std::vector<uint32_t> complement_rows(int fold) const;  // rows outside `fold`
};

// Per-class shuffled round-robin assignment. Classes are processed in label
// order and each class's round-robin continues where the previous one left
// off, so fold sizes differ by at most one row and per-fold positive counts
// by at most one positive. Labels must be binary with both classes present.
FoldPlan stratified_folds(const std::vector<int8_t>& labels, int k, uint64_t seed);

// ---------------------------------------------------------------------------
// GBDT.

struct GbdtParams {
  double learning_rate = 0.02;
  int num_leaves = 34;
  int min_data_in_leaf = 100;
  double bagging_fraction = 0.85;   // per-iteration row subsample, in (0, 1]
  double feature_fraction = 0.85;   // per-tree feature subsample, in (0, 1]
  double lambda_l1 = 1.0;
  double lambda_l2 = 2.0;
  int max_iterations = 10000;
  int early_stopping_rounds = 200;  // on validation ROC-AUC; <=0 disables
  double scale_pos_weight = 0.0;    // <=0 derives train negatives/positives
  uint64_t seed = 42;
};

struct TreeNode {
  int feature = -1;      // column index into the feature matrix; -1 for leaf
  double threshold = 0.0;  // midpoint between adjacent observed values
  bool missing_left = true;  // where rows with a missing feature value go
  int left = -1;
  int right = -1;
  double value = 0.0;    // leaf output, learning rate already applied
};

struct Tree {
  std::vector<TreeNode> nodes;  // node 0 is the root

  int n_leaves() const;
  double predict_row(const double* row) const;
};

struct GbdtModel {
  GbdtParams params;             // effective values (resolved scale_pos_weight)
  double base_score = 0.0;       // log-odds of the weighted train positive rate
  std::vector<std::string> feature_names;  // full column layout at fit time
  std::vector<Tree> trees;       // truncated to best_iteration
  int best_iteration = 0;        // number of trees kept
  std::vector<double> val_auc_history;  // per original iteration; empty without val
};

// Train on X rows `train_rows`, early-stopping on `val_rows` (pass an empty
// vector to disable validation). Labels are 0/1 over all X rows. Categorical
// columns are ignored; trees split only on numeric columns. Throws DataError
// for non-binary labels, empty or single-class training rows, single-class
// validation rows, or a training slice where every numeric feature is missing
// on every row; ConfigError for out-of-range parameters.
GbdtModel fit_gbdt(const FeatureMatrix& X, const std::vector<int8_t>& y,
                   const std::vector<uint32_t>& train_rows,
                   const std::vector<uint32_t>& val_rows, const GbdtParams& params);

// Probability of the positive class for every row of X. The column layout
// (names, in order) must match the layout seen at fit time.
std::vector<double> predict_gbdt(const GbdtModel& model, const FeatureMatrix& X);

// Margin (log-odds) version of predict_gbdt.
std::vector<double> predict_gbdt_margin(const GbdtModel& model, const FeatureMatrix& X);

// Human-auditable JSON dump of the full ensemble, and its inverse.
std::string gbdt_to_json(const GbdtModel& model);
GbdtModel gbdt_from_json(const std::string& text);

// ---------------------------------------------------------------------------
// Logistic regression.

struct LogisticConfig {
  double C = 1.0;        // inverse regularization strength
  int max_iterations = 1000;
  double tolerance = 1e-6;  // max-norm of the gradient
  int memory = 10;       // L-BFGS history length
  bool fit_intercept = true;
};

struct LinearModel {
  std::vector<double> weights;  // one per column of the fit matrix
  double intercept = 0.0;
  bool converged = false;       // gradient max-norm reached tolerance
  int iterations = 0;
  double final_grad_norm = 0.0;
  std::vector<std::string> feature_names;
};

// Minimizes mean log-loss plus ||w||^2 / (2 C n) over the given rows with
// L-BFGS (two-loop recursion, Armijo backtracking). The intercept is not
// regularized. X must be fully observed on the training rows (DataError on
// missing values); non-convergence is reported through `converged`, never
// silently ignored.
LinearModel fit_logistic(const FeatureMatrix& X, const std::vector<int8_t>& y,
                         const std::vector<uint32_t>& train_rows, const LogisticConfig& cfg);

std::vector<double> predict_logistic(const LinearModel& model, const FeatureMatrix& X);

// ---------------------------------------------------------------------------
// Isotonic calibration.

struct IsotonicModel {
  std::vector<double> x;  // unique training scores, ascending
  std::vector<double> y;  // fitted event rates, non-decreasing

  // Step function: value of the largest knot <= s, clipped to the first knot
  // below the training range.
  double apply(double s) const;
};

// Pool-adjacent-violators on (score, label) pairs; scores are pooled per
// unique value first so the fit is a function of the score. Requires at least
// two distinct scores. Scores should come from out-of-fold predictions so the
// calibrator never sees its own training fit.
IsotonicModel calibrate_isotonic(const std::vector<double>& scores,
                                 const std::vector<int8_t>& labels);

std::vector<double> apply_isotonic(const IsotonicModel& model,
                                   const std::vector<double>& scores);

// ---------------------------------------------------------------------------
// Hybrid: tabular features plus graph embeddings.

// Appends one column per embedding dimension (gnn_emb_000, gnn_emb_001, ...)
// to a copy of X. Embedding rows are matched to X rows by id; every X row id
// must appear in z_row_ids exactly once (DataError otherwise). Tabular cells
// are copied bit-exactly.
FeatureMatrix hybrid_features(const FeatureMatrix& X, const Embeddings& z,
                              const std::vector<int64_t>& z_row_ids);

GbdtModel fit_hybrid(const FeatureMatrix& X, const Embeddings& z,
                     const std::vector<int64_t>& z_row_ids, const std::vector<int8_t>& y,
                     const std::vector<uint32_t>& train_rows,
                     const std::vector<uint32_t>& val_rows, const GbdtParams& params);

}  // namespace relrisk
