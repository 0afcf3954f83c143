#pragma once

// Ranking, screening, calibration, and fairness metrics, plus the CSV and
// Markdown report emitters. Kernels use exact tie conventions (midranks
// for ROC, score-grouped steps for average precision, ceiling cut with
// stable order for top-k) so they can be checked against brute-force
// oracles to 1e-12.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "relrisk/common.hpp"

namespace relrisk {

struct ScoreReport {
  std::vector<int64_t> row_ids;
  std::vector<double> scores;
  std::vector<int8_t> labels;
  // Group column name -> per-row group value (e.g. gender code, age band).
  std::map<std::string, std::vector<std::string>> groups;
  std::string split;

  size_t size() const { return scores.size(); }
  void validate() const;  // throws DataError on inconsistent lengths/labels
};

struct RankMetrics {
  double roc_auc = 0.0;
  double pr_auc = 0.0;
  double ks = 0.0;
};

// Mann-Whitney midrank ROC-AUC, tie-grouped average precision, and the
// max |TPR - FPR| Kolmogorov-Smirnov statistic. Throws DataError unless
// both classes are present.
RankMetrics rank_metrics(const std::vector<double>& scores, const std::vector<int8_t>& labels);
RankMetrics rank_metrics(const ScoreReport& r);

struct TopKResult {
  size_t k = 0;           // ceil(k_fraction * n)
  size_t positives = 0;   // positives inside the cut
  double precision = 0.0;
  double recall = 0.0;    // NaN when there are no positives overall
};

// Highest ceil(k*n) scores, ties broken by stable row order.
TopKResult topk_screen(const ScoreReport& r, double k_fraction);

struct GroupMetrics {
  std::string group;
  size_t n = 0;
  double prevalence = 0.0;
  bool valid = false;  // both classes present; otherwise metrics are N/A
  double roc_auc = 0.0;
  double pr_auc = 0.0;
};

struct FairnessReport {
  std::string group_column;
  std::vector<GroupMetrics> groups;  // sorted by group value
  bool gap_valid = false;            // at least two groups had both classes
  double max_auc_gap = 0.0;          // max pairwise ROC-AUC gap across valid groups
};

FairnessReport fairness_report(const ScoreReport& r, const std::string& group_column);

struct GroupRates {
  std::string group;
  size_t n = 0;
  size_t tp = 0, fp = 0, tn = 0, fn = 0;
  bool tpr_valid = false;  // group has positives
  bool fpr_valid = false;  // group has negatives
  double tpr = 0.0;
  double fpr = 0.0;
  double fnr = 0.0;
  double positive_rate = 0.0;
};

struct ThresholdAudit {
  std::string group_column;
  double tau = 0.5;
  std::vector<GroupRates> groups;  // sorted by group value
};

// Confusion-matrix rates per group with "predict positive" = score >= tau.
ThresholdAudit threshold_audit(const ScoreReport& r, const std::string& group_column, double tau);

struct CalibrationBin {
  double lo = 0.0, hi = 0.0;
  size_t n = 0;
  double mean_score = 0.0;  // NaN for empty bins
  double event_rate = 0.0;  // NaN for empty bins
};

struct CalibrationReport {
  std::vector<CalibrationBin> bins;
  double brier = 0.0;
};

// Equal-width bins over [0,1]; scores must lie in [0,1].
CalibrationReport calibration_report(const ScoreReport& r, int bins);

// ---------------------------------------------------------------------------
// Score file round-trip (row_id,score,label[,group columns...]).

void write_scores_csv(const std::string& path, const ScoreReport& r);
ScoreReport read_scores_csv(const std::string& path);

// ---------------------------------------------------------------------------
// Report emission. Markdown layouts mirror the result tables the pipeline
// reports (model comparison; subgroup ranking; threshold audit).

struct ModelResultRow {
  std::string category;
  std::string model;
  double roc_auc = 0.0;
  double pr_auc = 0.0;
  bool baseline = false;  // improvement reference (exactly one row should set it)
};

std::string model_table_markdown(const std::vector<ModelResultRow>& rows);
std::string model_table_csv(const std::vector<ModelResultRow>& rows);

struct SubgroupResultRow {
  std::string group_label;
  std::string model;
  double roc_auc = 0.0;
  double pr_auc = 0.0;
  bool valid = true;
};

std::string subgroup_table_markdown(const std::vector<SubgroupResultRow>& rows);
std::string subgroup_table_csv(const std::vector<SubgroupResultRow>& rows);

struct ThresholdResultRow {
  std::string attribute;
  std::string model;
  std::string group;
  double tpr = 0.0;
  double fpr = 0.0;
  double positive_rate = 0.0;
  bool tpr_valid = true;
  bool fpr_valid = true;
};

std::string threshold_table_markdown(const std::vector<ThresholdResultRow>& rows);
std::string threshold_table_csv(const std::vector<ThresholdResultRow>& rows);

std::string calibration_table_csv(const CalibrationReport& report);

}  // namespace relrisk
