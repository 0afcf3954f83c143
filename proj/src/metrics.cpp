#include "relrisk/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "relrisk/csv.hpp"

namespace relrisk {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string na_or(double x, int digits) {
  return std::isnan(x) ? std::string("NA") : fmt_fixed(x, digits);
}

// Indices sorted ascending by score (stable, so ties keep row order).
std::vector<size_t> order_by_score_asc(const std::vector<double>& scores) {
  std::vector<size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), size_t{0});
  std::stable_sort(idx.begin(), idx.end(),
                   [&](size_t a, size_t b) { return scores[a] < scores[b]; });
  return idx;
}

void check_scores_finite(const std::vector<double>& scores) {
  for (double s : scores) {
    if (!std::isfinite(s)) throw DataError("scores must be finite");
  }
}

void check_unit_interval(const std::vector<double>& scores) {
  for (double s : scores) {
    if (!(s >= 0.0 && s <= 1.0)) {
      throw DataError("scores must lie in [0,1] for probability-based reports");
    }
  }
}

struct GroupSlice {
  std::string value;
  std::vector<size_t> rows;
};

// Rows partitioned by group value, slices sorted by value.
std::vector<GroupSlice> slice_groups(const ScoreReport& r, const std::string& group_column) {
  auto it = r.groups.find(group_column);
  if (it == r.groups.end()) {
    throw ConfigError("score report has no group column named: " + group_column);
  }
  if (it->second.size() != r.size()) {
    throw DataError("group column length mismatch for: " + group_column);
  }
  std::map<std::string, std::vector<size_t>> by_value;
  for (size_t i = 0; i < r.size(); ++i) by_value[it->second[i]].push_back(i);
  std::vector<GroupSlice> slices;
  slices.reserve(by_value.size());
  for (auto& [value, rows] : by_value) slices.push_back(GroupSlice{value, std::move(rows)});
  return slices;
}

}  // namespace

void ScoreReport::validate() const {
  if (row_ids.size() != scores.size() || labels.size() != scores.size()) {
    throw DataError("score report columns have inconsistent lengths");
  }
  for (int8_t y : labels) {
    if (y != 0 && y != 1) throw DataError("score report label outside {0,1}");
  }
  for (const auto& [name, values] : groups) {
    if (values.size() != scores.size()) {
      throw DataError("group column length mismatch for: " + name);
    }
  }
}

RankMetrics rank_metrics(const std::vector<double>& scores, const std::vector<int8_t>& labels) {
  if (scores.size() != labels.size()) throw DataError("scores/labels length mismatch");
  check_scores_finite(scores);
  const size_t n = scores.size();
  size_t n_pos = 0;
  for (int8_t y : labels) {
    if (y != 0 && y != 1) throw DataError("label outside {0,1}");
    n_pos += static_cast<size_t>(y);
  }
  const size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) {
    throw DataError("ranking metrics require at least one positive and one negative");
  }

  RankMetrics out;
  const auto asc = order_by_score_asc(scores);

  // ROC-AUC: Mann-Whitney U with midranks. Rank sums are exact in f64.
  {
    double pos_rank_sum = 0.0;
    size_t i = 0;
    while (i < n) {
      size_t j = i;
      while (j < n && scores[asc[j]] == scores[asc[i]]) ++j;
      const double midrank = 0.5 * (double(i + 1) + double(j));  // 1-based average
      for (size_t k = i; k < j; ++k) {
        if (labels[asc[k]] == 1) pos_rank_sum += midrank;
      }
      i = j;
    }
    const double u = pos_rank_sum - 0.5 * double(n_pos) * double(n_pos + 1);
    out.roc_auc = u / (double(n_pos) * double(n_neg));
  }

  // PR-AUC (average precision) and KS in one descending sweep, with ties
  // grouped so every distinct score contributes a single step.
  {
    double ap = 0.0;
    double ks = 0.0;
    size_t cum_tp = 0, cum_n = 0;
    size_t i = n;  // walk asc order from the top
    while (i > 0) {
      size_t j = i;  // (j, i] is a tie group in descending order
      const double s = scores[asc[i - 1]];
      size_t group_tp = 0, group_n = 0;
      while (j > 0 && scores[asc[j - 1]] == s) {
        group_tp += static_cast<size_t>(labels[asc[j - 1]] == 1);
        ++group_n;
        --j;
      }
      cum_tp += group_tp;
      cum_n += group_n;
      if (group_tp > 0) {
        const double precision = double(cum_tp) / double(cum_n);
        ap += precision * (double(group_tp) / double(n_pos));
      }
      const double tpr = double(cum_tp) / double(n_pos);
      const double fpr = double(cum_n - cum_tp) / double(n_neg);
      ks = std::max(ks, std::abs(tpr - fpr));
      i = j;
    }
    out.pr_auc = ap;
    out.ks = ks;
  }
  return out;
}

RankMetrics rank_metrics(const ScoreReport& r) {
  r.validate();
  return rank_metrics(r.scores, r.labels);
}

TopKResult topk_screen(const ScoreReport& r, double k_fraction) {
  r.validate();
  check_scores_finite(r.scores);
  if (!(k_fraction > 0.0 && k_fraction <= 1.0)) {
    throw ConfigError("top-k fraction must lie in (0, 1]");
  }
  if (r.size() == 0) throw DataError("top-k screening requires at least one row");

  const size_t n = r.size();
  const size_t k = static_cast<size_t>(std::ceil(k_fraction * double(n)));
  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), size_t{0});
  // Stable: equal scores keep their original row order at the cut.
  std::stable_sort(idx.begin(), idx.end(),
                   [&](size_t a, size_t b) { return r.scores[a] > r.scores[b]; });

  size_t total_pos = 0;
  for (int8_t y : r.labels) total_pos += static_cast<size_t>(y);
  size_t hit = 0;
  for (size_t i = 0; i < k; ++i) hit += static_cast<size_t>(r.labels[idx[i]]);

  TopKResult out;
  out.k = k;
  out.positives = hit;
  out.precision = double(hit) / double(k);
  out.recall = total_pos == 0 ? kNaN : double(hit) / double(total_pos);
  return out;
}

FairnessReport fairness_report(const ScoreReport& r, const std::string& group_column) {
  r.validate();
  FairnessReport report;
  report.group_column = group_column;
  for (const auto& slice : slice_groups(r, group_column)) {
    GroupMetrics gm;
    gm.group = slice.value;
    gm.n = slice.rows.size();
    std::vector<double> s;
    std::vector<int8_t> y;
    s.reserve(gm.n);
    y.reserve(gm.n);
    size_t pos = 0;
    for (size_t i : slice.rows) {
      s.push_back(r.scores[i]);
      y.push_back(r.labels[i]);
      pos += static_cast<size_t>(r.labels[i]);
    }
    gm.prevalence = gm.n == 0 ? 0.0 : double(pos) / double(gm.n);
    if (pos > 0 && pos < gm.n) {
      const RankMetrics rm = rank_metrics(s, y);
      gm.valid = true;
      gm.roc_auc = rm.roc_auc;
      gm.pr_auc = rm.pr_auc;
    }
    report.groups.push_back(std::move(gm));
  }

  double lo = 0.0, hi = 0.0;
  size_t n_valid = 0;
  for (const auto& gm : report.groups) {
    if (!gm.valid) continue;
    if (n_valid == 0) {
      lo = hi = gm.roc_auc;
    } else {
      lo = std::min(lo, gm.roc_auc);
      hi = std::max(hi, gm.roc_auc);
    }
    ++n_valid;
  }
  if (n_valid >= 2) {
    report.gap_valid = true;
    report.max_auc_gap = hi - lo;
  }
  return report;
}

ThresholdAudit threshold_audit(const ScoreReport& r, const std::string& group_column,
                               double tau) {
  r.validate();
  check_unit_interval(r.scores);
  if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("threshold tau must lie in (0, 1)");

  ThresholdAudit audit;
  audit.group_column = group_column;
  audit.tau = tau;
  for (const auto& slice : slice_groups(r, group_column)) {
    GroupRates gr;
    gr.group = slice.value;
    gr.n = slice.rows.size();
    for (size_t i : slice.rows) {
      const bool pred = r.scores[i] >= tau;
      const bool pos = r.labels[i] == 1;
      if (pred && pos) ++gr.tp;
      if (pred && !pos) ++gr.fp;
      if (!pred && pos) ++gr.fn;
      if (!pred && !pos) ++gr.tn;
    }
    gr.tpr_valid = gr.tp + gr.fn > 0;
    gr.fpr_valid = gr.fp + gr.tn > 0;
    gr.tpr = gr.tpr_valid ? double(gr.tp) / double(gr.tp + gr.fn) : kNaN;
    gr.fnr = gr.tpr_valid ? double(gr.fn) / double(gr.tp + gr.fn) : kNaN;
    gr.fpr = gr.fpr_valid ? double(gr.fp) / double(gr.fp + gr.tn) : kNaN;
    gr.positive_rate = gr.n == 0 ? kNaN : double(gr.tp + gr.fp) / double(gr.n);
    audit.groups.push_back(std::move(gr));
  }
  return audit;
}

CalibrationReport calibration_report(const ScoreReport& r, int bins) {
  r.validate();
  check_unit_interval(r.scores);
  if (bins < 2) throw ConfigError("calibration requires at least 2 bins");
  if (r.size() == 0) throw DataError("calibration requires at least one row");

  CalibrationReport report;
  report.bins.resize(static_cast<size_t>(bins));
  std::vector<double> score_sum(bins, 0.0);
  std::vector<size_t> pos(bins, 0);
  for (size_t b = 0; b < static_cast<size_t>(bins); ++b) {
    report.bins[b].lo = double(b) / bins;
    report.bins[b].hi = double(b + 1) / bins;
  }
  double sq = 0.0;
  for (size_t i = 0; i < r.size(); ++i) {
    const double s = r.scores[i];
    size_t b = std::min(static_cast<size_t>(s * bins), static_cast<size_t>(bins - 1));
    report.bins[b].n++;
    score_sum[b] += s;
    pos[b] += static_cast<size_t>(r.labels[i]);
    const double d = s - double(r.labels[i]);
    sq += d * d;
  }
  for (size_t b = 0; b < static_cast<size_t>(bins); ++b) {
    auto& bin = report.bins[b];
    bin.mean_score = bin.n == 0 ? kNaN : score_sum[b] / double(bin.n);
    bin.event_rate = bin.n == 0 ? kNaN : double(pos[b]) / double(bin.n);
  }
  report.brier = sq / double(r.size());
  return report;
}

// ---------------------------------------------------------------------------
// Score CSV round-trip.

void write_scores_csv(const std::string& path, const ScoreReport& r) {
  r.validate();
  csv::CsvData data;
  data.header = {"row_id", "score", "label"};
  for (const auto& [name, _] : r.groups) data.header.push_back(name);
  data.rows.reserve(r.size());
  for (size_t i = 0; i < r.size(); ++i) {
    std::vector<std::string> row;
    row.reserve(data.header.size());
    row.push_back(std::to_string(r.row_ids[i]));
    row.push_back(fmt_double(r.scores[i]));
    row.push_back(std::to_string(int(r.labels[i])));
    for (const auto& [_, values] : r.groups) row.push_back(values[i]);
    data.rows.push_back(std::move(row));
  }
  csv::write_file(path, data);
}

ScoreReport read_scores_csv(const std::string& path) {
  const csv::CsvData data = csv::read_file(path);
  if (data.header.size() < 3 || data.header[0] != "row_id" || data.header[1] != "score" ||
      data.header[2] != "label") {
    throw DataError("score file must start with columns row_id,score,label: " + path);
  }
  ScoreReport r;
  for (size_t c = 3; c < data.header.size(); ++c) {
    r.groups[data.header[c]] = {};
  }
  for (const auto& row : data.rows) {
    try {
      r.row_ids.push_back(std::stoll(row[0]));
      r.scores.push_back(std::stod(row[1]));
      r.labels.push_back(static_cast<int8_t>(std::stoi(row[2])));
    } catch (const std::exception&) {
      throw DataError("malformed numeric cell in score file: " + path);
    }
    for (size_t c = 3; c < data.header.size(); ++c) {
      r.groups[data.header[c]].push_back(row[c]);
    }
  }
  r.validate();
  return r;
}

// ---------------------------------------------------------------------------
// Report tables.

std::string model_table_markdown(const std::vector<ModelResultRow>& rows) {
  double base_roc = kNaN;
  for (const auto& row : rows) {
    if (row.baseline) base_roc = row.roc_auc;
  }
  std::string out;
  out += "| Category | Model | ROC-AUC | PR-AUC | ROC-AUC Improvement vs. Logistic |\n";
  out += "| --- | --- | --- | --- | --- |\n";
  for (const auto& row : rows) {
    std::string improvement = "--";
    if (!row.baseline && !std::isnan(base_roc) && base_roc > 0.0) {
      const double pct = 100.0 * (row.roc_auc - base_roc) / base_roc;
      improvement = (pct >= 0 ? "+" : "") + fmt_fixed(pct, 2) + "%";
    }
    out += "| " + row.category + " | " + row.model + " | " + fmt_fixed(row.roc_auc, 4) + " | " +
           fmt_fixed(row.pr_auc, 4) + " | " + improvement + " |\n";
  }
  return out;
}

std::string model_table_csv(const std::vector<ModelResultRow>& rows) {
  double base_roc = kNaN;
  for (const auto& row : rows) {
    if (row.baseline) base_roc = row.roc_auc;
  }
  std::string out = "category,model,roc_auc,pr_auc,roc_auc_improvement_pct\n";
  for (const auto& row : rows) {
    std::string improvement = "NA";
    if (!row.baseline && !std::isnan(base_roc) && base_roc > 0.0) {
      improvement = fmt_fixed(100.0 * (row.roc_auc - base_roc) / base_roc, 4);
    }
    out += csv::escape_field(row.category) + "," + csv::escape_field(row.model) + "," +
           fmt_fixed(row.roc_auc, 6) + "," + fmt_fixed(row.pr_auc, 6) + "," + improvement + "\n";
  }
  return out;
}

std::string subgroup_table_markdown(const std::vector<SubgroupResultRow>& rows) {
  std::string out;
  out += "| Demographic Group | Model | ROC-AUC | PR-AUC |\n";
  out += "| --- | --- | --- | --- |\n";
  for (const auto& row : rows) {
    out += "| " + row.group_label + " | " + row.model + " | " +
           (row.valid ? fmt_fixed(row.roc_auc, 4) : std::string("NA")) + " | " +
           (row.valid ? fmt_fixed(row.pr_auc, 4) : std::string("NA")) + " |\n";
  }
  return out;
}

std::string subgroup_table_csv(const std::vector<SubgroupResultRow>& rows) {
  std::string out = "group,model,roc_auc,pr_auc\n";
  for (const auto& row : rows) {
    out += csv::escape_field(row.group_label) + "," + csv::escape_field(row.model) + "," +
           (row.valid ? fmt_fixed(row.roc_auc, 6) : std::string("NA")) + "," +
           (row.valid ? fmt_fixed(row.pr_auc, 6) : std::string("NA")) + "\n";
  }
  return out;
}

std::string threshold_table_markdown(const std::vector<ThresholdResultRow>& rows) {
  std::string out;
  out += "| Attribute | Model | Group | TPR | FPR | PositiveRate |\n";
  out += "| --- | --- | --- | --- | --- | --- |\n";
  for (const auto& row : rows) {
    out += "| " + row.attribute + " | " + row.model + " | " + row.group + " | " +
           (row.tpr_valid ? fmt_fixed(row.tpr, 3) : std::string("NA")) + " | " +
           (row.fpr_valid ? fmt_fixed(row.fpr, 3) : std::string("NA")) + " | " +
           na_or(row.positive_rate, 3) + " |\n";
  }
  return out;
}

std::string threshold_table_csv(const std::vector<ThresholdResultRow>& rows) {
  std::string out = "attribute,model,group,tpr,fpr,positive_rate\n";
  for (const auto& row : rows) {
    out += csv::escape_field(row.attribute) + "," + csv::escape_field(row.model) + "," +
           csv::escape_field(row.group) + "," +
           (row.tpr_valid ? fmt_fixed(row.tpr, 6) : std::string("NA")) + "," +
           (row.fpr_valid ? fmt_fixed(row.fpr, 6) : std::string("NA")) + "," +
           na_or(row.positive_rate, 6) + "\n";
  }
  return out;
}

std::string calibration_table_csv(const CalibrationReport& report) {
  std::string out = "bin_lo,bin_hi,n,mean_score,event_rate\n";
  for (const auto& bin : report.bins) {
    out += fmt_double(bin.lo) + "," + fmt_double(bin.hi) + "," + std::to_string(bin.n) + "," +
           na_or(bin.mean_score, 6) + "," + na_or(bin.event_rate, 6) + "\n";
  }
  out += "brier," + fmt_double(report.brier) + ",,,\n";
  return out;
}

}  // namespace relrisk
