#include "relrisk/boosted.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <queue>
#include <unordered_map>
#include <utility>

#include "relrisk/metrics.hpp"

namespace relrisk {

namespace {

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

void check_labels(const std::vector<int8_t>& y, size_t n_rows, const char* who) {
  if (y.size() != n_rows) {
    throw DataError(std::string(who) + ": label count " + std::to_string(y.size()) +
                    " does not match row count " + std::to_string(n_rows));
  }
  for (size_t i = 0; i < y.size(); ++i) {
    if (y[i] != 0 && y[i] != 1) {
      throw DataError(std::string(who) + ": labels must be 0/1, row " + std::to_string(i) +
                      " holds " + std::to_string(static_cast<int>(y[i])));
    }
  }
}

void check_rows(const std::vector<uint32_t>& rows, size_t n_rows, const char* who) {
  for (uint32_t r : rows) {
    if (r >= n_rows) {
      throw DataError(std::string(who) + ": row index " + std::to_string(r) +
                      " out of range (matrix has " + std::to_string(n_rows) + " rows)");
    }
  }
}

std::pair<int64_t, int64_t> class_counts(const std::vector<int8_t>& y,
                                         const std::vector<uint32_t>& rows) {
  int64_t pos = 0, neg = 0;
  for (uint32_t r : rows) (y[r] == 1 ? pos : neg)++;
  return {neg, pos};
}

}  // namespace

// ---------------------------------------------------------------------------
// Stratified folds.

std::vector<uint32_t> FoldPlan::fold_rows(int fold) const {
  std::vector<uint32_t> out;
  for (size_t i = 0; i < fold_of.size(); ++i) {
    if (fold_of[i] == fold) out.push_back(static_cast<uint32_t>(i));
  }
  return out;
}

std::vector<uint32_t> FoldPlan::complement_rows(int fold) const {
  std::vector<uint32_t> out;
  for (size_t i = 0; i < fold_of.size(); ++i) {
    if (fold_of[i] != fold) out.push_back(static_cast<uint32_t>(i));
  }
  return out;
}

FoldPlan stratified_folds(const std::vector<int8_t>& labels, int k, uint64_t seed) {
  if (k < 2) throw ConfigError("stratified_folds: k must be at least 2, got " + std::to_string(k));
  check_labels(labels, labels.size(), "stratified_folds");
  if (labels.size() < static_cast<size_t>(k)) {
    throw DataError("stratified_folds: " + std::to_string(labels.size()) + " rows cannot fill " +
                    std::to_string(k) + " folds");
  }
  FoldPlan plan;
  plan.k = k;
  plan.fold_of.assign(labels.size(), -1);
  // Each class is shuffled and dealt round-robin; the deal for the next class
  // continues at the fold where the previous class stopped, so total fold
  // sizes stay within one row of each other.
  int start = 0;
  for (int cls = 0; cls < 2; ++cls) {
    std::vector<uint32_t> idx;
    for (size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == cls) idx.push_back(static_cast<uint32_t>(i));
    }
    if (idx.empty()) {
      throw DataError("stratified_folds: all rows share one class; stratification needs both");
    }
    Rng rng(mix_seed(seed, static_cast<uint64_t>(cls)));
    rng.shuffle(idx);
    for (size_t i = 0; i < idx.size(); ++i) {
      plan.fold_of[idx[i]] = static_cast<int>((start + i) % static_cast<size_t>(k));
    }
    start = static_cast<int>((start + idx.size()) % static_cast<size_t>(k));
  }
  return plan;
}

// ---------------------------------------------------------------------------
// GBDT.

int Tree::n_leaves() const {
  int n = 0;
  for (const TreeNode& node : nodes) {
    if (node.left < 0) ++n;
  }
  return n;
}

double Tree::predict_row(const double* row) const {
  int at = 0;
  while (nodes[at].left >= 0) {
    const TreeNode& nd = nodes[at];
    const double v = row[nd.feature];
    if (is_missing(v)) {
      at = nd.missing_left ? nd.left : nd.right;
    } else {
      at = v <= nd.threshold ? nd.left : nd.right;
    }
  }
  return nodes[at].value;
}

namespace {

// Newton objective pieces. A leaf with gradient sum G and Hessian sum H gets
// value -soft_threshold(G, l1) / (H + l2); the score below is the objective
// reduction that value buys, so split gain = score(L) + score(R) - score(P).
double soft_threshold(double g, double l1) {
  const double a = std::abs(g) - l1;
  if (a <= 0.0) return 0.0;
  return g > 0.0 ? a : -a;
}

double split_score(double g, double h, double l1, double l2) {
  const double st = soft_threshold(g, l1);
  const double denom = h + l2;
  if (denom <= 1e-12) return 0.0;
  return st * st / denom;
}

double newton_leaf_value(double g, double h, double l1, double l2) {
  const double st = soft_threshold(g, l1);
  const double denom = h + l2;
  if (denom <= 1e-12) return 0.0;
  return -st / denom;
}

struct LeafStats {
  double g = 0.0;
  double h = 0.0;
  int64_t count = 0;
};

struct SplitChoice {
  bool valid = false;
  double gain = 0.0;
  int column = -1;       // global column index
  double threshold = 0.0;
  bool missing_left = true;
};

struct ThresholdCand {
  double threshold;
  double g_prefix;  // sums over observed rows with value <= lower neighbor
  double h_prefix;
  int64_t c_prefix;
};

// Best split of one leaf on one feature. Thresholds are midpoints between
// adjacent distinct observed values; rows with the feature missing are routed
// to whichever side scores better and that direction is recorded. Ties inside
// a feature resolve to the lowest threshold, and missing-left before
// missing-right, because replacement requires strictly higher gain.
SplitChoice best_split_for_column(const FeatureMatrix& X, const std::vector<uint32_t>& train_rows,
                                  int column, const std::vector<uint32_t>& sorted_rows,
                                  const std::vector<int32_t>& leaf_of, int leaf_id,
                                  const LeafStats& stats, const std::vector<double>& g,
                                  const std::vector<double>& h, const GbdtParams& p) {
  std::vector<ThresholdCand> cands;
  double gp = 0.0, hp = 0.0;
  int64_t cp = 0;
  double last_v = 0.0;
  bool have_prev = false;
  const size_t n_cols = X.n_cols();
  for (uint32_t ti : sorted_rows) {
    if (leaf_of[ti] != leaf_id) continue;
    const double v = X.values[static_cast<size_t>(train_rows[ti]) * n_cols + column];
    if (have_prev && v > last_v) {
      cands.push_back({0.5 * (last_v + v), gp, hp, cp});
    }
    gp += g[ti];
    hp += h[ti];
    ++cp;
    last_v = v;
    have_prev = true;
  }
  // gp/hp/cp now cover every observed row in the leaf; the remainder of the
  // leaf totals is the missing group for this feature.
  const double gm = stats.g - gp;
  const double hm = stats.h - hp;
  const int64_t cm = stats.count - cp;
  const double parent = split_score(stats.g, stats.h, p.lambda_l1, p.lambda_l2);

  SplitChoice best;
  for (const ThresholdCand& c : cands) {
    const int n_dirs = cm > 0 ? 2 : 1;
    for (int dir = 0; dir < n_dirs; ++dir) {
      const bool miss_left = dir == 0;
      const double gl = c.g_prefix + (miss_left ? gm : 0.0);
      const double hl = c.h_prefix + (miss_left ? hm : 0.0);
      const int64_t cl = c.c_prefix + (miss_left ? cm : 0);
      const int64_t cr = stats.count - cl;
      if (cl < p.min_data_in_leaf || cr < p.min_data_in_leaf) continue;
      const double gr = stats.g - gl;
      const double hr = stats.h - hl;
      const double gain =
          split_score(gl, hl, p.lambda_l1, p.lambda_l2) +
          split_score(gr, hr, p.lambda_l1, p.lambda_l2) - parent;
      if (gain > 0.0 && (!best.valid || gain > best.gain)) {
        best.valid = true;
        best.gain = gain;
        best.column = column;
        best.threshold = c.threshold;
        best.missing_left = miss_left;
      }
    }
  }
  return best;
}

// Best split of one leaf across the active feature set. Per-feature scans are
// independent and land in per-feature slots, so the final ascending-column
// reduction is identical at any thread count; cross-feature ties resolve to
// the lowest column index.
SplitChoice best_split(const FeatureMatrix& X, const std::vector<uint32_t>& train_rows,
                       const std::vector<int>& active_cols,
                       const std::vector<std::vector<uint32_t>>& sorted_by_active,
                       const std::vector<int32_t>& leaf_of, int leaf_id, const LeafStats& stats,
                       const std::vector<double>& g, const std::vector<double>& h,
                       const GbdtParams& p) {
  std::vector<SplitChoice> per_feature(active_cols.size());
  parallel_for(active_cols.size(), 1, [&](size_t begin, size_t end) {
    for (size_t i = begin; i < end; ++i) {
      per_feature[i] = best_split_for_column(X, train_rows, active_cols[i], sorted_by_active[i],
                                             leaf_of, leaf_id, stats, g, h, p);
    }
  });
  SplitChoice best;
  for (const SplitChoice& c : per_feature) {
    if (c.valid && (!best.valid || c.gain > best.gain)) best = c;
  }
  return best;
}

struct HeapEntry {
  double gain;
  int64_t order;  // creation counter; older leaves win gain ties
  int node;
  SplitChoice split;
};

struct HeapCompare {
  bool operator()(const HeapEntry& a, const HeapEntry& b) const {
    if (a.gain != b.gain) return a.gain < b.gain;
    return a.order > b.order;
  }
};

}  // namespace

GbdtModel fit_gbdt(const FeatureMatrix& X, const std::vector<int8_t>& y,
                   const std::vector<uint32_t>& train_rows,
                   const std::vector<uint32_t>& val_rows, const GbdtParams& params) {
  if (!(params.learning_rate > 0.0)) throw ConfigError("fit_gbdt: learning_rate must be positive");
  if (params.num_leaves < 2) throw ConfigError("fit_gbdt: num_leaves must be at least 2");
  if (params.min_data_in_leaf < 1) throw ConfigError("fit_gbdt: min_data_in_leaf must be at least 1");
  if (!(params.bagging_fraction > 0.0) || params.bagging_fraction > 1.0) {
    throw ConfigError("fit_gbdt: bagging_fraction must be in (0, 1]");
  }
  if (!(params.feature_fraction > 0.0) || params.feature_fraction > 1.0) {
    throw ConfigError("fit_gbdt: feature_fraction must be in (0, 1]");
  }
  if (params.lambda_l1 < 0.0 || params.lambda_l2 < 0.0) {
    throw ConfigError("fit_gbdt: lambda_l1 and lambda_l2 must be non-negative");
  }
  if (params.max_iterations < 1) throw ConfigError("fit_gbdt: max_iterations must be at least 1");

  check_labels(y, X.n_rows(), "fit_gbdt");
  check_rows(train_rows, X.n_rows(), "fit_gbdt(train)");
  check_rows(val_rows, X.n_rows(), "fit_gbdt(val)");
  if (train_rows.empty()) throw DataError("fit_gbdt: no training rows");
  const auto [n_neg, n_pos] = class_counts(y, train_rows);
  if (n_pos == 0 || n_neg == 0) {
    throw DataError("fit_gbdt: training rows contain a single class");
  }
  if (!val_rows.empty()) {
    const auto [v_neg, v_pos] = class_counts(y, val_rows);
    if (v_pos == 0 || v_neg == 0) {
      throw DataError("fit_gbdt: validation rows contain a single class");
    }
  }

  const std::vector<size_t> numeric = X.numeric_column_indices();
  if (numeric.empty()) throw DataError("fit_gbdt: the matrix has no numeric columns");

  const size_t n_train = train_rows.size();
  const size_t n_feat = numeric.size();
  const size_t n_cols = X.n_cols();

  // Presort each feature once over the training slice; rows whose value is
  // missing are simply absent from the list. Ties sort by position so the
  // order is fully determined.
  std::vector<std::vector<uint32_t>> sorted_by_feat(n_feat);
  parallel_for(n_feat, 1, [&](size_t begin, size_t end) {
    for (size_t fi = begin; fi < end; ++fi) {
      const int col = static_cast<int>(numeric[fi]);
      std::vector<uint32_t>& list = sorted_by_feat[fi];
      list.reserve(n_train);
      for (uint32_t ti = 0; ti < n_train; ++ti) {
        const double v = X.values[static_cast<size_t>(train_rows[ti]) * n_cols + col];
        if (!is_missing(v)) list.push_back(ti);
      }
      std::sort(list.begin(), list.end(), [&](uint32_t a, uint32_t b) {
        const double va = X.values[static_cast<size_t>(train_rows[a]) * n_cols + col];
        const double vb = X.values[static_cast<size_t>(train_rows[b]) * n_cols + col];
        if (va != vb) return va < vb;
        return a < b;
      });
    }
  });
  bool any_observed = false;
  for (const auto& list : sorted_by_feat) {
    if (!list.empty()) {
      any_observed = true;
      break;
    }
  }
  if (!any_observed) {
    throw DataError("fit_gbdt: every numeric feature is missing on every training row");
  }

  GbdtModel model;
  model.params = params;
  if (model.params.scale_pos_weight <= 0.0) {
    model.params.scale_pos_weight = static_cast<double>(n_neg) / static_cast<double>(n_pos);
  }
  const double spw = model.params.scale_pos_weight;
  model.feature_names.reserve(n_cols);
  for (const FeatureColumn& c : X.columns) model.feature_names.push_back(c.name);

  // Base score: log-odds of the weighted positive rate, which zeroes the
  // initial gradient sum.
  const double w_pos = spw * static_cast<double>(n_pos);
  model.base_score = std::log(w_pos / static_cast<double>(n_neg));

  std::vector<double> f_train(n_train, model.base_score);
  std::vector<double> f_val(val_rows.size(), model.base_score);
  std::vector<int8_t> y_val(val_rows.size());
  for (size_t i = 0; i < val_rows.size(); ++i) y_val[i] = y[val_rows[i]];

  std::vector<double> g(n_train), h(n_train);
  std::vector<int32_t> leaf_of(n_train);
  std::vector<uint32_t> bag_scratch(n_train);
  const bool has_val = !val_rows.empty();
  double best_auc = -1.0;
  int best_iter = 0;

  for (int iter = 0; iter < params.max_iterations; ++iter) {
    for (size_t ti = 0; ti < n_train; ++ti) {
      const int8_t yy = y[train_rows[ti]];
      const double pr = sigmoid(f_train[ti]);
      const double w = yy == 1 ? spw : 1.0;
      g[ti] = w * (pr - static_cast<double>(yy));
      h[ti] = w * pr * (1.0 - pr);
    }

    // Row bagging: without replacement, fresh stream per iteration. A
    // fraction of exactly 1 uses every row and draws nothing.
    if (params.bagging_fraction >= 1.0) {
      std::fill(leaf_of.begin(), leaf_of.end(), 0);
    } else {
      std::fill(leaf_of.begin(), leaf_of.end(), -1);
      const int64_t want = std::llround(params.bagging_fraction * static_cast<double>(n_train));
      const size_t m = static_cast<size_t>(
          std::clamp<int64_t>(want, 1, static_cast<int64_t>(n_train)));
      for (uint32_t i = 0; i < n_train; ++i) bag_scratch[i] = i;
      Rng rng(mix_seed(params.seed, 2ull * static_cast<uint64_t>(iter)));
      for (size_t i = 0; i < m; ++i) {
        const size_t j = i + static_cast<size_t>(rng.below(n_train - i));
        std::swap(bag_scratch[i], bag_scratch[j]);
        leaf_of[bag_scratch[i]] = 0;
      }
    }

    // Feature subsampling: fresh subset per tree, kept in ascending column
    // order so tie-breaking and scan order stay deterministic.
    std::vector<int> active_cols;
    std::vector<std::vector<uint32_t>> const* sorted_active = &sorted_by_feat;
    std::vector<std::vector<uint32_t>> sorted_subset;
    if (params.feature_fraction >= 1.0) {
      active_cols.reserve(n_feat);
      for (size_t fi = 0; fi < n_feat; ++fi) active_cols.push_back(static_cast<int>(numeric[fi]));
    } else {
      const int64_t want = std::llround(params.feature_fraction * static_cast<double>(n_feat));
      const size_t m = static_cast<size_t>(
          std::clamp<int64_t>(want, 1, static_cast<int64_t>(n_feat)));
      std::vector<uint32_t> pos(n_feat);
      for (uint32_t i = 0; i < n_feat; ++i) pos[i] = i;
      Rng rng(mix_seed(params.seed, 2ull * static_cast<uint64_t>(iter) + 1));
      for (size_t i = 0; i < m; ++i) {
        const size_t j = i + static_cast<size_t>(rng.below(n_feat - i));
        std::swap(pos[i], pos[j]);
      }
      pos.resize(m);
      std::sort(pos.begin(), pos.end());
      sorted_subset.resize(m);
      active_cols.reserve(m);
      for (size_t i = 0; i < m; ++i) {
        active_cols.push_back(static_cast<int>(numeric[pos[i]]));
        sorted_subset[i] = sorted_by_feat[pos[i]];
      }
      sorted_active = &sorted_subset;
    }

    // Grow one tree leaf-wise: always split the pending leaf with the best
    // gain next, until the leaf budget or the supply of positive-gain splits
    // runs out.
    Tree tree;
    tree.nodes.push_back(TreeNode{});
    std::vector<LeafStats> node_stats(1);
    for (size_t ti = 0; ti < n_train; ++ti) {
      if (leaf_of[ti] != 0) continue;
      node_stats[0].g += g[ti];
      node_stats[0].h += h[ti];
      node_stats[0].count += 1;
    }
    std::priority_queue<HeapEntry, std::vector<HeapEntry>, HeapCompare> heap;
    int64_t order_counter = 0;
    if (node_stats[0].count >= 2 * params.min_data_in_leaf) {
      SplitChoice root = best_split(X, train_rows, active_cols, *sorted_active, leaf_of, 0,
                                    node_stats[0], g, h, params);
      if (root.valid) heap.push(HeapEntry{root.gain, order_counter++, 0, root});
    }
    int n_leaves = 1;
    while (n_leaves < params.num_leaves && !heap.empty()) {
      const HeapEntry e = heap.top();
      heap.pop();
      const int left = static_cast<int>(tree.nodes.size());
      const int right = left + 1;
      TreeNode& nd = tree.nodes[e.node];
      nd.feature = e.split.column;
      nd.threshold = e.split.threshold;
      nd.missing_left = e.split.missing_left;
      nd.left = left;
      nd.right = right;
      tree.nodes.push_back(TreeNode{});
      tree.nodes.push_back(TreeNode{});
      node_stats.push_back(LeafStats{});
      node_stats.push_back(LeafStats{});
      for (size_t ti = 0; ti < n_train; ++ti) {
        if (leaf_of[ti] != e.node) continue;
        const double v =
            X.values[static_cast<size_t>(train_rows[ti]) * n_cols + e.split.column];
        const bool go_left = is_missing(v) ? e.split.missing_left : v <= e.split.threshold;
        const int child = go_left ? left : right;
        leaf_of[ti] = child;
        node_stats[child].g += g[ti];
        node_stats[child].h += h[ti];
        node_stats[child].count += 1;
      }
      ++n_leaves;
      for (int child : {left, right}) {
        if (n_leaves >= params.num_leaves) break;
        if (node_stats[child].count < 2 * params.min_data_in_leaf) continue;
        SplitChoice s = best_split(X, train_rows, active_cols, *sorted_active, leaf_of, child,
                                   node_stats[child], g, h, params);
        if (s.valid) heap.push(HeapEntry{s.gain, order_counter++, child, s});
      }
    }
    if (tree.nodes.size() == 1) break;  // no split clears the gain bar; boosting is done
    for (size_t ni = 0; ni < tree.nodes.size(); ++ni) {
      if (tree.nodes[ni].left < 0) {
        tree.nodes[ni].value = params.learning_rate * newton_leaf_value(node_stats[ni].g,
                                                                         node_stats[ni].h,
                                                                         params.lambda_l1,
                                                                         params.lambda_l2);
      }
    }
    model.trees.push_back(std::move(tree));
    const Tree& added = model.trees.back();
    for (size_t ti = 0; ti < n_train; ++ti) {
      f_train[ti] += added.predict_row(&X.values[static_cast<size_t>(train_rows[ti]) * n_cols]);
    }
    for (size_t vi = 0; vi < val_rows.size(); ++vi) {
      f_val[vi] += added.predict_row(&X.values[static_cast<size_t>(val_rows[vi]) * n_cols]);
    }

    if (has_val) {
      const double auc = rank_metrics(f_val, y_val).roc_auc;
      model.val_auc_history.push_back(auc);
      if (auc > best_auc) {
        best_auc = auc;
        best_iter = static_cast<int>(model.trees.size());
      }
      if (params.early_stopping_rounds > 0 &&
          static_cast<int>(model.trees.size()) - best_iter >= params.early_stopping_rounds) {
        break;
      }
    }
  }

  if (has_val) {
    model.trees.resize(static_cast<size_t>(best_iter));
  }
  model.best_iteration = static_cast<int>(model.trees.size());
  return model;
}

namespace {

void check_layout(const std::vector<std::string>& expect, const FeatureMatrix& X,
                  const char* who) {
  if (X.n_cols() != expect.size()) {
    throw DataError(std::string(who) + ": matrix has " + std::to_string(X.n_cols()) +
                    " columns but the model was fit on " + std::to_string(expect.size()));
  }
  for (size_t c = 0; c < expect.size(); ++c) {
    if (X.columns[c].name != expect[c]) {
      throw DataError(std::string(who) + ": column " + std::to_string(c) + " is '" +
                      X.columns[c].name + "' but the model was fit on '" + expect[c] + "'");
    }
  }
}

}  // namespace

std::vector<double> predict_gbdt_margin(const GbdtModel& model, const FeatureMatrix& X) {
  check_layout(model.feature_names, X, "predict_gbdt");
  std::vector<double> out(X.n_rows(), model.base_score);
  const size_t n_cols = X.n_cols();
  parallel_for(X.n_rows(), 1024, [&](size_t begin, size_t end) {
    for (size_t r = begin; r < end; ++r) {
      const double* row = &X.values[r * n_cols];
      double f = out[r];
      for (const Tree& t : model.trees) f += t.predict_row(row);
      out[r] = f;
    }
  });
  return out;
}

std::vector<double> predict_gbdt(const GbdtModel& model, const FeatureMatrix& X) {
  std::vector<double> out = predict_gbdt_margin(model, X);
  for (double& v : out) v = sigmoid(v);
  return out;
}

// ---------------------------------------------------------------------------
// JSON dump.

std::string gbdt_to_json(const GbdtModel& model) {
  nlohmann::json j;
  j["model"] = "gbdt";
  j["params"] = {{"learning_rate", model.params.learning_rate},
                 {"num_leaves", model.params.num_leaves},
                 {"min_data_in_leaf", model.params.min_data_in_leaf},
                 {"bagging_fraction", model.params.bagging_fraction},
                 {"feature_fraction", model.params.feature_fraction},
                 {"lambda_l1", model.params.lambda_l1},
                 {"lambda_l2", model.params.lambda_l2},
                 {"max_iterations", model.params.max_iterations},
                 {"early_stopping_rounds", model.params.early_stopping_rounds},
                 {"scale_pos_weight", model.params.scale_pos_weight},
                 {"seed", model.params.seed}};
  j["base_score"] = model.base_score;
  j["best_iteration"] = model.best_iteration;
  j["feature_names"] = model.feature_names;
  j["val_auc_history"] = model.val_auc_history;
  nlohmann::json trees = nlohmann::json::array();
  for (const Tree& t : model.trees) {
    nlohmann::json nodes = nlohmann::json::array();
    for (const TreeNode& nd : t.nodes) {
      nodes.push_back({{"feature", nd.feature},
                       {"threshold", nd.threshold},
                       {"missing_left", nd.missing_left},
                       {"left", nd.left},
                       {"right", nd.right},
                       {"value", nd.value}});
    }
    trees.push_back({{"nodes", std::move(nodes)}});
  }
  j["trees"] = std::move(trees);
  return j.dump(2);
}

GbdtModel gbdt_from_json(const std::string& text) {
  const nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
  if (j.is_discarded()) throw DataError("gbdt_from_json: input is not valid JSON");
  try {
    if (j.at("model").get<std::string>() != "gbdt") {
      throw DataError("gbdt_from_json: not a gbdt dump");
    }
    GbdtModel m;
    const nlohmann::json& p = j.at("params");
    m.params.learning_rate = p.at("learning_rate").get<double>();
    m.params.num_leaves = p.at("num_leaves").get<int>();
    m.params.min_data_in_leaf = p.at("min_data_in_leaf").get<int>();
    m.params.bagging_fraction = p.at("bagging_fraction").get<double>();
    m.params.feature_fraction = p.at("feature_fraction").get<double>();
    m.params.lambda_l1 = p.at("lambda_l1").get<double>();
    m.params.lambda_l2 = p.at("lambda_l2").get<double>();
    m.params.max_iterations = p.at("max_iterations").get<int>();
    m.params.early_stopping_rounds = p.at("early_stopping_rounds").get<int>();
    m.params.scale_pos_weight = p.at("scale_pos_weight").get<double>();
    m.params.seed = p.at("seed").get<uint64_t>();
    m.base_score = j.at("base_score").get<double>();
    m.best_iteration = j.at("best_iteration").get<int>();
    m.feature_names = j.at("feature_names").get<std::vector<std::string>>();
    m.val_auc_history = j.at("val_auc_history").get<std::vector<double>>();
    for (const nlohmann::json& jt : j.at("trees")) {
      Tree t;
      for (const nlohmann::json& jn : jt.at("nodes")) {
        TreeNode nd;
        nd.feature = jn.at("feature").get<int>();
        nd.threshold = jn.at("threshold").get<double>();
        nd.missing_left = jn.at("missing_left").get<bool>();
        nd.left = jn.at("left").get<int>();
        nd.right = jn.at("right").get<int>();
        nd.value = jn.at("value").get<double>();
        t.nodes.push_back(nd);
      }
      if (t.nodes.empty()) throw DataError("gbdt_from_json: tree with no nodes");
      for (const TreeNode& nd : t.nodes) {
        const int n = static_cast<int>(t.nodes.size());
        if (nd.left >= n || nd.right >= n || (nd.left < 0) != (nd.right < 0)) {
          throw DataError("gbdt_from_json: malformed tree links");
        }
      }
      m.trees.push_back(std::move(t));
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("gbdt_from_json: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Logistic regression.

namespace {

double inf_norm(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

double l2_norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

LinearModel fit_logistic(const FeatureMatrix& X, const std::vector<int8_t>& y,
                         const std::vector<uint32_t>& train_rows, const LogisticConfig& cfg) {
  if (!(cfg.C > 0.0)) throw ConfigError("fit_logistic: C must be positive");
  if (cfg.max_iterations < 1) throw ConfigError("fit_logistic: max_iterations must be at least 1");
  if (!(cfg.tolerance > 0.0)) throw ConfigError("fit_logistic: tolerance must be positive");
  if (cfg.memory < 1) throw ConfigError("fit_logistic: memory must be at least 1");
  check_labels(y, X.n_rows(), "fit_logistic");
  check_rows(train_rows, X.n_rows(), "fit_logistic");
  if (train_rows.empty()) throw DataError("fit_logistic: no training rows");
  const auto [n_neg, n_pos] = class_counts(y, train_rows);
  if (n_pos == 0 || n_neg == 0) {
    throw DataError("fit_logistic: training rows contain a single class");
  }

  const std::vector<size_t> numeric = X.numeric_column_indices();
  if (numeric.empty()) throw DataError("fit_logistic: the matrix has no numeric columns");
  const size_t n_cols = X.n_cols();
  for (uint32_t r : train_rows) {
    for (size_t c : numeric) {
      if (is_missing(X.values[static_cast<size_t>(r) * n_cols + c])) {
        throw DataError("fit_logistic: missing value in column '" + X.columns[c].name +
                        "' row " + std::to_string(r) + "; impute before fitting");
      }
    }
  }

  const size_t d = numeric.size();
  const size_t dim = d + (cfg.fit_intercept ? 1 : 0);
  const double n = static_cast<double>(train_rows.size());
  const double lambda = 1.0 / (cfg.C * n);

  // Mean log-loss plus L2 penalty on the weights (never the intercept).
  auto evaluate = [&](const std::vector<double>& theta, std::vector<double>& grad) {
    grad.assign(dim, 0.0);
    double loss = 0.0;
    for (uint32_t r : train_rows) {
      const double* row = &X.values[static_cast<size_t>(r) * n_cols];
      double z = cfg.fit_intercept ? theta[d] : 0.0;
      for (size_t jj = 0; jj < d; ++jj) z += theta[jj] * row[numeric[jj]];
      const int8_t yy = y[r];
      const double m = yy == 1 ? z : -z;
      loss += m > 0.0 ? std::log1p(std::exp(-m)) : -m + std::log1p(std::exp(m));
      const double delta = sigmoid(z) - static_cast<double>(yy);
      for (size_t jj = 0; jj < d; ++jj) grad[jj] += delta * row[numeric[jj]];
      if (cfg.fit_intercept) grad[d] += delta;
    }
    loss /= n;
    for (double& gv : grad) gv /= n;
    for (size_t jj = 0; jj < d; ++jj) {
      loss += 0.5 * lambda * theta[jj] * theta[jj];
      grad[jj] += lambda * theta[jj];
    }
    return loss;
  };

  std::vector<double> theta(dim, 0.0), grad(dim);
  double f = evaluate(theta, grad);

  std::vector<std::vector<double>> hist_s, hist_y;
  std::vector<double> hist_rho;
  int it = 0;
  for (; it < cfg.max_iterations; ++it) {
    if (inf_norm(grad) < cfg.tolerance) break;

    // Two-loop recursion.
    std::vector<double> q = grad;
    const int hlen = static_cast<int>(hist_s.size());
    std::vector<double> alpha(hlen);
    for (int i = hlen - 1; i >= 0; --i) {
      alpha[i] = hist_rho[i] * dot(hist_s[i], q);
      for (size_t jj = 0; jj < dim; ++jj) q[jj] -= alpha[i] * hist_y[i][jj];
    }
    if (hlen > 0) {
      const double yy = dot(hist_y.back(), hist_y.back());
      const double gamma = yy > 0.0 ? dot(hist_s.back(), hist_y.back()) / yy : 1.0;
      for (double& v : q) v *= gamma;
    }
    for (int i = 0; i < hlen; ++i) {
      const double beta = hist_rho[i] * dot(hist_y[i], q);
      for (size_t jj = 0; jj < dim; ++jj) q[jj] += (alpha[i] - beta) * hist_s[i][jj];
    }
    std::vector<double> dir(dim);
    for (size_t jj = 0; jj < dim; ++jj) dir[jj] = -q[jj];
    double gd = dot(grad, dir);
    if (!(gd < 0.0)) {  // not a descent direction; fall back to steepest descent
      for (size_t jj = 0; jj < dim; ++jj) dir[jj] = -grad[jj];
      gd = -dot(grad, grad);
    }

    // Armijo backtracking.
    double t = it == 0 ? 1.0 / std::max(1.0, l2_norm(grad)) : 1.0;
    std::vector<double> theta2(dim), grad2(dim);
    double f2 = 0.0;
    bool moved = false;
    for (int ls = 0; ls < 60; ++ls) {
      for (size_t jj = 0; jj < dim; ++jj) theta2[jj] = theta[jj] + t * dir[jj];
      f2 = evaluate(theta2, grad2);
      if (std::isfinite(f2) && f2 <= f + 1e-4 * t * gd) {
        moved = true;
        break;
      }
      t *= 0.5;
    }
    if (!moved) break;  // no progress possible at machine precision

    std::vector<double> sk(dim), yk(dim);
    for (size_t jj = 0; jj < dim; ++jj) {
      sk[jj] = theta2[jj] - theta[jj];
      yk[jj] = grad2[jj] - grad[jj];
    }
    const double sy = dot(sk, yk);
    if (sy > 1e-12 * l2_norm(sk) * l2_norm(yk)) {
      hist_s.push_back(std::move(sk));
      hist_y.push_back(std::move(yk));
      hist_rho.push_back(1.0 / sy);
      if (static_cast<int>(hist_s.size()) > cfg.memory) {
        hist_s.erase(hist_s.begin());
        hist_y.erase(hist_y.begin());
        hist_rho.erase(hist_rho.begin());
      }
    }
    theta.swap(theta2);
    grad.swap(grad2);
    f = f2;
  }

  LinearModel model;
  model.weights.assign(n_cols, 0.0);
  for (size_t jj = 0; jj < d; ++jj) model.weights[numeric[jj]] = theta[jj];
  model.intercept = cfg.fit_intercept ? theta[d] : 0.0;
  model.final_grad_norm = inf_norm(grad);
  model.converged = model.final_grad_norm < cfg.tolerance;
  model.iterations = it;
  model.feature_names.reserve(n_cols);
  for (const FeatureColumn& c : X.columns) model.feature_names.push_back(c.name);
  return model;
}

std::vector<double> predict_logistic(const LinearModel& model, const FeatureMatrix& X) {
  check_layout(model.feature_names, X, "predict_logistic");
  const std::vector<size_t> numeric = X.numeric_column_indices();
  const size_t n_cols = X.n_cols();
  std::vector<double> out(X.n_rows());
  for (size_t r = 0; r < X.n_rows(); ++r) {
    const double* row = &X.values[r * n_cols];
    double z = model.intercept;
    for (size_t c : numeric) {
      if (is_missing(row[c])) {
        throw DataError("predict_logistic: missing value in column '" + X.columns[c].name +
                        "' row " + std::to_string(r) + "; impute before scoring");
      }
      z += model.weights[c] * row[c];
    }
    out[r] = sigmoid(z);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Isotonic calibration.

IsotonicModel calibrate_isotonic(const std::vector<double>& scores,
                                 const std::vector<int8_t>& labels) {
  if (scores.size() != labels.size()) {
    throw DataError("calibrate_isotonic: " + std::to_string(scores.size()) + " scores vs " +
                    std::to_string(labels.size()) + " labels");
  }
  if (scores.empty()) throw DataError("calibrate_isotonic: no data");
  check_labels(labels, labels.size(), "calibrate_isotonic");
  for (size_t i = 0; i < scores.size(); ++i) {
    if (!std::isfinite(scores[i])) {
      throw DataError("calibrate_isotonic: score " + std::to_string(i) + " is not finite");
    }
  }

  std::vector<uint32_t> order(scores.size());
  for (uint32_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](uint32_t a, uint32_t b) {
    if (scores[a] != scores[b]) return scores[a] < scores[b];
    return a < b;
  });

  // Pool ties first so the calibration is a function of the score.
  std::vector<double> xs;
  std::vector<double> sum_y, weight;
  for (uint32_t i : order) {
    if (!xs.empty() && scores[i] == xs.back()) {
      sum_y.back() += static_cast<double>(labels[i]);
      weight.back() += 1.0;
    } else {
      xs.push_back(scores[i]);
      sum_y.push_back(static_cast<double>(labels[i]));
      weight.push_back(1.0);
    }
  }
  if (xs.size() < 2) {
    throw DataError("calibrate_isotonic: needs at least two distinct scores, got " +
                    std::to_string(xs.size()));
  }

  // Pool adjacent violators. Blocks carry (sum, weight, last unique index);
  // means are compared via cross-multiplication to avoid division.
  struct Block {
    double sum;
    double w;
    size_t end;  // inclusive index into xs
  };
  std::vector<Block> blocks;
  blocks.reserve(xs.size());
  for (size_t u = 0; u < xs.size(); ++u) {
    blocks.push_back(Block{sum_y[u], weight[u], u});
    while (blocks.size() >= 2) {
      const Block& prev = blocks[blocks.size() - 2];
      const Block& cur = blocks.back();
      if (prev.sum * cur.w <= cur.sum * prev.w) break;  // non-decreasing, done
      Block merged{prev.sum + cur.sum, prev.w + cur.w, cur.end};
      blocks.pop_back();
      blocks.back() = merged;
    }
  }

  IsotonicModel model;
  model.x = std::move(xs);
  model.y.resize(model.x.size());
  size_t u = 0;
  for (const Block& b : blocks) {
    const double mean = b.sum / b.w;
    for (; u <= b.end; ++u) model.y[u] = mean;
  }
  return model;
}

double IsotonicModel::apply(double s) const {
  if (std::isnan(s)) return s;
  auto it = std::upper_bound(x.begin(), x.end(), s);
  if (it == x.begin()) return y.front();
  return y[static_cast<size_t>(it - x.begin()) - 1];
}

std::vector<double> apply_isotonic(const IsotonicModel& model, const std::vector<double>& scores) {
  std::vector<double> out(scores.size());
  for (size_t i = 0; i < scores.size(); ++i) out[i] = model.apply(scores[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Hybrid features.

FeatureMatrix hybrid_features(const FeatureMatrix& X, const Embeddings& z,
                              const std::vector<int64_t>& z_row_ids) {
  if (z.n_rows != z_row_ids.size()) {
    throw DataError("hybrid_features: " + std::to_string(z.n_rows) + " embedding rows vs " +
                    std::to_string(z_row_ids.size()) + " row ids");
  }
  if (z.dim == 0) throw DataError("hybrid_features: embeddings have zero dimension");
  std::unordered_map<int64_t, size_t> where;
  where.reserve(z_row_ids.size() * 2);
  for (size_t i = 0; i < z_row_ids.size(); ++i) {
    if (!where.emplace(z_row_ids[i], i).second) {
      throw DataError("hybrid_features: duplicate embedding row id " +
                      std::to_string(z_row_ids[i]));
    }
  }

  FeatureMatrix out;
  out.row_ids = X.row_ids;
  out.columns = X.columns;
  char name[32];
  for (size_t j = 0; j < z.dim; ++j) {
    std::snprintf(name, sizeof(name), "gnn_emb_%03zu", j);
    FeatureColumn col;
    col.name = name;
    col.lineage = Lineage::engineered;
    out.columns.push_back(std::move(col));
  }

  const size_t tab_cols = X.n_cols();
  const size_t all_cols = tab_cols + z.dim;
  out.values.resize(X.n_rows() * all_cols);
  for (size_t r = 0; r < X.n_rows(); ++r) {
    double* dst = &out.values[r * all_cols];
    const double* src = &X.values[r * tab_cols];
    std::copy(src, src + tab_cols, dst);
    const auto it = where.find(X.row_ids[r]);
    if (it == where.end()) {
      throw DataError("hybrid_features: no embedding row for id " +
                      std::to_string(X.row_ids[r]));
    }
    const float* zr = z.row(it->second);
    for (size_t j = 0; j < z.dim; ++j) dst[tab_cols + j] = static_cast<double>(zr[j]);
  }
  return out;
}

GbdtModel fit_hybrid(const FeatureMatrix& X, const Embeddings& z,
                     const std::vector<int64_t>& z_row_ids, const std::vector<int8_t>& y,
                     const std::vector<uint32_t>& train_rows,
                     const std::vector<uint32_t>& val_rows, const GbdtParams& params) {
  const FeatureMatrix joined = hybrid_features(X, z, z_row_ids);
  return fit_gbdt(joined, y, train_rows, val_rows, params);
}

}  // namespace relrisk
