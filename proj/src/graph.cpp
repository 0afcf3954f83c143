#include "relrisk/graph.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <unordered_map>

#include <nlohmann/json.hpp>

namespace relrisk {

static_assert(std::endian::native == std::endian::little,
              "graph binary format is little-endian");

namespace {

constexpr const char* kTypeNames[kNumNodeTypes] = {
    "customer", "prev_application", "bureau_record",
    "installment", "pos_cash", "credit_card"};

// Roll-up prefixes produced by engineer_features; customer node features
// deliberately exclude them so child information reaches the model only
// through message passing.
const std::vector<std::string>& rollup_prefixes() {
  static const std::vector<std::string> prefixes = {"BUREAU_", "PREV_", "INS_",
                                                    "POS_", "CC_"};
  return prefixes;
}

bool has_rollup_prefix(const std::string& name) {
  for (const auto& p : rollup_prefixes()) {
    if (name.rfind(p, 0) == 0) return true;
  }
  return false;
}

struct TypedRows {
  std::vector<size_t> table_rows;   // node -> source table row
  std::vector<int64_t> ids;         // node -> global id
  std::vector<uint32_t> parent;     // node -> parent node row (empty for customers)
};

std::vector<size_t> all_indices(size_t n) {
  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), size_t{0});
  return idx;
}

// Gathers the table's numeric columns for the given rows into a matrix in
// node order, then median-imputes and scales with state fitted on the
// train-owned rows (falling back to every row on fixtures with no train
// overlap). Guarantees at least one feature column.
NodeSet build_node_features(const Table& table, const TypedRows& rows,
                            const std::vector<size_t>& train_rows,
                            const PreprocessConfig& pcfg) {
  NodeSet ns;
  ns.n_nodes = rows.ids.size();
  ns.global_ids = rows.ids;

  FeatureMatrix fm;
  fm.row_ids = rows.ids;
  for (const auto& col : table.columns) {
    if (col.kind != ColumnKind::numeric) continue;
    std::vector<double> values(rows.table_rows.size());
    for (size_t i = 0; i < rows.table_rows.size(); ++i) {
      values[i] = col.nums[rows.table_rows[i]];
    }
    fm.add_column({col.name, Lineage::raw, false, {}}, values);
  }

  if (ns.n_nodes == 0) {
    for (const auto& col : fm.columns) ns.feature_names.push_back(col.name);
    if (ns.feature_names.empty()) ns.feature_names.push_back("CONST_ONE");
    ns.n_features = ns.feature_names.size();
    return ns;
  }

  FeatureMatrix scaled;
  if (fm.n_cols() > 0) {
    const auto& fit_rows = train_rows.empty() ? all_indices(ns.n_nodes) : train_rows;
    PreprocessState state = fit_preprocess(fm, fit_rows, pcfg);
    scaled = apply_preprocess(state, fm);
  }
  if (scaled.n_cols() == 0) {
    scaled.row_ids = fm.row_ids;
    scaled.add_column({"CONST_ONE", Lineage::engineered, false, {}},
                      std::vector<double>(ns.n_nodes, 1.0));
  }

  ns.n_features = scaled.n_cols();
  for (const auto& col : scaled.columns) ns.feature_names.push_back(col.name);
  ns.features.resize(ns.n_nodes * ns.n_features);
  for (size_t r = 0; r < ns.n_nodes; ++r) {
    for (size_t c = 0; c < ns.n_features; ++c) {
      ns.features[r * ns.n_features + c] = static_cast<float>(scaled.at(r, c));
    }
  }
  return ns;
}

// Forward CSR parent->child plus its exact transpose. Children arrive in
// node order, so each forward row's targets ascend.
void append_relation_pair(std::vector<Relation>& forwards, std::vector<Relation>& reverses,
                          NodeType parent_type, NodeType child_type, const std::string& name,
                          size_t n_parents, const std::vector<uint32_t>& child_parent) {
  Relation fwd;
  fwd.src = parent_type;
  fwd.dst = child_type;
  fwd.name = name;
  fwd.offsets.assign(n_parents + 1, 0);
  for (uint32_t p : child_parent) fwd.offsets[p + 1]++;
  for (size_t i = 1; i <= n_parents; ++i) fwd.offsets[i] += fwd.offsets[i - 1];
  fwd.targets.resize(child_parent.size());
  std::vector<uint64_t> cursor(fwd.offsets.begin(), fwd.offsets.end() - 1);
  for (size_t j = 0; j < child_parent.size(); ++j) {
    fwd.targets[cursor[child_parent[j]]++] = static_cast<uint32_t>(j);
  }

  Relation rev;
  rev.src = child_type;
  rev.dst = parent_type;
  rev.name = "rev_" + name;
  rev.offsets.resize(child_parent.size() + 1);
  std::iota(rev.offsets.begin(), rev.offsets.end(), uint64_t{0});
  rev.targets = child_parent;

  forwards.push_back(std::move(fwd));
  reverses.push_back(std::move(rev));
}

}  // namespace

const char* node_type_name(NodeType t) { return kTypeNames[static_cast<int>(t)]; }

NodeType node_type_from_name(const std::string& name) {
  for (int i = 0; i < kNumNodeTypes; ++i) {
    if (name == kTypeNames[i]) return static_cast<NodeType>(i);
  }
  throw DataError("unknown node type: " + name);
}

int HeteroGraph::relation_index(const std::string& name) const {
  for (size_t i = 0; i < relations.size(); ++i) {
    if (relations[i].name == name) return static_cast<int>(i);
  }
  return -1;
}

const Relation& HeteroGraph::relation(const std::string& name) const {
  int idx = relation_index(name);
  if (idx < 0) throw DataError("unknown relation: " + name);
  return relations[idx];
}

std::vector<uint32_t> HeteroGraph::mask_rows(const std::vector<uint8_t>& mask) const {
  std::vector<uint32_t> rows;
  for (size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) rows.push_back(static_cast<uint32_t>(i));
  }
  return rows;
}

void stratified_masks(const std::vector<int8_t>& labels, double val_fraction,
                      double test_fraction, uint64_t seed, std::vector<uint8_t>& train,
                      std::vector<uint8_t>& val, std::vector<uint8_t>& test) {
  if (val_fraction < 0.0 || test_fraction < 0.0 || val_fraction + test_fraction >= 1.0) {
    throw ConfigError("split fractions must be non-negative and sum below 1");
  }
  const size_t n = labels.size();
  train.assign(n, 0);
  val.assign(n, 0);
  test.assign(n, 0);
  for (int cls = 0; cls <= 1; ++cls) {
    std::vector<size_t> idx;
    for (size_t i = 0; i < n; ++i) {
      if (labels[i] == cls) idx.push_back(i);
    }
    Rng rng(mix_seed(seed, 101 + static_cast<uint64_t>(cls)));
    rng.shuffle(idx);
    const size_t n_test = static_cast<size_t>(std::llround(test_fraction * double(idx.size())));
    const size_t n_val = static_cast<size_t>(std::llround(val_fraction * double(idx.size())));
    for (size_t k = 0; k < idx.size(); ++k) {
      if (k < n_test) test[idx[k]] = 1;
      else if (k < n_test + n_val) val[idx[k]] = 1;
      else train[idx[k]] = 1;
    }
  }
}

HeteroGraph build_hetero_graph(const RelationalDataset& ds, const GraphConfig& config) {
  for (const char* name : {"application", "bureau", "previous_application",
                           "installments_payments", "pos_cash_balance",
                           "credit_card_balance"}) {
    if (ds.tables.find(name) == ds.tables.end()) {
      throw DataError("graph build requires table: " + std::string(name));
    }
  }

  HeteroGraph g;
  const Table& app = ds.table("application");
  const Table& bureau = ds.table("bureau");
  const Table& prev = ds.table("previous_application");

  // Customers: application rows sorted by key.
  TypedRows cust;
  {
    const auto& keys = app.col("SK_ID_CURR").keys;
    cust.table_rows = all_indices(app.n_rows);
    std::stable_sort(cust.table_rows.begin(), cust.table_rows.end(),
                     [&](size_t a, size_t b) { return keys[a] < keys[b]; });
    cust.ids.reserve(app.n_rows);
    for (size_t r : cust.table_rows) cust.ids.push_back(keys[r]);
  }
  std::unordered_map<int64_t, uint32_t> cust_row;
  cust_row.reserve(cust.ids.size() * 2);
  for (size_t i = 0; i < cust.ids.size(); ++i) {
    cust_row[cust.ids[i]] = static_cast<uint32_t>(i);
  }

  // Keyed children of customer, sorted by own key; orphans dropped.
  auto keyed_child = [&](const Table& t, const char* own_key) {
    TypedRows rows;
    const auto& own = t.col(own_key).keys;
    const auto& fk = t.col("SK_ID_CURR").keys;
    std::vector<size_t> kept;
    for (size_t r = 0; r < t.n_rows; ++r) {
      if (cust_row.count(fk[r])) kept.push_back(r);
    }
    std::stable_sort(kept.begin(), kept.end(),
                     [&](size_t a, size_t b) { return own[a] < own[b]; });
    for (size_t r : kept) {
      rows.table_rows.push_back(r);
      rows.ids.push_back(own[r]);
      rows.parent.push_back(cust_row.at(fk[r]));
    }
    return rows;
  };
  TypedRows bur = keyed_child(bureau, "SK_ID_BUREAU");
  TypedRows prv = keyed_child(prev, "SK_ID_PREV");

  std::unordered_map<int64_t, uint32_t> prev_row;
  prev_row.reserve(prv.ids.size() * 2);
  for (size_t i = 0; i < prv.ids.size(); ++i) {
    prev_row[prv.ids[i]] = static_cast<uint32_t>(i);
  }

  // Keyless grandchildren in file row order (row index is the global id);
  // rows under an excluded previous application drop out transitively.
  auto keyless_child = [&](const Table& t) {
    TypedRows rows;
    const auto& fk = t.col("SK_ID_PREV").keys;
    for (size_t r = 0; r < t.n_rows; ++r) {
      auto it = prev_row.find(fk[r]);
      if (it == prev_row.end()) continue;
      rows.table_rows.push_back(r);
      rows.ids.push_back(static_cast<int64_t>(r));
      rows.parent.push_back(it->second);
    }
    return rows;
  };
  TypedRows ins = keyless_child(ds.table("installments_payments"));
  TypedRows pos = keyless_child(ds.table("pos_cash_balance"));
  TypedRows card = keyless_child(ds.table("credit_card_balance"));

  // Labels and split masks come before feature fitting: scalers and medians
  // may only see train-owned rows.
  {
    std::vector<int> raw = ds.labels();
    g.labels.resize(raw.size());
    for (size_t i = 0; i < cust.table_rows.size(); ++i) {
      g.labels[i] = static_cast<int8_t>(raw[cust.table_rows[i]]);
    }
  }
  stratified_masks(g.labels, config.val_fraction, config.test_fraction, config.split_seed,
                   g.train_mask, g.val_mask, g.test_mask);

  auto train_owned = [&](const TypedRows& rows, const std::vector<uint32_t>* grand_parent) {
    std::vector<size_t> out;
    for (size_t i = 0; i < rows.parent.size(); ++i) {
      uint32_t c = grand_parent ? (*grand_parent)[rows.parent[i]] : rows.parent[i];
      if (g.train_mask[c]) out.push_back(i);
    }
    return out;
  };

  // Customer features: application-level numeric columns only (raw columns
  // plus the application ratios); roll-ups and target-encoded columns stay
  // with the tabular models.
  {
    NodeSet& ns = g.node_set(NodeType::customer);
    ns.n_nodes = cust.ids.size();
    ns.global_ids = cust.ids;
    if (config.structure_only_features) {
      ns.feature_names = {"CONST_ONE"};
      ns.n_features = 1;
      ns.features.assign(ns.n_nodes, 1.0f);
    } else {
      FeatureMatrix full = engineer_features(ds);
      std::vector<std::string> keep;
      if (!config.customer_columns.empty()) {
        for (const auto& name : config.customer_columns) {
          if (full.col_index(name) < 0) {
            throw ConfigError("customer feature column not found: " + name);
          }
          keep.push_back(name);
        }
      } else {
        for (const auto& col : full.columns) {
          if (col.categorical || col.lineage == Lineage::target_encoded) continue;
          if (has_rollup_prefix(col.name)) continue;
          keep.push_back(col.name);
        }
      }
      std::unordered_map<int64_t, size_t> fm_row;
      fm_row.reserve(full.n_rows() * 2);
      for (size_t r = 0; r < full.n_rows(); ++r) fm_row[full.row_ids[r]] = r;

      FeatureMatrix fm;
      fm.row_ids = cust.ids;
      for (const auto& name : keep) {
        size_t c = static_cast<size_t>(full.col_index(name));
        std::vector<double> values(ns.n_nodes);
        for (size_t i = 0; i < ns.n_nodes; ++i) {
          values[i] = full.at(fm_row.at(cust.ids[i]), c);
        }
        fm.add_column(full.columns[c], values);
      }
      std::vector<size_t> train_rows;
      for (size_t i = 0; i < ns.n_nodes; ++i) {
        if (g.train_mask[i]) train_rows.push_back(i);
      }
      if (train_rows.empty()) train_rows = all_indices(ns.n_nodes);
      PreprocessState state = fit_preprocess(fm, train_rows, config.preprocess);
      FeatureMatrix scaled = apply_preprocess(state, fm);
      if (scaled.n_cols() == 0) {
        scaled.row_ids = fm.row_ids;
        scaled.add_column({"CONST_ONE", Lineage::engineered, false, {}},
                          std::vector<double>(ns.n_nodes, 1.0));
      }
      ns.n_features = scaled.n_cols();
      for (const auto& col : scaled.columns) ns.feature_names.push_back(col.name);
      ns.features.resize(ns.n_nodes * ns.n_features);
      for (size_t r = 0; r < ns.n_nodes; ++r) {
        for (size_t c = 0; c < ns.n_features; ++c) {
          ns.features[r * ns.n_features + c] = static_cast<float>(scaled.at(r, c));
        }
      }
    }
  }
  g.node_set(NodeType::bureau_record) =
      build_node_features(bureau, bur, train_owned(bur, nullptr), config.preprocess);
  g.node_set(NodeType::prev_application) =
      build_node_features(prev, prv, train_owned(prv, nullptr), config.preprocess);
  g.node_set(NodeType::installment) = build_node_features(
      ds.table("installments_payments"), ins, train_owned(ins, &prv.parent), config.preprocess);
  g.node_set(NodeType::pos_cash) = build_node_features(
      ds.table("pos_cash_balance"), pos, train_owned(pos, &prv.parent), config.preprocess);
  g.node_set(NodeType::credit_card) = build_node_features(
      ds.table("credit_card_balance"), card, train_owned(card, &prv.parent), config.preprocess);

  std::vector<Relation> forwards;
  std::vector<Relation> reverses;
  const size_t n_cust = cust.ids.size();
  const size_t n_prev = prv.ids.size();
  append_relation_pair(forwards, reverses, NodeType::customer, NodeType::bureau_record,
                       "has_bureau", n_cust, bur.parent);
  append_relation_pair(forwards, reverses, NodeType::customer, NodeType::prev_application,
                       "has_prev", n_cust, prv.parent);
  append_relation_pair(forwards, reverses, NodeType::prev_application, NodeType::installment,
                       "has_installment", n_prev, ins.parent);
  append_relation_pair(forwards, reverses, NodeType::prev_application, NodeType::pos_cash,
                       "has_pos", n_prev, pos.parent);
  append_relation_pair(forwards, reverses, NodeType::prev_application, NodeType::credit_card,
                       "has_card", n_prev, card.parent);
  const int n_fwd = static_cast<int>(forwards.size());
  for (int i = 0; i < n_fwd; ++i) {
    forwards[i].reverse_index = n_fwd + i;
    reverses[i].reverse_index = i;
    g.relations.push_back(std::move(forwards[i]));
  }
  for (auto& r : reverses) g.relations.push_back(std::move(r));

  for (const auto& rel : g.relations) {
    const size_t n_dst = g.nodes[static_cast<int>(rel.dst)].n_nodes;
    for (uint32_t t : rel.targets) {
      if (t >= n_dst) {
        throw DataError("internal: relation " + rel.name +
                        " references a missing node after orphan filtering");
      }
    }
  }
  return g;
}

GraphReport validate_graph(const HeteroGraph& g) {
  GraphReport report;
  for (int t = 0; t < kNumNodeTypes; ++t) report.node_counts[t] = g.nodes[t].n_nodes;

  for (size_t i = 0; i < g.relations.size(); ++i) {
    const Relation& rel = g.relations[i];
    const size_t n_src = g.nodes[static_cast<int>(rel.src)].n_nodes;
    const size_t n_dst = g.nodes[static_cast<int>(rel.dst)].n_nodes;
    RelationStat stat;
    stat.name = rel.name;
    stat.src = node_type_name(rel.src);
    stat.dst = node_type_name(rel.dst);
    stat.n_edges = rel.n_edges();

    if (rel.offsets.size() != n_src + 1) {
      report.violations.push_back("relation " + rel.name + ": offsets size " +
                                  std::to_string(rel.offsets.size()) + " != src count + 1");
      report.relations.push_back(std::move(stat));
      continue;
    }
    bool monotone = rel.offsets.empty() || rel.offsets[0] == 0;
    for (size_t k = 1; k < rel.offsets.size() && monotone; ++k) {
      if (rel.offsets[k] < rel.offsets[k - 1]) monotone = false;
    }
    if (!monotone) {
      report.violations.push_back("relation " + rel.name + ": non-monotone offsets");
      report.relations.push_back(std::move(stat));
      continue;
    }
    if (rel.offsets.back() != rel.targets.size()) {
      report.violations.push_back("relation " + rel.name +
                                  ": offsets end does not match target count");
    }
    for (uint32_t t : rel.targets) {
      if (t >= n_dst) {
        report.violations.push_back("relation " + rel.name + ": target out of range");
        break;
      }
    }
    for (size_t s = 0; s < n_src; ++s) {
      size_t deg = static_cast<size_t>(rel.offsets[s + 1] - rel.offsets[s]);
      stat.max_out_degree = std::max(stat.max_out_degree, deg);
      if (deg >= stat.out_degree_hist.size()) stat.out_degree_hist.resize(deg + 1, 0);
      stat.out_degree_hist[deg]++;
    }

    if (rel.reverse_index < 0 || rel.reverse_index >= static_cast<int>(g.relations.size())) {
      report.violations.push_back("relation " + rel.name + ": missing reverse relation");
    } else {
      const Relation& rev = g.relations[rel.reverse_index];
      if (rev.src != rel.dst || rev.dst != rel.src ||
          rev.reverse_index != static_cast<int>(i)) {
        report.violations.push_back("relation " + rel.name + ": reverse relation mismatch");
      } else if (rev.offsets.size() == g.nodes[static_cast<int>(rev.src)].n_nodes + 1 &&
                 !rev.offsets.empty() && rev.offsets.back() == rev.targets.size()) {
        std::vector<std::pair<uint32_t, uint32_t>> fwd_edges;
        std::vector<std::pair<uint32_t, uint32_t>> rev_edges;
        fwd_edges.reserve(rel.n_edges());
        rev_edges.reserve(rev.n_edges());
        for (size_t s = 0; s + 1 < rel.offsets.size(); ++s) {
          for (uint64_t k = rel.offsets[s]; k < rel.offsets[s + 1]; ++k) {
            fwd_edges.emplace_back(static_cast<uint32_t>(s), rel.targets[k]);
          }
        }
        for (size_t s = 0; s + 1 < rev.offsets.size(); ++s) {
          for (uint64_t k = rev.offsets[s]; k < rev.offsets[s + 1]; ++k) {
            rev_edges.emplace_back(rev.targets[k], static_cast<uint32_t>(s));
          }
        }
        std::sort(fwd_edges.begin(), fwd_edges.end());
        std::sort(rev_edges.begin(), rev_edges.end());
        if (fwd_edges != rev_edges) {
          report.violations.push_back("relation " + rel.name +
                                      ": reverse is not an exact transpose");
        }
      }
    }
    report.relations.push_back(std::move(stat));
  }

  const size_t n_cust = g.nodes[static_cast<int>(NodeType::customer)].n_nodes;
  if (g.labels.size() != n_cust) {
    report.violations.push_back("labels size does not match customer count");
  } else {
    for (int8_t v : g.labels) {
      if (v != 0 && v != 1) {
        report.violations.push_back("label outside {0,1}");
        break;
      }
    }
  }
  if (g.train_mask.size() != n_cust || g.val_mask.size() != n_cust ||
      g.test_mask.size() != n_cust) {
    report.violations.push_back("mask size does not match customer count");
  } else {
    for (size_t i = 0; i < n_cust; ++i) {
      int total = int(g.train_mask[i] != 0) + int(g.val_mask[i] != 0) + int(g.test_mask[i] != 0);
      if (total != 1) {
        report.violations.push_back("masks must assign each customer to exactly one split");
        break;
      }
    }
  }

  for (int t = 0; t < kNumNodeTypes; ++t) {
    const NodeSet& ns = g.nodes[t];
    if (ns.global_ids.size() != ns.n_nodes ||
        ns.features.size() != ns.n_nodes * ns.n_features ||
        ns.feature_names.size() != ns.n_features) {
      report.violations.push_back(std::string("node set ") + kTypeNames[t] +
                                  ": inconsistent sizes");
    }
  }
  return report;
}

std::string GraphReport::to_text() const {
  std::string out;
  for (int t = 0; t < kNumNodeTypes; ++t) {
    out += "nodes ";
    out += kTypeNames[t];
    out += " " + std::to_string(node_counts[t]) + "\n";
  }
  for (const auto& r : relations) {
    out += "relation " + r.name + " " + r.src + "->" + r.dst + " edges " +
           std::to_string(r.n_edges) + " max_out_degree " + std::to_string(r.max_out_degree) +
           "\n";
  }
  if (violations.empty()) {
    out += "ok\n";
  } else {
    for (const auto& v : violations) out += "violation: " + v + "\n";
  }
  return out;
}

std::string GraphReport::to_json() const {
  nlohmann::json j;
  for (int t = 0; t < kNumNodeTypes; ++t) j["node_counts"][kTypeNames[t]] = node_counts[t];
  j["relations"] = nlohmann::json::array();
  for (const auto& r : relations) {
    nlohmann::json jr;
    jr["name"] = r.name;
    jr["src"] = r.src;
    jr["dst"] = r.dst;
    jr["n_edges"] = r.n_edges;
    jr["max_out_degree"] = r.max_out_degree;
    jr["out_degree_hist"] = r.out_degree_hist;
    j["relations"].push_back(jr);
  }
  j["violations"] = violations;
  return j.dump(2);
}

// ---------------------------------------------------------------------------
// Persistence

namespace {

constexpr char kNodeMagic[8] = {'R', 'R', 'G', 'N', 'O', 'D', 'E', '1'};
constexpr char kRelMagic[8] = {'R', 'R', 'G', 'R', 'E', 'L', 'B', '1'};
constexpr char kLabelMagic[8] = {'R', 'R', 'G', 'L', 'A', 'B', 'L', '1'};
constexpr uint32_t kFormatVersion = 1;

struct BinWriter {
  std::string buf;

  template <typename T>
  void put(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    const char* p = reinterpret_cast<const char*>(&v);
    buf.append(p, sizeof(T));
  }
  template <typename T>
  void put_vec(const std::vector<T>& v) {
    static_assert(std::is_trivially_copyable_v<T>);
    buf.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(T));
  }
  void put_magic(const char (&magic)[8]) { buf.append(magic, 8); }
};

struct BinReader {
  const std::string& buf;
  size_t pos = 0;
  std::string file;

  template <typename T>
  T get() {
    static_assert(std::is_trivially_copyable_v<T>);
    if (pos + sizeof(T) > buf.size()) throw DataError("truncated graph file: " + file);
    T v;
    std::memcpy(&v, buf.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
  }
  template <typename T>
  std::vector<T> get_vec(size_t n) {
    static_assert(std::is_trivially_copyable_v<T>);
    // Divide instead of multiplying so corrupt counts cannot overflow.
    if (n > (buf.size() - pos) / sizeof(T)) throw DataError("truncated graph file: " + file);
    std::vector<T> v(n);
    std::memcpy(v.data(), buf.data() + pos, n * sizeof(T));
    pos += n * sizeof(T);
    return v;
  }
  void expect_magic(const char (&magic)[8]) {
    if (pos + 8 > buf.size() || std::memcmp(buf.data() + pos, magic, 8) != 0) {
      throw DataError("bad magic in graph file: " + file);
    }
    pos += 8;
  }
};

void write_binary_file(const std::string& path, const std::string& buf) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open for writing: " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw DataError("write failed: " + path);
}

std::string read_binary_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open graph file: " + path);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return buf;
}

}  // namespace

void save_graph(const HeteroGraph& g, const std::string& directory) {
  namespace fs = std::filesystem;
  fs::create_directories(directory);

  nlohmann::json manifest;
  manifest["format"] = "relrisk-graph";
  manifest["version"] = kFormatVersion;

  for (int t = 0; t < kNumNodeTypes; ++t) {
    const NodeSet& ns = g.nodes[t];
    BinWriter w;
    w.put_magic(kNodeMagic);
    w.put<uint32_t>(kFormatVersion);
    w.put<uint32_t>(0);
    w.put<uint64_t>(ns.n_nodes);
    w.put<uint64_t>(ns.n_features);
    w.put_vec(ns.global_ids);
    w.put_vec(ns.features);
    write_binary_file(directory + "/nodes_" + kTypeNames[t] + ".bin", w.buf);

    nlohmann::json jt;
    jt["name"] = kTypeNames[t];
    jt["n_nodes"] = ns.n_nodes;
    jt["n_features"] = ns.n_features;
    jt["feature_names"] = ns.feature_names;
    manifest["node_types"].push_back(jt);
  }

  for (const auto& rel : g.relations) {
    BinWriter w;
    w.put_magic(kRelMagic);
    w.put<uint32_t>(kFormatVersion);
    w.put<uint32_t>(0);
    w.put<uint64_t>(rel.offsets.size());
    w.put<uint64_t>(rel.targets.size());
    w.put_vec(rel.offsets);
    w.put_vec(rel.targets);
    write_binary_file(directory + "/rel_" + rel.name + ".bin", w.buf);

    nlohmann::json jr;
    jr["name"] = rel.name;
    jr["src"] = node_type_name(rel.src);
    jr["dst"] = node_type_name(rel.dst);
    jr["n_edges"] = rel.n_edges();
    jr["reverse"] = rel.reverse_index;
    manifest["relations"].push_back(jr);
  }

  {
    BinWriter w;
    w.put_magic(kLabelMagic);
    w.put<uint32_t>(kFormatVersion);
    w.put<uint32_t>(0);
    w.put<uint64_t>(g.labels.size());
    w.put_vec(g.labels);
    w.put_vec(g.train_mask);
    w.put_vec(g.val_mask);
    w.put_vec(g.test_mask);
    write_binary_file(directory + "/labels.bin", w.buf);
  }

  size_t positives = 0;
  for (int8_t v : g.labels) positives += (v == 1);
  manifest["n_customers"] = g.labels.size();
  manifest["positives"] = positives;
  manifest["train_count"] = g.mask_rows(g.train_mask).size();
  manifest["val_count"] = g.mask_rows(g.val_mask).size();
  manifest["test_count"] = g.mask_rows(g.test_mask).size();
  write_binary_file(directory + "/manifest.json", manifest.dump(2) + "\n");
}

HeteroGraph load_graph(const std::string& directory) {
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_binary_file(directory + "/manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("invalid graph manifest: " + std::string(e.what()));
  }
  if (manifest.value("format", "") != "relrisk-graph" ||
      manifest.value("version", 0u) != kFormatVersion) {
    throw DataError("unsupported graph manifest format in " + directory);
  }
  if (!manifest.contains("node_types") || !manifest.contains("relations")) {
    throw DataError("graph manifest missing node_types/relations in " + directory);
  }

  HeteroGraph g;
  for (const auto& jt : manifest.at("node_types")) {
    NodeType t = node_type_from_name(jt.at("name").get<std::string>());
    NodeSet& ns = g.node_set(t);
    std::string path = directory + "/nodes_" + node_type_name(t) + ".bin";
    std::string buf = read_binary_file(path);
    BinReader r{buf, 0, path};
    r.expect_magic(kNodeMagic);
    if (r.get<uint32_t>() != kFormatVersion) throw DataError("bad version in " + path);
    r.get<uint32_t>();
    ns.n_nodes = r.get<uint64_t>();
    ns.n_features = r.get<uint64_t>();
    ns.global_ids = r.get_vec<int64_t>(ns.n_nodes);
    ns.features = r.get_vec<float>(ns.n_nodes * ns.n_features);
    ns.feature_names = jt.at("feature_names").get<std::vector<std::string>>();
    if (ns.feature_names.size() != ns.n_features) {
      throw DataError("manifest feature names disagree with " + path);
    }
  }

  for (const auto& jr : manifest.at("relations")) {
    Relation rel;
    rel.name = jr.at("name").get<std::string>();
    rel.src = node_type_from_name(jr.at("src").get<std::string>());
    rel.dst = node_type_from_name(jr.at("dst").get<std::string>());
    rel.reverse_index = jr.at("reverse").get<int>();
    std::string path = directory + "/rel_" + rel.name + ".bin";
    std::string buf = read_binary_file(path);
    BinReader r{buf, 0, path};
    r.expect_magic(kRelMagic);
    if (r.get<uint32_t>() != kFormatVersion) throw DataError("bad version in " + path);
    r.get<uint32_t>();
    const uint64_t n_offsets = r.get<uint64_t>();
    const uint64_t n_targets = r.get<uint64_t>();
    rel.offsets = r.get_vec<uint64_t>(n_offsets);
    rel.targets = r.get_vec<uint32_t>(n_targets);
    if (jr.at("n_edges").get<uint64_t>() != rel.targets.size()) {
      throw DataError("manifest edge count disagrees with " + path);
    }
    g.relations.push_back(std::move(rel));
  }

  {
    std::string path = directory + "/labels.bin";
    std::string buf = read_binary_file(path);
    BinReader r{buf, 0, path};
    r.expect_magic(kLabelMagic);
    if (r.get<uint32_t>() != kFormatVersion) throw DataError("bad version in " + path);
    r.get<uint32_t>();
    const uint64_t n = r.get<uint64_t>();
    g.labels = r.get_vec<int8_t>(n);
    g.train_mask = r.get_vec<uint8_t>(n);
    g.val_mask = r.get_vec<uint8_t>(n);
    g.test_mask = r.get_vec<uint8_t>(n);
  }
  return g;
}

bool graphs_equal(const HeteroGraph& a, const HeteroGraph& b) {
  for (int t = 0; t < kNumNodeTypes; ++t) {
    const NodeSet& x = a.nodes[t];
    const NodeSet& y = b.nodes[t];
    if (x.n_nodes != y.n_nodes || x.n_features != y.n_features ||
        x.global_ids != y.global_ids || x.feature_names != y.feature_names ||
        x.features.size() != y.features.size()) {
      return false;
    }
    // Bitwise float comparison: features contain no NaN by contract.
    if (std::memcmp(x.features.data(), y.features.data(),
                    x.features.size() * sizeof(float)) != 0) {
      return false;
    }
  }
  if (a.relations.size() != b.relations.size()) return false;
  for (size_t i = 0; i < a.relations.size(); ++i) {
    const Relation& x = a.relations[i];
    const Relation& y = b.relations[i];
    if (x.src != y.src || x.dst != y.dst || x.name != y.name ||
        x.reverse_index != y.reverse_index || x.offsets != y.offsets ||
        x.targets != y.targets) {
      return false;
    }
  }
  return a.labels == b.labels && a.train_mask == b.train_mask && a.val_mask == b.val_mask &&
         a.test_mask == b.test_mask;
}

}  // namespace relrisk
