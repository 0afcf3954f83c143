#include "relrisk/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "relrisk/graph.hpp"
#include "relrisk/ingest.hpp"
#include "relrisk/metrics.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

#ifndef RELRISK_GIT_DESCRIBE
#define RELRISK_GIT_DESCRIBE ""
#endif

namespace relrisk {

namespace {

// ---------------------------------------------------------------------------
// Small file + binary helpers.

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path);
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw DataError("short write to " + path);
}

struct BinWriter {
  std::vector<uint8_t> buf;

  template <typename T>
  void put(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    const size_t at = buf.size();
    buf.resize(at + sizeof(T));
    std::memcpy(buf.data() + at, &v, sizeof(T));
  }
  void put_str(const std::string& s) {
    put<uint64_t>(s.size());
    buf.insert(buf.end(), s.begin(), s.end());
  }
  template <typename T>
  void put_vec(const std::vector<T>& v) {
    static_assert(std::is_trivially_copyable_v<T>);
    put<uint64_t>(v.size());
    const size_t at = buf.size();
    buf.resize(at + v.size() * sizeof(T));
    if (!v.empty()) std::memcpy(buf.data() + at, v.data(), v.size() * sizeof(T));
  }
};

struct BinReader {
  const uint8_t* p = nullptr;
  size_t left = 0;
  std::string path;

  void need(size_t n) const {
    if (n > left) throw DataError("corrupt artifact " + path + ": truncated");
  }
  template <typename T>
  T get() {
    static_assert(std::is_trivially_copyable_v<T>);
    need(sizeof(T));
    T v;
    std::memcpy(&v, p, sizeof(T));
    p += sizeof(T);
    left -= sizeof(T);
    return v;
  }
  std::string get_str() {
    const uint64_t n = get<uint64_t>();
    need(n);
    std::string s(reinterpret_cast<const char*>(p), n);
    p += n;
    left -= n;
    return s;
  }
  template <typename T>
  std::vector<T> get_vec() {
    static_assert(std::is_trivially_copyable_v<T>);
    const uint64_t n = get<uint64_t>();
    if (n > left / sizeof(T)) throw DataError("corrupt artifact " + path + ": truncated");
    std::vector<T> v(n);
    if (n) std::memcpy(v.data(), p, n * sizeof(T));
    p += n * sizeof(T);
    left -= n * sizeof(T);
    return v;
  }
};

void write_binary(const std::string& path, const BinWriter& w) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(w.buf.data()),
            static_cast<std::streamsize>(w.buf.size()));
  if (!out) throw DataError("short write to " + path);
}

std::vector<uint8_t> read_binary(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path);
  std::vector<uint8_t> buf((std::istreambuf_iterator<char>(in)),
                           std::istreambuf_iterator<char>());
  return buf;
}

constexpr uint64_t kMatrixMagic = 0x31304d4646525252ULL;  // "RRRFFM01"
constexpr uint64_t kEmbMagic = 0x3130424d45525252ULL;     // "RRREMB01"

uint64_t fnv1a(const std::string& s) {
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string hex64(uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// Version.

std::string relrisk_version() {
  std::string describe = RELRISK_GIT_DESCRIBE;
  if (describe.empty()) return "v0.1.0";
  return "v0.1.0-" + describe;
}

// ---------------------------------------------------------------------------
// Config.

RunConfig default_run_config() { return RunConfig{}; }

namespace {

json config_to_json(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["threads"] = c.threads;
  j["out"] = c.out;
  j["data"] = {{"source", c.data.source},
               {"directory", c.data.directory},
               {"synthetic",
                {{"n_customers", c.data.synthetic.n_customers},
                 {"base_rate", c.data.synthetic.base_rate},
                 {"beta", c.data.synthetic.beta},
                 {"mean_bureau", c.data.synthetic.mean_bureau},
                 {"mean_prev", c.data.synthetic.mean_prev},
                 {"mean_installments", c.data.synthetic.mean_installments},
                 {"mean_pos", c.data.synthetic.mean_pos},
                 {"mean_card", c.data.synthetic.mean_card}}}};
  j["split"] = {{"val_fraction", c.split.val_fraction},
                {"test_fraction", c.split.test_fraction}};
  j["features"] = {{"target_encode", c.features.target_encode},
                   {"log1p_skew_above", c.features.log1p_skew_above},
                   {"correlation_prune_above", c.features.correlation_prune_above},
                   {"drop_missing_above", c.features.drop_missing_above},
                   {"center_standardized", c.features.center_standardized},
                   {"pca_variance_target", c.features.pca_variance_target}};
  j["graph"] = {{"structure_only_features", c.graph.structure_only_features},
                {"customer_columns", c.graph.customer_columns}};
  j["gnn"] = {{"arch", gnn_arch_name(c.gnn.net.arch)},
              {"layers", c.gnn.net.layers},
              {"hidden_dim", c.gnn.net.hidden_dim},
              {"heads", c.gnn.net.heads},
              {"leaky_slope", c.gnn.net.leaky_slope},
              {"bn_eps", c.gnn.net.bn_eps},
              {"bn_momentum", c.gnn.net.bn_momentum},
              {"epochs", c.gnn.train.epochs},
              {"batch_size", c.gnn.train.batch_size},
              {"lr", c.gnn.train.lr},
              {"patience", c.gnn.train.patience},
              {"fanout", c.gnn.train.fanout.per_hop},
              {"eval_batch_size", c.gnn.train.eval_batch_size},
              {"init_from_pretrained", c.gnn.init_from_pretrained},
              {"freeze_encoder", c.gnn.freeze_encoder},
              {"verbose", c.gnn.train.verbose}};
  j["pretrain"] = {{"epochs", c.pretrain.epochs},
                   {"batch_size", c.pretrain.batch_size},
                   {"lr", c.pretrain.lr},
                   {"fanout", c.pretrain.fanout.per_hop},
                   {"tau", c.pretrain.tau},
                   {"proj_hidden", c.pretrain.proj_hidden},
                   {"proj_out", c.pretrain.proj_out},
                   {"feature_mask_rate", c.pretrain.augment.feature_mask_rate},
                   {"edge_drop_rate", c.pretrain.augment.edge_drop_rate},
                   {"verbose", c.pretrain.verbose}};
  j["embeddings"] = {{"source", c.embeddings.source}};
  j["gbdt"] = {{"learning_rate", c.gbdt.learning_rate},
               {"num_leaves", c.gbdt.num_leaves},
               {"min_data_in_leaf", c.gbdt.min_data_in_leaf},
               {"bagging_fraction", c.gbdt.bagging_fraction},
               {"feature_fraction", c.gbdt.feature_fraction},
               {"lambda_l1", c.gbdt.lambda_l1},
               {"lambda_l2", c.gbdt.lambda_l2},
               {"max_iterations", c.gbdt.max_iterations},
               {"early_stopping_rounds", c.gbdt.early_stopping_rounds},
               {"scale_pos_weight", c.gbdt.scale_pos_weight}};
  j["logistic"] = {{"C", c.logistic.C},
                   {"max_iterations", c.logistic.max_iterations},
                   {"tolerance", c.logistic.tolerance},
                   {"memory", c.logistic.memory},
                   {"fit_intercept", c.logistic.fit_intercept}};
  j["calibrate"] = c.calibrate;
  j["calibration_folds"] = c.calibration_folds;
  j["metrics"] = {{"group_columns", c.metrics.group_columns},
                  {"tau", c.metrics.tau},
                  {"k_fractions", c.metrics.k_fractions},
                  {"calibration_bins", c.metrics.calibration_bins},
                  {"age_bin_edges", c.metrics.age_bin_edges}};
  return j;
}

void check_unknown_keys(const json& user, const json& schema, const std::string& path) {
  if (!user.is_object() || !schema.is_object()) return;
  for (auto it = user.begin(); it != user.end(); ++it) {
    if (!schema.contains(it.key()))
      throw ConfigError("config: unknown key '" + path + it.key() + "'");
    check_unknown_keys(it.value(), schema.at(it.key()), path + it.key() + ".");
  }
}

template <typename T>
void opt_get(const json& j, const char* key, T& out) {
  if (j.contains(key)) j.at(key).get_to(out);
}

void opt_fanout(const json& j, const char* key, Fanout& out) {
  if (j.contains(key)) {
    std::vector<int> hops;
    j.at(key).get_to(hops);
    out.per_hop = std::move(hops);
  }
}

void validate_run_config(const RunConfig& c) {
  if (c.out.empty()) throw ConfigError("config: out must be non-empty");
  if (c.threads < 0) throw ConfigError("config: threads must be >= 0");
  if (c.data.source != "synthetic" && c.data.source != "directory")
    throw ConfigError("config: data.source must be 'synthetic' or 'directory'");
  if (c.data.source == "directory" && c.data.directory.empty())
    throw ConfigError("config: data.directory required when data.source is 'directory'");
  if (!(c.split.val_fraction >= 0.0) || !(c.split.test_fraction >= 0.0) ||
      c.split.val_fraction + c.split.test_fraction >= 1.0)
    throw ConfigError("config: split fractions must be >= 0 and sum below 1");
  auto check_fanout = [](const Fanout& f, int layers, const char* who) {
    if (static_cast<int>(f.per_hop.size()) != layers)
      throw ConfigError(std::string("config: ") + who +
                        ".fanout must list one cap per layer");
    for (int v : f.per_hop)
      if (v == 0 || v < -1)
        throw ConfigError(std::string("config: ") + who +
                          ".fanout entries must be positive or -1 (unlimited)");
  };
  check_fanout(c.gnn.train.fanout, c.gnn.net.layers, "gnn");
  check_fanout(c.pretrain.fanout, c.gnn.net.layers, "pretrain");
  if (c.metrics.tau < 0.0 || c.metrics.tau > 1.0)
    throw ConfigError("config: metrics.tau must lie in [0, 1]");
  for (double k : c.metrics.k_fractions)
    if (!(k > 0.0) || k > 1.0)
      throw ConfigError("config: metrics.k_fractions entries must lie in (0, 1]");
  if (c.metrics.calibration_bins < 1)
    throw ConfigError("config: metrics.calibration_bins must be >= 1");
  for (size_t i = 1; i < c.metrics.age_bin_edges.size(); ++i)
    if (!(c.metrics.age_bin_edges[i - 1] < c.metrics.age_bin_edges[i]))
      throw ConfigError("config: metrics.age_bin_edges must be strictly increasing");
  if (c.calibrate && c.calibration_folds < 2)
    throw ConfigError("config: calibration_folds must be >= 2");
  if (c.features.drop_missing_above < 0.0 || c.features.drop_missing_above > 1.0)
    throw ConfigError("config: features.drop_missing_above must lie in [0, 1]");
  if (c.features.pca_variance_target < 0.0 || c.features.pca_variance_target > 1.0)
    throw ConfigError("config: features.pca_variance_target must lie in [0, 1]");
  if (c.embeddings.source.empty())
    throw ConfigError("config: embeddings.source must name a trained model");
}

RunConfig config_from_json(const json& u) {
  RunConfig c;
  check_unknown_keys(u, config_to_json(c), "");
  try {
    opt_get(u, "seed", c.seed);
    opt_get(u, "threads", c.threads);
    opt_get(u, "out", c.out);
    if (u.contains("data")) {
      const json& d = u.at("data");
      opt_get(d, "source", c.data.source);
      opt_get(d, "directory", c.data.directory);
      if (d.contains("synthetic")) {
        const json& s = d.at("synthetic");
        opt_get(s, "n_customers", c.data.synthetic.n_customers);
        opt_get(s, "base_rate", c.data.synthetic.base_rate);
        opt_get(s, "beta", c.data.synthetic.beta);
        opt_get(s, "mean_bureau", c.data.synthetic.mean_bureau);
        opt_get(s, "mean_prev", c.data.synthetic.mean_prev);
        opt_get(s, "mean_installments", c.data.synthetic.mean_installments);
        opt_get(s, "mean_pos", c.data.synthetic.mean_pos);
        opt_get(s, "mean_card", c.data.synthetic.mean_card);
      }
    }
    if (u.contains("split")) {
      opt_get(u.at("split"), "val_fraction", c.split.val_fraction);
      opt_get(u.at("split"), "test_fraction", c.split.test_fraction);
    }
    if (u.contains("features")) {
      const json& f = u.at("features");
      opt_get(f, "target_encode", c.features.target_encode);
      opt_get(f, "log1p_skew_above", c.features.log1p_skew_above);
      opt_get(f, "correlation_prune_above", c.features.correlation_prune_above);
      opt_get(f, "drop_missing_above", c.features.drop_missing_above);
      opt_get(f, "center_standardized", c.features.center_standardized);
      opt_get(f, "pca_variance_target", c.features.pca_variance_target);
    }
    if (u.contains("graph")) {
      opt_get(u.at("graph"), "structure_only_features", c.graph.structure_only_features);
      opt_get(u.at("graph"), "customer_columns", c.graph.customer_columns);
    }
    if (u.contains("gnn")) {
      const json& g = u.at("gnn");
      if (g.contains("arch")) c.gnn.net.arch = gnn_arch_from_name(g.at("arch").get<std::string>());
      opt_get(g, "layers", c.gnn.net.layers);
      opt_get(g, "hidden_dim", c.gnn.net.hidden_dim);
      opt_get(g, "heads", c.gnn.net.heads);
      opt_get(g, "leaky_slope", c.gnn.net.leaky_slope);
      opt_get(g, "bn_eps", c.gnn.net.bn_eps);
      opt_get(g, "bn_momentum", c.gnn.net.bn_momentum);
      opt_get(g, "epochs", c.gnn.train.epochs);
      opt_get(g, "batch_size", c.gnn.train.batch_size);
      opt_get(g, "lr", c.gnn.train.lr);
      opt_get(g, "patience", c.gnn.train.patience);
      opt_fanout(g, "fanout", c.gnn.train.fanout);
      opt_get(g, "eval_batch_size", c.gnn.train.eval_batch_size);
      opt_get(g, "init_from_pretrained", c.gnn.init_from_pretrained);
      opt_get(g, "freeze_encoder", c.gnn.freeze_encoder);
      opt_get(g, "verbose", c.gnn.train.verbose);
    }
    if (u.contains("pretrain")) {
      const json& p = u.at("pretrain");
      opt_get(p, "epochs", c.pretrain.epochs);
      opt_get(p, "batch_size", c.pretrain.batch_size);
      opt_get(p, "lr", c.pretrain.lr);
      opt_fanout(p, "fanout", c.pretrain.fanout);
      opt_get(p, "tau", c.pretrain.tau);
      opt_get(p, "proj_hidden", c.pretrain.proj_hidden);
      opt_get(p, "proj_out", c.pretrain.proj_out);
      opt_get(p, "feature_mask_rate", c.pretrain.augment.feature_mask_rate);
      opt_get(p, "edge_drop_rate", c.pretrain.augment.edge_drop_rate);
      opt_get(p, "verbose", c.pretrain.verbose);
    }
    if (u.contains("embeddings")) opt_get(u.at("embeddings"), "source", c.embeddings.source);
    if (u.contains("gbdt")) {
      const json& g = u.at("gbdt");
      opt_get(g, "learning_rate", c.gbdt.learning_rate);
      opt_get(g, "num_leaves", c.gbdt.num_leaves);
      opt_get(g, "min_data_in_leaf", c.gbdt.min_data_in_leaf);
      opt_get(g, "bagging_fraction", c.gbdt.bagging_fraction);
      opt_get(g, "feature_fraction", c.gbdt.feature_fraction);
      opt_get(g, "lambda_l1", c.gbdt.lambda_l1);
      opt_get(g, "lambda_l2", c.gbdt.lambda_l2);
      opt_get(g, "max_iterations", c.gbdt.max_iterations);
      opt_get(g, "early_stopping_rounds", c.gbdt.early_stopping_rounds);
      opt_get(g, "scale_pos_weight", c.gbdt.scale_pos_weight);
    }
    if (u.contains("logistic")) {
      const json& l = u.at("logistic");
      opt_get(l, "C", c.logistic.C);
      opt_get(l, "max_iterations", c.logistic.max_iterations);
      opt_get(l, "tolerance", c.logistic.tolerance);
      opt_get(l, "memory", c.logistic.memory);
      opt_get(l, "fit_intercept", c.logistic.fit_intercept);
    }
    opt_get(u, "calibrate", c.calibrate);
    opt_get(u, "calibration_folds", c.calibration_folds);
    if (u.contains("metrics")) {
      const json& m = u.at("metrics");
      opt_get(m, "group_columns", c.metrics.group_columns);
      opt_get(m, "tau", c.metrics.tau);
      opt_get(m, "k_fractions", c.metrics.k_fractions);
      opt_get(m, "calibration_bins", c.metrics.calibration_bins);
      opt_get(m, "age_bin_edges", c.metrics.age_bin_edges);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return c;
}

}  // namespace

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  json u = json::parse(ss.str(), nullptr, false);
  if (u.is_discarded()) throw ConfigError("config file " + path + " is not valid JSON");
  if (!u.is_object()) throw ConfigError("config file " + path + " must hold a JSON object");
  RunConfig cfg = config_from_json(u);
  validate_run_config(cfg);
  return cfg;
}

std::string run_config_json(const RunConfig& cfg) { return config_to_json(cfg).dump(2) + "\n"; }

std::string run_config_hash(const RunConfig& cfg) {
  json j = config_to_json(cfg);
  j.erase("out");
  j.erase("threads");
  return hex64(fnv1a(j.dump()));
}

// ---------------------------------------------------------------------------
// Artifact persistence.

void save_feature_matrix(const std::string& path, const FeatureMatrix& fm) {
  BinWriter w;
  w.put<uint64_t>(kMatrixMagic);
  w.put<uint32_t>(1);
  w.put<uint32_t>(0);
  w.put<uint64_t>(fm.n_rows());
  w.put<uint64_t>(fm.n_cols());
  w.put_vec(fm.row_ids);
  for (const FeatureColumn& col : fm.columns) {
    w.put_str(col.name);
    w.put<uint8_t>(static_cast<uint8_t>(col.lineage));
    w.put<uint8_t>(col.categorical ? 1 : 0);
    w.put<uint64_t>(col.dict.size());
    for (const std::string& s : col.dict) w.put_str(s);
  }
  w.put_vec(fm.values);
  write_binary(path, w);
}

FeatureMatrix load_feature_matrix(const std::string& path) {
  const std::vector<uint8_t> buf = read_binary(path);
  BinReader r{buf.data(), buf.size(), path};
  if (r.get<uint64_t>() != kMatrixMagic)
    throw DataError("corrupt artifact " + path + ": bad magic");
  if (r.get<uint32_t>() != 1)
    throw DataError("corrupt artifact " + path + ": unsupported version");
  r.get<uint32_t>();
  const uint64_t n_rows = r.get<uint64_t>();
  const uint64_t n_cols = r.get<uint64_t>();
  FeatureMatrix fm;
  fm.row_ids = r.get_vec<int64_t>();
  if (fm.row_ids.size() != n_rows)
    throw DataError("corrupt artifact " + path + ": row id count mismatch");
  fm.columns.resize(n_cols);
  for (FeatureColumn& col : fm.columns) {
    col.name = r.get_str();
    const uint8_t lin = r.get<uint8_t>();
    if (lin > 3) throw DataError("corrupt artifact " + path + ": bad lineage");
    col.lineage = static_cast<Lineage>(lin);
    col.categorical = r.get<uint8_t>() != 0;
    const uint64_t nd = r.get<uint64_t>();
    col.dict.resize(nd);
    for (std::string& s : col.dict) s = r.get_str();
  }
  fm.values = r.get_vec<double>();
  if (fm.values.size() != n_rows * n_cols)
    throw DataError("corrupt artifact " + path + ": value count mismatch");
  return fm;
}

void save_embeddings(const std::string& path, const StoredEmbeddings& se) {
  if (se.row_ids.size() != se.emb.n_rows)
    throw DataError("embedding row ids and rows disagree");
  BinWriter w;
  w.put<uint64_t>(kEmbMagic);
  w.put<uint32_t>(1);
  w.put<uint32_t>(0);
  w.put_str(se.source);
  w.put<uint64_t>(se.emb.n_rows);
  w.put<uint64_t>(se.emb.dim);
  w.put_vec(se.row_ids);
  w.put_vec(se.emb.values);
  write_binary(path, w);
}

StoredEmbeddings load_embeddings(const std::string& path) {
  const std::vector<uint8_t> buf = read_binary(path);
  BinReader r{buf.data(), buf.size(), path};
  if (r.get<uint64_t>() != kEmbMagic)
    throw DataError("corrupt artifact " + path + ": bad magic");
  if (r.get<uint32_t>() != 1)
    throw DataError("corrupt artifact " + path + ": unsupported version");
  r.get<uint32_t>();
  StoredEmbeddings se;
  se.source = r.get_str();
  se.emb.n_rows = r.get<uint64_t>();
  se.emb.dim = r.get<uint64_t>();
  se.row_ids = r.get_vec<int64_t>();
  se.emb.values = r.get_vec<float>();
  if (se.row_ids.size() != se.emb.n_rows ||
      se.emb.values.size() != se.emb.n_rows * se.emb.dim)
    throw DataError("corrupt artifact " + path + ": size mismatch");
  return se;
}

// ---------------------------------------------------------------------------
// Splits.

std::vector<uint32_t> SplitTable::rows_of(int8_t which) const {
  std::vector<uint32_t> rows;
  for (size_t i = 0; i < split_of.size(); ++i)
    if (split_of[i] == which) rows.push_back(static_cast<uint32_t>(i));
  return rows;
}

SplitTable make_splits(const std::vector<int64_t>& row_ids, const std::vector<int>& labels,
                       const SplitConfig& cfg, uint64_t seed) {
  const size_t n = row_ids.size();
  if (labels.size() != n) throw DataError("labels and row ids disagree");
  SplitTable t;
  t.row_ids = row_ids;
  t.labels.resize(n);
  for (size_t i = 0; i < n; ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw DataError("labels must be 0/1");
    t.labels[i] = static_cast<int8_t>(labels[i]);
  }
  // Derive the assignment in sorted-id order: the graph builder sorts
  // customers by key before splitting, so the same seed yields the same
  // membership in both representations.
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return row_ids[a] < row_ids[b]; });
  for (size_t k = 1; k < n; ++k)
    if (row_ids[order[k]] == row_ids[order[k - 1]])
      throw DataError("duplicate customer id in feature matrix");
  std::vector<int8_t> sorted_labels(n);
  for (size_t k = 0; k < n; ++k) sorted_labels[k] = t.labels[order[k]];
  std::vector<uint8_t> tr, va, te;
  stratified_masks(sorted_labels, cfg.val_fraction, cfg.test_fraction, seed, tr, va, te);
  t.split_of.assign(n, 0);
  for (size_t k = 0; k < n; ++k)
    t.split_of[order[k]] = va[k] ? int8_t{1} : (te[k] ? int8_t{2} : int8_t{0});
  return t;
}

namespace {
const char* split_name(int8_t s) { return s == 0 ? "train" : (s == 1 ? "val" : "test"); }
}  // namespace

void write_splits_csv(const std::string& path, const SplitTable& t) {
  std::string out = "row_id,label,split\n";
  for (size_t i = 0; i < t.row_ids.size(); ++i) {
    out += std::to_string(t.row_ids[i]);
    out += ',';
    out += std::to_string(int(t.labels[i]));
    out += ',';
    out += split_name(t.split_of[i]);
    out += '\n';
  }
  write_text_file(path, out);
}

SplitTable read_splits_csv(const std::string& path) {
  const std::string text = read_text_file(path);
  SplitTable t;
  size_t pos = 0;
  bool header = true;
  while (pos < text.size()) {
    size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    const std::string line = text.substr(pos, end - pos);
    pos = end + 1;
    if (line.empty()) continue;
    if (header) {
      if (line != "row_id,label,split")
        throw DataError("corrupt splits file " + path + ": bad header");
      header = false;
      continue;
    }
    const size_t c1 = line.find(',');
    const size_t c2 = line.find(',', c1 == std::string::npos ? line.size() : c1 + 1);
    if (c1 == std::string::npos || c2 == std::string::npos)
      throw DataError("corrupt splits file " + path + ": bad row '" + line + "'");
    try {
      t.row_ids.push_back(std::stoll(line.substr(0, c1)));
      const int lab = std::stoi(line.substr(c1 + 1, c2 - c1 - 1));
      if (lab != 0 && lab != 1) throw std::invalid_argument("label");
      t.labels.push_back(static_cast<int8_t>(lab));
    } catch (const std::exception&) {
      throw DataError("corrupt splits file " + path + ": bad row '" + line + "'");
    }
    const std::string s = line.substr(c2 + 1);
    if (s == "train")
      t.split_of.push_back(0);
    else if (s == "val")
      t.split_of.push_back(1);
    else if (s == "test")
      t.split_of.push_back(2);
    else
      throw DataError("corrupt splits file " + path + ": unknown split '" + s + "'");
  }
  if (header) throw DataError("corrupt splits file " + path + ": empty");
  return t;
}

// ---------------------------------------------------------------------------
// Stage plumbing: paths, manifests, chain checks.

namespace {

struct OutPaths {
  std::string root;

  std::string dir(const std::string& d) const { return root + "/" + d; }
  std::string manifest(const std::string& stage) const {
    return root + "/manifests/" + stage + ".json";
  }
  std::string score_csv(const std::string& model, const std::string& split) const {
    return root + "/scores/" + model + "_" + split + ".csv";
  }
  std::string gnn_base(const std::string& name) const { return root + "/models/gnn_" + name; }
};

// One invocation's resolved state. The config hash is computed once from
// the user's effective config, so the internal per-stage variants the
// pipeline subcommand runs (e.g. both architectures) share one hash.
struct Ctx {
  RunConfig cfg;
  OutPaths paths;
  std::string hash;
  std::string external_scores;
};

void ensure_dir(const std::string& d) { fs::create_directories(d); }

void write_manifest(const Ctx& ctx, const std::string& stage, double wall_seconds) {
  ensure_dir(ctx.paths.dir("manifests"));
  json j;
  j["stage"] = stage;
  j["version"] = relrisk_version();
  j["config_hash"] = ctx.hash;
  j["seed"] = ctx.cfg.seed;
  j["threads"] = thread_count();
  j["wall_time_seconds"] = wall_seconds;
  write_text_file(ctx.paths.manifest(stage), j.dump(2) + "\n");
}

// Chained stages warn (never fail) when an upstream artifact was produced
// under a different configuration.
void warn_config_mismatch(const Ctx& ctx, const std::string& upstream_stage) {
  const std::string path = ctx.paths.manifest(upstream_stage);
  if (!fs::exists(path)) return;
  json j = json::parse(read_text_file(path), nullptr, false);
  if (j.is_discarded() || !j.contains("config_hash")) return;
  const std::string up = j.at("config_hash").get<std::string>();
  if (up != ctx.hash)
    std::cerr << "warning: config hash mismatch with upstream stage '" << upstream_stage
              << "' (" << up << " vs " << ctx.hash << "); artifacts may be stale\n";
}

void require_artifact(const std::string& path, const std::string& what,
                      const std::string& stage) {
  if (!fs::exists(path))
    throw DataError(what + " not found at " + path + "; run 'relrisk " + stage + "' first");
}

RelationalDataset load_dataset(const RunConfig& cfg) {
  if (cfg.data.source == "synthetic") return generate_synthetic(cfg.data.synthetic, cfg.seed);
  if (!fs::is_directory(cfg.data.directory))
    throw DataError("data directory not found: " + cfg.data.directory);
  return load_tables(cfg.data.directory, default_schema());
}

// Known models in report order.
struct ModelInfo {
  const char* key;
  const char* display;
  const char* category;
};
constexpr ModelInfo kModels[] = {
    {"logistic", "Logistic Regression", "baseline"},
    {"gbdt", "GBDT", "tabular"},
    {"gbdt_cal", "GBDT + Isotonic", "tabular"},
    {"sage", "GraphSAGE", "graph"},
    {"relattn", "Relational Attention", "graph"},
    {"pretrain_ft", "Contrastive + Fine-tune", "graph"},
    {"hybrid", "Hybrid (GBDT + GNN)", "hybrid"},
};

ScoreReport make_report(std::vector<int64_t> ids, std::vector<double> scores,
                        std::vector<int8_t> labels, std::string split) {
  ScoreReport r;
  r.row_ids = std::move(ids);
  r.scores = std::move(scores);
  r.labels = std::move(labels);
  r.split = std::move(split);
  return r;
}

// Scores for a subset of feature-matrix rows.
ScoreReport subset_report(const SplitTable& t, const std::vector<double>& all_scores,
                          int8_t which) {
  ScoreReport r;
  r.split = split_name(which);
  for (size_t i = 0; i < t.split_of.size(); ++i) {
    if (t.split_of[i] != which) continue;
    r.row_ids.push_back(t.row_ids[i]);
    r.scores.push_back(all_scores[i]);
    r.labels.push_back(t.labels[i]);
  }
  return r;
}

void write_split_scores(const OutPaths& paths, const std::string& model, const SplitTable& t,
                        const std::vector<double>& all_scores) {
  ensure_dir(paths.dir("scores"));
  write_scores_csv(paths.score_csv(model, "val"), subset_report(t, all_scores, 1));
  write_scores_csv(paths.score_csv(model, "test"), subset_report(t, all_scores, 2));
}

// ---------------------------------------------------------------------------
// Stages.

void cmd_eda(const Ctx& ctx) {
  const RunConfig& cfg = ctx.cfg;
  const OutPaths& paths = ctx.paths;
  const RelationalDataset ds = load_dataset(cfg);
  const ValidationReport vr = validate_schema(ds);
  const FeatureMatrix fm = engineer_features(ds);
  const EdaReport rep = eda_profile(fm, ds.labels());
  ensure_dir(paths.dir("eda"));
  write_text_file(paths.dir("eda") + "/validation.json", vr.to_json() + "\n");
  write_text_file(paths.dir("eda") + "/validation.txt", vr.to_text());
  write_text_file(paths.dir("eda") + "/eda.json", rep.to_json() + "\n");
  write_text_file(paths.dir("eda") + "/eda.txt", rep.to_text());
  std::cout << vr.to_text() << "\n" << rep.to_text();
}

void cmd_features(const Ctx& ctx) {
  const RunConfig& cfg = ctx.cfg;
  const OutPaths& paths = ctx.paths;
  const RelationalDataset ds = load_dataset(cfg);
  FeatureMatrix fm = engineer_features(ds);
  const std::vector<int> labels = ds.labels();
  const SplitTable splits = make_splits(fm.row_ids, labels, cfg.split, cfg.seed);
  std::vector<size_t> train_rows;
  for (uint32_t r : splits.rows_of(0)) train_rows.push_back(r);

  for (const std::string& col : cfg.features.target_encode) {
    if (fm.col_index(col) < 0)
      throw DataError("target_encode column '" + col + "' not in the feature matrix");
    target_encode(fm, col, labels, train_rows);
  }
  size_t n_twins = 0;
  if (cfg.features.log1p_skew_above > 0.0) {
    const auto heavy = heavy_tailed_columns(fm, train_rows, cfg.features.log1p_skew_above);
    add_log1p_twins(fm, heavy);
    n_twins = heavy.size();
  }
  size_t n_pruned = 0;
  if (cfg.features.correlation_prune_above > 0.0) {
    const auto drops =
        correlated_columns(fm, train_rows, cfg.features.correlation_prune_above);
    fm.drop_columns(drops);
    n_pruned = drops.size();
  }

  ensure_dir(paths.dir("features"));
  save_feature_matrix(paths.dir("features") + "/features_raw.bin", fm);
  write_splits_csv(paths.dir("features") + "/splits.csv", splits);

  PreprocessConfig pc;
  pc.drop_missing_above = cfg.features.drop_missing_above;
  pc.center_standardized = cfg.features.center_standardized;
  PreprocessState state = fit_preprocess(fm, train_rows, pc);
  const FeatureMatrix scaled = apply_preprocess(state, fm);
  save_feature_matrix(paths.dir("features") + "/features_scaled.bin", scaled);

  size_t pca_components = 0;
  if (cfg.features.pca_variance_target > 0.0) {
    const PcaState pca = fit_pca(scaled, train_rows, cfg.features.pca_variance_target);
    state.pca = pca;
    pca_components = pca.n_components;
    save_feature_matrix(paths.dir("features") + "/features_pca.bin", apply_pca(pca, scaled));
  }
  write_text_file(paths.dir("features") + "/preprocess.json", state.to_json() + "\n");

  std::cout << "features: rows=" << fm.n_rows() << " columns=" << fm.n_cols()
            << " kept_numeric=" << scaled.n_cols() << " dropped=" << state.dropped_columns.size()
            << " twins=" << n_twins << " pruned=" << n_pruned
            << " train=" << splits.rows_of(0).size() << " val=" << splits.rows_of(1).size()
            << " test=" << splits.rows_of(2).size();
  if (pca_components > 0) std::cout << " pca_components=" << pca_components;
  std::cout << "\n";
}

void cmd_build_graph(const Ctx& ctx) {
  const RunConfig& cfg = ctx.cfg;
  const OutPaths& paths = ctx.paths;
  const RelationalDataset ds = load_dataset(cfg);
  GraphConfig gc;
  gc.val_fraction = cfg.split.val_fraction;
  gc.test_fraction = cfg.split.test_fraction;
  gc.split_seed = cfg.seed;
  gc.structure_only_features = cfg.graph.structure_only_features;
  gc.customer_columns = cfg.graph.customer_columns;
  gc.preprocess.drop_missing_above = cfg.features.drop_missing_above;
  // Node features always center: message passing has no use for the
  // linear-model convention.
  gc.preprocess.center_standardized = true;
  const HeteroGraph g = build_hetero_graph(ds, gc);
  const GraphReport rep = validate_graph(g);
  ensure_dir(paths.dir("graph"));
  write_text_file(paths.dir("graph") + "/graph_report.json", rep.to_json() + "\n");
  write_text_file(paths.dir("graph") + "/graph_report.txt", rep.to_text());
  if (!rep.violations.empty())
    throw DataError("graph validation failed: " + rep.violations.front());
  save_graph(g, paths.dir("graph"));
  std::cout << rep.to_text();
}

void cmd_train_gnn(const Ctx& ctx) {
  const RunConfig& cfg = ctx.cfg;
  const OutPaths& paths = ctx.paths;
  require_artifact(paths.dir("graph") + "/manifest.json", "graph artifacts", "build-graph");
  warn_config_mismatch(ctx, "build-graph");
  const HeteroGraph g = load_graph(paths.dir("graph"));

  TrainConfig tc = cfg.gnn.train;
  tc.seed = cfg.seed;
  std::string name;
  TrainedGnn trained;
  if (cfg.gnn.init_from_pretrained) {
    const std::string base = paths.gnn_base("pretrained");
    require_artifact(base + ".meta.json", "pretrained encoder", "pretrain");
    warn_config_mismatch(ctx, "pretrain");
    GnnModel init = load_gnn(base, g.structure());
    trained = train_gnn(g, std::move(init), tc, cfg.gnn.freeze_encoder);
    name = "pretrain_ft";
  } else {
    GnnConfig nc = cfg.gnn.net;
    trained = train_gnn(g, nc, tc);
    name = gnn_arch_name(nc.arch);
  }

  ensure_dir(paths.dir("models"));
  save_gnn(paths.gnn_base(name), trained.model);
  write_history_csv(paths.gnn_base(name) + "_history.csv", trained.history);

  const auto score_split = [&](const std::vector<uint8_t>& mask, const char* split) {
    const std::vector<uint32_t> rows = g.mask_rows(mask);
    const std::vector<double> s =
        score_customers(trained.model, g.structure(), rows, tc.eval_batch_size);
    std::vector<int64_t> ids;
    std::vector<int8_t> labs;
    for (uint32_t r : rows) {
      ids.push_back(g.node_set(NodeType::customer).global_ids[r]);
      labs.push_back(g.labels[r]);
    }
    return make_report(std::move(ids), s, std::move(labs), split);
  };
  ensure_dir(paths.dir("scores"));
  const ScoreReport val_r = score_split(g.val_mask, "val");
  const ScoreReport test_r = score_split(g.test_mask, "test");
  write_scores_csv(paths.score_csv(name, "val"), val_r);
  write_scores_csv(paths.score_csv(name, "test"), test_r);

  const RankMetrics tm = rank_metrics(test_r);
  std::cout << "train-gnn: model=" << name << " best_epoch=" << trained.best_epoch
            << " val_auc=" << fmt_fixed(trained.best_val_auc, 4)
            << " test_auc=" << fmt_fixed(tm.roc_auc, 4)
            << " test_pr_auc=" << fmt_fixed(tm.pr_auc, 4) << "\n";
}

void cmd_pretrain(const Ctx& ctx) {
  const RunConfig& cfg = ctx.cfg;
  const OutPaths& paths = ctx.paths;
  require_artifact(paths.dir("graph") + "/manifest.json", "graph artifacts", "build-graph");
  warn_config_mismatch(ctx, "build-graph");
  const HeteroGraph g = load_graph(paths.dir("graph"));
  PretrainConfig pc = cfg.pretrain;
  pc.seed = cfg.seed;
  const PretrainResult res = pretrain_gnn(g.structure(), cfg.gnn.net, pc);
  ensure_dir(paths.dir("models"));
  save_gnn(paths.gnn_base("pretrained"), res.model, /*include_head=*/false);
  std::string csv = "epoch,loss\n";
  for (size_t e = 0; e < res.epoch_loss.size(); ++e)
    csv += std::to_string(e + 1) + "," + fmt_double(res.epoch_loss[e]) + "\n";
  write_text_file(paths.dir("models") + "/pretrain_loss.csv", csv);
  std::cout << "pretrain: epochs=" << res.epoch_loss.size()
            << " first_loss=" << fmt_fixed(res.epoch_loss.front(), 4)
            << " last_loss=" << fmt_fixed(res.epoch_loss.back(), 4) << "\n";
}

void cmd_extract_embeddings(const Ctx& ctx) {
  const RunConfig& cfg = ctx.cfg;
  const OutPaths& paths = ctx.paths;
  require_artifact(paths.dir("graph") + "/manifest.json", "graph artifacts", "build-graph");
  const std::string base = paths.gnn_base(cfg.embeddings.source);
  require_artifact(base + ".meta.json", "GNN model '" + cfg.embeddings.source + "'",
                   "train-gnn");
  warn_config_mismatch(ctx, "train-gnn");
  const HeteroGraph g = load_graph(paths.dir("graph"));
  const GnnModel model = load_gnn(base, g.structure());
  StoredEmbeddings se;
  se.source = cfg.embeddings.source;
  se.row_ids = g.node_set(NodeType::customer).global_ids;
  se.emb = extract_embeddings(model, g.structure(), cfg.gnn.train.eval_batch_size);
  ensure_dir(paths.dir("embeddings"));
  save_embeddings(paths.dir("embeddings") + "/embeddings.bin", se);
  std::cout << "extract-embeddings: source=" << se.source << " rows=" << se.emb.n_rows
            << " dim=" << se.emb.dim << "\n";
}

// Shared by train-tabular and train-hybrid.
struct TabularInputs {
  FeatureMatrix raw;
  SplitTable splits;
  std::vector<uint32_t> train, val;
};

TabularInputs load_tabular_inputs(const Ctx& ctx) {
  const OutPaths& paths = ctx.paths;
  const std::string fdir = paths.dir("features");
  require_artifact(fdir + "/features_raw.bin", "feature artifacts", "features");
  require_artifact(fdir + "/splits.csv", "split assignments", "features");
  warn_config_mismatch(ctx, "features");
  TabularInputs in;
  in.raw = load_feature_matrix(fdir + "/features_raw.bin");
  in.splits = read_splits_csv(fdir + "/splits.csv");
  if (in.splits.row_ids != in.raw.row_ids)
    throw DataError("splits.csv and features_raw.bin disagree; re-run 'relrisk features'");
  in.train = in.splits.rows_of(0);
  in.val = in.splits.rows_of(1);
  return in;
}

void cmd_train_tabular(const Ctx& ctx) {
  const RunConfig& cfg = ctx.cfg;
  const OutPaths& paths = ctx.paths;
  TabularInputs in = load_tabular_inputs(ctx);
  const std::string fdir = paths.dir("features");
  require_artifact(fdir + "/features_scaled.bin", "scaled feature matrix", "features");
  const FeatureMatrix scaled = load_feature_matrix(fdir + "/features_scaled.bin");
  ensure_dir(paths.dir("models"));

  GbdtParams gp = cfg.gbdt;
  gp.seed = cfg.seed;
  const GbdtModel gbdt = fit_gbdt(in.raw, in.splits.labels, in.train, in.val, gp);
  write_text_file(paths.dir("models") + "/gbdt.json", gbdt_to_json(gbdt));
  const std::vector<double> gbdt_scores = predict_gbdt(gbdt, in.raw);
  write_split_scores(paths, "gbdt", in.splits, gbdt_scores);

  const LinearModel lm = fit_logistic(scaled, in.splits.labels, in.train, cfg.logistic);
  if (!lm.converged)
    std::cerr << "warning: logistic regression stopped before convergence (gradient norm "
              << fmt_double(lm.final_grad_norm) << " after " << lm.iterations
              << " iterations)\n";
  {
    json j;
    j["weights"] = lm.weights;
    j["intercept"] = lm.intercept;
    j["converged"] = lm.converged;
    j["iterations"] = lm.iterations;
    j["final_grad_norm"] = lm.final_grad_norm;
    j["feature_names"] = lm.feature_names;
    j["config"] = {{"C", cfg.logistic.C},
                   {"max_iterations", cfg.logistic.max_iterations},
                   {"tolerance", cfg.logistic.tolerance},
                   {"memory", cfg.logistic.memory},
                   {"fit_intercept", cfg.logistic.fit_intercept}};
    write_text_file(paths.dir("models") + "/logistic.json", j.dump(2) + "\n");
  }
  const std::vector<double> logit_scores = predict_logistic(lm, scaled);
  write_split_scores(paths, "logistic", in.splits, logit_scores);

  if (cfg.calibrate) {
    std::vector<int8_t> y_train(in.train.size());
    for (size_t i = 0; i < in.train.size(); ++i) y_train[i] = in.splits.labels[in.train[i]];
    const FoldPlan folds =
        stratified_folds(y_train, cfg.calibration_folds, mix_seed(cfg.seed, 9001));
    std::vector<double> oof(in.train.size(), 0.0);
    GbdtParams gp2 = gp;
    gp2.max_iterations = std::max(1, gbdt.best_iteration);
    gp2.early_stopping_rounds = 0;
    for (int f = 0; f < folds.k; ++f) {
      std::vector<uint32_t> fit_rows;
      for (size_t i : folds.complement_rows(f)) fit_rows.push_back(in.train[i]);
      const GbdtModel mf = fit_gbdt(in.raw, in.splits.labels, fit_rows, {}, gp2);
      const std::vector<double> pf = predict_gbdt(mf, in.raw);
      for (size_t i : folds.fold_rows(f)) oof[i] = pf[in.train[i]];
    }
    const IsotonicModel iso = calibrate_isotonic(oof, y_train);
    {
      json j;
      j["x"] = iso.x;
      j["y"] = iso.y;
      j["folds"] = folds.k;
      write_text_file(paths.dir("models") + "/isotonic.json", j.dump(2) + "\n");
    }
    write_split_scores(paths, "gbdt_cal", in.splits, apply_isotonic(iso, gbdt_scores));
  }

  const RankMetrics gm = rank_metrics(subset_report(in.splits, gbdt_scores, 2));
  const RankMetrics lmx = rank_metrics(subset_report(in.splits, logit_scores, 2));
  std::cout << "train-tabular: gbdt trees=" << gbdt.trees.size()
            << " best_iteration=" << gbdt.best_iteration
            << " test_auc=" << fmt_fixed(gm.roc_auc, 4)
            << " | logistic converged=" << (lm.converged ? "yes" : "no")
            << " test_auc=" << fmt_fixed(lmx.roc_auc, 4)
            << (cfg.calibrate ? " | isotonic calibration written" : "") << "\n";
}

void cmd_train_hybrid(const Ctx& ctx) {
  const RunConfig& cfg = ctx.cfg;
  const OutPaths& paths = ctx.paths;
  TabularInputs in = load_tabular_inputs(ctx);
  const std::string epath = paths.dir("embeddings") + "/embeddings.bin";
  require_artifact(epath, "customer embeddings", "extract-embeddings");
  warn_config_mismatch(ctx, "extract-embeddings");
  const StoredEmbeddings se = load_embeddings(epath);

  GbdtParams gp = cfg.gbdt;
  gp.seed = cfg.seed;
  const FeatureMatrix hybrid = hybrid_features(in.raw, se.emb, se.row_ids);
  const GbdtModel model = fit_gbdt(hybrid, in.splits.labels, in.train, in.val, gp);
  ensure_dir(paths.dir("models"));
  write_text_file(paths.dir("models") + "/gbdt_hybrid.json", gbdt_to_json(model));
  const std::vector<double> scores = predict_gbdt(model, hybrid);
  write_split_scores(paths, "hybrid", in.splits, scores);

  const RankMetrics tm = rank_metrics(subset_report(in.splits, scores, 2));
  std::cout << "train-hybrid: embeddings=" << se.source << " dim=" << se.emb.dim
            << " trees=" << model.trees.size() << " test_auc=" << fmt_fixed(tm.roc_auc, 4)
            << " test_pr_auc=" << fmt_fixed(tm.pr_auc, 4) << "\n";
}

// One metrics block; brier is NaN when scores fall outside [0,1].
struct EvalBlock {
  std::string model;
  std::string split;
  size_t n = 0;
  RankMetrics rm;
  double brier = 0.0;
  bool calibrated_ok = false;
  CalibrationReport cal;
  std::vector<std::pair<double, TopKResult>> topk;
};

EvalBlock eval_report(const RunConfig& cfg, const std::string& model, const ScoreReport& r) {
  EvalBlock b;
  b.model = model;
  b.split = r.split;
  b.n = r.size();
  b.rm = rank_metrics(r);
  for (double k : cfg.metrics.k_fractions) b.topk.emplace_back(k, topk_screen(r, k));
  const auto [lo, hi] = std::minmax_element(r.scores.begin(), r.scores.end());
  if (r.size() > 0 && *lo >= 0.0 && *hi <= 1.0) {
    b.cal = calibration_report(r, cfg.metrics.calibration_bins);
    b.brier = b.cal.brier;
    b.calibrated_ok = true;
  } else {
    b.brier = std::numeric_limits<double>::quiet_NaN();
  }
  return b;
}

json eval_block_json(const EvalBlock& b) {
  json j;
  j["model"] = b.model;
  j["split"] = b.split;
  j["n"] = b.n;
  j["roc_auc"] = b.rm.roc_auc;
  j["pr_auc"] = b.rm.pr_auc;
  j["ks"] = b.rm.ks;
  j["brier"] = b.brier;
  for (const auto& [k, t] : b.topk) {
    json tk;
    tk["k_fraction"] = k;
    tk["k"] = t.k;
    tk["positives"] = t.positives;
    tk["precision"] = t.precision;
    tk["recall"] = t.recall;
    j["topk"].push_back(tk);
  }
  return j;
}

std::string eval_csv_header(const RunConfig& cfg) {
  std::string h = "model,split,n,roc_auc,pr_auc,ks,brier";
  for (double k : cfg.metrics.k_fractions)
    h += ",top" + fmt_double(k) + "_precision,top" + fmt_double(k) + "_recall";
  return h + "\n";
}

std::string eval_csv_row(const EvalBlock& b) {
  std::string s = b.model + "," + b.split + "," + std::to_string(b.n) + "," +
                  fmt_double(b.rm.roc_auc) + "," + fmt_double(b.rm.pr_auc) + "," +
                  fmt_double(b.rm.ks) + "," + fmt_double(b.brier);
  for (const auto& [k, t] : b.topk)
    s += "," + fmt_double(t.precision) + "," + fmt_double(t.recall);
  return s + "\n";
}

void cmd_evaluate(const Ctx& ctx) {
  const RunConfig& cfg = ctx.cfg;
  const OutPaths& paths = ctx.paths;
  const std::string& external_scores = ctx.external_scores;
  ensure_dir(paths.dir("metrics"));
  std::vector<EvalBlock> blocks;

  if (!external_scores.empty()) {
    if (!fs::exists(external_scores))
      throw DataError("score file not found: " + external_scores);
    ScoreReport r = read_scores_csv(external_scores);
    if (r.split.empty()) r.split = "external";
    blocks.push_back(eval_report(cfg, "external", r));
  } else {
    for (const ModelInfo& m : kModels) {
      for (const char* split : {"val", "test"}) {
        const std::string path = paths.score_csv(m.key, split);
        if (!fs::exists(path)) continue;
        ScoreReport r = read_scores_csv(path);
        r.split = split;  // the CSV format carries no split column
        blocks.push_back(eval_report(cfg, m.key, std::move(r)));
      }
    }
    if (blocks.empty())
      throw DataError("no score files under " + paths.dir("scores") +
                      "; run 'relrisk train-tabular' (or train-gnn/train-hybrid) first");
    for (const char* up : {"train-tabular", "train-gnn", "train-hybrid"})
      warn_config_mismatch(ctx, up);
  }

  std::string csv = eval_csv_header(cfg);
  json all = json::array();
  for (const EvalBlock& b : blocks) {
    csv += eval_csv_row(b);
    all.push_back(eval_block_json(b));
    if (b.calibrated_ok)
      write_text_file(paths.dir("metrics") + "/calibration_" + b.model + "_" + b.split + ".csv",
                      calibration_table_csv(b.cal));
  }
  const std::string base = external_scores.empty() ? "metrics" : "external_metrics";
  write_text_file(paths.dir("metrics") + "/" + base + ".csv", csv);
  write_text_file(paths.dir("metrics") + "/" + base + ".json", all.dump(2) + "\n");
  std::cout << csv;
}

std::vector<std::string> group_values_for(const RunConfig& cfg, const RelationalDataset& ds,
                                          const std::string& column) {
  const Table& app = ds.table(ds.application_table);
  if (column == "AGE_BAND") {
    if (cfg.metrics.age_bin_edges.empty())
      throw ConfigError("group column AGE_BAND requires metrics.age_bin_edges");
    const Column* days = app.find("DAYS_BIRTH");
    if (days == nullptr || days->kind != ColumnKind::numeric)
      throw DataError("AGE_BAND needs a numeric DAYS_BIRTH column in the application table");
    const auto& edges = cfg.metrics.age_bin_edges;
    std::vector<std::string> out(app.n_rows);
    for (size_t i = 0; i < app.n_rows; ++i) {
      const double d = days->nums[i];
      if (std::isnan(d)) {
        out[i] = "missing";
        continue;
      }
      const double years = -d / 365.25;
      size_t b = 0;
      while (b < edges.size() && years >= edges[b]) ++b;
      if (b == 0)
        out[i] = "lt" + fmt_double(edges.front());
      else if (b == edges.size())
        out[i] = "ge" + fmt_double(edges.back());
      else
        out[i] = fmt_double(edges[b - 1]) + "-" + fmt_double(edges[b]);
    }
    return out;
  }
  const Column* col = app.find(column);
  if (col == nullptr || col->kind != ColumnKind::categorical) {
    std::string options;
    for (const Column& c : app.columns)
      if (c.kind == ColumnKind::categorical) options += (options.empty() ? "" : ", ") + c.name;
    throw DataError("group column '" + column +
                    "' is not a categorical application column (available: " + options +
                    "; AGE_BAND derives bands from DAYS_BIRTH)");
  }
  std::vector<std::string> out(app.n_rows);
  for (size_t i = 0; i < app.n_rows; ++i) {
    out[i] = col->category_at(i);
    if (out[i].empty()) out[i] = "missing";
  }
  return out;
}

void cmd_fairness_audit(const Ctx& ctx) {
  const RunConfig& cfg = ctx.cfg;
  const OutPaths& paths = ctx.paths;
  const RelationalDataset ds = load_dataset(cfg);
  const std::vector<int64_t>& ids = ds.customer_ids();
  std::unordered_map<int64_t, size_t> row_of;
  row_of.reserve(ids.size());
  for (size_t i = 0; i < ids.size(); ++i) row_of.emplace(ids[i], i);

  std::vector<std::pair<std::string, ScoreReport>> model_reports;
  for (const ModelInfo& m : kModels) {
    const std::string path = paths.score_csv(m.key, "test");
    if (!fs::exists(path)) continue;
    model_reports.emplace_back(m.key, read_scores_csv(path));
  }
  if (model_reports.empty())
    throw DataError("no test score files under " + paths.dir("scores") +
                    "; run 'relrisk train-tabular' (or train-gnn/train-hybrid) first");
  for (const char* up : {"train-tabular", "train-gnn", "train-hybrid"})
    warn_config_mismatch(ctx, up);

  std::vector<SubgroupResultRow> sub_rows;
  std::vector<ThresholdResultRow> thr_rows;
  json gaps;
  for (const std::string& column : cfg.metrics.group_columns) {
    const std::vector<std::string> values = group_values_for(cfg, ds, column);
    for (auto& [model, r] : model_reports) {
      std::vector<std::string> joined(r.size());
      for (size_t i = 0; i < r.size(); ++i) {
        auto it = row_of.find(r.row_ids[i]);
        if (it == row_of.end())
          throw DataError("score row id " + std::to_string(r.row_ids[i]) +
                          " is not a customer of the configured dataset");
        joined[i] = values[it->second];
      }
      r.groups[column] = std::move(joined);
      const FairnessReport fr = fairness_report(r, column);
      for (const GroupMetrics& g : fr.groups)
        sub_rows.push_back({column + "=" + g.group, model, g.roc_auc, g.pr_auc, g.valid});
      const ThresholdAudit ta = threshold_audit(r, column, cfg.metrics.tau);
      for (const GroupRates& g : ta.groups)
        thr_rows.push_back({column, model, g.group, g.tpr, g.fpr, g.positive_rate,
                            g.tpr_valid, g.fpr_valid});
      json jg;
      jg["gap_valid"] = fr.gap_valid;
      jg["max_auc_gap"] = fr.max_auc_gap;
      for (const GroupMetrics& g : fr.groups) {
        json gj;
        gj["group"] = g.group;
        gj["n"] = g.n;
        gj["prevalence"] = g.prevalence;
        gj["valid"] = g.valid;
        gj["roc_auc"] = g.roc_auc;
        gj["pr_auc"] = g.pr_auc;
        jg["groups"].push_back(gj);
      }
      gaps[column][model] = jg;
    }
  }

  ensure_dir(paths.dir("fairness"));
  write_text_file(paths.dir("fairness") + "/subgroups.md", subgroup_table_markdown(sub_rows));
  write_text_file(paths.dir("fairness") + "/subgroups.csv", subgroup_table_csv(sub_rows));
  write_text_file(paths.dir("fairness") + "/thresholds.md", threshold_table_markdown(thr_rows));
  write_text_file(paths.dir("fairness") + "/thresholds.csv", threshold_table_csv(thr_rows));
  write_text_file(paths.dir("fairness") + "/fairness.json", gaps.dump(2) + "\n");
  std::cout << subgroup_table_markdown(sub_rows) << "\n"
            << threshold_table_markdown(thr_rows);
}

void cmd_report(const Ctx& ctx) {
  const OutPaths& paths = ctx.paths;
  std::vector<ModelResultRow> rows;
  for (const ModelInfo& m : kModels) {
    const std::string path = paths.score_csv(m.key, "test");
    if (!fs::exists(path)) continue;
    const ScoreReport r = read_scores_csv(path);
    const RankMetrics rm = rank_metrics(r);
    rows.push_back({m.category, m.display, rm.roc_auc, rm.pr_auc, false});
  }
  if (rows.empty())
    throw DataError("no test score files under " + paths.dir("scores") +
                    "; run 'relrisk train-tabular' (or train-gnn/train-hybrid) first");
  for (const char* up : {"train-tabular", "train-gnn", "train-hybrid"})
    warn_config_mismatch(ctx, up);
  size_t baseline_at = 0;
  for (size_t i = 0; i < rows.size(); ++i)
    if (rows[i].model == std::string("Logistic Regression")) baseline_at = i;
  rows[baseline_at].baseline = true;

  ensure_dir(paths.dir("report"));
  write_text_file(paths.dir("report") + "/model_comparison.md", model_table_markdown(rows));
  write_text_file(paths.dir("report") + "/model_comparison.csv", model_table_csv(rows));
  std::cout << model_table_markdown(rows);
}

// ---------------------------------------------------------------------------
// Dispatch.

void run_stage(const Ctx& ctx, const std::string& stage);

void cmd_pipeline(const Ctx& ctx) {
  run_stage(ctx, "eda");
  run_stage(ctx, "features");
  run_stage(ctx, "build-graph");
  for (const char* arch : {"sage", "relattn"}) {
    Ctx c = ctx;
    c.cfg.gnn.net.arch = gnn_arch_from_name(arch);
    c.cfg.gnn.init_from_pretrained = false;
    run_stage(c, "train-gnn");
  }
  run_stage(ctx, "pretrain");
  {
    Ctx c = ctx;
    c.cfg.gnn.init_from_pretrained = true;
    run_stage(c, "train-gnn");
  }
  run_stage(ctx, "extract-embeddings");
  run_stage(ctx, "train-tabular");
  run_stage(ctx, "train-hybrid");
  run_stage(ctx, "evaluate");
  run_stage(ctx, "fairness-audit");
  run_stage(ctx, "report");
}

void run_stage(const Ctx& ctx, const std::string& stage) {
  ensure_dir(ctx.paths.root);
  const auto t0 = std::chrono::steady_clock::now();
  if (stage == "eda")
    cmd_eda(ctx);
  else if (stage == "features")
    cmd_features(ctx);
  else if (stage == "build-graph")
    cmd_build_graph(ctx);
  else if (stage == "train-gnn")
    cmd_train_gnn(ctx);
  else if (stage == "pretrain")
    cmd_pretrain(ctx);
  else if (stage == "extract-embeddings")
    cmd_extract_embeddings(ctx);
  else if (stage == "train-tabular")
    cmd_train_tabular(ctx);
  else if (stage == "train-hybrid")
    cmd_train_hybrid(ctx);
  else if (stage == "evaluate")
    cmd_evaluate(ctx);
  else if (stage == "fairness-audit")
    cmd_fairness_audit(ctx);
  else if (stage == "report")
    cmd_report(ctx);
  else if (stage == "pipeline")
    cmd_pipeline(ctx);
  else
    throw ConfigError("unknown stage " + stage);
  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  // The manifest stage name for a warm-started GNN is still train-gnn: one
  // stage, two possible initializations.
  write_manifest(ctx, stage, wall);
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"relrisk: relational credit-risk pipeline (synthetic or CSV-backed)"};
  app.require_subcommand(1);

  std::string config_path, out_override, scores_path;
  uint64_t seed_override = 0;
  int threads_override = -1;

  static const std::vector<std::pair<const char*, const char*>> kStages = {
      {"eda", "profile engineered features and validate the relational schema"},
      {"features", "engineer, encode, split, and preprocess the feature matrix"},
      {"build-graph", "compile and persist the heterogeneous customer graph"},
      {"train-gnn", "train a GNN (scratch or from the pretrained encoder) and score customers"},
      {"pretrain", "label-free contrastive pretraining of the graph encoder"},
      {"extract-embeddings", "export final-layer customer embeddings"},
      {"train-tabular", "train logistic and GBDT models (optional isotonic calibration)"},
      {"train-hybrid", "train the GBDT on tabular features plus GNN embeddings"},
      {"evaluate", "ranking/calibration metrics for stored or external score files"},
      {"fairness-audit", "per-group metrics and threshold audit"},
      {"report", "assemble the model comparison table"},
      {"pipeline", "run every stage in order on one config"},
  };
  for (const auto& [name, desc] : kStages) {
    CLI::App* sub = app.add_subcommand(name, desc);
    sub->add_option("--config", config_path, "JSON run config (defaults apply when omitted)");
    sub->add_option("--seed", seed_override, "override the config seed");
    sub->add_option("--threads", threads_override, "worker thread count (default 1)");
    sub->add_option("--out", out_override, "output directory (overrides config and env)");
    if (std::string(name) == "evaluate")
      sub->add_option("--scores", scores_path,
                      "external score CSV (row_id,score,label[,group...]); no artifacts needed");
  }

  std::vector<std::string> argv_s;
  argv_s.push_back("relrisk");
  argv_s.insert(argv_s.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const std::string& s : argv_s) argv.push_back(s.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    // Normalize CLI11's parse-error codes onto the documented contract:
    // 0 for --help, 1 for every usage error.
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }
  CLI::App* sub = app.get_subcommands().front();

  try {
    RunConfig cfg = config_path.empty() ? default_run_config() : load_run_config(config_path);
    if (sub->count("--seed") > 0) cfg.seed = seed_override;
    // Environment variables may override only output paths and thread counts.
    if (sub->count("--threads") > 0) {
      cfg.threads = threads_override;
    } else if (const char* env = std::getenv("RELRISK_THREADS")) {
      char* endp = nullptr;
      const long v = std::strtol(env, &endp, 10);
      if (endp == env || *endp != '\0' || v < 0)
        throw ConfigError("RELRISK_THREADS must be a non-negative integer");
      cfg.threads = static_cast<int>(v);
    }
    if (sub->count("--out") > 0) {
      cfg.out = out_override;
    } else if (const char* env = std::getenv("RELRISK_OUT")) {
      cfg.out = env;
    }
    validate_run_config(cfg);
    if (cfg.threads > 0) set_thread_count(static_cast<unsigned>(cfg.threads));
    const Ctx ctx{cfg, OutPaths{cfg.out}, run_config_hash(cfg), scores_path};
    run_stage(ctx, sub->get_name());
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const TrainError& e) {
    std::cerr << "training error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace relrisk
