#pragma once

// Heterogeneous graph compiled from the relational dataset: six node types,
// per-relation CSR adjacency with materialized reverse relations, per-type
// float feature matrices, and per-customer labels plus split masks.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "relrisk/features.hpp"
#include "relrisk/table.hpp"

namespace relrisk {

enum class NodeType : int {
  customer = 0,
  prev_application = 1,
  bureau_record = 2,
  installment = 3,
  pos_cash = 4,
  credit_card = 5,
};

constexpr int kNumNodeTypes = 6;

const char* node_type_name(NodeType t);
NodeType node_type_from_name(const std::string& name);  // throws DataError

// CSR adjacency for one directed relation; offsets are src-indexed.
struct Relation {
  NodeType src = NodeType::customer;
  NodeType dst = NodeType::customer;
  std::string name;
  int reverse_index = -1;          // index of rev_<name> (or the forward twin)
  std::vector<uint64_t> offsets;   // size = src node count + 1
  std::vector<uint32_t> targets;   // dst node rows

  size_t n_edges() const { return targets.size(); }
};

// One node type's rows: stable id map plus a dense row-major float matrix.
struct NodeSet {
  size_t n_nodes = 0;
  size_t n_features = 0;
  std::vector<int64_t> global_ids;         // original key (row index for keyless tables)
  std::vector<std::string> feature_names;
  std::vector<float> features;             // n_nodes x n_features, no missing values

  const float* row(size_t i) const { return features.data() + i * n_features; }
};

// Label-free, non-owning view of nodes and adjacency. Code that must never
// see labels (contrastive pretraining) takes this type instead of the graph.
struct GraphStructure {
  const std::array<NodeSet, kNumNodeTypes>* nodes = nullptr;
  const std::vector<Relation>* relations = nullptr;

  const NodeSet& node_set(NodeType t) const { return (*nodes)[static_cast<int>(t)]; }
};

struct HeteroGraph {
  std::array<NodeSet, kNumNodeTypes> nodes;
  std::vector<Relation> relations;     // five forward relations then their reverses
  std::vector<int8_t> labels;          // per customer node
  std::vector<uint8_t> train_mask;     // per customer node, disjoint with val/test
  std::vector<uint8_t> val_mask;
  std::vector<uint8_t> test_mask;

  const NodeSet& node_set(NodeType t) const { return nodes[static_cast<int>(t)]; }
  NodeSet& node_set(NodeType t) { return nodes[static_cast<int>(t)]; }
  GraphStructure structure() const { return {&nodes, &relations}; }
  int relation_index(const std::string& name) const;  // -1 when absent
  const Relation& relation(const std::string& name) const;  // throws DataError
  std::vector<uint32_t> mask_rows(const std::vector<uint8_t>& mask) const;
};

struct GraphConfig {
  double val_fraction = 0.15;
  double test_fraction = 0.15;
  uint64_t split_seed = 42;
  // Replaces customer features with a single constant column so the model
  // can only use graph structure (no-signal control runs).
  bool structure_only_features = false;
  // Explicit customer column selection; empty keeps every application-level
  // numeric column (raw columns plus the three application ratios).
  std::vector<std::string> customer_columns;
  PreprocessConfig preprocess;
};

// Compiles the dataset: nodes sorted by original key (file order for keyless
// child tables), orphan children excluded transitively, features median-
// imputed and scaled with state fitted on train-owned rows only, and the
// five foreign-key relations materialized with their reverses.
HeteroGraph build_hetero_graph(const RelationalDataset& ds, const GraphConfig& config);

// Stratified customer split: per-class shuffles keyed by seed, val/test
// fractions rounded per class, remainder is train.
void stratified_masks(const std::vector<int8_t>& labels, double val_fraction,
                      double test_fraction, uint64_t seed, std::vector<uint8_t>& train,
                      std::vector<uint8_t>& val, std::vector<uint8_t>& test);

struct RelationStat {
  std::string name;
  std::string src;
  std::string dst;
  size_t n_edges = 0;
  size_t max_out_degree = 0;
  std::vector<size_t> out_degree_hist;  // [d] = src nodes with out-degree d
};

struct GraphReport {
  std::array<size_t, kNumNodeTypes> node_counts{};
  std::vector<RelationStat> relations;
  std::vector<std::string> violations;

  bool ok() const { return violations.empty(); }
  std::string to_text() const;
  std::string to_json() const;
};

// Checks CSR invariants (monotone offsets, in-range targets), exact
// forward/reverse transposition, label/mask shape, and mask disjointness;
// violations are reported by name rather than thrown.
GraphReport validate_graph(const HeteroGraph& g);

// Binary persistence: one file per node type and per relation (8-byte magic
// + version), labels/masks, and a JSON manifest of counts and names.
void save_graph(const HeteroGraph& g, const std::string& directory);
HeteroGraph load_graph(const std::string& directory);

bool graphs_equal(const HeteroGraph& a, const HeteroGraph& b);

}  // namespace relrisk
