#pragma once

// Config-driven command-line pipeline. A single JSON run config plus a
// handful of flags drive eleven chained subcommands (EDA through report);
// every stage writes versioned artifacts and a JSON run manifest, checks
// that its upstream artifacts exist, and warns when a chained stage was
// produced under a different config hash. The entry point is exposed as a
// library function so tests can drive the CLI in-process.

#include <cstdint>
#include <string>
#include <vector>

#include "relrisk/boosted.hpp"
#include "relrisk/contrastive.hpp"
#include "relrisk/features.hpp"
#include "relrisk/gnn.hpp"
#include "relrisk/synth.hpp"

namespace relrisk {

// ---------------------------------------------------------------------------
// Run configuration (JSON). Every field has a default; unknown keys are
// rejected. The documented schema lives in README.md.

struct DataConfig {
  std::string source = "synthetic";  // "synthetic" | "directory"
  std::string directory;             // CSV directory when source = "directory"
  SynthConfig synthetic;
};

struct SplitConfig {
  double val_fraction = 0.15;
  double test_fraction = 0.15;
};

struct FeaturesRunConfig {
  std::vector<std::string> target_encode;   // categorical columns to encode
  double log1p_skew_above = 0.0;            // 0 disables log1p twin columns
  double correlation_prune_above = 0.0;     // 0 disables correlation pruning
  double drop_missing_above = 0.80;
  bool center_standardized = false;         // linear pipeline: centering off
  double pca_variance_target = 0.0;         // 0 disables the PCA artifact
};

struct GraphRunConfig {
  bool structure_only_features = false;
  std::vector<std::string> customer_columns;
};

struct GnnRunConfig {
  GnnConfig net;
  TrainConfig train;                 // seed is overridden by the run seed
  bool init_from_pretrained = false; // warm-start from the pretrained encoder
  bool freeze_encoder = false;       // only meaningful with a warm start
};

struct EmbeddingsRunConfig {
  std::string source = "relattn";  // which saved GNN provides embeddings
};

struct MetricsRunConfig {
  std::vector<std::string> group_columns{"CODE_GENDER", "AGE_GROUP"};
  double tau = 0.5;
  std::vector<double> k_fractions{0.01, 0.05, 0.10};
  int calibration_bins = 10;
  // Age band edges in years for the derived AGE_BAND group column
  // (computed from DAYS_BIRTH when a dataset has no categorical age group).
  std::vector<double> age_bin_edges;
};

struct RunConfig {
  uint64_t seed = 42;
  int threads = 0;  // 0 leaves the global thread count untouched
  std::string out = "relrisk_out";
  DataConfig data;
  SplitConfig split;
  FeaturesRunConfig features;
  GraphRunConfig graph;
  GnnRunConfig gnn;
  PretrainConfig pretrain;  // seed is overridden by the run seed
  EmbeddingsRunConfig embeddings;
  GbdtParams gbdt;          // seed is overridden by the run seed
  LogisticConfig logistic;
  bool calibrate = false;   // isotonic calibration of the GBDT on OOF scores
  int calibration_folds = 5;
  MetricsRunConfig metrics;
};

RunConfig default_run_config();
// Throws ConfigError on unreadable files, malformed JSON, unknown keys, or
// out-of-range values.
RunConfig load_run_config(const std::string& path);
// Canonical-JSON FNV-1a hash of the effective config. The output directory
// and thread count are excluded: they change where and how fast artifacts
// are written, never what they contain.
std::string run_config_hash(const RunConfig& cfg);
std::string run_config_json(const RunConfig& cfg);  // effective config, pretty
std::string relrisk_version();

// ---------------------------------------------------------------------------
// Artifact persistence shared between stages (and reused by tests).

void save_feature_matrix(const std::string& path, const FeatureMatrix& fm);
FeatureMatrix load_feature_matrix(const std::string& path);  // DataError

struct StoredEmbeddings {
  std::string source;
  std::vector<int64_t> row_ids;
  Embeddings emb;
};

void save_embeddings(const std::string& path, const StoredEmbeddings& se);
StoredEmbeddings load_embeddings(const std::string& path);  // DataError

// Customer split assignments, application-table row order.
struct SplitTable {
  std::vector<int64_t> row_ids;
  std::vector<int8_t> labels;
  std::vector<int8_t> split_of;  // 0 train, 1 val, 2 test
  std::vector<uint32_t> rows_of(int8_t which) const;
};

SplitTable make_splits(const std::vector<int64_t>& row_ids, const std::vector<int>& labels,
                       const SplitConfig& cfg, uint64_t seed);
void write_splits_csv(const std::string& path, const SplitTable& t);
SplitTable read_splits_csv(const std::string& path);  // DataError

// ---------------------------------------------------------------------------
// Entry point. `args` excludes the program name. Returns the process exit
// code: 0 success, 1 usage/config error, 2 data validation failure,
// 3 training divergence.
int run_cli(const std::vector<std::string>& args);

}  // namespace relrisk
