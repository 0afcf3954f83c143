#pragma once

// Heterogeneous GNNs over sampled subgraphs: a relational GraphSAGE
// (per-relation mean aggregation, concat with the self state, learned map,
// summed across relations) and a relation-aware attentive network (per-
// relation multi-head GATv2 scoring, residual connections, per-type batch
// norm). Both share the autodiff tape, so production runs in f32 while
// finite-difference checks run the same code in f64.

#include <array>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "relrisk/graph.hpp"
#include "relrisk/sampler.hpp"
#include "relrisk/tensor.hpp"

namespace relrisk {

enum class GnnArch { sage, relattn };

const char* gnn_arch_name(GnnArch a);
GnnArch gnn_arch_from_name(const std::string& name);  // throws ConfigError

struct GnnConfig {
  GnnArch arch = GnnArch::sage;
  int layers = 2;
  int hidden_dim = 256;
  int heads = 4;             // relattn only; hidden_dim % heads == 0
  float leaky_slope = 0.2f;  // GATv2 scoring slope
  float bn_eps = 1e-5f;
  float bn_momentum = 0.1f;
};

// Parameters plus the metadata needed to rebuild the forward pass. Batch
// norm running statistics live outside the trained parameter list (they
// are accumulated, not optimized) but persist in checkpoints.
struct GnnModel {
  GnnConfig config;
  uint64_t init_seed = 0;
  std::vector<std::string> relation_names;         // graph relation order
  std::vector<NodeType> relation_src, relation_dst;
  std::array<int, kNumNodeTypes> in_dims{};
  std::vector<Param> params;
  std::unordered_map<std::string, size_t> param_index;
  // [layer][type] -> per-feature running stats (relattn only; empty for sage).
  std::vector<std::array<std::vector<float>, kNumNodeTypes>> bn_mean, bn_var;

  size_t param_pos(const std::string& name) const;  // throws logic_error
  std::array<int, kNumNodeTypes> layer_in_dims(int layer) const;
};

// Deterministic Xavier-uniform construction keyed by init_seed.
GnnModel build_gnn(const GraphStructure& g, const GnnConfig& cfg, uint64_t init_seed);

// One attention head's weights over one relation's sampled edges, kept so
// tests can assert the per-target normalization.
struct AttentionRecord {
  int layer = 0;
  int relation = 0;
  int head = 0;
  int alpha = -1;                  // tape node, (n_edges, 1)
  std::vector<uint32_t> edge_dst;  // dst-local id per edge
  size_t n_dst = 0;
};

template <typename S>
struct GnnForward {
  std::array<int, kNumNodeTypes> hidden{};  // final-layer states, -1 if type empty
  int customer_states = -1;                 // alias of hidden[customer]
  int seed_states = -1;                     // (n_seeds, hidden_dim)
  int seed_logits = -1;                     // (n_seeds, 1)
  std::vector<AttentionRecord> attentions;  // relattn only
};

// Runs the architecture selected by model.config over a sampled subgraph.
// param_ids must be register_params(tape, model.params) order. train picks
// batch-norm batch statistics; update_bn additionally folds them into the
// model's running stats (off during gradient checks to keep the forward
// pure). Eval mode uses the stored running stats.
template <typename S>
GnnForward<S> gnn_forward(Tape<S>& tape, const GnnModel& model,
                          const std::vector<int>& param_ids, const SampledSubgraph& sub,
                          bool train, bool update_bn);

// Non-const overload participants: running stats mutate through the model
// reference, so training passes the model by pointer.
template <typename S>
GnnForward<S> gnn_forward(Tape<S>& tape, GnnModel* model, const std::vector<int>& param_ids,
                          const SampledSubgraph& sub, bool train, bool update_bn);

struct TrainConfig {
  int epochs = 50;
  int batch_size = 512;
  float lr = 1e-3f;
  int patience = 5;          // epochs without val ROC-AUC improvement
  uint64_t seed = 42;
  Fanout fanout{{10, 10}};   // per-hop caps for training batches
  int eval_batch_size = 1024;
  bool verbose = false;
};

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double val_roc_auc = 0.0;
};

struct TrainedGnn {
  GnnModel model;
  std::vector<EpochStats> history;
  int best_epoch = -1;
  double best_val_auc = 0.0;
  double pos_weight = 1.0;
};

// Mini-batch training with class-weighted BCE (pos_weight = train
// negatives / positives), Adam, per-epoch validation ROC-AUC, and early
// stopping that restores the best checkpoint. Deterministic in cfg/seed.
// Throws TrainError with epoch/batch diagnostics on non-finite loss.
TrainedGnn train_gnn(const HeteroGraph& g, const GnnConfig& cfg, const TrainConfig& tcfg);

// Same training loop starting from an existing model (e.g. a pretrained
// encoder). With freeze_encoder only head/* parameters receive updates
// and batch-norm running statistics stay frozen.
TrainedGnn train_gnn(const HeteroGraph& g, GnnModel init, const TrainConfig& tcfg,
                     bool freeze_encoder = false);

void write_history_csv(const std::string& path, const std::vector<EpochStats>& history);

// Eval-mode scores (sigmoid probabilities) for the given customer rows,
// computed from unlimited-fanout neighborhoods in deterministic batches.
// relation_mask removes relations at inference (pair with its reverse to
// silence a relation in both directions).
std::vector<double> score_customers(const GnnModel& model, const GraphStructure& g,
                                    const std::vector<uint32_t>& rows, int batch_size = 1024,
                                    const std::vector<uint8_t>* relation_mask = nullptr);

struct Embeddings {
  size_t n_rows = 0;
  size_t dim = 0;
  std::vector<float> values;  // row-major

  const float* row(size_t i) const { return values.data() + i * dim; }
};

// Final-layer customer states (the representation under the output head),
// eval mode, rows in customer node order.
Embeddings extract_embeddings(const GnnModel& model, const GraphStructure& g,
                              int batch_size = 1024);

struct MaskEvalResult {
  std::string relation;
  double base_roc = 0.0, base_pr = 0.0;
  double masked_roc = 0.0, masked_pr = 0.0;
  double delta_roc = 0.0, delta_pr = 0.0;  // masked - base
};

// Test-split metrics with one relation (and its reverse) removed at
// inference only. Throws ConfigError for an unknown relation name.
MaskEvalResult relation_mask_eval(const GnnModel& model, const HeteroGraph& g,
                                  const std::string& relation, int batch_size = 1024);

// Persistence: <base>.bin/<base>.json hold parameters and batch-norm
// running stats; <base>.meta.json holds the architecture. With
// include_head=false the output head is omitted (pretraining encoders);
// loading then keeps the freshly initialized head.
void save_gnn(const std::string& path_base, const GnnModel& model, bool include_head = true);
GnnModel load_gnn(const std::string& path_base, const GraphStructure& g);

}  // namespace relrisk
