#pragma once

// Self-supervised Siamese pretraining of the graph encoder. Stochastic
// feature masking and paired edge dropout produce two correlated views of
// each sampled subgraph; a shared encoder plus a projection head map the
// seed customers of both views into a latent space where a
// temperature-scaled contrastive loss pulls the two projections of the
// same customer together and pushes them away from every other in-batch
// projection. The routine never sees labels: its input type carries node
// features and relations only.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "relrisk/common.hpp"
#include "relrisk/gnn.hpp"
#include "relrisk/graph.hpp"
#include "relrisk/sampler.hpp"
#include "relrisk/tensor.hpp"

namespace relrisk {

struct AugmentConfig {
  float feature_mask_rate = 0.20f;  // per-entry Bernoulli zeroing
  float edge_drop_rate = 0.20f;     // per logical edge, paired with its reverse
};

// One stochastic view of a subgraph. Every feature entry is zeroed with
// probability feature_mask_rate. Every logical edge is dropped with
// probability edge_drop_rate; the forward and reverse copies of an edge
// are dropped together so the two directions of a relation stay
// transposes of each other. Seeds, labels, and node id maps are
// preserved. The RNG draw order is fixed: feature entries by node type
// then row-major position, then edges by forward relation index with
// first occurrences in forward CSR order followed by reverse-only edges
// in reverse CSR order.
SampledSubgraph augment_subgraph(const SampledSubgraph& sub, const AugmentConfig& cfg,
                                 Rng& rng);

// Two independently augmented views with per-view RNG streams derived
// from `seed`.
std::pair<SampledSubgraph, SampledSubgraph> augment_views(const SampledSubgraph& sub,
                                                          const AugmentConfig& cfg,
                                                          uint64_t seed);

// Two-layer MLP applied to encoder states before the contrastive loss.
struct ProjectionHead {
  int in_dim = 256;
  int hidden_dim = 256;
  int out_dim = 128;
  std::vector<Param> params;  // proj/W1, proj/b1, proj/W2, proj/b2
};

ProjectionHead build_projection_head(int in_dim, int hidden_dim, int out_dim, uint64_t seed);

// h (N, in_dim) -> relu(h W1 + b1) W2 + b2 with rows L2-normalized.
// `ids` are the tape ids of the head parameters in declaration order.
template <typename S>
int projection_forward(Tape<S>& tape, const std::vector<int>& ids, int h);

// Temperature-scaled contrastive loss over two aligned views (N, D).
// Row i of zi and row i of zj form the positive pair. For each anchor the
// denominator ranges over the other 2N-1 projections drawn from both
// views (the anchor itself is excluded, its positive included). The loss
// is averaged over all 2N anchors. Rows must be unit-norm.
template <typename S>
int info_nce(Tape<S>& tape, int zi, int zj, S tau);

struct PretrainConfig {
  int epochs = 20;
  int batch_size = 512;
  float lr = 1e-3f;
  uint64_t seed = 42;
  Fanout fanout{{10, 10}};
  AugmentConfig augment;
  float tau = 0.5f;       // temperature
  int proj_hidden = 256;  // projection head sizes; input is the encoder width
  int proj_out = 128;
  bool verbose = false;
};

struct PretrainResult {
  GnnModel model;       // encoder; its classifier head stays at initialization
  ProjectionHead head;  // projection head, discarded for downstream use
  std::vector<double> epoch_loss;
};

// Pretrains a fresh encoder on all customers of the graph. Label-free by
// construction: GraphStructure exposes nodes and relations only.
PretrainResult pretrain_gnn(const GraphStructure& g, const GnnConfig& cfg,
                            const PretrainConfig& pcfg);

}  // namespace relrisk
