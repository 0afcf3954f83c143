#pragma once

// Seeded k-hop neighborhood sampling: customer-centered typed subgraphs with
// per-relation caps, sampled without replacement.

#include <array>
#include <cstdint>
#include <vector>

#include "relrisk/graph.hpp"

namespace relrisk {

struct Fanout {
  // Cap per (node, relation) at each hop; -1 means unlimited.
  std::vector<int> per_hop;

  static Fanout unlimited(size_t hops) { return Fanout{std::vector<int>(hops, -1)}; }
};

struct SampledSubgraph {
  // Per type: local row -> global node row, plus gathered feature rows.
  std::array<std::vector<uint32_t>, kNumNodeTypes> local_to_global;
  std::array<std::vector<float>, kNumNodeTypes> features;
  std::array<size_t, kNumNodeTypes> n_features{};
  // Local CSR per relation, aligned with the graph's relation order.
  std::vector<Relation> relations;
  std::vector<uint32_t> seed_locals;  // one per input seed, customer type
  std::vector<int8_t> seed_labels;    // filled only when sampling a labeled graph

  size_t n_local(NodeType t) const { return local_to_global[static_cast<int>(t)].size(); }
};

// Expands hop by hop along every relation (reverses included): expanding
// node v along relation q reads q's CSR row of v and records the sampled
// edges under rev_q, so v receives messages from what it sampled. A
// relation_mask entry of 0 removes that relation's edges, which skips
// expansion along its reverse. Deterministic in rng_seed.
SampledSubgraph sample_subgraph(const GraphStructure& structure,
                                const std::vector<uint32_t>& seeds, const Fanout& fanout,
                                uint64_t rng_seed,
                                const std::vector<uint8_t>* relation_mask = nullptr);

// Labeled wrapper: also fills seed_labels from the graph.
SampledSubgraph sample_subgraph(const HeteroGraph& g, const std::vector<uint32_t>& seeds,
                                const Fanout& fanout, uint64_t rng_seed,
                                const std::vector<uint8_t>* relation_mask = nullptr);

// The whole graph as one batch (identity id maps); seeds select customers.
SampledSubgraph full_graph_batch(const HeteroGraph& g, const std::vector<uint32_t>& seeds);

bool subgraphs_equal(const SampledSubgraph& a, const SampledSubgraph& b);

}  // namespace relrisk
