#include "relrisk/sampler.hpp"

#include <cstring>
#include <unordered_map>

namespace relrisk {

namespace {

struct Workspace {
  std::array<std::unordered_map<uint32_t, uint32_t>, kNumNodeTypes> global_to_local;
  // Edges per relation as (local src, local dst) in traversal order.
  std::vector<std::vector<std::pair<uint32_t, uint32_t>>> edges;
};

uint32_t add_node(Workspace& ws, SampledSubgraph& sub, NodeType t, uint32_t global,
                  bool* inserted) {
  auto& map = ws.global_to_local[static_cast<int>(t)];
  auto [it, fresh] = map.emplace(global, static_cast<uint32_t>(map.size()));
  if (fresh) sub.local_to_global[static_cast<int>(t)].push_back(global);
  if (inserted) *inserted = fresh;
  return it->second;
}

}  // namespace

SampledSubgraph sample_subgraph(const GraphStructure& structure,
                                const std::vector<uint32_t>& seeds, const Fanout& fanout,
                                uint64_t rng_seed,
                                const std::vector<uint8_t>* relation_mask) {
  if (seeds.empty()) throw ConfigError("sampler: seeds must be non-empty");
  if (fanout.per_hop.empty()) throw ConfigError("sampler: fanout needs at least one hop");
  for (int cap : fanout.per_hop) {
    if (cap != -1 && cap <= 0) {
      throw ConfigError("sampler: fanout caps must be positive or -1 (unlimited)");
    }
  }
  const auto& relations = *structure.relations;
  if (relation_mask && relation_mask->size() != relations.size()) {
    throw ConfigError("sampler: relation mask size mismatch");
  }
  const size_t n_customers = structure.node_set(NodeType::customer).n_nodes;

  SampledSubgraph sub;
  Workspace ws;
  ws.edges.resize(relations.size());

  // Frontier per type: nodes added during the previous hop, in local order.
  std::array<std::vector<uint32_t>, kNumNodeTypes> frontier;
  sub.seed_locals.reserve(seeds.size());
  for (uint32_t s : seeds) {
    if (s >= n_customers) throw ConfigError("sampler: seed index out of range");
    bool fresh = false;
    uint32_t local = add_node(ws, sub, NodeType::customer, s, &fresh);
    if (fresh) frontier[static_cast<int>(NodeType::customer)].push_back(s);
    sub.seed_locals.push_back(local);
  }

  Rng rng(rng_seed);
  std::vector<uint32_t> scratch;
  for (int cap : fanout.per_hop) {
    std::array<std::vector<uint32_t>, kNumNodeTypes> next_frontier;
    for (size_t ri = 0; ri < relations.size(); ++ri) {
      const Relation& rel = relations[ri];
      // Sampled edges land in the reverse relation; its mask governs.
      if (relation_mask && !(*relation_mask)[rel.reverse_index]) continue;
      const auto& src_frontier = frontier[static_cast<int>(rel.src)];
      if (src_frontier.empty() || rel.targets.empty()) continue;
      for (uint32_t v_global : src_frontier) {
        const uint32_t v_local =
            ws.global_to_local[static_cast<int>(rel.src)].at(v_global);
        const uint64_t lo = rel.offsets[v_global];
        const uint64_t hi = rel.offsets[v_global + 1];
        const uint64_t deg = hi - lo;
        if (deg == 0) continue;
        size_t take;
        if (cap < 0 || static_cast<uint64_t>(cap) >= deg) {
          take = static_cast<size_t>(deg);
          scratch.assign(rel.targets.begin() + lo, rel.targets.begin() + hi);
        } else {
          take = static_cast<size_t>(cap);
          scratch.assign(rel.targets.begin() + lo, rel.targets.begin() + hi);
          // Partial Fisher-Yates: the first `take` slots become a uniform
          // without-replacement draw.
          for (size_t i = 0; i < take; ++i) {
            size_t j = i + static_cast<size_t>(rng.below(deg - i));
            std::swap(scratch[i], scratch[j]);
          }
        }
        for (size_t i = 0; i < take; ++i) {
          const uint32_t u_global = scratch[i];
          bool fresh = false;
          const uint32_t u_local = add_node(ws, sub, rel.dst, u_global, &fresh);
          if (fresh) next_frontier[static_cast<int>(rel.dst)].push_back(u_global);
          ws.edges[rel.reverse_index].emplace_back(u_local, v_local);
        }
      }
    }
    frontier = std::move(next_frontier);
  }

  // Gather features and build local CSR.
  for (int t = 0; t < kNumNodeTypes; ++t) {
    const NodeSet& ns = (*structure.nodes)[t];
    sub.n_features[t] = ns.n_features;
    const auto& locals = sub.local_to_global[t];
    sub.features[t].resize(locals.size() * ns.n_features);
    for (size_t i = 0; i < locals.size(); ++i) {
      std::memcpy(sub.features[t].data() + i * ns.n_features, ns.row(locals[i]),
                  ns.n_features * sizeof(float));
    }
  }
  sub.relations.reserve(relations.size());
  for (size_t ri = 0; ri < relations.size(); ++ri) {
    const Relation& rel = relations[ri];
    Relation local;
    local.src = rel.src;
    local.dst = rel.dst;
    local.name = rel.name;
    local.reverse_index = rel.reverse_index;
    const size_t n_src = sub.n_local(rel.src);
    local.offsets.assign(n_src + 1, 0);
    for (const auto& [s, d] : ws.edges[ri]) local.offsets[s + 1]++;
    for (size_t i = 1; i <= n_src; ++i) local.offsets[i] += local.offsets[i - 1];
    local.targets.resize(ws.edges[ri].size());
    std::vector<uint64_t> cursor(local.offsets.begin(), local.offsets.end() - 1);
    for (const auto& [s, d] : ws.edges[ri]) local.targets[cursor[s]++] = d;
    sub.relations.push_back(std::move(local));
  }
  return sub;
}

SampledSubgraph sample_subgraph(const HeteroGraph& g, const std::vector<uint32_t>& seeds,
                                const Fanout& fanout, uint64_t rng_seed,
                                const std::vector<uint8_t>* relation_mask) {
  SampledSubgraph sub = sample_subgraph(g.structure(), seeds, fanout, rng_seed, relation_mask);
  sub.seed_labels.reserve(seeds.size());
  for (uint32_t s : seeds) sub.seed_labels.push_back(g.labels[s]);
  return sub;
}

SampledSubgraph full_graph_batch(const HeteroGraph& g, const std::vector<uint32_t>& seeds) {
  const size_t n_customers = g.node_set(NodeType::customer).n_nodes;
  SampledSubgraph sub;
  for (int t = 0; t < kNumNodeTypes; ++t) {
    const NodeSet& ns = g.nodes[t];
    sub.n_features[t] = ns.n_features;
    sub.features[t] = ns.features;
    sub.local_to_global[t].resize(ns.n_nodes);
    for (size_t i = 0; i < ns.n_nodes; ++i) {
      sub.local_to_global[t][i] = static_cast<uint32_t>(i);
    }
  }
  sub.relations = g.relations;
  sub.seed_locals.reserve(seeds.size());
  sub.seed_labels.reserve(seeds.size());
  for (uint32_t s : seeds) {
    if (s >= n_customers) throw ConfigError("sampler: seed index out of range");
    sub.seed_locals.push_back(s);
    sub.seed_labels.push_back(g.labels[s]);
  }
  return sub;
}

bool subgraphs_equal(const SampledSubgraph& a, const SampledSubgraph& b) {
  for (int t = 0; t < kNumNodeTypes; ++t) {
    if (a.local_to_global[t] != b.local_to_global[t] || a.n_features[t] != b.n_features[t] ||
        a.features[t].size() != b.features[t].size()) {
      return false;
    }
    if (std::memcmp(a.features[t].data(), b.features[t].data(),
                    a.features[t].size() * sizeof(float)) != 0) {
      return false;
    }
  }
  if (a.relations.size() != b.relations.size()) return false;
  for (size_t i = 0; i < a.relations.size(); ++i) {
    const Relation& x = a.relations[i];
    const Relation& y = b.relations[i];
    if (x.name != y.name || x.offsets != y.offsets || x.targets != y.targets) return false;
  }
  return a.seed_locals == b.seed_locals && a.seed_labels == b.seed_labels;
}

}  // namespace relrisk
