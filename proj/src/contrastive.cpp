#include "relrisk/contrastive.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace relrisk {

namespace {

void validate_augment(const AugmentConfig& cfg) {
  if (!(cfg.feature_mask_rate >= 0.0f && cfg.feature_mask_rate < 1.0f)) {
    throw ConfigError("augment: feature_mask_rate must be in [0, 1)");
  }
  if (!(cfg.edge_drop_rate >= 0.0f && cfg.edge_drop_rate < 1.0f)) {
    throw ConfigError("augment: edge_drop_rate must be in [0, 1)");
  }
}

uint64_t edge_key(uint32_t u, uint32_t v) {
  return (static_cast<uint64_t>(u) << 32) | static_cast<uint64_t>(v);
}

// Rebuilds a relation's CSR keeping only edges whose keep-decision is
// true. Forward relations key an edge (row u, target v) as (u, v);
// reverse relations as (v, u), so one decision covers both copies.
void filter_relation(Relation& rel, const std::unordered_map<uint64_t, bool>& keep,
                     bool forward) {
  std::vector<uint64_t> offsets(rel.offsets.size(), 0);
  std::vector<uint32_t> targets;
  targets.reserve(rel.targets.size());
  for (size_t u = 0; u + 1 < rel.offsets.size(); ++u) {
    for (uint64_t k = rel.offsets[u]; k < rel.offsets[u + 1]; ++k) {
      const uint32_t v = rel.targets[k];
      const uint64_t key =
          forward ? edge_key(static_cast<uint32_t>(u), v) : edge_key(v, static_cast<uint32_t>(u));
      if (keep.at(key)) targets.push_back(v);
    }
    offsets[u + 1] = targets.size();
  }
  rel.offsets = std::move(offsets);
  rel.targets = std::move(targets);
}

}  // namespace

SampledSubgraph augment_subgraph(const SampledSubgraph& sub, const AugmentConfig& cfg,
                                 Rng& rng) {
  validate_augment(cfg);
  SampledSubgraph out = sub;
  if (cfg.feature_mask_rate > 0.0f) {
    const double rate = static_cast<double>(cfg.feature_mask_rate);
    for (int t = 0; t < kNumNodeTypes; ++t) {
      for (auto& x : out.features[t]) {
        if (rng.uniform01() < rate) x = 0.0f;
      }
    }
  }
  if (cfg.edge_drop_rate > 0.0f) {
    const double rate = static_cast<double>(cfg.edge_drop_rate);
    for (size_t r = 0; r < out.relations.size(); ++r) {
      const int rr = out.relations[r].reverse_index;
      if (rr < 0 || static_cast<size_t>(rr) <= r) continue;  // one draw per pair
      std::unordered_map<uint64_t, bool> keep;
      auto draw_edges = [&](const Relation& rel, bool forward) {
        for (size_t u = 0; u + 1 < rel.offsets.size(); ++u) {
          for (uint64_t k = rel.offsets[u]; k < rel.offsets[u + 1]; ++k) {
            const uint32_t v = rel.targets[k];
            const uint64_t key = forward ? edge_key(static_cast<uint32_t>(u), v)
                                         : edge_key(v, static_cast<uint32_t>(u));
            if (keep.find(key) == keep.end()) keep.emplace(key, !(rng.uniform01() < rate));
          }
        }
      };
      draw_edges(out.relations[r], true);
      draw_edges(out.relations[static_cast<size_t>(rr)], false);
      filter_relation(out.relations[r], keep, true);
      filter_relation(out.relations[static_cast<size_t>(rr)], keep, false);
    }
  }
  return out;
}

std::pair<SampledSubgraph, SampledSubgraph> augment_views(const SampledSubgraph& sub,
                                                          const AugmentConfig& cfg,
                                                          uint64_t seed) {
  Rng rng_i(mix_seed(seed, 1));
  Rng rng_j(mix_seed(seed, 2));
  return {augment_subgraph(sub, cfg, rng_i), augment_subgraph(sub, cfg, rng_j)};
}

ProjectionHead build_projection_head(int in_dim, int hidden_dim, int out_dim, uint64_t seed) {
  if (in_dim < 1 || hidden_dim < 1 || out_dim < 1) {
    throw ConfigError("projection head: dimensions must be positive");
  }
  ProjectionHead head;
  head.in_dim = in_dim;
  head.hidden_dim = hidden_dim;
  head.out_dim = out_dim;
  Rng rng(seed);
  // Biases are Xavier-initialized as well: an all-zero encoder state (a
  // dead row under small widths) then projects to the nonzero bias vector
  // instead of the zero vector, which has no direction to normalize.
  auto add = [&](const std::string& name, size_t r, size_t c) {
    Param p;
    p.name = name;
    p.rows = r;
    p.cols = c;
    p.value.assign(r * c, 0.0f);
    const double bound = std::sqrt(6.0 / static_cast<double>(r + c));
    for (auto& v : p.value) {
      v = static_cast<float>((rng.uniform01() * 2.0 - 1.0) * bound);
    }
    head.params.push_back(std::move(p));
  };
  add("proj/W1", static_cast<size_t>(in_dim), static_cast<size_t>(hidden_dim));
  add("proj/b1", 1, static_cast<size_t>(hidden_dim));
  add("proj/W2", static_cast<size_t>(hidden_dim), static_cast<size_t>(out_dim));
  add("proj/b2", 1, static_cast<size_t>(out_dim));
  return head;
}

template <typename S>
int projection_forward(Tape<S>& tape, const std::vector<int>& ids, int h) {
  if (ids.size() != 4) throw std::logic_error("projection_forward: expected four parameter ids");
  const int a1 = tape.relu(tape.add_rowvec(tape.matmul(h, ids[0]), ids[1]));
  const int z2 = tape.add_rowvec(tape.matmul(a1, ids[2]), ids[3]);
  return tape.l2_normalize_rows(z2, S(1e-12));
}

template int projection_forward<float>(Tape<float>&, const std::vector<int>&, int);
template int projection_forward<double>(Tape<double>&, const std::vector<int>&, int);

template <typename S>
int info_nce(Tape<S>& tape, int zi, int zj, S tau) {
  if (!(tau > S(0))) throw ConfigError("info_nce: temperature must be positive");
  const size_t n = tape.rows(zi);
  const size_t d = tape.cols(zi);
  if (tape.rows(zj) != n || tape.cols(zj) != d) {
    throw DataError("info_nce: the two views must have matching shapes");
  }
  if (n < 2) throw DataError("info_nce: needs at least two anchor rows");
  for (int z : {zi, zj}) {
    const auto& v = tape.val(z);
    for (size_t i = 0; i < n; ++i) {
      double norm2 = 0.0;
      for (size_t j = 0; j < d; ++j) {
        norm2 += static_cast<double>(v[i * d + j]) * static_cast<double>(v[i * d + j]);
      }
      if (std::abs(norm2 - 1.0) > 1e-3) {
        throw DataError(norm2 < 1e-12
                            ? "info_nce: row " + std::to_string(i) + " has zero norm"
                            : "info_nce: row " + std::to_string(i) + " is not unit-norm");
      }
    }
  }

  const S inv_tau = S(1) / tau;
  std::vector<S> diag_mask(n * n, S(0)), eye(n * n, S(0)), ones_col(n, S(1));
  for (size_t i = 0; i < n; ++i) {
    diag_mask[i * n + i] = S(-1e30);  // exp underflows to an exact zero
    eye[i * n + i] = S(1);
  }
  const int mask = tape.input(n, n, diag_mask);
  const int id_mat = tape.input(n, n, eye);
  const int ones = tape.input(n, 1, ones_col);

  const int sii = tape.matmul_nt(zi, zi);
  const int sij = tape.matmul_nt(zi, zj);
  const int sji = tape.matmul_nt(zj, zi);
  const int sjj = tape.matmul_nt(zj, zj);

  // diag(sij) is the positive similarity for anchors of either view.
  const int pos = tape.scale(tape.matmul(tape.mul(sij, id_mat), ones), inv_tau);
  const int lse_i =
      tape.row_logsumexp(tape.scale(tape.concat_cols(tape.add(sii, mask), sij), inv_tau));
  const int lse_j =
      tape.row_logsumexp(tape.scale(tape.concat_cols(sji, tape.add(sjj, mask)), inv_tau));
  const int per_anchor = tape.add(tape.sub(lse_i, pos), tape.sub(lse_j, pos));
  return tape.scale(tape.reduce_mean(per_anchor), S(0.5));
}

template int info_nce<float>(Tape<float>&, int, int, float);
template int info_nce<double>(Tape<double>&, int, int, double);

PretrainResult pretrain_gnn(const GraphStructure& g, const GnnConfig& cfg,
                            const PretrainConfig& pcfg) {
  validate_augment(pcfg.augment);
  if (pcfg.epochs < 1) throw ConfigError("pretrain: epochs must be >= 1");
  if (pcfg.batch_size < 2) throw ConfigError("pretrain: batch_size must be >= 2");
  if (!(pcfg.lr > 0.0f)) throw ConfigError("pretrain: learning rate must be positive");
  if (!(pcfg.tau > 0.0f)) throw ConfigError("pretrain: temperature must be positive");
  if (pcfg.fanout.per_hop.size() != static_cast<size_t>(cfg.layers)) {
    throw ConfigError("pretrain: fanout hop count must equal the layer count");
  }
  for (int f : pcfg.fanout.per_hop) {
    if (f == 0 || f < -1) throw ConfigError("pretrain: fanout entries must be positive or -1");
  }

  const size_t n_customers = g.node_set(NodeType::customer).n_nodes;
  if (n_customers < 2) throw DataError("pretrain: need at least two customers");

  PretrainResult out;
  out.model = build_gnn(g, cfg, pcfg.seed);
  out.head = build_projection_head(cfg.hidden_dim, pcfg.proj_hidden, pcfg.proj_out,
                                   mix_seed(pcfg.seed, 777));

  // Two optimizers with identical settings are state-wise equivalent to
  // one over the concatenated parameter list.
  Adam opt_model, opt_head;
  opt_model.lr = pcfg.lr;
  opt_head.lr = pcfg.lr;

  std::vector<uint32_t> all_rows(n_customers);
  for (size_t i = 0; i < n_customers; ++i) all_rows[i] = static_cast<uint32_t>(i);

  for (int epoch = 0; epoch < pcfg.epochs; ++epoch) {
    std::vector<uint32_t> order = all_rows;
    Rng shuffle_rng(mix_seed(pcfg.seed, 1000 + static_cast<uint64_t>(epoch)));
    shuffle_rng.shuffle(order);

    double loss_sum = 0.0;
    size_t counted = 0;
    size_t batch_index = 0;
    for (size_t off = 0; off < order.size();
         off += static_cast<size_t>(pcfg.batch_size), ++batch_index) {
      const size_t end = std::min(order.size(), off + static_cast<size_t>(pcfg.batch_size));
      if (end - off < 2) continue;  // a contrastive batch needs two anchors
      const std::vector<uint32_t> seeds(order.begin() + off, order.begin() + end);
      const uint64_t batch_key = static_cast<uint64_t>(epoch) * 100000 + batch_index;
      const SampledSubgraph sub =
          sample_subgraph(g, seeds, pcfg.fanout, mix_seed(pcfg.seed, batch_key));
      const auto views = augment_views(sub, pcfg.augment, mix_seed(pcfg.seed, batch_key));

      Tape<float> tape;
      const auto ids_m = register_params(tape, out.model.params);
      const auto ids_h = register_params(tape, out.head.params);
      const auto fwd_i = gnn_forward<float>(tape, &out.model, ids_m, views.first,
                                            /*train=*/true, /*update_bn=*/true);
      const auto fwd_j = gnn_forward<float>(tape, &out.model, ids_m, views.second,
                                            /*train=*/true, /*update_bn=*/true);
      const int zi = projection_forward(tape, ids_h, fwd_i.seed_states);
      const int zj = projection_forward(tape, ids_h, fwd_j.seed_states);
      const int loss = info_nce<float>(tape, zi, zj, pcfg.tau);
      const double loss_val = static_cast<double>(tape.val(loss)[0]);
      if (!std::isfinite(loss_val)) {
        throw TrainError("pretraining diverged: non-finite loss at epoch " +
                         std::to_string(epoch) + " batch " + std::to_string(batch_index) +
                         " (arch=" + gnn_arch_name(cfg.arch) +
                         ", lr=" + fmt_double(static_cast<double>(pcfg.lr)) + ")");
      }
      tape.backward(loss);
      opt_model.step(out.model.params, collect_grads(tape, ids_m));
      opt_head.step(out.head.params, collect_grads(tape, ids_h));
      loss_sum += loss_val * static_cast<double>(seeds.size());
      counted += seeds.size();
    }
    if (counted == 0) throw DataError("pretrain: no batch had at least two seeds");
    out.epoch_loss.push_back(loss_sum / static_cast<double>(counted));
    if (pcfg.verbose) {
      std::fprintf(stderr, "pretrain epoch %d loss %.6f\n", epoch, out.epoch_loss.back());
    }
  }
  return out;
}

}  // namespace relrisk
