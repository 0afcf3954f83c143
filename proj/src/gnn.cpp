#include "relrisk/gnn.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "relrisk/common.hpp"
#include "relrisk/csv.hpp"
#include "relrisk/metrics.hpp"

namespace relrisk {

namespace {

std::string sage_w_name(int l, const std::string& rel) {
  return "l" + std::to_string(l) + "/rel/" + rel + "/W";
}

std::string attn_w_name(int l, const std::string& rel, int head, const char* which) {
  return "l" + std::to_string(l) + "/rel/" + rel + "/h" + std::to_string(head) + "/" + which;
}

std::string type_param_name(int l, int type, const char* which) {
  return "l" + std::to_string(l) + "/type/" + node_type_name(static_cast<NodeType>(type)) + "/" +
         which;
}

std::string bn_stat_name(int l, int type, const char* which) {
  return "bn/l" + std::to_string(l) + "/type/" + node_type_name(static_cast<NodeType>(type)) +
         "/" + which;
}

struct EdgeList {
  std::vector<uint32_t> src, dst;  // one entry per edge, local ids
};

EdgeList edges_of(const Relation& rel) {
  EdgeList e;
  e.src.reserve(rel.targets.size());
  e.dst.reserve(rel.targets.size());
  for (size_t u = 0; u + 1 < rel.offsets.size(); ++u) {
    for (uint64_t k = rel.offsets[u]; k < rel.offsets[u + 1]; ++k) {
      e.src.push_back(static_cast<uint32_t>(u));
      e.dst.push_back(rel.targets[k]);
    }
  }
  return e;
}

void validate_gnn_config(const GnnConfig& cfg) {
  if (cfg.layers < 1) throw ConfigError("gnn: layers must be >= 1");
  if (cfg.hidden_dim < 1) throw ConfigError("gnn: hidden_dim must be >= 1");
  if (cfg.arch == GnnArch::relattn) {
    if (cfg.heads < 1) throw ConfigError("gnn: heads must be >= 1");
    if (cfg.hidden_dim % cfg.heads != 0) {
      throw ConfigError("gnn: hidden_dim must be divisible by heads");
    }
  }
  if (!(cfg.leaky_slope > 0.0f)) throw ConfigError("gnn: leaky_slope must be positive");
  if (!(cfg.bn_eps > 0.0f)) throw ConfigError("gnn: bn_eps must be positive");
  if (!(cfg.bn_momentum > 0.0f && cfg.bn_momentum < 1.0f)) {
    throw ConfigError("gnn: bn_momentum must be in (0, 1)");
  }
}

bool is_head_param(const std::string& name) { return name.rfind("head/", 0) == 0; }

}  // namespace

const char* gnn_arch_name(GnnArch a) { return a == GnnArch::sage ? "sage" : "relattn"; }

GnnArch gnn_arch_from_name(const std::string& name) {
  if (name == "sage") return GnnArch::sage;
  if (name == "relattn") return GnnArch::relattn;
  throw ConfigError("unknown gnn architecture '" + name + "' (expected sage or relattn)");
}

size_t GnnModel::param_pos(const std::string& name) const {
  auto it = param_index.find(name);
  if (it == param_index.end()) throw std::logic_error("gnn: unknown parameter " + name);
  return it->second;
}

std::array<int, kNumNodeTypes> GnnModel::layer_in_dims(int layer) const {
  if (layer == 0) return in_dims;
  std::array<int, kNumNodeTypes> d{};
  d.fill(config.hidden_dim);
  return d;
}

GnnModel build_gnn(const GraphStructure& g, const GnnConfig& cfg, uint64_t init_seed) {
  validate_gnn_config(cfg);
  GnnModel m;
  m.config = cfg;
  m.init_seed = init_seed;
  for (const auto& rel : *g.relations) {
    m.relation_names.push_back(rel.name);
    m.relation_src.push_back(rel.src);
    m.relation_dst.push_back(rel.dst);
  }
  for (int t = 0; t < kNumNodeTypes; ++t) {
    const NodeSet& ns = g.node_set(static_cast<NodeType>(t));
    if (ns.n_nodes > 0 && ns.n_features == 0) {
      throw DataError(std::string("gnn: node type ") +
                      node_type_name(static_cast<NodeType>(t)) + " has no features");
    }
    m.in_dims[t] = static_cast<int>(ns.n_features);
  }

  Rng rng(init_seed);
  auto add_param = [&](const std::string& name, size_t r, size_t c, bool xavier,
                       float fill = 0.0f) {
    Param p;
    p.name = name;
    p.rows = r;
    p.cols = c;
    p.value.resize(r * c, fill);
    if (xavier) {
      const double bound = std::sqrt(6.0 / double(r + c));
      for (auto& v : p.value) v = static_cast<float>((rng.uniform01() * 2.0 - 1.0) * bound);
    }
    m.param_index.emplace(p.name, m.params.size());
    m.params.push_back(std::move(p));
  };

  const size_t hidden = static_cast<size_t>(cfg.hidden_dim);
  for (int l = 0; l < cfg.layers; ++l) {
    const auto din = m.layer_in_dims(l);
    if (cfg.arch == GnnArch::sage) {
      for (size_t r = 0; r < m.relation_names.size(); ++r) {
        const size_t d_src = static_cast<size_t>(din[static_cast<int>(m.relation_src[r])]);
        const size_t d_dst = static_cast<size_t>(din[static_cast<int>(m.relation_dst[r])]);
        add_param(sage_w_name(l, m.relation_names[r]), d_dst + d_src, hidden, true);
      }
    } else {
      const size_t head_dim = hidden / static_cast<size_t>(cfg.heads);
      for (size_t r = 0; r < m.relation_names.size(); ++r) {
        const size_t d_src = static_cast<size_t>(din[static_cast<int>(m.relation_src[r])]);
        const size_t d_dst = static_cast<size_t>(din[static_cast<int>(m.relation_dst[r])]);
        for (int h = 0; h < cfg.heads; ++h) {
          add_param(attn_w_name(l, m.relation_names[r], h, "Ws"), d_src, head_dim, true);
          add_param(attn_w_name(l, m.relation_names[r], h, "Wt"), d_dst, head_dim, true);
          add_param(attn_w_name(l, m.relation_names[r], h, "a"), head_dim, 1, true);
        }
      }
      for (int t = 0; t < kNumNodeTypes; ++t) {
        if (din[t] != cfg.hidden_dim) {
          add_param(type_param_name(l, t, "Wres"), static_cast<size_t>(din[t]), hidden, true);
        }
        add_param(type_param_name(l, t, "bn_g"), 1, hidden, false, 1.0f);
        add_param(type_param_name(l, t, "bn_b"), 1, hidden, false, 0.0f);
      }
    }
  }
  add_param("head/W", hidden, 1, true);
  add_param("head/b", 1, 1, false, 0.0f);

  if (cfg.arch == GnnArch::relattn) {
    m.bn_mean.resize(cfg.layers);
    m.bn_var.resize(cfg.layers);
    for (int l = 0; l < cfg.layers; ++l) {
      for (int t = 0; t < kNumNodeTypes; ++t) {
        m.bn_mean[l][t].assign(hidden, 0.0f);
        m.bn_var[l][t].assign(hidden, 1.0f);
      }
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Forward pass

template <typename S>
GnnForward<S> gnn_forward(Tape<S>& tape, GnnModel* model, const std::vector<int>& param_ids,
                          const SampledSubgraph& sub, bool train, bool update_bn) {
  const GnnConfig& cfg = model->config;
  if (param_ids.size() != model->params.size()) {
    throw std::logic_error("gnn_forward: param id count mismatch");
  }
  if (sub.relations.size() != model->relation_names.size()) {
    throw DataError("gnn_forward: subgraph relation set does not match the model");
  }
  for (size_t r = 0; r < sub.relations.size(); ++r) {
    if (sub.relations[r].name != model->relation_names[r]) {
      throw DataError("gnn_forward: subgraph relation order does not match the model");
    }
  }
  if (sub.seed_locals.empty()) throw DataError("gnn_forward: batch has no seeds");

  auto pid = [&](const std::string& name) { return param_ids[model->param_pos(name)]; };

  // Layer-0 states: raw feature matrices; -1 marks types absent from the batch.
  std::array<int, kNumNodeTypes> h{};
  h.fill(-1);
  for (int t = 0; t < kNumNodeTypes; ++t) {
    const size_t n = sub.local_to_global[t].size();
    if (n == 0) continue;
    if (static_cast<int>(sub.n_features[t]) != model->in_dims[t]) {
      throw DataError(std::string("gnn_forward: feature width mismatch for type ") +
                      node_type_name(static_cast<NodeType>(t)));
    }
    std::vector<S> vals(sub.features[t].begin(), sub.features[t].end());
    h[t] = tape.input(n, sub.n_features[t], vals);
  }

  std::vector<EdgeList> edges(sub.relations.size());
  for (size_t r = 0; r < sub.relations.size(); ++r) edges[r] = edges_of(sub.relations[r]);

  GnnForward<S> out;
  const size_t hidden = static_cast<size_t>(cfg.hidden_dim);
  for (int l = 0; l < cfg.layers; ++l) {
    const auto din = model->layer_in_dims(l);
    std::array<int, kNumNodeTypes> acc{};
    acc.fill(-1);
    for (size_t r = 0; r < sub.relations.size(); ++r) {
      const int ts = static_cast<int>(sub.relations[r].src);
      const int td = static_cast<int>(sub.relations[r].dst);
      const size_t n_dst = sub.local_to_global[td].size();
      if (n_dst == 0) continue;
      const EdgeList& el = edges[r];
      if (cfg.arch == GnnArch::sage) {
        // Mean-aggregate in-neighbors (zero rows when none), concat the
        // self state, apply the per-relation map, sum across relations.
        int agg;
        if (el.src.empty() || h[ts] < 0) {
          agg = tape.zeros(n_dst, static_cast<size_t>(din[ts]));
        } else {
          const int gathered = tape.row_gather(h[ts], el.src);
          agg = tape.segment_mean(gathered, el.dst, n_dst);
        }
        const int cat = tape.concat_cols(h[td], agg);
        const int z = tape.matmul(cat, pid(sage_w_name(l, model->relation_names[r])));
        acc[td] = acc[td] < 0 ? z : tape.add(acc[td], z);
      } else {
        if (el.src.empty() || h[ts] < 0) continue;  // no edges -> zero message
        int rel_msg = -1;
        for (int hd = 0; hd < cfg.heads; ++hd) {
          const std::string& rn = model->relation_names[r];
          const int proj_src = tape.matmul(h[ts], pid(attn_w_name(l, rn, hd, "Ws")));
          const int proj_dst = tape.matmul(h[td], pid(attn_w_name(l, rn, hd, "Wt")));
          const int gs = tape.row_gather(proj_src, el.src);
          const int gt = tape.row_gather(proj_dst, el.dst);
          const int pre = tape.leaky_relu(tape.add(gs, gt), S(cfg.leaky_slope));
          const int score = tape.matmul(pre, pid(attn_w_name(l, rn, hd, "a")));
          const int alpha = tape.segment_softmax(score, el.dst, n_dst);
          out.attentions.push_back({l, static_cast<int>(r), hd, alpha, el.dst, n_dst});
          const int weighted = tape.mul_colvec(gs, alpha);
          const int msg = tape.segment_sum(weighted, el.dst, n_dst);
          rel_msg = rel_msg < 0 ? msg : tape.concat_cols(rel_msg, msg);
        }
        acc[td] = acc[td] < 0 ? rel_msg : tape.add(acc[td], rel_msg);
      }
    }

    std::array<int, kNumNodeTypes> h_next{};
    h_next.fill(-1);
    for (int t = 0; t < kNumNodeTypes; ++t) {
      if (h[t] < 0) continue;
      const size_t n_t = sub.local_to_global[t].size();
      if (cfg.arch == GnnArch::sage) {
        const int summed = acc[t] < 0 ? tape.zeros(n_t, hidden) : acc[t];
        h_next[t] = tape.relu(summed);
      } else {
        const int res = din[t] == cfg.hidden_dim
                            ? h[t]
                            : tape.matmul(h[t], pid(type_param_name(l, t, "Wres")));
        const int pre_bn = acc[t] < 0 ? res : tape.add(acc[t], res);
        const int bn = tape.batchnorm(pre_bn, pid(type_param_name(l, t, "bn_g")),
                                      pid(type_param_name(l, t, "bn_b")), train, S(cfg.bn_eps),
                                      &model->bn_mean[l][t], &model->bn_var[l][t],
                                      S(cfg.bn_momentum), update_bn && train);
        h_next[t] = tape.elu(bn, S(1));
      }
    }
    h = h_next;
  }

  out.hidden = h;
  out.customer_states = h[static_cast<int>(NodeType::customer)];
  if (out.customer_states < 0) throw DataError("gnn_forward: batch contains no customer nodes");
  out.seed_states = tape.row_gather(out.customer_states, sub.seed_locals);
  const int z = tape.matmul(out.seed_states, pid("head/W"));
  out.seed_logits = tape.add_rowvec(z, pid("head/b"));
  return out;
}

template <typename S>
GnnForward<S> gnn_forward(Tape<S>& tape, const GnnModel& model,
                          const std::vector<int>& param_ids, const SampledSubgraph& sub,
                          bool train, bool update_bn) {
  if (update_bn) {
    throw std::logic_error("gnn_forward: const model cannot update running statistics");
  }
  // Safe: with update_bn=false the running statistics are only read.
  return gnn_forward(tape, const_cast<GnnModel*>(&model), param_ids, sub, train, false);
}

template GnnForward<float> gnn_forward<float>(Tape<float>&, GnnModel*, const std::vector<int>&,
                                              const SampledSubgraph&, bool, bool);
template GnnForward<double> gnn_forward<double>(Tape<double>&, GnnModel*,
                                                const std::vector<int>&, const SampledSubgraph&,
                                                bool, bool);
template GnnForward<float> gnn_forward<float>(Tape<float>&, const GnnModel&,
                                              const std::vector<int>&, const SampledSubgraph&,
                                              bool, bool);
template GnnForward<double> gnn_forward<double>(Tape<double>&, const GnnModel&,
                                                const std::vector<int>&, const SampledSubgraph&,
                                                bool, bool);

// ---------------------------------------------------------------------------
// Scoring and embeddings

std::vector<double> score_customers(const GnnModel& model, const GraphStructure& g,
                                    const std::vector<uint32_t>& rows, int batch_size,
                                    const std::vector<uint8_t>* relation_mask) {
  if (batch_size < 1) throw ConfigError("gnn: batch_size must be >= 1");
  const Fanout fanout = Fanout::unlimited(static_cast<size_t>(model.config.layers));
  std::vector<double> scores;
  scores.reserve(rows.size());
  for (size_t off = 0; off < rows.size(); off += static_cast<size_t>(batch_size)) {
    const size_t end = std::min(rows.size(), off + static_cast<size_t>(batch_size));
    const std::vector<uint32_t> chunk(rows.begin() + off, rows.begin() + end);
    const SampledSubgraph sub = sample_subgraph(g, chunk, fanout, 0, relation_mask);
    Tape<float> tape;
    const auto ids = register_params(tape, model.params);
    const auto fwd = gnn_forward<float>(tape, model, ids, sub, /*train=*/false,
                                        /*update_bn=*/false);
    for (float zv : tape.val(fwd.seed_logits)) {
      const double zd = double(zv);
      scores.push_back(zd >= 0.0 ? 1.0 / (1.0 + std::exp(-zd))
                                 : std::exp(zd) / (1.0 + std::exp(zd)));
    }
  }
  return scores;
}

Embeddings extract_embeddings(const GnnModel& model, const GraphStructure& g, int batch_size) {
  if (batch_size < 1) throw ConfigError("gnn: batch_size must be >= 1");
  const size_t n = g.node_set(NodeType::customer).n_nodes;
  const size_t dim = static_cast<size_t>(model.config.hidden_dim);
  Embeddings emb;
  emb.n_rows = n;
  emb.dim = dim;
  emb.values.reserve(n * dim);
  const Fanout fanout = Fanout::unlimited(static_cast<size_t>(model.config.layers));
  for (size_t off = 0; off < n; off += static_cast<size_t>(batch_size)) {
    const size_t end = std::min(n, off + static_cast<size_t>(batch_size));
    std::vector<uint32_t> chunk(end - off);
    for (size_t i = off; i < end; ++i) chunk[i - off] = static_cast<uint32_t>(i);
    const SampledSubgraph sub = sample_subgraph(g, chunk, fanout, 0, nullptr);
    Tape<float> tape;
    const auto ids = register_params(tape, model.params);
    const auto fwd = gnn_forward<float>(tape, model, ids, sub, /*train=*/false,
                                        /*update_bn=*/false);
    const auto& states = tape.val(fwd.seed_states);
    emb.values.insert(emb.values.end(), states.begin(), states.end());
  }
  return emb;
}

MaskEvalResult relation_mask_eval(const GnnModel& model, const HeteroGraph& g,
                                  const std::string& relation, int batch_size) {
  const int idx = g.relation_index(relation);
  if (idx < 0) throw ConfigError("relation_mask_eval: unknown relation '" + relation + "'");
  const auto rows = g.mask_rows(g.test_mask);
  if (rows.empty()) throw DataError("relation_mask_eval: empty test split");
  std::vector<int8_t> labels(rows.size());
  for (size_t i = 0; i < rows.size(); ++i) labels[i] = g.labels[rows[i]];

  const GraphStructure structure = g.structure();
  const auto base = rank_metrics(score_customers(model, structure, rows, batch_size), labels);

  std::vector<uint8_t> mask(g.relations.size(), 1);
  mask[static_cast<size_t>(idx)] = 0;
  mask[static_cast<size_t>(g.relations[static_cast<size_t>(idx)].reverse_index)] = 0;
  const auto masked =
      rank_metrics(score_customers(model, structure, rows, batch_size, &mask), labels);

  MaskEvalResult res;
  res.relation = relation;
  res.base_roc = base.roc_auc;
  res.base_pr = base.pr_auc;
  res.masked_roc = masked.roc_auc;
  res.masked_pr = masked.pr_auc;
  res.delta_roc = masked.roc_auc - base.roc_auc;
  res.delta_pr = masked.pr_auc - base.pr_auc;
  return res;
}

// ---------------------------------------------------------------------------
// Training

namespace {

struct ModelSnapshot {
  std::vector<Param> params;
  std::vector<std::array<std::vector<float>, kNumNodeTypes>> bn_mean, bn_var;
};

ModelSnapshot snapshot(const GnnModel& m) { return {m.params, m.bn_mean, m.bn_var}; }

void restore(GnnModel& m, const ModelSnapshot& s) {
  m.params = s.params;
  m.bn_mean = s.bn_mean;
  m.bn_var = s.bn_var;
}

}  // namespace

TrainedGnn train_gnn(const HeteroGraph& g, const GnnConfig& cfg, const TrainConfig& tcfg) {
  return train_gnn(g, build_gnn(g.structure(), cfg, tcfg.seed), tcfg, false);
}

TrainedGnn train_gnn(const HeteroGraph& g, GnnModel init, const TrainConfig& tcfg,
                     bool freeze_encoder) {
  const GnnConfig& cfg = init.config;
  if (tcfg.epochs < 1) throw ConfigError("gnn train: epochs must be >= 1");
  if (tcfg.batch_size < 1) throw ConfigError("gnn train: batch_size must be >= 1");
  if (!(tcfg.lr > 0.0f)) throw ConfigError("gnn train: learning rate must be positive");
  if (tcfg.patience < 1) throw ConfigError("gnn train: patience must be >= 1");
  if (tcfg.eval_batch_size < 1) throw ConfigError("gnn train: eval_batch_size must be >= 1");
  if (tcfg.fanout.per_hop.size() != static_cast<size_t>(cfg.layers)) {
    throw ConfigError("gnn train: fanout hop count must equal the layer count");
  }
  for (int f : tcfg.fanout.per_hop) {
    if (f == 0 || f < -1) throw ConfigError("gnn train: fanout entries must be positive or -1");
  }

  const std::vector<uint32_t> train_rows = g.mask_rows(g.train_mask);
  const std::vector<uint32_t> val_rows = g.mask_rows(g.val_mask);
  if (train_rows.empty()) throw DataError("gnn train: empty train split");
  if (val_rows.empty()) throw DataError("gnn train: empty validation split");

  size_t n_pos = 0;
  for (uint32_t r : train_rows) n_pos += static_cast<size_t>(g.labels[r]);
  const size_t n_neg = train_rows.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) throw DataError("gnn train: train split needs both classes");
  const double pos_weight = double(n_neg) / double(n_pos);

  std::vector<int8_t> val_labels(val_rows.size());
  for (size_t i = 0; i < val_rows.size(); ++i) val_labels[i] = g.labels[val_rows[i]];

  TrainedGnn out;
  out.model = std::move(init);
  out.pos_weight = pos_weight;

  Adam opt;
  opt.lr = tcfg.lr;

  ModelSnapshot best = snapshot(out.model);
  double best_auc = -std::numeric_limits<double>::infinity();
  int since_best = 0;

  const GraphStructure structure = g.structure();
  for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
    std::vector<uint32_t> order = train_rows;
    Rng shuffle_rng(mix_seed(tcfg.seed, 1000 + static_cast<uint64_t>(epoch)));
    shuffle_rng.shuffle(order);

    double loss_sum = 0.0;
    size_t batch_index = 0;
    for (size_t off = 0; off < order.size();
         off += static_cast<size_t>(tcfg.batch_size), ++batch_index) {
      const size_t end = std::min(order.size(), off + static_cast<size_t>(tcfg.batch_size));
      const std::vector<uint32_t> seeds(order.begin() + off, order.begin() + end);
      const uint64_t batch_seed =
          mix_seed(tcfg.seed, static_cast<uint64_t>(epoch) * 100000 + batch_index);
      const SampledSubgraph sub = sample_subgraph(g, seeds, tcfg.fanout, batch_seed);

      Tape<float> tape;
      const auto ids = register_params(tape, out.model.params);
      const auto fwd = gnn_forward<float>(tape, &out.model, ids, sub, /*train=*/true,
                                          /*update_bn=*/!freeze_encoder);
      std::vector<float> targets(sub.seed_labels.begin(), sub.seed_labels.end());
      const int loss = tape.weighted_bce_with_logits(fwd.seed_logits, std::move(targets),
                                                     static_cast<float>(pos_weight));
      const double loss_val = double(tape.val(loss)[0]);
      if (!std::isfinite(loss_val)) {
        throw TrainError("gnn training diverged: non-finite loss at epoch " +
                         std::to_string(epoch) + " batch " + std::to_string(batch_index) +
                         " (arch=" + gnn_arch_name(cfg.arch) +
                         ", lr=" + fmt_double(double(tcfg.lr)) + ")");
      }
      tape.backward(loss);
      auto grads = collect_grads(tape, ids);
      if (freeze_encoder) {
        // Zero gradients keep Adam state at zero, so frozen parameters
        // never move.
        for (size_t i = 0; i < grads.size(); ++i) {
          if (out.model.params[i].name.rfind("head/", 0) != 0) {
            std::fill(grads[i].begin(), grads[i].end(), 0.0f);
          }
        }
      }
      opt.step(out.model.params, grads);
      loss_sum += loss_val * double(seeds.size());
    }

    const double train_loss = loss_sum / double(train_rows.size());
    const auto val_scores =
        score_customers(out.model, structure, val_rows, tcfg.eval_batch_size);
    const double val_auc = rank_metrics(val_scores, val_labels).roc_auc;
    out.history.push_back({epoch, train_loss, val_auc});

    if (val_auc > best_auc) {
      best_auc = val_auc;
      out.best_epoch = epoch;
      best = snapshot(out.model);
      since_best = 0;
    } else if (++since_best >= tcfg.patience) {
      break;
    }
  }

  restore(out.model, best);
  out.best_val_auc = best_auc;
  return out;
}

void write_history_csv(const std::string& path, const std::vector<EpochStats>& history) {
  csv::CsvData data;
  data.header = {"epoch", "train_loss", "val_roc_auc"};
  for (const auto& e : history) {
    data.rows.push_back({std::to_string(e.epoch), fmt_double(e.train_loss),
                         fmt_double(e.val_roc_auc)});
  }
  csv::write_file(path, data);
}

// ---------------------------------------------------------------------------
// Persistence

void save_gnn(const std::string& path_base, const GnnModel& model, bool include_head) {
  Checkpoint ck;
  for (const auto& p : model.params) {
    if (!include_head && is_head_param(p.name)) continue;
    ck.add(p.name, {p.rows, p.cols}, p.value);
  }
  if (model.config.arch == GnnArch::relattn) {
    for (int l = 0; l < model.config.layers; ++l) {
      for (int t = 0; t < kNumNodeTypes; ++t) {
        ck.add(bn_stat_name(l, t, "mean"), {model.bn_mean[l][t].size()}, model.bn_mean[l][t]);
        ck.add(bn_stat_name(l, t, "var"), {model.bn_var[l][t].size()}, model.bn_var[l][t]);
      }
    }
  }
  ck.save(path_base);

  nlohmann::json meta{
      {"format", "relrisk-gnn"},
      {"version", 1},
      {"arch", gnn_arch_name(model.config.arch)},
      {"layers", model.config.layers},
      {"hidden_dim", model.config.hidden_dim},
      {"heads", model.config.heads},
      {"leaky_slope", model.config.leaky_slope},
      {"bn_eps", model.config.bn_eps},
      {"bn_momentum", model.config.bn_momentum},
      {"init_seed", model.init_seed},
      {"include_head", include_head},
      {"relations", model.relation_names},
      {"in_dims", std::vector<int>(model.in_dims.begin(), model.in_dims.end())},
  };
  std::ofstream out(path_base + ".meta.json", std::ios::binary);
  if (!out) throw DataError("cannot write " + path_base + ".meta.json");
  out << meta.dump(2) << "\n";
  if (!out) throw DataError("failed writing " + path_base + ".meta.json");
}

GnnModel load_gnn(const std::string& path_base, const GraphStructure& g) {
  std::ifstream in(path_base + ".meta.json", std::ios::binary);
  if (!in) throw DataError("cannot open " + path_base + ".meta.json");
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const nlohmann::json meta = nlohmann::json::parse(text, nullptr, false);
  if (meta.is_discarded() || !meta.is_object()) {
    throw DataError("invalid gnn metadata in " + path_base + ".meta.json");
  }

  GnnConfig cfg;
  uint64_t init_seed = 0;
  bool include_head = true;
  std::vector<std::string> relations;
  std::vector<int> in_dims;
  try {
    if (meta.at("format").get<std::string>() != "relrisk-gnn") {
      throw DataError("not a gnn checkpoint: " + path_base);
    }
    if (meta.at("version").get<int>() != 1) {
      throw DataError("unsupported gnn checkpoint version in " + path_base);
    }
    cfg.arch = gnn_arch_from_name(meta.at("arch").get<std::string>());
    cfg.layers = meta.at("layers").get<int>();
    cfg.hidden_dim = meta.at("hidden_dim").get<int>();
    cfg.heads = meta.at("heads").get<int>();
    cfg.leaky_slope = meta.at("leaky_slope").get<float>();
    cfg.bn_eps = meta.at("bn_eps").get<float>();
    cfg.bn_momentum = meta.at("bn_momentum").get<float>();
    init_seed = meta.at("init_seed").get<uint64_t>();
    include_head = meta.at("include_head").get<bool>();
    relations = meta.at("relations").get<std::vector<std::string>>();
    in_dims = meta.at("in_dims").get<std::vector<int>>();
  } catch (const nlohmann::json::exception&) {
    throw DataError("invalid gnn metadata in " + path_base + ".meta.json");
  }

  GnnModel model = build_gnn(g, cfg, init_seed);
  if (relations != model.relation_names) {
    throw DataError("gnn checkpoint relations do not match the graph");
  }
  if (in_dims != std::vector<int>(model.in_dims.begin(), model.in_dims.end())) {
    throw DataError("gnn checkpoint feature widths do not match the graph");
  }

  const Checkpoint ck = Checkpoint::load(path_base);
  for (auto& p : model.params) {
    if (!ck.has(p.name)) {
      if (is_head_param(p.name) && !include_head) continue;  // fresh head kept
      throw DataError("gnn checkpoint missing parameter " + p.name);
    }
    const auto& arr = ck.get(p.name);
    if (arr.shape != std::vector<size_t>{p.rows, p.cols} || arr.data.size() != p.size()) {
      throw DataError("gnn checkpoint shape mismatch for " + p.name);
    }
    p.value = arr.data;
  }
  if (cfg.arch == GnnArch::relattn) {
    for (int l = 0; l < cfg.layers; ++l) {
      for (int t = 0; t < kNumNodeTypes; ++t) {
        const auto& mean = ck.get(bn_stat_name(l, t, "mean"));
        const auto& var = ck.get(bn_stat_name(l, t, "var"));
        if (mean.data.size() != model.bn_mean[l][t].size() ||
            var.data.size() != model.bn_var[l][t].size()) {
          throw DataError("gnn checkpoint batch-norm shape mismatch");
        }
        model.bn_mean[l][t] = mean.data;
        model.bn_var[l][t] = var.data;
      }
    }
  }
  return model;
}

}  // namespace relrisk
