#pragma once

// Minimal dense reverse-mode autodiff: a define-by-run tape over row-major
// matrices. Templated on the scalar so production runs in f32 while
// finite-difference checks run the identical code in f64. Reductions
// accumulate in f64 regardless of the scalar. Gradients accumulate across
// backward() calls; zero_grad() resets them.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "relrisk/common.hpp"

namespace relrisk {

template <typename S>
class Tape {
 public:
  struct Node {
    size_t rows = 0;
    size_t cols = 0;
    std::vector<S> val;
    std::vector<S> grad;
    std::function<void(Tape&)> back;  // null for leaves
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  size_t size() const { return nodes_.size(); }
  size_t rows(int id) const { return node(id).rows; }
  size_t cols(int id) const { return node(id).cols; }
  const std::vector<S>& val(int id) const { return node(id).val; }
  std::vector<S>& val(int id) { return node(id).val; }
  const std::vector<S>& grad(int id) const { return node(id).grad; }

  void zero_grad() {
    for (auto& n : nodes_) std::fill(n.grad.begin(), n.grad.end(), S(0));
  }

  // Zeroes intermediate (non-leaf) gradients, seeds d(loss)/d(loss) = 1,
  // and walks the tape backwards once. Leaf gradients accumulate across
  // calls, so a second backward without zero_grad() doubles them exactly.
  void backward(int loss) {
    Node& l = node(loss);
    if (l.rows != 1 || l.cols != 1) {
      throw std::logic_error("backward requires a scalar loss node");
    }
    for (auto& n : nodes_) {
      if (n.back) std::fill(n.grad.begin(), n.grad.end(), S(0));
    }
    l.grad[0] += S(1);
    for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; --id) {
      if (nodes_[id].back) nodes_[id].back(*this);
    }
  }

  // ---- leaves ----

  int input(size_t r, size_t c, const std::vector<S>& values) {
    if (values.size() != r * c) throw std::logic_error("input: value size mismatch");
    int id = make(r, c);
    node(id).val = values;
    return id;
  }

  int zeros(size_t r, size_t c) { return make(r, c); }

  // ---- linear algebra ----

  int matmul(int a, int b) {
    if (cols(a) != rows(b)) throw std::logic_error("matmul: inner dimensions differ");
    const size_t m = rows(a), k = cols(a), n = cols(b);
    int id = make(m, n);
    mm(node(id).val.data(), val(a).data(), val(b).data(), m, k, n, false, false, false);
    node(id).back = [a, b, id, m, k, n](Tape& t) {
      // dA += dC * B^T ; dB += A^T * dC
      t.mm(t.node(a).grad.data(), t.node(id).grad.data(), t.val(b).data(), m, n, k, false, true,
           true);
      t.mm(t.node(b).grad.data(), t.val(a).data(), t.node(id).grad.data(), k, m, n, true, false,
           true);
    };
    return id;
  }

  // A * B^T with A (m,k), B (n,k) -> (m,n).
  int matmul_nt(int a, int b) {
    if (cols(a) != cols(b)) throw std::logic_error("matmul_nt: inner dimensions differ");
    const size_t m = rows(a), k = cols(a), n = rows(b);
    int id = make(m, n);
    mm(node(id).val.data(), val(a).data(), val(b).data(), m, k, n, false, true, false);
    node(id).back = [a, b, id, m, k, n](Tape& t) {
      // dA += dC * B ; dB += dC^T * A
      t.mm(t.node(a).grad.data(), t.node(id).grad.data(), t.val(b).data(), m, n, k, false, false,
           true);
      t.mm(t.node(b).grad.data(), t.node(id).grad.data(), t.val(a).data(), n, m, k, true, false,
           true);
    };
    return id;
  }

  // ---- elementwise and broadcasting ----

  int add(int a, int b) { return ew(a, b, "add", [](S x, S y) { return x + y; }, 1, 1); }
  int sub(int a, int b) { return ew(a, b, "sub", [](S x, S y) { return x - y; }, 1, -1); }

  int mul(int a, int b) {
    same_shape(a, b, "mul");
    int id = make(rows(a), cols(a));
    const auto& xa = val(a);
    const auto& xb = val(b);
    auto& out = node(id).val;
    for (size_t i = 0; i < out.size(); ++i) out[i] = xa[i] * xb[i];
    node(id).back = [a, b, id](Tape& t) {
      const auto& g = t.node(id).grad;
      const auto& xa2 = t.val(a);
      const auto& xb2 = t.val(b);
      auto& ga = t.node(a).grad;
      auto& gb = t.node(b).grad;
      for (size_t i = 0; i < g.size(); ++i) {
        ga[i] += g[i] * xb2[i];
        gb[i] += g[i] * xa2[i];
      }
    };
    return id;
  }

  int scale(int a, S c) {
    int id = make(rows(a), cols(a));
    const auto& x = val(a);
    auto& out = node(id).val;
    for (size_t i = 0; i < out.size(); ++i) out[i] = c * x[i];
    node(id).back = [a, id, c](Tape& t) {
      const auto& g = t.node(id).grad;
      auto& ga = t.node(a).grad;
      for (size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
    };
    return id;
  }

  // (m,n) + (1,n) broadcast over rows.
  int add_rowvec(int a, int v) {
    if (rows(v) != 1 || cols(v) != cols(a)) throw std::logic_error("add_rowvec: shape mismatch");
    const size_t m = rows(a), n = cols(a);
    int id = make(m, n);
    const auto& x = val(a);
    const auto& b = val(v);
    auto& out = node(id).val;
    for (size_t i = 0; i < m; ++i) {
      for (size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] + b[j];
    }
    node(id).back = [a, v, id, m, n](Tape& t) {
      const auto& g = t.node(id).grad;
      auto& ga = t.node(a).grad;
      auto& gv = t.node(v).grad;
      for (size_t i = 0; i < m * n; ++i) ga[i] += g[i];
      for (size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (size_t i = 0; i < m; ++i) acc += double(g[i * n + j]);
        gv[j] += S(acc);
      }
    };
    return id;
  }

  // (m,n) * (m,1) broadcast over columns.
  int mul_colvec(int a, int v) {
    if (cols(v) != 1 || rows(v) != rows(a)) throw std::logic_error("mul_colvec: shape mismatch");
    const size_t m = rows(a), n = cols(a);
    int id = make(m, n);
    const auto& x = val(a);
    const auto& w = val(v);
    auto& out = node(id).val;
    for (size_t i = 0; i < m; ++i) {
      for (size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] * w[i];
    }
    node(id).back = [a, v, id, m, n](Tape& t) {
      const auto& g = t.node(id).grad;
      const auto& x2 = t.val(a);
      const auto& w2 = t.val(v);
      auto& ga = t.node(a).grad;
      auto& gv = t.node(v).grad;
      for (size_t i = 0; i < m; ++i) {
        double acc = 0.0;
        for (size_t j = 0; j < n; ++j) {
          ga[i * n + j] += g[i * n + j] * w2[i];
          acc += double(g[i * n + j]) * double(x2[i * n + j]);
        }
        gv[i] += S(acc);
      }
    };
    return id;
  }

  int concat_cols(int a, int b) {
    if (rows(a) != rows(b)) throw std::logic_error("concat_cols: row counts differ");
    const size_t m = rows(a), na = cols(a), nb = cols(b);
    int id = make(m, na + nb);
    const auto& xa = val(a);
    const auto& xb = val(b);
    auto& out = node(id).val;
    for (size_t i = 0; i < m; ++i) {
      for (size_t j = 0; j < na; ++j) out[i * (na + nb) + j] = xa[i * na + j];
      for (size_t j = 0; j < nb; ++j) out[i * (na + nb) + na + j] = xb[i * nb + j];
    }
    node(id).back = [a, b, id, m, na, nb](Tape& t) {
      const auto& g = t.node(id).grad;
      auto& ga = t.node(a).grad;
      auto& gb = t.node(b).grad;
      for (size_t i = 0; i < m; ++i) {
        for (size_t j = 0; j < na; ++j) ga[i * na + j] += g[i * (na + nb) + j];
        for (size_t j = 0; j < nb; ++j) gb[i * nb + j] += g[i * (na + nb) + na + j];
      }
    };
    return id;
  }

  // ---- row selection ----

  int row_gather(int a, std::vector<uint32_t> idx) {
    const size_t n = cols(a);
    for (uint32_t r : idx) {
      if (r >= rows(a)) throw std::logic_error("row_gather: index out of range");
    }
    int id = make(idx.size(), n);
    const auto& x = val(a);
    auto& out = node(id).val;
    for (size_t e = 0; e < idx.size(); ++e) {
      for (size_t j = 0; j < n; ++j) out[e * n + j] = x[idx[e] * n + j];
    }
    node(id).back = [a, id, n, idx = std::move(idx)](Tape& t) {
      const auto& g = t.node(id).grad;
      auto& ga = t.node(a).grad;
      for (size_t e = 0; e < idx.size(); ++e) {
        for (size_t j = 0; j < n; ++j) ga[idx[e] * n + j] += g[e * n + j];
      }
    };
    return id;
  }

  // Scatter-add rows of a into n_rows slots (inverse of row_gather).
  int row_scatter_add(int a, std::vector<uint32_t> idx, size_t n_rows) {
    if (idx.size() != rows(a)) throw std::logic_error("row_scatter_add: index count mismatch");
    const size_t n = cols(a);
    for (uint32_t r : idx) {
      if (r >= n_rows) throw std::logic_error("row_scatter_add: index out of range");
    }
    int id = make(n_rows, n);
    const auto& x = val(a);
    auto& out = node(id).val;
    for (size_t e = 0; e < idx.size(); ++e) {
      for (size_t j = 0; j < n; ++j) out[idx[e] * n + j] += x[e * n + j];
    }
    node(id).back = [a, id, n, idx = std::move(idx)](Tape& t) {
      const auto& g = t.node(id).grad;
      auto& ga = t.node(a).grad;
      for (size_t e = 0; e < idx.size(); ++e) {
        for (size_t j = 0; j < n; ++j) ga[e * n + j] += g[idx[e] * n + j];
      }
    };
    return id;
  }

  // ---- segment reductions (segment ids in any order) ----

  int segment_sum(int a, std::vector<uint32_t> seg, size_t n_segments) {
    check_segments(a, seg, n_segments);
    const size_t n = cols(a);
    int id = make(n_segments, n);
    const auto& x = val(a);
    // f64 accumulation: sum into a double buffer, then cast once.
    std::vector<double> acc(n_segments * n, 0.0);
    for (size_t e = 0; e < seg.size(); ++e) {
      for (size_t j = 0; j < n; ++j) acc[seg[e] * n + j] += double(x[e * n + j]);
    }
    auto& out = node(id).val;
    for (size_t i = 0; i < out.size(); ++i) out[i] = S(acc[i]);
    node(id).back = [a, id, n, seg = std::move(seg)](Tape& t) {
      const auto& g = t.node(id).grad;
      auto& ga = t.node(a).grad;
      for (size_t e = 0; e < seg.size(); ++e) {
        for (size_t j = 0; j < n; ++j) ga[e * n + j] += g[seg[e] * n + j];
      }
    };
    return id;
  }

  // Mean over each segment; empty segments produce zero rows (the GNN's
  // empty-neighborhood rule).
  int segment_mean(int a, std::vector<uint32_t> seg, size_t n_segments) {
    check_segments(a, seg, n_segments);
    const size_t n = cols(a);
    int id = make(n_segments, n);
    const auto& x = val(a);
    std::vector<double> acc(n_segments * n, 0.0);
    std::vector<uint32_t> count(n_segments, 0);
    for (size_t e = 0; e < seg.size(); ++e) {
      count[seg[e]]++;
      for (size_t j = 0; j < n; ++j) acc[seg[e] * n + j] += double(x[e * n + j]);
    }
    auto& out = node(id).val;
    for (size_t s = 0; s < n_segments; ++s) {
      if (count[s] == 0) continue;
      for (size_t j = 0; j < n; ++j) out[s * n + j] = S(acc[s * n + j] / count[s]);
    }
    node(id).back = [a, id, n, seg = std::move(seg), count = std::move(count)](Tape& t) {
      const auto& g = t.node(id).grad;
      auto& ga = t.node(a).grad;
      for (size_t e = 0; e < seg.size(); ++e) {
        const S inv = S(1) / S(count[seg[e]]);
        for (size_t j = 0; j < n; ++j) ga[e * n + j] += g[seg[e] * n + j] * inv;
      }
    };
    return id;
  }

  // Softmax of a column of scores within each segment: (E,1) -> (E,1).
  int segment_softmax(int a, std::vector<uint32_t> seg, size_t n_segments) {
    if (cols(a) != 1) throw std::logic_error("segment_softmax: scores must be a column");
    check_segments(a, seg, n_segments);
    const size_t e_count = seg.size();
    int id = make(e_count, 1);
    const auto& x = val(a);
    std::vector<double> seg_max(n_segments, -std::numeric_limits<double>::infinity());
    for (size_t e = 0; e < e_count; ++e) {
      seg_max[seg[e]] = std::max(seg_max[seg[e]], double(x[e]));
    }
    std::vector<double> seg_sum(n_segments, 0.0);
    std::vector<double> expv(e_count);
    for (size_t e = 0; e < e_count; ++e) {
      expv[e] = std::exp(double(x[e]) - seg_max[seg[e]]);
      seg_sum[seg[e]] += expv[e];
    }
    auto& out = node(id).val;
    for (size_t e = 0; e < e_count; ++e) out[e] = S(expv[e] / seg_sum[seg[e]]);
    node(id).back = [a, id, seg = std::move(seg), n_segments](Tape& t) {
      const auto& g = t.node(id).grad;
      const auto& y = t.val(id);
      auto& ga = t.node(a).grad;
      std::vector<double> dot(n_segments, 0.0);
      for (size_t e = 0; e < g.size(); ++e) dot[seg[e]] += double(g[e]) * double(y[e]);
      for (size_t e = 0; e < g.size(); ++e) {
        ga[e] += S(double(y[e]) * (double(g[e]) - dot[seg[e]]));
      }
    };
    return id;
  }

  // ---- activations ----

  int relu(int a) {
    return unary(a, [](S x) { return x > S(0) ? x : S(0); },
                 [](S x, S) { return x > S(0) ? S(1) : S(0); });
  }

  int leaky_relu(int a, S alpha) {
    return unary(a, [alpha](S x) { return x > S(0) ? x : alpha * x; },
                 [alpha](S x, S) { return x > S(0) ? S(1) : alpha; });
  }

  int elu(int a, S alpha) {
    return unary(a, [alpha](S x) { return x > S(0) ? x : alpha * (std::exp(x) - S(1)); },
                 [alpha](S x, S y) { return x > S(0) ? S(1) : y + alpha; });
  }

  int sigmoid(int a) {
    return unary(a,
                 [](S x) {
                   return x >= S(0) ? S(1) / (S(1) + std::exp(-x))
                                    : S(std::exp(x) / (S(1) + std::exp(x)));
                 },
                 [](S, S y) { return y * (S(1) - y); });
  }

  int log_op(int a) {
    return unary(a, [](S x) { return std::log(x); }, [](S x, S) { return S(1) / x; });
  }

  int exp_op(int a) {
    return unary(a, [](S x) { return std::exp(x); }, [](S, S y) { return y; });
  }

  // ---- normalization, dropout, losses ----

  int l2_normalize_rows(int a, S eps) {
    const size_t m = rows(a), n = cols(a);
    int id = make(m, n);
    const auto& x = val(a);
    auto& out = node(id).val;
    std::vector<S> inv_norm(m);
    for (size_t i = 0; i < m; ++i) {
      double acc = double(eps);
      for (size_t j = 0; j < n; ++j) acc += double(x[i * n + j]) * double(x[i * n + j]);
      inv_norm[i] = S(1.0 / std::sqrt(acc));
      for (size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] * inv_norm[i];
    }
    node(id).back = [a, id, m, n, inv_norm = std::move(inv_norm)](Tape& t) {
      const auto& g = t.node(id).grad;
      const auto& y = t.val(id);
      auto& ga = t.node(a).grad;
      for (size_t i = 0; i < m; ++i) {
        double dot = 0.0;
        for (size_t j = 0; j < n; ++j) dot += double(g[i * n + j]) * double(y[i * n + j]);
        for (size_t j = 0; j < n; ++j) {
          ga[i * n + j] += S((double(g[i * n + j]) - dot * double(y[i * n + j])) *
                             double(inv_norm[i]));
        }
      }
    };
    return id;
  }

  // Batch norm over columns. Train mode normalizes with batch statistics
  // (biased variance) and, when running stats are supplied and update is
  // requested, folds unbiased batch stats into them with the given
  // momentum (new = (1-momentum)*old + momentum*batch). Eval mode
  // normalizes with the running stats. gamma/beta are (1,n) tape nodes;
  // running stats stay f32 so checkpoints are scalar-independent.
  int batchnorm(int a, int gamma, int beta, bool train, S eps, std::vector<float>* running_mean,
                std::vector<float>* running_var, S momentum, bool update_running) {
    const size_t m = rows(a), n = cols(a);
    if (rows(gamma) != 1 || cols(gamma) != n || rows(beta) != 1 || cols(beta) != n) {
      throw std::logic_error("batchnorm: gamma/beta must be (1, cols)");
    }
    if (!train && (!running_mean || !running_var)) {
      throw std::logic_error("batchnorm: eval mode requires running statistics");
    }
    if (train && m == 0) throw std::logic_error("batchnorm: empty batch");
    int id = make(m, n);
    const auto& x = val(a);
    const auto& gm = val(gamma);
    const auto& bt = val(beta);
    auto& out = node(id).val;

    std::vector<S> xhat(m * n);
    std::vector<S> inv_std(n);
    if (train) {
      std::vector<double> mean(n, 0.0), var(n, 0.0);
      for (size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (size_t i = 0; i < m; ++i) acc += double(x[i * n + j]);
        mean[j] = acc / double(m);
        double vacc = 0.0;
        for (size_t i = 0; i < m; ++i) {
          double d = double(x[i * n + j]) - mean[j];
          vacc += d * d;
        }
        var[j] = vacc / double(m);
        inv_std[j] = S(1.0 / std::sqrt(var[j] + double(eps)));
      }
      if (running_mean && running_var && update_running) {
        const double unbias = m > 1 ? double(m) / double(m - 1) : 1.0;
        for (size_t j = 0; j < n; ++j) {
          (*running_mean)[j] = float((1.0 - double(momentum)) * double((*running_mean)[j]) +
                                     double(momentum) * mean[j]);
          (*running_var)[j] = float((1.0 - double(momentum)) * double((*running_var)[j]) +
                                    double(momentum) * var[j] * unbias);
        }
      }
      for (size_t i = 0; i < m; ++i) {
        for (size_t j = 0; j < n; ++j) {
          xhat[i * n + j] = S((double(x[i * n + j]) - mean[j]) * double(inv_std[j]));
          out[i * n + j] = gm[j] * xhat[i * n + j] + bt[j];
        }
      }
      node(id).back = [a, gamma, beta, id, m, n, xhat = std::move(xhat),
                       inv_std = std::move(inv_std)](Tape& t) {
        const auto& g = t.node(id).grad;
        const auto& gm2 = t.val(gamma);
        auto& ga = t.node(a).grad;
        auto& ggm = t.node(gamma).grad;
        auto& gbt = t.node(beta).grad;
        for (size_t j = 0; j < n; ++j) {
          double sum_g = 0.0, sum_gx = 0.0;
          for (size_t i = 0; i < m; ++i) {
            sum_g += double(g[i * n + j]);
            sum_gx += double(g[i * n + j]) * double(xhat[i * n + j]);
          }
          gbt[j] += S(sum_g);
          ggm[j] += S(sum_gx);
          const double k = double(gm2[j]) * double(inv_std[j]) / double(m);
          for (size_t i = 0; i < m; ++i) {
            ga[i * n + j] += S(k * (double(m) * double(g[i * n + j]) - sum_g -
                                    double(xhat[i * n + j]) * sum_gx));
          }
        }
      };
    } else {
      for (size_t j = 0; j < n; ++j) {
        inv_std[j] = S(1.0 / std::sqrt(double((*running_var)[j]) + double(eps)));
      }
      std::vector<S> rm(n);
      for (size_t j = 0; j < n; ++j) rm[j] = S((*running_mean)[j]);
      for (size_t i = 0; i < m; ++i) {
        for (size_t j = 0; j < n; ++j) {
          xhat[i * n + j] = (x[i * n + j] - rm[j]) * inv_std[j];
          out[i * n + j] = gm[j] * xhat[i * n + j] + bt[j];
        }
      }
      node(id).back = [a, gamma, beta, id, m, n, xhat = std::move(xhat),
                       inv_std = std::move(inv_std)](Tape& t) {
        const auto& g = t.node(id).grad;
        const auto& gm2 = t.val(gamma);
        auto& ga = t.node(a).grad;
        auto& ggm = t.node(gamma).grad;
        auto& gbt = t.node(beta).grad;
        for (size_t j = 0; j < n; ++j) {
          double sum_g = 0.0, sum_gx = 0.0;
          for (size_t i = 0; i < m; ++i) {
            sum_g += double(g[i * n + j]);
            sum_gx += double(g[i * n + j]) * double(xhat[i * n + j]);
            ga[i * n + j] += g[i * n + j] * gm2[j] * inv_std[j];
          }
          gbt[j] += S(sum_g);
          ggm[j] += S(sum_gx);
        }
      };
    }
    return id;
  }

  // Inverted dropout with an explicit mask so steps are replayable.
  int dropout(int a, std::vector<uint8_t> mask, S keep_prob) {
    if (mask.size() != val(a).size()) throw std::logic_error("dropout: mask size mismatch");
    if (!(keep_prob > S(0))) throw std::logic_error("dropout: keep probability must be > 0");
    int id = make(rows(a), cols(a));
    const auto& x = val(a);
    auto& out = node(id).val;
    const S inv = S(1) / keep_prob;
    for (size_t i = 0; i < out.size(); ++i) out[i] = mask[i] ? x[i] * inv : S(0);
    node(id).back = [a, id, inv, mask = std::move(mask)](Tape& t) {
      const auto& g = t.node(id).grad;
      auto& ga = t.node(a).grad;
      for (size_t i = 0; i < g.size(); ++i) {
        if (mask[i]) ga[i] += g[i] * inv;
      }
    };
    return id;
  }

  // Mean over rows of w_i * BCE(sigmoid(z_i), y_i) with w_i = pos_weight
  // for positives and 1 otherwise; numerically stable in the logits.
  int weighted_bce_with_logits(int logits, std::vector<S> targets, S pos_weight) {
    if (cols(logits) != 1) throw std::logic_error("weighted_bce: logits must be a column");
    if (targets.size() != rows(logits)) throw std::logic_error("weighted_bce: target size");
    const size_t m = targets.size();
    if (m == 0) throw std::logic_error("weighted_bce: empty batch");
    int id = make(1, 1);
    const auto& z = val(logits);
    double acc = 0.0;
    for (size_t i = 0; i < m; ++i) {
      const double zi = double(z[i]);
      const double yi = double(targets[i]);
      const double w = yi > 0.5 ? double(pos_weight) : 1.0;
      // max(z,0) - z*y + log(1+exp(-|z|))
      acc += w * (std::max(zi, 0.0) - zi * yi + std::log1p(std::exp(-std::abs(zi))));
    }
    node(id).val[0] = S(acc / double(m));
    node(id).back = [logits, id, pos_weight, m, targets = std::move(targets)](Tape& t) {
      const S g = t.node(id).grad[0];
      const auto& z = t.val(logits);
      auto& gz = t.node(logits).grad;
      for (size_t i = 0; i < m; ++i) {
        const double zi = double(z[i]);
        const double yi = double(targets[i]);
        const double w = yi > 0.5 ? double(pos_weight) : 1.0;
        const double p = zi >= 0.0 ? 1.0 / (1.0 + std::exp(-zi))
                                   : std::exp(zi) / (1.0 + std::exp(zi));
        gz[i] += S(double(g) * w * (p - yi) / double(m));
      }
    };
    return id;
  }

  int reduce_sum(int a) {
    int id = make(1, 1);
    const auto& x = val(a);
    double acc = 0.0;
    for (S v : x) acc += double(v);
    node(id).val[0] = S(acc);
    node(id).back = [a, id](Tape& t) {
      const S g = t.node(id).grad[0];
      auto& ga = t.node(a).grad;
      for (auto& v : ga) v += g;
    };
    return id;
  }

  int reduce_mean(int a) {
    const size_t count = val(a).size();
    if (count == 0) throw std::logic_error("reduce_mean: empty tensor");
    int id = make(1, 1);
    const auto& x = val(a);
    double acc = 0.0;
    for (S v : x) acc += double(v);
    node(id).val[0] = S(acc / double(count));
    node(id).back = [a, id, count](Tape& t) {
      const S g = t.node(id).grad[0] / S(count);
      auto& ga = t.node(a).grad;
      for (auto& v : ga) v += g;
    };
    return id;
  }

  // Stable log(sum(exp(row))): (m,n) -> (m,1).
  int row_logsumexp(int a) {
    const size_t m = rows(a), n = cols(a);
    if (n == 0) throw std::logic_error("row_logsumexp: empty rows");
    int id = make(m, 1);
    const auto& x = val(a);
    auto& out = node(id).val;
    for (size_t i = 0; i < m; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (size_t j = 0; j < n; ++j) mx = std::max(mx, double(x[i * n + j]));
      double acc = 0.0;
      for (size_t j = 0; j < n; ++j) acc += std::exp(double(x[i * n + j]) - mx);
      out[i] = S(mx + std::log(acc));
    }
    node(id).back = [a, id, m, n](Tape& t) {
      const auto& g = t.node(id).grad;
      const auto& x2 = t.val(a);
      const auto& y = t.val(id);
      auto& ga = t.node(a).grad;
      for (size_t i = 0; i < m; ++i) {
        for (size_t j = 0; j < n; ++j) {
          ga[i * n + j] += S(double(g[i]) * std::exp(double(x2[i * n + j]) - double(y[i])));
        }
      }
    };
    return id;
  }

 private:
  std::vector<Node> nodes_;

  Node& node(int id) { return nodes_.at(static_cast<size_t>(id)); }
  const Node& node(int id) const { return nodes_.at(static_cast<size_t>(id)); }

  int make(size_t r, size_t c) {
    Node n;
    n.rows = r;
    n.cols = c;
    n.val.assign(r * c, S(0));
    n.grad.assign(r * c, S(0));
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size() - 1);
  }

  void same_shape(int a, int b, const char* op) const {
    if (rows(a) != rows(b) || cols(a) != cols(b)) {
      throw std::logic_error(std::string(op) + ": shape mismatch");
    }
  }

  void check_segments(int a, const std::vector<uint32_t>& seg, size_t n_segments) const {
    if (seg.size() != rows(a)) throw std::logic_error("segment op: id count != row count");
    for (uint32_t s : seg) {
      if (s >= n_segments) throw std::logic_error("segment op: segment id out of range");
    }
  }

  template <typename FwdFn, typename BwdFn>
  int unary(int a, FwdFn fwd, BwdFn dfdx) {
    int id = make(rows(a), cols(a));
    const auto& x = val(a);
    auto& out = node(id).val;
    for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[i]);
    node(id).back = [a, id, dfdx](Tape& t) {
      const auto& g = t.node(id).grad;
      const auto& x2 = t.val(a);
      const auto& y = t.val(id);
      auto& ga = t.node(a).grad;
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dfdx(x2[i], y[i]);
    };
    return id;
  }

  template <typename CombineFn>
  int ew(int a, int b, const char* name, CombineFn fn, S da, S db) {
    same_shape(a, b, name);
    int id = make(rows(a), cols(a));
    const auto& xa = val(a);
    const auto& xb = val(b);
    auto& out = node(id).val;
    for (size_t i = 0; i < out.size(); ++i) out[i] = fn(xa[i], xb[i]);
    node(id).back = [a, b, id, da, db](Tape& t) {
      const auto& g = t.node(id).grad;
      auto& ga = t.node(a).grad;
      auto& gb = t.node(b).grad;
      for (size_t i = 0; i < g.size(); ++i) {
        ga[i] += da * g[i];
        gb[i] += db * g[i];
      }
    };
    return id;
  }

  // C (+)= op(A) * op(B) with f64 accumulation; transA/transB read A/B
  // transposed, accumulate adds into C instead of overwriting. Both loop
  // orders accumulate each element over ascending p, so results are
  // bit-identical regardless of which branch runs.
  void mm(S* c, const S* a, const S* b, size_t m, size_t k, size_t n, bool trans_a, bool trans_b,
          bool accumulate) {
    if (!trans_b) {
      // B is read row-wise: i-p-j order streams whole B rows through a
      // per-output-row f64 buffer.
      std::vector<double> buf(n);
      for (size_t i = 0; i < m; ++i) {
        std::fill(buf.begin(), buf.end(), 0.0);
        for (size_t p = 0; p < k; ++p) {
          const double av = double(trans_a ? a[p * m + i] : a[i * k + p]);
          const S* brow = b + p * n;
          for (size_t j = 0; j < n; ++j) buf[j] += av * double(brow[j]);
        }
        for (size_t j = 0; j < n; ++j) {
          if (accumulate) {
            c[i * n + j] += S(buf[j]);
          } else {
            c[i * n + j] = S(buf[j]);
          }
        }
      }
      return;
    }
    // B transposed: both operand rows are already contiguous in p.
    for (size_t i = 0; i < m; ++i) {
      for (size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (size_t p = 0; p < k; ++p) {
          const double av = double(trans_a ? a[p * m + i] : a[i * k + p]);
          acc += av * double(b[j * k + p]);
        }
        if (accumulate) {
          c[i * n + j] += S(acc);
        } else {
          c[i * n + j] = S(acc);
        }
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Parameters, optimizer, checkpoints, gradient checking

struct Param {
  std::string name;
  size_t rows = 0;
  size_t cols = 0;
  std::vector<float> value;

  size_t size() const { return rows * cols; }
};

// Registers every param as a tape leaf (converting to the tape scalar).
template <typename S>
std::vector<int> register_params(Tape<S>& tape, const std::vector<Param>& params) {
  std::vector<int> ids;
  ids.reserve(params.size());
  for (const auto& p : params) {
    std::vector<S> v(p.value.begin(), p.value.end());
    ids.push_back(tape.input(p.rows, p.cols, v));
  }
  return ids;
}

// Pulls parameter gradients back as f32 in registration order.
template <typename S>
std::vector<std::vector<float>> collect_grads(const Tape<S>& tape, const std::vector<int>& ids) {
  std::vector<std::vector<float>> grads;
  grads.reserve(ids.size());
  for (int id : ids) {
    const auto& g = tape.grad(id);
    grads.emplace_back(g.begin(), g.end());
  }
  return grads;
}

// Adam with bias correction; update arithmetic in f64, state stored f32.
struct Adam {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;

  void step(std::vector<Param>& params, const std::vector<std::vector<float>>& grads);

 private:
  std::vector<std::vector<float>> m_;
  std::vector<std::vector<float>> v_;
  int64_t t_ = 0;
};

// Named f32 arrays persisted as one binary blob plus a JSON manifest.
struct Checkpoint {
  struct Array {
    std::string name;
    std::vector<size_t> shape;
    std::vector<float> data;
  };
  std::vector<Array> arrays;

  void add(const std::string& name, std::vector<size_t> shape, std::vector<float> data);
  const Array& get(const std::string& name) const;  // throws DataError
  bool has(const std::string& name) const;

  void save(const std::string& path_base) const;  // writes <base>.bin and <base>.json
  static Checkpoint load(const std::string& path_base);

  static Checkpoint from_params(const std::vector<Param>& params);
  void to_params(std::vector<Param>& params) const;  // matches by name, checks shape
};

struct GradCheckParam {
  std::string name;
  size_t rows = 0;
  size_t cols = 0;
  std::vector<double> value;
};

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst_param;
  size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

// Central finite differences on a f64 tape: build(tape, leaf ids) -> loss id.
GradCheckResult grad_check(std::vector<GradCheckParam> params,
                           const std::function<int(Tape<double>&, const std::vector<int>&)>& build,
                           double eps = 1e-4);

}  // namespace relrisk
