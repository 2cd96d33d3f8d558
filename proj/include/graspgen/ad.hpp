#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "graspgen/geom.hpp"
#include "graspgen/rng.hpp"

namespace graspgen::ad {

class shape_error : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class numeric_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<int>;

inline int numel(const Shape& s) {
  int n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string r = "[";
  for (size_t i = 0; i < s.size(); ++i) r += (i ? "x" : "") + std::to_string(s[i]);
  return r + "]";
}

class Tape;

// Lightweight handle into a tape node.
struct Tensor {
  Tape* tape = nullptr;
  int id = -1;

  const Shape& shape() const;
  const std::vector<double>& value() const;
  const std::vector<double>& grad() const;
  int rows() const { return shape().at(0); }
  int cols() const { return shape().at(1); }
  double scalar() const;
};

using EigenRowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<EigenRowMat>;
using ConstMapMat = Eigen::Map<const EigenRowMat>;

// Reverse-mode tape over small dense tensors. Ops append nodes in
// topological order; backward walks the records in reverse.
class Tape {
 public:
  struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    std::function<void(Tape&, Node&)> backward_fn;  // null for leaves
  };

  Tensor leaf(std::vector<double> value, Shape shape, bool requires_grad) {
    if (static_cast<int>(value.size()) != numel(shape))
      throw shape_error("leaf: value count does not match shape " + shape_str(shape));
    return push(std::move(shape), std::move(value), requires_grad, nullptr, "leaf");
  }

  Tensor constant(std::vector<double> value, Shape shape) {
    return leaf(std::move(value), std::move(shape), false);
  }

  Tensor scalar_constant(double v) { return constant({v}, {1}); }

  Node& node(int id) { return nodes_[id]; }
  const Node& node(int id) const { return nodes_[id]; }
  size_t size() const { return nodes_.size(); }

  // ---- elementwise ----

  Tensor add(Tensor a, Tensor b) {
    require_same_shape("add", a, b);
    std::vector<double> out = val(a);
    const auto& bv = val(b);
    for (size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    return push(nodes_[a.id].shape, std::move(out), needs(a) || needs(b),
                [a, b](Tape& t, Node& n) {
                  t.accum(a, n.grad);
                  t.accum(b, n.grad);
                },
                "add");
  }

  Tensor sub(Tensor a, Tensor b) {
    require_same_shape("sub", a, b);
    std::vector<double> out = val(a);
    const auto& bv = val(b);
    for (size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
    return push(nodes_[a.id].shape, std::move(out), needs(a) || needs(b),
                [a, b](Tape& t, Node& n) {
                  t.accum(a, n.grad);
                  if (t.needs(b)) {
                    auto& g = t.grad_buf(b);
                    for (size_t i = 0; i < n.grad.size(); ++i) g[i] -= n.grad[i];
                  }
                },
                "sub");
  }

  Tensor mul(Tensor a, Tensor b) {
    require_same_shape("mul", a, b);
    std::vector<double> out = val(a);
    const auto& bv = val(b);
    for (size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    return push(nodes_[a.id].shape, std::move(out), needs(a) || needs(b),
                [a, b](Tape& t, Node& n) {
                  if (t.needs(a)) {
                    auto& g = t.grad_buf(a);
                    const auto& bv2 = t.val(b);
                    for (size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * bv2[i];
                  }
                  if (t.needs(b)) {
                    auto& g = t.grad_buf(b);
                    const auto& av2 = t.val(a);
                    for (size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * av2[i];
                  }
                },
                "mul");
  }

  Tensor scale(Tensor a, double s) {
    std::vector<double> out = val(a);
    for (double& v : out) v *= s;
    return push(nodes_[a.id].shape, std::move(out), needs(a),
                [a, s](Tape& t, Node& n) {
                  if (!t.needs(a)) return;
                  auto& g = t.grad_buf(a);
                  for (size_t i = 0; i < n.grad.size(); ++i) g[i] += s * n.grad[i];
                },
                "scale");
  }

  Tensor relu(Tensor a) {
    std::vector<double> out = val(a);
    for (double& v : out) v = v > 0.0 ? v : 0.0;
    return push(nodes_[a.id].shape, std::move(out), needs(a),
                [a](Tape& t, Node& n) {
                  if (!t.needs(a)) return;
                  auto& g = t.grad_buf(a);
                  const auto& av = t.val(a);
                  for (size_t i = 0; i < n.grad.size(); ++i)
                    if (av[i] > 0.0) g[i] += n.grad[i];
                },
                "relu");
  }

  Tensor exp(Tensor a) {
    std::vector<double> out = val(a);
    for (double& v : out) v = std::exp(v);
    Tensor r = push(nodes_[a.id].shape, std::move(out), needs(a), nullptr, "exp");
    nodes_[r.id].backward_fn = [a, r](Tape& t, Node& n) {
      if (!t.needs(a)) return;
      auto& g = t.grad_buf(a);
      for (size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * n.value[i];
    };
    return r;
  }

  Tensor log(Tensor a) {
    std::vector<double> out = val(a);
    for (double& v : out) {
      if (v <= 0.0) throw numeric_error("log: non-positive input");
      v = std::log(v);
    }
    return push(nodes_[a.id].shape, std::move(out), needs(a),
                [a](Tape& t, Node& n) {
                  if (!t.needs(a)) return;
                  auto& g = t.grad_buf(a);
                  const auto& av = t.val(a);
                  for (size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] / av[i];
                },
                "log");
  }

  Tensor abs(Tensor a) {
    std::vector<double> out = val(a);
    for (double& v : out) v = std::fabs(v);
    return push(nodes_[a.id].shape, std::move(out), needs(a),
                [a](Tape& t, Node& n) {
                  if (!t.needs(a)) return;
                  auto& g = t.grad_buf(a);
                  const auto& av = t.val(a);
                  for (size_t i = 0; i < n.grad.size(); ++i) {
                    if (av[i] > 0.0) g[i] += n.grad[i];
                    else if (av[i] < 0.0) g[i] -= n.grad[i];
                  }
                },
                "abs");
  }

  Tensor clamp(Tensor a, double lo, double hi) {
    std::vector<double> out = val(a);
    for (double& v : out) v = std::fmin(hi, std::fmax(lo, v));
    return push(nodes_[a.id].shape, std::move(out), needs(a),
                [a, lo, hi](Tape& t, Node& n) {
                  if (!t.needs(a)) return;
                  auto& g = t.grad_buf(a);
                  const auto& av = t.val(a);
                  for (size_t i = 0; i < n.grad.size(); ++i)
                    if (av[i] > lo && av[i] < hi) g[i] += n.grad[i];
                },
                "clamp");
  }

  // ---- linear algebra ----

  Tensor matmul(Tensor a, Tensor b) {
    require_rank("matmul", a, 2);
    require_rank("matmul", b, 2);
    const int n = a.rows(), k = a.cols(), k2 = b.rows(), m = b.cols();
    if (k != k2)
      throw shape_error("matmul: inner dimensions differ, " + shape_str(shape(a)) + " vs " +
                        shape_str(shape(b)));
    std::vector<double> out(static_cast<size_t>(n) * m);
    {
      ConstMapMat ma(val(a).data(), n, k), mb(val(b).data(), k, m);
      MapMat mo(out.data(), n, m);
      mo.noalias() = ma * mb;
    }
    return push({n, m}, std::move(out), needs(a) || needs(b),
                [a, b, n, k, m](Tape& t, Node& nd) {
                  ConstMapMat go(nd.grad.data(), n, m);
                  if (t.needs(a)) {
                    ConstMapMat mb(t.val(b).data(), k, m);
                    MapMat ga(t.grad_buf(a).data(), n, k);
                    ga.noalias() += go * mb.transpose();
                  }
                  if (t.needs(b)) {
                    ConstMapMat ma(t.val(a).data(), n, k);
                    MapMat gb(t.grad_buf(b).data(), k, m);
                    gb.noalias() += ma.transpose() * go;
                  }
                },
                "matmul");
  }

  // [N x C] + [C], broadcast over rows.
  Tensor add_bias(Tensor a, Tensor b) {
    require_rank("add_bias", a, 2);
    const int n = a.rows(), c = a.cols();
    if (numel(shape(b)) != c)
      throw shape_error("add_bias: bias " + shape_str(shape(b)) + " does not match " +
                        shape_str(shape(a)));
    std::vector<double> out = val(a);
    const auto& bv = val(b);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < c; ++j) out[static_cast<size_t>(i) * c + j] += bv[j];
    return push({n, c}, std::move(out), needs(a) || needs(b),
                [a, b, n, c](Tape& t, Node& nd) {
                  t.accum(a, nd.grad);
                  if (t.needs(b)) {
                    auto& g = t.grad_buf(b);
                    for (int i = 0; i < n; ++i)
                      for (int j = 0; j < c; ++j) g[j] += nd.grad[static_cast<size_t>(i) * c + j];
                  }
                },
                "add_bias");
  }

  // ---- structure ----

  Tensor concat_features(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw shape_error("concat_features: no inputs");
    const int n = parts[0].rows();
    int ctot = 0;
    bool rg = false;
    for (const Tensor& p : parts) {
      require_rank("concat_features", p, 2);
      if (p.rows() != n)
        throw shape_error("concat_features: row mismatch " + shape_str(shape(p)));
      ctot += p.cols();
      rg = rg || needs(p);
    }
    std::vector<double> out(static_cast<size_t>(n) * ctot);
    int off = 0;
    for (const Tensor& p : parts) {
      const int c = p.cols();
      const auto& pv = val(p);
      for (int i = 0; i < n; ++i)
        std::memcpy(&out[static_cast<size_t>(i) * ctot + off], &pv[static_cast<size_t>(i) * c],
                    sizeof(double) * c);
      off += c;
    }
    auto parts_copy = parts;
    return push({n, ctot}, std::move(out), rg,
                [parts_copy, n, ctot](Tape& t, Node& nd) {
                  int o = 0;
                  for (const Tensor& p : parts_copy) {
                    const int c = t.shape(p)[1];
                    if (t.needs(p)) {
                      auto& g = t.grad_buf(p);
                      for (int i = 0; i < n; ++i)
                        for (int j = 0; j < c; ++j)
                          g[static_cast<size_t>(i) * c + j] +=
                              nd.grad[static_cast<size_t>(i) * ctot + o + j];
                    }
                    o += c;
                  }
                },
                "concat_features");
  }

  Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw shape_error("concat_rows: no inputs");
    const int c = parts[0].cols();
    int ntot = 0;
    bool rg = false;
    for (const Tensor& p : parts) {
      require_rank("concat_rows", p, 2);
      if (p.cols() != c) throw shape_error("concat_rows: column mismatch " + shape_str(shape(p)));
      ntot += p.rows();
      rg = rg || needs(p);
    }
    std::vector<double> out;
    out.reserve(static_cast<size_t>(ntot) * c);
    for (const Tensor& p : parts) out.insert(out.end(), val(p).begin(), val(p).end());
    auto parts_copy = parts;
    return push({ntot, c}, std::move(out), rg,
                [parts_copy, c](Tape& t, Node& nd) {
                  size_t o = 0;
                  for (const Tensor& p : parts_copy) {
                    const size_t sz = t.val(p).size();
                    if (t.needs(p)) {
                      auto& g = t.grad_buf(p);
                      for (size_t i = 0; i < sz; ++i) g[i] += nd.grad[o + i];
                    }
                    o += sz;
                  }
                },
                "concat_rows");
  }

  Tensor gather_rows(Tensor a, std::vector<int> idx) {
    require_rank("gather_rows", a, 2);
    const int n = a.rows(), c = a.cols();
    const int m = static_cast<int>(idx.size());
    std::vector<double> out(static_cast<size_t>(m) * c);
    const auto& av = val(a);
    for (int i = 0; i < m; ++i) {
      if (idx[i] < 0 || idx[i] >= n) throw shape_error("gather_rows: index out of range");
      std::memcpy(&out[static_cast<size_t>(i) * c], &av[static_cast<size_t>(idx[i]) * c],
                  sizeof(double) * c);
    }
    return push({m, c}, std::move(out), needs(a),
                [a, idx = std::move(idx), c](Tape& t, Node& nd) {
                  if (!t.needs(a)) return;
                  auto& g = t.grad_buf(a);
                  for (size_t i = 0; i < idx.size(); ++i)
                    for (int j = 0; j < c; ++j)
                      g[static_cast<size_t>(idx[i]) * c + j] += nd.grad[i * c + j];
                },
                "gather_rows");
  }

  // [1 x C] -> [n x C].
  Tensor broadcast_rows(Tensor a, int n) {
    require_rank("broadcast_rows", a, 2);
    if (a.rows() != 1) throw shape_error("broadcast_rows: input must have one row");
    const int c = a.cols();
    std::vector<double> out(static_cast<size_t>(n) * c);
    const auto& av = val(a);
    for (int i = 0; i < n; ++i) std::memcpy(&out[static_cast<size_t>(i) * c], av.data(), sizeof(double) * c);
    return push({n, c}, std::move(out), needs(a),
                [a, n, c](Tape& t, Node& nd) {
                  if (!t.needs(a)) return;
                  auto& g = t.grad_buf(a);
                  for (int i = 0; i < n; ++i)
                    for (int j = 0; j < c; ++j) g[j] += nd.grad[static_cast<size_t>(i) * c + j];
                },
                "broadcast_rows");
  }

  Tensor mean_rows(Tensor a) {
    require_rank("mean_rows", a, 2);
    const int n = a.rows(), c = a.cols();
    std::vector<double> out(c, 0.0);
    const auto& av = val(a);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < c; ++j) out[j] += av[static_cast<size_t>(i) * c + j];
    for (double& v : out) v /= n;
    return push({1, c}, std::move(out), needs(a),
                [a, n, c](Tape& t, Node& nd) {
                  if (!t.needs(a)) return;
                  auto& g = t.grad_buf(a);
                  for (int i = 0; i < n; ++i)
                    for (int j = 0; j < c; ++j) g[static_cast<size_t>(i) * c + j] += nd.grad[j] / n;
                },
                "mean_rows");
  }

  // Per-group max over explicit member index lists. Gradient routes to the
  // argmax element of each (group, channel); first index wins ties.
  Tensor group_max_pool(Tensor a, const std::vector<std::vector<int>>& groups) {
    require_rank("group_max_pool", a, 2);
    const int n = a.rows(), c = a.cols();
    const int g = static_cast<int>(groups.size());
    std::vector<double> out(static_cast<size_t>(g) * c);
    std::vector<int> argmax(static_cast<size_t>(g) * c);
    const auto& av = val(a);
    for (int gi = 0; gi < g; ++gi) {
      if (groups[gi].empty()) throw shape_error("group_max_pool: empty group");
      for (int j = 0; j < c; ++j) {
        double best = -std::numeric_limits<double>::infinity();
        int besti = -1;
        for (int mi : groups[gi]) {
          if (mi < 0 || mi >= n) throw shape_error("group_max_pool: index out of range");
          const double v = av[static_cast<size_t>(mi) * c + j];
          if (v > best) {
            best = v;
            besti = mi;
          }
        }
        out[static_cast<size_t>(gi) * c + j] = best;
        argmax[static_cast<size_t>(gi) * c + j] = besti;
      }
    }
    return push({g, c}, std::move(out), needs(a),
                [a, argmax = std::move(argmax), c](Tape& t, Node& nd) {
                  if (!t.needs(a)) return;
                  auto& gr = t.grad_buf(a);
                  for (size_t i = 0; i < argmax.size(); ++i)
                    gr[static_cast<size_t>(argmax[i]) * c + (i % c)] += nd.grad[i];
                },
                "group_max_pool");
  }

  // ---- reductions ----

  Tensor sum_reduce(Tensor a) {
    double s = 0.0;
    for (double v : val(a)) s += v;
    return push({1}, {s}, needs(a),
                [a](Tape& t, Node& nd) {
                  if (!t.needs(a)) return;
                  auto& g = t.grad_buf(a);
                  for (double& v : g) v += nd.grad[0];
                },
                "sum_reduce");
  }

  Tensor mean_reduce(Tensor a) {
    const int n = numel(shape(a));
    double s = 0.0;
    for (double v : val(a)) s += v;
    return push({1}, {s / n}, needs(a),
                [a, n](Tape& t, Node& nd) {
                  if (!t.needs(a)) return;
                  auto& g = t.grad_buf(a);
                  for (double& v : g) v += nd.grad[0] / n;
                },
                "mean_reduce");
  }

  // ---- normalization / classification ----

  // Normalizes the whole tensor by its L2 norm.
  Tensor l2_normalize(Tensor a) {
    const auto& av = val(a);
    double nsq = 0.0;
    for (double v : av) nsq += v * v;
    const double nrm = std::sqrt(nsq);
    if (nrm == 0.0) throw numeric_error("l2_normalize: zero vector");
    std::vector<double> out = av;
    for (double& v : out) v /= nrm;
    Tensor r = push(nodes_[a.id].shape, std::move(out), needs(a), nullptr, "l2_normalize");
    nodes_[r.id].backward_fn = [a, nrm, r](Tape& t, Node& nd) {
      if (!t.needs(a)) return;
      auto& g = t.grad_buf(a);
      double gy = 0.0;
      for (size_t i = 0; i < nd.grad.size(); ++i) gy += nd.grad[i] * nd.value[i];
      for (size_t i = 0; i < nd.grad.size(); ++i) g[i] += (nd.grad[i] - nd.value[i] * gy) / nrm;
    };
    return r;
  }

  // Flips sign so the first component is >= 0 (quaternion canonicalization).
  Tensor canonicalize_sign(Tensor a) {
    const double s = val(a)[0] >= 0.0 ? 1.0 : -1.0;
    return scale(a, s);
  }

  Tensor softmax(Tensor a) {
    const auto& av = val(a);
    const double m = *std::max_element(av.begin(), av.end());
    std::vector<double> out = av;
    double z = 0.0;
    for (double& v : out) {
      v = std::exp(v - m);
      z += v;
    }
    for (double& v : out) v /= z;
    Tensor r = push(nodes_[a.id].shape, std::move(out), needs(a), nullptr, "softmax");
    nodes_[r.id].backward_fn = [a, r](Tape& t, Node& nd) {
      if (!t.needs(a)) return;
      auto& g = t.grad_buf(a);
      double gy = 0.0;
      for (size_t i = 0; i < nd.grad.size(); ++i) gy += nd.grad[i] * nd.value[i];
      for (size_t i = 0; i < nd.grad.size(); ++i) g[i] += nd.value[i] * (nd.grad[i] - gy);
    };
    return r;
  }

  // Mean cross-entropy over rows, computed via log-sum-exp.
  Tensor softmax_cross_entropy(Tensor logits, const std::vector<int>& labels) {
    require_rank("softmax_cross_entropy", logits, 2);
    const int n = logits.rows(), k = logits.cols();
    if (static_cast<int>(labels.size()) != n)
      throw shape_error("softmax_cross_entropy: labels size " + std::to_string(labels.size()) +
                        " vs rows " + std::to_string(n));
    const auto& lv = val(logits);
    std::vector<double> probs(static_cast<size_t>(n) * k);
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
      if (labels[i] < 0 || labels[i] >= k) throw shape_error("softmax_cross_entropy: bad label");
      const double* row = &lv[static_cast<size_t>(i) * k];
      double m = row[0];
      for (int j = 1; j < k; ++j) m = std::fmax(m, row[j]);
      double z = 0.0;
      for (int j = 0; j < k; ++j) z += std::exp(row[j] - m);
      const double lse = m + std::log(z);
      total += lse - row[labels[i]];
      for (int j = 0; j < k; ++j) probs[static_cast<size_t>(i) * k + j] = std::exp(row[j] - lse);
    }
    return push({1}, {total / n}, needs(logits),
                [logits, labels, probs = std::move(probs), n, k](Tape& t, Node& nd) {
                  if (!t.needs(logits)) return;
                  auto& g = t.grad_buf(logits);
                  const double s = nd.grad[0] / n;
                  for (int i = 0; i < n; ++i)
                    for (int j = 0; j < k; ++j)
                      g[static_cast<size_t>(i) * k + j] +=
                          s * (probs[static_cast<size_t>(i) * k + j] - (j == labels[i] ? 1.0 : 0.0));
                },
                "softmax_cross_entropy");
  }

  // ---- rigid transform ----

  // R(q) p_i + t for constant points. q uses the quadratic rotation
  // polynomial (a rotation when q is unit norm); gradients are the exact
  // partials of that polynomial, so q can arrive straight from l2_normalize.
  Tensor quat_rotate_points(Tensor q, Tensor t, const std::vector<geom::Vec3>& points) {
    if (numel(shape(q)) != 4) throw shape_error("quat_rotate_points: q must have 4 elements");
    if (numel(shape(t)) != 3) throw shape_error("quat_rotate_points: t must have 3 elements");
    const auto& qv = val(q);
    const auto& tv = val(t);
    const double w = qv[0];
    const geom::Vec3 u{qv[1], qv[2], qv[3]};
    const int k = static_cast<int>(points.size());
    std::vector<double> out(static_cast<size_t>(k) * 3);
    for (int i = 0; i < k; ++i) {
      const geom::Vec3& p = points[i];
      const geom::Vec3 r =
          p * (w * w - dot(u, u)) + u * (2.0 * dot(u, p)) + cross(u, p) * (2.0 * w);
      out[3 * i + 0] = r.x + tv[0];
      out[3 * i + 1] = r.y + tv[1];
      out[3 * i + 2] = r.z + tv[2];
    }
    return push({k, 3}, std::move(out), needs(q) || needs(t),
                [q, t, points, w, u](Tape& tape, Node& nd) {
                  const int k2 = static_cast<int>(points.size());
                  if (tape.needs(t)) {
                    auto& gt = tape.grad_buf(t);
                    for (int i = 0; i < k2; ++i)
                      for (int c = 0; c < 3; ++c) gt[c] += nd.grad[3 * i + c];
                  }
                  if (tape.needs(q)) {
                    auto& gq = tape.grad_buf(q);
                    for (int i = 0; i < k2; ++i) {
                      const geom::Vec3& p = points[i];
                      const geom::Vec3 gr{nd.grad[3 * i], nd.grad[3 * i + 1], nd.grad[3 * i + 2]};
                      gq[0] += dot(gr, p * (2.0 * w) + cross(u, p) * 2.0);
                      for (int c = 0; c < 3; ++c) {
                        geom::Vec3 e{0, 0, 0};
                        e[c] = 1.0;
                        const geom::Vec3 d = p * (-2.0 * u[c]) + e * (2.0 * dot(u, p)) +
                                             u * (2.0 * p[c]) + cross(e, p) * (2.0 * w);
                        gq[1 + c] += dot(gr, d);
                      }
                    }
                  }
                },
                "quat_rotate_points");
  }

  // ---- backward ----

  void backward(Tensor loss) {
    if (numel(shape(loss)) != 1) throw shape_error("backward: loss must be scalar");
    if (nodes_.empty()) throw std::logic_error("backward: empty tape");
    if (backward_done_ && last_backward_size_ == nodes_.size())
      throw std::logic_error("backward: called twice without a new forward pass");
    for (Node& n : nodes_) {
      n.grad.assign(n.value.size(), 0.0);
    }
    nodes_[loss.id].grad[0] = 1.0;
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.requires_grad || !n.backward_fn) continue;
      n.backward_fn(*this, n);
    }
    backward_done_ = true;
    last_backward_size_ = nodes_.size();
  }

  const std::vector<double>& grad_of(Tensor t) const {
    if (!backward_done_) throw std::logic_error("grad_of: backward has not run");
    return nodes_[t.id].grad;
  }

 private:
  friend struct Tensor;

  bool needs(Tensor t) const { return nodes_[t.id].requires_grad; }
  const std::vector<double>& val(Tensor t) const { return nodes_[t.id].value; }
  const Shape& shape(Tensor t) const { return nodes_[t.id].shape; }
  std::vector<double>& grad_buf(Tensor t) { return nodes_[t.id].grad; }

  void accum(Tensor t, const std::vector<double>& g) {
    if (!needs(t)) return;
    auto& dst = grad_buf(t);
    for (size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  }

  void require_same_shape(const char* op, Tensor a, Tensor b) const {
    if (shape(a) != shape(b))
      throw shape_error(std::string(op) + ": shape mismatch " + shape_str(shape(a)) + " vs " +
                        shape_str(shape(b)));
  }
  void require_rank(const char* op, Tensor t, size_t rank) const {
    if (shape(t).size() != rank)
      throw shape_error(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                        shape_str(shape(t)));
  }

  Tensor push(Shape shape, std::vector<double> value, bool requires_grad,
              std::function<void(Tape&, Node&)> backward_fn, const char* op) {
    for (double v : value)
      if (!std::isfinite(v)) throw numeric_error(std::string(op) + ": non-finite value produced");
    Node n;
    n.shape = std::move(shape);
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.backward_fn = std::move(backward_fn);
    nodes_.push_back(std::move(n));
    backward_done_ = false;
    return Tensor{this, static_cast<int>(nodes_.size()) - 1};
  }

  std::vector<Node> nodes_;
  bool backward_done_ = false;
  size_t last_backward_size_ = 0;
};

inline const Shape& Tensor::shape() const { return tape->node(id).shape; }
inline const std::vector<double>& Tensor::value() const { return tape->node(id).value; }
inline const std::vector<double>& Tensor::grad() const { return tape->node(id).grad; }
inline double Tensor::scalar() const {
  if (numel(shape()) != 1) throw shape_error("scalar: tensor is not scalar");
  return value()[0];
}

// ---- optimizer ----

struct AdamState {
  std::vector<double> m, v;
  long step = 0;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

inline void adam_step(std::vector<double>& params, const std::vector<double>& grads,
                      AdamState& state, double lr, const AdamConfig& cfg = {}) {
  if (grads.size() != params.size()) throw shape_error("adam_step: grad/param size mismatch");
  if (state.m.empty()) state.m.assign(params.size(), 0.0);
  if (state.v.empty()) state.v.assign(params.size(), 0.0);
  if (state.m.size() != params.size() || state.v.size() != params.size())
    throw shape_error("adam_step: state size mismatch");
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (size_t i = 0; i < params.size(); ++i) {
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grads[i];
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    params[i] -= lr * mhat / (std::sqrt(vhat) + cfg.epsilon);
  }
}

// ---- parameter store ----

struct Param {
  std::string name;
  Shape shape;
  std::vector<double> value;
  AdamState adam;
};

// Named parameters with stable ordering; exclusively owned by one trainer.
class ParamStore {
 public:
  Param& add(const std::string& name, Shape shape, std::vector<double> value) {
    if (index_.count(name)) throw std::invalid_argument("ParamStore: duplicate name " + name);
    if (static_cast<int>(value.size()) != numel(shape))
      throw shape_error("ParamStore: value count mismatch for " + name);
    index_[name] = params_.size();
    params_.push_back(Param{name, std::move(shape), std::move(value), {}});
    return params_.back();
  }

  // Glorot-uniform init in +-sqrt(6 / (fan_in + fan_out)).
  Param& add_linear_weight(const std::string& name, int fan_in, int fan_out, Rng& rng) {
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    std::vector<double> v(static_cast<size_t>(fan_in) * fan_out);
    for (double& x : v) x = rng.uniform(-bound, bound);
    return add(name, {fan_in, fan_out}, std::move(v));
  }

  Param& add_zeros(const std::string& name, Shape shape) {
    return add(name, shape, std::vector<double>(numel(shape), 0.0));
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }
  Param& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::invalid_argument("ParamStore: unknown name " + name);
    return params_[it->second];
  }
  const Param& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::invalid_argument("ParamStore: unknown name " + name);
    return params_[it->second];
  }

  size_t size() const { return params_.size(); }
  Param& operator[](size_t i) { return params_[i]; }
  const Param& operator[](size_t i) const { return params_[i]; }

  size_t total_values() const {
    size_t n = 0;
    for (const Param& p : params_) n += p.value.size();
    return n;
  }

 private:
  std::vector<Param> params_;
  std::map<std::string, size_t> index_;
};

// Per-tape mounting of store parameters plus cross-example gradient
// accumulation. One Bindings per tape; grads flushed into GradAccum.
class GradAccum {
 public:
  explicit GradAccum(const ParamStore& store) : grads_(store.size()) {
    for (size_t i = 0; i < store.size(); ++i) grads_[i].assign(store[i].value.size(), 0.0);
  }
  std::vector<double>& operator[](size_t i) { return grads_[i]; }
  size_t size() const { return grads_.size(); }
  void zero() {
    for (auto& g : grads_)
      std::fill(g.begin(), g.end(), 0.0);
  }
  void scale(double s) {
    for (auto& g : grads_)
      for (double& v : g) v *= s;
  }

 private:
  std::vector<std::vector<double>> grads_;
};

class Bindings {
 public:
  Bindings(Tape& tape, ParamStore& store) : tape_(&tape), store_(&store) {}

  Tensor use(const std::string& name) {
    auto it = mounted_.find(name);
    if (it != mounted_.end()) return it->second;
    Param& p = store_->at(name);
    Tensor t = tape_->leaf(p.value, p.shape, true);
    mounted_.emplace(name, t);
    return t;
  }

  // Adds this tape's parameter gradients into the accumulator.
  void flush(GradAccum& accum) {
    for (const auto& [name, tensor] : mounted_) {
      size_t idx = 0;
      for (size_t i = 0; i < store_->size(); ++i)
        if ((*store_)[i].name == name) {
          idx = i;
          break;
        }
      const auto& g = tape_->grad_of(tensor);
      auto& dst = accum[idx];
      for (size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    }
  }

 private:
  Tape* tape_;
  ParamStore* store_;
  std::map<std::string, Tensor> mounted_;
};

inline void apply_adam(ParamStore& store, GradAccum& grads, double lr,
                       const AdamConfig& cfg = {}) {
  for (size_t i = 0; i < store.size(); ++i)
    adam_step(store[i].value, grads[i], store[i].adam, lr, cfg);
}

// ---- checkpoint io ----

inline std::uint64_t fnv1a64(const void* data, size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

inline constexpr char kCheckpointMagic[8] = {'G', 'G', 'C', 'K', 'P', 'T', '0', '1'};

// Named tensor table with a metadata string; the header stores the FNV-1a
// hash of the metadata, which callers treat as the architecture config hash.
inline void save_checkpoint(const std::string& path, const ParamStore& store,
                            const std::string& meta) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_checkpoint: cannot open " + path);
  os.write(kCheckpointMagic, 8);
  const std::uint64_t hash = fnv1a64(meta);
  os.write(reinterpret_cast<const char*>(&hash), 8);
  const std::uint32_t meta_len = static_cast<std::uint32_t>(meta.size());
  os.write(reinterpret_cast<const char*>(&meta_len), 4);
  os.write(meta.data(), meta_len);
  const std::uint32_t count = static_cast<std::uint32_t>(store.size());
  os.write(reinterpret_cast<const char*>(&count), 4);
  for (size_t i = 0; i < store.size(); ++i) {
    const Param& p = store[i];
    const std::uint32_t name_len = static_cast<std::uint32_t>(p.name.size());
    os.write(reinterpret_cast<const char*>(&name_len), 4);
    os.write(p.name.data(), name_len);
    const std::uint32_t ndim = static_cast<std::uint32_t>(p.shape.size());
    os.write(reinterpret_cast<const char*>(&ndim), 4);
    for (int d : p.shape) {
      const std::uint32_t dd = static_cast<std::uint32_t>(d);
      os.write(reinterpret_cast<const char*>(&dd), 4);
    }
    os.write(reinterpret_cast<const char*>(p.value.data()), sizeof(double) * p.value.size());
  }
  if (!os) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

struct Checkpoint {
  std::uint64_t config_hash = 0;
  std::string meta;
  ParamStore params;
};

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw std::runtime_error("load_checkpoint: bad magic/version in " + path);
  Checkpoint ck;
  is.read(reinterpret_cast<char*>(&ck.config_hash), 8);
  std::uint32_t meta_len = 0;
  is.read(reinterpret_cast<char*>(&meta_len), 4);
  ck.meta.resize(meta_len);
  is.read(ck.meta.data(), meta_len);
  if (!is || fnv1a64(ck.meta) != ck.config_hash)
    throw std::runtime_error("load_checkpoint: metadata hash mismatch in " + path);
  std::uint32_t count = 0;
  is.read(reinterpret_cast<char*>(&count), 4);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint32_t name_len = 0;
    is.read(reinterpret_cast<char*>(&name_len), 4);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    std::uint32_t ndim = 0;
    is.read(reinterpret_cast<char*>(&ndim), 4);
    Shape shape(ndim);
    for (std::uint32_t d = 0; d < ndim; ++d) {
      std::uint32_t dd = 0;
      is.read(reinterpret_cast<char*>(&dd), 4);
      shape[d] = static_cast<int>(dd);
    }
    std::vector<double> value(numel(shape));
    is.read(reinterpret_cast<char*>(value.data()), sizeof(double) * value.size());
    if (!is) throw std::runtime_error("load_checkpoint: truncated tensor table in " + path);
    ck.params.add(name, std::move(shape), std::move(value));
  }
  return ck;
}

}  // namespace graspgen::ad
