#include "zerommt/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <sstream>

namespace zerommt {

namespace {

void require_same_shape(std::string_view op, const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " + shape_string(b));
  }
}

std::uint64_t mix(std::uint64_t h, std::uint64_t v) {
  h ^= v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
  return h;
}

}  // namespace

std::string shape_string(const Matrix& m) {
  std::ostringstream os;
  os << '[' << m.rows() << 'x' << m.cols() << ']';
  return os.str();
}

const Matrix& Var::value() const { return graph->value(*this); }

double Var::scalar() const {
  const Matrix& v = value();
  if (v.size() != 1) throw ShapeError("scalar(): node is " + shape_string(v));
  return v(0, 0);
}

// ---- Graph -----------------------------------------------------------------

Var Graph::constant(Matrix value) {
  Node n;
  n.owned = std::move(value);
  n.op = "constant";
  n.is_leaf = true;
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Graph::leaf(const Matrix& value, bool trainable) {
  Node n;
  n.external = &value;
  n.op = "leaf";
  n.is_leaf = true;
  n.requires_grad = trainable;
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

const Matrix& Graph::value(Var v) const {
  if (v.graph != this || v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) {
    throw std::logic_error("value(): variable does not belong to this graph");
  }
  return node_value(nodes_[v.id]);
}

const Matrix* Graph::grad(Var v) const {
  const Node& n = nodes_.at(v.id);
  if (!n.requires_grad || n.grad.size() == 0) return nullptr;
  return &n.grad;
}

Var Graph::push(Matrix value, std::string_view op, std::span<const Var> inputs, BackwardFn fn) {
  bool needs = false;
  for (Var in : inputs) {
    if (in.graph != this) throw std::logic_error(std::string(op) + ": input from a different graph");
    needs = needs || nodes_[in.id].requires_grad;
  }
  Node n;
  n.owned = std::move(value);
  n.op = op.data();
  n.requires_grad = needs;
  if (needs) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Matrix& Graph::grad_buffer(int id) {
  Node& n = nodes_[id];
  if (n.grad.size() == 0) {
    const Matrix& v = node_value(n);
    n.grad = Matrix::Zero(v.rows(), v.cols());
  }
  return n.grad;
}

void Graph::mix_relu_signature(std::uint64_t h) { relu_signature_ = mix(relu_signature_, h); }

void Graph::backward(Var loss) {
  if (loss.graph != this || loss.id < 0 || static_cast<std::size_t>(loss.id) >= nodes_.size()) {
    throw std::logic_error("backward(): loss was not produced by a forward pass on this graph");
  }
  if (backward_done_) throw std::logic_error("backward(): already called on this graph");
  const Matrix& lv = node_value(nodes_[loss.id]);
  if (lv.size() != 1) throw ShapeError("backward(): loss must be scalar, got " + shape_string(lv));
  backward_done_ = true;
  if (!nodes_[loss.id].requires_grad) return;
  grad_buffer(loss.id)(0, 0) = 1.0;
  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.requires_grad || n.grad.size() == 0 || !n.backward) continue;
    n.backward(*this, id);
  }
}

// ---- ops -------------------------------------------------------------------

Var matmul(Var a, Var b) {
  Graph& g = *a.graph;
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw ShapeError("matmul: inner dimensions differ " + shape_string(av) + " * " + shape_string(bv));
  }
  Matrix out = av * bv;
  return g.push(std::move(out), "matmul", {a, b}, [a, b](Graph& g, int self) {
    const Matrix& go = g.grad_of(self);
    if (g.requires_grad(a)) g.grad_buffer(a.id).noalias() += go * g.value(b).transpose();
    if (g.requires_grad(b)) g.grad_buffer(b.id).noalias() += g.value(a).transpose() * go;
  });
}

Var matmul_nt(Var a, Var b) {
  Graph& g = *a.graph;
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols() != bv.cols()) {
    throw ShapeError("matmul_nt: inner dimensions differ " + shape_string(av) + " * " + shape_string(bv) + "^T");
  }
  Matrix out = av * bv.transpose();
  return g.push(std::move(out), "matmul_nt", {a, b}, [a, b](Graph& g, int self) {
    const Matrix& go = g.grad_of(self);
    if (g.requires_grad(a)) g.grad_buffer(a.id).noalias() += go * g.value(b);
    if (g.requires_grad(b)) g.grad_buffer(b.id).noalias() += go.transpose() * g.value(a);
  });
}

Var add(Var a, Var b) {
  require_same_shape("add", a.value(), b.value());
  Matrix out = a.value() + b.value();
  return a.graph->push(std::move(out), "add", {a, b}, [a, b](Graph& g, int self) {
    const Matrix& go = g.grad_of(self);
    if (g.requires_grad(a)) g.grad_buffer(a.id) += go;
    if (g.requires_grad(b)) g.grad_buffer(b.id) += go;
  });
}

Var sub(Var a, Var b) {
  require_same_shape("sub", a.value(), b.value());
  Matrix out = a.value() - b.value();
  return a.graph->push(std::move(out), "sub", {a, b}, [a, b](Graph& g, int self) {
    const Matrix& go = g.grad_of(self);
    if (g.requires_grad(a)) g.grad_buffer(a.id) += go;
    if (g.requires_grad(b)) g.grad_buffer(b.id) -= go;
  });
}

Var mul(Var a, Var b) {
  require_same_shape("mul", a.value(), b.value());
  Matrix out = a.value().cwiseProduct(b.value());
  return a.graph->push(std::move(out), "mul", {a, b}, [a, b](Graph& g, int self) {
    const Matrix& go = g.grad_of(self);
    if (g.requires_grad(a)) g.grad_buffer(a.id) += go.cwiseProduct(g.value(b));
    if (g.requires_grad(b)) g.grad_buffer(b.id) += go.cwiseProduct(g.value(a));
  });
}

Var scale(Var a, double s) {
  Matrix out = a.value() * s;
  return a.graph->push(std::move(out), "scale", {a}, [a, s](Graph& g, int self) {
    g.grad_buffer(a.id) += g.grad_of(self) * s;
  });
}

Var add_bias(Var a, Var bias) {
  const Matrix& av = a.value();
  const Matrix& bv = bias.value();
  if (bv.rows() != 1 || bv.cols() != av.cols()) {
    throw ShapeError("add_bias: bias " + shape_string(bv) + " does not match rows of " + shape_string(av));
  }
  Matrix out = av.rowwise() + bv.row(0);
  return a.graph->push(std::move(out), "add_bias", {a, bias}, [a, bias](Graph& g, int self) {
    const Matrix& go = g.grad_of(self);
    if (g.requires_grad(a)) g.grad_buffer(a.id) += go;
    if (g.requires_grad(bias)) g.grad_buffer(bias.id) += go.colwise().sum();
  });
}

Var relu(Var a) {
  const Matrix& av = a.value();
  // Subgradient at 0 is 0.
  Matrix out = av.cwiseMax(0.0);
  std::uint64_t h = static_cast<std::uint64_t>(av.size());
  std::uint64_t word = 0;
  int bits = 0;
  for (Eigen::Index i = 0; i < av.size(); ++i) {
    word = (word << 1) | (av.data()[i] > 0.0 ? 1U : 0U);
    if (++bits == 64) {
      h = mix(h, word);
      word = 0;
      bits = 0;
    }
  }
  h = mix(h, word);
  a.graph->mix_relu_signature(h);
  return a.graph->push(std::move(out), "relu", {a}, [a](Graph& g, int self) {
    const Matrix& x = g.value(a);
    g.grad_buffer(a.id) += (x.array() > 0.0).select(g.grad_of(self), 0.0).matrix();
  });
}

Var exp(Var a) {
  Matrix out = a.value().array().exp().matrix();
  return a.graph->push(std::move(out), "exp", {a}, [a](Graph& g, int self) {
    g.grad_buffer(a.id) += g.grad_of(self).cwiseProduct(g.value(Var{&g, self}));
  });
}

Var log(Var a) {
  const Matrix& av = a.value();
  if ((av.array() <= 0.0).any()) throw std::domain_error("log: non-positive input " + shape_string(av));
  Matrix out = av.array().log().matrix();
  return a.graph->push(std::move(out), "log", {a}, [a](Graph& g, int self) {
    g.grad_buffer(a.id) += g.grad_of(self).cwiseQuotient(g.value(a));
  });
}

Var softmax_rows(Var a) {
  const Matrix& x = a.value();
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    out.row(r) = (x.row(r).array() - m).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return a.graph->push(std::move(out), "softmax_rows", {a}, [a](Graph& g, int self) {
    const Matrix& y = g.value(Var{&g, self});
    const Matrix& go = g.grad_of(self);
    const Vector dots = go.cwiseProduct(y).rowwise().sum();
    g.grad_buffer(a.id) += y.cwiseProduct((go.colwise() - dots));
  });
}

Var log_softmax_rows(Var a) {
  const Matrix& x = a.value();
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    const double lse = m + std::log((x.row(r).array() - m).exp().sum());
    out.row(r) = (x.row(r).array() - lse).matrix();
  }
  return a.graph->push(std::move(out), "log_softmax_rows", {a}, [a](Graph& g, int self) {
    const Matrix& y = g.value(Var{&g, self});
    const Matrix& go = g.grad_of(self);
    const Vector sums = go.rowwise().sum();
    Matrix p = y.array().exp().matrix();
    g.grad_buffer(a.id) += go - (p.array().colwise() * sums.array()).matrix();
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  const Matrix& xv = x.value();
  const Matrix& gv = gain.value();
  const Matrix& bv = bias.value();
  if (gv.rows() != 1 || gv.cols() != xv.cols() || bv.rows() != 1 || bv.cols() != xv.cols()) {
    throw ShapeError("layer_norm: gain " + shape_string(gv) + " / bias " + shape_string(bv) + " vs input " +
                     shape_string(xv));
  }
  const auto n = static_cast<double>(xv.cols());
  auto xhat = std::make_shared<Matrix>(xv.rows(), xv.cols());
  auto inv_std = std::make_shared<Vector>(xv.rows());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const double mu = xv.row(r).mean();
    const double var = (xv.row(r).array() - mu).square().sum() / n;
    (*inv_std)(r) = 1.0 / std::sqrt(var + eps);
    xhat->row(r) = (xv.row(r).array() - mu) * (*inv_std)(r);
  }
  Matrix out = (xhat->array().rowwise() * gv.row(0).array()).matrix();
  out.rowwise() += bv.row(0);
  return x.graph->push(std::move(out), "layer_norm", {x, gain, bias}, [x, gain, bias, xhat, inv_std](Graph& g, int self) {
    const Matrix& go = g.grad_of(self);
    if (g.requires_grad(gain)) g.grad_buffer(gain.id) += go.cwiseProduct(*xhat).colwise().sum();
    if (g.requires_grad(bias)) g.grad_buffer(bias.id) += go.colwise().sum();
    if (g.requires_grad(x)) {
      const Matrix& gv = g.value(gain);
      Matrix dxhat = (go.array().rowwise() * gv.row(0).array()).matrix();
      const auto n = static_cast<double>(dxhat.cols());
      Matrix& gx = g.grad_buffer(x.id);
      for (Eigen::Index r = 0; r < dxhat.rows(); ++r) {
        const double m1 = dxhat.row(r).sum() / n;
        const double m2 = dxhat.row(r).dot(xhat->row(r)) / n;
        gx.row(r) += (*inv_std)(r) * (dxhat.row(r).array() - m1 - xhat->row(r).array() * m2).matrix();
      }
    }
  });
}

Var embedding(Var table, std::span<const int> ids) {
  const Matrix& t = table.value();
  Matrix out(static_cast<Eigen::Index>(ids.size()), t.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= t.rows()) {
      throw ShapeError("embedding: id " + std::to_string(ids[i]) + " outside table " + shape_string(t));
    }
    out.row(static_cast<Eigen::Index>(i)) = t.row(ids[i]);
  }
  std::vector<int> saved(ids.begin(), ids.end());
  return table.graph->push(std::move(out), "embedding", {table}, [table, saved = std::move(saved)](Graph& g, int self) {
    const Matrix& go = g.grad_of(self);
    Matrix& gt = g.grad_buffer(table.id);
    for (std::size_t i = 0; i < saved.size(); ++i) gt.row(saved[i]) += go.row(static_cast<Eigen::Index>(i));
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  Graph& g = *parts[0].graph;
  const Eigen::Index cols = parts[0].cols();
  Eigen::Index rows = 0;
  for (Var p : parts) {
    if (p.cols() != cols) {
      throw ShapeError("concat_rows: column mismatch " + shape_string(parts[0].value()) + " vs " + shape_string(p.value()));
    }
    rows += p.rows();
  }
  Matrix out(rows, cols);
  Eigen::Index at = 0;
  std::vector<Var> saved(parts.begin(), parts.end());
  for (Var p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return g.push(std::move(out), "concat_rows", std::span<const Var>(saved), [saved](Graph& g, int self) {
    const Matrix& go = g.grad_of(self);
    Eigen::Index at = 0;
    for (Var p : saved) {
      const Eigen::Index r = g.value(p).rows();
      if (g.requires_grad(p)) g.grad_buffer(p.id) += go.middleRows(at, r);
      at += r;
    }
  });
}

Var sum(Var a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return a.graph->push(std::move(out), "sum", {a}, [a](Graph& g, int self) {
    g.grad_buffer(a.id).array() += g.grad_of(self)(0, 0);
  });
}

Var cross_entropy(Var logits, std::span<const int> targets, std::span<const double> weights) {
  const Matrix& z = logits.value();
  if (static_cast<Eigen::Index>(targets.size()) != z.rows()) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " + shape_string(z));
  }
  if (!weights.empty() && weights.size() != targets.size()) {
    throw ShapeError("cross_entropy: weight count differs from target count");
  }
  auto probs = std::make_shared<Matrix>(z.rows(), z.cols());
  double total = 0.0;
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const int t = targets[static_cast<std::size_t>(r)];
    if (t < 0 || t >= z.cols()) throw ShapeError("cross_entropy: target " + std::to_string(t) + " outside vocab");
    const double m = z.row(r).maxCoeff();
    const double lse = m + std::log((z.row(r).array() - m).exp().sum());
    probs->row(r) = (z.row(r).array() - lse).exp().matrix();
    const double w = weights.empty() ? 1.0 : weights[static_cast<std::size_t>(r)];
    total += w * (lse - z(r, t));
  }
  Matrix out(1, 1);
  out(0, 0) = total;
  std::vector<int> tg(targets.begin(), targets.end());
  std::vector<double> wt(weights.begin(), weights.end());
  return logits.graph->push(std::move(out), "cross_entropy", {logits},
                            [logits, probs, tg = std::move(tg), wt = std::move(wt)](Graph& g, int self) {
                              const double go = g.grad_of(self)(0, 0);
                              Matrix& gz = g.grad_buffer(logits.id);
                              for (Eigen::Index r = 0; r < probs->rows(); ++r) {
                                const double w = go * (wt.empty() ? 1.0 : wt[static_cast<std::size_t>(r)]);
                                gz.row(r) += w * probs->row(r);
                                gz(r, tg[static_cast<std::size_t>(r)]) -= w;
                              }
                            });
}

Var kl_divergence_rows(const Matrix& target_probs, Var logits, double floor) {
  const Matrix& z = logits.value();
  require_same_shape("kl_divergence_rows", target_probs, z);
  const double log_floor = std::log(floor);
  auto q = std::make_shared<Matrix>(z.rows(), z.cols());
  auto live = std::make_shared<Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(z.rows(), z.cols());
  auto p = std::make_shared<Matrix>(target_probs);
  double total = 0.0;
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const double m = z.row(r).maxCoeff();
    const double lse = m + std::log((z.row(r).array() - m).exp().sum());
    for (Eigen::Index c = 0; c < z.cols(); ++c) {
      const double logq = z(r, c) - lse;
      (*q)(r, c) = std::exp(logq);
      const bool unfloored = logq > log_floor;
      (*live)(r, c) = unfloored;
      const double pv = target_probs(r, c);
      if (pv > 0.0) total += pv * (std::log(pv) - (unfloored ? logq : log_floor));
    }
  }
  Matrix out(1, 1);
  out(0, 0) = total;
  return logits.graph->push(std::move(out), "kl_divergence_rows", {logits}, [logits, q, live, p](Graph& g, int self) {
    const double go = g.grad_of(self)(0, 0);
    Matrix& gz = g.grad_buffer(logits.id);
    for (Eigen::Index r = 0; r < q->rows(); ++r) {
      double mass = 0.0;
      for (Eigen::Index c = 0; c < q->cols(); ++c) {
        if ((*live)(r, c)) mass += (*p)(r, c);
      }
      for (Eigen::Index c = 0; c < q->cols(); ++c) {
        const double pc = (*live)(r, c) ? (*p)(r, c) : 0.0;
        gz(r, c) += go * ((*q)(r, c) * mass - pc);
      }
    }
  });
}

Var attention(Var q, Var k, Var v, const AttentionLayout& layout, std::vector<Matrix>* probs_out) {
  const Matrix& qv = q.value();
  const Matrix& kv = k.value();
  const Matrix& vv = v.value();
  if (qv.cols() != kv.cols() || kv.cols() != vv.cols() || kv.rows() != vv.rows()) {
    throw ShapeError("attention: q " + shape_string(qv) + " k " + shape_string(kv) + " v " + shape_string(vv));
  }
  const int heads = layout.n_heads;
  if (heads < 1 || qv.cols() % heads != 0) throw ShapeError("attention: width not divisible by head count");
  if (layout.key_allowed.size() != 0 && layout.key_allowed.size() != kv.rows()) {
    throw ShapeError("attention: key mask length differs from key count");
  }
  for (const AttentionSegment& seg : layout.segments) {
    if (seg.q_begin < 0 || seg.q_begin + seg.q_len > qv.rows() || seg.k_begin < 0 || seg.k_begin + seg.k_len > kv.rows()) {
      throw ShapeError("attention: segment outside q " + shape_string(qv) + " / k " + shape_string(kv));
    }
    if (layout.causal && seg.q_len != seg.k_len) throw ShapeError("attention: causal segment with q_len != k_len");
  }
  const Eigen::Index dh = qv.cols() / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto n_heads = static_cast<std::size_t>(heads);

  // probs[s * heads + h] is [q_len x k_len] for segment s, head h.
  auto probs = std::make_shared<std::vector<Matrix>>(layout.segments.size() * n_heads);
  Matrix out = Matrix::Zero(qv.rows(), qv.cols());
  if (probs_out) probs_out->assign(n_heads, Matrix::Zero(qv.rows(), kv.rows()));
  for (std::size_t s = 0; s < layout.segments.size(); ++s) {
    const AttentionSegment& seg = layout.segments[s];
    for (int h = 0; h < heads; ++h) {
      const Matrix scores =
          qv.block(seg.q_begin, h * dh, seg.q_len, dh) * kv.block(seg.k_begin, h * dh, seg.k_len, dh).transpose() * inv_sqrt;
      Matrix& p = (*probs)[s * n_heads + static_cast<std::size_t>(h)];
      p = Matrix::Zero(seg.q_len, seg.k_len);
      for (Eigen::Index i = 0; i < seg.q_len; ++i) {
        auto admissible = [&](Eigen::Index j) {
          return (layout.key_allowed.size() == 0 || layout.key_allowed(seg.k_begin + j)) && (!layout.causal || j <= i);
        };
        double m = -std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j < seg.k_len; ++j) {
          if (admissible(j)) m = std::max(m, scores(i, j));
        }
        if (!std::isfinite(m)) throw ShapeError("attention: query row with no admissible key");
        // Inadmissible keys behave as a -inf score: weight exactly 0.
        double z = 0.0;
        for (Eigen::Index j = 0; j < seg.k_len; ++j) {
          if (admissible(j)) {
            p(i, j) = std::exp(scores(i, j) - m);
            z += p(i, j);
          }
        }
        p.row(i) /= z;
      }
      out.block(seg.q_begin, h * dh, seg.q_len, dh).noalias() = p * vv.block(seg.k_begin, h * dh, seg.k_len, dh);
      if (probs_out) (*probs_out)[static_cast<std::size_t>(h)].block(seg.q_begin, seg.k_begin, seg.q_len, seg.k_len) = p;
    }
  }
  auto segments = std::make_shared<std::vector<AttentionSegment>>(layout.segments);
  return q.graph->push(std::move(out), "attention", {q, k, v}, [q, k, v, segments, probs, heads, dh, inv_sqrt](Graph& g, int self) {
    const Matrix& go = g.grad_of(self);
    const Matrix& qv = g.value(q);
    const Matrix& kv = g.value(k);
    const Matrix& vv = g.value(v);
    Matrix* dq = g.requires_grad(q) ? &g.grad_buffer(q.id) : nullptr;
    Matrix* dk = g.requires_grad(k) ? &g.grad_buffer(k.id) : nullptr;
    Matrix* dv = g.requires_grad(v) ? &g.grad_buffer(v.id) : nullptr;
    const auto n_heads = static_cast<std::size_t>(heads);
    for (std::size_t s = 0; s < segments->size(); ++s) {
      const AttentionSegment& seg = (*segments)[s];
      for (int h = 0; h < heads; ++h) {
        const Matrix& p = (*probs)[s * n_heads + static_cast<std::size_t>(h)];
        const Matrix d_out = go.block(seg.q_begin, h * dh, seg.q_len, dh);
        if (dv) dv->block(seg.k_begin, h * dh, seg.k_len, dh).noalias() += p.transpose() * d_out;
        if (!dq && !dk) continue;
        const Matrix dp = d_out * vv.block(seg.k_begin, h * dh, seg.k_len, dh).transpose();
        const Vector dots = dp.cwiseProduct(p).rowwise().sum();
        const Matrix ds = p.cwiseProduct(dp.colwise() - dots) * inv_sqrt;
        if (dq) dq->block(seg.q_begin, h * dh, seg.q_len, dh).noalias() += ds * kv.block(seg.k_begin, h * dh, seg.k_len, dh);
        if (dk) dk->block(seg.k_begin, h * dh, seg.k_len, dh).noalias() += ds.transpose() * qv.block(seg.q_begin, h * dh, seg.q_len, dh);
      }
    }
  });
}

// ---- gradient checking -----------------------------------------------------

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

double grad_check(const std::function<Var(Graph&, Var)>& op, const Matrix& point, double eps) {
  return grad_check(op, point, GradCheckOptions{eps, 0});
}

double grad_check(const std::function<Var(Graph&, Var)>& op, const Matrix& point, const GradCheckOptions& opts) {
  Graph g;
  Var x = g.leaf(point, true);
  Var y = op(g, x);
  g.backward(y);
  const Matrix* gp = g.grad(x);
  const Matrix analytic = gp ? *gp : Matrix::Zero(point.rows(), point.cols());
  const std::uint64_t signature = g.relu_signature();

  auto evaluate = [&](const Matrix& at, bool& same_piece) {
    Graph h;
    Var hx = h.leaf(at, false);
    const double value = op(h, hx).scalar();
    same_piece = same_piece && h.relu_signature() == signature;
    return value;
  };

  const auto n = static_cast<std::size_t>(point.size());
  const std::size_t stride =
      (opts.max_coordinates == 0 || opts.max_coordinates >= n) ? 1 : (n + opts.max_coordinates - 1) / opts.max_coordinates;
  double worst = 0.0;
  Matrix probe = point;
  for (std::size_t i = 0; i < n; i += stride) {
    const double orig = probe.data()[i];
    bool same_piece = true;
    probe.data()[i] = orig + opts.eps;
    const double up = evaluate(probe, same_piece);
    probe.data()[i] = orig - opts.eps;
    const double down = evaluate(probe, same_piece);
    probe.data()[i] = orig;
    if (!same_piece) continue;
    const double numeric = (up - down) / (2.0 * opts.eps);
    worst = std::max(worst, relative_error(analytic.data()[i], numeric));
  }
  return worst;
}

}  // namespace zerommt
