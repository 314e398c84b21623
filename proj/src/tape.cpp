#include "hierattn/tape.hpp"

#include <cmath>
#include <numbers>

#include "hierattn/errors.hpp"

namespace hierattn {

const Tensor& Var::value() const { return tape_->value(id_); }
const Tensor& Var::grad() const { return tape_->grad(id_); }
bool Var::has_grad() const { return tape_->has_grad(id_); }

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(const Parameter& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var(this, it->second);
  Node n;
  n.value = p.value;
  n.param = &p;
  n.requires_grad = track_gradients_;
  nodes_.push_back(std::move(n));
  const std::size_t id = nodes_.size() - 1;
  param_nodes_.emplace(&p, id);
  param_order_.push_back(id);
  return Var(this, id);
}

Var Tape::record(Tensor value, std::vector<std::size_t> parents, BackwardFn backward) {
  if (backward_done_) throw ContractError("cannot record on a tape after backward");
  Node n;
  n.value = std::move(value);
  for (auto p : parents) n.requires_grad = n.requires_grad || nodes_[p].requires_grad;
  if (n.requires_grad) {
    n.parents = std::move(parents);
    n.backward = std::move(backward);
  }
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

const Tensor& Tape::grad(std::size_t id) const {
  if (nodes_[id].grad.empty()) throw ContractError("gradient not populated; run backward first");
  return nodes_[id].grad;
}

void Tape::accumulate(std::size_t id, const Tensor& g) {
  if (Tensor* buf = grad_buffer(id)) add_inplace(*buf, g);
}

Tensor* Tape::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return nullptr;
  if (n.grad.empty()) n.grad = Tensor(n.value.shape());
  return &n.grad;
}

void Tape::backward(Var root) {
  if (root.valid() && &root.tape() != this) throw ContractError("backward: root belongs to a different tape");
  if (!root.valid()) throw ContractError("backward: detached root");
  if (backward_done_) throw ContractError("backward called twice without reset_gradients()");
  const std::size_t r = root.id();
  if (nodes_[r].value.size() != 1) {
    throw DimensionError("backward: root must be a scalar, got " + shape_string(nodes_[r].value.shape()));
  }
  if (!nodes_[r].requires_grad) throw ContractError("backward: root does not depend on any parameter");
  backward_done_ = true;

  std::vector<char> reachable(r + 1, 0);
  reachable[r] = 1;
  nodes_[r].grad = Tensor(nodes_[r].value.shape(), 1.0);
  for (std::size_t i = r + 1; i-- > 0;) {
    if (!reachable[i]) continue;
    Node& n = nodes_[i];
    if (!n.requires_grad) continue;
    if (n.grad.empty()) n.grad = Tensor(n.value.shape());
    for (auto p : n.parents) reachable[p] = 1;
    if (n.backward) n.backward(*this, n.grad);
  }
}

void Tape::reset_gradients() {
  for (auto& n : nodes_) n.grad = Tensor();
  backward_done_ = false;
}

void Tape::for_each_parameter_grad(const std::function<void(const Parameter&, const Tensor&)>& fn) const {
  for (auto id : param_order_) {
    const Node& n = nodes_[id];
    if (!n.grad.empty()) fn(*n.param, n.grad);
  }
}

// ---- operations -------------------------------------------------------------

namespace {

void same_tape(Var a, Var b) {
  if (&a.tape() != &b.tape()) throw ContractError("operands recorded on different tapes");
}

}  // namespace

Var matmul(Var a, Var b) {
  same_tape(a, b);
  Tape& t = a.tape();
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(hierattn::matmul(a.value(), b.value()), {ia, ib}, [ia, ib](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(ia)) tp.accumulate(ia, hierattn::matmul_nt(g, tp.value(ib)));
    if (tp.requires_grad(ib)) tp.accumulate(ib, hierattn::matmul_tn(tp.value(ia), g));
  });
}

Var matmul_nt(Var a, Var b) {
  same_tape(a, b);
  Tape& t = a.tape();
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(hierattn::matmul_nt(a.value(), b.value()), {ia, ib}, [ia, ib](Tape& tp, const Tensor& g) {
    // out = a bᵀ: da = g b, db = gᵀ a
    if (tp.requires_grad(ia)) tp.accumulate(ia, hierattn::matmul(g, tp.value(ib)));
    if (tp.requires_grad(ib)) tp.accumulate(ib, hierattn::matmul_tn(g, tp.value(ia)));
  });
}

Var add(Var a, Var b) {
  same_tape(a, b);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(hierattn::add(a.value(), b.value()), {ia, ib}, [ia, ib](Tape& tp, const Tensor& g) {
    tp.accumulate(ia, g);
    tp.accumulate(ib, g);
  });
}

Var add_row(Var x, Var bias) {
  same_tape(x, bias);
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  if (bv.size() != xv.cols()) {
    throw DimensionError("add_row: bias " + shape_string(bv.shape()) + " does not match " + shape_string(xv.shape()));
  }
  Tensor out = xv;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += bv[c];
  }
  const std::size_t ix = x.id(), ib = bias.id();
  return x.tape().record(std::move(out), {ix, ib}, [ix, ib](Tape& tp, const Tensor& g) {
    tp.accumulate(ix, g);
    if (Tensor* gb = tp.grad_buffer(ib)) {
      for (std::size_t r = 0; r < g.rows(); ++r) {
        auto row = g.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) (*gb)[c] += row[c];
      }
    }
  });
}

Var hadamard(Var a, Var b) {
  same_tape(a, b);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(hierattn::hadamard(a.value(), b.value()), {ia, ib}, [ia, ib](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(ia)) tp.accumulate(ia, hierattn::hadamard(g, tp.value(ib)));
    if (tp.requires_grad(ib)) tp.accumulate(ib, hierattn::hadamard(g, tp.value(ia)));
  });
}

Var scale(Var x, double s) {
  const std::size_t ix = x.id();
  return x.tape().record(scaled(x.value(), s), {ix},
                         [ix, s](Tape& tp, const Tensor& g) { tp.accumulate(ix, scaled(g, s)); });
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  const std::size_t ix = x.id();
  return x.tape().record(Tensor({1, 1}, s), {ix}, [ix](Tape& tp, const Tensor& g) {
    if (Tensor* gx = tp.grad_buffer(ix)) {
      for (double& v : gx->data()) v += g[0];
    }
  });
}

Var softmax_rows(Var x) {
  const std::size_t ix = x.id();
  Tensor y = hierattn::softmax_rows(x.value());
  const std::size_t iy = x.tape().size();
  return x.tape().record(std::move(y), {ix}, [ix, iy](Tape& tp, const Tensor& g) {
    Tensor* gx = tp.grad_buffer(ix);
    if (!gx) return;
    const Tensor& yv = tp.value(iy);
    for (std::size_t r = 0; r < yv.rows(); ++r) {
      auto yr = yv.row(r);
      auto gr = g.row(r);
      auto out = gx->row(r);
      double dot = 0.0;
      for (std::size_t c = 0; c < yr.size(); ++c) dot += yr[c] * gr[c];
      for (std::size_t c = 0; c < yr.size(); ++c) out[c] += yr[c] * (gr[c] - dot);
    }
  });
}

Var gelu(Var x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double a = 0.044715;
  Tensor y = x.value();
  for (double& v : y.data()) v = 0.5 * v * (1.0 + std::tanh(k * (v + a * v * v * v)));
  const std::size_t ix = x.id();
  return x.tape().record(std::move(y), {ix}, [ix](Tape& tp, const Tensor& g) {
    Tensor* gx = tp.grad_buffer(ix);
    if (!gx) return;
    const Tensor& xv = tp.value(ix);
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const double v = xv[i];
      const double t = std::tanh(k * (v + a * v * v * v));
      const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * k * (1.0 + 3.0 * a * v * v);
      (*gx)[i] += g[i] * d;
    }
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  same_tape(x, gamma);
  same_tape(x, beta);
  const Tensor& xv = x.value();
  const std::size_t n = xv.cols();
  if (gamma.value().size() != n || beta.value().size() != n) {
    throw DimensionError("layer_norm: affine parameters do not match width " + std::to_string(n));
  }
  Tensor xhat(xv.shape());
  std::vector<double> inv_std(xv.rows());
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    auto in = xv.row(r);
    double mean = 0.0;
    for (double v : in) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : in) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    auto out = xhat.row(r);
    for (std::size_t c = 0; c < n; ++c) out[c] = (in[c] - mean) * inv_std[r];
  }
  Tensor y = xhat;
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  for (std::size_t r = 0; r < y.rows(); ++r) {
    auto row = y.row(r);
    for (std::size_t c = 0; c < n; ++c) row[c] = row[c] * gv[c] + bv[c];
  }
  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.tape().record(
      std::move(y), {ix, ig, ib},
      [ix, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& tp, const Tensor& g) {
        const std::size_t n = xhat.cols();
        const Tensor& gv = tp.value(ig);
        if (Tensor* gg = tp.grad_buffer(ig)) {
          for (std::size_t r = 0; r < g.rows(); ++r)
            for (std::size_t c = 0; c < n; ++c) (*gg)[c] += g(r, c) * xhat(r, c);
        }
        if (Tensor* gb = tp.grad_buffer(ib)) {
          for (std::size_t r = 0; r < g.rows(); ++r)
            for (std::size_t c = 0; c < n; ++c) (*gb)[c] += g(r, c);
        }
        if (Tensor* gx = tp.grad_buffer(ix)) {
          const double inv_n = 1.0 / static_cast<double>(n);
          for (std::size_t r = 0; r < g.rows(); ++r) {
            double sum_dy = 0.0, sum_dy_xhat = 0.0;
            for (std::size_t c = 0; c < n; ++c) {
              const double dy = g(r, c) * gv[c];
              sum_dy += dy;
              sum_dy_xhat += dy * xhat(r, c);
            }
            for (std::size_t c = 0; c < n; ++c) {
              const double dy = g(r, c) * gv[c];
              (*gx)(r, c) += inv_std[r] * (dy - inv_n * sum_dy - xhat(r, c) * inv_n * sum_dy_xhat);
            }
          }
        }
      });
}

Var slice_rows(Var x, std::size_t start, std::size_t count) {
  const Tensor& xv = x.value();
  if (start + count > xv.rows()) throw DimensionError("slice_rows out of range for " + shape_string(xv.shape()));
  const std::size_t c = xv.cols();
  Tensor out({count, c});
  std::copy_n(xv.data().begin() + static_cast<std::ptrdiff_t>(start * c), count * c, out.data().begin());
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix, start](Tape& tp, const Tensor& g) {
    if (Tensor* gx = tp.grad_buffer(ix)) {
      auto dst = gx->data().subspan(start * g.cols(), g.size());
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    }
  });
}

Var slice_cols(Var x, std::size_t start, std::size_t count) {
  const Tensor& xv = x.value();
  if (start + count > xv.cols()) throw DimensionError("slice_cols out of range for " + shape_string(xv.shape()));
  Tensor out({xv.rows(), count});
  for (std::size_t r = 0; r < xv.rows(); ++r)
    for (std::size_t c = 0; c < count; ++c) out(r, c) = xv(r, start + c);
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix, start](Tape& tp, const Tensor& g) {
    if (Tensor* gx = tp.grad_buffer(ix)) {
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) (*gx)(r, start + c) += g(r, c);
    }
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t c = parts[0].cols();
  std::size_t total = 0;
  std::vector<std::size_t> ids;
  for (const Var& p : parts) {
    same_tape(parts[0], p);
    if (p.cols() != c) throw DimensionError("concat_rows: width mismatch " + shape_string(p.shape()));
    total += p.rows();
    ids.push_back(p.id());
  }
  Tensor out({total, c});
  std::size_t off = 0;
  for (const Var& p : parts) {
    std::copy(p.value().data().begin(), p.value().data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(off));
    off += p.value().size();
  }
  auto ids_copy = ids;
  return parts[0].tape().record(std::move(out), std::move(ids), [ids = std::move(ids_copy)](Tape& tp, const Tensor& g) {
    std::size_t off = 0;
    for (auto id : ids) {
      const std::size_t n = tp.value(id).size();
      if (Tensor* gx = tp.grad_buffer(id)) {
        for (std::size_t i = 0; i < n; ++i) (*gx)[i] += g[off + i];
      }
      off += n;
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t r = parts[0].rows();
  std::size_t total = 0;
  std::vector<std::size_t> ids;
  for (const Var& p : parts) {
    same_tape(parts[0], p);
    if (p.rows() != r) throw DimensionError("concat_cols: height mismatch " + shape_string(p.shape()));
    total += p.cols();
    ids.push_back(p.id());
  }
  Tensor out({r, total});
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < v.cols(); ++j) out(i, off + j) = v(i, j);
    off += v.cols();
  }
  auto ids_copy = ids;
  return parts[0].tape().record(std::move(out), std::move(ids), [ids = std::move(ids_copy)](Tape& tp, const Tensor& g) {
    std::size_t off = 0;
    for (auto id : ids) {
      const std::size_t w = tp.value(id).cols();
      if (Tensor* gx = tp.grad_buffer(id)) {
        for (std::size_t i = 0; i < g.rows(); ++i)
          for (std::size_t j = 0; j < w; ++j) (*gx)(i, j) += g(i, off + j);
      }
      off += w;
    }
  });
}

Var gather_rows(Var table, std::span<const std::size_t> indices) {
  const Tensor& tv = table.value();
  const std::size_t c = tv.cols();
  Tensor out({indices.size(), c});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= tv.rows()) {
      throw DimensionError("gather_rows: index " + std::to_string(indices[i]) + " outside table " +
                           shape_string(tv.shape()));
    }
    auto src = tv.row(indices[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  const std::size_t it = table.id();
  return table.tape().record(std::move(out), {it},
                             [it, idx = std::vector<std::size_t>(indices.begin(), indices.end())](Tape& tp,
                                                                                                  const Tensor& g) {
                               if (Tensor* gt = tp.grad_buffer(it)) {
                                 for (std::size_t i = 0; i < idx.size(); ++i) {
                                   auto dst = gt->row(idx[i]);
                                   auto src = g.row(i);
                                   for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
                                 }
                               }
                             });
}

Var element(Var x, std::size_t r, std::size_t c) {
  const Tensor& xv = x.value();
  if (r >= xv.rows() || c >= xv.cols()) throw DimensionError("element index outside " + shape_string(xv.shape()));
  const std::size_t ix = x.id();
  return x.tape().record(Tensor({1, 1}, xv(r, c)), {ix}, [ix, r, c](Tape& tp, const Tensor& g) {
    if (Tensor* gx = tp.grad_buffer(ix)) (*gx)(r, c) += g[0];
  });
}

Var cross_entropy(Var logits, std::span<const int> labels) {
  const Tensor& lv = logits.value();
  if (labels.size() != lv.rows()) throw DimensionError("cross_entropy: one label per logit row required");
  Tensor probs = hierattn::softmax_rows(lv);
  double loss = 0.0;
  for (std::size_t r = 0; r < lv.rows(); ++r) {
    const int y = labels[r];
    if (y < 0 || static_cast<std::size_t>(y) >= lv.cols()) throw DimensionError("cross_entropy: label out of range");
    loss -= std::log(std::max(probs(r, static_cast<std::size_t>(y)), 1e-300));
  }
  const double m = static_cast<double>(lv.rows());
  loss /= m;
  const std::size_t il = logits.id();
  return logits.tape().record(
      Tensor({1, 1}, loss), {il},
      [il, m, probs = std::move(probs), ys = std::vector<int>(labels.begin(), labels.end())](Tape& tp,
                                                                                             const Tensor& g) {
        Tensor* gl = tp.grad_buffer(il);
        if (!gl) return;
        for (std::size_t r = 0; r < probs.rows(); ++r) {
          for (std::size_t c = 0; c < probs.cols(); ++c) {
            const double onehot = static_cast<int>(c) == ys[r] ? 1.0 : 0.0;
            (*gl)(r, c) += g[0] * (probs(r, c) - onehot) / m;
          }
        }
      });
}

Var dropout(Var x, double rate, std::mt19937_64& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw ContractError("dropout rate must be below 1");
  std::bernoulli_distribution keep(1.0 - rate);
  Tensor mask(x.shape());
  const double inv = 1.0 / (1.0 - rate);
  for (double& m : mask.data()) m = keep(rng) ? inv : 0.0;
  Tensor y = hierattn::hadamard(x.value(), mask);
  const std::size_t ix = x.id();
  return x.tape().record(std::move(y), {ix}, [ix, mask = std::move(mask)](Tape& tp, const Tensor& g) {
    tp.accumulate(ix, hierattn::hadamard(g, mask));
  });
}

}  // namespace hierattn
