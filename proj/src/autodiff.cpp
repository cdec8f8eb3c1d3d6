#include "sedx/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <unordered_map>

#include "sedx/errors.hpp"
#include "sedx/kernels.hpp"

namespace sedx {

const DenseArray& Var::value() const { return tape_->value(id_); }
const DenseArray& Var::grad() const { return tape_->grad(id_); }

Adjoints::Adjoints(const Tape& tape)
    : tape_(tape), arrays_(tape.size()), live_(tape.size(), 0) {}

bool Adjoints::wants(std::size_t id) const { return tape_.requires_grad(id); }

DenseArray& Adjoints::at(std::size_t id) {
  if (!live_[id]) {
    arrays_[id] = DenseArray(tape_.value(id).shape(), 0.0);
    live_[id] = 1;
  }
  return arrays_[id];
}

Var Tape::parameter(DenseArray value) {
  Node n;
  n.value = std::move(value);
  n.role = Role::kParameter;
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(DenseArray value) {
  Node n;
  n.value = std::move(value);
  n.role = Role::kConstant;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(DenseArray value, std::initializer_list<Var> parents, BackwardFn backward) {
  return record(std::move(value), std::span<const Var>(parents.begin(), parents.size()),
                std::move(backward));
}

Var Tape::record(DenseArray value, std::span<const Var> parents, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  for (const Var& p : parents) {
    if (p.tape() != this) throw ContractError("operands belong to different tapes");
    n.requires_grad = n.requires_grad || nodes_[p.id()].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

const DenseArray& Tape::grad(std::size_t id) const {
  const Node& n = nodes_[id];
  if (!n.grad_ready) {
    n.grad = DenseArray(n.value.shape(), 0.0);
    n.grad_ready = true;
  }
  return n.grad;
}

void Tape::backward(Var loss) {
  if (loss.tape() != this) throw ContractError("backward: loss belongs to another tape");
  if (loss.value().size() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " +
                        shape_string(loss.value().shape()));
  }
  if (!nodes_[loss.id()].requires_grad) return;
  Adjoints adj(*this);
  adj.at(loss.id()).fill(1.0);
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    if (!adj.live(id)) continue;
    Node& n = nodes_[id];
    if (n.backward) n.backward(*this, id, adj.at(id), adj);
    DenseArray g = adj.take(id);
    if (!n.grad_ready) {
      n.grad = std::move(g);
      n.grad_ready = true;
    } else {
      auto dst = n.grad.data();
      auto src = g.data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    }
  }
}

void Tape::zero_grad() {
  for (Node& n : nodes_) {
    n.grad = DenseArray();
    n.grad_ready = false;
  }
}

namespace {

void require_matrix(const DenseArray& a, const char* op) {
  if (a.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_string(a.shape()));
  }
}

// Unary elementwise op with derivative expressed through input x and output y.
template <typename Fwd, typename Deriv>
Var unary(Var x, Fwd fwd, Deriv deriv) {
  const DenseArray& xv = x.value();
  DenseArray out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  const std::size_t xid = x.id();
  return x.tape()->record(
      std::move(out), {x},
      [xid, deriv](const Tape& t, std::size_t self, const DenseArray& g, Adjoints& adj) {
        if (!adj.wants(xid)) return;
        const DenseArray& xv = t.value(xid);
        const DenseArray& yv = t.value(self);
        DenseArray& dx = adj.at(xid);
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * deriv(xv[i], yv[i]);
      });
}

// [outer, axis, inner] view for reductions.
struct AxisView {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
  Shape reduced;
};

AxisView axis_view(const Shape& s, std::size_t axis, const char* op) {
  if (axis >= s.size()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                         " invalid for shape " + shape_string(s));
  }
  AxisView v;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i < axis) v.outer *= s[i];
    if (i > axis) v.inner *= s[i];
    if (i != axis) v.reduced.push_back(s[i]);
  }
  v.len = s[axis];
  return v;
}

Var axis_sum(Var x, std::size_t axis, double factor, const char* op) {
  const DenseArray& xv = x.value();
  const AxisView v = axis_view(xv.shape(), axis, op);
  DenseArray out(v.reduced);
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t l = 0; l < v.len; ++l) {
      for (std::size_t i = 0; i < v.inner; ++i) {
        out[o * v.inner + i] += xv[(o * v.len + l) * v.inner + i];
      }
    }
  }
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= factor;
  const std::size_t xid = x.id();
  return x.tape()->record(
      std::move(out), {x},
      [xid, v, factor](const Tape&, std::size_t, const DenseArray& g, Adjoints& adj) {
        if (!adj.wants(xid)) return;
        DenseArray& dx = adj.at(xid);
        for (std::size_t o = 0; o < v.outer; ++o) {
          for (std::size_t l = 0; l < v.len; ++l) {
            for (std::size_t i = 0; i < v.inner; ++i) {
              dx[(o * v.len + l) * v.inner + i] += factor * g[o * v.inner + i];
            }
          }
        }
      });
}

Var full_sum(Var x, double factor) {
  const DenseArray& xv = x.value();
  double acc = 0.0;
  for (double e : xv.data()) acc += e;
  const std::size_t xid = x.id();
  return x.tape()->record(
      DenseArray::scalar(acc * factor), {x},
      [xid, factor](const Tape&, std::size_t, const DenseArray& g, Adjoints& adj) {
        if (!adj.wants(xid)) return;
        DenseArray& dx = adj.at(xid);
        const double gv = g[0] * factor;
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += gv;
      });
}

template <typename Combine, typename DA, typename DB>
Var binary(Var a, Var b, const char* op, Combine combine, DA da, DB db) {
  require_same_shape(a.value(), b.value(), op);
  const DenseArray& av = a.value();
  const DenseArray& bv = b.value();
  DenseArray out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = combine(av[i], bv[i]);
  const std::size_t aid = a.id();
  const std::size_t bid = b.id();
  return a.tape()->record(
      std::move(out), {a, b},
      [aid, bid, da, db](const Tape& t, std::size_t, const DenseArray& g, Adjoints& adj) {
        const DenseArray& av = t.value(aid);
        const DenseArray& bv = t.value(bid);
        if (adj.wants(aid)) {
          DenseArray& d = adj.at(aid);
          for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * da(av[i], bv[i]);
        }
        if (adj.wants(bid)) {
          DenseArray& d = adj.at(bid);
          for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * db(av[i], bv[i]);
        }
      });
}

}  // namespace

Var matmul(Var a, Var b) {
  const DenseArray& av = a.value();
  const DenseArray& bv = b.value();
  require_matrix(av, "matmul");
  require_matrix(bv, "matmul");
  if (av.cols() != bv.rows()) {
    throw DimensionError("matmul: inner dimensions disagree for " + shape_string(av.shape()) +
                         " and " + shape_string(bv.shape()));
  }
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  DenseArray out(Shape{m, n});
  kernels::gemm(false, false, m, n, k, av.ptr(), bv.ptr(), out.ptr(), false);
  const std::size_t aid = a.id(), bid = b.id();
  return a.tape()->record(
      std::move(out), {a, b},
      [aid, bid, m, k, n](const Tape& t, std::size_t, const DenseArray& g, Adjoints& adj) {
        if (adj.wants(aid)) {
          kernels::gemm(false, true, m, k, n, g.ptr(), t.value(bid).ptr(), adj.at(aid).ptr(), true);
        }
        if (adj.wants(bid)) {
          kernels::gemm(true, false, k, n, m, t.value(aid).ptr(), g.ptr(), adj.at(bid).ptr(), true);
        }
      });
}

Var transpose(Var a) {
  const DenseArray& av = a.value();
  require_matrix(av, "transpose");
  const std::size_t r = av.rows(), c = av.cols();
  DenseArray out(Shape{c, r});
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out(j, i) = av(i, j);
  }
  const std::size_t aid = a.id();
  return a.tape()->record(std::move(out), {a},
                          [aid, r, c](const Tape&, std::size_t, const DenseArray& g, Adjoints& adj) {
                            if (!adj.wants(aid)) return;
                            DenseArray& d = adj.at(aid);
                            for (std::size_t i = 0; i < r; ++i) {
                              for (std::size_t j = 0; j < c; ++j) d(i, j) += g(j, i);
                            }
                          });
}

Var tanh(Var x) {
  return unary(
      x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Var exp(Var x) {
  return unary(
      x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Var log(Var x) {
  for (double v : x.value().data()) {
    if (!(v > 0.0)) throw DomainError("log: non-positive input " + std::to_string(v));
  }
  return unary(
      x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Var negate(Var x) {
  return unary(
      x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}

Var sigmoid(Var x) {
  return unary(
      x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double, double y) { return y * (1.0 - y); });
}

Var scale(Var x, double s) {
  return unary(
      x, [s](double v) { return s * v; }, [s](double, double) { return s; });
}

Var add(Var a, Var b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Var sub(Var a, Var b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Var mul(Var a, Var b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Var sum(Var x) { return full_sum(x, 1.0); }
Var mean(Var x) { return full_sum(x, 1.0 / static_cast<double>(x.value().size())); }
Var sum(Var x, std::size_t axis) { return axis_sum(x, axis, 1.0, "sum"); }

Var mean(Var x, std::size_t axis) {
  const Shape& s = x.value().shape();
  if (axis >= s.size()) {
    throw DimensionError("mean: axis " + std::to_string(axis) + " invalid for shape " +
                         shape_string(s));
  }
  return axis_sum(x, axis, 1.0 / static_cast<double>(s[axis]), "mean");
}

Var max_over_axis(Var x, std::size_t axis) {
  const DenseArray& xv = x.value();
  const AxisView v = axis_view(xv.shape(), axis, "max_over_axis");
  if (v.len == 0) throw DimensionError("max_over_axis: empty axis");
  DenseArray out(v.reduced);
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.inner; ++i) {
      std::size_t best = (o * v.len) * v.inner + i;
      for (std::size_t l = 1; l < v.len; ++l) {
        const std::size_t at = (o * v.len + l) * v.inner + i;
        if (xv[at] > xv[best]) best = at;
      }
      out[o * v.inner + i] = xv[best];
      argmax[o * v.inner + i] = best;
    }
  }
  const std::size_t xid = x.id();
  return x.tape()->record(
      std::move(out), {x},
      [xid, argmax = std::move(argmax)](const Tape&, std::size_t, const DenseArray& g,
                                        Adjoints& adj) {
        if (!adj.wants(xid)) return;
        DenseArray& dx = adj.at(xid);
        for (std::size_t i = 0; i < argmax.size(); ++i) dx[argmax[i]] += g[i];
      });
}

Var add_bias(Var x, Var bias) {
  const DenseArray& xv = x.value();
  const DenseArray& bv = bias.value();
  require_matrix(xv, "add_bias");
  const std::size_t m = xv.rows(), n = xv.cols();
  if (bv.size() != n) {
    throw DimensionError("add_bias: bias " + shape_string(bv.shape()) + " does not fit " +
                         shape_string(xv.shape()));
  }
  DenseArray out(xv.shape());
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out(i, j) = xv(i, j) + bv[j];
  }
  const std::size_t xid = x.id(), bid = bias.id();
  return x.tape()->record(
      std::move(out), {x, bias},
      [xid, bid, m, n](const Tape&, std::size_t, const DenseArray& g, Adjoints& adj) {
        if (adj.wants(xid)) {
          DenseArray& dx = adj.at(xid);
          for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
        }
        if (adj.wants(bid)) {
          DenseArray& db = adj.at(bid);
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) db[j] += g(i, j);
          }
        }
      });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_cols: no parts");
  const std::size_t m = parts[0].value().rows();
  std::vector<std::size_t> offsets;
  std::size_t total = 0;
  for (const Var& p : parts) {
    require_matrix(p.value(), "concat_cols");
    if (p.value().rows() != m) {
      throw DimensionError("concat_cols: row mismatch " + shape_string(parts[0].shape()) + " vs " +
                           shape_string(p.shape()));
    }
    offsets.push_back(total);
    total += p.value().cols();
  }
  DenseArray out(Shape{m, total});
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const DenseArray& pv = parts[k].value();
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < pv.cols(); ++j) out(i, offsets[k] + j) = pv(i, j);
    }
  }
  std::vector<std::size_t> ids;
  for (const Var& p : parts) ids.push_back(p.id());
  return parts[0].tape()->record(
      std::move(out), parts,
      [ids, offsets, m](const Tape& t, std::size_t, const DenseArray& g, Adjoints& adj) {
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (!adj.wants(ids[k])) continue;
          DenseArray& d = adj.at(ids[k]);
          const std::size_t c = t.value(ids[k]).cols();
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < c; ++j) d(i, j) += g(i, offsets[k] + j);
          }
        }
      });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_rows: no parts");
  const DenseArray& first = parts[0].value();
  const std::size_t n = first.rank() == 1 ? first.dim(0) : first.cols();
  std::size_t rows = 0;
  for (const Var& p : parts) {
    const DenseArray& pv = p.value();
    const std::size_t pc = pv.rank() == 1 ? pv.dim(0) : (pv.rank() == 2 ? pv.cols() : 0);
    if (pv.rank() > 2 || pv.rank() == 0 || pc != n) {
      throw DimensionError("concat_rows: column mismatch " + shape_string(first.shape()) +
                           " vs " + shape_string(pv.shape()));
    }
    rows += pv.size() / n;
  }
  std::vector<double> data;
  data.reserve(rows * n);
  for (const Var& p : parts) {
    auto d = p.value().data();
    data.insert(data.end(), d.begin(), d.end());
  }
  std::vector<std::size_t> ids;
  for (const Var& p : parts) ids.push_back(p.id());
  return parts[0].tape()->record(
      DenseArray(Shape{rows, n}, std::move(data)), parts,
      [ids](const Tape& t, std::size_t, const DenseArray& g, Adjoints& adj) {
        std::size_t offset = 0;
        for (std::size_t id : ids) {
          const std::size_t len = t.value(id).size();
          if (adj.wants(id)) {
            DenseArray& d = adj.at(id);
            for (std::size_t i = 0; i < len; ++i) d[i] += g[offset + i];
          }
          offset += len;
        }
      });
}

Var normalize_rows(Var x, double eps) {
  const DenseArray& xv = x.value();
  require_matrix(xv, "normalize_rows");
  const std::size_t m = xv.rows(), n = xv.cols();
  DenseArray out(xv.shape());
  for (std::size_t i = 0; i < m; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < n; ++j) ss += xv(i, j) * xv(i, j);
    const double denom = std::sqrt(ss) + eps;
    for (std::size_t j = 0; j < n; ++j) out(i, j) = xv(i, j) / denom;
  }
  const std::size_t xid = x.id();
  return x.tape()->record(
      std::move(out), {x},
      [xid, m, n, eps](const Tape& t, std::size_t, const DenseArray& g, Adjoints& adj) {
        if (!adj.wants(xid)) return;
        const DenseArray& xv = t.value(xid);
        DenseArray& dx = adj.at(xid);
        for (std::size_t i = 0; i < m; ++i) {
          double ss = 0.0, xg = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            ss += xv(i, j) * xv(i, j);
            xg += xv(i, j) * g(i, j);
          }
          const double norm = std::sqrt(ss);
          const double denom = norm + eps;
          const double corr = norm > 0.0 ? xg / (norm * denom * denom) : 0.0;
          for (std::size_t j = 0; j < n; ++j) dx(i, j) += g(i, j) / denom - xv(i, j) * corr;
        }
      });
}

Var conv2d(Var x, Var w, Var b) {
  const DenseArray& xv = x.value();
  const DenseArray& wv = w.value();
  const DenseArray& bv = b.value();
  if (xv.rank() != 3 || wv.rank() != 4 || wv.dim(1) != xv.dim(0) || wv.dim(2) != wv.dim(3) ||
      wv.dim(2) % 2 == 0 || bv.size() != wv.dim(0)) {
    throw DimensionError("conv2d: incompatible input " + shape_string(xv.shape()) + ", kernel " +
                         shape_string(wv.shape()) + ", bias " + shape_string(bv.shape()));
  }
  const kernels::ConvDims d{xv.dim(0), wv.dim(0), xv.dim(1), xv.dim(2), wv.dim(2)};
  DenseArray out(Shape{d.out_channels, d.height, d.width});
  kernels::conv2d_forward(d, xv.ptr(), wv.ptr(), bv.ptr(), out.ptr());
  const std::size_t xid = x.id(), wid = w.id(), bid = b.id();
  return x.tape()->record(
      std::move(out), {x, w, b},
      [d, xid, wid, bid](const Tape& t, std::size_t, const DenseArray& g, Adjoints& adj) {
        kernels::conv2d_backward(d, t.value(xid).ptr(), t.value(wid).ptr(), g.ptr(),
                                 adj.wants(xid) ? adj.at(xid).ptr() : nullptr,
                                 adj.wants(wid) ? adj.at(wid).ptr() : nullptr,
                                 adj.wants(bid) ? adj.at(bid).ptr() : nullptr);
      });
}

Var avg_pool2d(Var x, std::size_t ph, std::size_t pw) {
  const DenseArray& xv = x.value();
  if (xv.rank() != 3 || ph == 0 || pw == 0 || xv.dim(1) % ph != 0 || xv.dim(2) % pw != 0) {
    throw DimensionError("avg_pool2d: cannot pool " + shape_string(xv.shape()) + " by " +
                         std::to_string(ph) + "x" + std::to_string(pw));
  }
  const std::size_t C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
  const std::size_t oh = H / ph, ow = W / pw;
  const double inv = 1.0 / static_cast<double>(ph * pw);
  DenseArray out(Shape{C, oh, ow});
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t w = 0; w < W; ++w) out(c, h / ph, w / pw) += xv(c, h, w) * inv;
    }
  }
  const std::size_t xid = x.id();
  return x.tape()->record(
      std::move(out), {x},
      [xid, C, H, W, ph, pw, inv](const Tape&, std::size_t, const DenseArray& g, Adjoints& adj) {
        if (!adj.wants(xid)) return;
        DenseArray& dx = adj.at(xid);
        for (std::size_t c = 0; c < C; ++c) {
          for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t w = 0; w < W; ++w) dx(c, h, w) += g(c, h / ph, w / pw) * inv;
          }
        }
      });
}

Var to_sequence(Var x) {
  const DenseArray& xv = x.value();
  if (xv.rank() != 3) throw DimensionError("to_sequence: expected rank 3, got " + shape_string(xv.shape()));
  const std::size_t C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
  DenseArray out(Shape{H, C * W});
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t w = 0; w < W; ++w) out(h, c * W + w) = xv(c, h, w);
    }
  }
  const std::size_t xid = x.id();
  return x.tape()->record(std::move(out), {x},
                          [xid, C, H, W](const Tape&, std::size_t, const DenseArray& g, Adjoints& adj) {
                            if (!adj.wants(xid)) return;
                            DenseArray& dx = adj.at(xid);
                            for (std::size_t c = 0; c < C; ++c) {
                              for (std::size_t h = 0; h < H; ++h) {
                                for (std::size_t w = 0; w < W; ++w) dx(c, h, w) += g(h, c * W + w);
                              }
                            }
                          });
}

Var gru(Var x, Var w_input, Var w_hidden, Var b_input, Var b_hidden, bool reverse) {
  const DenseArray& xv = x.value();
  const DenseArray& wi = w_input.value();
  const DenseArray& wh = w_hidden.value();
  require_matrix(xv, "gru");
  require_matrix(wi, "gru");
  require_matrix(wh, "gru");
  const std::size_t H = wh.rows();
  if (wi.rows() != xv.cols() || wi.cols() != 3 * H || wh.cols() != 3 * H ||
      b_input.value().size() != 3 * H || b_hidden.value().size() != 3 * H) {
    throw DimensionError("gru: incompatible input " + shape_string(xv.shape()) + ", w_input " +
                         shape_string(wi.shape()) + ", w_hidden " + shape_string(wh.shape()));
  }
  const kernels::GruDims d{xv.rows(), xv.cols(), H, reverse};
  auto trace = std::make_shared<kernels::GruTrace>();
  DenseArray out(Shape{d.steps, H});
  kernels::gru_forward(d, xv.ptr(), wi.ptr(), wh.ptr(), b_input.value().ptr(),
                       b_hidden.value().ptr(), out.ptr(), *trace);
  const std::size_t xid = x.id(), wiid = w_input.id(), whid = w_hidden.id();
  const std::size_t biid = b_input.id(), bhid = b_hidden.id();
  return x.tape()->record(
      std::move(out), {x, w_input, w_hidden, b_input, b_hidden},
      [=](const Tape& t, std::size_t, const DenseArray& g, Adjoints& adj) {
        kernels::gru_backward(d, t.value(xid).ptr(), t.value(wiid).ptr(), t.value(whid).ptr(),
                              *trace, g.ptr(), adj.wants(xid) ? adj.at(xid).ptr() : nullptr,
                              adj.wants(wiid) ? adj.at(wiid).ptr() : nullptr,
                              adj.wants(whid) ? adj.at(whid).ptr() : nullptr,
                              adj.wants(biid) ? adj.at(biid).ptr() : nullptr,
                              adj.wants(bhid) ? adj.at(bhid).ptr() : nullptr);
      });
}

Var binary_cross_entropy(Var probs, const DenseArray& target, double eps) {
  const DenseArray& pv = probs.value();
  require_same_shape(pv, target, "binary_cross_entropy");
  const double n = static_cast<double>(pv.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const double p = std::clamp(pv[i], eps, 1.0 - eps);
    acc -= target[i] * std::log(p) + (1.0 - target[i]) * std::log(1.0 - p);
  }
  const std::size_t pid = probs.id();
  // Slope is taken at the clamped probability so saturated outputs still
  // receive a corrective signal.
  return probs.tape()->record(
      DenseArray::scalar(acc / n), {probs},
      [pid, target, eps, n](const Tape& t, std::size_t, const DenseArray& g, Adjoints& adj) {
        if (!adj.wants(pid)) return;
        const DenseArray& pv = t.value(pid);
        DenseArray& dp = adj.at(pid);
        for (std::size_t i = 0; i < pv.size(); ++i) {
          const double p = std::clamp(pv[i], eps, 1.0 - eps);
          dp[i] += g[0] * (p - target[i]) / (p * (1.0 - p)) / n;
        }
      });
}

Var contrastive_sum(Var similarity, std::span<const ContrastivePair> pairs,
                    std::span<const std::size_t> negatives, bool include_positive) {
  const DenseArray& sv = similarity.value();
  require_matrix(sv, "contrastive_sum");
  const std::size_t T = sv.rows();
  if (sv.cols() != T) throw DimensionError("contrastive_sum: similarity must be square");
  if (negatives.empty() && !include_positive) {
    throw ContractError("contrastive_sum: empty negative set");
  }
  for (std::size_t k : negatives) {
    if (k >= T) throw ContractError("contrastive_sum: negative index out of range");
  }
  for (const ContrastivePair& p : pairs) {
    if (p.anchor >= T || p.positive >= T) {
      throw ContractError("contrastive_sum: pair index out of range");
    }
  }

  // Per-anchor log-sum-exp over the shared negative set.
  auto negative_lse = [&](const DenseArray& s, std::size_t i) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t k : negatives) m = std::max(m, s(i, k));
    double acc = 0.0;
    for (std::size_t k : negatives) acc += std::exp(s(i, k) - m);
    return m + std::log(acc);
  };
  auto pair_lse = [&](const DenseArray& s, std::size_t i, std::size_t j) {
    double m = s(i, j);
    for (std::size_t k : negatives) m = std::max(m, s(i, k));
    double acc = std::exp(s(i, j) - m);
    for (std::size_t k : negatives) acc += std::exp(s(i, k) - m);
    return m + std::log(acc);
  };

  double total = 0.0;
  std::unordered_map<std::size_t, double> row_lse;
  for (const ContrastivePair& p : pairs) {
    double lse;
    if (include_positive) {
      lse = pair_lse(sv, p.anchor, p.positive);
    } else {
      auto it = row_lse.find(p.anchor);
      if (it == row_lse.end()) it = row_lse.emplace(p.anchor, negative_lse(sv, p.anchor)).first;
      lse = it->second;
    }
    total += p.weight * (lse - sv(p.anchor, p.positive));
  }

  const std::size_t sid = similarity.id();
  std::vector<ContrastivePair> pair_copy(pairs.begin(), pairs.end());
  std::vector<std::size_t> neg_copy(negatives.begin(), negatives.end());
  return similarity.tape()->record(
      DenseArray::scalar(total), {similarity},
      [sid, pair_copy = std::move(pair_copy), neg_copy = std::move(neg_copy), include_positive](
          const Tape& t, std::size_t, const DenseArray& g, Adjoints& adj) {
        if (!adj.wants(sid)) return;
        const DenseArray& s = t.value(sid);
        DenseArray& ds = adj.at(sid);
        const double gv = g[0];
        // Accumulate per-anchor weight first when the denominator is shared.
        std::unordered_map<std::size_t, double> anchor_weight;
        for (const ContrastivePair& p : pair_copy) {
          ds(p.anchor, p.positive) -= gv * p.weight;
          if (!include_positive) {
            anchor_weight[p.anchor] += p.weight;
            continue;
          }
          double m = s(p.anchor, p.positive);
          for (std::size_t k : neg_copy) m = std::max(m, s(p.anchor, k));
          double z = std::exp(s(p.anchor, p.positive) - m);
          for (std::size_t k : neg_copy) z += std::exp(s(p.anchor, k) - m);
          const double c = gv * p.weight / z;
          ds(p.anchor, p.positive) += c * std::exp(s(p.anchor, p.positive) - m);
          for (std::size_t k : neg_copy) ds(p.anchor, k) += c * std::exp(s(p.anchor, k) - m);
        }
        if (include_positive) return;
        // Iterate anchors in ascending order so the result is order-stable.
        std::vector<std::pair<std::size_t, double>> rows(anchor_weight.begin(), anchor_weight.end());
        std::sort(rows.begin(), rows.end());
        for (const auto& [i, w] : rows) {
          double m = -std::numeric_limits<double>::infinity();
          for (std::size_t k : neg_copy) m = std::max(m, s(i, k));
          double z = 0.0;
          for (std::size_t k : neg_copy) z += std::exp(s(i, k) - m);
          const double c = gv * w / z;
          for (std::size_t k : neg_copy) ds(i, k) += c * std::exp(s(i, k) - m);
        }
      });
}

}  // namespace sedx
