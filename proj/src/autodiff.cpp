#include "clipo/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "clipo/error.hpp"

namespace clipo {

const Tensor& Var::value() const {
  if (tape == nullptr) throw ContractError("use of an unbound Var");
  return tape->value(id);
}

Var Tape::leaf(Tensor& param) {
  Node n;
  n.ref = &param;
  n.param = param.requires_grad() ? &param : nullptr;
  n.needs_grad = param.requires_grad();
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::constant_ref(const Tensor& value) {
  Node n;
  n.ref = &value;
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::constant(Tensor value) {
  Node n;
  n.owned = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward) {
  Node n;
  n.owned = std::move(value);
  n.needs_grad = std::any_of(inputs.begin(), inputs.end(),
                             [this](std::size_t i) { return nodes_[i].needs_grad; });
  if (n.needs_grad) {
    n.inputs = std::move(inputs);
    n.backward = std::move(backward);
  }
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

const Tensor& Tape::value(std::size_t id) const {
  const Node& n = nodes_.at(id);
  return n.ref ? *n.ref : n.owned;
}

std::span<double> Tape::adjoint(std::size_t id) {
  Node& n = nodes_[id];
  if (n.adjoint.empty()) n.adjoint.assign(value(id).size(), 0.0);
  return n.adjoint;
}

void Tape::backward(Var root) {
  if (root.tape != this) throw ContractError("backward root belongs to another tape");
  if (value(root.id).size() != 1) {
    throw ContractError("backward requires a scalar root, got " +
                        shape_str(value(root.id).shape()));
  }
  if (!nodes_[root.id].needs_grad) return;
  adjoint(root.id)[0] = 1.0;
  for (std::size_t i = root.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.needs_grad || n.adjoint.empty()) continue;
    if (n.param) {
      auto g = n.param->ensure_grad();
      for (std::size_t j = 0; j < g.size(); ++j) g[j] += n.adjoint[j];
    } else if (n.backward) {
      n.backward(*this, i);
    }
  }
}

namespace ops {
namespace {

Tape& tape_of(Var a) {
  if (a.tape == nullptr) throw ContractError("use of an unbound Var");
  return *a.tape;
}

Tape& tape_of(Var a, Var b) {
  if (a.tape != b.tape || a.tape == nullptr) throw ContractError("operands live on different tapes");
  return *a.tape;
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " differ");
  }
}

template <class F>
Var unary(Var a, F&& f, std::function<double(double x, double y)> dfdx) {
  Tape& t = tape_of(a);
  const Tensor& x = a.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return t.record(std::move(out), {a.id}, [a, dfdx](Tape& tp, std::size_t self) {
    if (!tp.needs_grad(a.id)) return;
    const Tensor& xv = tp.value(a.id);
    const Tensor& yv = tp.value(self);
    auto g = tp.adjoint(self);
    auto ga = tp.adjoint(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dfdx(xv[i], yv[i]);
  });
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.cols() != B.rows()) {
    throw DimensionError("matmul: cannot multiply " + shape_str(A.shape()) + " by " +
                         shape_str(B.shape()));
  }
  const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
  Tensor out({m, n});
  kernels::matmul(A.data(), B.data(), out.data(), m, k, n);
  return t.record(std::move(out), {a.id, b.id}, [a, b, m, k, n](Tape& tp, std::size_t self) {
    auto g = tp.adjoint(self);
    const Tensor& Av = tp.value(a.id);
    const Tensor& Bv = tp.value(b.id);
    if (tp.needs_grad(a.id)) {
      // ga += g * B^T, accumulated as rows of B^T so the inner loop is an axpy.
      std::vector<double> bt(n * k);
      for (std::size_t p = 0; p < k; ++p)
        for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = Bv[p * n + j];
      auto ga = tp.adjoint(a.id);
      for (std::size_t i = 0; i < m; ++i) {
        double* dst = ga.data() + i * k;
        const double* gr = g.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) {
          const double gv = gr[j];
          if (gv == 0.0) continue;
          const double* src = bt.data() + j * k;
          for (std::size_t p = 0; p < k; ++p) dst[p] += gv * src[p];
        }
      }
    }
    if (tp.needs_grad(b.id)) {
      auto gb = tp.adjoint(b.id);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double av = Av[i * k + p];
          if (av == 0.0) continue;
          const double* gr = g.data() + i * n;
          double* dst = gb.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) dst[j] += av * gr[j];
        }
    }
  });
}

Var transpose(Var a) {
  Tape& t = tape_of(a);
  const Tensor& A = a.value();
  const std::size_t m = A.rows(), n = A.cols();
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = A[i * n + j];
  return t.record(std::move(out), {a.id}, [a, m, n](Tape& tp, std::size_t self) {
    auto g = tp.adjoint(self);
    auto ga = tp.adjoint(a.id);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
  });
}

Var add(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape("add", a.value(), b.value());
  Tensor out = a.value();
  out.set_requires_grad(false);
  out.clear_grad();
  const Tensor& B = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i];
  return t.record(std::move(out), {a.id, b.id}, [a, b](Tape& tp, std::size_t self) {
    auto g = tp.adjoint(self);
    for (Var v : {a, b}) {
      if (!tp.needs_grad(v.id)) continue;
      auto gv = tp.adjoint(v.id);
      for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i];
    }
  });
}

Var sub(Var a, Var b) { return add(a, neg(b)); }

Var mul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require_same_shape("mul", A, B);
  Tensor out(A.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] * B[i];
  return t.record(std::move(out), {a.id, b.id}, [a, b](Tape& tp, std::size_t self) {
    auto g = tp.adjoint(self);
    const Tensor& Av = tp.value(a.id);
    const Tensor& Bv = tp.value(b.id);
    if (tp.needs_grad(a.id)) {
      auto ga = tp.adjoint(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * Bv[i];
    }
    if (tp.needs_grad(b.id)) {
      auto gb = tp.adjoint(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * Av[i];
    }
  });
}

Var scale(Var a, double c) {
  return unary(a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Var add_scalar(Var a, double c) {
  return unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Var neg(Var a) { return scale(a, -1.0); }

Var exp(Var a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(Var a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var clamp(Var a, double lo, double hi) {
  if (lo > hi) throw ContractError("clamp: lo > hi");
  return unary(
      a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Var gelu(Var a) {
  return unary(a, kernels::gelu, [](double x, double) { return kernels::gelu_grad(x); });
}

Var minimum(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require_same_shape("minimum", A, B);
  Tensor out(A.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(A[i], B[i]);
  return t.record(std::move(out), {a.id, b.id}, [a, b](Tape& tp, std::size_t self) {
    auto g = tp.adjoint(self);
    const Tensor& Av = tp.value(a.id);
    const Tensor& Bv = tp.value(b.id);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const bool take_a = Av[i] <= Bv[i];
      if (take_a && tp.needs_grad(a.id)) tp.adjoint(a.id)[i] += g[i];
      if (!take_a && tp.needs_grad(b.id)) tp.adjoint(b.id)[i] += g[i];
    }
  });
}

Var add_row(Var a, Var bias) {
  Tape& t = tape_of(a, bias);
  const Tensor& A = a.value();
  const Tensor& b = bias.value();
  if (A.rank() != 2 || b.rank() != 1 || b.size() != A.cols()) {
    throw DimensionError("add_row: cannot broadcast " + shape_str(b.shape()) + " over " +
                         shape_str(A.shape()));
  }
  const std::size_t m = A.rows(), n = A.cols();
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = A[i * n + j] + b[j];
  return t.record(std::move(out), {a.id, bias.id}, [a, bias, m, n](Tape& tp, std::size_t self) {
    auto g = tp.adjoint(self);
    if (tp.needs_grad(a.id)) {
      auto ga = tp.adjoint(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (tp.needs_grad(bias.id)) {
      auto gb = tp.adjoint(bias.id);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
    }
  });
}

Var gather_rows(Var table, std::span<const int> ids) {
  Tape& t = tape_of(table);
  const Tensor& E = table.value();
  const std::size_t V = E.rows(), D = E.cols();
  std::vector<int> idv(ids.begin(), ids.end());
  Tensor out({idv.size(), D});
  for (std::size_t r = 0; r < idv.size(); ++r) {
    if (idv[r] < 0 || static_cast<std::size_t>(idv[r]) >= V) {
      throw DimensionError("gather_rows: id " + std::to_string(idv[r]) + " outside table " +
                           shape_str(E.shape()));
    }
    std::copy_n(E.data().begin() + idv[r] * D, D, out.data().begin() + r * D);
  }
  return t.record(std::move(out), {table.id}, [table, idv, D](Tape& tp, std::size_t self) {
    auto g = tp.adjoint(self);
    auto ge = tp.adjoint(table.id);
    for (std::size_t r = 0; r < idv.size(); ++r)
      for (std::size_t j = 0; j < D; ++j) ge[idv[r] * D + j] += g[r * D + j];
  });
}

Var pick(Var x, std::span<const int> ids) {
  Tape& t = tape_of(x);
  const Tensor& X = x.value();
  std::vector<std::size_t> flat(ids.size());
  if (X.rank() == 2) {
    if (ids.size() != X.rows()) {
      throw DimensionError("pick: " + std::to_string(ids.size()) + " ids for " +
                           shape_str(X.shape()));
    }
    for (std::size_t r = 0; r < ids.size(); ++r) {
      if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= X.cols())
        throw DimensionError("pick: column id out of range");
      flat[r] = r * X.cols() + static_cast<std::size_t>(ids[r]);
    }
  } else {
    for (std::size_t r = 0; r < ids.size(); ++r) {
      if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= X.size())
        throw DimensionError("pick: index out of range");
      flat[r] = static_cast<std::size_t>(ids[r]);
    }
  }
  Tensor out({flat.size()});
  for (std::size_t r = 0; r < flat.size(); ++r) out[r] = X[flat[r]];
  return t.record(std::move(out), {x.id}, [x, flat](Tape& tp, std::size_t self) {
    auto g = tp.adjoint(self);
    auto gx = tp.adjoint(x.id);
    for (std::size_t r = 0; r < flat.size(); ++r) gx[flat[r]] += g[r];
  });
}

Var select(Var x, std::size_t index) {
  Tape& t = tape_of(x);
  const Tensor& X = x.value();
  if (index >= X.size()) throw DimensionError("select: index out of range");
  return t.record(Tensor::scalar(X[index]), {x.id}, [x, index](Tape& tp, std::size_t self) {
    tp.adjoint(x.id)[index] += tp.adjoint(self)[0];
  });
}

Var slice_rows(Var x, std::size_t begin, std::size_t count) {
  Tape& t = tape_of(x);
  const Tensor& X = x.value();
  const std::size_t n = X.cols();
  if (begin + count > X.rows()) {
    throw DimensionError("slice_rows: rows [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") outside " + shape_str(X.shape()));
  }
  Tensor out({count, n});
  std::copy_n(X.data().begin() + begin * n, count * n, out.data().begin());
  return t.record(std::move(out), {x.id}, [x, begin, n](Tape& tp, std::size_t self) {
    auto g = tp.adjoint(self);
    auto gx = tp.adjoint(x.id);
    for (std::size_t i = 0; i < g.size(); ++i) gx[begin * n + i] += g[i];
  });
}

Var row(Var x, std::size_t r) {
  Tape& t = tape_of(x);
  const Tensor& X = x.value();
  const std::size_t n = X.cols();
  if (r >= X.rows()) throw DimensionError("row: index out of range");
  Tensor out({n});
  std::copy_n(X.data().begin() + r * n, n, out.data().begin());
  return t.record(std::move(out), {x.id}, [x, r, n](Tape& tp, std::size_t self) {
    auto g = tp.adjoint(self);
    auto gx = tp.adjoint(x.id);
    for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += g[j];
  });
}

Var stack_rows(std::span<const Var> rows) {
  if (rows.empty()) throw ContractError("stack_rows: no rows");
  Tape& t = tape_of(rows[0]);
  const std::size_t n = rows[0].value().size();
  Tensor out({rows.size(), n});
  std::vector<std::size_t> ids;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    tape_of(rows[0], rows[r]);
    const Tensor& v = rows[r].value();
    if (v.size() != n) throw DimensionError("stack_rows: ragged rows");
    std::copy(v.data().begin(), v.data().end(), out.data().begin() + r * n);
    ids.push_back(rows[r].id);
  }
  return t.record(std::move(out), ids, [ids, n](Tape& tp, std::size_t self) {
    auto g = tp.adjoint(self);
    for (std::size_t r = 0; r < ids.size(); ++r) {
      if (!tp.needs_grad(ids[r])) continue;
      auto gr = tp.adjoint(ids[r]);
      for (std::size_t j = 0; j < n; ++j) gr[j] += g[r * n + j];
    }
  });
}

Var concat(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat: no parts");
  Tape& t = tape_of(parts[0]);
  std::vector<double> data;
  std::vector<std::size_t> ids, offsets;
  for (Var p : parts) {
    tape_of(parts[0], p);
    offsets.push_back(data.size());
    const Tensor& v = p.value();
    data.insert(data.end(), v.data().begin(), v.data().end());
    ids.push_back(p.id);
  }
  return t.record(Tensor::vector(std::move(data)), ids, [ids, offsets](Tape& tp, std::size_t self) {
    auto g = tp.adjoint(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!tp.needs_grad(ids[k])) continue;
      auto gk = tp.adjoint(ids[k]);
      for (std::size_t j = 0; j < gk.size(); ++j) gk[j] += g[offsets[k] + j];
    }
  });
}

Var sum(Var a) {
  Tape& t = tape_of(a);
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return t.record(Tensor::scalar(s), {a.id}, [a](Tape& tp, std::size_t self) {
    const double g = tp.adjoint(self)[0];
    for (double& v : tp.adjoint(a.id)) v += g;
  });
}

Var mean(Var a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw ContractError("mean of an empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var mean_axis(Var a) {
  Tape& t = tape_of(a);
  const Tensor& X = a.value();
  if (X.rank() != 2) throw DimensionError("mean_axis expects [T x D], got " + shape_str(X.shape()));
  const std::size_t T = X.rows(), D = X.cols();
  if (T == 0) throw ContractError("mean_axis: empty reduction over zero rows");
  Tensor out({D});
  for (std::size_t r = 0; r < T; ++r)
    for (std::size_t j = 0; j < D; ++j) out[j] += X[r * D + j];
  for (std::size_t j = 0; j < D; ++j) out[j] /= static_cast<double>(T);
  return t.record(std::move(out), {a.id}, [a, T, D](Tape& tp, std::size_t self) {
    auto g = tp.adjoint(self);
    auto ga = tp.adjoint(a.id);
    const double inv = 1.0 / static_cast<double>(T);
    for (std::size_t r = 0; r < T; ++r)
      for (std::size_t j = 0; j < D; ++j) ga[r * D + j] += g[j] * inv;
  });
}

Var dot(Var a, Var b) { return sum(mul(a, b)); }

Var matvec(Var w, Var x) {
  Tape& t = tape_of(w, x);
  const Tensor& W = w.value();
  const Tensor& X = x.value();
  if (W.rank() != 2 || X.rank() != 1 || W.cols() != X.size()) {
    throw DimensionError("matvec: cannot apply " + shape_str(W.shape()) + " to " +
                         shape_str(X.shape()));
  }
  const std::size_t m = W.rows(), n = W.cols();
  Tensor out({m});
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += W[i * n + j] * X[j];
    out[i] = s;
  }
  return t.record(std::move(out), {w.id, x.id}, [w, x, m, n](Tape& tp, std::size_t self) {
    auto g = tp.adjoint(self);
    const Tensor& Wv = tp.value(w.id);
    const Tensor& Xv = tp.value(x.id);
    if (tp.needs_grad(w.id)) {
      auto gw = tp.adjoint(w.id);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gw[i * n + j] += g[i] * Xv[j];
    }
    if (tp.needs_grad(x.id)) {
      auto gx = tp.adjoint(x.id);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gx[j] += g[i] * Wv[i * n + j];
    }
  });
}

Var log_softmax(Var x) {
  Tape& t = tape_of(x);
  const Tensor& X = x.value();
  if (X.size() == 0 || X.rank() == 0) throw DimensionError("log_softmax needs V >= 1");
  if (!X.all_finite()) throw NumericError("log_softmax: non-finite input");
  const std::size_t V = X.shape().back();
  const std::size_t R = X.size() / V;
  Tensor out(X.shape());
  for (std::size_t r = 0; r < R; ++r) {
    kernels::log_softmax_row(X.data().subspan(r * V, V), out.data().subspan(r * V, V));
  }
  return t.record(std::move(out), {x.id}, [x, R, V](Tape& tp, std::size_t self) {
    auto g = tp.adjoint(self);
    const Tensor& Y = tp.value(self);
    auto gx = tp.adjoint(x.id);
    for (std::size_t r = 0; r < R; ++r) {
      double gs = 0.0;
      for (std::size_t j = 0; j < V; ++j) gs += g[r * V + j];
      for (std::size_t j = 0; j < V; ++j)
        gx[r * V + j] += g[r * V + j] - std::exp(Y[r * V + j]) * gs;
    }
  });
}

Var logsumexp(Var x) {
  Tape& t = tape_of(x);
  const Tensor& X = x.value();
  if (X.size() == 0) throw DimensionError("logsumexp of an empty tensor");
  if (!X.all_finite()) throw NumericError("logsumexp: non-finite input");
  const double lse = kernels::logsumexp(X.data());
  return t.record(Tensor::scalar(lse), {x.id}, [x](Tape& tp, std::size_t self) {
    const double g = tp.adjoint(self)[0];
    const double y = tp.value(self)[0];
    const Tensor& Xv = tp.value(x.id);
    auto gx = tp.adjoint(x.id);
    for (std::size_t j = 0; j < gx.size(); ++j) gx[j] += g * std::exp(Xv[j] - y);
  });
}

Var l2_normalize(Var x, double eps_norm) {
  Tape& t = tape_of(x);
  const Tensor& X = x.value();
  double ss = 0.0;
  for (double v : X.data()) ss += v * v;
  const double norm = std::sqrt(ss);
  if (!(norm > eps_norm)) {
    throw NumericError("l2_normalize: degenerate embedding (norm " + std::to_string(norm) + ")");
  }
  Tensor out(X.shape());
  for (std::size_t i = 0; i < X.size(); ++i) out[i] = X[i] / norm;
  return t.record(std::move(out), {x.id}, [x, norm](Tape& tp, std::size_t self) {
    auto g = tp.adjoint(self);
    const Tensor& Y = tp.value(self);
    double yg = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) yg += Y[i] * g[i];
    auto gx = tp.adjoint(x.id);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += (g[i] - Y[i] * yg) / norm;
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  Tape& t = tape_of(x, gain);
  tape_of(x, bias);
  const Tensor& X = x.value();
  const std::size_t D = X.shape().back();
  const std::size_t R = X.size() / D;
  if (gain.value().size() != D || bias.value().size() != D) {
    throw DimensionError("layer_norm: gain/bias do not match width " + std::to_string(D));
  }
  Tensor out(X.shape());
  std::vector<double> means(R), rstds(R);
  for (std::size_t r = 0; r < R; ++r) {
    kernels::layer_norm_row(X.data().subspan(r * D, D), gain.value().data(), bias.value().data(),
                            eps, out.data().subspan(r * D, D), means[r], rstds[r]);
  }
  return t.record(
      std::move(out), {x.id, gain.id, bias.id},
      [x, gain, bias, R, D, means = std::move(means), rstds = std::move(rstds)](Tape& tp,
                                                                              std::size_t self) {
        auto g = tp.adjoint(self);
        const Tensor& Xv = tp.value(x.id);
        const Tensor& Gv = tp.value(gain.id);
        std::vector<double> xhat(D), dxhat(D);
        for (std::size_t r = 0; r < R; ++r) {
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t j = 0; j < D; ++j) {
            xhat[j] = (Xv[r * D + j] - means[r]) * rstds[r];
            dxhat[j] = g[r * D + j] * Gv[j];
            m1 += dxhat[j];
            m2 += dxhat[j] * xhat[j];
          }
          m1 /= static_cast<double>(D);
          m2 /= static_cast<double>(D);
          if (tp.needs_grad(x.id)) {
            auto gx = tp.adjoint(x.id);
            for (std::size_t j = 0; j < D; ++j)
              gx[r * D + j] += rstds[r] * (dxhat[j] - m1 - xhat[j] * m2);
          }
          if (tp.needs_grad(gain.id)) {
            auto gg = tp.adjoint(gain.id);
            for (std::size_t j = 0; j < D; ++j) gg[j] += g[r * D + j] * xhat[j];
          }
          if (tp.needs_grad(bias.id)) {
            auto gb = tp.adjoint(bias.id);
            for (std::size_t j = 0; j < D; ++j) gb[j] += g[r * D + j];
          }
        }
      });
}

Var causal_attention(Var q, Var k, Var v, std::size_t heads) {
  Tape& t = tape_of(q, k);
  tape_of(q, v);
  const Tensor& Q = q.value();
  const Tensor& K = k.value();
  const Tensor& V = v.value();
  require_same_shape("causal_attention", Q, K);
  require_same_shape("causal_attention", Q, V);
  const std::size_t T = Q.rows(), D = Q.cols();
  if (heads == 0 || D % heads != 0) {
    throw DimensionError("causal_attention: width " + std::to_string(D) +
                         " not divisible by heads " + std::to_string(heads));
  }
  // probs for row t start at heads * t(t+1)/2.
  std::vector<double> probs(heads * T * (T + 1) / 2);
  Tensor out({T, D});
  for (std::size_t r = 0; r < T; ++r) {
    kernels::attend_row(Q.data().subspan(r * D, D), K.data(), V.data(), r, D, heads,
                        out.data().subspan(r * D, D),
                        std::span<double>(probs).subspan(heads * r * (r + 1) / 2, heads * (r + 1)));
  }
  return t.record(
      std::move(out), {q.id, k.id, v.id},
      [q, k, v, T, D, heads, probs = std::move(probs)](Tape& tp, std::size_t self) {
        auto g = tp.adjoint(self);
        const Tensor& Qv = tp.value(q.id);
        const Tensor& Kv = tp.value(k.id);
        const Tensor& Vv = tp.value(v.id);
        std::vector<double> dq(T * D, 0.0), dk(T * D, 0.0), dv(T * D, 0.0);
        const std::size_t dh = D / heads;
        const double scl = 1.0 / std::sqrt(static_cast<double>(dh));
        std::vector<double> dp(T);
        for (std::size_t r = 0; r < T; ++r) {
          for (std::size_t h = 0; h < heads; ++h) {
            const double* p = probs.data() + heads * r * (r + 1) / 2 + h * (r + 1);
            const double* go = g.data() + r * D + h * dh;
            double acc = 0.0;
            for (std::size_t j = 0; j <= r; ++j) {
              const double* vr = Vv.data().data() + j * D + h * dh;
              double s = 0.0;
              for (std::size_t c = 0; c < dh; ++c) {
                s += go[c] * vr[c];
                dv[j * D + h * dh + c] += p[j] * go[c];
              }
              dp[j] = s;
              acc += p[j] * s;
            }
            const double* qr = Qv.data().data() + r * D + h * dh;
            for (std::size_t j = 0; j <= r; ++j) {
              const double ds = p[j] * (dp[j] - acc) * scl;
              if (ds == 0.0) continue;
              const double* kr = Kv.data().data() + j * D + h * dh;
              for (std::size_t c = 0; c < dh; ++c) {
                dq[r * D + h * dh + c] += ds * kr[c];
                dk[j * D + h * dh + c] += ds * qr[c];
              }
            }
          }
        }
        const std::pair<Var, const std::vector<double>*> parts[] = {{q, &dq}, {k, &dk}, {v, &dv}};
        for (const auto& [var, buf] : parts) {
          if (!tp.needs_grad(var.id)) continue;
          auto gv = tp.adjoint(var.id);
          for (std::size_t i = 0; i < gv.size(); ++i) gv[i] += (*buf)[i];
        }
      });
}

}  // namespace ops

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
  if (!(h > 0.0)) throw ContractError("finite_diff_grad: step must be positive");
  Tensor probe = x;
  probe.set_requires_grad(false);
  probe.clear_grad();
  Tensor g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = f(probe);
    probe[i] = orig - h;
    const double fm = f(probe);
    probe[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

}  // namespace clipo
