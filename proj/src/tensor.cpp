#include "flexmol/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <utility>

namespace flexmol {

namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Map = Eigen::Map<EMat>;
using CMap = Eigen::Map<const EMat>;

CMap cmap(const Tensor& t) { return CMap(t.data(), t.rows(), t.cols()); }
Map mmap(Tensor& t) { return Map(t.data(), t.rows(), t.cols()); }

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

double gelu_fwd(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }
double gelu_bwd(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
  const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
  return cdf + x * pdf;
}

}  // namespace

bool Tensor::finite() const {
  for (double x : data_)
    if (!std::isfinite(x)) return false;
  return true;
}

Value Graph::push(Tensor v, bool req, std::function<void()> back) {
  Node n;
  n.v = std::move(v);
  n.req = req;
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return static_cast<Value>(nodes_.size()) - 1;
}

Value Graph::leaf(const Tensor& t) { return push(t, true); }
Value Graph::constant(const Tensor& t) { return push(t, false); }
Value Graph::constant(Tensor&& t) { return push(std::move(t), false); }

Tensor& Graph::gbuf(Value i) {
  Node& n = nodes_[static_cast<std::size_t>(i)];
  if (!n.has_grad) {
    n.g = Tensor(n.v.shape_);
    n.has_grad = true;
  }
  return n.g;
}

void Graph::accum(Value parent, const Tensor& g) {
  if (!nodes_[static_cast<std::size_t>(parent)].req) return;
  Tensor& dst = gbuf(parent);
  const std::size_t n = dst.data_.size();
  for (std::size_t k = 0; k < n; ++k) dst.data_[k] += g.data_[k];
}

const Tensor& Graph::grad(Value v) const {
  const Node& n = nodes_[static_cast<std::size_t>(v)];
  if (!n.has_grad) {
    static const Tensor empty;
    if (n.v.size() == 0) return empty;
    // Gradient never touched: report zeros of the right shape.
    const_cast<Node&>(n).g = Tensor(n.v.shape_);
    const_cast<Node&>(n).has_grad = true;
  }
  return n.g;
}

Value Graph::detach(Value v) {
  Tensor t = val(v);
  if (detach_mode_ == DetachMode::record) {
    detach_log_.push_back(t);
  } else if (detach_mode_ == DetachMode::replay) {
    if (!replay_log_ || detach_cursor_ >= replay_log_->size())
      throw Error("detach replay log exhausted");
    t = (*replay_log_)[detach_cursor_++];
  }
  return constant(std::move(t));
}

Value Graph::add(Value a, Value b) {
  const Tensor& A = val(a);
  const Tensor& B = val(b);
  if (!A.same_shape(B)) throw Error("add: shape mismatch");
  Tensor out(A.shape_);
  for (long k = 0; k < A.size(); ++k) out[k] = A[k] + B[k];
  const bool req = requires_grad(a) || requires_grad(b);
  Value id = push(std::move(out), req);
  if (req)
    nodes_.back().back = [this, a, b, id] {
      accum(a, grad(id));
      accum(b, grad(id));
    };
  return id;
}

Value Graph::sub(Value a, Value b) {
  const Tensor& A = val(a);
  const Tensor& B = val(b);
  if (!A.same_shape(B)) throw Error("sub: shape mismatch");
  Tensor out(A.shape_);
  for (long k = 0; k < A.size(); ++k) out[k] = A[k] - B[k];
  const bool req = requires_grad(a) || requires_grad(b);
  Value id = push(std::move(out), req);
  if (req)
    nodes_.back().back = [this, a, b, id] {
      const Tensor& g = grad(id);
      accum(a, g);
      if (requires_grad(b)) {
        Tensor neg(g.shape_);
        for (long k = 0; k < g.size(); ++k) neg[k] = -g[k];
        accum(b, neg);
      }
    };
  return id;
}

Value Graph::mul(Value a, Value b) {
  const Tensor& A = val(a);
  const Tensor& B = val(b);
  if (!A.same_shape(B)) throw Error("mul: shape mismatch");
  Tensor out(A.shape_);
  for (long k = 0; k < A.size(); ++k) out[k] = A[k] * B[k];
  const bool req = requires_grad(a) || requires_grad(b);
  Value id = push(std::move(out), req);
  if (req)
    nodes_.back().back = [this, a, b, id] {
      const Tensor& g = grad(id);
      if (requires_grad(a)) {
        const Tensor& B2 = val(b);
        Tensor ga(g.shape_);
        for (long k = 0; k < g.size(); ++k) ga[k] = g[k] * B2[k];
        accum(a, ga);
      }
      if (requires_grad(b)) {
        const Tensor& A2 = val(a);
        Tensor gb(g.shape_);
        for (long k = 0; k < g.size(); ++k) gb[k] = g[k] * A2[k];
        accum(b, gb);
      }
    };
  return id;
}

Value Graph::scale(Value a, double c) {
  const Tensor& A = val(a);
  Tensor out(A.shape_);
  for (long k = 0; k < A.size(); ++k) out[k] = A[k] * c;
  const bool req = requires_grad(a);
  Value id = push(std::move(out), req);
  if (req)
    nodes_.back().back = [this, a, c, id] {
      const Tensor& g = grad(id);
      Tensor ga(g.shape_);
      for (long k = 0; k < g.size(); ++k) ga[k] = g[k] * c;
      accum(a, ga);
    };
  return id;
}

Value Graph::add_const(Value a, double c) {
  const Tensor& A = val(a);
  Tensor out(A.shape_);
  for (long k = 0; k < A.size(); ++k) out[k] = A[k] + c;
  const bool req = requires_grad(a);
  Value id = push(std::move(out), req);
  if (req)
    nodes_.back().back = [this, a, id] { accum(a, grad(id)); };
  return id;
}

Value Graph::gelu(Value a) {
  const Tensor& A = val(a);
  Tensor out(A.shape_);
  for (long k = 0; k < A.size(); ++k) out[k] = gelu_fwd(A[k]);
  const bool req = requires_grad(a);
  Value id = push(std::move(out), req);
  if (req)
    nodes_.back().back = [this, a, id] {
      const Tensor& g = grad(id);
      const Tensor& A2 = val(a);
      Tensor ga(g.shape_);
      for (long k = 0; k < g.size(); ++k) ga[k] = g[k] * gelu_bwd(A2[k]);
      accum(a, ga);
    };
  return id;
}

Value Graph::exp_(Value a) {
  const Tensor& A = val(a);
  Tensor out(A.shape_);
  for (long k = 0; k < A.size(); ++k) out[k] = std::exp(A[k]);
  const bool req = requires_grad(a);
  Value id = push(std::move(out), req);
  if (req)
    nodes_.back().back = [this, a, id] {
      const Tensor& g = grad(id);
      const Tensor& Y = val(id);
      Tensor ga(g.shape_);
      for (long k = 0; k < g.size(); ++k) ga[k] = g[k] * Y[k];
      accum(a, ga);
    };
  return id;
}

Value Graph::log_(Value a) {
  const Tensor& A = val(a);
  Tensor out(A.shape_);
  for (long k = 0; k < A.size(); ++k) out[k] = std::log(A[k]);
  const bool req = requires_grad(a);
  Value id = push(std::move(out), req);
  if (req)
    nodes_.back().back = [this, a, id] {
      const Tensor& g = grad(id);
      const Tensor& A2 = val(a);
      Tensor ga(g.shape_);
      for (long k = 0; k < g.size(); ++k) ga[k] = g[k] / A2[k];
      accum(a, ga);
    };
  return id;
}

Value Graph::sqrt_(Value a) {
  const Tensor& A = val(a);
  Tensor out(A.shape_);
  for (long k = 0; k < A.size(); ++k) out[k] = std::sqrt(A[k]);
  const bool req = requires_grad(a);
  Value id = push(std::move(out), req);
  if (req)
    nodes_.back().back = [this, a, id] {
      const Tensor& g = grad(id);
      const Tensor& Y = val(id);
      Tensor ga(g.shape_);
      for (long k = 0; k < g.size(); ++k) ga[k] = 0.5 * g[k] / Y[k];
      accum(a, ga);
    };
  return id;
}

Value Graph::reciprocal(Value a) {
  const Tensor& A = val(a);
  Tensor out(A.shape_);
  for (long k = 0; k < A.size(); ++k) out[k] = 1.0 / A[k];
  const bool req = requires_grad(a);
  Value id = push(std::move(out), req);
  if (req)
    nodes_.back().back = [this, a, id] {
      const Tensor& g = grad(id);
      const Tensor& Y = val(id);
      Tensor ga(g.shape_);
      for (long k = 0; k < g.size(); ++k) ga[k] = -g[k] * Y[k] * Y[k];
      accum(a, ga);
    };
  return id;
}

Value Graph::softplus(Value a) {
  const Tensor& A = val(a);
  Tensor out(A.shape_);
  for (long k = 0; k < A.size(); ++k) {
    const double x = A[k];
    out[k] = x > 30.0 ? x : std::log1p(std::exp(x));
  }
  const bool req = requires_grad(a);
  Value id = push(std::move(out), req);
  if (req)
    nodes_.back().back = [this, a, id] {
      const Tensor& g = grad(id);
      const Tensor& A2 = val(a);
      Tensor ga(g.shape_);
      for (long k = 0; k < g.size(); ++k) ga[k] = g[k] / (1.0 + std::exp(-A2[k]));
      accum(a, ga);
    };
  return id;
}

Value Graph::huber(Value a, double delta) {
  const Tensor& A = val(a);
  Tensor out(A.shape_);
  for (long k = 0; k < A.size(); ++k) {
    const double r = A[k];
    const double ar = std::abs(r);
    out[k] = ar <= delta ? 0.5 * r * r : delta * (ar - 0.5 * delta);
  }
  const bool req = requires_grad(a);
  Value id = push(std::move(out), req);
  if (req)
    nodes_.back().back = [this, a, delta, id] {
      const Tensor& g = grad(id);
      const Tensor& A2 = val(a);
      Tensor ga(g.shape_);
      for (long k = 0; k < g.size(); ++k)
        ga[k] = g[k] * std::clamp(A2[k], -delta, delta);
      accum(a, ga);
    };
  return id;
}

Value Graph::matmul(Value a, Value b) {
  const Tensor& A = val(a);
  const Tensor& B = val(b);
  if (A.rank() != 2 || B.rank() != 2 || A.cols() != B.rows())
    throw Error("matmul: shape mismatch");
  Tensor out(A.rows(), B.cols());
  mmap(out).noalias() = cmap(A) * cmap(B);
  const bool req = requires_grad(a) || requires_grad(b);
  Value id = push(std::move(out), req);
  if (req)
    nodes_.back().back = [this, a, b, id] {
      const Tensor& g = grad(id);
      if (requires_grad(a)) {
        Tensor ga(val(a).rows(), val(a).cols());
        mmap(ga).noalias() = cmap(g) * cmap(val(b)).transpose();
        accum(a, ga);
      }
      if (requires_grad(b)) {
        Tensor gb(val(b).rows(), val(b).cols());
        mmap(gb).noalias() = cmap(val(a)).transpose() * cmap(g);
        accum(b, gb);
      }
    };
  return id;
}

Value Graph::transpose(Value a) {
  const Tensor& A = val(a);
  if (A.rank() != 2) throw Error("transpose: rank-2 only");
  Tensor out(A.cols(), A.rows());
  mmap(out) = cmap(A).transpose();
  const bool req = requires_grad(a);
  Value id = push(std::move(out), req);
  if (req)
    nodes_.back().back = [this, a, id] {
      const Tensor& g = grad(id);
      Tensor ga(val(a).rows(), val(a).cols());
      mmap(ga) = cmap(g).transpose();
      accum(a, ga);
    };
  return id;
}

Value Graph::reshape(Value a, std::vector<long> shape) {
  const Tensor& A = val(a);
  if (Tensor::numel(shape) != A.size()) throw Error("reshape: size mismatch");
  Tensor out = A;
  out.shape_ = std::move(shape);
  const bool req = requires_grad(a);
  Value id = push(std::move(out), req);
  if (req)
    nodes_.back().back = [this, a, id] {
      Tensor g = grad(id);
      g.shape_ = val(a).shape_;
      accum(a, g);
    };
  return id;
}

Value Graph::slice_cols(Value a, long c0, long c1) {
  const Tensor& A = val(a);
  if (A.rank() != 2 || c0 < 0 || c1 > A.cols() || c0 >= c1)
    throw Error("slice_cols: bad range");
  Tensor out(A.rows(), c1 - c0);
  for (long i = 0; i < A.rows(); ++i)
    for (long j = c0; j < c1; ++j) out(i, j - c0) = A(i, j);
  const bool req = requires_grad(a);
  Value id = push(std::move(out), req);
  if (req)
    nodes_.back().back = [this, a, c0, c1, id] {
      const Tensor& g = grad(id);
      Tensor ga(val(a).rows(), val(a).cols());
      for (long i = 0; i < ga.rows(); ++i)
        for (long j = c0; j < c1; ++j) ga(i, j) = g(i, j - c0);
      accum(a, ga);
    };
  return id;
}

Value Graph::concat_cols(const std::vector<Value>& vs) {
  if (vs.empty()) throw Error("concat_cols: empty");
  const long m = val(vs[0]).rows();
  long total = 0;
  bool req = false;
  for (Value v : vs) {
    if (val(v).rank() != 2 || val(v).rows() != m) throw Error("concat_cols: shape mismatch");
    total += val(v).cols();
    req = req || requires_grad(v);
  }
  Tensor out(m, total);
  long off = 0;
  for (Value v : vs) {
    const Tensor& A = val(v);
    for (long i = 0; i < m; ++i)
      for (long j = 0; j < A.cols(); ++j) out(i, off + j) = A(i, j);
    off += A.cols();
  }
  Value id = push(std::move(out), req);
  if (req) {
    std::vector<Value> parents = vs;
    nodes_.back().back = [this, parents, id] {
      const Tensor& g = grad(id);
      long off2 = 0;
      for (Value v : parents) {
        const long c = val(v).cols();
        if (requires_grad(v)) {
          Tensor ga(val(v).rows(), c);
          for (long i = 0; i < ga.rows(); ++i)
            for (long j = 0; j < c; ++j) ga(i, j) = g(i, off2 + j);
          accum(v, ga);
        }
        off2 += c;
      }
    };
  }
  return id;
}

Value Graph::concat_rows(const std::vector<Value>& vs) {
  if (vs.empty()) throw Error("concat_rows: empty");
  const long n = val(vs[0]).cols();
  long total = 0;
  bool req = false;
  for (Value v : vs) {
    if (val(v).rank() != 2 || val(v).cols() != n) throw Error("concat_rows: shape mismatch");
    total += val(v).rows();
    req = req || requires_grad(v);
  }
  Tensor out(total, n);
  long off = 0;
  for (Value v : vs) {
    const Tensor& A = val(v);
    for (long i = 0; i < A.rows(); ++i)
      for (long j = 0; j < n; ++j) out(off + i, j) = A(i, j);
    off += A.rows();
  }
  Value id = push(std::move(out), req);
  if (req) {
    std::vector<Value> parents = vs;
    nodes_.back().back = [this, parents, id] {
      const Tensor& g = grad(id);
      long off2 = 0;
      for (Value v : parents) {
        const long r = val(v).rows();
        if (requires_grad(v)) {
          Tensor ga(r, val(v).cols());
          for (long i = 0; i < r; ++i)
            for (long j = 0; j < ga.cols(); ++j) ga(i, j) = g(off2 + i, j);
          accum(v, ga);
        }
        off2 += r;
      }
    };
  }
  return id;
}

Value Graph::gather_rows(Value table, std::vector<long> idx) {
  const Tensor& T = val(table);
  if (T.rank() != 2) throw Error("gather_rows: table must be rank 2");
  for (long i : idx)
    if (i < 0 || i >= T.rows()) throw Error("gather_rows: index out of range");
  Tensor out(static_cast<long>(idx.size()), T.cols());
  for (std::size_t r = 0; r < idx.size(); ++r)
    for (long j = 0; j < T.cols(); ++j) out(static_cast<long>(r), j) = T(idx[r], j);
  const bool req = requires_grad(table);
  Value id = push(std::move(out), req);
  if (req) {
    nodes_.back().back = [this, table, idx = std::move(idx), id] {
      const Tensor& g = grad(id);
      Tensor& gt = gbuf(table);
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (long j = 0; j < g.cols(); ++j) gt(idx[r], j) += g(static_cast<long>(r), j);
    };
  }
  return id;
}

Value Graph::softmax_rows(Value a) {
  const Tensor& A = val(a);
  if (A.rank() != 2) throw Error("softmax_rows: rank-2 only");
  Tensor out(A.rows(), A.cols());
  for (long i = 0; i < A.rows(); ++i) {
    double mx = A(i, 0);
    for (long j = 1; j < A.cols(); ++j) mx = std::max(mx, A(i, j));
    double s = 0;
    for (long j = 0; j < A.cols(); ++j) {
      out(i, j) = std::exp(A(i, j) - mx);
      s += out(i, j);
    }
    for (long j = 0; j < A.cols(); ++j) out(i, j) /= s;
  }
  const bool req = requires_grad(a);
  Value id = push(std::move(out), req);
  if (req)
    nodes_.back().back = [this, a, id] {
      const Tensor& g = grad(id);
      const Tensor& Y = val(id);
      Tensor ga(Y.rows(), Y.cols());
      for (long i = 0; i < Y.rows(); ++i) {
        double dot = 0;
        for (long j = 0; j < Y.cols(); ++j) dot += g(i, j) * Y(i, j);
        for (long j = 0; j < Y.cols(); ++j) ga(i, j) = (g(i, j) - dot) * Y(i, j);
      }
      accum(a, ga);
    };
  return id;
}

Value Graph::logsumexp_rows(Value a) {
  const Tensor& A = val(a);
  if (A.rank() != 2) throw Error("logsumexp_rows: rank-2 only");
  Tensor out(A.rows(), 1);
  for (long i = 0; i < A.rows(); ++i) {
    double mx = A(i, 0);
    for (long j = 1; j < A.cols(); ++j) mx = std::max(mx, A(i, j));
    double s = 0;
    for (long j = 0; j < A.cols(); ++j) s += std::exp(A(i, j) - mx);
    out(i, 0) = mx + std::log(s);
  }
  const bool req = requires_grad(a);
  Value id = push(std::move(out), req);
  if (req)
    nodes_.back().back = [this, a, id] {
      const Tensor& g = grad(id);
      const Tensor& A2 = val(a);
      const Tensor& L = val(id);
      Tensor ga(A2.rows(), A2.cols());
      for (long i = 0; i < A2.rows(); ++i)
        for (long j = 0; j < A2.cols(); ++j)
          ga(i, j) = g(i, 0) * std::exp(A2(i, j) - L(i, 0));
      accum(a, ga);
    };
  return id;
}

Value Graph::layer_norm_rows(Value a, double eps) {
  const Tensor& A = val(a);
  if (A.rank() != 2) throw Error("layer_norm_rows: rank-2 only");
  const long n = A.cols();
  Tensor out(A.rows(), n);
  Tensor inv_std(A.rows(), 1);
  for (long i = 0; i < A.rows(); ++i) {
    double mu = 0;
    for (long j = 0; j < n; ++j) mu += A(i, j);
    mu /= static_cast<double>(n);
    double var = 0;
    for (long j = 0; j < n; ++j) {
      const double d = A(i, j) - mu;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std(i, 0) = is;
    for (long j = 0; j < n; ++j) out(i, j) = (A(i, j) - mu) * is;
  }
  const bool req = requires_grad(a);
  Value id = push(std::move(out), req);
  if (req) {
    nodes_.back().back = [this, a, id, istd = std::move(inv_std)] {
      const Tensor& g = grad(id);
      const Tensor& Y = val(id);
      const long cols = Y.cols();
      Tensor ga(Y.rows(), cols);
      for (long i = 0; i < Y.rows(); ++i) {
        double gmean = 0, gymean = 0;
        for (long j = 0; j < cols; ++j) {
          gmean += g(i, j);
          gymean += g(i, j) * Y(i, j);
        }
        gmean /= static_cast<double>(cols);
        gymean /= static_cast<double>(cols);
        const double is = istd(i, 0);
        for (long j = 0; j < cols; ++j)
          ga(i, j) = is * (g(i, j) - gmean - Y(i, j) * gymean);
      }
      accum(a, ga);
    };
  }
  return id;
}

Value Graph::sum_all(Value a) {
  const Tensor& A = val(a);
  double s = 0;
  for (long k = 0; k < A.size(); ++k) s += A[k];
  const bool req = requires_grad(a);
  Value id = push(Tensor::scalar(s), req);
  if (req)
    nodes_.back().back = [this, a, id] {
      const double g = grad(id)[0];
      Tensor ga(val(a).shape_);
      for (long k = 0; k < ga.size(); ++k) ga[k] = g;
      accum(a, ga);
    };
  return id;
}

void Graph::backward(Value loss) {
  if (val(loss).size() != 1) throw Error("backward: loss must be scalar");
  gbuf(loss)[0] = 1.0;
  for (Value i = loss; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.req && n.has_grad && n.back) n.back();
  }
}

namespace ops {

Value broadcast_rows(Graph& g, Value row, long m) {
  return g.matmul(g.constant(Tensor::ones(m, 1)), row);
}

Value broadcast_cols(Graph& g, Value col, long n) {
  return g.matmul(col, g.constant(Tensor::ones(1, n)));
}

Value mean_all(Graph& g, Value a) {
  return g.scale(g.sum_all(a), 1.0 / static_cast<double>(g.val(a).size()));
}

}  // namespace ops

}  // namespace flexmol
