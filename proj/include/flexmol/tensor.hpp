#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "flexmol/errors.hpp"

namespace flexmol {

// Dense row-major tensor of doubles. Rank is arbitrary but almost everything
// in this codebase is rank 2; rows()/cols() are the rank-2 accessors.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<long> shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<std::size_t>(numel(shape_)), 0.0);
  }
  Tensor(long r, long c) : Tensor(std::vector<long>{r, c}) {}

  static long numel(const std::vector<long>& shape) {
    long n = 1;
    for (long s : shape) n *= s;
    return n;
  }

  static Tensor zeros(long r, long c) { return Tensor(r, c); }
  static Tensor full(long r, long c, double v) {
    Tensor t(r, c);
    for (double& x : t.data_) x = v;
    return t;
  }
  static Tensor scalar(double v) {
    Tensor t(1, 1);
    t.data_[0] = v;
    return t;
  }
  static Tensor ones(long r, long c) { return full(r, c, 1.0); }

  long size() const { return static_cast<long>(data_.size()); }
  long rank() const { return static_cast<long>(shape_.size()); }
  long rows() const { return shape_.empty() ? 0 : shape_[0]; }
  long cols() const { return rank() < 2 ? 1 : shape_[1]; }

  double& operator()(long i, long j) { return data_[static_cast<std::size_t>(i * cols() + j)]; }
  double operator()(long i, long j) const { return data_[static_cast<std::size_t>(i * cols() + j)]; }
  double& operator[](long i) { return data_[static_cast<std::size_t>(i)]; }
  double operator[](long i) const { return data_[static_cast<std::size_t>(i)]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  bool finite() const;
  double item() const {
    if (size() != 1) throw Error("Tensor::item on non-scalar");
    return data_[0];
  }

  std::vector<long> shape_;
  std::vector<double> data_;
};

// Handle to a node in a Graph.
using Value = int;

// Reverse-mode autodiff tape. Nodes only reference earlier nodes, so the
// backward order is simply the reverse construction order. The graph must not
// be moved once ops have been recorded (backward closures capture `this`).
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Leaves track gradients; constants do not.
  Value leaf(const Tensor& t);
  Value constant(const Tensor& t);
  Value constant(Tensor&& t);

  // Detach: value passes through, gradient stops. In `record` mode the
  // detached values are logged; a later graph in `replay` mode substitutes the
  // logged values in call order, which lets a finite-difference harness treat
  // detached subexpressions as constants.
  enum class DetachMode { normal, record, replay };
  Value detach(Value v);
  void start_detach_record() { detach_mode_ = DetachMode::record; detach_log_.clear(); }
  void set_detach_replay(const std::vector<Tensor>* log) {
    detach_mode_ = DetachMode::replay;
    replay_log_ = log;
    detach_cursor_ = 0;
  }
  const std::vector<Tensor>& detach_log() const { return detach_log_; }

  // Elementwise, shapes must match.
  Value add(Value a, Value b);
  Value sub(Value a, Value b);
  Value mul(Value a, Value b);
  // Affine with compile-time constants.
  Value scale(Value a, double c);
  Value add_const(Value a, double c);
  // Elementwise unary.
  Value gelu(Value a);
  Value exp_(Value a);
  Value log_(Value a);
  Value sqrt_(Value a);
  Value reciprocal(Value a);
  Value softplus(Value a);
  Value huber(Value a, double delta);  // values only; reduce outside

  // Rank-2 linear algebra.
  Value matmul(Value a, Value b);
  Value transpose(Value a);
  Value reshape(Value a, std::vector<long> shape);
  Value slice_cols(Value a, long c0, long c1);
  Value concat_cols(const std::vector<Value>& vs);
  Value concat_rows(const std::vector<Value>& vs);
  Value gather_rows(Value table, std::vector<long> idx);

  // Row-wise reductions / normalizations (rank 2).
  Value softmax_rows(Value a);
  Value logsumexp_rows(Value a);       // (m,n) -> (m,1)
  Value layer_norm_rows(Value a, double eps = 1e-5);
  Value sum_all(Value a);              // -> (1,1)

  void backward(Value loss);

  const Tensor& val(Value v) const { return nodes_[static_cast<std::size_t>(v)].v; }
  const Tensor& grad(Value v) const;
  bool requires_grad(Value v) const { return nodes_[static_cast<std::size_t>(v)].req; }
  long num_nodes() const { return static_cast<long>(nodes_.size()); }

 private:
  struct Node {
    Tensor v;
    Tensor g;
    bool req = false;
    bool has_grad = false;
    std::function<void()> back;
  };

  Value push(Tensor v, bool req, std::function<void()> back = nullptr);
  Tensor& gbuf(Value i);  // gradient buffer, allocated on first touch
  void accum(Value parent, const Tensor& g);

  std::vector<Node> nodes_;
  DetachMode detach_mode_ = DetachMode::normal;
  std::vector<Tensor> detach_log_;
  const std::vector<Tensor>* replay_log_ = nullptr;
  std::size_t detach_cursor_ = 0;
};

// Convenience compositions used all over the model code.
namespace ops {

// Broadcast a (1,n) row to (m,n): ones(m,1) @ row.
Value broadcast_rows(Graph& g, Value row, long m);
// Broadcast a (m,1) column to (m,n): col @ ones(1,n).
Value broadcast_cols(Graph& g, Value col, long n);
// Mean of all entries.
Value mean_all(Graph& g, Value a);

}  // namespace ops

}  // namespace flexmol
