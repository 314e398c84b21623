#pragma once

#include <cstddef>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "hierattn/tensor.hpp"

namespace hierattn {

// A named trainable tensor. Its gradient is collected from a tape after backward.
struct Parameter {
  std::string name;
  Tensor value;
};

class Tape;

// Handle to a value recorded on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  const Tensor& value() const;
  const Tensor& grad() const;
  bool has_grad() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Records operations of one forward pass in execution order (which is also a
// topological order). One backward per pass unless reset_gradients() is called.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

  // With track_gradients == false, parameters enter as constants and no backward
  // closures are kept (inference-only passes).
  explicit Tape(bool track_gradients = true) : track_gradients_(track_gradients) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  // Leaf bound to a parameter. Repeated calls for the same parameter return the same leaf.
  Var parameter(const Parameter& p);
  Var record(Tensor value, std::vector<std::size_t> parents, BackwardFn backward);

  void backward(Var root);
  void reset_gradients();
  bool backward_done() const noexcept { return backward_done_; }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  const Tensor& grad(std::size_t id) const;
  bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Adds g into the gradient buffer of node `id` (no-op for constants).
  void accumulate(std::size_t id, const Tensor& g);
  // Direct access to a node's gradient buffer for in-place accumulation; nullptr for constants.
  Tensor* grad_buffer(std::size_t id);

  // Calls fn(parameter, gradient) for every parameter leaf, in first-use order.
  void for_each_parameter_grad(const std::function<void(const Parameter&, const Tensor&)>& fn) const;

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    const Parameter* param = nullptr;
    bool requires_grad = false;
  };

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> param_nodes_;
  std::vector<std::size_t> param_order_;
  bool backward_done_ = false;
  bool track_gradients_ = true;
};

// ---- taped operations -------------------------------------------------------

Var matmul(Var a, Var b);
Var matmul_nt(Var a, Var b);  // a · bᵀ
Var add(Var a, Var b);
Var add_row(Var x, Var bias);  // bias [1×n] broadcast over rows of x [m×n]
Var hadamard(Var a, Var b);
Var scale(Var x, double s);
Var sum(Var x);
Var softmax_rows(Var x);
Var gelu(Var x);
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
Var slice_rows(Var x, std::size_t start, std::size_t count);
Var slice_cols(Var x, std::size_t start, std::size_t count);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var gather_rows(Var table, std::span<const std::size_t> indices);
Var element(Var x, std::size_t r, std::size_t c);
// Mean negative log-likelihood of `labels` under row-wise softmax of logits [m×k].
Var cross_entropy(Var logits, std::span<const int> labels);
// Inverted dropout; identity when rate == 0.
Var dropout(Var x, double rate, std::mt19937_64& rng);

}  // namespace hierattn
