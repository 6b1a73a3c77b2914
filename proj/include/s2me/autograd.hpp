#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "s2me/tensor.hpp"

namespace s2me::ad {

struct Node;
using NodePtr = std::shared_ptr<Node>;

// One tape entry: the forward value plus a closure that pushes the node's
// gradient into its parents. Graphs are rebuilt every forward pass; only
// parameter leaves persist across iterations.
struct Node {
  Tensor value;
  Tensor grad;
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backprop;
  bool requires_grad = false;
  bool grad_allocated = false;
  const char* op = "leaf";

  Tensor& ensure_grad() {
    if (!grad_allocated) {
      grad = Tensor(value.shape());
      grad_allocated = true;
    }
    return grad;
  }
};

// Value-semantic handle to a tape node.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor& value() const { return node_->value; }
  Tensor& value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  Tensor& grad() { return node_->ensure_grad(); }
  bool requires_grad() const { return node_->requires_grad; }
  const Shape& shape() const { return node_->value.shape(); }
  float scalar() const;

  NodePtr node() const { return node_; }
  static Var wrap(NodePtr n) {
    Var v;
    v.node_ = std::move(n);
    return v;
  }

 private:
  NodePtr node_;
};

// Builds an interior node. requires_grad is inherited from the inputs.
Var make_op(const char* op, Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backprop);

// Reverse pass from a scalar root; seeds d(root)/d(root) = 1.
void backward(const Var& root);

// Named trainable leaf; gradient lives on the node and persists until
// zero_grad.
struct Parameter {
  std::string name;
  Var var;

  Parameter() = default;
  Parameter(std::string n, Tensor value) : name(std::move(n)), var(std::move(value), true) {}
  Tensor& value() { return var.value(); }
  const Tensor& value() const { return var.value(); }
  Tensor& grad() { return var.grad(); }
};

void zero_grad(std::span<Parameter> params);

struct GradCheckOptions {
  double eps = 3e-3;
  double rtol = 1e-3;
  double atol = 1e-4;
  int max_coords_per_param = 32;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  bool passed = true;
  double worst_rel_err = 0.0;
  double worst_abs_err = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  int coords_checked = 0;
  std::string to_string() const;
};

// Central finite differences against the tape gradients. `f` must rebuild
// the graph from the current parameter values and return the scalar loss;
// it must be deterministic.
GradCheckReport grad_check(const std::function<Var()>& f, std::span<Parameter> params,
                           const GradCheckOptions& opts = {});

// Test hook: when set to an op name, the backward engine perturbs that op's
// first input gradient. Exists so the selftest can prove it catches broken
// gradients; never set outside tests.
extern const char* g_inject_grad_bug;

}  // namespace s2me::ad
