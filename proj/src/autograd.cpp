#include "s2me/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace s2me::ad {

const char* g_inject_grad_bug = nullptr;

Var::Var(Tensor value, bool requires_grad) {
  node_ = std::make_shared<Node>();
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

float Var::scalar() const {
  if (node_->value.size() != 1) {
    throw std::invalid_argument("scalar() on tensor of shape " + shape_str(node_->value.shape()));
  }
  return node_->value[0];
}

Var make_op(const char* op, Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backprop) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->op = op;
  n->parents.reserve(inputs.size());
  for (const Var& v : inputs) {
    n->parents.push_back(v.node());
    if (v.node()->requires_grad) n->requires_grad = true;
  }
  if (n->requires_grad) n->backprop = std::move(backprop);
  return Var::wrap(std::move(n));
}

namespace {

void topo_sort(const NodePtr& root, std::vector<Node*>& order) {
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
}

}  // namespace

void backward(const Var& root) {
  if (!root.defined()) throw std::invalid_argument("backward on undefined var");
  if (root.value().size() != 1) {
    throw std::invalid_argument("backward root must be scalar, got " + shape_str(root.shape()));
  }
  if (!root.requires_grad()) return;
  std::vector<Node*> order;
  topo_sort(root.node(), order);
  root.node()->ensure_grad()[0] = 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->backprop || !n->grad_allocated) continue;
    n->backprop(*n);
    if (g_inject_grad_bug && std::strcmp(n->op, g_inject_grad_bug) == 0) {
      for (auto& p : n->parents) {
        if (p->requires_grad && p->grad_allocated && p->grad.size() > 0) {
          p->grad[0] += 0.05f * (std::abs(p->grad[0]) + 1.0f);
          break;
        }
      }
    }
  }
}

void zero_grad(std::span<Parameter> params) {
  for (auto& p : params) p.var.grad().fill(0.0f);
}

std::string GradCheckReport::to_string() const {
  std::ostringstream os;
  os << (passed ? "pass" : "FAIL") << " (" << coords_checked << " coords; worst " << worst_param << "[" << worst_index
     << "]: analytic=" << analytic << " numeric=" << numeric << " rel=" << worst_rel_err << " abs=" << worst_abs_err
     << ")";
  return os.str();
}

GradCheckReport grad_check(const std::function<Var()>& f, std::span<Parameter> params, const GradCheckOptions& opts) {
  if (opts.eps <= 0) throw std::invalid_argument("grad_check eps must be positive");

  zero_grad(params);
  Var loss = f();
  const double f0 = loss.scalar();
  if (!std::isfinite(f0)) throw std::invalid_argument("grad_check: non-finite loss value");
  backward(loss);

  // Snapshot analytic gradients before the finite-difference sweep mutates
  // parameter values.
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) analytic.push_back(p.var.grad());

  GradCheckReport rep;
  Rng rng(mix_seed(0x5eedc0de, opts.seed));
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& theta = params[pi].value();
    const std::size_t n = theta.size();
    std::vector<std::size_t> coords;
    if (n <= static_cast<std::size_t>(opts.max_coords_per_param)) {
      coords.resize(n);
      for (std::size_t i = 0; i < n; ++i) coords[i] = i;
    } else {
      for (int i = 0; i < opts.max_coords_per_param; ++i) {
        coords.push_back(static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(n) - 1)));
      }
    }
    for (std::size_t ci : coords) {
      // Three step sizes per coordinate: float32 round-off noise shrinks as
      // eps grows, ReLU/maxpool kink windows shrink as eps falls, and a
      // genuinely wrong analytic gradient fails at every eps.
      const double eps_grid[3] = {opts.eps, std::min(4.0 * opts.eps, 1e-2), std::max(0.25 * opts.eps, 1e-4)};
      const double an = analytic[pi][ci];
      const float saved = theta[ci];
      bool ok = false;
      double fd = 0.0, abs_err = 0.0, rel = 0.0, denom = 0.0;
      for (int ei = 0; ei < 3; ++ei) {
        const double eps = eps_grid[ei];
        theta[ci] = static_cast<float>(saved + eps);
        const double fp = f().scalar();
        theta[ci] = static_cast<float>(saved - eps);
        const double fm = f().scalar();
        theta[ci] = saved;
        if (!std::isfinite(fp) || !std::isfinite(fm)) throw std::invalid_argument("grad_check: non-finite loss under perturbation");
        const double fd_e = (fp - fm) / (2.0 * eps);
        const double abs_e = std::abs(fd_e - an);
        const double den_e = std::max(std::abs(fd_e), std::abs(an));
        const double rel_e = abs_e / std::max(den_e, 1e-12);
        if (ei == 0 || rel_e < rel) {
          fd = fd_e;
          abs_err = abs_e;
          rel = rel_e;
          denom = den_e;
        }
        if (abs_err <= opts.atol + opts.rtol * denom) {
          ok = true;
          break;
        }
      }
      ++rep.coords_checked;
      // worst offender: any failure outranks all passes, then larger rel wins
      const bool record = rep.passed ? (!ok || rel > rep.worst_rel_err) : (!ok && rel > rep.worst_rel_err);
      if (record) {
        rep.worst_rel_err = rel;
        rep.worst_abs_err = abs_err;
        rep.worst_param = params[pi].name;
        rep.worst_index = ci;
        rep.analytic = an;
        rep.numeric = fd;
      }
      if (!ok) rep.passed = false;
    }
  }
  return rep;
}

}  // namespace s2me::ad
