// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode autodiff over tensor values. Ops build a dynamic graph of
// shared node objects; backward() walks it once in reverse topological
// order. Single-threaded per graph; independent graphs are independent.
#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "histrec/tensor.hpp"

namespace histrec {

template <typename S>
class NodeT;

template <typename S>
using NodePtrT = std::shared_ptr<NodeT<S>>;

template <typename S>
class NodeT {
 public:
  TensorT<S> value;
  TensorT<S> grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<NodePtrT<S>> parents;
  // Reads this->grad, accumulates into parents' grads.
  std::function<void(NodeT<S>&)> backward_op;
  const char* op = "leaf";

  TensorT<S>& ensure_grad() {
    if (grad.numel() != value.numel()) grad = TensorT<S>::zeros(value.shape());
    return grad;
  }

  void zero_grad() {
    if (grad.numel() == value.numel()) grad.fill(S(0));
  }
};

using Node = NodeT<float>;
using NodePtr = NodePtrT<float>;

template <typename S>
NodePtrT<S> make_leaf(TensorT<S> v, bool requires_grad = false) {
  auto n = std::make_shared<NodeT<S>>();
  n->value = std::move(v);
  n->requires_grad = requires_grad;
  return n;
}

template <typename S>
NodePtrT<S> make_param(TensorT<S> v) {
  return make_leaf(std::move(v), true);
}

template <typename S>
bool any_requires_grad(const std::vector<NodePtrT<S>>& ps) {
  for (const auto& p : ps) {
    if (p->requires_grad) return true;
  }
  return false;
}

template <typename S>
NodePtrT<S> make_op(const char* name, std::vector<NodePtrT<S>> parents, TensorT<S> value,
                    std::function<void(NodeT<S>&)> backward) {
  auto n = std::make_shared<NodeT<S>>();
  n->op = name;
  n->value = std::move(value);
  n->parents = std::move(parents);
  n->requires_grad = any_requires_grad(n->parents);
  if (n->requires_grad) n->backward_op = std::move(backward);
  return n;
}

namespace detail {

template <typename S>
void topo_collect(const NodePtrT<S>& n, std::unordered_set<NodeT<S>*>& seen,
                  std::vector<NodePtrT<S>>& order) {
  // Iterative DFS; sequences produce graphs too deep for recursion.
  struct Frame {
    NodePtrT<S> node;
    size_t next_parent = 0;
  };
  std::vector<Frame> stack;
  if (!seen.insert(n.get()).second) return;
  stack.push_back({n});
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      NodePtrT<S> p = f.node->parents[f.next_parent++];
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back({std::move(p)});
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }
}

}  // namespace detail

// Seeds d(root)/d(root) = seed (root must be scalar) and propagates.
template <typename S>
void backward(const NodePtrT<S>& root, S seed = S(1)) {
  if (root->value.numel() != 1) {
    throw ConfigError(std::string("backward: root of op '") + root->op +
                      "' is not scalar, shape " + shape_str(root->value.shape()));
  }
  if (!root->requires_grad) return;
  std::unordered_set<NodeT<S>*> seen;
  std::vector<NodePtrT<S>> order;
  detail::topo_collect(root, seen, order);
  root->ensure_grad()[0] += seed;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT<S>& n = **it;
    if (n.backward_op && n.grad.numel() == n.value.numel()) n.backward_op(n);
  }
}

}  // namespace histrec
