#include "mcl/tape.hpp"

#include <stdexcept>

namespace mcl::ad {

void Tape::check_owned(Var v) const {
  if (&v.tape() != this || v.id() >= nodes_.size()) throw std::invalid_argument("Var does not belong to this tape");
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  nodes_.push_back(Node{std::move(value), requires_grad, {}, {}});
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Tape::record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn) {
  bool needs = false;
  for (const Var& p : parents) {
    check_owned(p);
    needs = needs || nodes_[p.id()].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), needs, needs ? std::move(fn) : BackwardFn{}, {}});
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

std::span<double> Tape::grad_buffer(Var v) {
  check_owned(v);
  Node& n = nodes_[v.id()];
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

void Tape::backward(Var root) {
  check_owned(root);
  if (backward_done_) throw std::logic_error("backward() already called on this tape");
  if (nodes_[root.id()].value.size() != 1)
    throw ShapeError("backward() needs a single-element root, got shape " +
                     shape_str(nodes_[root.id()].value.shape()));
  backward_done_ = true;
  if (!nodes_[root.id()].requires_grad) return;
  grad_buffer(root)[0] = 1.0;
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.grad.empty() || !n.backward) continue;
    n.backward(*this, n.grad);
  }
}

Tensor Tape::grad(Var v) const {
  check_owned(v);
  const Node& n = nodes_[v.id()];
  if (n.grad.empty()) return Tensor(n.value.shape());
  return Tensor(n.value.shape(), n.grad);
}

}  // namespace mcl::ad
