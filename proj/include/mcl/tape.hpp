#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "mcl/tensor.hpp"

namespace mcl::ad {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the Tape lives.
class Var {
 public:
  Var() = default;

  Tape& tape() const { return *tape_; }
  std::uint32_t id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::uint32_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

/// Append-only record of operations. Nodes are created in topological order, so
/// backward() is a single reverse sweep. Single-threaded; use one Tape per thread.
class Tape {
 public:
  /// Called with the node's accumulated output gradient; must add into the
  /// gradient buffers of whichever parents require grad.
  using BackwardFn = std::function<void(Tape&, std::span<const double>)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Records an operation result. The node requires grad iff any parent does;
  /// otherwise `fn` is dropped.
  Var record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn);

  /// Reverse sweep from a single-element root. May be called once per tape.
  void backward(Var root);

  /// Gradient of the last backward() w.r.t. v; zeros when v was not reached.
  Tensor grad(Var v) const;

  /// Gradient accumulator for v, zero-initialised on first access. For use by
  /// operation backward functions.
  std::span<double> grad_buffer(Var v);

  const Tensor& value(Var v) const { return nodes_.at(v.id()).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id()).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    bool requires_grad = false;
    BackwardFn backward;
    std::vector<double> grad;
  };

  void check_owned(Var v) const;

  std::deque<Node> nodes_;
  bool backward_done_ = false;
};

inline const Tensor& Var::value() const { return tape_->value(*this); }
inline bool Var::requires_grad() const { return tape_->requires_grad(*this); }

}  // namespace mcl::ad
