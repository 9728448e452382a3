#pragma once

// Differentiable operations on tape variables. All reductions run in a fixed
// order, so repeated evaluation is bit-identical for a given kernel ISA.

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "mcl/tape.hpp"

namespace mcl::ad {

/// Half-open index range [begin, end) along one axis.
struct Segment {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
};

// Elementwise, identical shapes.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var relu(Var a);
Var sigmoid(Var a);

// Full reductions to a rank-0 scalar.
Var sum(Var a);
Var mean(Var a);

// Axis reductions; the axis is removed from the output shape.
Var reduce_sum(Var a, std::size_t axis);
Var reduce_mean(Var a, std::size_t axis);
/// Max along an axis. Backward routes the whole incoming gradient to the
/// argmax; the lowest index wins ties.
Var reduce_max(Var a, std::size_t axis);

/// Numerically stable softmax along an axis (max subtraction).
Var softmax(Var a, std::size_t axis);

Var reshape(Var a, Shape shape);

/// Gathers slices along `axis`; indices may repeat (backward scatter-adds).
Var index_select(Var a, std::size_t axis, std::span<const std::size_t> indices);

/// Per-segment max / mean along `axis`; the axis extent becomes segments.size().
Var segment_max(Var a, std::size_t axis, std::span<const Segment> segments);
Var segment_mean(Var a, std::size_t axis, std::span<const Segment> segments);

/// out[b] = a[b, index[b]] for a of shape (B, C).
Var pick(Var a, std::span<const std::size_t> index);

/// Direct 2-D convolution. input (B,Cin,H,W), kernel (Cout,Cin,k,k) -> (B,Cout,H',W').
Var conv2d(Var input, Var kernel, std::size_t stride, std::size_t padding);

/// Adds a per-channel bias of shape (C) to x of shape (B,C,...).
Var add_channel_bias(Var x, Var bias);

/// y = x * scale[c] + shift[c] per channel of x (B,C,...).
Var channel_affine(Var x, Var scale, Var shift);

/// Batch statistics produced by batch_norm, per channel.
struct BatchStats {
  std::vector<double> mean;
  std::vector<double> var;  // biased
};

/// Training-mode batch normalisation over (B, spatial) per channel.
Var batch_norm(Var x, Var gamma, Var beta, double eps, BatchStats* stats = nullptr);

/// x (B,in), weight (out,in), bias (out) -> (B,out).
Var linear(Var x, Var weight, Var bias);

/// Mean over the batch of -log softmax(logits)[label]; logits (B,C).
Var cross_entropy(Var logits, std::span<const std::size_t> labels);

}  // namespace mcl::ad
