#include "mcl/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "mcl/kernels.hpp"

namespace mcl::ad {

namespace {

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size())
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for shape " + shape_str(shape));
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  if (s.extent == 0) throw ShapeError(std::string(op) + ": empty axis");
  return s;
}

Shape drop_axis(const Shape& shape, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < shape.size(); ++i)
    if (i != axis) out.push_back(shape[i]);
  return out;
}

Shape with_axis(const Shape& shape, std::size_t axis, std::size_t extent) {
  Shape out = shape;
  out[axis] = extent;
  return out;
}

void require_same_shape(Var a, Var b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace

Var add(Var a, Var b) {
  require_same_shape(a, b, "add");
  Tensor y(a.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] + b.value()[i];
  return a.tape().record(std::move(y), {a, b}, [a, b](Tape& t, std::span<const double> g) {
    if (a.requires_grad()) {
      auto ga = t.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      auto gb = t.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    }
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a, b, "sub");
  Tensor y(a.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] - b.value()[i];
  return a.tape().record(std::move(y), {a, b}, [a, b](Tape& t, std::span<const double> g) {
    if (a.requires_grad()) {
      auto ga = t.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      auto gb = t.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a, b, "mul");
  Tensor y(a.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] * b.value()[i];
  return a.tape().record(std::move(y), {a, b}, [a, b](Tape& t, std::span<const double> g) {
    if (a.requires_grad()) {
      auto ga = t.grad_buffer(a);
      const auto bv = b.value().data();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (b.requires_grad()) {
      auto gb = t.grad_buffer(b);
      const auto av = a.value().data();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var scale(Var a, double s) {
  Tensor y(a.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] * s;
  return a.tape().record(std::move(y), {a}, [a, s](Tape& t, std::span<const double> g) {
    auto ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
  });
}

Var relu(Var a) {
  Tensor y = a.value();
  for (double& v : y.data()) v = v > 0.0 ? v : 0.0;
  return a.tape().record(std::move(y), {a}, [a](Tape& t, std::span<const double> g) {
    auto ga = t.grad_buffer(a);
    const auto x = a.value().data();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] > 0.0) ga[i] += g[i];
  });
}

Var sigmoid(Var a) {
  Tensor y(a.shape());
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double x = a.value()[i];
    if (x >= 0.0) {
      y[i] = 1.0 / (1.0 + std::exp(-x));
    } else {
      const double e = std::exp(x);
      y[i] = e / (1.0 + e);
    }
  }
  std::vector<double> saved = y.values();
  return a.tape().record(std::move(y), {a}, [a, saved = std::move(saved)](Tape& t, std::span<const double> g) {
    auto ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * saved[i] * (1.0 - saved[i]);
  });
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.tape().record(Tensor::scalar(s), {a}, [a](Tape& t, std::span<const double> g) {
    auto ga = t.grad_buffer(a);
    for (auto& v : ga) v += g[0];
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.tape().record(Tensor::scalar(s / n), {a}, [a, n](Tape& t, std::span<const double> g) {
    auto ga = t.grad_buffer(a);
    for (auto& v : ga) v += g[0] / n;
  });
}

namespace {

Var reduce_sum_scaled(Var a, std::size_t axis, bool average, const char* op) {
  const AxisSplit s = split_axis(a.shape(), axis, op);
  const double factor = average ? 1.0 / static_cast<double>(s.extent) : 1.0;
  Tensor y(drop_axis(a.shape(), axis));
  const auto x = a.value().data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t k = 0; k < s.extent; ++k)
      for (std::size_t i = 0; i < s.inner; ++i) y[o * s.inner + i] += x[(o * s.extent + k) * s.inner + i];
  if (average)
    for (auto& v : y.data()) v *= factor;
  return a.tape().record(std::move(y), {a}, [a, s, factor](Tape& t, std::span<const double> g) {
    auto ga = t.grad_buffer(a);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t k = 0; k < s.extent; ++k)
        for (std::size_t i = 0; i < s.inner; ++i) ga[(o * s.extent + k) * s.inner + i] += g[o * s.inner + i] * factor;
  });
}

// Max over each segment of the axis. `arg` holds absolute axis indices.
Var segment_max_impl(Var a, std::size_t axis, std::span<const Segment> segments, Shape out_shape, const char* op) {
  const AxisSplit s = split_axis(a.shape(), axis, op);
  const std::size_t nseg = segments.size();
  for (const Segment& seg : segments)
    if (seg.begin >= seg.end || seg.end > s.extent) throw ShapeError(std::string(op) + ": invalid segment");
  Tensor y(std::move(out_shape));
  std::vector<std::uint32_t> arg(y.size());
  const auto x = a.value().data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t q = 0; q < nseg; ++q) {
      double* dst = y.data().data() + (o * nseg + q) * s.inner;
      std::uint32_t* am = arg.data() + (o * nseg + q) * s.inner;
      const Segment seg = segments[q];
      const double* first = x.data() + (o * s.extent + seg.begin) * s.inner;
      std::copy(first, first + s.inner, dst);
      std::fill(am, am + s.inner, static_cast<std::uint32_t>(seg.begin));
      for (std::size_t k = seg.begin + 1; k < seg.end; ++k)
        kernels::max_update(x.data() + (o * s.extent + k) * s.inner, dst, am, static_cast<std::uint32_t>(k), s.inner);
    }
  }
  return a.tape().record(std::move(y), {a},
                         [a, s, nseg, arg = std::move(arg)](Tape& t, std::span<const double> g) {
                           auto ga = t.grad_buffer(a);
                           for (std::size_t o = 0; o < s.outer; ++o)
                             for (std::size_t q = 0; q < nseg; ++q)
                               for (std::size_t i = 0; i < s.inner; ++i) {
                                 const std::size_t j = (o * nseg + q) * s.inner + i;
                                 ga[(o * s.extent + arg[j]) * s.inner + i] += g[j];
                               }
                         });
}

}  // namespace

Var reduce_sum(Var a, std::size_t axis) { return reduce_sum_scaled(a, axis, false, "reduce_sum"); }
Var reduce_mean(Var a, std::size_t axis) { return reduce_sum_scaled(a, axis, true, "reduce_mean"); }

Var reduce_max(Var a, std::size_t axis) {
  const AxisSplit s = split_axis(a.shape(), axis, "reduce_max");
  const Segment whole{0, s.extent};
  return segment_max_impl(a, axis, std::span<const Segment>(&whole, 1), drop_axis(a.shape(), axis), "reduce_max");
}

Var segment_max(Var a, std::size_t axis, std::span<const Segment> segments) {
  split_axis(a.shape(), axis, "segment_max");
  if (segments.empty()) throw ShapeError("segment_max: no segments");
  return segment_max_impl(a, axis, segments, with_axis(a.shape(), axis, segments.size()), "segment_max");
}

Var segment_mean(Var a, std::size_t axis, std::span<const Segment> segments) {
  const AxisSplit s = split_axis(a.shape(), axis, "segment_mean");
  if (segments.empty()) throw ShapeError("segment_mean: no segments");
  for (const Segment& seg : segments)
    if (seg.begin >= seg.end || seg.end > s.extent) throw ShapeError("segment_mean: invalid segment");
  const std::size_t nseg = segments.size();
  std::vector<Segment> segs(segments.begin(), segments.end());
  Tensor y(with_axis(a.shape(), axis, nseg));
  const auto x = a.value().data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t q = 0; q < nseg; ++q) {
      double* dst = y.data().data() + (o * nseg + q) * s.inner;
      for (std::size_t k = segs[q].begin; k < segs[q].end; ++k)
        for (std::size_t i = 0; i < s.inner; ++i) dst[i] += x[(o * s.extent + k) * s.inner + i];
      const double inv = 1.0 / static_cast<double>(segs[q].size());
      for (std::size_t i = 0; i < s.inner; ++i) dst[i] *= inv;
    }
  return a.tape().record(std::move(y), {a}, [a, s, segs = std::move(segs)](Tape& t, std::span<const double> g) {
    auto ga = t.grad_buffer(a);
    const std::size_t nseg = segs.size();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t q = 0; q < nseg; ++q) {
        const double inv = 1.0 / static_cast<double>(segs[q].size());
        for (std::size_t k = segs[q].begin; k < segs[q].end; ++k)
          for (std::size_t i = 0; i < s.inner; ++i)
            ga[(o * s.extent + k) * s.inner + i] += g[(o * nseg + q) * s.inner + i] * inv;
      }
  });
}

Var softmax(Var a, std::size_t axis) {
  const AxisSplit s = split_axis(a.shape(), axis, "softmax");
  Tensor y(a.shape());
  const auto x = a.value().data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      double m = x[base];
      for (std::size_t k = 1; k < s.extent; ++k) m = std::max(m, x[base + k * s.inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < s.extent; ++k) {
        const double e = std::exp(x[base + k * s.inner] - m);
        y[base + k * s.inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < s.extent; ++k) y[base + k * s.inner] /= z;
    }
  std::vector<double> saved = y.values();
  return a.tape().record(std::move(y), {a}, [a, s, saved = std::move(saved)](Tape& t, std::span<const double> g) {
    auto ga = t.grad_buffer(a);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.extent * s.inner + i;
        double dotp = 0.0;
        for (std::size_t k = 0; k < s.extent; ++k) dotp += g[base + k * s.inner] * saved[base + k * s.inner];
        for (std::size_t k = 0; k < s.extent; ++k) {
          const std::size_t j = base + k * s.inner;
          ga[j] += saved[j] * (g[j] - dotp);
        }
      }
  });
}

Var reshape(Var a, Shape shape) {
  Tensor y = a.value().reshaped(std::move(shape));
  return a.tape().record(std::move(y), {a}, [a](Tape& t, std::span<const double> g) {
    auto ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Var index_select(Var a, std::size_t axis, std::span<const std::size_t> indices) {
  const AxisSplit s = split_axis(a.shape(), axis, "index_select");
  if (indices.empty()) throw ShapeError("index_select: no indices");
  for (auto k : indices)
    if (k >= s.extent) throw ShapeError("index_select: index " + std::to_string(k) + " out of range");
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  const std::size_t n = idx.size();
  Tensor y(with_axis(a.shape(), axis, n));
  const auto x = a.value().data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t q = 0; q < n; ++q) {
      const double* src = x.data() + (o * s.extent + idx[q]) * s.inner;
      std::copy(src, src + s.inner, y.data().data() + (o * n + q) * s.inner);
    }
  return a.tape().record(std::move(y), {a}, [a, s, idx = std::move(idx)](Tape& t, std::span<const double> g) {
    auto ga = t.grad_buffer(a);
    const std::size_t n = idx.size();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t q = 0; q < n; ++q)
        for (std::size_t i = 0; i < s.inner; ++i)
          ga[(o * s.extent + idx[q]) * s.inner + i] += g[(o * n + q) * s.inner + i];
  });
}

Var pick(Var a, std::span<const std::size_t> index) {
  if (a.shape().size() != 2) throw ShapeError("pick: expects (B,C), got " + shape_str(a.shape()));
  const std::size_t rows = a.shape()[0], cols = a.shape()[1];
  if (index.size() != rows) throw ShapeError("pick: index count does not match batch");
  std::vector<std::size_t> idx(index.begin(), index.end());
  Tensor y(Shape{rows});
  for (std::size_t b = 0; b < rows; ++b) {
    if (idx[b] >= cols) throw std::invalid_argument("pick: index " + std::to_string(idx[b]) + " out of range");
    y[b] = a.value()[b * cols + idx[b]];
  }
  return a.tape().record(std::move(y), {a}, [a, cols, idx = std::move(idx)](Tape& t, std::span<const double> g) {
    auto ga = t.grad_buffer(a);
    for (std::size_t b = 0; b < idx.size(); ++b) ga[b * cols + idx[b]] += g[b];
  });
}

Var conv2d(Var input, Var kernel, std::size_t stride, std::size_t padding) {
  const Shape& xs = input.shape();
  const Shape& ks = kernel.shape();
  if (xs.size() != 4 || ks.size() != 4)
    throw ShapeError("conv2d: expects rank-4 input and kernel, got " + shape_str(xs) + " and " + shape_str(ks));
  if (xs[1] != ks[1])
    throw ShapeError("conv2d: input has " + std::to_string(xs[1]) + " channels but kernel expects " +
                     std::to_string(ks[1]));
  if (stride == 0) throw ShapeError("conv2d: stride must be >= 1");
  const std::size_t B = xs[0], cin = xs[1], H = xs[2], W = xs[3];
  const std::size_t cout = ks[0], kh = ks[2], kw = ks[3];
  if (kh > H + 2 * padding || kw > W + 2 * padding)
    throw ShapeError("conv2d: kernel larger than padded input");
  const std::size_t ho = (H + 2 * padding - kh) / stride + 1;
  const std::size_t wo = (W + 2 * padding - kw) / stride + 1;
  const std::size_t R = cin * kh * kw, P = ho * wo;

  // im2col per sample: cols[b][r][p]
  std::vector<double> cols(B * R * P, 0.0);
  const auto x = input.value().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t ci = 0; ci < cin; ++ci)
      for (std::size_t ky = 0; ky < kh; ++ky)
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const std::size_t r = (ci * kh + ky) * kw + kx;
          double* col = cols.data() + (b * R + r) * P;
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(padding);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const std::ptrdiff_t ix =
                  static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(padding);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
              col[oy * wo + ox] = x[((b * cin + ci) * H + static_cast<std::size_t>(iy)) * W + static_cast<std::size_t>(ix)];
            }
          }
        }

  Tensor y(Shape{B, cout, ho, wo});
  const auto k = kernel.value().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t co = 0; co < cout; ++co) {
      double* out = y.data().data() + (b * cout + co) * P;
      for (std::size_t r = 0; r < R; ++r) {
        const double w = k[co * R + r];
        if (w != 0.0) kernels::axpy(w, cols.data() + (b * R + r) * P, out, P);
      }
    }

  struct Geometry {
    std::size_t B, cin, H, W, cout, kh, kw, ho, wo, stride, padding;
  };
  const Geometry geo{B, cin, H, W, cout, kh, kw, ho, wo, stride, padding};
  return input.tape().record(
      std::move(y), {input, kernel}, [input, kernel, geo, cols = std::move(cols)](Tape& t, std::span<const double> g) {
        const std::size_t R = geo.cin * geo.kh * geo.kw, P = geo.ho * geo.wo;
        if (kernel.requires_grad()) {
          auto gk = t.grad_buffer(kernel);
          for (std::size_t b = 0; b < geo.B; ++b)
            for (std::size_t co = 0; co < geo.cout; ++co) {
              const double* go = g.data() + (b * geo.cout + co) * P;
              for (std::size_t r = 0; r < R; ++r) gk[co * R + r] += kernels::dot(go, cols.data() + (b * R + r) * P, P);
            }
        }
        if (input.requires_grad()) {
          auto gx = t.grad_buffer(input);
          const auto k = kernel.value().data();
          std::vector<double> gcol(R * P);
          for (std::size_t b = 0; b < geo.B; ++b) {
            std::fill(gcol.begin(), gcol.end(), 0.0);
            for (std::size_t co = 0; co < geo.cout; ++co) {
              const double* go = g.data() + (b * geo.cout + co) * P;
              for (std::size_t r = 0; r < R; ++r) {
                const double w = k[co * R + r];
                if (w != 0.0) kernels::axpy(w, go, gcol.data() + r * P, P);
              }
            }
            for (std::size_t ci = 0; ci < geo.cin; ++ci)
              for (std::size_t ky = 0; ky < geo.kh; ++ky)
                for (std::size_t kx = 0; kx < geo.kw; ++kx) {
                  const std::size_t r = (ci * geo.kh + ky) * geo.kw + kx;
                  const double* col = gcol.data() + r * P;
                  for (std::size_t oy = 0; oy < geo.ho; ++oy) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * geo.stride + ky) -
                                              static_cast<std::ptrdiff_t>(geo.padding);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(geo.H)) continue;
                    for (std::size_t ox = 0; ox < geo.wo; ++ox) {
                      const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * geo.stride + kx) -
                                                static_cast<std::ptrdiff_t>(geo.padding);
                      if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(geo.W)) continue;
                      gx[((b * geo.cin + ci) * geo.H + static_cast<std::size_t>(iy)) * geo.W +
                         static_cast<std::size_t>(ix)] += col[oy * geo.wo + ox];
                    }
                  }
                }
          }
        }
      });
}

namespace {
// (B, C, rest) view for per-channel operations.
AxisSplit channel_split(Var x, std::size_t channels, const char* op) {
  if (x.shape().size() < 2) throw ShapeError(std::string(op) + ": expects (B,C,...), got " + shape_str(x.shape()));
  AxisSplit s = split_axis(x.shape(), 1, op);
  if (s.extent != channels)
    throw ShapeError(std::string(op) + ": parameter length " + std::to_string(channels) + " does not match " +
                     std::to_string(s.extent) + " channels");
  return s;
}
}  // namespace

Var add_channel_bias(Var x, Var bias) {
  const AxisSplit s = channel_split(x, bias.value().size(), "add_channel_bias");
  Tensor y = x.value();
  const auto bv = bias.value().data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t c = 0; c < s.extent; ++c)
      for (std::size_t i = 0; i < s.inner; ++i) y[(o * s.extent + c) * s.inner + i] += bv[c];
  return x.tape().record(std::move(y), {x, bias}, [x, bias, s](Tape& t, std::span<const double> g) {
    if (x.requires_grad()) {
      auto gx = t.grad_buffer(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (bias.requires_grad()) {
      auto gb = t.grad_buffer(bias);
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t c = 0; c < s.extent; ++c)
          for (std::size_t i = 0; i < s.inner; ++i) gb[c] += g[(o * s.extent + c) * s.inner + i];
    }
  });
}

Var channel_affine(Var x, Var scale_v, Var shift) {
  const AxisSplit s = channel_split(x, scale_v.value().size(), "channel_affine");
  if (shift.value().size() != s.extent) throw ShapeError("channel_affine: shift length mismatch");
  Tensor y(x.shape());
  const auto xv = x.value().data();
  const auto sv = scale_v.value().data();
  const auto tv = shift.value().data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t c = 0; c < s.extent; ++c)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t j = (o * s.extent + c) * s.inner + i;
        y[j] = xv[j] * sv[c] + tv[c];
      }
  return x.tape().record(std::move(y), {x, scale_v, shift}, [x, scale_v, shift, s](Tape& t, std::span<const double> g) {
    const auto xv = x.value().data();
    const auto sv = scale_v.value().data();
    if (x.requires_grad()) {
      auto gx = t.grad_buffer(x);
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t c = 0; c < s.extent; ++c)
          for (std::size_t i = 0; i < s.inner; ++i) {
            const std::size_t j = (o * s.extent + c) * s.inner + i;
            gx[j] += g[j] * sv[c];
          }
    }
    if (scale_v.requires_grad()) {
      auto gs = t.grad_buffer(scale_v);
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t c = 0; c < s.extent; ++c)
          for (std::size_t i = 0; i < s.inner; ++i) {
            const std::size_t j = (o * s.extent + c) * s.inner + i;
            gs[c] += g[j] * xv[j];
          }
    }
    if (shift.requires_grad()) {
      auto gt = t.grad_buffer(shift);
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t c = 0; c < s.extent; ++c)
          for (std::size_t i = 0; i < s.inner; ++i) gt[c] += g[(o * s.extent + c) * s.inner + i];
    }
  });
}

Var batch_norm(Var x, Var gamma, Var beta, double eps, BatchStats* stats) {
  const AxisSplit s = channel_split(x, gamma.value().size(), "batch_norm");
  if (beta.value().size() != s.extent) throw ShapeError("batch_norm: beta length mismatch");
  const std::size_t C = s.extent;
  const double M = static_cast<double>(s.outer * s.inner);
  const auto xv = x.value().data();
  std::vector<double> mu(C, 0.0), var(C, 0.0), inv_std(C);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < s.inner; ++i) mu[c] += xv[(o * C + c) * s.inner + i];
  for (auto& m : mu) m /= M;
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const double d = xv[(o * C + c) * s.inner + i] - mu[c];
        var[c] += d * d;
      }
  for (std::size_t c = 0; c < C; ++c) {
    var[c] /= M;
    inv_std[c] = 1.0 / std::sqrt(var[c] + eps);
  }
  Tensor xhat(x.shape());
  Tensor y(x.shape());
  const auto gv = gamma.value().data();
  const auto bv = beta.value().data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t j = (o * C + c) * s.inner + i;
        xhat[j] = (xv[j] - mu[c]) * inv_std[c];
        y[j] = gv[c] * xhat[j] + bv[c];
      }
  if (stats) *stats = BatchStats{mu, var};
  return x.tape().record(
      std::move(y), {x, gamma, beta},
      [x, gamma, beta, s, M, inv_std = std::move(inv_std), xhat = std::move(xhat)](Tape& t, std::span<const double> g) {
        const std::size_t C = s.extent;
        std::vector<double> sum_g(C, 0.0), sum_gx(C, 0.0);
        for (std::size_t o = 0; o < s.outer; ++o)
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < s.inner; ++i) {
              const std::size_t j = (o * C + c) * s.inner + i;
              sum_g[c] += g[j];
              sum_gx[c] += g[j] * xhat[j];
            }
        if (gamma.requires_grad()) {
          auto gg = t.grad_buffer(gamma);
          for (std::size_t c = 0; c < C; ++c) gg[c] += sum_gx[c];
        }
        if (beta.requires_grad()) {
          auto gb = t.grad_buffer(beta);
          for (std::size_t c = 0; c < C; ++c) gb[c] += sum_g[c];
        }
        if (x.requires_grad()) {
          auto gx = t.grad_buffer(x);
          const auto gv = gamma.value().data();
          for (std::size_t o = 0; o < s.outer; ++o)
            for (std::size_t c = 0; c < C; ++c) {
              const double k = gv[c] * inv_std[c] / M;
              for (std::size_t i = 0; i < s.inner; ++i) {
                const std::size_t j = (o * C + c) * s.inner + i;
                gx[j] += k * (M * g[j] - sum_g[c] - xhat[j] * sum_gx[c]);
              }
            }
        }
      });
}

Var linear(Var x, Var weight, Var bias) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (xs.size() != 2 || ws.size() != 2 || xs[1] != ws[1] || bias.value().size() != ws[0])
    throw ShapeError("linear: incompatible shapes x" + shape_str(xs) + " w" + shape_str(ws) + " b" +
                     shape_str(bias.shape()));
  const std::size_t B = xs[0], in = xs[1], out = ws[0];
  Tensor y(Shape{B, out});
  const auto xv = x.value().data();
  const auto wv = weight.value().data();
  const auto bv = bias.value().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < out; ++o) y[b * out + o] = kernels::dot(wv.data() + o * in, xv.data() + b * in, in) + bv[o];
  return x.tape().record(std::move(y), {x, weight, bias}, [x, weight, bias, B, in, out](Tape& t, std::span<const double> g) {
    if (x.requires_grad()) {
      auto gx = t.grad_buffer(x);
      const auto wv = weight.value().data();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t o = 0; o < out; ++o) kernels::axpy(g[b * out + o], wv.data() + o * in, gx.data() + b * in, in);
    }
    if (weight.requires_grad()) {
      auto gw = t.grad_buffer(weight);
      const auto xv = x.value().data();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t o = 0; o < out; ++o) kernels::axpy(g[b * out + o], xv.data() + b * in, gw.data() + o * in, in);
    }
    if (bias.requires_grad()) {
      auto gb = t.grad_buffer(bias);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t o = 0; o < out; ++o) gb[o] += g[b * out + o];
    }
  });
}

Var cross_entropy(Var logits, std::span<const std::size_t> labels) {
  const Shape& ls = logits.shape();
  if (ls.size() != 2) throw ShapeError("cross_entropy: logits must be (B,C), got " + shape_str(ls));
  const std::size_t B = ls[0], C = ls[1];
  if (labels.size() != B) throw ShapeError("cross_entropy: label count does not match batch");
  for (auto y : labels)
    if (y >= C)
      throw std::invalid_argument("cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(C) + ")");
  const auto z = logits.value().data();
  std::vector<double> prob(B * C);
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    const double* row = z.data() + b * C;
    std::size_t am = 0;
    for (std::size_t c = 1; c < C; ++c)
      if (row[c] > row[am]) am = c;
    const double m = row[am];
    double rest = 0.0;
    for (std::size_t c = 0; c < C; ++c)
      if (c != am) rest += std::exp(row[c] - m);
    const double lse = m + std::log1p(rest);
    for (std::size_t c = 0; c < C; ++c) prob[b * C + c] = std::exp(row[c] - lse);
    total += lse - row[labels[b]];
  }
  std::vector<std::size_t> y(labels.begin(), labels.end());
  return logits.tape().record(Tensor::scalar(total / static_cast<double>(B)), {logits},
                              [logits, B, C, prob = std::move(prob), y = std::move(y)](Tape& t, std::span<const double> g) {
                                auto gl = t.grad_buffer(logits);
                                const double k = g[0] / static_cast<double>(B);
                                for (std::size_t b = 0; b < B; ++b)
                                  for (std::size_t c = 0; c < C; ++c)
                                    gl[b * C + c] += k * (prob[b * C + c] - (c == y[b] ? 1.0 : 0.0));
                              });
}

}  // namespace mcl::ad
