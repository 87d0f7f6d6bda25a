#pragma once

// Reverse-mode autodiff on dense row-major tensors.
//
// A Tensor is a shared handle to one node of a dynamically recorded
// computation graph.  Ops validate shapes first, compute values eagerly, and
// record a backward closure plus owning links to their inputs -- but only
// when some input participates in gradients, so inference-style calls build
// no graph at all.  backward(loss) walks the recorded graph once in reverse
// topological order and accumulates d(loss)/d(node) into every reachable
// node.  Everything is single-threaded and iteration-order deterministic:
// reductions accumulate left to right in row-major element order, which makes
// repeated runs bitwise identical.
//
// Broadcasting uses the suffix rule only: two shapes combine elementwise when
// they are equal or when one is a trailing suffix of the other (a scalar is a
// suffix of everything).

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mcr/rng.hpp"
#include "mcr/util.hpp"

namespace mcr {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
  os << ')';
  return os.str();
}

namespace detail {

// Process-wide count of graph node allocations.  Tests use deltas of this
// counter to prove that cheaper code paths really do build smaller graphs.
inline std::atomic<std::uint64_t> g_node_allocs{0};

}  // namespace detail

inline std::uint64_t node_allocations() noexcept {
  return detail::g_node_allocs.load(std::memory_order_relaxed);
}

template <typename Real>
struct Node {
  Shape shape;
  std::vector<Real> value;
  std::vector<Real> grad;  // empty until backward first touches this node
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const Node&)> backward;  // distributes self.grad to parents

  Node(Shape s, bool rg)
      : shape(std::move(s)), value(shape_numel(shape), Real(0)), requires_grad(rg) {
    detail::g_node_allocs.fetch_add(1, std::memory_order_relaxed);
  }

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), Real(0));
  }
};

template <typename Real>
class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Shape shape, std::vector<Real> values) {
    if (values.size() != shape_numel(shape))
      fail_invalid("tensor: ", values.size(), " values for shape ", shape_str(shape));
    Tensor t(std::make_shared<Node<Real>>(std::move(shape), false));
    t.node_->value = std::move(values);
    return t;
  }
  static Tensor full(Shape shape, Real v) {
    Tensor t(std::make_shared<Node<Real>>(std::move(shape), false));
    std::fill(t.node_->value.begin(), t.node_->value.end(), v);
    return t;
  }
  static Tensor zeros(Shape shape) {
    return Tensor(std::make_shared<Node<Real>>(std::move(shape), false));
  }
  static Tensor scalar(Real v) { return full(Shape{}, v); }

  // Trainable leaf: participates in backward.
  static Tensor param(Shape shape, std::vector<Real> values) {
    Tensor t = constant(std::move(shape), std::move(values));
    t.node_->requires_grad = true;
    return t;
  }

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node()->shape; }
  std::size_t rank() const { return node()->shape.size(); }
  std::size_t size() const { return node()->value.size(); }
  bool requires_grad() const { return node()->requires_grad; }

  const std::vector<Real>& value() const { return node()->value; }

  // In-place access for leaves (optimizer updates, parameter loading).
  // Interior graph nodes are immutable once created.
  std::vector<Real>& value_mut() {
    if (!node()->parents.empty() || node()->backward)
      fail_invalid("tensor: value_mut on an interior graph node");
    return node()->value;
  }

  Real item() const {
    if (size() != 1) fail_invalid("tensor: item() on shape ", shape_str(shape()));
    return node()->value[0];
  }

  bool has_grad() const { return !node()->grad.empty(); }
  const std::vector<Real>& grad() const {
    if (node()->grad.empty())
      fail_invalid("tensor: gradient not populated (no backward reached this node)");
    return node()->grad;
  }
  void zero_grad() { node()->grad.clear(); }

  // Value copy with no history; never requires grad.
  Tensor detach() const { return constant(node()->shape, node()->value); }

  std::shared_ptr<Node<Real>> node_ptr() const { return node_; }

  explicit Tensor(std::shared_ptr<Node<Real>> n) : node_(std::move(n)) {}

 private:
  const std::shared_ptr<Node<Real>>& node() const {
    if (!node_) fail_invalid("tensor: use of default-constructed handle");
    return node_;
  }
  std::shared_ptr<Node<Real>> node_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

// ---------------------------------------------------------------------------
// op plumbing
// ---------------------------------------------------------------------------

namespace detail {

template <typename Real>
Tensor<Real> make_result(Shape shape, bool track,
                         std::vector<std::shared_ptr<Node<Real>>> parents,
                         std::function<void(const Node<Real>&)> backward) {
  auto n = std::make_shared<Node<Real>>(std::move(shape), track);
  if (track) {
    n->parents = std::move(parents);
    n->backward = std::move(backward);
  }
  return Tensor<Real>(std::move(n));
}

template <typename Real>
bool tracked(const Tensor<Real>& t) {
  return t.requires_grad();
}

// True when `small` is a trailing suffix of `big` (scalars match everything).
inline bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

enum class Bcast { kSame, kALarger, kBLarger };

inline Bcast broadcast_kind(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return Bcast::kSame;
  if (is_suffix(b, a)) return Bcast::kALarger;
  if (is_suffix(a, b)) return Bcast::kBLarger;
  fail_invalid(op, ": shapes ", shape_str(a), " and ", shape_str(b),
               " do not broadcast (suffix rule)");
}

// grad of a broadcast operand: reduce the full-shape gradient back down by
// summing over the leading (replicated) positions.
template <typename Real>
void reduce_into(std::vector<Real>& dst, const std::vector<Real>& src) {
  const std::size_t n = dst.size();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i % n] += src[i];
}

// Iteration frame for ops that act along one axis of a row-major tensor:
// flat index = (o * n + i) * inner + j with o < outer, i < n, j < inner.
struct AxisLanes {
  std::size_t outer, n, inner;
};

inline AxisLanes axis_lanes(const Shape& s, std::size_t axis, const char* op) {
  if (axis >= s.size())
    fail_invalid(op, ": axis ", axis, " out of range for shape ", shape_str(s));
  AxisLanes l{1, s[axis], 1};
  for (std::size_t d = 0; d < axis; ++d) l.outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) l.inner *= s[d];
  return l;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise binary ops (suffix broadcasting)
// ---------------------------------------------------------------------------

namespace detail {

// Shared skeleton for add/sub/mul.  `fwd(a, b)` computes one element;
// `bwd(self, a_node, b_node, kind)` distributes gradients.
template <typename Real, typename Fwd>
Tensor<Real> binary_elementwise(const Tensor<Real>& a, const Tensor<Real>& b,
                                const char* op, Fwd fwd,
                                std::function<void(const Node<Real>&, Node<Real>&,
                                                   Node<Real>&, Bcast)>
                                    bwd) {
  const Bcast kind = broadcast_kind(a.shape(), b.shape(), op);
  const Shape& out_shape = (kind == Bcast::kBLarger) ? b.shape() : a.shape();
  const auto& av = a.value();
  const auto& bv = b.value();
  const bool track = tracked(a) || tracked(b);

  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  std::function<void(const Node<Real>&)> backward;
  if (track) {
    backward = [an, bn, bwd, kind](const Node<Real>& self) {
      bwd(self, *an, *bn, kind);
    };
  }
  Tensor<Real> out = make_result<Real>(out_shape, track, {an, bn}, std::move(backward));
  auto& ov = out.node_ptr()->value;
  switch (kind) {
    case Bcast::kSame:
      for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = fwd(av[i], bv[i]);
      break;
    case Bcast::kALarger: {
      const std::size_t nb = bv.size();
      for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = fwd(av[i], bv[i % nb]);
      break;
    }
    case Bcast::kBLarger: {
      const std::size_t na = av.size();
      for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = fwd(av[i % na], bv[i]);
      break;
    }
  }
  return out;
}

}  // namespace detail

template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
  using detail::Bcast;
  return detail::binary_elementwise<Real>(
      a, b, "add", [](Real x, Real y) { return x + y; },
      [](const Node<Real>& self, Node<Real>& an, Node<Real>& bn, Bcast kind) {
        if (an.requires_grad) {
          an.ensure_grad();
          if (kind == Bcast::kBLarger)
            detail::reduce_into(an.grad, self.grad);
          else
            for (std::size_t i = 0; i < self.grad.size(); ++i) an.grad[i] += self.grad[i];
        }
        if (bn.requires_grad) {
          bn.ensure_grad();
          if (kind == Bcast::kALarger)
            detail::reduce_into(bn.grad, self.grad);
          else
            for (std::size_t i = 0; i < self.grad.size(); ++i) bn.grad[i] += self.grad[i];
        }
      });
}

template <typename Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
  using detail::Bcast;
  return detail::binary_elementwise<Real>(
      a, b, "sub", [](Real x, Real y) { return x - y; },
      [](const Node<Real>& self, Node<Real>& an, Node<Real>& bn, Bcast kind) {
        if (an.requires_grad) {
          an.ensure_grad();
          if (kind == Bcast::kBLarger)
            detail::reduce_into(an.grad, self.grad);
          else
            for (std::size_t i = 0; i < self.grad.size(); ++i) an.grad[i] += self.grad[i];
        }
        if (bn.requires_grad) {
          bn.ensure_grad();
          if (kind == Bcast::kALarger) {
            const std::size_t n = bn.grad.size();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
              bn.grad[i % n] -= self.grad[i];
          } else {
            for (std::size_t i = 0; i < self.grad.size(); ++i) bn.grad[i] -= self.grad[i];
          }
        }
      });
}

template <typename Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
  using detail::Bcast;
  return detail::binary_elementwise<Real>(
      a, b, "mul", [](Real x, Real y) { return x * y; },
      [](const Node<Real>& self, Node<Real>& an, Node<Real>& bn, Bcast kind) {
        const auto& g = self.grad;
        const auto& av = an.value;
        const auto& bv = bn.value;
        if (an.requires_grad) {
          an.ensure_grad();
          auto& da = an.grad;
          switch (kind) {
            case Bcast::kSame:
              for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * bv[i];
              break;
            case Bcast::kALarger: {
              const std::size_t nb = bv.size();
              for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * bv[i % nb];
              break;
            }
            case Bcast::kBLarger: {
              const std::size_t na = av.size();
              for (std::size_t i = 0; i < g.size(); ++i) da[i % na] += g[i] * bv[i];
              break;
            }
          }
        }
        if (bn.requires_grad) {
          bn.ensure_grad();
          auto& db = bn.grad;
          switch (kind) {
            case Bcast::kSame:
              for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * av[i];
              break;
            case Bcast::kALarger: {
              const std::size_t nb = bv.size();
              for (std::size_t i = 0; i < g.size(); ++i) db[i % nb] += g[i] * av[i];
              break;
            }
            case Bcast::kBLarger: {
              const std::size_t na = av.size();
              for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * av[i % na];
              break;
            }
          }
        }
      });
}

// Multiply by a compile-time-known host scalar (not a graph node).
template <typename Real>
Tensor<Real> scale(const Tensor<Real>& x, Real c) {
  const bool track = detail::tracked(x);
  auto xn = x.node_ptr();
  auto out = detail::make_result<Real>(
      x.shape(), track, {xn}, [xn, c](const Node<Real>& self) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          xn->grad[i] += self.grad[i] * c;
      });
  auto& ov = out.node_ptr()->value;
  const auto& xv = x.value();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] * c;
  return out;
}

// Add a host scalar to every element.
template <typename Real>
Tensor<Real> add_scalar(const Tensor<Real>& x, Real c) {
  const bool track = detail::tracked(x);
  auto xn = x.node_ptr();
  auto out = detail::make_result<Real>(
      x.shape(), track, {xn}, [xn](const Node<Real>& self) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
      });
  auto& ov = out.node_ptr()->value;
  const auto& xv = x.value();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] + c;
  return out;
}

// Value copy that stays in the graph.  Its purpose is gradient grouping: a
// fresh identity node gives a set of consumers their own zero-initialized
// accumulator, so their combined gradient is summed in full before it joins
// any other accumulation.  Duplicated consumer sets then contribute an exact
// power-of-two multiple of the single set's sum, which is what makes the
// dual-pass/single-pass trajectory algebra hold bitwise.
template <typename Real>
Tensor<Real> identity(const Tensor<Real>& x) {
  const bool track = detail::tracked(x);
  auto xn = x.node_ptr();
  auto out = detail::make_result<Real>(
      x.shape(), track, {xn}, [xn](const Node<Real>& self) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
      });
  out.node_ptr()->value = x.value();
  return out;
}

// ---------------------------------------------------------------------------
// linear algebra and layout
// ---------------------------------------------------------------------------

template <typename Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.rank() != 2 || b.rank() != 2)
    fail_invalid("matmul: expects rank-2 operands, got ", shape_str(a.shape()), " x ",
                 shape_str(b.shape()));
  const std::size_t m = a.shape()[0], k = a.shape()[1];
  const std::size_t k2 = b.shape()[0], n = b.shape()[1];
  if (k != k2)
    fail_invalid("matmul: inner dimensions differ, ", shape_str(a.shape()), " x ",
                 shape_str(b.shape()));
  const bool track = detail::tracked(a) || detail::tracked(b);
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  auto out = detail::make_result<Real>(
      Shape{m, n}, track, {an, bn}, [an, bn, m, k, n](const Node<Real>& self) {
        const auto& g = self.grad;
        if (an->requires_grad) {
          an->ensure_grad();
          auto& da = an->grad;
          const auto& bv = bn->value;
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              Real acc = 0;
              const Real* gr = g.data() + i * n;
              const Real* br = bv.data() + p * n;
              for (std::size_t j = 0; j < n; ++j) acc += gr[j] * br[j];
              da[i * k + p] += acc;
            }
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          auto& db = bn->grad;
          const auto& av = an->value;
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              const Real aip = av[i * k + p];
              const Real* gr = g.data() + i * n;
              Real* dbr = db.data() + p * n;
              for (std::size_t j = 0; j < n; ++j) dbr[j] += aip * gr[j];
            }
        }
      });
  auto& ov = out.node_ptr()->value;
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const Real aip = av[i * k + p];
      const Real* br = bv.data() + p * n;
      Real* orow = ov.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * br[j];
    }
  return out;
}

template <typename Real>
Tensor<Real> transpose(const Tensor<Real>& x) {
  if (x.rank() != 2)
    fail_invalid("transpose: expects rank 2, got ", shape_str(x.shape()));
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  const bool track = detail::tracked(x);
  auto xn = x.node_ptr();
  auto out = detail::make_result<Real>(
      Shape{n, m}, track, {xn}, [xn, m, n](const Node<Real>& self) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j)
            xn->grad[i * n + j] += self.grad[j * m + i];
      });
  auto& ov = out.node_ptr()->value;
  const auto& xv = x.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) ov[j * m + i] = xv[i * n + j];
  return out;
}

template <typename Real>
Tensor<Real> reshape(const Tensor<Real>& x, Shape shape) {
  if (shape_numel(shape) != x.size())
    fail_invalid("reshape: cannot view ", shape_str(x.shape()), " as ", shape_str(shape));
  const bool track = detail::tracked(x);
  auto xn = x.node_ptr();
  auto out = detail::make_result<Real>(
      std::move(shape), track, {xn}, [xn](const Node<Real>& self) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
      });
  out.node_ptr()->value = x.value();
  return out;
}

template <typename Real>
Tensor<Real> concat(const std::vector<Tensor<Real>>& parts, std::size_t axis) {
  if (parts.empty()) fail_invalid("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size())
    fail_invalid("concat: axis ", axis, " out of range for shape ", shape_str(s0));
  Shape out_shape = s0;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != s0.size())
      fail_invalid("concat: rank mismatch ", shape_str(s0), " vs ", shape_str(s));
    for (std::size_t d = 0; d < s.size(); ++d)
      if (d != axis && s[d] != s0[d])
        fail_invalid("concat: shapes ", shape_str(s0), " and ", shape_str(s),
                     " differ outside axis ", axis);
    out_shape[axis] += s[axis];
  }
  bool track = false;
  std::vector<std::shared_ptr<Node<Real>>> pn;
  pn.reserve(parts.size());
  for (const auto& p : parts) {
    pn.push_back(p.node_ptr());
    track = track || p.requires_grad();
  }
  const auto lanes = detail::axis_lanes(out_shape, axis, "concat");
  // Per-part extent along the axis, flattened with the inner stride.
  std::vector<std::size_t> spans;
  spans.reserve(parts.size());
  for (const auto& p : parts) spans.push_back(p.shape()[axis] * lanes.inner);
  const std::size_t out_span = lanes.n * lanes.inner;

  auto out = detail::make_result<Real>(
      out_shape, track, pn, [pn, spans, out_span](const Node<Real>& self) {
        std::size_t off = 0;
        for (std::size_t q = 0; q < pn.size(); ++q) {
          auto& p = *pn[q];
          if (p.requires_grad) {
            p.ensure_grad();
            const std::size_t outer = p.value.size() / spans[q];
            for (std::size_t o = 0; o < outer; ++o)
              for (std::size_t j = 0; j < spans[q]; ++j)
                p.grad[o * spans[q] + j] += self.grad[o * out_span + off + j];
          }
          off += spans[q];
        }
      });
  auto& ov = out.node_ptr()->value;
  std::size_t off = 0;
  for (std::size_t q = 0; q < parts.size(); ++q) {
    const auto& pv = parts[q].value();
    const std::size_t outer = pv.size() / spans[q];
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t j = 0; j < spans[q]; ++j)
        ov[o * out_span + off + j] = pv[o * spans[q] + j];
    off += spans[q];
  }
  return out;
}

// Half-open range [lo, hi) along `axis`.
template <typename Real>
Tensor<Real> slice(const Tensor<Real>& x, std::size_t axis, std::size_t lo,
                   std::size_t hi) {
  const auto lanes = detail::axis_lanes(x.shape(), axis, "slice");
  if (lo >= hi || hi > lanes.n)
    fail_invalid("slice: range [", lo, ", ", hi, ") invalid for axis extent ", lanes.n);
  Shape out_shape = x.shape();
  out_shape[axis] = hi - lo;
  const bool track = detail::tracked(x);
  auto xn = x.node_ptr();
  const std::size_t in_span = lanes.n * lanes.inner;
  const std::size_t out_span = (hi - lo) * lanes.inner;
  const std::size_t start = lo * lanes.inner;
  auto out = detail::make_result<Real>(
      out_shape, track, {xn},
      [xn, in_span, out_span, start](const Node<Real>& self) {
        xn->ensure_grad();
        const std::size_t outer = self.grad.size() / out_span;
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t j = 0; j < out_span; ++j)
            xn->grad[o * in_span + start + j] += self.grad[o * out_span + j];
      });
  auto& ov = out.node_ptr()->value;
  const auto& xv = x.value();
  const std::size_t outer = ov.size() / out_span;
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < out_span; ++j)
      ov[o * out_span + j] = xv[o * in_span + start + j];
  return out;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename Real>
Tensor<Real> sum(const Tensor<Real>& x) {
  const bool track = detail::tracked(x);
  auto xn = x.node_ptr();
  auto out = detail::make_result<Real>(
      Shape{}, track, {xn}, [xn](const Node<Real>& self) {
        xn->ensure_grad();
        const Real g = self.grad[0];
        for (auto& d : xn->grad) d += g;
      });
  Real acc = 0;
  for (Real v : x.value()) acc += v;
  out.node_ptr()->value[0] = acc;
  return out;
}

template <typename Real>
Tensor<Real> mean(const Tensor<Real>& x) {
  if (x.size() == 0) fail_invalid("mean: empty tensor");
  const Real inv_n = Real(1) / static_cast<Real>(x.size());
  const bool track = detail::tracked(x);
  auto xn = x.node_ptr();
  auto out = detail::make_result<Real>(
      Shape{}, track, {xn}, [xn, inv_n](const Node<Real>& self) {
        xn->ensure_grad();
        const Real g = self.grad[0] * inv_n;
        for (auto& d : xn->grad) d += g;
      });
  Real acc = 0;
  for (Real v : x.value()) acc += v;
  out.node_ptr()->value[0] = acc * inv_n;
  return out;
}

namespace detail {

template <typename Real>
Tensor<Real> reduce_axis(const Tensor<Real>& x, std::size_t axis, bool take_mean,
                         const char* op) {
  const auto l = axis_lanes(x.shape(), axis, op);
  Shape out_shape;
  for (std::size_t d = 0; d < x.rank(); ++d)
    if (d != axis) out_shape.push_back(x.shape()[d]);
  const Real w = take_mean ? Real(1) / static_cast<Real>(l.n) : Real(1);
  const bool track = tracked(x);
  auto xn = x.node_ptr();
  auto out = make_result<Real>(
      out_shape, track, {xn}, [xn, l, w](const Node<Real>& self) {
        xn->ensure_grad();
        for (std::size_t o = 0; o < l.outer; ++o)
          for (std::size_t i = 0; i < l.n; ++i)
            for (std::size_t j = 0; j < l.inner; ++j)
              xn->grad[(o * l.n + i) * l.inner + j] +=
                  self.grad[o * l.inner + j] * w;
      });
  auto& ov = out.node_ptr()->value;
  const auto& xv = x.value();
  for (std::size_t o = 0; o < l.outer; ++o)
    for (std::size_t i = 0; i < l.n; ++i)
      for (std::size_t j = 0; j < l.inner; ++j)
        ov[o * l.inner + j] += xv[(o * l.n + i) * l.inner + j];
  if (take_mean)
    for (auto& v : ov) v *= w;
  return out;
}

}  // namespace detail

template <typename Real>
Tensor<Real> sum_axis(const Tensor<Real>& x, std::size_t axis) {
  return detail::reduce_axis(x, axis, false, "sum_axis");
}

template <typename Real>
Tensor<Real> mean_axis(const Tensor<Real>& x, std::size_t axis) {
  return detail::reduce_axis(x, axis, true, "mean_axis");
}

// ---------------------------------------------------------------------------
// elementwise unary ops
// ---------------------------------------------------------------------------

namespace detail {

template <typename Real, typename Fwd, typename Bwd>
Tensor<Real> unary_op(const Tensor<Real>& x, Fwd fwd, Bwd bwd) {
  const bool track = tracked(x);
  auto xn = x.node_ptr();
  auto out = make_result<Real>(
      x.shape(), track, {xn}, [xn, bwd](const Node<Real>& self) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          xn->grad[i] += self.grad[i] * bwd(xn->value[i], self.value[i]);
      });
  auto& ov = out.node_ptr()->value;
  const auto& xv = x.value();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = fwd(xv[i]);
  return out;
}

}  // namespace detail

template <typename Real>
Tensor<Real> square(const Tensor<Real>& x) {
  return detail::unary_op(
      x, [](Real v) { return v * v; },
      [](Real v, Real /*y*/) { return Real(2) * v; });
}

// Domain: values must be non-negative; the derivative additionally needs
// strictly positive inputs.
template <typename Real>
Tensor<Real> sqrt(const Tensor<Real>& x) {
  for (Real v : x.value())
    if (v < Real(0)) fail_invalid("sqrt: negative input ", v);
  return detail::unary_op(
      x, [](Real v) { return std::sqrt(v); },
      [](Real /*v*/, Real y) { return Real(1) / (Real(2) * y); });
}

template <typename Real>
Tensor<Real> exp(const Tensor<Real>& x) {
  return detail::unary_op(
      x, [](Real v) { return std::exp(v); },
      [](Real /*v*/, Real y) { return y; });
}

// Domain: strictly positive values.
template <typename Real>
Tensor<Real> log(const Tensor<Real>& x) {
  for (Real v : x.value())
    if (v <= Real(0)) fail_invalid("log: non-positive input ", v);
  return detail::unary_op(
      x, [](Real v) { return std::log(v); },
      [](Real v, Real /*y*/) { return Real(1) / v; });
}

// Exact (erf-based) GELU: x * Phi(x).
template <typename Real>
Tensor<Real> gelu(const Tensor<Real>& x) {
  constexpr Real kInvSqrt2 = Real(0.7071067811865475244008443621048490393L);
  constexpr Real kInvSqrt2Pi = Real(0.3989422804014326779399460599343818685L);
  return detail::unary_op(
      x,
      [=](Real v) {
        return Real(0.5) * v * (Real(1) + std::erf(v * kInvSqrt2));
      },
      [=](Real v, Real /*y*/) {
        const Real phi_cdf = Real(0.5) * (Real(1) + std::erf(v * kInvSqrt2));
        const Real phi_pdf = kInvSqrt2Pi * std::exp(Real(-0.5) * v * v);
        return phi_cdf + v * phi_pdf;
      });
}

// ---------------------------------------------------------------------------
// axis-wise normalizers
// ---------------------------------------------------------------------------

// Numerically stable softmax along `axis` (shift by the lane max).
template <typename Real>
Tensor<Real> softmax(const Tensor<Real>& x, std::size_t axis) {
  const auto l = detail::axis_lanes(x.shape(), axis, "softmax");
  const bool track = detail::tracked(x);
  auto xn = x.node_ptr();
  auto out = detail::make_result<Real>(
      x.shape(), track, {xn}, [xn, l](const Node<Real>& self) {
        xn->ensure_grad();
        for (std::size_t o = 0; o < l.outer; ++o)
          for (std::size_t j = 0; j < l.inner; ++j) {
            Real dot = 0;
            for (std::size_t i = 0; i < l.n; ++i) {
              const std::size_t at = (o * l.n + i) * l.inner + j;
              dot += self.grad[at] * self.value[at];
            }
            for (std::size_t i = 0; i < l.n; ++i) {
              const std::size_t at = (o * l.n + i) * l.inner + j;
              xn->grad[at] += self.value[at] * (self.grad[at] - dot);
            }
          }
      });
  auto& ov = out.node_ptr()->value;
  const auto& xv = x.value();
  for (std::size_t o = 0; o < l.outer; ++o)
    for (std::size_t j = 0; j < l.inner; ++j) {
      Real mx = xv[(o * l.n) * l.inner + j];
      for (std::size_t i = 1; i < l.n; ++i)
        mx = std::max(mx, xv[(o * l.n + i) * l.inner + j]);
      Real denom = 0;
      for (std::size_t i = 0; i < l.n; ++i) {
        const std::size_t at = (o * l.n + i) * l.inner + j;
        ov[at] = std::exp(xv[at] - mx);
        denom += ov[at];
      }
      const Real inv = Real(1) / denom;
      for (std::size_t i = 0; i < l.n; ++i) ov[(o * l.n + i) * l.inner + j] *= inv;
    }
  return out;
}

// Per-lane standardization along `axis` with population variance:
// y = (x - mean) / sqrt(var + eps).  No affine part; compose with mul/add
// for a learned gain and bias.
template <typename Real>
Tensor<Real> layer_norm(const Tensor<Real>& x, std::size_t axis, Real eps) {
  if (!(eps > Real(0))) fail_invalid("layer_norm: eps must be positive");
  const auto l = detail::axis_lanes(x.shape(), axis, "layer_norm");
  const bool track = detail::tracked(x);
  auto xn = x.node_ptr();

  // Forward pass; inv-sigma per lane is reused by the backward closure.
  auto inv_sigma = std::make_shared<std::vector<Real>>(l.outer * l.inner);
  auto out = detail::make_result<Real>(
      x.shape(), track, {xn}, [xn, l, inv_sigma](const Node<Real>& self) {
        xn->ensure_grad();
        const Real inv_n = Real(1) / static_cast<Real>(l.n);
        for (std::size_t o = 0; o < l.outer; ++o)
          for (std::size_t j = 0; j < l.inner; ++j) {
            Real gsum = 0, gydot = 0;
            for (std::size_t i = 0; i < l.n; ++i) {
              const std::size_t at = (o * l.n + i) * l.inner + j;
              gsum += self.grad[at];
              gydot += self.grad[at] * self.value[at];
            }
            const Real gmean = gsum * inv_n;
            const Real gymean = gydot * inv_n;
            const Real is = (*inv_sigma)[o * l.inner + j];
            for (std::size_t i = 0; i < l.n; ++i) {
              const std::size_t at = (o * l.n + i) * l.inner + j;
              xn->grad[at] +=
                  is * (self.grad[at] - gmean - self.value[at] * gymean);
            }
          }
      });
  auto& ov = out.node_ptr()->value;
  const auto& xv = x.value();
  const Real inv_n = Real(1) / static_cast<Real>(l.n);
  for (std::size_t o = 0; o < l.outer; ++o)
    for (std::size_t j = 0; j < l.inner; ++j) {
      Real s = 0;
      for (std::size_t i = 0; i < l.n; ++i) s += xv[(o * l.n + i) * l.inner + j];
      const Real mu = s * inv_n;
      Real v = 0;
      for (std::size_t i = 0; i < l.n; ++i) {
        const Real d = xv[(o * l.n + i) * l.inner + j] - mu;
        v += d * d;
      }
      const Real is = Real(1) / std::sqrt(v * inv_n + eps);
      (*inv_sigma)[o * l.inner + j] = is;
      for (std::size_t i = 0; i < l.n; ++i) {
        const std::size_t at = (o * l.n + i) * l.inner + j;
        ov[at] = (xv[at] - mu) * is;
      }
    }
  return out;
}

// ---------------------------------------------------------------------------
// dropout
// ---------------------------------------------------------------------------

// Deterministic half of dropout: zero the dropped elements and rescale the
// kept ones by 1/(1-rate).  Exposed separately so a recorded mask can be
// replayed (and finite-difference-checked) exactly.
template <typename Real>
Tensor<Real> apply_dropout_mask(const Tensor<Real>& x,
                                const std::vector<std::uint8_t>& keep, double rate) {
  if (keep.size() != x.size())
    fail_invalid("dropout: mask size ", keep.size(), " vs tensor ", x.size());
  if (!(rate >= 0.0 && rate < 1.0)) fail_invalid("dropout: rate ", rate, " not in [0, 1)");
  const Real s = Real(1) / static_cast<Real>(1.0 - rate);
  const bool track = detail::tracked(x);
  auto xn = x.node_ptr();
  auto out = detail::make_result<Real>(
      x.shape(), track, {xn}, [xn, keep, s](const Node<Real>& self) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          if (keep[i]) xn->grad[i] += self.grad[i] * s;
      });
  auto& ov = out.node_ptr()->value;
  const auto& xv = x.value();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = keep[i] ? xv[i] * s : Real(0);
  return out;
}

template <typename Real>
struct DropoutResult {
  Tensor<Real> value;
  std::vector<std::uint8_t> keep;  // empty when dropout was a no-op
};

// Inverted dropout.  Each element is dropped independently with probability
// `rate`, drawn from `rng` in row-major order.  When `training` is false or
// rate == 0 the input tensor is returned unchanged (same node, no draws), so
// evaluation never perturbs the stream.
template <typename Real>
DropoutResult<Real> dropout(const Tensor<Real>& x, double rate, RngStream& rng,
                            bool training) {
  if (!(rate >= 0.0 && rate < 1.0)) fail_invalid("dropout: rate ", rate, " not in [0, 1)");
  if (!training || rate == 0.0) return {x, {}};
  std::vector<std::uint8_t> keep(x.size());
  for (std::size_t i = 0; i < keep.size(); ++i)
    keep[i] = rng.next_bernoulli(rate) ? 0 : 1;
  return {apply_dropout_mask(x, keep, rate), std::move(keep)};
}

// ---------------------------------------------------------------------------
// 1-d convolution over (time, channels)
// ---------------------------------------------------------------------------

// x: (T, C_in), w: (C_out, K, C_in), b: (C_out).  Zero padding of pad_l / pad_r
// frames on each side; output length (T + pad_l + pad_r - K) / stride + 1.
template <typename Real>
Tensor<Real> conv1d(const Tensor<Real>& x, const Tensor<Real>& w, const Tensor<Real>& b,
                    std::size_t stride, std::size_t pad_l, std::size_t pad_r) {
  if (x.rank() != 2 || w.rank() != 3 || b.rank() != 1)
    fail_invalid("conv1d: expects x (T, C_in), w (C_out, K, C_in), b (C_out); got ",
                 shape_str(x.shape()), ", ", shape_str(w.shape()), ", ",
                 shape_str(b.shape()));
  const std::size_t t_in = x.shape()[0], c_in = x.shape()[1];
  const std::size_t c_out = w.shape()[0], k = w.shape()[1];
  if (w.shape()[2] != c_in)
    fail_invalid("conv1d: weight C_in ", w.shape()[2], " vs input C_in ", c_in);
  if (b.shape()[0] != c_out)
    fail_invalid("conv1d: bias size ", b.shape()[0], " vs C_out ", c_out);
  if (stride == 0) fail_invalid("conv1d: stride must be positive");
  if (t_in + pad_l + pad_r < k)
    fail_invalid("conv1d: input length ", t_in, " (+pad ", pad_l + pad_r,
                 ") shorter than kernel ", k);
  const std::size_t t_out = (t_in + pad_l + pad_r - k) / stride + 1;

  const bool track = detail::tracked(x) || detail::tracked(w) || detail::tracked(b);
  auto xn = x.node_ptr();
  auto wn = w.node_ptr();
  auto bn = b.node_ptr();
  auto out = detail::make_result<Real>(
      Shape{t_out, c_out}, track, {xn, wn, bn},
      [xn, wn, bn, t_in, c_in, c_out, k, stride, pad_l, t_out](const Node<Real>& self) {
        const auto& g = self.grad;
        const auto& xv = xn->value;
        const auto& wv = wn->value;
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (std::size_t t = 0; t < t_out; ++t)
            for (std::size_t co = 0; co < c_out; ++co)
              bn->grad[co] += g[t * c_out + co];
        }
        const bool dx = xn->requires_grad, dw = wn->requires_grad;
        if (!dx && !dw) return;
        if (dx) xn->ensure_grad();
        if (dw) wn->ensure_grad();
        for (std::size_t t = 0; t < t_out; ++t) {
          const std::ptrdiff_t base =
              static_cast<std::ptrdiff_t>(t * stride) - static_cast<std::ptrdiff_t>(pad_l);
          for (std::size_t kk = 0; kk < k; ++kk) {
            const std::ptrdiff_t pos = base + static_cast<std::ptrdiff_t>(kk);
            if (pos < 0 || pos >= static_cast<std::ptrdiff_t>(t_in)) continue;
            const Real* xrow = xv.data() + static_cast<std::size_t>(pos) * c_in;
            for (std::size_t co = 0; co < c_out; ++co) {
              const Real gv = g[t * c_out + co];
              if (gv == Real(0)) continue;
              const Real* wrow = wv.data() + (co * k + kk) * c_in;
              if (dx) {
                Real* dxrow = xn->grad.data() + static_cast<std::size_t>(pos) * c_in;
                for (std::size_t ci = 0; ci < c_in; ++ci) dxrow[ci] += gv * wrow[ci];
              }
              if (dw) {
                Real* dwrow = wn->grad.data() + (co * k + kk) * c_in;
                for (std::size_t ci = 0; ci < c_in; ++ci) dwrow[ci] += gv * xrow[ci];
              }
            }
          }
        }
      });
  auto& ov = out.node_ptr()->value;
  const auto& xv = x.value();
  const auto& wv = w.value();
  const auto& bv = b.value();
  for (std::size_t t = 0; t < t_out; ++t)
    for (std::size_t co = 0; co < c_out; ++co) ov[t * c_out + co] = bv[co];
  for (std::size_t t = 0; t < t_out; ++t) {
    const std::ptrdiff_t base =
        static_cast<std::ptrdiff_t>(t * stride) - static_cast<std::ptrdiff_t>(pad_l);
    for (std::size_t kk = 0; kk < k; ++kk) {
      const std::ptrdiff_t pos = base + static_cast<std::ptrdiff_t>(kk);
      if (pos < 0 || pos >= static_cast<std::ptrdiff_t>(t_in)) continue;
      const Real* xrow = xv.data() + static_cast<std::size_t>(pos) * c_in;
      for (std::size_t co = 0; co < c_out; ++co) {
        const Real* wrow = wv.data() + (co * k + kk) * c_in;
        Real acc = 0;
        for (std::size_t ci = 0; ci < c_in; ++ci) acc += xrow[ci] * wrow[ci];
        ov[t * c_out + co] += acc;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// row selection
// ---------------------------------------------------------------------------

// Select rows of a (T, d) tensor.  Indices may repeat; gradients accumulate.
template <typename Real>
Tensor<Real> gather_rows(const Tensor<Real>& x, const std::vector<std::size_t>& idx) {
  if (x.rank() != 2) fail_invalid("gather_rows: expects rank 2, got ", shape_str(x.shape()));
  const std::size_t t = x.shape()[0], d = x.shape()[1];
  for (std::size_t i : idx)
    if (i >= t) fail_invalid("gather_rows: index ", i, " out of range for ", t, " rows");
  const bool track = detail::tracked(x);
  auto xn = x.node_ptr();
  auto out = detail::make_result<Real>(
      Shape{idx.size(), d}, track, {xn}, [xn, idx, d](const Node<Real>& self) {
        xn->ensure_grad();
        for (std::size_t r = 0; r < idx.size(); ++r)
          for (std::size_t j = 0; j < d; ++j)
            xn->grad[idx[r] * d + j] += self.grad[r * d + j];
      });
  auto& ov = out.node_ptr()->value;
  const auto& xv = x.value();
  for (std::size_t r = 0; r < idx.size(); ++r)
    for (std::size_t j = 0; j < d; ++j) ov[r * d + j] = xv[idx[r] * d + j];
  return out;
}

// Rebuild a (rows, d) tensor from values (U, d) placed at strictly increasing
// indices; every other row holds `fill` (shape (d,)), whose gradient is the
// sum over those rows.
template <typename Real>
Tensor<Real> scatter_rows(const Tensor<Real>& values, const std::vector<std::size_t>& idx,
                          std::size_t rows, const Tensor<Real>& fill) {
  if (values.rank() != 2) fail_invalid("scatter_rows: values must be rank 2");
  const std::size_t u = values.shape()[0], d = values.shape()[1];
  if (idx.size() != u)
    fail_invalid("scatter_rows: ", idx.size(), " indices for ", u, " value rows");
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= rows)
      fail_invalid("scatter_rows: index ", idx[r], " out of range for ", rows, " rows");
    if (r > 0 && idx[r] <= idx[r - 1])
      fail_invalid("scatter_rows: indices must be strictly increasing");
  }
  if (fill.shape() != Shape{d})
    fail_invalid("scatter_rows: fill shape ", shape_str(fill.shape()), " vs (", d, ")");
  const bool track = detail::tracked(values) || detail::tracked(fill);
  auto vn = values.node_ptr();
  auto fn = fill.node_ptr();
  auto out = detail::make_result<Real>(
      Shape{rows, d}, track, {vn, fn}, [vn, fn, idx, rows, d](const Node<Real>& self) {
        if (vn->requires_grad) {
          vn->ensure_grad();
          for (std::size_t r = 0; r < idx.size(); ++r)
            for (std::size_t j = 0; j < d; ++j)
              vn->grad[r * d + j] += self.grad[idx[r] * d + j];
        }
        if (fn->requires_grad) {
          fn->ensure_grad();
          std::size_t next = 0;
          for (std::size_t t = 0; t < rows; ++t) {
            if (next < idx.size() && idx[next] == t) {
              ++next;
              continue;
            }
            for (std::size_t j = 0; j < d; ++j) fn->grad[j] += self.grad[t * d + j];
          }
        }
      });
  auto& ov = out.node_ptr()->value;
  const auto& vv = values.value();
  const auto& fv = fill.value();
  std::size_t next = 0;
  for (std::size_t t = 0; t < rows; ++t) {
    if (next < idx.size() && idx[next] == t) {
      for (std::size_t j = 0; j < d; ++j) ov[t * d + j] = vv[next * d + j];
      ++next;
    } else {
      for (std::size_t j = 0; j < d; ++j) ov[t * d + j] = fv[j];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// classification loss
// ---------------------------------------------------------------------------

// Mean softmax cross-entropy of (N, C) logits against one integer label per
// row, computed with the max-shifted log-sum-exp so large logits cannot
// overflow.  Gradient per row is (softmax(row) - onehot(label)) / N.
template <typename Real>
Tensor<Real> cross_entropy(const Tensor<Real>& logits,
                           const std::vector<std::size_t>& labels) {
  if (logits.rank() != 2)
    fail_invalid("cross_entropy: expects rank 2, got ", shape_str(logits.shape()));
  const std::size_t n = logits.shape()[0], c = logits.shape()[1];
  if (labels.size() != n)
    fail_invalid("cross_entropy: ", labels.size(), " labels for ", n, " rows");
  for (std::size_t y : labels)
    if (y >= c) fail_invalid("cross_entropy: label ", y, " out of range for ", c, " classes");
  const bool track = detail::tracked(logits);
  auto xn = logits.node_ptr();
  auto out = detail::make_result<Real>(
      Shape{}, track, {xn}, [xn, labels, n, c](const Node<Real>& self) {
        const Real g = self.grad[0] / static_cast<Real>(n);
        xn->ensure_grad();
        for (std::size_t r = 0; r < n; ++r) {
          const Real* row = xn->value.data() + r * c;
          Real m = row[0];
          for (std::size_t j = 1; j < c; ++j) m = std::max(m, row[j]);
          Real denom = Real(0);
          for (std::size_t j = 0; j < c; ++j) denom += std::exp(row[j] - m);
          for (std::size_t j = 0; j < c; ++j) {
            const Real p = std::exp(row[j] - m) / denom;
            xn->grad[r * c + j] += g * (p - Real(j == labels[r] ? 1 : 0));
          }
        }
      });
  const auto& xv = logits.value();
  Real total = Real(0);
  for (std::size_t r = 0; r < n; ++r) {
    const Real* row = xv.data() + r * c;
    Real m = row[0];
    for (std::size_t j = 1; j < c; ++j) m = std::max(m, row[j]);
    Real denom = Real(0);
    for (std::size_t j = 0; j < c; ++j) denom += std::exp(row[j] - m);
    total += m + std::log(denom) - row[labels[r]];
  }
  out.node_ptr()->value[0] = total / static_cast<Real>(n);
  return out;
}

// ---------------------------------------------------------------------------
// layer mixing
// ---------------------------------------------------------------------------

// Convex-style mixture sum_i w[i] * h[i] over same-shaped tensors, with w a
// rank-1 tensor of per-layer coefficients (itself differentiable, so softmax
// mixing weights can be learned through it).  Accumulates left to right.
template <typename Real>
Tensor<Real> weighted_sum(const std::vector<Tensor<Real>>& h, const Tensor<Real>& w) {
  if (h.empty()) fail_invalid("weighted_sum: no tensors to mix");
  if (w.shape() != Shape{h.size()})
    fail_invalid("weighted_sum: ", h.size(), " tensors but weight shape ",
                 shape_str(w.shape()));
  for (const Tensor<Real>& hi : h)
    if (hi.shape() != h[0].shape())
      fail_invalid("weighted_sum: mixed shapes ", shape_str(h[0].shape()), " vs ",
                   shape_str(hi.shape()));
  const auto coeff = [&w](std::size_t i) { return reshape(slice(w, 0, i, i + 1), Shape{}); };
  Tensor<Real> out = mul(h[0], coeff(0));
  for (std::size_t i = 1; i < h.size(); ++i) out = add(out, mul(h[i], coeff(i)));
  return out;
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

// Reverse-mode sweep from a scalar loss.  Leaf gradients accumulate across
// sweeps (clear with zero_grad between steps); interior-node gradients are
// scratch space reset at the start of every sweep.  Iterative topological
// sort, so graph depth is unbounded.
template <typename Real>
void backward(const Tensor<Real>& loss) {
  if (loss.size() != 1)
    fail_invalid("backward: loss must be scalar, got ", shape_str(loss.shape()));
  if (!loss.requires_grad())
    fail_invalid("backward: loss does not depend on any trainable tensor");

  // Post-order DFS over the tracked subgraph.
  std::vector<Node<Real>*> order;
  std::unordered_set<const Node<Real>*> seen;
  struct Frame {
    Node<Real>* node;
    std::size_t next_parent;
  };
  std::vector<Frame> stack;
  Node<Real>* root = loss.node_ptr().get();
  seen.insert(root);
  stack.push_back({root, 0});
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      Node<Real>* p = f.node->parents[f.next_parent++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }

  // Interior nodes (those with a recorded closure) get a fresh gradient each
  // sweep; leaves keep accumulating.
  for (Node<Real>* n : order)
    if (n->backward) n->grad.assign(n->value.size(), Real(0));

  root->ensure_grad();
  root->grad[0] += Real(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<Real>* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

}  // namespace mcr
