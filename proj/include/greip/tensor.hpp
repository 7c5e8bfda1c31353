#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "greip/gemm.hpp"

namespace greip {

using Shape = std::vector<int>;

constexpr double kInstanceNormEps = 1e-5;
constexpr double kL2NormEps = 1e-12;
constexpr double kKinkWindow = 1e-3;

namespace detail {

// Training allocates and frees many multi-megabyte buffers per step. With
// glibc defaults those exceed the mmap threshold, so every step pays for
// fresh zeroed pages; raising the thresholds keeps the blocks on the heap
// where they get reused.
inline void tune_allocator_once() {
#ifdef __GLIBC__
  static const bool done = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return true;
  }();
  (void)done;
#endif
}

}  // namespace detail

inline long long shape_numel(const Shape& s) {
  if (s.empty()) throw std::invalid_argument("tensor: empty shape");
  long long n = 1;
  for (int d : s) {
    if (d <= 0) throw std::invalid_argument("tensor: non-positive dimension");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Gradient recording switch. Disable around evaluation-only forwards so no
// graph is built.
struct GradMode {
  static bool& enabled() {
    thread_local bool on = true;
    return on;
  }
};

class NoGradGuard {
 public:
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::enabled() = false; }
  ~NoGradGuard() { GradMode::enabled() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Bookkeeping for finite-difference checking of piecewise ops (relu, abs,
// hinge). While armed, every such op reports its signed distance to the kink
// for each element it evaluates. Two independent consumers:
//   - hit(): set when any distance lands within window() of the kink, used
//     by the resampling checker to reject a whole evaluation point;
//   - signature(): an order-sensitive hash of the branch each element took,
//     used by the masked checker to compare two evaluations. Equal
//     signatures mean every piecewise op took the same branch, which is
//     exactly the condition under which a central difference across the two
//     points is trustworthy.
struct KinkTracker {
  static bool& armed() {
    thread_local bool a = false;
    return a;
  }
  static bool& hit() {
    thread_local bool h = false;
    return h;
  }
  static double& window() {
    thread_local double w = kKinkWindow;
    return w;
  }
  static bool& recording() {
    thread_local bool r = false;
    return r;
  }
  static std::uint64_t& signature() {
    thread_local std::uint64_t s = 1469598103934665603ULL;
    return s;
  }
  static void note(double distance_to_kink) {
    if (!armed()) return;
    if (std::abs(distance_to_kink) < window()) hit() = true;
    if (recording())
      signature() = (signature() ^ (distance_to_kink > 0.0 ? 0x9E3779B97F4A7C15ULL
                                                           : 0x517CC1B727220A95ULL)) *
                    1099511628211ULL;
  }
};

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool backward_ran = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;

  long long numel() const { return static_cast<long long>(value.size()); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false) {
    detail::tune_allocator_once();
    const long long n = shape_numel(shape);
    if (n != static_cast<long long>(data.size()))
      throw std::invalid_argument("tensor: data size does not match shape " +
                                  shape_str(shape));
    node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(data);
    node->requires_grad = requires_grad;
  }

  static Tensor zeros(const Shape& s, bool requires_grad = false) {
    return Tensor(s, std::vector<double>(shape_numel(s), 0.0), requires_grad);
  }
  static Tensor full(const Shape& s, double v, bool requires_grad = false) {
    return Tensor(s, std::vector<double>(shape_numel(s), v), requires_grad);
  }
  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor({1}, {v}, requires_grad);
  }

  bool defined() const { return node != nullptr; }
  const Shape& shape() const { return check().shape; }
  long long numel() const { return check().numel(); }
  int ndim() const { return static_cast<int>(check().shape.size()); }
  int dim(int i) const { return check().shape.at(static_cast<std::size_t>(i)); }
  const std::vector<double>& data() const { return check().value; }
  std::vector<double>& mutable_data() { return check().value; }
  bool requires_grad() const { return check().requires_grad; }

  double item() const {
    if (numel() != 1) throw std::invalid_argument("tensor: item() on non-scalar");
    return check().value[0];
  }

  const std::vector<double>& grad() const {
    Node& n = check();
    if (!n.requires_grad)
      throw std::logic_error("tensor: grad() on a non-differentiable tensor");
    n.ensure_grad();
    return n.grad;
  }
  void zero_grad() {
    Node& n = check();
    n.ensure_grad();
    std::fill(n.grad.begin(), n.grad.end(), 0.0);
  }

  std::shared_ptr<Node> node;

 private:
  Node& check() const {
    if (!node) throw std::logic_error("tensor: use of an empty tensor");
    return *node;
  }
};

namespace detail {

inline void check_finite(const std::vector<double>& v, const char* op) {
  // One branch-free pass; |x| sums stay finite unless some x is inf or NaN,
  // so the per-element test only runs when something actually tripped.
  double acc = 0.0;
  for (double x : v) acc += std::fabs(x);
  if (std::isfinite(acc)) return;
  for (double x : v) {
    if (!std::isfinite(x))
      throw std::runtime_error(std::string("tensor: non-finite value produced by ") + op);
  }
}

inline Tensor make_node(Shape shape, std::vector<double> value,
                        std::initializer_list<Tensor> parents,
                        std::function<void(Node&)> backprop, const char* op) {
  check_finite(value, op);
  bool any_grad = false;
  for (const Tensor& p : parents) {
    if (!p.defined()) throw std::logic_error(std::string(op) + ": empty operand");
    if (p.requires_grad()) any_grad = true;
  }
  Tensor out(std::move(shape), std::move(value), false);
  if (GradMode::enabled() && any_grad) {
    out.node->requires_grad = true;
    out.node->parents.reserve(parents.size());
    for (const Tensor& p : parents) out.node->parents.push_back(p.node);
    out.node->backprop = std::move(backprop);
  }
  return out;
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// Number of trailing elements each entry of v broadcasts over, with v's
// extent matching the product of x's leading dimensions.
inline long long per_row_cols(const Tensor& x, const Tensor& v, const char* op) {
  const long long rows = v.numel();
  long long prod = 1;
  for (int d : x.shape()) {
    if (prod == rows) break;
    prod *= d;
  }
  if (prod != rows)
    throw std::invalid_argument(std::string(op) +
                                ": vector extent does not match leading dims of " +
                                shape_str(x.shape()));
  return x.numel() / rows;
}

inline void accumulate_same(Node& parent, const std::vector<double>& g) {
  parent.ensure_grad();
  double* d = parent.grad.data();
  const double* s = g.data();
  for (std::size_t i = 0; i < g.size(); ++i) d[i] += s[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> v(a.data());
  const double* pb = b.data().data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] += pb[i];
  return detail::make_node(
      a.shape(), std::move(v), {a, b},
      [](Node& self) {
        for (int k = 0; k < 2; ++k) {
          Node& p = *self.parents[static_cast<std::size_t>(k)];
          if (p.requires_grad) detail::accumulate_same(p, self.grad);
        }
      },
      "add");
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> v(a.data());
  const double* pb = b.data().data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] -= pb[i];
  return detail::make_node(
      a.shape(), std::move(v), {a, b},
      [](Node& self) {
        Node& a = *self.parents[0];
        Node& b = *self.parents[1];
        if (a.requires_grad) detail::accumulate_same(a, self.grad);
        if (b.requires_grad) {
          b.ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i) b.grad[i] -= self.grad[i];
        }
      },
      "sub");
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> v(a.data());
  const double* pb = b.data().data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] *= pb[i];
  return detail::make_node(
      a.shape(), std::move(v), {a, b},
      [](Node& self) {
        Node& a = *self.parents[0];
        Node& b = *self.parents[1];
        const double* g = self.grad.data();
        if (a.requires_grad) {
          a.ensure_grad();
          const double* bv = b.value.data();
          for (std::size_t i = 0; i < self.grad.size(); ++i) a.grad[i] += g[i] * bv[i];
        }
        if (b.requires_grad) {
          b.ensure_grad();
          const double* av = a.value.data();
          for (std::size_t i = 0; i < self.grad.size(); ++i) b.grad[i] += g[i] * av[i];
        }
      },
      "mul");
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "div");
  std::vector<double> v(a.data());
  const double* pb = b.data().data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] /= pb[i];
  return detail::make_node(
      a.shape(), std::move(v), {a, b},
      [](Node& self) {
        Node& a = *self.parents[0];
        Node& b = *self.parents[1];
        const double* g = self.grad.data();
        const double* av = a.value.data();
        const double* bv = b.value.data();
        if (a.requires_grad) {
          a.ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i) a.grad[i] += g[i] / bv[i];
        }
        if (b.requires_grad) {
          b.ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            b.grad[i] -= g[i] * av[i] / (bv[i] * bv[i]);
        }
      },
      "div");
}

inline Tensor neg(const Tensor& a) {
  std::vector<double> v(a.data());
  for (double& x : v) x = -x;
  return detail::make_node(
      a.shape(), std::move(v), {a},
      [](Node& self) {
        Node& a = *self.parents[0];
        if (!a.requires_grad) return;
        a.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) a.grad[i] -= self.grad[i];
      },
      "neg");
}

inline Tensor scale(const Tensor& a, double c) {
  std::vector<double> v(a.data());
  for (double& x : v) x *= c;
  return detail::make_node(
      a.shape(), std::move(v), {a},
      [c](Node& self) {
        Node& a = *self.parents[0];
        if (!a.requires_grad) return;
        a.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) a.grad[i] += c * self.grad[i];
      },
      "scale");
}

inline Tensor add_scalar(const Tensor& a, double c) {
  std::vector<double> v(a.data());
  for (double& x : v) x += c;
  return detail::make_node(
      a.shape(), std::move(v), {a},
      [](Node& self) {
        Node& a = *self.parents[0];
        if (a.requires_grad) detail::accumulate_same(a, self.grad);
      },
      "add_scalar");
}

inline Tensor relu(const Tensor& a) {
  std::vector<double> v(a.data());
  if (KinkTracker::armed()) {
    for (double x : v) KinkTracker::note(x);
  }
  for (double& x : v) x = x > 0.0 ? x : 0.0;
  return detail::make_node(
      a.shape(), std::move(v), {a},
      [](Node& self) {
        Node& a = *self.parents[0];
        if (!a.requires_grad) return;
        a.ensure_grad();
        const double* av = a.value.data();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          if (av[i] > 0.0) a.grad[i] += self.grad[i];
      },
      "relu");
}

inline Tensor abs(const Tensor& a) {
  std::vector<double> v(a.data());
  if (KinkTracker::armed()) {
    for (double x : v) KinkTracker::note(x);
  }
  for (double& x : v) x = std::abs(x);
  return detail::make_node(
      a.shape(), std::move(v), {a},
      [](Node& self) {
        Node& a = *self.parents[0];
        if (!a.requires_grad) return;
        a.ensure_grad();
        const double* av = a.value.data();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          if (av[i] > 0.0)
            a.grad[i] += self.grad[i];
          else if (av[i] < 0.0)
            a.grad[i] -= self.grad[i];
        }
      },
      "abs");
}

inline Tensor square(const Tensor& a) {
  std::vector<double> v(a.data());
  for (double& x : v) x *= x;
  return detail::make_node(
      a.shape(), std::move(v), {a},
      [](Node& self) {
        Node& a = *self.parents[0];
        if (!a.requires_grad) return;
        a.ensure_grad();
        const double* av = a.value.data();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          a.grad[i] += 2.0 * av[i] * self.grad[i];
      },
      "square");
}

inline Tensor sqrt(const Tensor& a) {
  std::vector<double> v(a.data());
  for (double& x : v) x = std::sqrt(x);
  return detail::make_node(
      a.shape(), std::move(v), {a},
      [](Node& self) {
        Node& a = *self.parents[0];
        if (!a.requires_grad) return;
        a.ensure_grad();
        const double* y = self.value.data();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          a.grad[i] += 0.5 / y[i] * self.grad[i];
      },
      "sqrt");
}

inline Tensor exp(const Tensor& a) {
  std::vector<double> v(a.data());
  for (double& x : v) x = std::exp(x);
  return detail::make_node(
      a.shape(), std::move(v), {a},
      [](Node& self) {
        Node& a = *self.parents[0];
        if (!a.requires_grad) return;
        a.ensure_grad();
        const double* y = self.value.data();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          a.grad[i] += y[i] * self.grad[i];
      },
      "exp");
}

inline Tensor log(const Tensor& a) {
  std::vector<double> v(a.data());
  for (double& x : v) x = std::log(x);
  return detail::make_node(
      a.shape(), std::move(v), {a},
      [](Node& self) {
        Node& a = *self.parents[0];
        if (!a.requires_grad) return;
        a.ensure_grad();
        const double* av = a.value.data();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          a.grad[i] += self.grad[i] / av[i];
      },
      "log");
}

inline Tensor tanh(const Tensor& a) {
  std::vector<double> v(a.data());
  for (double& x : v) x = std::tanh(x);
  return detail::make_node(
      a.shape(), std::move(v), {a},
      [](Node& self) {
        Node& a = *self.parents[0];
        if (!a.requires_grad) return;
        a.ensure_grad();
        const double* y = self.value.data();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          a.grad[i] += (1.0 - y[i] * y[i]) * self.grad[i];
      },
      "tanh");
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  return detail::make_node(
      {1}, {s}, {a},
      [](Node& self) {
        Node& a = *self.parents[0];
        if (!a.requires_grad) return;
        a.ensure_grad();
        const double g = self.grad[0];
        for (double& d : a.grad) d += g;
      },
      "sum");
}

inline Tensor mean(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  const double inv = 1.0 / static_cast<double>(a.numel());
  return detail::make_node(
      {1}, {s * inv}, {a},
      [inv](Node& self) {
        Node& a = *self.parents[0];
        if (!a.requires_grad) return;
        a.ensure_grad();
        const double g = self.grad[0] * inv;
        for (double& d : a.grad) d += g;
      },
      "mean");
}

namespace detail {
inline Shape drop_last(const Shape& s) {
  if (s.size() <= 1) return {1};
  return Shape(s.begin(), s.end() - 1);
}
}  // namespace detail

inline Tensor sum_last(const Tensor& a) {
  const int cols = a.shape().back();
  const long long rows = a.numel() / cols;
  std::vector<double> v(static_cast<std::size_t>(rows), 0.0);
  const double* p = a.data().data();
  for (long long r = 0; r < rows; ++r) {
    double s = 0.0;
    const double* row = p + r * cols;
    for (int c = 0; c < cols; ++c) s += row[c];
    v[static_cast<std::size_t>(r)] = s;
  }
  return detail::make_node(
      detail::drop_last(a.shape()), std::move(v), {a},
      [cols](Node& self) {
        Node& a = *self.parents[0];
        if (!a.requires_grad) return;
        a.ensure_grad();
        const long long rows = self.numel();
        for (long long r = 0; r < rows; ++r) {
          const double g = self.grad[static_cast<std::size_t>(r)];
          double* arow = a.grad.data() + r * cols;
          for (int c = 0; c < cols; ++c) arow[c] += g;
        }
      },
      "sum_last");
}

inline Tensor mean_last(const Tensor& a) {
  return scale(sum_last(a), 1.0 / static_cast<double>(a.shape().back()));
}

// ---------------------------------------------------------------------------
// Broadcast ops: v spans the leading dims of x (add/sub/mul/div act per row
// block); add_per_col broadcasts a bias over the last axis.
// ---------------------------------------------------------------------------

namespace detail {

enum class RowOp { kAdd, kSub, kMul, kDiv };

inline Tensor per_row(const Tensor& x, const Tensor& v, RowOp op, const char* name) {
  const long long cols = per_row_cols(x, v, name);
  const long long rows = v.numel();
  std::vector<double> out(x.data());
  const double* pv = v.data().data();
  for (long long r = 0; r < rows; ++r) {
    double* row = out.data() + r * cols;
    const double c = pv[r];
    switch (op) {
      case RowOp::kAdd:
        for (long long i = 0; i < cols; ++i) row[i] += c;
        break;
      case RowOp::kSub:
        for (long long i = 0; i < cols; ++i) row[i] -= c;
        break;
      case RowOp::kMul:
        for (long long i = 0; i < cols; ++i) row[i] *= c;
        break;
      case RowOp::kDiv:
        for (long long i = 0; i < cols; ++i) row[i] /= c;
        break;
    }
  }
  return make_node(
      x.shape(), std::move(out), {x, v},
      [cols, rows, op](Node& self) {
        Node& x = *self.parents[0];
        Node& v = *self.parents[1];
        const double* g = self.grad.data();
        const double* xv = x.value.data();
        const double* vv = v.value.data();
        if (x.requires_grad) {
          x.ensure_grad();
          for (long long r = 0; r < rows; ++r) {
            double* xrow = x.grad.data() + r * cols;
            const double* grow = g + r * cols;
            switch (op) {
              case RowOp::kAdd:
              case RowOp::kSub:
                for (long long i = 0; i < cols; ++i) xrow[i] += grow[i];
                break;
              case RowOp::kMul:
                for (long long i = 0; i < cols; ++i) xrow[i] += grow[i] * vv[r];
                break;
              case RowOp::kDiv:
                for (long long i = 0; i < cols; ++i) xrow[i] += grow[i] / vv[r];
                break;
            }
          }
        }
        if (v.requires_grad) {
          v.ensure_grad();
          for (long long r = 0; r < rows; ++r) {
            const double* grow = g + r * cols;
            const double* xrow = xv + r * cols;
            double acc = 0.0;
            switch (op) {
              case RowOp::kAdd:
                for (long long i = 0; i < cols; ++i) acc += grow[i];
                break;
              case RowOp::kSub:
                for (long long i = 0; i < cols; ++i) acc -= grow[i];
                break;
              case RowOp::kMul:
                for (long long i = 0; i < cols; ++i) acc += grow[i] * xrow[i];
                break;
              case RowOp::kDiv:
                for (long long i = 0; i < cols; ++i) acc -= grow[i] * xrow[i] / (vv[r] * vv[r]);
                break;
            }
            v.grad[static_cast<std::size_t>(r)] += acc;
          }
        }
      },
      name);
}

}  // namespace detail

inline Tensor add_per_row(const Tensor& x, const Tensor& v) {
  return detail::per_row(x, v, detail::RowOp::kAdd, "add_per_row");
}
inline Tensor sub_per_row(const Tensor& x, const Tensor& v) {
  return detail::per_row(x, v, detail::RowOp::kSub, "sub_per_row");
}
inline Tensor mul_per_row(const Tensor& x, const Tensor& v) {
  return detail::per_row(x, v, detail::RowOp::kMul, "mul_per_row");
}
inline Tensor div_per_row(const Tensor& x, const Tensor& v) {
  return detail::per_row(x, v, detail::RowOp::kDiv, "div_per_row");
}

inline Tensor add_per_col(const Tensor& x, const Tensor& v) {
  const int cols = x.shape().back();
  if (v.numel() != cols)
    throw std::invalid_argument("add_per_col: bias extent does not match last dim");
  const long long rows = x.numel() / cols;
  std::vector<double> out(x.data());
  const double* pv = v.data().data();
  for (long long r = 0; r < rows; ++r) {
    double* row = out.data() + r * cols;
    for (int c = 0; c < cols; ++c) row[c] += pv[c];
  }
  return detail::make_node(
      x.shape(), std::move(out), {x, v},
      [cols, rows](Node& self) {
        Node& x = *self.parents[0];
        Node& v = *self.parents[1];
        const double* g = self.grad.data();
        if (x.requires_grad) detail::accumulate_same(x, self.grad);
        if (v.requires_grad) {
          v.ensure_grad();
          for (long long r = 0; r < rows; ++r) {
            const double* grow = g + r * cols;
            for (int c = 0; c < cols; ++c) v.grad[static_cast<std::size_t>(c)] += grow[c];
          }
        }
      },
      "add_per_col");
}

// ---------------------------------------------------------------------------
// Matrix multiply
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false,
                     bool trans_b = false) {
  if (a.ndim() != 2 || b.ndim() != 2)
    throw std::invalid_argument("matmul: operands must be 2-D");
  const int m = trans_a ? a.dim(1) : a.dim(0);
  const int ka = trans_a ? a.dim(0) : a.dim(1);
  const int kb = trans_b ? b.dim(1) : b.dim(0);
  const int n = trans_b ? b.dim(0) : b.dim(1);
  if (ka != kb)
    throw std::invalid_argument("matmul: inner dimensions disagree " +
                                shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const int lda = a.dim(1);
  const int ldb = b.dim(1);
  std::vector<double> out(static_cast<std::size_t>(m) * n);
  detail::gemm(trans_a, trans_b, m, n, ka, 1.0, a.data().data(), lda,
               b.data().data(), ldb, 0.0, out.data(), n);
  return detail::make_node(
      {m, n}, std::move(out), {a, b},
      [m, n, k = ka, lda, ldb, trans_a, trans_b](Node& self) {
        Node& a = *self.parents[0];
        Node& b = *self.parents[1];
        const double* g = self.grad.data();
        if (a.requires_grad) {
          a.ensure_grad();
          if (!trans_a) {
            detail::gemm(false, !trans_b, m, k, n, 1.0, g, n, b.value.data(), ldb,
                         1.0, a.grad.data(), lda);
          } else {
            detail::gemm(trans_b, true, k, m, n, 1.0, b.value.data(), ldb, g, n,
                         1.0, a.grad.data(), lda);
          }
        }
        if (b.requires_grad) {
          b.ensure_grad();
          if (!trans_b) {
            detail::gemm(!trans_a, false, k, n, m, 1.0, a.value.data(), lda, g, n,
                         1.0, b.grad.data(), ldb);
          } else {
            detail::gemm(true, trans_a, n, k, m, 1.0, g, n, a.value.data(), lda,
                         1.0, b.grad.data(), ldb);
          }
        }
      },
      "matmul");
}

// ---------------------------------------------------------------------------
// 3x3 convolution, zero padding 1, stride 1 or 2, via im2col + GEMM.
// x: [B, Cin, H, W], w: [Cout, Cin, 3, 3], bias: [Cout] or an empty tensor.
// ---------------------------------------------------------------------------

namespace detail {

inline void im2col_3x3(const double* x, int b_count, int cin, int h, int w,
                       int stride, int ho, int wo, double* col) {
  const long long patch = static_cast<long long>(ho) * wo;
  const long long bp = static_cast<long long>(b_count) * patch;
  for (int ci = 0; ci < cin; ++ci) {
    for (int kh = 0; kh < 3; ++kh) {
      for (int kw = 0; kw < 3; ++kw) {
        double* crow = col + (static_cast<long long>(ci) * 9 + kh * 3 + kw) * bp;
        for (int b = 0; b < b_count; ++b) {
          const double* xc = x + (static_cast<long long>(b) * cin + ci) * h * w;
          double* dst = crow + static_cast<long long>(b) * patch;
          for (int oh = 0; oh < ho; ++oh) {
            const int ih = oh * stride + kh - 1;
            double* drow = dst + static_cast<long long>(oh) * wo;
            if (ih < 0 || ih >= h) {
              std::fill(drow, drow + wo, 0.0);
              continue;
            }
            const double* xrow = xc + static_cast<long long>(ih) * w;
            if (stride == 1) {
              const int shift = kw - 1;
              const int lo = std::max(0, -shift);
              const int hi = std::min(wo, w - shift);
              if (lo > 0) std::fill(drow, drow + lo, 0.0);
              if (hi > lo)
                std::memcpy(drow + lo, xrow + lo + shift,
                            static_cast<std::size_t>(hi - lo) * sizeof(double));
              if (hi < wo) std::fill(drow + std::max(hi, lo), drow + wo, 0.0);
            } else {
              for (int ow = 0; ow < wo; ++ow) {
                const int iw = ow * stride + kw - 1;
                drow[ow] = (iw < 0 || iw >= w) ? 0.0 : xrow[iw];
              }
            }
          }
        }
      }
    }
  }
}

inline void col2im_3x3(const double* col, int b_count, int cin, int h, int w,
                       int stride, int ho, int wo, double* dx) {
  const long long patch = static_cast<long long>(ho) * wo;
  const long long bp = static_cast<long long>(b_count) * patch;
  for (int ci = 0; ci < cin; ++ci) {
    for (int kh = 0; kh < 3; ++kh) {
      for (int kw = 0; kw < 3; ++kw) {
        const double* crow = col + (static_cast<long long>(ci) * 9 + kh * 3 + kw) * bp;
        for (int b = 0; b < b_count; ++b) {
          double* xc = dx + (static_cast<long long>(b) * cin + ci) * h * w;
          const double* src = crow + static_cast<long long>(b) * patch;
          for (int oh = 0; oh < ho; ++oh) {
            const int ih = oh * stride + kh - 1;
            if (ih < 0 || ih >= h) continue;
            double* xrow = xc + static_cast<long long>(ih) * w;
            const double* srow = src + static_cast<long long>(oh) * wo;
            for (int ow = 0; ow < wo; ++ow) {
              const int iw = ow * stride + kw - 1;
              if (iw >= 0 && iw < w) xrow[iw] += srow[ow];
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias,
                     int stride) {
  if (x.ndim() != 4) throw std::invalid_argument("conv2d: input must be [B,C,H,W]");
  if (w.ndim() != 4 || w.dim(2) != 3 || w.dim(3) != 3)
    throw std::invalid_argument("conv2d: weight must be [Cout,Cin,3,3]");
  if (stride != 1 && stride != 2)
    throw std::invalid_argument("conv2d: stride must be 1 or 2");
  if (x.dim(1) != w.dim(1))
    throw std::invalid_argument("conv2d: channel mismatch " + shape_str(x.shape()) +
                                " vs " + shape_str(w.shape()));
  const bool has_bias = bias.defined();
  if (has_bias && bias.numel() != w.dim(0))
    throw std::invalid_argument("conv2d: bias extent does not match Cout");

  const int b_count = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int cout = w.dim(0);
  const int ho = (h + 2 - 3) / stride + 1;
  const int wo = (wd + 2 - 3) / stride + 1;
  const long long patch = static_cast<long long>(ho) * wo;
  const long long bp = static_cast<long long>(b_count) * patch;
  const int ck = cin * 9;

  auto col = std::make_shared<std::vector<double>>(static_cast<std::size_t>(ck) * bp);
  detail::im2col_3x3(x.data().data(), b_count, cin, h, wd, stride, ho, wo, col->data());

  std::vector<double> out2(static_cast<std::size_t>(cout) * bp);
  detail::gemm(false, false, cout, static_cast<int>(bp), ck, 1.0, w.data().data(),
               ck, col->data(), static_cast<int>(bp), 0.0, out2.data(),
               static_cast<int>(bp));

  std::vector<double> out(static_cast<std::size_t>(b_count) * cout * patch);
  const double* bv = has_bias ? bias.data().data() : nullptr;
  for (int co = 0; co < cout; ++co) {
    for (int b = 0; b < b_count; ++b) {
      const double* src = out2.data() + co * bp + b * patch;
      double* dst = out.data() + (static_cast<long long>(b) * cout + co) * patch;
      if (bv) {
        const double bb = bv[co];
        for (long long p = 0; p < patch; ++p) dst[p] = src[p] + bb;
      } else {
        std::memcpy(dst, src, static_cast<std::size_t>(patch) * sizeof(double));
      }
    }
  }

  auto bp_fn = [col, b_count, cin, h, wd, stride, ho, wo, cout, ck, patch, bp,
                has_bias](Node& self) {
    Node& xn = *self.parents[0];
    Node& wn = *self.parents[1];
    std::vector<double> dy2(static_cast<std::size_t>(cout) * bp);
    for (int co = 0; co < cout; ++co) {
      for (int b = 0; b < b_count; ++b) {
        const double* src =
            self.grad.data() + (static_cast<long long>(b) * cout + co) * patch;
        std::memcpy(dy2.data() + co * bp + b * patch, src,
                    static_cast<std::size_t>(patch) * sizeof(double));
      }
    }
    if (has_bias) {
      Node& bn = *self.parents[2];
      if (bn.requires_grad) {
        bn.ensure_grad();
        for (int co = 0; co < cout; ++co) {
          const double* row = dy2.data() + co * bp;
          double s = 0.0;
          for (long long p = 0; p < bp; ++p) s += row[p];
          bn.grad[static_cast<std::size_t>(co)] += s;
        }
      }
    }
    if (wn.requires_grad) {
      wn.ensure_grad();
      detail::gemm(false, true, cout, ck, static_cast<int>(bp), 1.0, dy2.data(),
                   static_cast<int>(bp), col->data(), static_cast<int>(bp), 1.0,
                   wn.grad.data(), ck);
    }
    if (xn.requires_grad) {
      xn.ensure_grad();
      std::vector<double> dcol(static_cast<std::size_t>(ck) * bp);
      detail::gemm(true, false, ck, static_cast<int>(bp), cout, 1.0,
                   wn.value.data(), ck, dy2.data(), static_cast<int>(bp), 0.0,
                   dcol.data(), static_cast<int>(bp));
      detail::col2im_3x3(dcol.data(), b_count, cin, h, wd, stride, ho, wo,
                         xn.grad.data());
    }
  };

  if (has_bias) {
    return detail::make_node({b_count, cout, ho, wo}, std::move(out), {x, w, bias},
                             std::move(bp_fn), "conv2d");
  }
  return detail::make_node({b_count, cout, ho, wo}, std::move(out), {x, w},
                           std::move(bp_fn), "conv2d");
}

// ---------------------------------------------------------------------------
// Structured ops
// ---------------------------------------------------------------------------

inline Tensor global_average_pool(const Tensor& x) {
  if (x.ndim() != 4)
    throw std::invalid_argument("global_average_pool: input must be [B,C,H,W]");
  const int b = x.dim(0), c = x.dim(1);
  const long long hw = static_cast<long long>(x.dim(2)) * x.dim(3);
  const double inv = 1.0 / static_cast<double>(hw);
  std::vector<double> out(static_cast<std::size_t>(b) * c);
  const double* p = x.data().data();
  for (long long r = 0; r < static_cast<long long>(b) * c; ++r) {
    double s = 0.0;
    const double* row = p + r * hw;
    for (long long i = 0; i < hw; ++i) s += row[i];
    out[static_cast<std::size_t>(r)] = s * inv;
  }
  return detail::make_node(
      {b, c}, std::move(out), {x},
      [hw, inv](Node& self) {
        Node& x = *self.parents[0];
        if (!x.requires_grad) return;
        x.ensure_grad();
        for (long long r = 0; r < self.numel(); ++r) {
          const double g = self.grad[static_cast<std::size_t>(r)] * inv;
          double* row = x.grad.data() + r * hw;
          for (long long i = 0; i < hw; ++i) row[i] += g;
        }
      },
      "global_average_pool");
}

// Per-(batch, channel) mean and epsilon-stabilized standard deviation of a
// [B,C,H,W] map. sigma = sqrt(var + 1e-5), so it never vanishes and stays
// differentiable on constant maps.
inline std::pair<Tensor, Tensor> channel_instance_stats(const Tensor& x) {
  if (x.ndim() != 4)
    throw std::invalid_argument("channel_instance_stats: input must be [B,C,H,W]");
  const int b = x.dim(0), c = x.dim(1);
  const long long hw = static_cast<long long>(x.dim(2)) * x.dim(3);
  const long long rows = static_cast<long long>(b) * c;
  const double inv = 1.0 / static_cast<double>(hw);
  const double* p = x.data().data();

  std::vector<double> mu(static_cast<std::size_t>(rows));
  std::vector<double> sig(static_cast<std::size_t>(rows));
  for (long long r = 0; r < rows; ++r) {
    const double* row = p + r * hw;
    double s = 0.0;
    for (long long i = 0; i < hw; ++i) s += row[i];
    const double m = s * inv;
    double v = 0.0;
    for (long long i = 0; i < hw; ++i) {
      const double d = row[i] - m;
      v += d * d;
    }
    mu[static_cast<std::size_t>(r)] = m;
    sig[static_cast<std::size_t>(r)] = std::sqrt(v * inv + kInstanceNormEps);
  }

  Tensor mu_t = detail::make_node(
      {b, c}, std::move(mu), {x},
      [hw, inv](Node& self) {
        Node& x = *self.parents[0];
        if (!x.requires_grad) return;
        x.ensure_grad();
        for (long long r = 0; r < self.numel(); ++r) {
          const double g = self.grad[static_cast<std::size_t>(r)] * inv;
          double* row = x.grad.data() + r * hw;
          for (long long i = 0; i < hw; ++i) row[i] += g;
        }
      },
      "channel_instance_stats.mu");

  Tensor sig_t = detail::make_node(
      {b, c}, std::move(sig), {x},
      [hw, inv](Node& self) {
        Node& x = *self.parents[0];
        if (!x.requires_grad) return;
        x.ensure_grad();
        const double* xv = x.value.data();
        for (long long r = 0; r < self.numel(); ++r) {
          const double* row = xv + r * hw;
          double s = 0.0;
          for (long long i = 0; i < hw; ++i) s += row[i];
          const double m = s * inv;
          const double g = self.grad[static_cast<std::size_t>(r)] * inv /
                           self.value[static_cast<std::size_t>(r)];
          double* grow = x.grad.data() + r * hw;
          for (long long i = 0; i < hw; ++i) grow[i] += g * (row[i] - m);
        }
      },
      "channel_instance_stats.sigma");

  return {mu_t, sig_t};
}

inline Tensor l2_normalize_rows(const Tensor& x) {
  if (x.ndim() != 2)
    throw std::invalid_argument("l2_normalize_rows: input must be [R,C]");
  const int rows = x.dim(0), cols = x.dim(1);
  std::vector<double> out(x.data());
  std::vector<double> norms(static_cast<std::size_t>(rows));
  for (int r = 0; r < rows; ++r) {
    double* row = out.data() + static_cast<long long>(r) * cols;
    double s = 0.0;
    for (int c = 0; c < cols; ++c) s += row[c] * row[c];
    const double n = std::max(std::sqrt(s), kL2NormEps);
    norms[static_cast<std::size_t>(r)] = std::sqrt(s);
    for (int c = 0; c < cols; ++c) row[c] /= n;
  }
  return detail::make_node(
      x.shape(), std::move(out), {x},
      [rows, cols, norms = std::move(norms)](Node& self) {
        Node& x = *self.parents[0];
        if (!x.requires_grad) return;
        x.ensure_grad();
        for (int r = 0; r < rows; ++r) {
          const double* u = self.value.data() + static_cast<long long>(r) * cols;
          const double* g = self.grad.data() + static_cast<long long>(r) * cols;
          double* dx = x.grad.data() + static_cast<long long>(r) * cols;
          const double raw = norms[static_cast<std::size_t>(r)];
          if (raw < kL2NormEps) {
            for (int c = 0; c < cols; ++c) dx[c] += g[c] / kL2NormEps;
            continue;
          }
          double dot = 0.0;
          for (int c = 0; c < cols; ++c) dot += g[c] * u[c];
          for (int c = 0; c < cols; ++c) dx[c] += (g[c] - u[c] * dot) / raw;
        }
      },
      "l2_normalize_rows");
}

inline Tensor softmax_last(const Tensor& x) {
  const int cols = x.shape().back();
  const long long rows = x.numel() / cols;
  std::vector<double> out(x.data());
  for (long long r = 0; r < rows; ++r) {
    double* row = out.data() + r * cols;
    double mx = row[0];
    for (int c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
    double s = 0.0;
    for (int c = 0; c < cols; ++c) {
      row[c] = std::exp(row[c] - mx);
      s += row[c];
    }
    for (int c = 0; c < cols; ++c) row[c] /= s;
  }
  return detail::make_node(
      x.shape(), std::move(out), {x},
      [rows, cols](Node& self) {
        Node& x = *self.parents[0];
        if (!x.requires_grad) return;
        x.ensure_grad();
        for (long long r = 0; r < rows; ++r) {
          const double* p = self.value.data() + r * cols;
          const double* g = self.grad.data() + r * cols;
          double* dx = x.grad.data() + r * cols;
          double dot = 0.0;
          for (int c = 0; c < cols; ++c) dot += g[c] * p[c];
          for (int c = 0; c < cols; ++c) dx[c] += p[c] * (g[c] - dot);
        }
      },
      "softmax_last");
}

inline Tensor slice_last(const Tensor& x, int from, int to) {
  const int cols = x.shape().back();
  if (from < 0 || to > cols || from >= to)
    throw std::invalid_argument("slice_last: bad range");
  const int width = to - from;
  const long long rows = x.numel() / cols;
  Shape out_shape = x.shape();
  out_shape.back() = width;
  std::vector<double> out(static_cast<std::size_t>(rows) * width);
  const double* p = x.data().data();
  for (long long r = 0; r < rows; ++r)
    std::memcpy(out.data() + r * width, p + r * cols + from,
                static_cast<std::size_t>(width) * sizeof(double));
  return detail::make_node(
      std::move(out_shape), std::move(out), {x},
      [rows, cols, from, width](Node& self) {
        Node& x = *self.parents[0];
        if (!x.requires_grad) return;
        x.ensure_grad();
        for (long long r = 0; r < rows; ++r) {
          const double* g = self.grad.data() + r * width;
          double* dx = x.grad.data() + r * cols + from;
          for (int c = 0; c < width; ++c) dx[c] += g[c];
        }
      },
      "slice_last");
}

// Nearest-neighbour doubling of the last axis.
inline Tensor upsample2_last(const Tensor& x) {
  const int cols = x.shape().back();
  const long long rows = x.numel() / cols;
  Shape out_shape = x.shape();
  out_shape.back() = cols * 2;
  std::vector<double> out(static_cast<std::size_t>(rows) * cols * 2);
  const double* p = x.data().data();
  for (long long r = 0; r < rows; ++r) {
    const double* src = p + r * cols;
    double* dst = out.data() + r * cols * 2;
    for (int c = 0; c < cols; ++c) {
      dst[2 * c] = src[c];
      dst[2 * c + 1] = src[c];
    }
  }
  return detail::make_node(
      std::move(out_shape), std::move(out), {x},
      [rows, cols](Node& self) {
        Node& x = *self.parents[0];
        if (!x.requires_grad) return;
        x.ensure_grad();
        for (long long r = 0; r < rows; ++r) {
          const double* g = self.grad.data() + r * cols * 2;
          double* dx = x.grad.data() + r * cols;
          for (int c = 0; c < cols; ++c) dx[c] += g[2 * c] + g[2 * c + 1];
        }
      },
      "upsample2_last");
}

inline Tensor mean_over_height(const Tensor& x) {
  if (x.ndim() != 4)
    throw std::invalid_argument("mean_over_height: input must be [B,C,H,W]");
  const int b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const double inv = 1.0 / static_cast<double>(h);
  std::vector<double> out(static_cast<std::size_t>(b) * c * w, 0.0);
  const double* p = x.data().data();
  for (long long bc = 0; bc < static_cast<long long>(b) * c; ++bc) {
    const double* plane = p + bc * h * w;
    double* dst = out.data() + bc * w;
    for (int hh = 0; hh < h; ++hh) {
      const double* row = plane + static_cast<long long>(hh) * w;
      for (int ww = 0; ww < w; ++ww) dst[ww] += row[ww];
    }
    for (int ww = 0; ww < w; ++ww) dst[ww] *= inv;
  }
  return detail::make_node(
      {b, c, 1, w}, std::move(out), {x},
      [h, w, inv](Node& self) {
        Node& x = *self.parents[0];
        if (!x.requires_grad) return;
        x.ensure_grad();
        const long long planes = self.numel() / w;
        for (long long bc = 0; bc < planes; ++bc) {
          const double* g = self.grad.data() + bc * w;
          double* dplane = x.grad.data() + bc * h * w;
          for (int hh = 0; hh < h; ++hh) {
            double* drow = dplane + static_cast<long long>(hh) * w;
            for (int ww = 0; ww < w; ++ww) drow[ww] += g[ww] * inv;
          }
        }
      },
      "mean_over_height");
}

inline Tensor reshape(const Tensor& x, Shape s) {
  if (shape_numel(s) != x.numel())
    throw std::invalid_argument("reshape: element count mismatch");
  return detail::make_node(
      std::move(s), std::vector<double>(x.data()), {x},
      [](Node& self) {
        Node& x = *self.parents[0];
        if (x.requires_grad) detail::accumulate_same(x, self.grad);
      },
      "reshape");
}

// max(x, floor) on a scalar, with zero gradient when x < floor.
inline Tensor hinge_floor(const Tensor& x, double floor) {
  if (x.numel() != 1) throw std::invalid_argument("hinge_floor: input must be scalar");
  const double v = x.data()[0];
  KinkTracker::note(v - floor);
  return detail::make_node(
      {1}, {std::max(v, floor)}, {x},
      [floor](Node& self) {
        Node& x = *self.parents[0];
        if (!x.requires_grad) return;
        x.ensure_grad();
        if (x.value[0] > floor) x.grad[0] += self.grad[0];
      },
      "hinge_floor");
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

inline void backward(const Tensor& loss) {
  if (!loss.defined()) throw std::logic_error("backward: empty tensor");
  if (loss.numel() != 1)
    throw std::invalid_argument("backward: loss must be a scalar");
  Node* root = loss.node.get();
  if (!root->requires_grad)
    throw std::invalid_argument(
        "backward: loss does not depend on any differentiable leaf");
  if (root->backward_ran)
    throw std::logic_error(
        "backward: graph already consumed; rebuild the forward pass first");
  root->backward_ran = true;

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& top = stack.back();
    Node* n = top.first;
    if (top.second < n->parents.size()) {
      Node* p = n->parents[top.second++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    n->ensure_grad();
    if (n->backprop) n->backprop(*n);
  }
}

}  // namespace greip
