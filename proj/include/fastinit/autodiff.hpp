// Reverse-mode differentiation over a recorded tape of tensor primitives.
//
// Every op stores a forward closure (recomputes its value from its parents)
// and a backward closure (accumulates parent adjoints). Parameter leaves read
// their external storage directly, so replay() re-evaluates a recorded graph
// after a parameter is perturbed without rebuilding it; masks and other
// constants recorded on the tape stay frozen.
#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <numbers>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace fastinit::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

/// Misuse of the tape API (foreign handles, non-scalar losses).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
};

using Index = std::vector<std::uint32_t>;
using IndexPtr = std::shared_ptr<const Index>;
using Groups = std::vector<std::vector<std::uint32_t>>;
using GroupsPtr = std::shared_ptr<const Groups>;

template <class T>
class Tape {
 public:
  using Fn = std::function<void(Tape&, Var)>;

  struct Node {
    const char* op = "";
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool needs_grad = false;
    const std::vector<T>* source = nullptr;
    Fn forward, backward;
  };

  Var constant(Shape shape, std::vector<T> values) {
    require_size(shape, values.size(), "constant");
    Node n;
    n.op = "constant";
    n.shape = std::move(shape);
    n.value = std::move(values);
    return push(std::move(n));
  }

  Var constant(const Tensor4<T>& x) {
    const Dims4& d = x.dims();
    return constant({d.c, d.t, d.h, d.w}, x.storage());
  }

  /// Trainable leaf reading from `storage`, which must outlive the tape.
  Var parameter(Shape shape, const std::vector<T>& storage) {
    require_size(shape, storage.size(), "parameter");
    Node n;
    n.op = "parameter";
    n.shape = std::move(shape);
    n.source = &storage;
    n.needs_grad = true;
    return push(std::move(n));
  }

  /// Records an op. `forward(tape, self)` fills value(self); `backward` reads
  /// grad(self) and accumulates into the parents that need gradients.
  Var custom(const char* name, Shape shape, std::initializer_list<Var> parents, Fn forward, Fn backward) {
    bool needs = false;
    for (Var p : parents) needs = needs || node(p).needs_grad;
    Node n;
    n.op = name;
    n.shape = std::move(shape);
    n.value.assign(numel(n.shape), T(0));
    n.needs_grad = needs;
    n.forward = std::move(forward);
    if (needs) n.backward = std::move(backward);
    Var v = push(std::move(n));
    Fn fwd = nodes_[v.id].forward;
    fwd(*this, v);
    return v;
  }

  const Shape& shape(Var v) const { return node(v).shape; }
  std::size_t size(Var v) const { return value(v).size(); }
  const std::vector<T>& value(Var v) const {
    const Node& n = node(v);
    return n.source ? *n.source : n.value;
  }
  std::vector<T>& out(Var v) { return node(v).value; }
  std::vector<T>& grad(Var v) {
    auto& n = node(v);
    const std::size_t len = n.source ? n.source->size() : n.value.size();
    if (n.grad.size() != len) n.grad.assign(len, T(0));
    return n.grad;
  }
  bool has_grad(Var v) const { return !node(v).grad.empty(); }
  bool needs(Var v) const { return node(v).needs_grad; }
  std::size_t node_count() const { return nodes_.size(); }
  bool owns(Var v) const { return v.id < nodes_.size(); }

  Tensor4<T> tensor(Var v) const {
    const Shape& s = shape(v);
    if (s.size() != 4) throw ContractViolation("tensor(): node is not rank 4");
    return Tensor4<T>(Dims4{s[0], s[1], s[2], s[3]}, value(v));
  }

  T scalar(Var v) const {
    if (size(v) != 1) throw ContractViolation("scalar(): node has " + std::to_string(size(v)) + " elements");
    return value(v)[0];
  }

  /// Reverse sweep from a scalar node. Adjoints from earlier sweeps are cleared.
  void backward(Var loss) {
    if (!owns(loss)) throw ContractViolation("backward(): node does not belong to this tape");
    if (size(loss) != 1)
      throw ContractViolation("backward(): loss must be scalar, has " + std::to_string(size(loss)) +
                              " elements");
    for (auto& n : nodes_) n.grad.clear();
    grad(loss)[0] = T(1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || !n.backward || n.grad.empty()) continue;
      n.backward(*this, Var{i});
    }
  }

  /// Recomputes every node in recording order from the current leaf sources.
  void replay() {
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      Node& n = nodes_[i];
      if (n.forward) n.forward(*this, Var{i});
    }
  }

  const Node& node(Var v) const {
    if (!owns(v)) throw ContractViolation("node handle does not belong to this tape");
    return nodes_[v.id];
  }

 private:
  Node& node(Var v) {
    if (!owns(v)) throw ContractViolation("node handle does not belong to this tape");
    return nodes_[v.id];
  }

  static void require_size(const Shape& s, std::size_t n, const char* what) {
    if (numel(s) != n) fastinit::detail::fail(what, ": shape holds ", numel(s), " values, got ", n);
  }

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

namespace detail {
// Four independent partial sums; a plain reduction loop runs serially.
template <class T>
T dot(const T* a, const T* b, std::size_t n) {
  T s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  std::size_t k = 0;
  for (; k + 4 <= n; k += 4) {
    s0 += a[k] * b[k];
    s1 += a[k + 1] * b[k + 1];
    s2 += a[k + 2] * b[k + 2];
    s3 += a[k + 3] * b[k + 3];
  }
  for (; k < n; ++k) s0 += a[k] * b[k];
  return (s0 + s1) + (s2 + s3);
}

template <class T>
void same_size(const Tape<T>& t, Var a, Var b, const char* op) {
  if (t.size(a) != t.size(b))
    fastinit::detail::fail(op, ": operand sizes ", t.size(a), " and ", t.size(b), " differ");
}
}  // namespace detail

// ---- elementwise -------------------------------------------------------------

template <class T>
Var add(Tape<T>& tape, Var a, Var b) {
  detail::same_size(tape, a, b, "add");
  return tape.custom("add", tape.shape(a), {a, b},
      [a, b](Tape<T>& t, Var y) {
        auto& o = t.out(y);
        const auto &x1 = t.value(a), &x2 = t.value(b);
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = x1[i] + x2[i];
      },
      [a, b](Tape<T>& t, Var y) {
        const auto& g = t.grad(y);
        for (Var p : {a, b})
          if (t.needs(p)) {
            auto& gp = t.grad(p);
            for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i];
          }
      });
}

template <class T>
Var mul(Tape<T>& tape, Var a, Var b) {
  detail::same_size(tape, a, b, "mul");
  return tape.custom("mul", tape.shape(a), {a, b},
      [a, b](Tape<T>& t, Var y) {
        auto& o = t.out(y);
        const auto &x1 = t.value(a), &x2 = t.value(b);
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = x1[i] * x2[i];
      },
      [a, b](Tape<T>& t, Var y) {
        const auto& g = t.grad(y);
        if (t.needs(a)) {
          auto& ga = t.grad(a);
          const auto& xb = t.value(b);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * xb[i];
        }
        if (t.needs(b)) {
          auto& gb = t.grad(b);
          const auto& xa = t.value(a);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * xa[i];
        }
      });
}

/// s * a for a one-element node s.
template <class T>
Var scale(Tape<T>& tape, Var a, Var s) {
  if (tape.size(s) != 1) fastinit::detail::fail("scale: scalar operand has ", tape.size(s), " elements");
  return tape.custom("scale", tape.shape(a), {a, s},
      [a, s](Tape<T>& t, Var y) {
        auto& o = t.out(y);
        const auto& x = t.value(a);
        const T k = t.value(s)[0];
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = k * x[i];
      },
      [a, s](Tape<T>& t, Var y) {
        const auto& g = t.grad(y);
        if (t.needs(a)) {
          auto& ga = t.grad(a);
          const T k = t.value(s)[0];
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += k * g[i];
        }
        if (t.needs(s)) {
          const auto& x = t.value(a);
          T acc = 0;
          for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * x[i];
          t.grad(s)[0] += acc;
        }
      });
}

template <class T>
Var scale_const(Tape<T>& tape, Var a, T k) {
  return tape.custom("scale_const", tape.shape(a), {a},
      [a, k](Tape<T>& t, Var y) {
        auto& o = t.out(y);
        const auto& x = t.value(a);
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = k * x[i];
      },
      [a, k](Tape<T>& t, Var y) {
        const auto& g = t.grad(y);
        auto& ga = t.grad(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += k * g[i];
      });
}

namespace detail {
template <class T, class F, class DF>
Var unary(Tape<T>& tape, const char* name, Var a, F f, DF df) {
  return tape.custom(name, tape.shape(a), {a},
      [a, f](Tape<T>& t, Var y) {
        auto& o = t.out(y);
        const auto& x = t.value(a);
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = f(x[i]);
      },
      [a, df](Tape<T>& t, Var y) {
        const auto& g = t.grad(y);
        const auto& x = t.value(a);
        const auto& o = t.value(y);
        auto& ga = t.grad(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(x[i], o[i]);
      });
}
}  // namespace detail

template <class T>
Var sigmoid(Tape<T>& tape, Var a) {
  return detail::unary(tape, "sigmoid", a,
      [](T x) { return T(1) / (T(1) + std::exp(-x)); },
      [](T, T s) { return s * (T(1) - s); });
}

/// Exact (erf) GELU.
template <class T>
Var gelu(Tape<T>& tape, Var a) {
  return detail::unary(tape, "gelu", a,
      [](T x) { return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>)); },
      [](T x, T) {
        const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
        const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * std::numbers::pi_v<T>);
        return cdf + x * pdf;
      });
}

template <class T>
Var square(Tape<T>& tape, Var a) {
  return detail::unary(tape, "square", a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

// ---- reductions ---------------------------------------------------------------

template <class T>
Var sum(Tape<T>& tape, Var a) {
  return tape.custom("sum", {1}, {a},
      [a](Tape<T>& t, Var y) {
        T acc = 0;
        for (T v : t.value(a)) acc += v;
        t.out(y)[0] = acc;
      },
      [a](Tape<T>& t, Var y) {
        const T g = t.grad(y)[0];
        for (T& v : t.grad(a)) v += g;
      });
}

/// mean((pred - target)^2) against a fixed target.
template <class T>
Var mse(Tape<T>& tape, Var pred, std::shared_ptr<const std::vector<T>> target) {
  if (tape.size(pred) != target->size())
    fastinit::detail::fail("mse: prediction has ", tape.size(pred), " elements, target ", target->size());
  return tape.custom("mse", {1}, {pred},
      [pred, target](Tape<T>& t, Var y) {
        const auto& p = t.value(pred);
        T acc = 0;
        for (std::size_t i = 0; i < p.size(); ++i) {
          const T d = p[i] - (*target)[i];
          acc += d * d;
        }
        t.out(y)[0] = acc / static_cast<T>(p.size());
      },
      [pred, target](Tape<T>& t, Var y) {
        const auto& p = t.value(pred);
        const T k = T(2) * t.grad(y)[0] / static_cast<T>(p.size());
        auto& gp = t.grad(pred);
        for (std::size_t i = 0; i < p.size(); ++i) gp[i] += k * (p[i] - (*target)[i]);
      });
}

// ---- layout ---------------------------------------------------------------------

/// y[i] = x[index[i]]; the adjoint scatter-adds. Covers reshapes, transposes,
/// broadcasts, window partitioning and nearest-neighbour upsampling.
template <class T>
Var gather(Tape<T>& tape, Var x, IndexPtr index, Shape shape) {
  if (numel(shape) != index->size())
    fastinit::detail::fail("gather: shape holds ", numel(shape), " values, index has ", index->size());
  const std::size_t n = tape.size(x);
  for (auto i : *index)
    if (i >= n) fastinit::detail::fail("gather: index ", i, " out of range for ", n, " elements");
  return tape.custom("gather", std::move(shape), {x},
      [x, index](Tape<T>& t, Var y) {
        auto& o = t.out(y);
        const auto& v = t.value(x);
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = v[(*index)[i]];
      },
      [x, index](Tape<T>& t, Var y) {
        const auto& g = t.grad(y);
        auto& gx = t.grad(x);
        for (std::size_t i = 0; i < g.size(); ++i) gx[(*index)[i]] += g[i];
      });
}

template <class T>
Var reshape(Tape<T>& tape, Var x, Shape shape) {
  if (numel(shape) != tape.size(x))
    fastinit::detail::fail("reshape: ", tape.size(x), " elements into shape of ", numel(shape));
  return tape.custom("reshape", std::move(shape), {x},
      [x](Tape<T>& t, Var y) { t.out(y) = t.value(x); },
      [x](Tape<T>& t, Var y) {
        const auto& g = t.grad(y);
        auto& gx = t.grad(x);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      });
}

/// Flat concatenation.
template <class T>
Var concat(Tape<T>& tape, const std::vector<Var>& parts) {
  // custom() takes a fixed parent list, so longer lists are chained pairwise.
  if (parts.empty()) fastinit::detail::fail("concat: no inputs");
  Var acc = parts[0];
  for (std::size_t k = 1; k < parts.size(); ++k) {
    Var a = acc, b = parts[k];
    const std::size_t na = tape.size(a), nb = tape.size(b);
    acc = tape.custom("concat", {na + nb}, {a, b},
        [a, b, na](Tape<T>& t, Var y) {
          auto& o = t.out(y);
          const auto &x1 = t.value(a), &x2 = t.value(b);
          std::copy(x1.begin(), x1.end(), o.begin());
          std::copy(x2.begin(), x2.end(), o.begin() + static_cast<std::ptrdiff_t>(na));
        },
        [a, b, na](Tape<T>& t, Var y) {
          const auto& g = t.grad(y);
          if (t.needs(a)) {
            auto& ga = t.grad(a);
            for (std::size_t i = 0; i < na; ++i) ga[i] += g[i];
          }
          if (t.needs(b)) {
            auto& gb = t.grad(b);
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[na + i];
          }
        });
  }
  return acc;
}

// ---- dense layers -----------------------------------------------------------------

/// y = x W^T + b, x [N, in], W [out, in], b [out].
template <class T>
Var linear(Tape<T>& tape, Var x, Var weight, Var bias) {
  const Shape& ws = tape.shape(weight);
  if (ws.size() != 2) fastinit::detail::fail("linear: weight must be 2-D");
  const std::size_t out_f = ws[0], in_f = ws[1];
  if (tape.size(x) % in_f != 0)
    fastinit::detail::fail("linear: input of ", tape.size(x), " values is not a multiple of ", in_f);
  if (tape.size(bias) != out_f) fastinit::detail::fail("linear: bias has ", tape.size(bias), " values, expected ", out_f);
  const std::size_t rows = tape.size(x) / in_f;
  return tape.custom("linear", {rows, out_f}, {x, weight, bias},
      [=](Tape<T>& t, Var y) {
        auto& o = t.out(y);
        const auto &xv = t.value(x), &w = t.value(weight), &b = t.value(bias);
        if (rows < 4) {
          for (std::size_t n = 0; n < rows; ++n)
            for (std::size_t j = 0; j < out_f; ++j) o[n * out_f + j] = b[j] + detail::dot(&xv[n * in_f], &w[j * in_f], in_f);
          return;
        }
        // Transposed weights keep the output axis contiguous (vectorizable).
        std::vector<T> wt(in_f * out_f);
        for (std::size_t j = 0; j < out_f; ++j)
          for (std::size_t k = 0; k < in_f; ++k) wt[k * out_f + j] = w[j * in_f + k];
        for (std::size_t n = 0; n < rows; ++n) {
          T* orow = &o[n * out_f];
          std::copy(b.begin(), b.end(), orow);
          const T* xr = &xv[n * in_f];
          for (std::size_t k = 0; k < in_f; ++k) {
            const T xk = xr[k];
            const T* wr = &wt[k * out_f];
            for (std::size_t j = 0; j < out_f; ++j) orow[j] += xk * wr[j];
          }
        }
      },
      [=](Tape<T>& t, Var y) {
        const auto& g = t.grad(y);
        const auto &xv = t.value(x), &w = t.value(weight);
        if (t.needs(x)) {
          auto& gx = t.grad(x);
          for (std::size_t n = 0; n < rows; ++n)
            for (std::size_t j = 0; j < out_f; ++j) {
              const T gj = g[n * out_f + j];
              if (gj == T(0)) continue;
              const T* wr = &w[j * in_f];
              T* gr = &gx[n * in_f];
              for (std::size_t k = 0; k < in_f; ++k) gr[k] += gj * wr[k];
            }
        }
        if (t.needs(weight)) {
          auto& gw = t.grad(weight);
          for (std::size_t n = 0; n < rows; ++n)
            for (std::size_t j = 0; j < out_f; ++j) {
              const T gj = g[n * out_f + j];
              if (gj == T(0)) continue;
              const T* xr = &xv[n * in_f];
              T* gr = &gw[j * in_f];
              for (std::size_t k = 0; k < in_f; ++k) gr[k] += gj * xr[k];
            }
        }
        if (t.needs(bias)) {
          auto& gb = t.grad(bias);
          for (std::size_t n = 0; n < rows; ++n)
            for (std::size_t j = 0; j < out_f; ++j) gb[j] += g[n * out_f + j];
        }
      });
}

/// a [M, K] times b [K, N].
template <class T>
Var matmul(Tape<T>& tape, Var a, Var b) {
  const Shape &sa = tape.shape(a), &sb = tape.shape(b);
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
    fastinit::detail::fail("matmul: incompatible operand shapes");
  const std::size_t m = sa[0], k = sa[1], n = sb[1];
  return tape.custom("matmul", {m, n}, {a, b},
      [=](Tape<T>& t, Var y) {
        auto& o = t.out(y);
        std::fill(o.begin(), o.end(), T(0));
        const auto &av = t.value(a), &bv = t.value(b);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const T aip = av[i * k + p];
            const T* br = &bv[p * n];
            T* orow = &o[i * n];
            for (std::size_t j = 0; j < n; ++j) orow[j] += aip * br[j];
          }
      },
      [=](Tape<T>& t, Var y) {
        const auto& g = t.grad(y);
        const auto &av = t.value(a), &bv = t.value(b);
        if (t.needs(a)) {
          auto& ga = t.grad(a);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              T acc = 0;
              for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bv[p * n + j];
              ga[i * k + p] += acc;
            }
        }
        if (t.needs(b)) {
          auto& gb = t.grad(b);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              const T aip = av[i * k + p];
              for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
            }
        }
      });
}

/// Softmax over the last axis.
template <class T>
Var softmax(Tape<T>& tape, Var a) {
  const std::size_t d = tape.shape(a).back();
  return tape.custom("softmax", tape.shape(a), {a},
      [a, d](Tape<T>& t, Var y) {
        auto& o = t.out(y);
        const auto& x = t.value(a);
        for (std::size_t r = 0; r < o.size() / d; ++r) {
          const T* xr = &x[r * d];
          T* orow = &o[r * d];
          T mx = xr[0];
          for (std::size_t i = 1; i < d; ++i) mx = std::max(mx, xr[i]);
          T z = 0;
          for (std::size_t i = 0; i < d; ++i) z += (orow[i] = std::exp(xr[i] - mx));
          for (std::size_t i = 0; i < d; ++i) orow[i] /= z;
        }
      },
      [a, d](Tape<T>& t, Var y) {
        const auto &g = t.grad(y), &s = t.value(y);
        auto& ga = t.grad(a);
        for (std::size_t r = 0; r < s.size() / d; ++r) {
          T dot = 0;
          for (std::size_t i = 0; i < d; ++i) dot += g[r * d + i] * s[r * d + i];
          for (std::size_t i = 0; i < d; ++i) ga[r * d + i] += s[r * d + i] * (g[r * d + i] - dot);
        }
      });
}

/// Normalizes each row of x [N, D] to zero mean / unit variance, then applies
/// gamma and beta.
template <class T>
Var layer_norm(Tape<T>& tape, Var x, Var gamma, Var beta, T eps = T(1e-5)) {
  const std::size_t d = tape.size(gamma);
  if (tape.size(beta) != d || tape.size(x) % d != 0) fastinit::detail::fail("layer_norm: shape mismatch");
  const std::size_t rows = tape.size(x) / d;
  auto stats = std::make_shared<std::vector<T>>(2 * rows);  // mean, 1/std per row
  return tape.custom("layer_norm", tape.shape(x), {x, gamma, beta},
      [=](Tape<T>& t, Var y) {
        auto& o = t.out(y);
        const auto &xv = t.value(x), &gm = t.value(gamma), &bt = t.value(beta);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* xr = &xv[r * d];
          T mean = 0;
          for (std::size_t i = 0; i < d; ++i) mean += xr[i];
          mean /= static_cast<T>(d);
          T var = 0;
          for (std::size_t i = 0; i < d; ++i) var += (xr[i] - mean) * (xr[i] - mean);
          var /= static_cast<T>(d);
          const T inv = T(1) / std::sqrt(var + eps);
          (*stats)[2 * r] = mean;
          (*stats)[2 * r + 1] = inv;
          for (std::size_t i = 0; i < d; ++i) o[r * d + i] = (xr[i] - mean) * inv * gm[i] + bt[i];
        }
      },
      [=](Tape<T>& t, Var y) {
        const auto& g = t.grad(y);
        const auto &xv = t.value(x), &gm = t.value(gamma);
        const bool gx_on = t.needs(x), gg_on = t.needs(gamma), gb_on = t.needs(beta);
        for (std::size_t r = 0; r < rows; ++r) {
          const T mean = (*stats)[2 * r], inv = (*stats)[2 * r + 1];
          T sum_g = 0, sum_gx = 0;
          for (std::size_t i = 0; i < d; ++i) {
            const T xhat = (xv[r * d + i] - mean) * inv;
            const T gh = g[r * d + i] * gm[i];
            sum_g += gh;
            sum_gx += gh * xhat;
            if (gg_on) t.grad(gamma)[i] += g[r * d + i] * xhat;
            if (gb_on) t.grad(beta)[i] += g[r * d + i];
          }
          if (gx_on) {
            auto& gx = t.grad(x);
            for (std::size_t i = 0; i < d; ++i) {
              const T xhat = (xv[r * d + i] - mean) * inv;
              const T gh = g[r * d + i] * gm[i];
              gx[r * d + i] += inv * (gh - sum_g / static_cast<T>(d) - xhat * sum_gx / static_cast<T>(d));
            }
          }
        }
      });
}

// ---- spatio-temporal ops --------------------------------------------------------------

/// Depthwise 3x3x3 convolution with zero padding over a token grid; x is
/// [gt*gh*gw, D] in grid order, kernel [D, 27], bias [D].
template <class T>
Var dwconv3d(Tape<T>& tape, Var x, Var kernel, Var bias, std::array<std::size_t, 3> grid) {
  const std::size_t d = tape.size(bias);
  const std::size_t n = grid[0] * grid[1] * grid[2];
  if (tape.size(x) != n * d || tape.size(kernel) != 27 * d)
    fastinit::detail::fail("dwconv3d: shape mismatch");
  auto for_each_tap = [grid](auto&& fn) {
    const long gt = static_cast<long>(grid[0]), gh = static_cast<long>(grid[1]), gw = static_cast<long>(grid[2]);
    for (long t = 0; t < gt; ++t)
      for (long h = 0; h < gh; ++h)
        for (long w = 0; w < gw; ++w) {
          const std::size_t p = static_cast<std::size_t>((t * gh + h) * gw + w);
          for (int dt = -1; dt <= 1; ++dt)
            for (int dh = -1; dh <= 1; ++dh)
              for (int dw = -1; dw <= 1; ++dw) {
                const long tt = t + dt, hh = h + dh, ww = w + dw;
                if (tt < 0 || tt >= gt || hh < 0 || hh >= gh || ww < 0 || ww >= gw) continue;
                const std::size_t q = static_cast<std::size_t>((tt * gh + hh) * gw + ww);
                fn(p, q, static_cast<std::size_t>((dt + 1) * 9 + (dh + 1) * 3 + (dw + 1)));
              }
        }
  };
  return tape.custom("dwconv3d", tape.shape(x), {x, kernel, bias},
      [=](Tape<T>& t, Var y) {
        auto& o = t.out(y);
        const auto &xv = t.value(x), &k = t.value(kernel), &b = t.value(bias);
        for (std::size_t p = 0; p < n; ++p)
          for (std::size_t c = 0; c < d; ++c) o[p * d + c] = b[c];
        for_each_tap([&](std::size_t p, std::size_t q, std::size_t tap) {
          for (std::size_t c = 0; c < d; ++c) o[p * d + c] += k[c * 27 + tap] * xv[q * d + c];
        });
      },
      [=](Tape<T>& t, Var y) {
        const auto& g = t.grad(y);
        const auto &xv = t.value(x), &k = t.value(kernel);
        const bool gx_on = t.needs(x), gk_on = t.needs(kernel);
        if (t.needs(bias)) {
          auto& gb = t.grad(bias);
          for (std::size_t p = 0; p < n; ++p)
            for (std::size_t c = 0; c < d; ++c) gb[c] += g[p * d + c];
        }
        if (!gx_on && !gk_on) return;
        std::vector<T>* gx = gx_on ? &t.grad(x) : nullptr;
        std::vector<T>* gk = gk_on ? &t.grad(kernel) : nullptr;
        for_each_tap([&](std::size_t p, std::size_t q, std::size_t tap) {
          for (std::size_t c = 0; c < d; ++c) {
            const T gp = g[p * d + c];
            if (gx) (*gx)[q * d + c] += k[c * 27 + tap] * gp;
            if (gk) (*gk)[c * 27 + tap] += xv[q * d + c] * gp;
          }
        });
      });
}

/// Multi-head softmax(Q K^T / sqrt(d_head)) V restricted to token groups.
/// qkv is [N, 3D] laid out as [q | k | v]; output is [N, D]. Tokens not in any
/// group produce zeros.
template <class T>
Var attention(Tape<T>& tape, Var qkv, std::size_t heads, GroupsPtr groups) {
  const Shape& s = tape.shape(qkv);
  if (s.size() != 2 || s[1] % 3 != 0) fastinit::detail::fail("attention: qkv must be [N, 3D]");
  const std::size_t n = s[0], d = s[1] / 3;
  if (heads == 0 || d % heads != 0) fastinit::detail::fail("attention: ", d, " features not divisible by ", heads, " heads");
  const std::size_t hd = d / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  // Saved attention probabilities, per group and head, row-major.
  auto probs = std::make_shared<std::vector<std::vector<T>>>(groups->size() * heads);
  return tape.custom("attention", {n, d}, {qkv},
      [=](Tape<T>& t, Var y) {
        auto& o = t.out(y);
        std::fill(o.begin(), o.end(), T(0));
        const auto& x = t.value(qkv);
        for (std::size_t gi = 0; gi < groups->size(); ++gi) {
          const auto& grp = (*groups)[gi];
          const std::size_t m = grp.size();
          for (std::size_t h = 0; h < heads; ++h) {
            auto& p = (*probs)[gi * heads + h];
            p.assign(m * m, T(0));
            for (std::size_t i = 0; i < m; ++i) {
              const T* q = &x[grp[i] * 3 * d + h * hd];
              T mx = -std::numeric_limits<T>::infinity();
              for (std::size_t j = 0; j < m; ++j) {
                const T* k = &x[grp[j] * 3 * d + d + h * hd];
                T acc = 0;
                for (std::size_t e = 0; e < hd; ++e) acc += q[e] * k[e];
                p[i * m + j] = acc * scale;
                mx = std::max(mx, p[i * m + j]);
              }
              T z = 0;
              for (std::size_t j = 0; j < m; ++j) z += (p[i * m + j] = std::exp(p[i * m + j] - mx));
              for (std::size_t j = 0; j < m; ++j) p[i * m + j] /= z;
              T* orow = &o[grp[i] * d + h * hd];
              for (std::size_t j = 0; j < m; ++j) {
                const T pij = p[i * m + j];
                const T* v = &x[grp[j] * 3 * d + 2 * d + h * hd];
                for (std::size_t e = 0; e < hd; ++e) orow[e] += pij * v[e];
              }
            }
          }
        }
      },
      [=](Tape<T>& t, Var y) {
        const auto& g = t.grad(y);
        const auto& x = t.value(qkv);
        auto& gx = t.grad(qkv);
        std::vector<T> dp;
        for (std::size_t gi = 0; gi < groups->size(); ++gi) {
          const auto& grp = (*groups)[gi];
          const std::size_t m = grp.size();
          for (std::size_t h = 0; h < heads; ++h) {
            const auto& p = (*probs)[gi * heads + h];
            dp.assign(m * m, T(0));
            // dV = P^T dO ; dP = dO V^T
            for (std::size_t i = 0; i < m; ++i) {
              const T* go = &g[grp[i] * d + h * hd];
              for (std::size_t j = 0; j < m; ++j) {
                const T* v = &x[grp[j] * 3 * d + 2 * d + h * hd];
                T* gv = &gx[grp[j] * 3 * d + 2 * d + h * hd];
                const T pij = p[i * m + j];
                T acc = 0;
                for (std::size_t e = 0; e < hd; ++e) {
                  gv[e] += pij * go[e];
                  acc += go[e] * v[e];
                }
                dp[i * m + j] = acc;
              }
            }
            // dS = P * (dP - rowsum(dP * P)); dQ = dS K * scale; dK = dS^T Q * scale
            for (std::size_t i = 0; i < m; ++i) {
              T dot = 0;
              for (std::size_t j = 0; j < m; ++j) dot += dp[i * m + j] * p[i * m + j];
              const T* q = &x[grp[i] * 3 * d + h * hd];
              T* gq = &gx[grp[i] * 3 * d + h * hd];
              for (std::size_t j = 0; j < m; ++j) {
                const T ds = p[i * m + j] * (dp[i * m + j] - dot) * scale;
                if (ds == T(0)) continue;
                const T* k = &x[grp[j] * 3 * d + d + h * hd];
                T* gk = &gx[grp[j] * 3 * d + d + h * hd];
                for (std::size_t e = 0; e < hd; ++e) {
                  gq[e] += ds * k[e];
                  gk[e] += ds * q[e];
                }
              }
            }
          }
        }
      });
}

/// Row-wise mean over token groups: x [N, D] -> [G, D].
template <class T>
Var group_mean(Tape<T>& tape, Var x, GroupsPtr groups, std::size_t d) {
  if (d == 0 || tape.size(x) % d != 0) fastinit::detail::fail("group_mean: feature width mismatch");
  const std::size_t n = tape.size(x) / d;
  for (const auto& g : *groups) {
    if (g.empty()) fastinit::detail::fail("group_mean: empty group");
    for (auto i : g)
      if (i >= n) fastinit::detail::fail("group_mean: token ", i, " out of range for ", n);
  }
  return tape.custom("group_mean", {groups->size(), d}, {x},
      [=](Tape<T>& t, Var y) {
        auto& o = t.out(y);
        const auto& v = t.value(x);
        for (std::size_t gi = 0; gi < groups->size(); ++gi) {
          const auto& g = (*groups)[gi];
          const T inv = T(1) / static_cast<T>(g.size());
          for (std::size_t c = 0; c < d; ++c) {
            T acc = 0;
            for (auto i : g) acc += v[i * d + c];
            o[gi * d + c] = acc * inv;
          }
        }
      },
      [=](Tape<T>& t, Var y) {
        const auto& g = t.grad(y);
        auto& gx = t.grad(x);
        for (std::size_t gi = 0; gi < groups->size(); ++gi) {
          const auto& grp = (*groups)[gi];
          const T inv = T(1) / static_cast<T>(grp.size());
          for (auto i : grp)
            for (std::size_t c = 0; c < d; ++c) gx[i * d + c] += g[gi * d + c] * inv;
        }
      });
}

/// base + s * r, except that entries where s * r is exactly zero copy `base`
/// untouched (so a zero residual leaves the signed zeros of `base` intact).
template <class T>
Var residual_mix(Tape<T>& tape, Var base, Var r, Var s) {
  detail::same_size(tape, base, r, "residual_mix");
  if (tape.size(s) != 1) fastinit::detail::fail("residual_mix: scale must be a scalar");
  return tape.custom("residual_mix", tape.shape(base), {base, r, s},
      [=](Tape<T>& t, Var y) {
        auto& o = t.out(y);
        const auto &b = t.value(base), &rv = t.value(r);
        const T k = t.value(s)[0];
        for (std::size_t i = 0; i < o.size(); ++i) {
          const T add = k * rv[i];
          o[i] = add == T(0) ? b[i] : b[i] + add;
        }
      },
      [=](Tape<T>& t, Var y) {
        const auto& g = t.grad(y);
        const T k = t.value(s)[0];
        if (t.needs(base)) {
          auto& gb = t.grad(base);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        }
        if (t.needs(r)) {
          auto& gr = t.grad(r);
          for (std::size_t i = 0; i < g.size(); ++i) gr[i] += k * g[i];
        }
        if (t.needs(s)) {
          const auto& rv = t.value(r);
          T acc = 0;
          for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * rv[i];
          t.grad(s)[0] += acc;
        }
      });
}

/// x ×_mode a for a rank-4 node x and a 2-D node a; differentiable in both.
template <class T>
Var mode_product(Tape<T>& tape, Var x, Var a, int mode) {
  const std::size_t m = check_mode(mode);
  const Shape &sx = tape.shape(x), &sa = tape.shape(a);
  if (sx.size() != 4 || sa.size() != 2) fastinit::detail::fail("mode_product: expects rank-4 tensor and matrix");
  if (sa[1] != sx[m])
    fastinit::detail::fail("mode_product: matrix has ", sa[1], " columns but mode ", mode, " has extent ", sx[m]);
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < m; ++i) outer *= sx[i];
  for (std::size_t i = m + 1; i < 4; ++i) inner *= sx[i];
  const std::size_t n = sx[m], rows = sa[0];
  Shape so = sx;
  so[m] = rows;
  return tape.custom("mode_product", so, {x, a},
      [=](Tape<T>& t, Var y) {
        fastinit::detail::mode_product_raw(t.value(x).data(), t.value(a).data(), t.out(y).data(), outer, n,
                                           inner, rows);
      },
      [=](Tape<T>& t, Var y) {
        const auto &g = t.grad(y), &xv = t.value(x), &av = t.value(a);
        if (t.needs(x)) {
          auto& gx = t.grad(x);
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < rows; ++i) {
              const T* gr = &g[(o * rows + i) * inner];
              const T* ar = &av[i * n];
              if (inner == 1) {
                T* gxr = &gx[o * n];
                for (std::size_t j = 0; j < n; ++j) gxr[j] += gr[0] * ar[j];
                continue;
              }
              for (std::size_t j = 0; j < n; ++j) {
                T* gxr = &gx[(o * n + j) * inner];
                for (std::size_t k = 0; k < inner; ++k) gxr[k] += ar[j] * gr[k];
              }
            }
        }
        if (t.needs(a)) {
          auto& ga = t.grad(a);
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < rows; ++i) {
              const T* gr = &g[(o * rows + i) * inner];
              T* gar = &ga[i * n];
              if (inner == 1) {
                const T* xr = &xv[o * n];
                for (std::size_t j = 0; j < n; ++j) gar[j] += gr[0] * xr[j];
                continue;
              }
              for (std::size_t j = 0; j < n; ++j) gar[j] += detail::dot(gr, &xv[(o * n + j) * inner], inner);
            }
        }
      });
}

}  // namespace fastinit::ad
