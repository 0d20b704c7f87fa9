#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tkgx/common.hpp"

// Dense double-precision tensors with tape-based reverse-mode autodiff.
// A Tape records every produced node in creation order (which is topological
// by construction); backward() sweeps the record in reverse. Leaves are
// created off-tape and survive tape resets, so model parameters persist
// across forward passes.

namespace tkgx::ad {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

struct Node {
  Shape shape;
  std::vector<double> val;
  std::vector<double> grad;  // allocated iff requires_grad
  bool requires_grad = false;
  std::function<void()> back;  // unset on leaves

  int64_t numel() const { return static_cast<int64_t>(val.size()); }
  int64_t rows() const { return shape.empty() ? 1 : shape[0]; }
  int64_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }
};

using Var = std::shared_ptr<Node>;

inline Var make_leaf(Shape shape, std::vector<double> vals, bool requires_grad = false) {
  auto n = std::make_shared<Node>();
  if (static_cast<int64_t>(vals.size()) != shape_numel(shape))
    throw ShapeError("leaf: value count " + std::to_string(vals.size()) + " does not match shape " + shape_str(shape));
  n->shape = std::move(shape);
  n->val = std::move(vals);
  n->requires_grad = requires_grad;
  if (requires_grad) n->grad.assign(n->val.size(), 0.0);
  return n;
}

inline Var zeros(Shape shape, bool requires_grad = false) {
  std::vector<double> v(shape_numel(shape), 0.0);
  return make_leaf(std::move(shape), std::move(v), requires_grad);
}

inline Var scalar(double x) { return make_leaf({}, {x}); }

class Tape {
 public:
  Var record(Var n) {
    nodes_.push_back(n);
    return n;
  }

  // Reverse sweep. Intermediate grads are zeroed first so repeated backward
  // calls on one tape stay additive on the leaves only.
  void backward(const Var& objective) {
    if (objective->numel() != 1)
      throw ContractError("backward: objective must be scalar, got " + shape_str(objective->shape));
    for (auto& n : nodes_)
      if (n->requires_grad) std::fill(n->grad.begin(), n->grad.end(), 0.0);
    if (!objective->requires_grad) return;
    objective->grad[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it)
      if ((*it)->back) (*it)->back();
  }

  void reset() { nodes_.clear(); }
  size_t size() const { return nodes_.size(); }

  bool grad_enabled() const { return grad_enabled_; }
  void set_grad_enabled(bool on) { grad_enabled_ = on; }

 private:
  std::vector<Var> nodes_;
  bool grad_enabled_ = true;
};

// RAII guard for forward-only evaluation (finite differencing, ranking).
struct NoGradGuard {
  explicit NoGradGuard(Tape& t) : tape(t), saved(t.grad_enabled()) { tape.set_grad_enabled(false); }
  ~NoGradGuard() { tape.set_grad_enabled(saved); }
  Tape& tape;
  bool saved;
};

namespace detail {

inline Var fresh(Tape& t, Shape shape, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->val.assign(shape_numel(n->shape), 0.0);
  n->requires_grad = requires_grad && t.grad_enabled();
  if (n->requires_grad) n->grad.assign(n->val.size(), 0.0);
  return n;
}

inline void check_same_shape(const char* op, const Var& a, const Var& b) {
  if (a->shape != b->shape)
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a->shape) + " vs " + shape_str(b->shape));
}

}  // namespace detail

// ---- elementwise -----------------------------------------------------------

inline Var add(Tape& t, const Var& a, const Var& b) {
  detail::check_same_shape("add", a, b);
  auto out = detail::fresh(t, a->shape, a->requires_grad || b->requires_grad);
  for (int64_t i = 0; i < out->numel(); ++i) out->val[i] = a->val[i] + b->val[i];
  if (out->requires_grad) {
    Node* o = out.get();
    out->back = [a, b, o]() {
      for (int64_t i = 0; i < o->numel(); ++i) {
        if (a->requires_grad) a->grad[i] += o->grad[i];
        if (b->requires_grad) b->grad[i] += o->grad[i];
      }
    };
  }
  return t.record(out);
}

inline Var sub(Tape& t, const Var& a, const Var& b) {
  detail::check_same_shape("sub", a, b);
  auto out = detail::fresh(t, a->shape, a->requires_grad || b->requires_grad);
  for (int64_t i = 0; i < out->numel(); ++i) out->val[i] = a->val[i] - b->val[i];
  if (out->requires_grad) {
    Node* o = out.get();
    out->back = [a, b, o]() {
      for (int64_t i = 0; i < o->numel(); ++i) {
        if (a->requires_grad) a->grad[i] += o->grad[i];
        if (b->requires_grad) b->grad[i] -= o->grad[i];
      }
    };
  }
  return t.record(out);
}

inline Var mul(Tape& t, const Var& a, const Var& b) {
  detail::check_same_shape("mul", a, b);
  auto out = detail::fresh(t, a->shape, a->requires_grad || b->requires_grad);
  for (int64_t i = 0; i < out->numel(); ++i) out->val[i] = a->val[i] * b->val[i];
  if (out->requires_grad) {
    Node* o = out.get();
    out->back = [a, b, o]() {
      for (int64_t i = 0; i < o->numel(); ++i) {
        if (a->requires_grad) a->grad[i] += o->grad[i] * b->val[i];
        if (b->requires_grad) b->grad[i] += o->grad[i] * a->val[i];
      }
    };
  }
  return t.record(out);
}

// k*a + c
inline Var affine(Tape& t, const Var& a, double k, double c) {
  auto out = detail::fresh(t, a->shape, a->requires_grad);
  for (int64_t i = 0; i < out->numel(); ++i) out->val[i] = k * a->val[i] + c;
  if (out->requires_grad) {
    Node* o = out.get();
    out->back = [a, k, o]() {
      for (int64_t i = 0; i < o->numel(); ++i) a->grad[i] += k * o->grad[i];
    };
  }
  return t.record(out);
}

inline Var neg(Tape& t, const Var& a) { return affine(t, a, -1.0, 0.0); }
inline Var one_minus(Tape& t, const Var& a) { return affine(t, a, -1.0, 1.0); }

inline Var clip(Tape& t, const Var& a, double lo, double hi) {
  auto out = detail::fresh(t, a->shape, a->requires_grad);
  for (int64_t i = 0; i < out->numel(); ++i) out->val[i] = std::min(hi, std::max(lo, a->val[i]));
  if (out->requires_grad) {
    Node* o = out.get();
    out->back = [a, lo, hi, o]() {
      for (int64_t i = 0; i < o->numel(); ++i)
        if (a->val[i] > lo && a->val[i] < hi) a->grad[i] += o->grad[i];
    };
  }
  return t.record(out);
}

inline Var vlog(Tape& t, const Var& a) {
  auto out = detail::fresh(t, a->shape, a->requires_grad);
  for (int64_t i = 0; i < out->numel(); ++i) out->val[i] = std::log(a->val[i]);
  if (out->requires_grad) {
    Node* o = out.get();
    out->back = [a, o]() {
      for (int64_t i = 0; i < o->numel(); ++i) a->grad[i] += o->grad[i] / a->val[i];
    };
  }
  return t.record(out);
}

inline Var sigmoid(Tape& t, const Var& a) {
  auto out = detail::fresh(t, a->shape, a->requires_grad);
  for (int64_t i = 0; i < out->numel(); ++i) {
    double x = a->val[i];
    // branch keeps exp argument negative for stability on either sign
    out->val[i] = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }
  if (out->requires_grad) {
    Node* o = out.get();
    out->back = [a, o]() {
      for (int64_t i = 0; i < o->numel(); ++i) {
        double y = o->val[i];
        a->grad[i] += o->grad[i] * y * (1.0 - y);
      }
    };
  }
  return t.record(out);
}

inline Var vtanh(Tape& t, const Var& a) {
  auto out = detail::fresh(t, a->shape, a->requires_grad);
  for (int64_t i = 0; i < out->numel(); ++i) out->val[i] = std::tanh(a->val[i]);
  if (out->requires_grad) {
    Node* o = out.get();
    out->back = [a, o]() {
      for (int64_t i = 0; i < o->numel(); ++i) {
        double y = o->val[i];
        a->grad[i] += o->grad[i] * (1.0 - y * y);
      }
    };
  }
  return t.record(out);
}

// sqrt with a hard zero below `tiny`: population std of a singleton multiset
// must come out exactly 0 with zero gradient rather than sqrt(eps).
inline Var sqrt_guarded(Tape& t, const Var& a, double tiny = 1e-24) {
  auto out = detail::fresh(t, a->shape, a->requires_grad);
  for (int64_t i = 0; i < out->numel(); ++i) out->val[i] = a->val[i] > tiny ? std::sqrt(a->val[i]) : 0.0;
  if (out->requires_grad) {
    Node* o = out.get();
    out->back = [a, tiny, o]() {
      for (int64_t i = 0; i < o->numel(); ++i)
        if (a->val[i] > tiny) a->grad[i] += o->grad[i] * 0.5 / o->val[i];
    };
  }
  return t.record(out);
}

// Randomized leaky ReLU. Train mode samples a slope per negative entry from
// [lo, hi]; eval mode applies the midpoint. The applied slope is what the
// backward pass uses.
inline Var rrelu(Tape& t, const Var& a, bool train, double lo, double hi, std::mt19937_64* rng) {
  if (!(lo > 0.0 && lo <= hi && hi < 1.0)) throw ContractError("rrelu: need 0 < lo <= hi < 1");
  if (train && rng == nullptr) throw ContractError("rrelu: train mode needs an rng");
  auto out = detail::fresh(t, a->shape, a->requires_grad);
  auto slopes = std::make_shared<std::vector<double>>(out->numel(), (lo + hi) * 0.5);
  for (int64_t i = 0; i < out->numel(); ++i) {
    double x = a->val[i];
    if (x >= 0) {
      out->val[i] = x;
    } else {
      if (train) (*slopes)[i] = rng_uniform(*rng, lo, hi);
      out->val[i] = x * (*slopes)[i];
    }
  }
  if (out->requires_grad) {
    Node* o = out.get();
    out->back = [a, slopes, o]() {
      for (int64_t i = 0; i < o->numel(); ++i)
        a->grad[i] += o->grad[i] * (a->val[i] >= 0 ? 1.0 : (*slopes)[i]);
    };
  }
  return t.record(out);
}

// ---- matrix ----------------------------------------------------------------

inline Var matmul(Tape& t, const Var& a, const Var& b) {
  if (a->shape.size() != 2 || b->shape.size() != 2 || a->shape[1] != b->shape[0])
    throw ShapeError("matmul: incompatible " + shape_str(a->shape) + " * " + shape_str(b->shape));
  const int64_t n = a->shape[0], k = a->shape[1], p = b->shape[1];
  auto out = detail::fresh(t, {n, p}, a->requires_grad || b->requires_grad);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t kk = 0; kk < k; ++kk) {
      double av = a->val[i * k + kk];
      if (av == 0.0) continue;
      const double* brow = &b->val[kk * p];
      double* orow = &out->val[i * p];
      for (int64_t j = 0; j < p; ++j) orow[j] += av * brow[j];
    }
  if (out->requires_grad) {
    Node* o = out.get();
    out->back = [a, b, n, k, p, o]() {
      if (a->requires_grad)
        for (int64_t i = 0; i < n; ++i)
          for (int64_t j = 0; j < p; ++j) {
            double g = o->grad[i * p + j];
            if (g == 0.0) continue;
            for (int64_t kk = 0; kk < k; ++kk) a->grad[i * k + kk] += g * b->val[kk * p + j];
          }
      if (b->requires_grad)
        for (int64_t i = 0; i < n; ++i)
          for (int64_t kk = 0; kk < k; ++kk) {
            double av = a->val[i * k + kk];
            if (av == 0.0) continue;
            for (int64_t j = 0; j < p; ++j) b->grad[kk * p + j] += av * o->grad[i * p + j];
          }
    };
  }
  return t.record(out);
}

// a [n x d] * b^T where b is [m x d]  ->  [n x m]
inline Var matmul_nt(Tape& t, const Var& a, const Var& b) {
  if (a->shape.size() != 2 || b->shape.size() != 2 || a->shape[1] != b->shape[1])
    throw ShapeError("matmul_nt: incompatible " + shape_str(a->shape) + " * " + shape_str(b->shape) + "^T");
  const int64_t n = a->shape[0], d = a->shape[1], m = b->shape[0];
  auto out = detail::fresh(t, {n, m}, a->requires_grad || b->requires_grad);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < m; ++j) {
      double s = 0;
      const double* ar = &a->val[i * d];
      const double* br = &b->val[j * d];
      for (int64_t kk = 0; kk < d; ++kk) s += ar[kk] * br[kk];
      out->val[i * m + j] = s;
    }
  if (out->requires_grad) {
    Node* o = out.get();
    out->back = [a, b, n, d, m, o]() {
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < m; ++j) {
          double g = o->grad[i * m + j];
          if (g == 0.0) continue;
          if (a->requires_grad)
            for (int64_t kk = 0; kk < d; ++kk) a->grad[i * d + kk] += g * b->val[j * d + kk];
          if (b->requires_grad)
            for (int64_t kk = 0; kk < d; ++kk) b->grad[j * d + kk] += g * a->val[i * d + kk];
        }
    };
  }
  return t.record(out);
}

inline Var add_rowvec(Tape& t, const Var& a, const Var& v) {
  if (a->shape.size() != 2 || v->shape.size() != 1 || a->shape[1] != v->shape[0])
    throw ShapeError("add_rowvec: " + shape_str(a->shape) + " + " + shape_str(v->shape));
  const int64_t n = a->shape[0], d = a->shape[1];
  auto out = detail::fresh(t, a->shape, a->requires_grad || v->requires_grad);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j) out->val[i * d + j] = a->val[i * d + j] + v->val[j];
  if (out->requires_grad) {
    Node* o = out.get();
    out->back = [a, v, n, d, o]() {
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) {
          if (a->requires_grad) a->grad[i * d + j] += o->grad[i * d + j];
          if (v->requires_grad) v->grad[j] += o->grad[i * d + j];
        }
    };
  }
  return t.record(out);
}

// row i of a scaled by w[i]
inline Var scale_rows(Tape& t, const Var& a, const Var& w) {
  if (a->shape.size() != 2 || w->shape.size() != 1 || a->shape[0] != w->shape[0])
    throw ShapeError("scale_rows: " + shape_str(a->shape) + " by " + shape_str(w->shape));
  const int64_t n = a->shape[0], d = a->shape[1];
  auto out = detail::fresh(t, a->shape, a->requires_grad || w->requires_grad);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j) out->val[i * d + j] = a->val[i * d + j] * w->val[i];
  if (out->requires_grad) {
    Node* o = out.get();
    out->back = [a, w, n, d, o]() {
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) {
          if (a->requires_grad) a->grad[i * d + j] += o->grad[i * d + j] * w->val[i];
          if (w->requires_grad) w->grad[i] += o->grad[i * d + j] * a->val[i * d + j];
        }
    };
  }
  return t.record(out);
}

// ---- shape ops -------------------------------------------------------------

inline Var concat_cols(Tape& t, const Var& a, const Var& b) {
  if (a->shape.size() != b->shape.size() || a->shape.empty() || a->shape.size() > 2)
    throw ShapeError("concat_cols: ranks " + shape_str(a->shape) + " vs " + shape_str(b->shape));
  if (a->shape.size() == 1) {
    const int64_t da = a->shape[0], db = b->shape[0];
    auto out = detail::fresh(t, {da + db}, a->requires_grad || b->requires_grad);
    std::copy(a->val.begin(), a->val.end(), out->val.begin());
    std::copy(b->val.begin(), b->val.end(), out->val.begin() + da);
    if (out->requires_grad) {
      Node* o = out.get();
      out->back = [a, b, da, db, o]() {
        if (a->requires_grad)
          for (int64_t i = 0; i < da; ++i) a->grad[i] += o->grad[i];
        if (b->requires_grad)
          for (int64_t i = 0; i < db; ++i) b->grad[i] += o->grad[da + i];
      };
    }
    return t.record(out);
  }
  if (a->shape[0] != b->shape[0])
    throw ShapeError("concat_cols: row mismatch " + shape_str(a->shape) + " vs " + shape_str(b->shape));
  const int64_t n = a->shape[0], da = a->shape[1], db = b->shape[1];
  auto out = detail::fresh(t, {n, da + db}, a->requires_grad || b->requires_grad);
  for (int64_t i = 0; i < n; ++i) {
    std::copy(&a->val[i * da], &a->val[(i + 1) * da], &out->val[i * (da + db)]);
    std::copy(&b->val[i * db], &b->val[(i + 1) * db], &out->val[i * (da + db) + da]);
  }
  if (out->requires_grad) {
    Node* o = out.get();
    out->back = [a, b, n, da, db, o]() {
      for (int64_t i = 0; i < n; ++i) {
        if (a->requires_grad)
          for (int64_t j = 0; j < da; ++j) a->grad[i * da + j] += o->grad[i * (da + db) + j];
        if (b->requires_grad)
          for (int64_t j = 0; j < db; ++j) b->grad[i * db + j] += o->grad[i * (da + db) + da + j];
      }
    };
  }
  return t.record(out);
}

inline Var concat_rows(Tape& t, const Var& a, const Var& b) {
  if (a->shape.size() != 2 || b->shape.size() != 2 || a->shape[1] != b->shape[1])
    throw ShapeError("concat_rows: " + shape_str(a->shape) + " vs " + shape_str(b->shape));
  const int64_t na = a->shape[0], nb = b->shape[0], d = a->shape[1];
  auto out = detail::fresh(t, {na + nb, d}, a->requires_grad || b->requires_grad);
  std::copy(a->val.begin(), a->val.end(), out->val.begin());
  std::copy(b->val.begin(), b->val.end(), out->val.begin() + na * d);
  if (out->requires_grad) {
    Node* o = out.get();
    out->back = [a, b, na, nb, d, o]() {
      if (a->requires_grad)
        for (int64_t i = 0; i < na * d; ++i) a->grad[i] += o->grad[i];
      if (b->requires_grad)
        for (int64_t i = 0; i < nb * d; ++i) b->grad[i] += o->grad[na * d + i];
    };
  }
  return t.record(out);
}

inline Var slice_cols(Tape& t, const Var& a, int64_t c0, int64_t c1) {
  const bool vec = a->shape.size() == 1;
  const int64_t n = vec ? 1 : a->shape[0];
  const int64_t d = vec ? a->shape[0] : a->shape[1];
  if (!(0 <= c0 && c0 < c1 && c1 <= d)) throw ShapeError("slice_cols: bad range");
  const int64_t w = c1 - c0;
  auto out = detail::fresh(t, vec ? Shape{w} : Shape{n, w}, a->requires_grad);
  for (int64_t i = 0; i < n; ++i)
    std::copy(&a->val[i * d + c0], &a->val[i * d + c1], &out->val[i * w]);
  if (out->requires_grad) {
    Node* o = out.get();
    out->back = [a, n, d, c0, w, o]() {
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < w; ++j) a->grad[i * d + c0 + j] += o->grad[i * w + j];
    };
  }
  return t.record(out);
}

inline Var gather_rows(Tape& t, const Var& a, std::vector<int64_t> idx) {
  if (a->shape.size() != 2) throw ShapeError("gather_rows: need rank-2, got " + shape_str(a->shape));
  const int64_t n = a->shape[0], d = a->shape[1];
  for (int64_t i : idx)
    if (i < 0 || i >= n) throw ContractError("gather_rows: index " + std::to_string(i) + " out of " + std::to_string(n));
  const int64_t m = static_cast<int64_t>(idx.size());
  auto out = detail::fresh(t, {m, d}, a->requires_grad);
  for (int64_t i = 0; i < m; ++i)
    std::copy(&a->val[idx[i] * d], &a->val[(idx[i] + 1) * d], &out->val[i * d]);
  if (out->requires_grad) {
    Node* o = out.get();
    auto ix = std::make_shared<std::vector<int64_t>>(std::move(idx));
    out->back = [a, ix, m, d, o]() {
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < d; ++j) a->grad[(*ix)[i] * d + j] += o->grad[i * d + j];
    };
  }
  return t.record(out);
}

inline Var stack_rows(Tape& t, const std::vector<Var>& rows) {
  if (rows.empty()) throw ContractError("stack_rows: empty input");
  const int64_t d = rows[0]->numel();
  bool rq = false;
  for (const auto& r : rows) {
    if (r->shape.size() != 1 || r->shape[0] != d) throw ShapeError("stack_rows: inconsistent row shapes");
    rq = rq || r->requires_grad;
  }
  const int64_t n = static_cast<int64_t>(rows.size());
  auto out = detail::fresh(t, {n, d}, rq);
  for (int64_t i = 0; i < n; ++i)
    std::copy(rows[i]->val.begin(), rows[i]->val.end(), &out->val[i * d]);
  if (out->requires_grad) {
    Node* o = out.get();
    auto ins = std::make_shared<std::vector<Var>>(rows);
    out->back = [ins, n, d, o]() {
      for (int64_t i = 0; i < n; ++i)
        if ((*ins)[i]->requires_grad)
          for (int64_t j = 0; j < d; ++j) (*ins)[i]->grad[j] += o->grad[i * d + j];
    };
  }
  return t.record(out);
}

// ---- reductions ------------------------------------------------------------

inline Var sum_all(Tape& t, const Var& a) {
  auto out = detail::fresh(t, {}, a->requires_grad);
  double s = 0;
  for (double x : a->val) s += x;
  out->val[0] = s;
  if (out->requires_grad) {
    Node* o = out.get();
    out->back = [a, o]() {
      for (int64_t i = 0; i < a->numel(); ++i) a->grad[i] += o->grad[0];
    };
  }
  return t.record(out);
}

// arithmetic mean over rows of [n x d] -> [d]; the spec's mean pooling
inline Var mean_rows(Tape& t, const Var& a) {
  if (a->shape.size() != 2) throw ShapeError("mean_rows: need rank-2, got " + shape_str(a->shape));
  const int64_t n = a->shape[0], d = a->shape[1];
  if (n == 0) throw ContractError("mean_rows: empty input");
  auto out = detail::fresh(t, {d}, a->requires_grad);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j) out->val[j] += a->val[i * d + j];
  for (int64_t j = 0; j < d; ++j) out->val[j] /= static_cast<double>(n);
  if (out->requires_grad) {
    Node* o = out.get();
    out->back = [a, n, d, o]() {
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) a->grad[i * d + j] += o->grad[j] / static_cast<double>(n);
    };
  }
  return t.record(out);
}

inline Var rows_dot(Tape& t, const Var& a, const Var& b) {
  detail::check_same_shape("rows_dot", a, b);
  if (a->shape.size() != 2) throw ShapeError("rows_dot: need rank-2");
  const int64_t n = a->shape[0], d = a->shape[1];
  auto out = detail::fresh(t, {n}, a->requires_grad || b->requires_grad);
  for (int64_t i = 0; i < n; ++i) {
    double s = 0;
    for (int64_t j = 0; j < d; ++j) s += a->val[i * d + j] * b->val[i * d + j];
    out->val[i] = s;
  }
  if (out->requires_grad) {
    Node* o = out.get();
    out->back = [a, b, n, d, o]() {
      for (int64_t i = 0; i < n; ++i) {
        double g = o->grad[i];
        if (g == 0.0) continue;
        for (int64_t j = 0; j < d; ++j) {
          if (a->requires_grad) a->grad[i * d + j] += g * b->val[i * d + j];
          if (b->requires_grad) b->grad[i * d + j] += g * a->val[i * d + j];
        }
      }
    };
  }
  return t.record(out);
}

// ---- softmax ---------------------------------------------------------------

namespace detail {
inline void softmax_fill(const double* x, double* y, int64_t c) {
  double mx = x[0];
  for (int64_t j = 1; j < c; ++j) mx = std::max(mx, x[j]);
  double z = 0;
  for (int64_t j = 0; j < c; ++j) {
    y[j] = std::exp(x[j] - mx);
    z += y[j];
  }
  for (int64_t j = 0; j < c; ++j) y[j] /= z;
}
inline void softmax_back(const double* y, const double* g, double* gx, int64_t c) {
  double dot = 0;
  for (int64_t j = 0; j < c; ++j) dot += g[j] * y[j];
  for (int64_t j = 0; j < c; ++j) gx[j] += y[j] * (g[j] - dot);
}
}  // namespace detail

// per-row exp-normalization of [n x c]; rank-1 input treated as a single row
inline Var softmax_rows(Tape& t, const Var& a) {
  const bool vec = a->shape.size() == 1;
  const int64_t n = vec ? 1 : a->shape[0];
  const int64_t c = vec ? a->shape[0] : a->shape[1];
  if (c < 1) throw ShapeError("softmax_rows: empty rows");
  auto out = detail::fresh(t, a->shape, a->requires_grad);
  for (int64_t i = 0; i < n; ++i) detail::softmax_fill(&a->val[i * c], &out->val[i * c], c);
  if (out->requires_grad) {
    Node* o = out.get();
    out->back = [a, n, c, o]() {
      for (int64_t i = 0; i < n; ++i)
        detail::softmax_back(&o->val[i * c], &o->grad[i * c], &a->grad[i * c], c);
    };
  }
  return t.record(out);
}

// ---- layer norm ------------------------------------------------------------

inline Var layer_norm(Tape& t, const Var& x, const Var& gain, const Var& bias, double eps = 1e-5) {
  if (x->shape.size() != 2) throw ShapeError("layer_norm: need rank-2, got " + shape_str(x->shape));
  const int64_t n = x->shape[0], d = x->shape[1];
  if (gain->shape != Shape{d} || bias->shape != Shape{d})
    throw ShapeError("layer_norm: gain/bias must be [" + std::to_string(d) + "]");
  auto out = detail::fresh(t, x->shape, x->requires_grad || gain->requires_grad || bias->requires_grad);
  auto xhat = std::make_shared<std::vector<double>>(n * d);
  auto istd = std::make_shared<std::vector<double>>(n);
  for (int64_t i = 0; i < n; ++i) {
    double mu = 0;
    for (int64_t j = 0; j < d; ++j) mu += x->val[i * d + j];
    mu /= static_cast<double>(d);
    double var = 0;
    for (int64_t j = 0; j < d; ++j) {
      double c = x->val[i * d + j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    double is = 1.0 / std::sqrt(var + eps);
    (*istd)[i] = is;
    for (int64_t j = 0; j < d; ++j) {
      double h = (x->val[i * d + j] - mu) * is;
      (*xhat)[i * d + j] = h;
      out->val[i * d + j] = h * gain->val[j] + bias->val[j];
    }
  }
  if (out->requires_grad) {
    Node* o = out.get();
    out->back = [x, gain, bias, xhat, istd, n, d, o]() {
      for (int64_t i = 0; i < n; ++i) {
        double gsum = 0, gxsum = 0;
        for (int64_t j = 0; j < d; ++j) {
          double gh = o->grad[i * d + j] * gain->val[j];
          gsum += gh;
          gxsum += gh * (*xhat)[i * d + j];
        }
        for (int64_t j = 0; j < d; ++j) {
          double gh = o->grad[i * d + j] * gain->val[j];
          if (x->requires_grad)
            x->grad[i * d + j] += (*istd)[i] * (gh - gsum / d - (*xhat)[i * d + j] * gxsum / d);
          if (gain->requires_grad) gain->grad[j] += o->grad[i * d + j] * (*xhat)[i * d + j];
          if (bias->requires_grad) bias->grad[j] += o->grad[i * d + j];
        }
      }
    };
  }
  return t.record(out);
}

// ---- segment ops (grouped by an integer id per row) --------------------------

namespace detail {
inline void check_segments(const Var& x, const std::vector<int64_t>& seg, int64_t num_segments) {
  if (x->shape.size() != 2) throw ShapeError("segment op: need rank-2 input");
  if (static_cast<int64_t>(seg.size()) != x->shape[0])
    throw ShapeError("segment op: one segment id per row");
  for (int64_t s : seg)
    if (s < 0 || s >= num_segments) throw ContractError("segment op: id out of range");
}
}  // namespace detail

inline Var segment_sum(Tape& t, const Var& x, std::vector<int64_t> seg, int64_t num_segments) {
  detail::check_segments(x, seg, num_segments);
  const int64_t m = x->shape[0], d = x->shape[1];
  auto out = detail::fresh(t, {num_segments, d}, x->requires_grad);
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < d; ++j) out->val[seg[i] * d + j] += x->val[i * d + j];
  if (out->requires_grad) {
    Node* o = out.get();
    auto sg = std::make_shared<std::vector<int64_t>>(std::move(seg));
    out->back = [x, sg, m, d, o]() {
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < d; ++j) x->grad[i * d + j] += o->grad[(*sg)[i] * d + j];
    };
  }
  return t.record(out);
}

// mean per segment; every segment must be non-empty
inline Var segment_mean(Tape& t, const Var& x, std::vector<int64_t> seg, int64_t num_segments) {
  detail::check_segments(x, seg, num_segments);
  const int64_t m = x->shape[0], d = x->shape[1];
  std::vector<int64_t> count(num_segments, 0);
  for (int64_t s : seg) count[s]++;
  for (int64_t s = 0; s < num_segments; ++s)
    if (count[s] == 0) throw ContractError("segment_mean: empty segment " + std::to_string(s));
  auto out = detail::fresh(t, {num_segments, d}, x->requires_grad);
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < d; ++j) out->val[seg[i] * d + j] += x->val[i * d + j];
  for (int64_t s = 0; s < num_segments; ++s)
    for (int64_t j = 0; j < d; ++j) out->val[s * d + j] /= static_cast<double>(count[s]);
  if (out->requires_grad) {
    Node* o = out.get();
    auto sg = std::make_shared<std::vector<int64_t>>(std::move(seg));
    auto cnt = std::make_shared<std::vector<int64_t>>(std::move(count));
    out->back = [x, sg, cnt, m, d, o]() {
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < d; ++j)
          x->grad[i * d + j] += o->grad[(*sg)[i] * d + j] / static_cast<double>((*cnt)[(*sg)[i]]);
    };
  }
  return t.record(out);
}

namespace detail {
// shared forward for segment max/min; routes gradient to the first extremum
inline Var segment_extremum(Tape& t, const Var& x, std::vector<int64_t> seg, int64_t num_segments, bool is_max) {
  check_segments(x, seg, num_segments);
  const int64_t m = x->shape[0], d = x->shape[1];
  std::vector<int64_t> count(num_segments, 0);
  for (int64_t s : seg) count[s]++;
  for (int64_t s = 0; s < num_segments; ++s)
    if (count[s] == 0) throw ContractError("segment extremum: empty segment " + std::to_string(s));
  auto out = fresh(t, {num_segments, d}, x->requires_grad);
  auto argrow = std::make_shared<std::vector<int64_t>>(num_segments * d, -1);
  for (int64_t i = 0; i < m; ++i) {
    int64_t s = seg[i];
    for (int64_t j = 0; j < d; ++j) {
      double v = x->val[i * d + j];
      int64_t& arg = (*argrow)[s * d + j];
      if (arg < 0 || (is_max ? v > out->val[s * d + j] : v < out->val[s * d + j])) {
        out->val[s * d + j] = v;
        arg = i;
      }
    }
  }
  if (out->requires_grad) {
    Node* o = out.get();
    out->back = [x, argrow, num_segments, d, o]() {
      for (int64_t s = 0; s < num_segments; ++s)
        for (int64_t j = 0; j < d; ++j) x->grad[(*argrow)[s * d + j] * d + j] += o->grad[s * d + j];
    };
  }
  return t.record(out);
}
}  // namespace detail

inline Var segment_max(Tape& t, const Var& x, std::vector<int64_t> seg, int64_t num_segments) {
  return detail::segment_extremum(t, x, std::move(seg), num_segments, true);
}

inline Var segment_min(Tape& t, const Var& x, std::vector<int64_t> seg, int64_t num_segments) {
  return detail::segment_extremum(t, x, std::move(seg), num_segments, false);
}

// ---- fused decoder convolution ----------------------------------------------
// Stacks (subj, rel) rows as a 2 x d signal per query, runs C width-w
// convolutions with same-length zero padding, adds per-channel bias, and
// emits the flattened [Q x C*d] feature map. kernels is [C, 2, w].
inline Var conv2row(Tape& t, const Var& subj, const Var& rel, const Var& kernels, const Var& bias) {
  detail::check_same_shape("conv2row", subj, rel);
  if (subj->shape.size() != 2) throw ShapeError("conv2row: need rank-2 inputs");
  if (kernels->shape.size() != 3 || kernels->shape[1] != 2)
    throw ShapeError("conv2row: kernels must be [C,2,w], got " + shape_str(kernels->shape));
  const int64_t q = subj->shape[0], d = subj->shape[1];
  const int64_t c = kernels->shape[0], w = kernels->shape[2];
  if (w % 2 == 0) throw ContractError("conv2row: kernel width must be odd");
  if (bias->shape != Shape{c}) throw ShapeError("conv2row: bias must be [C]");
  const int64_t pad = (w - 1) / 2;
  bool rq = subj->requires_grad || rel->requires_grad || kernels->requires_grad || bias->requires_grad;
  auto out = detail::fresh(t, {q, c * d}, rq);
  auto at = [&](const Var& v, int64_t row, int64_t pos) -> double {
    return (pos < 0 || pos >= d) ? 0.0 : v->val[row * d + pos];
  };
  for (int64_t qq = 0; qq < q; ++qq)
    for (int64_t cc = 0; cc < c; ++cc) {
      const double* k0 = &kernels->val[(cc * 2 + 0) * w];
      const double* k1 = &kernels->val[(cc * 2 + 1) * w];
      for (int64_t i = 0; i < d; ++i) {
        double s = bias->val[cc];
        for (int64_t j = 0; j < w; ++j) {
          int64_t pos = i + j - pad;
          s += k0[j] * at(subj, qq, pos) + k1[j] * at(rel, qq, pos);
        }
        out->val[qq * c * d + cc * d + i] = s;
      }
    }
  if (out->requires_grad) {
    Node* o = out.get();
    out->back = [subj, rel, kernels, bias, q, d, c, w, pad, o]() {
      for (int64_t qq = 0; qq < q; ++qq)
        for (int64_t cc = 0; cc < c; ++cc) {
          const double* k0 = &kernels->val[(cc * 2 + 0) * w];
          const double* k1 = &kernels->val[(cc * 2 + 1) * w];
          for (int64_t i = 0; i < d; ++i) {
            double g = o->grad[qq * c * d + cc * d + i];
            if (g == 0.0) continue;
            if (bias->requires_grad) bias->grad[cc] += g;
            for (int64_t j = 0; j < w; ++j) {
              int64_t pos = i + j - pad;
              if (pos < 0 || pos >= d) continue;
              if (subj->requires_grad) subj->grad[qq * d + pos] += g * k0[j];
              if (rel->requires_grad) rel->grad[qq * d + pos] += g * k1[j];
              if (kernels->requires_grad) {
                kernels->grad[(cc * 2 + 0) * w + j] += g * subj->val[qq * d + pos];
                kernels->grad[(cc * 2 + 1) * w + j] += g * rel->val[qq * d + pos];
              }
            }
          }
        }
    };
  }
  return t.record(out);
}

// ---- guarded cosine ---------------------------------------------------------
// Rowwise cosine similarity; rows whose norm falls below `guard` yield
// similarity 0 with zero gradient.
inline Var cosine_rows(Tape& t, const Var& a, const Var& b, double guard = 1e-12) {
  detail::check_same_shape("cosine_rows", a, b);
  if (a->shape.size() != 2) throw ShapeError("cosine_rows: need rank-2");
  const int64_t n = a->shape[0], d = a->shape[1];
  auto out = detail::fresh(t, {n}, a->requires_grad || b->requires_grad);
  auto norms = std::make_shared<std::vector<double>>(2 * n, 0.0);
  for (int64_t i = 0; i < n; ++i) {
    double na = 0, nb = 0, dot = 0;
    for (int64_t j = 0; j < d; ++j) {
      na += a->val[i * d + j] * a->val[i * d + j];
      nb += b->val[i * d + j] * b->val[i * d + j];
      dot += a->val[i * d + j] * b->val[i * d + j];
    }
    na = std::sqrt(na);
    nb = std::sqrt(nb);
    (*norms)[2 * i] = na;
    (*norms)[2 * i + 1] = nb;
    out->val[i] = (na < guard || nb < guard) ? 0.0 : dot / (na * nb);
  }
  if (out->requires_grad) {
    Node* o = out.get();
    out->back = [a, b, norms, guard, n, d, o]() {
      for (int64_t i = 0; i < n; ++i) {
        double na = (*norms)[2 * i], nb = (*norms)[2 * i + 1];
        if (na < guard || nb < guard) continue;
        double g = o->grad[i], cosv = o->val[i];
        for (int64_t j = 0; j < d; ++j) {
          double av = a->val[i * d + j], bv = b->val[i * d + j];
          if (a->requires_grad) a->grad[i * d + j] += g * (bv / (na * nb) - cosv * av / (na * na));
          if (b->requires_grad) b->grad[i * d + j] += g * (av / (na * nb) - cosv * bv / (nb * nb));
        }
      }
    };
  }
  return t.record(out);
}

// ---- composites -------------------------------------------------------------

// exclusive pair of distributions over the same scores: (softmax(e), softmax(-e))
inline std::pair<Var, Var> exclusive_softmax(Tape& t, const Var& e) {
  if (e->numel() < 1) throw ContractError("exclusive_softmax: empty scores");
  return {softmax_rows(t, e), softmax_rows(t, neg(t, e))};
}

struct GruParams {
  Var wz, uz, bz;  // update gate
  Var wr, ur, br;  // reset gate
  Var wh, uh, bh;  // candidate
};

// h' = (1-z) (x) h_prev + z (x) h~, batched over rows
inline Var gru_cell(Tape& t, const GruParams& p, const Var& h_prev, const Var& x) {
  detail::check_same_shape("gru_cell", h_prev, x);
  auto z = sigmoid(t, add_rowvec(t, add(t, matmul(t, x, p.wz), matmul(t, h_prev, p.uz)), p.bz));
  auto r = sigmoid(t, add_rowvec(t, add(t, matmul(t, x, p.wr), matmul(t, h_prev, p.ur)), p.br));
  auto cand = vtanh(t, add_rowvec(t, add(t, matmul(t, x, p.wh), matmul(t, mul(t, r, h_prev), p.uh)), p.bh));
  return add(t, mul(t, one_minus(t, z), h_prev), mul(t, z, cand));
}

// ---- finite differences ------------------------------------------------------

// Max over all leaf coordinates of |analytic - numeric| / max(1e-8, |a|+|n|),
// with numeric = central differences. f must be deterministic.
inline double finite_difference_check(Tape& tape, const std::function<Var()>& f,
                                      const std::vector<Var>& leaves, double eps = 1e-5) {
  tape.reset();
  for (const auto& leaf : leaves)
    if (leaf->requires_grad) std::fill(leaf->grad.begin(), leaf->grad.end(), 0.0);
  Var y = f();
  tape.backward(y);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(leaves.size());
  for (const auto& leaf : leaves) analytic.push_back(leaf->grad);
  tape.reset();

  double worst = 0.0;
  {
    NoGradGuard ng(tape);
    for (size_t li = 0; li < leaves.size(); ++li) {
      const auto& leaf = leaves[li];
      if (!leaf->requires_grad) continue;
      for (int64_t i = 0; i < leaf->numel(); ++i) {
        const double saved = leaf->val[i];
        leaf->val[i] = saved + eps;
        double fp = f()->val[0];
        tape.reset();
        leaf->val[i] = saved - eps;
        double fm = f()->val[0];
        tape.reset();
        leaf->val[i] = saved;
        const double numeric = (fp - fm) / (2.0 * eps);
        const double a = analytic[li][i];
        const double err = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
        worst = std::max(worst, err);
      }
    }
  }
  return worst;
}

}  // namespace tkgx::ad
