#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <random>
#include <unordered_set>
#include <utility>
#include <vector>

#include "ps2kit/tensor.hpp"

namespace ps2kit::ad {

/// One tape entry: a value, its accumulated gradient, and the closure that
/// pushes the gradient into the parents. Graphs are rebuilt every forward.
template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void()> backfn;

  Tensor<T>& grad_ref() {
    if (grad.numel() == 0) grad = Tensor<T>::zeros(value.shape());
    return grad;
  }
  void zero_grad() {
    if (grad.numel()) grad.fill(T(0));
  }
};

template <typename T>
using Var = std::shared_ptr<Node<T>>;

template <typename T>
Var<T> leaf(Tensor<T> v) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(v);
  n->requires_grad = true;
  return n;
}

template <typename T>
Var<T> constant(Tensor<T> v) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(v);
  return n;
}

template <typename T>
Var<T> scalar_const(T v) {
  return constant(Tensor<T>::full({1}, v));
}

namespace detail {

template <typename T>
Var<T> make(Tensor<T> value, std::vector<Var<T>> parents) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  for (const Var<T>& p : parents) n->requires_grad |= p->requires_grad;
  if (n->requires_grad) n->parents = std::move(parents);
  return n;
}

}  // namespace detail

/// Reverse pass from a scalar root; gradients accumulate into every
/// requires_grad node reachable on the tape.
template <typename T>
void backward(const Var<T>& root) {
  if (root->value.numel() != 1) throw shape_error("backward: root must be scalar");
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.push_back({root.get(), 0});
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node<T>* p = n->parents[i++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  root->grad_ref()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backfn) (*it)->backfn();
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  if (!a->value.same_shape(b->value)) throw shape_error("add: shape mismatch");
  Tensor<T> v = a->value;
  for (std::size_t i = 0; i < v.numel(); ++i) v[i] += b->value[i];
  Var<T> out = detail::make(std::move(v), {a, b});
  if (out->requires_grad)
    out->backfn = [a, b, o = out.get()] {
      if (a->requires_grad) {
        auto& g = a->grad_ref();
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] += o->grad[i];
      }
      if (b->requires_grad) {
        auto& g = b->grad_ref();
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] += o->grad[i];
      }
    };
  return out;
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  if (!a->value.same_shape(b->value)) throw shape_error("sub: shape mismatch");
  Tensor<T> v = a->value;
  for (std::size_t i = 0; i < v.numel(); ++i) v[i] -= b->value[i];
  Var<T> out = detail::make(std::move(v), {a, b});
  if (out->requires_grad)
    out->backfn = [a, b, o = out.get()] {
      if (a->requires_grad) {
        auto& g = a->grad_ref();
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] += o->grad[i];
      }
      if (b->requires_grad) {
        auto& g = b->grad_ref();
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] -= o->grad[i];
      }
    };
  return out;
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  if (!a->value.same_shape(b->value)) throw shape_error("mul: shape mismatch");
  Tensor<T> v = a->value;
  for (std::size_t i = 0; i < v.numel(); ++i) v[i] *= b->value[i];
  Var<T> out = detail::make(std::move(v), {a, b});
  if (out->requires_grad)
    out->backfn = [a, b, o = out.get()] {
      if (a->requires_grad) {
        auto& g = a->grad_ref();
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] += o->grad[i] * b->value[i];
      }
      if (b->requires_grad) {
        auto& g = b->grad_ref();
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] += o->grad[i] * a->value[i];
      }
    };
  return out;
}

template <typename T>
Var<T> scale(const Var<T>& a, T k) {
  Tensor<T> v = a->value;
  for (std::size_t i = 0; i < v.numel(); ++i) v[i] *= k;
  Var<T> out = detail::make(std::move(v), {a});
  if (out->requires_grad)
    out->backfn = [a, k, o = out.get()] {
      auto& g = a->grad_ref();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += k * o->grad[i];
    };
  return out;
}

template <typename T>
Var<T> add_const(const Var<T>& a, T k) {
  Tensor<T> v = a->value;
  for (std::size_t i = 0; i < v.numel(); ++i) v[i] += k;
  Var<T> out = detail::make(std::move(v), {a});
  if (out->requires_grad)
    out->backfn = [a, o = out.get()] {
      auto& g = a->grad_ref();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += o->grad[i];
    };
  return out;
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> v = a->value;
  for (std::size_t i = 0; i < v.numel(); ++i) v[i] = std::max(v[i], T(0));
  Var<T> out = detail::make(std::move(v), {a});
  if (out->requires_grad)
    out->backfn = [a, o = out.get()] {
      auto& g = a->grad_ref();
      for (std::size_t i = 0; i < g.numel(); ++i)
        if (a->value[i] > T(0)) g[i] += o->grad[i];
    };
  return out;
}

template <typename T>
Var<T> tanh_op(const Var<T>& a) {
  Tensor<T> v = a->value;
  for (std::size_t i = 0; i < v.numel(); ++i) v[i] = std::tanh(v[i]);
  Var<T> out = detail::make(std::move(v), {a});
  if (out->requires_grad)
    out->backfn = [a, o = out.get()] {
      auto& g = a->grad_ref();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += o->grad[i] * (T(1) - o->value[i] * o->value[i]);
    };
  return out;
}

template <typename T>
Var<T> sin_op(const Var<T>& a) {
  Tensor<T> v = a->value;
  for (std::size_t i = 0; i < v.numel(); ++i) v[i] = std::sin(v[i]);
  Var<T> out = detail::make(std::move(v), {a});
  if (out->requires_grad)
    out->backfn = [a, o = out.get()] {
      auto& g = a->grad_ref();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += o->grad[i] * std::cos(a->value[i]);
    };
  return out;
}

template <typename T>
Var<T> cos_op(const Var<T>& a) {
  Tensor<T> v = a->value;
  for (std::size_t i = 0; i < v.numel(); ++i) v[i] = std::cos(v[i]);
  Var<T> out = detail::make(std::move(v), {a});
  if (out->requires_grad)
    out->backfn = [a, o = out.get()] {
      auto& g = a->grad_ref();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] -= o->grad[i] * std::sin(a->value[i]);
    };
  return out;
}

/// Cuts the tape: same value, no gradient flow.
template <typename T>
Var<T> detach(const Var<T>& a) {
  return constant(a->value);
}

/// Row-major view with a new shape; numel must match.
template <typename T>
Var<T> reshape(const Var<T>& x, const std::vector<int>& shape) {
  Tensor<T> v = x->value.reshaped(shape);
  Var<T> out = detail::make(std::move(v), {x});
  if (out->requires_grad)
    out->backfn = [x, o = out.get()] {
      auto& g = x->grad_ref();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += o->grad[i];
    };
  return out;
}

// ---------------------------------------------------------------------------
// Channel structure ops (NCHW)

template <typename T>
Var<T> concat_c(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw shape_error("concat_c: empty input");
  const int B = xs[0]->value.dim(0), H = xs[0]->value.dim(2), W = xs[0]->value.dim(3);
  int C = 0;
  for (const Var<T>& x : xs) {
    if (x->value.ndim() != 4 || x->value.dim(0) != B || x->value.dim(2) != H || x->value.dim(3) != W)
      throw shape_error("concat_c: incompatible shapes");
    C += x->value.dim(1);
  }
  Tensor<T> v({B, C, H, W});
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  for (int b = 0; b < B; ++b) {
    std::size_t coff = 0;
    for (const Var<T>& x : xs) {
      const std::size_t nc = static_cast<std::size_t>(x->value.dim(1));
      const T* src = x->value.data() + (static_cast<std::size_t>(b) * nc) * plane;
      T* dst = v.data() + (static_cast<std::size_t>(b) * C + coff) * plane;
      std::copy(src, src + nc * plane, dst);
      coff += nc;
    }
  }
  Var<T> out = detail::make(std::move(v), xs);
  if (out->requires_grad)
    out->backfn = [xs, B, C, plane, o = out.get()] {
      for (int b = 0; b < B; ++b) {
        std::size_t coff = 0;
        for (const Var<T>& x : xs) {
          const std::size_t nc = static_cast<std::size_t>(x->value.dim(1));
          if (x->requires_grad) {
            T* dst = x->grad_ref().data() + (static_cast<std::size_t>(b) * nc) * plane;
            const T* src = o->grad.data() + (static_cast<std::size_t>(b) * C + coff) * plane;
            for (std::size_t i = 0; i < nc * plane; ++i) dst[i] += src[i];
          }
          coff += nc;
        }
      }
    };
  return out;
}

template <typename T>
Var<T> slice_c(const Var<T>& x, int c0, int c1) {
  const int B = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
  if (c0 < 0 || c1 > C || c0 >= c1) throw shape_error("slice_c: bad channel range");
  const int nc = c1 - c0;
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  Tensor<T> v({B, nc, H, W});
  for (int b = 0; b < B; ++b) {
    const T* src = x->value.data() + (static_cast<std::size_t>(b) * C + c0) * plane;
    T* dst = v.data() + static_cast<std::size_t>(b) * nc * plane;
    std::copy(src, src + static_cast<std::size_t>(nc) * plane, dst);
  }
  Var<T> out = detail::make(std::move(v), {x});
  if (out->requires_grad)
    out->backfn = [x, c0, nc, C, B, plane, o = out.get()] {
      auto& g = x->grad_ref();
      for (int b = 0; b < B; ++b) {
        T* dst = g.data() + (static_cast<std::size_t>(b) * C + c0) * plane;
        const T* src = o->grad.data() + static_cast<std::size_t>(b) * nc * plane;
        for (std::size_t i = 0; i < static_cast<std::size_t>(nc) * plane; ++i) dst[i] += src[i];
      }
    };
  return out;
}

/// (B,C,H,W) * (B,1,H,W), the single channel broadcast across C.
template <typename T>
Var<T> mul_bcast1(const Var<T>& x, const Var<T>& m) {
  const int B = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
  if (m->value.ndim() != 4 || m->value.dim(0) != B || m->value.dim(1) != 1 || m->value.dim(2) != H ||
      m->value.dim(3) != W)
    throw shape_error("mul_bcast1: mask must be (B,1,H,W)");
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  Tensor<T> v = x->value;
  for (int b = 0; b < B; ++b) {
    const T* mp = m->value.data() + static_cast<std::size_t>(b) * plane;
    for (int c = 0; c < C; ++c) {
      T* p = v.data() + (static_cast<std::size_t>(b) * C + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) p[i] *= mp[i];
    }
  }
  Var<T> out = detail::make(std::move(v), {x, m});
  if (out->requires_grad)
    out->backfn = [x, m, B, C, plane, o = out.get()] {
      if (x->requires_grad) {
        auto& g = x->grad_ref();
        for (int b = 0; b < B; ++b) {
          const T* mp = m->value.data() + static_cast<std::size_t>(b) * plane;
          for (int c = 0; c < C; ++c) {
            T* gp = g.data() + (static_cast<std::size_t>(b) * C + c) * plane;
            const T* op = o->grad.data() + (static_cast<std::size_t>(b) * C + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) gp[i] += op[i] * mp[i];
          }
        }
      }
      if (m->requires_grad) {
        auto& g = m->grad_ref();
        for (int b = 0; b < B; ++b) {
          T* gp = g.data() + static_cast<std::size_t>(b) * plane;
          for (int c = 0; c < C; ++c) {
            const T* xp = x->value.data() + (static_cast<std::size_t>(b) * C + c) * plane;
            const T* op = o->grad.data() + (static_cast<std::size_t>(b) * C + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) gp[i] += op[i] * xp[i];
          }
        }
      }
    };
  return out;
}

/// (B,C) -> (B,C,H,W), each row vector painted across the map.
template <typename T>
Var<T> broadcast_rows(const Var<T>& v, int H, int W) {
  const int B = v->value.dim(0), C = v->value.dim(1);
  Tensor<T> out_v({B, C, H, W});
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      T val = v->value.at(b, c);
      T* p = out_v.data() + (static_cast<std::size_t>(b) * C + c) * plane;
      std::fill(p, p + plane, val);
    }
  Var<T> out = detail::make(std::move(out_v), {v});
  if (out->requires_grad)
    out->backfn = [v, B, C, plane, o = out.get()] {
      auto& g = v->grad_ref();
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
          const T* p = o->grad.data() + (static_cast<std::size_t>(b) * C + c) * plane;
          T s = T(0);
          for (std::size_t i = 0; i < plane; ++i) s += p[i];
          g.at(b, c) += s;
        }
    };
  return out;
}

/// Per-pixel dot product over channels: (B,C,H,W) x (B,C,H,W) -> (B,1,H,W).
template <typename T>
Var<T> channel_dot(const Var<T>& a, const Var<T>& b) {
  if (!a->value.same_shape(b->value)) throw shape_error("channel_dot: shape mismatch");
  const int B = a->value.dim(0), C = a->value.dim(1), H = a->value.dim(2), W = a->value.dim(3);
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  Tensor<T> v = Tensor<T>::zeros({B, 1, H, W});
  for (int bb = 0; bb < B; ++bb)
    for (int c = 0; c < C; ++c) {
      const T* pa = a->value.data() + (static_cast<std::size_t>(bb) * C + c) * plane;
      const T* pb = b->value.data() + (static_cast<std::size_t>(bb) * C + c) * plane;
      T* pv = v.data() + static_cast<std::size_t>(bb) * plane;
      for (std::size_t i = 0; i < plane; ++i) pv[i] += pa[i] * pb[i];
    }
  Var<T> out = detail::make(std::move(v), {a, b});
  if (out->requires_grad)
    out->backfn = [a, b, B, C, plane, o = out.get()] {
      for (int bb = 0; bb < B; ++bb) {
        const T* og = o->grad.data() + static_cast<std::size_t>(bb) * plane;
        for (int c = 0; c < C; ++c) {
          const std::size_t off = (static_cast<std::size_t>(bb) * C + c) * plane;
          if (a->requires_grad) {
            T* g = a->grad_ref().data() + off;
            const T* pb = b->value.data() + off;
            for (std::size_t i = 0; i < plane; ++i) g[i] += og[i] * pb[i];
          }
          if (b->requires_grad) {
            T* g = b->grad_ref().data() + off;
            const T* pa = a->value.data() + off;
            for (std::size_t i = 0; i < plane; ++i) g[i] += og[i] * pa[i];
          }
        }
      }
    };
  return out;
}

/// Per-pixel unit normalization across channels with an epsilon-guarded norm.
template <typename T>
Var<T> normalize_c(const Var<T>& x, T eps = T(1e-12)) {
  const int B = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  Tensor<T> v({B, C, H, W});
  Tensor<T> rinv({B, 1, H, W});
  for (int b = 0; b < B; ++b)
    for (std::size_t i = 0; i < plane; ++i) {
      T q = T(0);
      for (int c = 0; c < C; ++c) {
        T xv = x->value.data()[(static_cast<std::size_t>(b) * C + c) * plane + i];
        q += xv * xv;
      }
      T r = T(1) / std::sqrt(q + eps);
      rinv.data()[static_cast<std::size_t>(b) * plane + i] = r;
      for (int c = 0; c < C; ++c)
        v.data()[(static_cast<std::size_t>(b) * C + c) * plane + i] =
            x->value.data()[(static_cast<std::size_t>(b) * C + c) * plane + i] * r;
    }
  Var<T> out = detail::make(std::move(v), {x});
  if (out->requires_grad)
    out->backfn = [x, rinv = std::move(rinv), B, C, plane, o = out.get()] {
      auto& g = x->grad_ref();
      for (int b = 0; b < B; ++b)
        for (std::size_t i = 0; i < plane; ++i) {
          T r = rinv.data()[static_cast<std::size_t>(b) * plane + i];
          T xg = T(0);
          for (int c = 0; c < C; ++c) {
            const std::size_t k = (static_cast<std::size_t>(b) * C + c) * plane + i;
            xg += x->value.data()[k] * o->grad.data()[k];
          }
          for (int c = 0; c < C; ++c) {
            const std::size_t k = (static_cast<std::size_t>(b) * C + c) * plane + i;
            g.data()[k] += r * o->grad.data()[k] - r * r * r * x->value.data()[k] * xg;
          }
        }
    };
  return out;
}

// ---------------------------------------------------------------------------
// Row-structured ops for (B,K) matrices

template <typename T>
Var<T> normalize_rows(const Var<T>& x, T eps = T(1e-12)) {
  const int B = x->value.dim(0), K = x->value.dim(1);
  Tensor<T> v({B, K});
  std::vector<T> rinv(static_cast<std::size_t>(B));
  for (int b = 0; b < B; ++b) {
    T q = T(0);
    for (int k = 0; k < K; ++k) q += x->value.at(b, k) * x->value.at(b, k);
    T r = T(1) / std::sqrt(q + eps);
    rinv[static_cast<std::size_t>(b)] = r;
    for (int k = 0; k < K; ++k) v.at(b, k) = x->value.at(b, k) * r;
  }
  Var<T> out = detail::make(std::move(v), {x});
  if (out->requires_grad)
    out->backfn = [x, rinv = std::move(rinv), B, K, o = out.get()] {
      auto& g = x->grad_ref();
      for (int b = 0; b < B; ++b) {
        T r = rinv[static_cast<std::size_t>(b)];
        T xg = T(0);
        for (int k = 0; k < K; ++k) xg += x->value.at(b, k) * o->grad.at(b, k);
        for (int k = 0; k < K; ++k) g.at(b, k) += r * o->grad.at(b, k) - r * r * r * x->value.at(b, k) * xg;
      }
    };
  return out;
}

/// Row-wise outer product: (B,K1),(B,K2) -> (B,K1*K2), a-index major.
template <typename T>
Var<T> outer_rows(const Var<T>& a, const Var<T>& b) {
  const int B = a->value.dim(0), K1 = a->value.dim(1), K2 = b->value.dim(1);
  if (b->value.dim(0) != B) throw shape_error("outer_rows: batch mismatch");
  Tensor<T> v({B, K1 * K2});
  for (int bb = 0; bb < B; ++bb)
    for (int i = 0; i < K1; ++i)
      for (int j = 0; j < K2; ++j) v.at(bb, i * K2 + j) = a->value.at(bb, i) * b->value.at(bb, j);
  Var<T> out = detail::make(std::move(v), {a, b});
  if (out->requires_grad)
    out->backfn = [a, b, B, K1, K2, o = out.get()] {
      for (int bb = 0; bb < B; ++bb)
        for (int i = 0; i < K1; ++i)
          for (int j = 0; j < K2; ++j) {
            T g = o->grad.at(bb, i * K2 + j);
            if (a->requires_grad) a->grad_ref().at(bb, i) += g * b->value.at(bb, j);
            if (b->requires_grad) b->grad_ref().at(bb, j) += g * a->value.at(bb, i);
          }
    };
  return out;
}

/// (B,K) x fixed (K,N) -> (B,N).
template <typename T>
Var<T> matmul_const(const Var<T>& x, const Tensor<T>& M) {
  const int B = x->value.dim(0), K = x->value.dim(1), N = M.dim(1);
  if (M.dim(0) != K) throw shape_error("matmul_const: inner dim mismatch");
  Tensor<T> v = Tensor<T>::zeros({B, N});
  for (int b = 0; b < B; ++b)
    for (int k = 0; k < K; ++k) {
      T xv = x->value.at(b, k);
      for (int n = 0; n < N; ++n) v.at(b, n) += xv * M.at(k, n);
    }
  Var<T> out = detail::make(std::move(v), {x});
  if (out->requires_grad)
    out->backfn = [x, M, B, K, N, o = out.get()] {
      auto& g = x->grad_ref();
      for (int b = 0; b < B; ++b)
        for (int k = 0; k < K; ++k) {
          T s = T(0);
          for (int n = 0; n < N; ++n) s += o->grad.at(b, n) * M.at(k, n);
          g.at(b, k) += s;
        }
    };
  return out;
}

template <typename T>
Var<T> softmax_rows(const Var<T>& x) {
  const int B = x->value.dim(0), K = x->value.dim(1);
  Tensor<T> v({B, K});
  for (int b = 0; b < B; ++b) {
    T m = x->value.at(b, 0);
    for (int k = 1; k < K; ++k) m = std::max(m, x->value.at(b, k));
    T z = T(0);
    for (int k = 0; k < K; ++k) z += std::exp(x->value.at(b, k) - m);
    for (int k = 0; k < K; ++k) v.at(b, k) = std::exp(x->value.at(b, k) - m) / z;
  }
  Var<T> out = detail::make(std::move(v), {x});
  if (out->requires_grad)
    out->backfn = [x, B, K, o = out.get()] {
      auto& g = x->grad_ref();
      for (int b = 0; b < B; ++b) {
        T dot = T(0);
        for (int k = 0; k < K; ++k) dot += o->grad.at(b, k) * o->value.at(b, k);
        for (int k = 0; k < K; ++k) g.at(b, k) += o->value.at(b, k) * (o->grad.at(b, k) - dot);
      }
    };
  return out;
}

/// Mean over the batch of per-row cross-entropy against integer targets.
template <typename T>
Var<T> cross_entropy_rows(const Var<T>& logits, const std::vector<int>& targets) {
  const int B = logits->value.dim(0), K = logits->value.dim(1);
  if (static_cast<int>(targets.size()) != B) throw shape_error("cross_entropy_rows: target count mismatch");
  Tensor<T> probs({B, K});
  T loss = T(0);
  for (int b = 0; b < B; ++b) {
    if (targets[static_cast<std::size_t>(b)] < 0 || targets[static_cast<std::size_t>(b)] >= K)
      throw shape_error("cross_entropy_rows: target out of range");
    T m = logits->value.at(b, 0);
    for (int k = 1; k < K; ++k) m = std::max(m, logits->value.at(b, k));
    T z = T(0);
    for (int k = 0; k < K; ++k) z += std::exp(logits->value.at(b, k) - m);
    for (int k = 0; k < K; ++k) probs.at(b, k) = std::exp(logits->value.at(b, k) - m) / z;
    loss += std::log(z) + m - logits->value.at(b, targets[static_cast<std::size_t>(b)]);
  }
  loss /= T(B);
  Var<T> out = detail::make(Tensor<T>::full({1}, loss), {logits});
  if (out->requires_grad)
    out->backfn = [logits, targets, probs = std::move(probs), B, K, o = out.get()] {
      auto& g = logits->grad_ref();
      T og = o->grad[0] / T(B);
      for (int b = 0; b < B; ++b)
        for (int k = 0; k < K; ++k)
          g.at(b, k) += og * (probs.at(b, k) - (k == targets[static_cast<std::size_t>(b)] ? T(1) : T(0)));
    };
  return out;
}

// ---------------------------------------------------------------------------
// Reductions

/// Sum of m*|x| over all entries divided by a normalizer: the masked-entry
/// count when per_entry, else the masked-pixel count (channels share mask).
template <typename T>
Var<T> masked_mean_abs(const Var<T>& x, const Tensor<T>& mask, bool per_entry = true) {
  const int B = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
  if (mask.ndim() != 4 || mask.dim(0) != B || mask.dim(1) != 1 || mask.dim(2) != H || mask.dim(3) != W)
    throw shape_error("masked_mean_abs: mask must be (B,1,H,W)");
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  T msum = T(0);
  for (std::size_t i = 0; i < mask.numel(); ++i) msum += mask[i];
  T denom = per_entry ? msum * T(C) : msum;
  if (denom <= T(0)) denom = T(1);
  T acc = T(0);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const T* xp = x->value.data() + (static_cast<std::size_t>(b) * C + c) * plane;
      const T* mp = mask.data() + static_cast<std::size_t>(b) * plane;
      for (std::size_t i = 0; i < plane; ++i) acc += mp[i] * std::abs(xp[i]);
    }
  Var<T> out = detail::make(Tensor<T>::full({1}, acc / denom), {x});
  if (out->requires_grad)
    out->backfn = [x, mask, denom, B, C, plane, o = out.get()] {
      auto& g = x->grad_ref();
      T og = o->grad[0] / denom;
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
          const std::size_t off = (static_cast<std::size_t>(b) * C + c) * plane;
          const T* mp = mask.data() + static_cast<std::size_t>(b) * plane;
          for (std::size_t i = 0; i < plane; ++i) {
            T xv = x->value.data()[off + i];
            if (xv > T(0))
              g.data()[off + i] += og * mp[i];
            else if (xv < T(0))
              g.data()[off + i] -= og * mp[i];
          }
        }
    };
  return out;
}

template <typename T>
Var<T> masked_mean_sq(const Var<T>& x, const Tensor<T>& mask, bool per_entry = true) {
  const int B = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
  if (mask.ndim() != 4 || mask.dim(0) != B || mask.dim(1) != 1 || mask.dim(2) != H || mask.dim(3) != W)
    throw shape_error("masked_mean_sq: mask must be (B,1,H,W)");
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  T msum = T(0);
  for (std::size_t i = 0; i < mask.numel(); ++i) msum += mask[i];
  T denom = per_entry ? msum * T(C) : msum;
  if (denom <= T(0)) denom = T(1);
  T acc = T(0);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const T* xp = x->value.data() + (static_cast<std::size_t>(b) * C + c) * plane;
      const T* mp = mask.data() + static_cast<std::size_t>(b) * plane;
      for (std::size_t i = 0; i < plane; ++i) acc += mp[i] * xp[i] * xp[i];
    }
  Var<T> out = detail::make(Tensor<T>::full({1}, acc / denom), {x});
  if (out->requires_grad)
    out->backfn = [x, mask, denom, B, C, plane, o = out.get()] {
      auto& g = x->grad_ref();
      T og = o->grad[0] / denom;
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
          const std::size_t off = (static_cast<std::size_t>(b) * C + c) * plane;
          const T* mp = mask.data() + static_cast<std::size_t>(b) * plane;
          for (std::size_t i = 0; i < plane; ++i)
            g.data()[off + i] += og * mp[i] * T(2) * x->value.data()[off + i];
        }
    };
  return out;
}

template <typename T>
Var<T> mean_abs_all(const Var<T>& x) {
  const std::size_t n = x->value.numel();
  T acc = T(0);
  for (std::size_t i = 0; i < n; ++i) acc += std::abs(x->value[i]);
  Var<T> out = detail::make(Tensor<T>::full({1}, acc / T(n)), {x});
  if (out->requires_grad)
    out->backfn = [x, n, o = out.get()] {
      auto& g = x->grad_ref();
      T og = o->grad[0] / T(n);
      for (std::size_t i = 0; i < n; ++i) {
        if (x->value[i] > T(0))
          g[i] += og;
        else if (x->value[i] < T(0))
          g[i] -= og;
      }
    };
  return out;
}

/// value = sum_i w_i * s_i over scalar terms.
template <typename T>
Var<T> weighted_sum(const std::vector<std::pair<T, Var<T>>>& terms) {
  if (terms.empty()) throw shape_error("weighted_sum: no terms");
  T acc = T(0);
  std::vector<Var<T>> parents;
  for (const auto& [w, s] : terms) {
    if (s->value.numel() != 1) throw shape_error("weighted_sum: terms must be scalar");
    acc += w * s->value[0];
    parents.push_back(s);
  }
  Var<T> out = detail::make(Tensor<T>::full({1}, acc), parents);
  if (out->requires_grad)
    out->backfn = [terms, o = out.get()] {
      for (const auto& [w, s] : terms)
        if (s->requires_grad) s->grad_ref()[0] += w * o->grad[0];
    };
  return out;
}

// ---------------------------------------------------------------------------
// Spatial resampling

template <typename T>
Var<T> upsample_nearest2(const Var<T>& x) {
  const int B = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
  Tensor<T> v({B, C, 2 * H, 2 * W});
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < 2 * H; ++y)
        for (int xx = 0; xx < 2 * W; ++xx) v.at(b, c, y, xx) = x->value.at(b, c, y / 2, xx / 2);
  Var<T> out = detail::make(std::move(v), {x});
  if (out->requires_grad)
    out->backfn = [x, B, C, H, W, o = out.get()] {
      auto& g = x->grad_ref();
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c)
          for (int y = 0; y < 2 * H; ++y)
            for (int xx = 0; xx < 2 * W; ++xx) g.at(b, c, y / 2, xx / 2) += o->grad.at(b, c, y, xx);
    };
  return out;
}

/// Nearest-neighbor resize to an arbitrary target; identity when sizes match.
template <typename T>
Var<T> upsample_nearest_to(const Var<T>& x, int Ho, int Wo) {
  const int B = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
  if (Ho == H && Wo == W) return x;
  if (Ho <= 0 || Wo <= 0) throw shape_error("upsample_nearest_to: bad target size");
  std::vector<int> ymap(static_cast<std::size_t>(Ho)), xmap(static_cast<std::size_t>(Wo));
  for (int y = 0; y < Ho; ++y) ymap[static_cast<std::size_t>(y)] = std::min(H - 1, y * H / Ho);
  for (int xx = 0; xx < Wo; ++xx) xmap[static_cast<std::size_t>(xx)] = std::min(W - 1, xx * W / Wo);
  Tensor<T> v({B, C, Ho, Wo});
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < Ho; ++y)
        for (int xx = 0; xx < Wo; ++xx)
          v.at(b, c, y, xx) = x->value.at(b, c, ymap[static_cast<std::size_t>(y)], xmap[static_cast<std::size_t>(xx)]);
  Var<T> out = detail::make(std::move(v), {x});
  if (out->requires_grad)
    out->backfn = [x, ymap = std::move(ymap), xmap = std::move(xmap), B, C, Ho, Wo, o = out.get()] {
      auto& g = x->grad_ref();
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c)
          for (int y = 0; y < Ho; ++y)
            for (int xx = 0; xx < Wo; ++xx)
              g.at(b, c, ymap[static_cast<std::size_t>(y)], xmap[static_cast<std::size_t>(xx)]) +=
                  o->grad.at(b, c, y, xx);
    };
  return out;
}

template <typename T>
Var<T> avg_pool2(const Var<T>& x) {
  const int B = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
  if (H % 2 || W % 2) throw shape_error("avg_pool2: odd spatial size");
  Tensor<T> v({B, C, H / 2, W / 2});
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < H / 2; ++y)
        for (int xx = 0; xx < W / 2; ++xx)
          v.at(b, c, y, xx) = (x->value.at(b, c, 2 * y, 2 * xx) + x->value.at(b, c, 2 * y, 2 * xx + 1) +
                               x->value.at(b, c, 2 * y + 1, 2 * xx) + x->value.at(b, c, 2 * y + 1, 2 * xx + 1)) /
                              T(4);
  Var<T> out = detail::make(std::move(v), {x});
  if (out->requires_grad)
    out->backfn = [x, B, C, H, W, o = out.get()] {
      auto& g = x->grad_ref();
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c)
          for (int y = 0; y < H / 2; ++y)
            for (int xx = 0; xx < W / 2; ++xx) {
              T q = o->grad.at(b, c, y, xx) / T(4);
              g.at(b, c, 2 * y, 2 * xx) += q;
              g.at(b, c, 2 * y, 2 * xx + 1) += q;
              g.at(b, c, 2 * y + 1, 2 * xx) += q;
              g.at(b, c, 2 * y + 1, 2 * xx + 1) += q;
            }
    };
  return out;
}

/// (B,C,H,W) -> (B,C) spatial mean.
template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  const int B = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  Tensor<T> v({B, C});
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const T* p = x->value.data() + (static_cast<std::size_t>(b) * C + c) * plane;
      T s = T(0);
      for (std::size_t i = 0; i < plane; ++i) s += p[i];
      v.at(b, c) = s / T(plane);
    }
  Var<T> out = detail::make(std::move(v), {x});
  if (out->requires_grad)
    out->backfn = [x, B, C, plane, o = out.get()] {
      auto& g = x->grad_ref();
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
          T q = o->grad.at(b, c) / T(plane);
          T* p = g.data() + (static_cast<std::size_t>(b) * C + c) * plane;
          for (std::size_t i = 0; i < plane; ++i) p[i] += q;
        }
    };
  return out;
}

/// Inverted dropout; identity when not training. The mask is drawn from rng
/// at call time, so callers control determinism by seeding.
template <typename T>
Var<T> dropout(const Var<T>& x, double p, bool training, std::mt19937& rng) {
  if (!training || p <= 0.0) return x;
  if (p >= 1.0) throw shape_error("dropout: p must be < 1");
  std::bernoulli_distribution keep(1.0 - p);
  Tensor<T> m(x->value.shape());
  const T s = T(1) / static_cast<T>(1.0 - p);
  for (std::size_t i = 0; i < m.numel(); ++i) m[i] = keep(rng) ? s : T(0);
  Tensor<T> v = x->value;
  for (std::size_t i = 0; i < v.numel(); ++i) v[i] *= m[i];
  Var<T> out = detail::make(std::move(v), {x});
  if (out->requires_grad)
    out->backfn = [x, m = std::move(m), o = out.get()] {
      auto& g = x->grad_ref();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += o->grad[i] * m[i];
    };
  return out;
}

}  // namespace ps2kit::ad
