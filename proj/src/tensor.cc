// saasr/tensor.cc

#include "saasr/tensor.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_set>

namespace saasr {

namespace {

thread_local bool g_grad_mode = true;
thread_local std::uint64_t g_seq = 0;

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

std::string shape_str(const std::vector<int>& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

std::int64_t numel(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

// C[m×n] = op(A)·op(B) with optional accumulation. The NN path is the hot
// loop; transposed operands are packed into a scratch copy first.
template <class S>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, const S* a, const S* b,
          S* c, bool accumulate) {
  std::vector<S> pack_a, pack_b;
  if (trans_a) {  // a is [k×m], pack to [m×k]
    pack_a.resize(static_cast<size_t>(m) * k);
    for (int p = 0; p < k; ++p)
      for (int i = 0; i < m; ++i) pack_a[static_cast<size_t>(i) * k + p] = a[static_cast<size_t>(p) * m + i];
    a = pack_a.data();
  }
  if (trans_b) {  // b is [n×k], pack to [k×n]
    pack_b.resize(static_cast<size_t>(k) * n);
    for (int j = 0; j < n; ++j)
      for (int p = 0; p < k; ++p) pack_b[static_cast<size_t>(p) * n + j] = b[static_cast<size_t>(j) * k + p];
    b = pack_b.data();
  }
  for (int i = 0; i < m; ++i) {
    S* crow = c + static_cast<size_t>(i) * n;
    if (!accumulate) std::fill(crow, crow + n, S(0));
    const S* arow = a + static_cast<size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const S av = arow[p];
      const S* brow = b + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <class S>
using NodePtr = std::shared_ptr<detail::Node<S>>;

template <class S>
NodePtr<S> new_node(std::vector<int> shape, std::vector<S> value) {
  auto node = std::make_shared<detail::Node<S>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->seq = detail::next_seq();
  return node;
}

// Wires parents and the backward closure onto `out` when recording is on and
// at least one parent participates in a graph.
template <class S>
void attach(const NodePtr<S>& out, std::vector<NodePtr<S>> parents,
            std::function<void(detail::Node<S>&)> backward_fn) {
  if (!g_grad_mode) return;
  bool any = false;
  for (const auto& p : parents)
    if (p->requires_grad) { any = true; break; }
  if (!any) return;
  out->requires_grad = true;
  out->parents = std::move(parents);
  out->backward_fn = std::move(backward_fn);
}

template <class S>
void check_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  SAASR_REQUIRE(a.shape() == b.shape(), DimensionError, op, ": shape mismatch ",
                shape_str(a.shape()), " vs ", shape_str(b.shape()));
}

}  // namespace

NoGradGuard::NoGradGuard() : prev_(g_grad_mode) { g_grad_mode = false; }
NoGradGuard::~NoGradGuard() { g_grad_mode = prev_; }
bool grad_mode_enabled() { return g_grad_mode; }

namespace detail {
std::uint64_t next_seq() { return ++g_seq; }
}  // namespace detail

template <class S>
Tensor<S> Tensor<S>::zeros(std::vector<int> shape, bool requires_grad) {
  auto n = numel(shape);
  auto node = new_node<S>(std::move(shape), std::vector<S>(static_cast<size_t>(n), S(0)));
  node->requires_grad = requires_grad;
  return Tensor<S>(node);
}

template <class S>
Tensor<S> Tensor<S>::full(std::vector<int> shape, S fill, bool requires_grad) {
  auto n = numel(shape);
  auto node = new_node<S>(std::move(shape), std::vector<S>(static_cast<size_t>(n), fill));
  node->requires_grad = requires_grad;
  return Tensor<S>(node);
}

template <class S>
Tensor<S> Tensor<S>::from_data(std::vector<int> shape, std::vector<S> data, bool requires_grad) {
  SAASR_REQUIRE(numel(shape) == static_cast<std::int64_t>(data.size()), DimensionError,
                "from_data: shape ", shape_str(shape), " wants ", numel(shape),
                " values, got ", data.size());
  auto node = new_node<S>(std::move(shape), std::move(data));
  node->requires_grad = requires_grad;
  return Tensor<S>(node);
}

template <class S>
Tensor<S> Tensor<S>::randn(std::vector<int> shape, Rng& rng, double stddev, bool requires_grad) {
  std::vector<S> data(static_cast<size_t>(numel(shape)));
  for (auto& x : data) x = static_cast<S>(rng.normal(0.0, stddev));
  return from_data(std::move(shape), std::move(data), requires_grad);
}

template <class S>
Tensor<S> Tensor<S>::identity(int n, bool requires_grad) {
  Tensor<S> t = zeros({n, n}, requires_grad);
  for (int i = 0; i < n; ++i) t.value()[static_cast<size_t>(i) * n + i] = S(1);
  return t;
}

template <class S>
void Tensor<S>::backward() const {
  SAASR_REQUIRE(node_ && size() == 1, DimensionError, "backward() requires a scalar loss");
  // Collect the reachable subgraph, then replay in reverse execution order.
  std::vector<detail::Node<S>*> order;
  std::unordered_set<detail::Node<S>*> seen;
  std::vector<detail::Node<S>*> stack{node_.get()};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents)
      if (seen.insert(p.get()).second) stack.push_back(p.get());
  }
  std::sort(order.begin(), order.end(),
            [](const auto* a, const auto* b) { return a->seq > b->seq; });
  node_->ensure_grad();
  node_->grad[0] = S(1);
  for (auto* n : order) {
    if (n->backward_fn && n->requires_grad) {
      n->ensure_grad();
      n->backward_fn(*n);
    }
  }
}

// ---------------------------------------------------------------------------

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  SAASR_REQUIRE(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(0), DimensionError,
                "matmul: inner dimensions disagree: ", shape_str(a.shape()), " · ",
                shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  auto out = new_node<S>({m, n}, std::vector<S>(static_cast<size_t>(m) * n));
  gemm<S>(false, false, m, n, k, a.value().data(), b.value().data(), out->value.data(), false);
  auto an = a.node(), bn = b.node();
  attach<S>(out, {an, bn}, [an, bn, m, n, k](detail::Node<S>& o) {
    if (an->requires_grad) {
      an->ensure_grad();  // dA += dC·Bᵀ
      gemm<S>(false, true, m, k, n, o.grad.data(), bn->value.data(), an->grad.data(), true);
    }
    if (bn->requires_grad) {
      bn->ensure_grad();  // dB += Aᵀ·dC
      gemm<S>(true, false, k, n, m, an->value.data(), o.grad.data(), bn->grad.data(), true);
    }
  });
  return Tensor<S>(out);
}

template <class S>
Tensor<S> matmul_tn(const Tensor<S>& a, const Tensor<S>& b) {
  SAASR_REQUIRE(a.ndim() == 2 && b.ndim() == 2 && a.dim(0) == b.dim(0), DimensionError,
                "matmul_tn: inner dimensions disagree: ", shape_str(a.shape()), "ᵀ · ",
                shape_str(b.shape()));
  const int k = a.dim(0), m = a.dim(1), n = b.dim(1);
  auto out = new_node<S>({m, n}, std::vector<S>(static_cast<size_t>(m) * n));
  gemm<S>(true, false, m, n, k, a.value().data(), b.value().data(), out->value.data(), false);
  auto an = a.node(), bn = b.node();
  attach<S>(out, {an, bn}, [an, bn, m, n, k](detail::Node<S>& o) {
    if (an->requires_grad) {
      an->ensure_grad();  // dA += B·dCᵀ
      gemm<S>(false, true, k, m, n, bn->value.data(), o.grad.data(), an->grad.data(), true);
    }
    if (bn->requires_grad) {
      bn->ensure_grad();  // dB += A·dC
      gemm<S>(false, false, k, n, m, an->value.data(), o.grad.data(), bn->grad.data(), true);
    }
  });
  return Tensor<S>(out);
}

template <class S>
Tensor<S> matmul_nt(const Tensor<S>& a, const Tensor<S>& b) {
  SAASR_REQUIRE(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(1), DimensionError,
                "matmul_nt: inner dimensions disagree: ", shape_str(a.shape()), " · ",
                shape_str(b.shape()), "ᵀ");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(0);
  auto out = new_node<S>({m, n}, std::vector<S>(static_cast<size_t>(m) * n));
  gemm<S>(false, true, m, n, k, a.value().data(), b.value().data(), out->value.data(), false);
  auto an = a.node(), bn = b.node();
  attach<S>(out, {an, bn}, [an, bn, m, n, k](detail::Node<S>& o) {
    if (an->requires_grad) {
      an->ensure_grad();  // dA += dC·B
      gemm<S>(false, false, m, k, n, o.grad.data(), bn->value.data(), an->grad.data(), true);
    }
    if (bn->requires_grad) {
      bn->ensure_grad();  // dB += dCᵀ·A
      gemm<S>(true, false, n, k, m, o.grad.data(), an->value.data(), bn->grad.data(), true);
    }
  });
  return Tensor<S>(out);
}

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  check_same_shape(a, b, "add");
  std::vector<S> v(a.value().size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = a.value()[i] + b.value()[i];
  auto out = new_node<S>(a.shape(), std::move(v));
  auto an = a.node(), bn = b.node();
  attach<S>(out, {an, bn}, [an, bn](detail::Node<S>& o) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] += o.grad[i];
    }
  });
  return Tensor<S>(out);
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  check_same_shape(a, b, "mul");
  std::vector<S> v(a.value().size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = a.value()[i] * b.value()[i];
  auto out = new_node<S>(a.shape(), std::move(v));
  auto an = a.node(), bn = b.node();
  attach<S>(out, {an, bn}, [an, bn](detail::Node<S>& o) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] += o.grad[i] * an->value[i];
    }
  });
  return Tensor<S>(out);
}

template <class S>
Tensor<S> scale(const Tensor<S>& a, S c) {
  std::vector<S> v(a.value().size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = a.value()[i] * c;
  auto out = new_node<S>(a.shape(), std::move(v));
  auto an = a.node();
  attach<S>(out, {an}, [an, c](detail::Node<S>& o) {
    an->ensure_grad();
    for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i] * c;
  });
  return Tensor<S>(out);
}

template <class S>
Tensor<S> scale_by(const Tensor<S>& a, const Tensor<S>& s) {
  SAASR_REQUIRE(s.size() == 1, DimensionError, "scale_by: scalar tensor expected, got ",
                shape_str(s.shape()));
  const S c = s.value()[0];
  std::vector<S> v(a.value().size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = a.value()[i] * c;
  auto out = new_node<S>(a.shape(), std::move(v));
  auto an = a.node(), sn = s.node();
  attach<S>(out, {an, sn}, [an, sn, c](detail::Node<S>& o) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i] * c;
    }
    if (sn->requires_grad) {
      sn->ensure_grad();
      S acc = S(0);
      for (size_t i = 0; i < o.grad.size(); ++i) acc += o.grad[i] * an->value[i];
      sn->grad[0] += acc;
    }
  });
  return Tensor<S>(out);
}

template <class S>
Tensor<S> scale_cols(const Tensor<S>& a, const std::vector<S>& w) {
  const int m = a.rows(), n = a.cols();
  SAASR_REQUIRE(static_cast<int>(w.size()) == n, DimensionError, "scale_cols: ", w.size(),
                " weights for ", n, " columns");
  std::vector<S> v(a.value().size());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      v[static_cast<size_t>(i) * n + j] = a.value()[static_cast<size_t>(i) * n + j] * w[static_cast<size_t>(j)];
  auto out = new_node<S>(a.shape(), std::move(v));
  auto an = a.node();
  attach<S>(out, {an}, [an, w, m, n](detail::Node<S>& o) {
    an->ensure_grad();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j)
        an->grad[static_cast<size_t>(i) * n + j] += o.grad[static_cast<size_t>(i) * n + j] * w[static_cast<size_t>(j)];
  });
  return Tensor<S>(out);
}

template <class S>
Tensor<S> add_bias_cols(const Tensor<S>& a, const Tensor<S>& b) {
  const int m = a.rows(), n = a.cols();
  SAASR_REQUIRE(b.size() == m, DimensionError, "add_bias_cols: bias ", shape_str(b.shape()),
                " vs matrix ", shape_str(a.shape()));
  std::vector<S> v(a.value().size());
  for (int i = 0; i < m; ++i) {
    const S bi = b.value()[static_cast<size_t>(i)];
    for (int j = 0; j < n; ++j)
      v[static_cast<size_t>(i) * n + j] = a.value()[static_cast<size_t>(i) * n + j] + bi;
  }
  auto out = new_node<S>(a.shape(), std::move(v));
  auto an = a.node(), bn = b.node();
  attach<S>(out, {an, bn}, [an, bn, m, n](detail::Node<S>& o) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (int i = 0; i < m; ++i) {
        S acc = S(0);
        for (int j = 0; j < n; ++j) acc += o.grad[static_cast<size_t>(i) * n + j];
        bn->grad[static_cast<size_t>(i)] += acc;
      }
    }
  });
  return Tensor<S>(out);
}

template <class S>
Tensor<S> add_const(const Tensor<S>& a, const std::vector<S>& c) {
  SAASR_REQUIRE(c.size() == a.value().size(), DimensionError, "add_const: ", c.size(),
                " constants for tensor ", shape_str(a.shape()));
  std::vector<S> v(a.value().size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = a.value()[i] + c[i];
  auto out = new_node<S>(a.shape(), std::move(v));
  auto an = a.node();
  attach<S>(out, {an}, [an](detail::Node<S>& o) {
    an->ensure_grad();
    for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
  });
  return Tensor<S>(out);
}

template <class S>
Tensor<S> transpose(const Tensor<S>& a) {
  SAASR_REQUIRE(a.ndim() == 2, DimensionError, "transpose: rank-2 tensor expected, got ",
                shape_str(a.shape()));
  const int m = a.dim(0), n = a.dim(1);
  std::vector<S> v(a.value().size());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      v[static_cast<size_t>(j) * m + i] = a.value()[static_cast<size_t>(i) * n + j];
  auto out = new_node<S>({n, m}, std::move(v));
  auto an = a.node();
  attach<S>(out, {an}, [an, m, n](detail::Node<S>& o) {
    an->ensure_grad();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j)
        an->grad[static_cast<size_t>(i) * n + j] += o.grad[static_cast<size_t>(j) * m + i];
  });
  return Tensor<S>(out);
}

template <class S>
Tensor<S> slice_rows(const Tensor<S>& a, int r0, int r1) {
  SAASR_REQUIRE(a.ndim() == 2 && 0 <= r0 && r0 < r1 && r1 <= a.dim(0), IndexError,
                "slice_rows: [", r0, ",", r1, ") of ", shape_str(a.shape()));
  const int n = a.dim(1), m = r1 - r0;
  std::vector<S> v(static_cast<size_t>(m) * n);
  std::copy(a.value().begin() + static_cast<size_t>(r0) * n,
            a.value().begin() + static_cast<size_t>(r1) * n, v.begin());
  auto out = new_node<S>({m, n}, std::move(v));
  auto an = a.node();
  attach<S>(out, {an}, [an, r0, n](detail::Node<S>& o) {
    an->ensure_grad();
    const size_t base = static_cast<size_t>(r0) * n;
    for (size_t i = 0; i < o.grad.size(); ++i) an->grad[base + i] += o.grad[i];
  });
  return Tensor<S>(out);
}

template <class S>
Tensor<S> concat_rows(const std::vector<Tensor<S>>& parts) {
  SAASR_REQUIRE(!parts.empty(), DimensionError, "concat_rows: no inputs");
  const int n = parts[0].cols();
  int m = 0;
  for (const auto& p : parts) {
    SAASR_REQUIRE(p.cols() == n, DimensionError, "concat_rows: column mismatch ",
                  shape_str(p.shape()), " vs ", n, " columns");
    m += p.rows();
  }
  std::vector<S> v;
  v.reserve(static_cast<size_t>(m) * n);
  for (const auto& p : parts) v.insert(v.end(), p.value().begin(), p.value().end());
  auto out = new_node<S>({m, n}, std::move(v));
  std::vector<NodePtr<S>> parents;
  for (const auto& p : parts) parents.push_back(p.node());
  attach<S>(out, parents, [parents](detail::Node<S>& o) {
    size_t off = 0;
    for (const auto& p : parents) {
      if (p->requires_grad) {
        p->ensure_grad();
        for (size_t i = 0; i < p->value.size(); ++i) p->grad[i] += o.grad[off + i];
      }
      off += p->value.size();
    }
  });
  return Tensor<S>(out);
}

template <class S>
Tensor<S> concat_cols(const std::vector<Tensor<S>>& parts) {
  SAASR_REQUIRE(!parts.empty(), DimensionError, "concat_cols: no inputs");
  const int m = parts[0].rows();
  int n = 0;
  std::vector<int> widths;
  for (const auto& p : parts) {
    SAASR_REQUIRE(p.rows() == m, DimensionError, "concat_cols: row mismatch ",
                  shape_str(p.shape()), " vs ", m, " rows");
    widths.push_back(p.cols());
    n += p.cols();
  }
  std::vector<S> v(static_cast<size_t>(m) * n);
  int off = 0;
  for (size_t pi = 0; pi < parts.size(); ++pi) {
    const auto& pv = parts[pi].value();
    const int w = widths[pi];
    for (int i = 0; i < m; ++i)
      std::copy(pv.begin() + static_cast<size_t>(i) * w, pv.begin() + static_cast<size_t>(i + 1) * w,
                v.begin() + static_cast<size_t>(i) * n + off);
    off += w;
  }
  auto out = new_node<S>({m, n}, std::move(v));
  std::vector<NodePtr<S>> parents;
  for (const auto& p : parts) parents.push_back(p.node());
  attach<S>(out, parents, [parents, widths, m, n](detail::Node<S>& o) {
    int off2 = 0;
    for (size_t pi = 0; pi < parents.size(); ++pi) {
      const int w = widths[pi];
      if (parents[pi]->requires_grad) {
        parents[pi]->ensure_grad();
        auto& g = parents[pi]->grad;
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < w; ++j)
            g[static_cast<size_t>(i) * w + j] += o.grad[static_cast<size_t>(i) * n + off2 + j];
      }
      off2 += w;
    }
  });
  return Tensor<S>(out);
}

template <class S>
Tensor<S> softmax_rows(const Tensor<S>& a) {
  return softmax_rows_masked(a, std::vector<std::uint8_t>(a.value().size(), 1));
}

template <class S>
Tensor<S> softmax_rows_masked(const Tensor<S>& a, const std::vector<std::uint8_t>& allowed) {
  SAASR_REQUIRE(allowed.size() == a.value().size(), DimensionError,
                "softmax_rows_masked: mask size ", allowed.size(), " vs tensor ",
                shape_str(a.shape()));
  const int m = a.rows(), n = a.cols();
  std::vector<S> v(a.value().size(), S(0));
  for (int i = 0; i < m; ++i) {
    const size_t base = static_cast<size_t>(i) * n;
    S mx = S(0);
    bool any = false;
    for (int j = 0; j < n; ++j)
      if (allowed[base + j] && (!any || a.value()[base + j] > mx)) {
        mx = a.value()[base + j];
        any = true;
      }
    SAASR_REQUIRE(any, DimensionError, "softmax_rows_masked: row ", i, " fully masked");
    S denom = S(0);
    for (int j = 0; j < n; ++j)
      if (allowed[base + j]) {
        v[base + j] = std::exp(a.value()[base + j] - mx);
        denom += v[base + j];
      }
    for (int j = 0; j < n; ++j) v[base + j] /= denom;
  }
  auto out = new_node<S>(a.shape(), std::move(v));
  auto an = a.node();
  attach<S>(out, {an}, [an, m, n](detail::Node<S>& o) {
    an->ensure_grad();
    for (int i = 0; i < m; ++i) {
      const size_t base = static_cast<size_t>(i) * n;
      S dot = S(0);
      for (int j = 0; j < n; ++j) dot += o.grad[base + j] * o.value[base + j];
      for (int j = 0; j < n; ++j)
        an->grad[base + j] += o.value[base + j] * (o.grad[base + j] - dot);
    }
  });
  return Tensor<S>(out);
}

template <class S>
Tensor<S> layer_norm_cols(const Tensor<S>& a, const Tensor<S>& gamma, const Tensor<S>& beta,
                          S eps) {
  const int d = a.rows(), n = a.cols();
  SAASR_REQUIRE(gamma.size() == d && beta.size() == d, DimensionError,
                "layer_norm_cols: params ", shape_str(gamma.shape()), "/",
                shape_str(beta.shape()), " vs matrix ", shape_str(a.shape()));
  std::vector<S> v(a.value().size());
  auto xhat = std::make_shared<std::vector<S>>(a.value().size());
  auto inv_std = std::make_shared<std::vector<S>>(static_cast<size_t>(n));
  for (int j = 0; j < n; ++j) {
    S mu = S(0);
    for (int i = 0; i < d; ++i) mu += a.value()[static_cast<size_t>(i) * n + j];
    mu /= S(d);
    S var = S(0);
    for (int i = 0; i < d; ++i) {
      const S diff = a.value()[static_cast<size_t>(i) * n + j] - mu;
      var += diff * diff;
    }
    var /= S(d);
    const S is = S(1) / std::sqrt(var + eps);
    (*inv_std)[static_cast<size_t>(j)] = is;
    for (int i = 0; i < d; ++i) {
      const size_t idx = static_cast<size_t>(i) * n + j;
      (*xhat)[idx] = (a.value()[idx] - mu) * is;
      v[idx] = gamma.value()[static_cast<size_t>(i)] * (*xhat)[idx] + beta.value()[static_cast<size_t>(i)];
    }
  }
  auto out = new_node<S>(a.shape(), std::move(v));
  auto an = a.node(), gn = gamma.node(), bn = beta.node();
  attach<S>(out, {an, gn, bn}, [an, gn, bn, xhat, inv_std, d, n](detail::Node<S>& o) {
    for (int j = 0; j < n; ++j) {
      const S is = (*inv_std)[static_cast<size_t>(j)];
      // dxhat[i] = dout[i]·gamma[i]; dx = (dxhat − mean(dxhat) − xhat·mean(dxhat·xhat))·inv_std
      S mean_dx = S(0), mean_dxx = S(0);
      for (int i = 0; i < d; ++i) {
        const size_t idx = static_cast<size_t>(i) * n + j;
        const S dxh = o.grad[idx] * gn->value[static_cast<size_t>(i)];
        mean_dx += dxh;
        mean_dxx += dxh * (*xhat)[idx];
      }
      mean_dx /= S(d);
      mean_dxx /= S(d);
      if (an->requires_grad) {
        an->ensure_grad();
        for (int i = 0; i < d; ++i) {
          const size_t idx = static_cast<size_t>(i) * n + j;
          const S dxh = o.grad[idx] * gn->value[static_cast<size_t>(i)];
          an->grad[idx] += (dxh - mean_dx - (*xhat)[idx] * mean_dxx) * is;
        }
      }
    }
    if (gn->requires_grad) {
      gn->ensure_grad();
      for (int i = 0; i < d; ++i) {
        S acc = S(0);
        for (int j = 0; j < n; ++j) {
          const size_t idx = static_cast<size_t>(i) * n + j;
          acc += o.grad[idx] * (*xhat)[idx];
        }
        gn->grad[static_cast<size_t>(i)] += acc;
      }
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (int i = 0; i < d; ++i) {
        S acc = S(0);
        for (int j = 0; j < n; ++j) acc += o.grad[static_cast<size_t>(i) * n + j];
        bn->grad[static_cast<size_t>(i)] += acc;
      }
    }
  });
  return Tensor<S>(out);
}

template <class S>
Tensor<S> gelu(const Tensor<S>& a) {
  std::vector<S> v(a.value().size());
  for (size_t i = 0; i < v.size(); ++i) {
    const double x = static_cast<double>(a.value()[i]);
    v[i] = static_cast<S>(0.5 * x * (1.0 + std::erf(x * kInvSqrt2)));
  }
  auto out = new_node<S>(a.shape(), std::move(v));
  auto an = a.node();
  attach<S>(out, {an}, [an](detail::Node<S>& o) {
    an->ensure_grad();
    for (size_t i = 0; i < o.grad.size(); ++i) {
      const double x = static_cast<double>(an->value[i]);
      const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
      const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
      an->grad[i] += o.grad[i] * static_cast<S>(cdf + x * pdf);
    }
  });
  return Tensor<S>(out);
}

template <class S>
Tensor<S> embedding_cols(const Tensor<S>& table, const std::vector<int>& ids) {
  SAASR_REQUIRE(table.ndim() == 2, DimensionError, "embedding_cols: table must be rank-2");
  const int rows = table.dim(0), d = table.dim(1);
  const int n = static_cast<int>(ids.size());
  for (int id : ids)
    SAASR_REQUIRE(0 <= id && id < rows, IndexError, "embedding_cols: id ", id,
                  " outside table of ", rows, " rows");
  std::vector<S> v(static_cast<size_t>(d) * n);
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < d; ++i)
      v[static_cast<size_t>(i) * n + j] = table.value()[static_cast<size_t>(ids[static_cast<size_t>(j)]) * d + i];
  auto out = new_node<S>({d, n}, std::move(v));
  auto tn = table.node();
  attach<S>(out, {tn}, [tn, ids, d, n](detail::Node<S>& o) {
    tn->ensure_grad();
    for (int j = 0; j < n; ++j) {
      const size_t row = static_cast<size_t>(ids[static_cast<size_t>(j)]) * d;
      for (int i = 0; i < d; ++i) tn->grad[row + i] += o.grad[static_cast<size_t>(i) * n + j];
    }
  });
  return Tensor<S>(out);
}

template <class S>
Tensor<S> conv1d(const Tensor<S>& x, const Tensor<S>& kernel, const Tensor<S>& bias, int stride) {
  SAASR_REQUIRE(x.ndim() == 2 && kernel.ndim() == 3, DimensionError,
                "conv1d: x rank-2 and kernel rank-3 expected");
  const int cin = x.dim(0), len = x.dim(1);
  const int cout = kernel.dim(0), kcin = kernel.dim(1), kw = kernel.dim(2);
  SAASR_REQUIRE(kcin == cin, DimensionError, "conv1d: kernel expects ", kcin,
                " input channels, input has ", cin);
  SAASR_REQUIRE(kw % 2 == 1, DimensionError, "conv1d: kernel width ", kw,
                " must be odd for same padding");
  SAASR_REQUIRE(stride == 1 || stride == 2, DimensionError, "conv1d: stride ", stride);
  SAASR_REQUIRE(len % stride == 0, DimensionError, "conv1d: input length ", len,
                " not divisible by stride ", stride, "; pad the input first");
  SAASR_REQUIRE(bias.size() == cout, DimensionError, "conv1d: bias ", shape_str(bias.shape()),
                " vs ", cout, " output channels");
  const int out_len = len / stride;
  const int pad = (kw - 1) / 2;
  std::vector<S> v(static_cast<size_t>(cout) * out_len);
  const auto& xv = x.value();
  const auto& kv = kernel.value();
  for (int o = 0; o < cout; ++o) {
    for (int t = 0; t < out_len; ++t) {
      S acc = bias.value()[static_cast<size_t>(o)];
      const int center = t * stride;
      for (int ci = 0; ci < cin; ++ci) {
        const size_t krow = (static_cast<size_t>(o) * cin + ci) * kw;
        const size_t xrow = static_cast<size_t>(ci) * len;
        for (int k = 0; k < kw; ++k) {
          const int p = center + k - pad;
          if (p >= 0 && p < len) acc += xv[xrow + p] * kv[krow + k];
        }
      }
      v[static_cast<size_t>(o) * out_len + t] = acc;
    }
  }
  auto out = new_node<S>({cout, out_len}, std::move(v));
  auto xn = x.node(), kn = kernel.node(), bn = bias.node();
  attach<S>(out, {xn, kn, bn}, [xn, kn, bn, cin, len, cout, kw, stride, out_len,
                                pad](detail::Node<S>& o) {
    for (int oc = 0; oc < cout; ++oc) {
      for (int t = 0; t < out_len; ++t) {
        const S g = o.grad[static_cast<size_t>(oc) * out_len + t];
        if (g == S(0)) continue;
        const int center = t * stride;
        if (bn->requires_grad) {
          bn->ensure_grad();
          bn->grad[static_cast<size_t>(oc)] += g;
        }
        for (int ci = 0; ci < cin; ++ci) {
          const size_t krow = (static_cast<size_t>(oc) * cin + ci) * kw;
          const size_t xrow = static_cast<size_t>(ci) * len;
          for (int k = 0; k < kw; ++k) {
            const int p = center + k - pad;
            if (p < 0 || p >= len) continue;
            if (xn->requires_grad) {
              xn->ensure_grad();
              xn->grad[xrow + p] += g * kn->value[krow + k];
            }
            if (kn->requires_grad) {
              kn->ensure_grad();
              kn->grad[krow + k] += g * xn->value[xrow + p];
            }
          }
        }
      }
    }
  });
  return Tensor<S>(out);
}

template <class S>
Tensor<S> sum(const Tensor<S>& a) {
  S acc = S(0);
  for (S x : a.value()) acc += x;
  auto out = new_node<S>({1}, std::vector<S>{acc});
  auto an = a.node();
  attach<S>(out, {an}, [an](detail::Node<S>& o) {
    an->ensure_grad();
    for (auto& g : an->grad) g += o.grad[0];
  });
  return Tensor<S>(out);
}

template <class S>
Tensor<S> mean(const Tensor<S>& a) {
  return scale(sum(a), S(1) / static_cast<S>(a.size()));
}

template <class S>
Tensor<S> softmax_cross_entropy(const Tensor<S>& logits, const std::vector<int>& targets,
                                const std::vector<S>& weights) {
  SAASR_REQUIRE(logits.ndim() == 2, DimensionError, "softmax_cross_entropy: logits must be rank-2");
  const int n = logits.dim(0), c = logits.dim(1);
  SAASR_REQUIRE(static_cast<int>(targets.size()) == n && static_cast<int>(weights.size()) == n,
                DimensionError, "softmax_cross_entropy: ", targets.size(), " targets / ",
                weights.size(), " weights for ", n, " rows");
  S total_w = S(0);
  for (int i = 0; i < n; ++i) {
    SAASR_REQUIRE(0 <= targets[static_cast<size_t>(i)] && targets[static_cast<size_t>(i)] < c,
                  IndexError, "softmax_cross_entropy: target ", targets[static_cast<size_t>(i)],
                  " at row ", i, " outside [0,", c, ")");
    SAASR_REQUIRE(weights[static_cast<size_t>(i)] >= S(0), ConfigError,
                  "softmax_cross_entropy: negative weight at row ", i);
    total_w += weights[static_cast<size_t>(i)];
  }
  SAASR_REQUIRE(total_w > S(0), ConfigError, "softmax_cross_entropy: zero total weight");

  auto probs = std::make_shared<std::vector<S>>(logits.value().size());
  S loss = S(0);
  for (int i = 0; i < n; ++i) {
    const size_t base = static_cast<size_t>(i) * c;
    S mx = logits.value()[base];
    for (int j = 1; j < c; ++j) mx = std::max(mx, logits.value()[base + j]);
    S denom = S(0);
    for (int j = 0; j < c; ++j) {
      (*probs)[base + j] = std::exp(logits.value()[base + j] - mx);
      denom += (*probs)[base + j];
    }
    for (int j = 0; j < c; ++j) (*probs)[base + j] /= denom;
    const S log_p = logits.value()[base + targets[static_cast<size_t>(i)]] - mx - std::log(denom);
    loss -= weights[static_cast<size_t>(i)] * log_p;
  }
  loss /= total_w;

  auto out = new_node<S>({1}, std::vector<S>{loss});
  auto ln = logits.node();
  attach<S>(out, {ln}, [ln, probs, targets, weights, total_w, n, c](detail::Node<S>& o) {
    ln->ensure_grad();
    const S g = o.grad[0] / total_w;
    for (int i = 0; i < n; ++i) {
      const size_t base = static_cast<size_t>(i) * c;
      const S wi = weights[static_cast<size_t>(i)] * g;
      if (wi == S(0)) continue;
      for (int j = 0; j < c; ++j) ln->grad[base + j] += wi * (*probs)[base + j];
      ln->grad[base + targets[static_cast<size_t>(i)]] -= wi;
    }
  });
  return Tensor<S>(out);
}

template <class S>
Tensor<S> factored_logits(const Tensor<S>& o_lex, const Tensor<S>& o_spk,
                          const Tensor<S>& o_time, int num_lexical) {
  const int n = o_lex.cols();
  SAASR_REQUIRE(o_spk.cols() == n && o_time.cols() == n, DimensionError,
                "factored_logits: position counts disagree: lex ", o_lex.cols(), " spk ",
                o_spk.cols(), " time ", o_time.cols());
  const int lex_rows = o_lex.rows();
  SAASR_REQUIRE(num_lexical <= lex_rows, DimensionError, "factored_logits: num_lexical ",
                num_lexical, " exceeds lexical head size ", lex_rows);
  const int u = o_spk.rows(), w = o_time.rows();
  const int specials = lex_rows - num_lexical;
  const int total = num_lexical + u * w + specials;
  std::vector<S> v(static_cast<size_t>(n) * total);
  const auto& lex = o_lex.value();
  const auto& spk = o_spk.value();
  const auto& tim = o_time.value();
  for (int p = 0; p < n; ++p) {
    const size_t row = static_cast<size_t>(p) * total;
    for (int j = 0; j < num_lexical; ++j) v[row + j] = lex[static_cast<size_t>(j) * n + p];
    for (int uu = 0; uu < u; ++uu) {
      const S sv = spk[static_cast<size_t>(uu) * n + p];
      const size_t block = row + num_lexical + static_cast<size_t>(uu) * w;
      for (int ww = 0; ww < w; ++ww) v[block + ww] = sv + tim[static_cast<size_t>(ww) * n + p];
    }
    for (int s = 0; s < specials; ++s)
      v[row + num_lexical + static_cast<size_t>(u) * w + s] =
          lex[static_cast<size_t>(num_lexical + s) * n + p];
  }
  auto out = new_node<S>({n, total}, std::move(v));
  auto lexn = o_lex.node(), spkn = o_spk.node(), timn = o_time.node();
  attach<S>(out, {lexn, spkn, timn},
            [lexn, spkn, timn, n, num_lexical, u, w, specials, total](detail::Node<S>& o) {
              for (int p = 0; p < n; ++p) {
                const size_t row = static_cast<size_t>(p) * total;
                if (lexn->requires_grad) {
                  lexn->ensure_grad();
                  for (int j = 0; j < num_lexical; ++j)
                    lexn->grad[static_cast<size_t>(j) * n + p] += o.grad[row + j];
                  for (int s = 0; s < specials; ++s)
                    lexn->grad[static_cast<size_t>(num_lexical + s) * n + p] +=
                        o.grad[row + num_lexical + static_cast<size_t>(u) * w + s];
                }
                for (int uu = 0; uu < u; ++uu) {
                  const size_t block = row + num_lexical + static_cast<size_t>(uu) * w;
                  if (spkn->requires_grad) {
                    spkn->ensure_grad();
                    S acc = S(0);
                    for (int ww = 0; ww < w; ++ww) acc += o.grad[block + ww];
                    spkn->grad[static_cast<size_t>(uu) * n + p] += acc;
                  }
                  if (timn->requires_grad) {
                    timn->ensure_grad();
                    for (int ww = 0; ww < w; ++ww)
                      timn->grad[static_cast<size_t>(ww) * n + p] += o.grad[block + ww];
                  }
                }
              }
            });
  return Tensor<S>(out);
}

// Explicit instantiations: float for training/inference, double for the
// gradient test suites.
#define SAASR_INSTANTIATE(S)                                                              \
  template class Tensor<S>;                                                               \
  template Tensor<S> matmul(const Tensor<S>&, const Tensor<S>&);                          \
  template Tensor<S> matmul_tn(const Tensor<S>&, const Tensor<S>&);                       \
  template Tensor<S> matmul_nt(const Tensor<S>&, const Tensor<S>&);                       \
  template Tensor<S> add(const Tensor<S>&, const Tensor<S>&);                             \
  template Tensor<S> mul(const Tensor<S>&, const Tensor<S>&);                             \
  template Tensor<S> scale(const Tensor<S>&, S);                                          \
  template Tensor<S> scale_by(const Tensor<S>&, const Tensor<S>&);                        \
  template Tensor<S> scale_cols(const Tensor<S>&, const std::vector<S>&);                 \
  template Tensor<S> add_bias_cols(const Tensor<S>&, const Tensor<S>&);                   \
  template Tensor<S> add_const(const Tensor<S>&, const std::vector<S>&);                  \
  template Tensor<S> transpose(const Tensor<S>&);                                         \
  template Tensor<S> slice_rows(const Tensor<S>&, int, int);                              \
  template Tensor<S> concat_rows(const std::vector<Tensor<S>>&);                          \
  template Tensor<S> concat_cols(const std::vector<Tensor<S>>&);                          \
  template Tensor<S> softmax_rows(const Tensor<S>&);                                      \
  template Tensor<S> softmax_rows_masked(const Tensor<S>&, const std::vector<std::uint8_t>&); \
  template Tensor<S> layer_norm_cols(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, S); \
  template Tensor<S> gelu(const Tensor<S>&);                                              \
  template Tensor<S> embedding_cols(const Tensor<S>&, const std::vector<int>&);           \
  template Tensor<S> conv1d(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, int);   \
  template Tensor<S> sum(const Tensor<S>&);                                               \
  template Tensor<S> mean(const Tensor<S>&);                                              \
  template Tensor<S> softmax_cross_entropy(const Tensor<S>&, const std::vector<int>&,     \
                                           const std::vector<S>&);                       \
  template Tensor<S> factored_logits(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, int);

SAASR_INSTANTIATE(float)
SAASR_INSTANTIATE(double)

#undef SAASR_INSTANTIATE

}  // namespace saasr
