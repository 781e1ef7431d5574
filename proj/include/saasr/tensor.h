// saasr/tensor.h
//
// Minimal dense-tensor library with reverse-mode automatic differentiation.
// Tensors are rank-1 or rank-2, stored contiguously in row-major order.
// Matrices follow the features-as-rows, time-as-columns convention used
// throughout the model code.
//
// Every differentiable op records a backward closure on an implicit
// per-thread tape (a monotonically increasing sequence number per node).
// backward() replays closures in exact reverse execution order and
// accumulates (+=) into parent gradients. Tensors are immutable after
// forward construction except for their grad buffers; independent graphs
// may live on separate threads, nothing is shared across them.
//
// Scalar type S is float for training/inference and double for gradient
// tests, which keeps finite-difference oracles tight.

#ifndef SAASR_TENSOR_H_
#define SAASR_TENSOR_H_

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "saasr/common.h"
#include "saasr/rng.h"

namespace saasr {

// Scoped switch that disables tape recording (inference fast path).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

bool grad_mode_enabled();

namespace detail {

template <class S>
struct Node {
  std::vector<int> shape;
  std::vector<S> value;
  std::vector<S> grad;  // sized on first accumulation
  bool requires_grad = false;
  std::uint64_t seq = 0;  // creation order on this thread's tape
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::int64_t size() const { return static_cast<std::int64_t>(value.size()); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), S(0));
  }
};

std::uint64_t next_seq();

}  // namespace detail

template <class S>
class Tensor {
 public:
  using Scalar = S;

  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, S fill, bool requires_grad = false);
  static Tensor from_data(std::vector<int> shape, std::vector<S> data,
                          bool requires_grad = false);
  static Tensor randn(std::vector<int> shape, Rng& rng, double stddev,
                      bool requires_grad = false);
  // Square identity matrix.
  static Tensor identity(int n, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node_->shape; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  std::int64_t size() const { return node_->size(); }
  // Rank-2 accessors; a rank-1 tensor behaves as a single row.
  int rows() const { return ndim() == 2 ? dim(0) : 1; }
  int cols() const { return ndim() == 2 ? dim(1) : dim(0); }

  std::vector<S>& value() { return node_->value; }
  const std::vector<S>& value() const { return node_->value; }
  std::vector<S>& grad() { node_->ensure_grad(); return node_->grad; }
  const std::vector<S>& grad() const {
    node_->ensure_grad();
    return node_->grad;
  }
  bool requires_grad() const { return node_->requires_grad; }

  S at(int r, int c) const { return node_->value[static_cast<size_t>(r) * cols() + c]; }
  S& at(int r, int c) { return node_->value[static_cast<size_t>(r) * cols() + c]; }
  // Value of a one-element tensor.
  S item() const {
    SAASR_REQUIRE(size() == 1, DimensionError, "item() on tensor of size ", size());
    return node_->value[0];
  }

  void zero_grad() { if (node_) node_->grad.assign(node_->value.size(), S(0)); }

  // Reverse-mode sweep from this scalar. Seeds d(this)=1, then runs the
  // recorded closures in reverse execution order.
  void backward() const;

  std::shared_ptr<detail::Node<S>> node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node<S>> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node<S>> node_;
};

// ---------------------------------------------------------------------------
// Differentiable primitives. All of them validate shapes and raise
// DimensionError naming both shapes on mismatch.

// C[m×n] = A[m×k] · B[k×n]
template <class S> Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b);
// C[m×n] = Aᵀ[m×k] · B[k×n] given A[k×m]
template <class S> Tensor<S> matmul_tn(const Tensor<S>& a, const Tensor<S>& b);
// C[m×n] = A[m×k] · Bᵀ[k×n] given B[n×k]
template <class S> Tensor<S> matmul_nt(const Tensor<S>& a, const Tensor<S>& b);

template <class S> Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b);
template <class S> Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b);
template <class S> Tensor<S> scale(const Tensor<S>& a, S c);
// a scaled by a one-element tensor; differentiable in both inputs.
template <class S> Tensor<S> scale_by(const Tensor<S>& a, const Tensor<S>& s);
// Column j of a scaled by w[j]; w is a plain constant.
template <class S> Tensor<S> scale_cols(const Tensor<S>& a, const std::vector<S>& w);
// Bias vector b[m] added to every column of a[m×n] (the only broadcast).
template <class S> Tensor<S> add_bias_cols(const Tensor<S>& a, const Tensor<S>& b);
// Elementwise constant offset (e.g. fixed positional encodings).
template <class S> Tensor<S> add_const(const Tensor<S>& a, const std::vector<S>& c);

template <class S> Tensor<S> transpose(const Tensor<S>& a);
template <class S> Tensor<S> slice_rows(const Tensor<S>& a, int r0, int r1);
template <class S> Tensor<S> concat_rows(const std::vector<Tensor<S>>& parts);
// Concatenation along the time (column) axis.
template <class S> Tensor<S> concat_cols(const std::vector<Tensor<S>>& parts);

// Row-wise softmax (a rank-1 tensor is one row). Max-subtraction stabilized.
template <class S> Tensor<S> softmax_rows(const Tensor<S>& a);
// Entries with allowed[i]==0 get probability 0 and receive no gradient;
// every row must keep at least one allowed entry.
template <class S> Tensor<S> softmax_rows_masked(const Tensor<S>& a,
                                                 const std::vector<std::uint8_t>& allowed);

// Layer normalization over the feature (row) axis, per column.
template <class S> Tensor<S> layer_norm_cols(const Tensor<S>& a, const Tensor<S>& gamma,
                                             const Tensor<S>& beta, S eps = S(1e-5));

template <class S> Tensor<S> gelu(const Tensor<S>& a);

// Output column j is row ids[j] of table[R×d], i.e. the result is [d×N].
template <class S> Tensor<S> embedding_cols(const Tensor<S>& table, const std::vector<int>& ids);

// Same-padded 1-D convolution over x[Cin×L] with kernel[Cout×Cin×K] (K odd)
// and stride 1 or 2; output is [Cout×L/stride]. L must be divisible by the
// stride; callers pad.
template <class S> Tensor<S> conv1d(const Tensor<S>& x, const Tensor<S>& kernel,
                                    const Tensor<S>& bias, int stride);

template <class S> Tensor<S> sum(const Tensor<S>& a);
template <class S> Tensor<S> mean(const Tensor<S>& a);

// Weighted mean cross-entropy over rows of logits[N×C]:
//   Σ_n w[n]·(−log softmax(logits[n])[targets[n]]) / Σ_n w[n]
template <class S> Tensor<S> softmax_cross_entropy(const Tensor<S>& logits,
                                                   const std::vector<int>& targets,
                                                   const std::vector<S>& weights);

// Assembles the joint output logits [N × (v + u·w + specials)] from the three
// head projections (each with positions as columns): lexical rows fill the
// leading v columns, speaker/time sums o_spk[u]+o_time[w] fill the middle
// block in (u,w) row-major order, and the trailing lexical rows past v fill
// the specials tail.
template <class S> Tensor<S> factored_logits(const Tensor<S>& o_lex, const Tensor<S>& o_spk,
                                             const Tensor<S>& o_time, int num_lexical);

}  // namespace saasr

#endif  // SAASR_TENSOR_H_
