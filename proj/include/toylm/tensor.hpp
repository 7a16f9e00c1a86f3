#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "toylm/rng.hpp"

namespace toylm {

// 64-bit is the default precision; f32 mode quantizes every stored value
// (inputs and op results) through IEEE float while carrying arithmetic in
// double, so checkpointed f32 buffers round-trip bit-exactly.
enum class DType : uint8_t { f64, f32 };

struct DimensionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<size_t>;

namespace detail {

struct TapeNode;
using TapeNodePtr = std::shared_ptr<TapeNode>;

// One tape entry. The tape is distributed across nodes: each op records its
// parents and a backprop closure, and `seq` (creation order) is a valid
// topological index because an op can only consume already-created tensors.
// backward() replays the reachable tape in decreasing `seq`, visiting each
// node exactly once.
struct TapeNode {
  Shape shape;
  std::vector<double> val;
  std::vector<double> grad;  // sized on first accumulation
  DType dtype = DType::f64;
  bool requires_grad = false;
  uint64_t seq = 0;
  std::vector<TapeNodePtr> parents;
  std::function<void(TapeNode&)> backprop;

  size_t size() const { return val.size(); }
  void ensure_grad() {
    if (grad.size() != val.size()) grad.assign(val.size(), 0.0);
  }
};

}  // namespace detail

// Dense row-major tensor handle with reverse-mode autodiff. Copying a Tensor
// copies the handle (both alias the same node); ops return fresh nodes.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, DType dt = DType::f64);
  static Tensor full(Shape shape, double v, DType dt = DType::f64);
  static Tensor from_data(std::vector<double> data, Shape shape,
                          DType dt = DType::f64);
  static Tensor scalar(double v, DType dt = DType::f64);
  // Normal(0, stddev) entries drawn from `rng` in row-major order.
  static Tensor randn(Shape shape, Rng& rng, double stddev,
                      DType dt = DType::f64);

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const;
  size_t ndim() const { return shape().size(); }
  size_t size() const;
  size_t rows() const;  // 2-D only
  size_t cols() const;  // 2-D only
  DType dtype() const;

  double at(size_t i) const;
  double at(size_t r, size_t c) const;
  std::span<const double> values() const;
  double scalar_value() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool v);
  std::span<const double> grad() const;  // zeros until a backward reaches it
  void zero_grad();

  // Raw in-place access for optimizers, checkpoint loading and finite
  // differencing. Does not record on the tape; leaves only.
  std::span<double> mutable_values();
  std::span<double> mutable_grad();

  // Reverse pass from a scalar. Accumulates into leaf grads (no implicit
  // zeroing), so per-sequence backward calls sum deterministically in call
  // order.
  void backward() const;

  // Constant copy of the values, cut off from the tape.
  Tensor detach() const;

  detail::TapeNode* node() const { return n_.get(); }
  const detail::TapeNodePtr& node_ptr() const { return n_; }

 private:
  explicit Tensor(detail::TapeNodePtr n) : n_(std::move(n)) {}
  friend Tensor make_op_result(Shape shape, std::vector<double> val, DType dt,
                               std::vector<detail::TapeNodePtr> parents,
                               std::function<void(detail::TapeNode&)> bp);
  detail::TapeNodePtr n_;
};

std::string shape_str(const Shape& s);

// ---------------------------------------------------------------------------
// Primitive ops. All validate shapes and throw DimensionError naming both
// operands on mismatch. Gradients follow the usual rules; see tensor.cpp.
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);     // [m×k]·[k×n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // a · bᵀ, b is [n×k]
Tensor transpose(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // Hadamard
Tensor smul(const Tensor& s, const Tensor& x);  // scalar tensor × tensor
Tensor scale(const Tensor& x, double c);
Tensor add_const(const Tensor& x, double c);
Tensor mul_rowvec(const Tensor& x, const Tensor& v);  // [m×n] ⊙ v[n] per row
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor silu(const Tensor& x);  // x·sigmoid(x)
// Hard clip; gradient passes only inside [lo, hi] (no straight-through).
Tensor clip(const Tensor& x, double lo, double hi);
Tensor minimum(const Tensor& a, const Tensor& b);  // ties take a's gradient
Tensor sum(const Tensor& x);                       // scalar
Tensor mean(const Tensor& x);                      // scalar

// Row-wise softmax of (scale·x) with per-row max subtraction. With
// causal=true (square input) row r only sees columns 0..r; masked entries
// are exactly 0 with zero gradient.
Tensor softmax_rows(const Tensor& x, double scale, bool causal = false);
Tensor log_softmax_rows(const Tensor& x);
// x / sqrt(mean(x²) + eps) per row; scale-only normalization, no gain.
Tensor rms_norm_rows(const Tensor& x, double eps = 1e-6);

Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor slice_cols(const Tensor& x, size_t c0, size_t c1);
Tensor slice_rows(const Tensor& x, size_t r0, size_t r1);
Tensor stack_rows(std::span<const Tensor> parts);  // concat along rows

// Row lookup (embedding): out[i] = table[ids[i]], grads scatter into table.
Tensor embedding_rows(const Tensor& table, std::span<const int> ids);
// out[i] = x[i, idx[i]]; 1-D result.
Tensor gather_cols(const Tensor& x, std::span<const int> idx);

// Rotary position transform. Each row r of x is treated as consecutive
// head blocks of `head_dim` (even); pair i inside a block rotates by angle
// position·base^(−2i/head_dim) with position = first_pos + r.
Tensor rope_rows(const Tensor& x, size_t head_dim, size_t first_pos,
                 double base);
// Single-position form over the whole last dimension.
Tensor rope_apply(const Tensor& x, size_t position, double base);

}  // namespace toylm
