#include "toylm/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <unordered_set>

namespace toylm {

namespace {

std::atomic<uint64_t> g_seq{1};

size_t shape_numel(const Shape& s) {
  size_t n = 1;
  for (const size_t e : s) {
    if (e == 0) throw DimensionError("tensor extents must be positive");
    n *= e;
  }
  return n;
}

void quantize_f32(std::vector<double>& v) {
  for (double& x : v) x = static_cast<double>(static_cast<float>(x));
}

DType join_dtype(const Tensor& a, const Tensor& b) {
  return (a.dtype() == DType::f32 || b.dtype() == DType::f32) ? DType::f32
                                                              : DType::f64;
}

void accum(detail::TapeNode& n, size_t i, double v) {
  n.ensure_grad();
  n.grad[i] += v;
}

void check_defined(const Tensor& t, const char* op) {
  if (!t.defined())
    throw ContractError(std::string(op) + ": undefined tensor operand");
}

void check_2d(const Tensor& t, const char* op) {
  if (t.ndim() != 2)
    throw DimensionError(std::string(op) + ": expected 2-D tensor, got " +
                         shape_str(t.shape()));
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

Tensor make_op_result(Shape shape, std::vector<double> val, DType dt,
                      std::vector<detail::TapeNodePtr> parents,
                      std::function<void(detail::TapeNode&)> bp) {
  auto node = std::make_shared<detail::TapeNode>();
  node->shape = std::move(shape);
  node->val = std::move(val);
  node->dtype = dt;
  if (dt == DType::f32) quantize_f32(node->val);
  node->seq = g_seq.fetch_add(1, std::memory_order_relaxed);
  bool needs = false;
  for (const auto& p : parents) needs = needs || p->requires_grad;
  if (needs) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backprop = std::move(bp);
  }
  return Tensor(std::move(node));
}

namespace {

Tensor make_leaf(Shape shape, std::vector<double> val, DType dt) {
  return make_op_result(std::move(shape), std::move(val), dt, {}, nullptr);
}

}  // namespace

// --- Tensor basics ----------------------------------------------------------

Tensor Tensor::zeros(Shape shape, DType dt) {
  const size_t n = shape_numel(shape);
  return from_data(std::vector<double>(n, 0.0), std::move(shape), dt);
}

Tensor Tensor::full(Shape shape, double v, DType dt) {
  const size_t n = shape_numel(shape);
  return from_data(std::vector<double>(n, v), std::move(shape), dt);
}

Tensor Tensor::from_data(std::vector<double> data, Shape shape, DType dt) {
  if (data.size() != shape_numel(shape))
    throw DimensionError("from_data: " + std::to_string(data.size()) +
                         " values for shape " + shape_str(shape));
  return make_leaf(std::move(shape), std::move(data), dt);
}

Tensor Tensor::scalar(double v, DType dt) { return from_data({v}, {1}, dt); }

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, DType dt) {
  const size_t n = shape_numel(shape);
  std::vector<double> d(n);
  for (double& x : d) x = rng.normal(0.0, stddev);
  return from_data(std::move(d), std::move(shape), dt);
}

const Shape& Tensor::shape() const {
  if (!n_) throw ContractError("shape() on undefined tensor");
  return n_->shape;
}

size_t Tensor::size() const { return n_ ? n_->val.size() : 0; }

size_t Tensor::rows() const {
  if (ndim() != 2)
    throw DimensionError("rows(): tensor is not 2-D, shape " +
                         shape_str(shape()));
  return shape()[0];
}

size_t Tensor::cols() const {
  if (ndim() != 2)
    throw DimensionError("cols(): tensor is not 2-D, shape " +
                         shape_str(shape()));
  return shape()[1];
}

DType Tensor::dtype() const { return n_ ? n_->dtype : DType::f64; }

double Tensor::at(size_t i) const {
  if (i >= size()) throw DimensionError("at(): index out of range");
  return n_->val[i];
}

double Tensor::at(size_t r, size_t c) const {
  const size_t nc = cols();
  if (r >= rows() || c >= nc) throw DimensionError("at(): index out of range");
  return n_->val[r * nc + c];
}

std::span<const double> Tensor::values() const {
  if (!n_) throw ContractError("values() on undefined tensor");
  return {n_->val.data(), n_->val.size()};
}

double Tensor::scalar_value() const {
  if (size() != 1)
    throw ContractError("scalar_value() on tensor of shape " +
                        shape_str(shape()));
  return n_->val[0];
}

bool Tensor::requires_grad() const { return n_ && n_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool v) {
  if (!n_) throw ContractError("set_requires_grad on undefined tensor");
  if (n_->backprop && !v)
    throw ContractError("cannot clear requires_grad on a non-leaf tensor");
  n_->requires_grad = v;
  return *this;
}

std::span<const double> Tensor::grad() const {
  if (!n_) throw ContractError("grad() on undefined tensor");
  n_->ensure_grad();
  return {n_->grad.data(), n_->grad.size()};
}

void Tensor::zero_grad() {
  if (!n_) return;
  n_->grad.assign(n_->val.size(), 0.0);
}

std::span<double> Tensor::mutable_values() {
  if (!n_) throw ContractError("mutable_values() on undefined tensor");
  if (n_->backprop)
    throw ContractError("mutable_values(): in-place writes are leaf-only");
  return {n_->val.data(), n_->val.size()};
}

std::span<double> Tensor::mutable_grad() {
  if (!n_) throw ContractError("mutable_grad() on undefined tensor");
  n_->ensure_grad();
  return {n_->grad.data(), n_->grad.size()};
}

Tensor Tensor::detach() const {
  if (!n_) throw ContractError("detach() on undefined tensor");
  return make_leaf(n_->shape, n_->val, n_->dtype);
}

void Tensor::backward() const {
  if (!n_) throw ContractError("backward() on undefined tensor");
  if (size() != 1)
    throw ContractError("backward(): loss must be scalar, got shape " +
                        shape_str(shape()));
  if (!n_->requires_grad) return;  // constant loss

  // Collect the reachable tape (iterative DFS; graphs can be deep).
  std::vector<detail::TapeNode*> order;
  std::unordered_set<detail::TapeNode*> seen;
  std::vector<detail::TapeNode*> stack{n_.get()};
  seen.insert(n_.get());
  while (!stack.empty()) {
    detail::TapeNode* cur = stack.back();
    stack.pop_back();
    order.push_back(cur);
    for (const auto& p : cur->parents) {
      if (p->requires_grad && seen.insert(p.get()).second)
        stack.push_back(p.get());
    }
  }
  // Creation order is a topological order of the tape; replay newest-first so
  // every node's grad is complete before its backprop runs.
  std::sort(order.begin(), order.end(),
            [](const detail::TapeNode* a, const detail::TapeNode* b) {
              return a->seq > b->seq;
            });

  n_->ensure_grad();
  n_->grad[0] += 1.0;
  for (detail::TapeNode* node : order) {
    if (node->backprop) node->backprop(*node);
  }
}

// --- ops ---------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_defined(a, "matmul");
  check_defined(b, "matmul");
  check_2d(a, "matmul");
  check_2d(b, "matmul");
  const size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k)
    throw DimensionError("matmul: inner extents differ, " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<double> out(m * n, 0.0);
  const auto av = a.values();
  const auto bv = b.values();
  for (size_t i = 0; i < m; ++i)
    for (size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      if (aip == 0.0) continue;
      for (size_t j = 0; j < n; ++j) out[i * n + j] += aip * bv[p * n + j];
    }
  auto pa = a.node_ptr();
  auto pb = b.node_ptr();
  return make_op_result(
      {m, n}, std::move(out), join_dtype(a, b), {pa, pb},
      [pa, pb, m, k, n](detail::TapeNode& self) {
        const auto& g = self.grad;
        if (pa->requires_grad) {
          pa->ensure_grad();
          // dA = dC·Bᵀ
          for (size_t i = 0; i < m; ++i)
            for (size_t p = 0; p < k; ++p) {
              double s = 0.0;
              for (size_t j = 0; j < n; ++j)
                s += g[i * n + j] * pb->val[p * n + j];
              pa->grad[i * k + p] += s;
            }
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          // dB = Aᵀ·dC
          for (size_t p = 0; p < k; ++p)
            for (size_t j = 0; j < n; ++j) {
              double s = 0.0;
              for (size_t i = 0; i < m; ++i)
                s += pa->val[i * k + p] * g[i * n + j];
              pb->grad[p * n + j] += s;
            }
        }
      });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  check_defined(a, "matmul_nt");
  check_defined(b, "matmul_nt");
  check_2d(a, "matmul_nt");
  check_2d(b, "matmul_nt");
  const size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k)
    throw DimensionError("matmul_nt: inner extents differ, " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<double> out(m * n, 0.0);
  const auto av = a.values();
  const auto bv = b.values();
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (size_t p = 0; p < k; ++p) s += av[i * k + p] * bv[j * k + p];
      out[i * n + j] = s;
    }
  auto pa = a.node_ptr();
  auto pb = b.node_ptr();
  return make_op_result(
      {m, n}, std::move(out), join_dtype(a, b), {pa, pb},
      [pa, pb, m, k, n](detail::TapeNode& self) {
        const auto& g = self.grad;
        if (pa->requires_grad) {
          pa->ensure_grad();
          // C = A·Bᵀ ⇒ dA = dC·B
          for (size_t i = 0; i < m; ++i)
            for (size_t j = 0; j < n; ++j) {
              const double gij = g[i * n + j];
              if (gij == 0.0) continue;
              for (size_t p = 0; p < k; ++p)
                pa->grad[i * k + p] += gij * pb->val[j * k + p];
            }
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          // dB = dCᵀ·A
          for (size_t i = 0; i < m; ++i)
            for (size_t j = 0; j < n; ++j) {
              const double gij = g[i * n + j];
              if (gij == 0.0) continue;
              for (size_t p = 0; p < k; ++p)
                pb->grad[j * k + p] += gij * pa->val[i * k + p];
            }
        }
      });
}

Tensor transpose(const Tensor& x) {
  check_defined(x, "transpose");
  check_2d(x, "transpose");
  const size_t m = x.rows(), n = x.cols();
  std::vector<double> out(m * n);
  const auto xv = x.values();
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < n; ++j) out[j * m + i] = xv[i * n + j];
  auto px = x.node_ptr();
  return make_op_result({n, m}, std::move(out), x.dtype(), {px},
                        [px, m, n](detail::TapeNode& self) {
                          px->ensure_grad();
                          for (size_t i = 0; i < m; ++i)
                            for (size_t j = 0; j < n; ++j)
                              px->grad[i * n + j] += self.grad[j * m + i];
                        });
}

Tensor add(const Tensor& a, const Tensor& b) {
  check_defined(a, "add");
  check_defined(b, "add");
  check_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  const auto av = a.values();
  const auto bv = b.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  auto pa = a.node_ptr();
  auto pb = b.node_ptr();
  return make_op_result(a.shape(), std::move(out), join_dtype(a, b), {pa, pb},
                        [pa, pb](detail::TapeNode& self) {
                          if (pa->requires_grad)
                            for (size_t i = 0; i < self.grad.size(); ++i)
                              accum(*pa, i, self.grad[i]);
                          if (pb->requires_grad)
                            for (size_t i = 0; i < self.grad.size(); ++i)
                              accum(*pb, i, self.grad[i]);
                        });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_defined(a, "sub");
  check_defined(b, "sub");
  check_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  const auto av = a.values();
  const auto bv = b.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  auto pa = a.node_ptr();
  auto pb = b.node_ptr();
  return make_op_result(a.shape(), std::move(out), join_dtype(a, b), {pa, pb},
                        [pa, pb](detail::TapeNode& self) {
                          if (pa->requires_grad)
                            for (size_t i = 0; i < self.grad.size(); ++i)
                              accum(*pa, i, self.grad[i]);
                          if (pb->requires_grad)
                            for (size_t i = 0; i < self.grad.size(); ++i)
                              accum(*pb, i, -self.grad[i]);
                        });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_defined(a, "mul");
  check_defined(b, "mul");
  check_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  const auto av = a.values();
  const auto bv = b.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  auto pa = a.node_ptr();
  auto pb = b.node_ptr();
  return make_op_result(a.shape(), std::move(out), join_dtype(a, b), {pa, pb},
                        [pa, pb](detail::TapeNode& self) {
                          for (size_t i = 0; i < self.grad.size(); ++i) {
                            if (pa->requires_grad)
                              accum(*pa, i, self.grad[i] * pb->val[i]);
                            if (pb->requires_grad)
                              accum(*pb, i, self.grad[i] * pa->val[i]);
                          }
                        });
}

Tensor smul(const Tensor& s, const Tensor& x) {
  check_defined(s, "smul");
  check_defined(x, "smul");
  if (s.size() != 1)
    throw DimensionError("smul: first operand must be scalar, got " +
                         shape_str(s.shape()));
  const double sv = s.values()[0];
  std::vector<double> out(x.size());
  const auto xv = x.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] = sv * xv[i];
  auto ps = s.node_ptr();
  auto px = x.node_ptr();
  return make_op_result(x.shape(), std::move(out), join_dtype(s, x), {ps, px},
                        [ps, px](detail::TapeNode& self) {
                          if (ps->requires_grad) {
                            double acc = 0.0;
                            for (size_t i = 0; i < self.grad.size(); ++i)
                              acc += self.grad[i] * px->val[i];
                            accum(*ps, 0, acc);
                          }
                          if (px->requires_grad)
                            for (size_t i = 0; i < self.grad.size(); ++i)
                              accum(*px, i, self.grad[i] * ps->val[0]);
                        });
}

Tensor scale(const Tensor& x, double c) {
  check_defined(x, "scale");
  std::vector<double> out(x.size());
  const auto xv = x.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] = c * xv[i];
  auto px = x.node_ptr();
  return make_op_result(x.shape(), std::move(out), x.dtype(), {px},
                        [px, c](detail::TapeNode& self) {
                          for (size_t i = 0; i < self.grad.size(); ++i)
                            accum(*px, i, c * self.grad[i]);
                        });
}

Tensor add_const(const Tensor& x, double c) {
  check_defined(x, "add_const");
  std::vector<double> out(x.size());
  const auto xv = x.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] = xv[i] + c;
  auto px = x.node_ptr();
  return make_op_result(x.shape(), std::move(out), x.dtype(), {px},
                        [px](detail::TapeNode& self) {
                          for (size_t i = 0; i < self.grad.size(); ++i)
                            accum(*px, i, self.grad[i]);
                        });
}

Tensor mul_rowvec(const Tensor& x, const Tensor& v) {
  check_defined(x, "mul_rowvec");
  check_defined(v, "mul_rowvec");
  check_2d(x, "mul_rowvec");
  if (v.ndim() != 1 || v.size() != x.cols())
    throw DimensionError("mul_rowvec: vector " + shape_str(v.shape()) +
                         " does not match columns of " + shape_str(x.shape()));
  const size_t m = x.rows(), n = x.cols();
  std::vector<double> out(m * n);
  const auto xv = x.values();
  const auto vv = v.values();
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < n; ++j) out[i * n + j] = xv[i * n + j] * vv[j];
  auto px = x.node_ptr();
  auto pv = v.node_ptr();
  return make_op_result(
      {m, n}, std::move(out), join_dtype(x, v), {px, pv},
      [px, pv, m, n](detail::TapeNode& self) {
        if (px->requires_grad) {
          px->ensure_grad();
          for (size_t i = 0; i < m; ++i)
            for (size_t j = 0; j < n; ++j)
              px->grad[i * n + j] += self.grad[i * n + j] * pv->val[j];
        }
        if (pv->requires_grad) {
          pv->ensure_grad();
          for (size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (size_t i = 0; i < m; ++i)
              s += self.grad[i * n + j] * px->val[i * n + j];
            pv->grad[j] += s;
          }
        }
      });
}

Tensor exp(const Tensor& x) {
  check_defined(x, "exp");
  std::vector<double> out(x.size());
  const auto xv = x.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::exp(xv[i]);
  auto px = x.node_ptr();
  return make_op_result(x.shape(), out, x.dtype(), {px},
                        [px, out](detail::TapeNode& self) {
                          for (size_t i = 0; i < self.grad.size(); ++i)
                            accum(*px, i, self.grad[i] * out[i]);
                        });
}

Tensor log(const Tensor& x) {
  check_defined(x, "log");
  std::vector<double> out(x.size());
  const auto xv = x.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::log(xv[i]);
  auto px = x.node_ptr();
  return make_op_result(x.shape(), std::move(out), x.dtype(), {px},
                        [px](detail::TapeNode& self) {
                          for (size_t i = 0; i < self.grad.size(); ++i)
                            accum(*px, i, self.grad[i] / px->val[i]);
                        });
}

Tensor silu(const Tensor& x) {
  check_defined(x, "silu");
  std::vector<double> out(x.size());
  const auto xv = x.values();
  for (size_t i = 0; i < out.size(); ++i) {
    const double s = 1.0 / (1.0 + std::exp(-xv[i]));
    out[i] = xv[i] * s;
  }
  auto px = x.node_ptr();
  return make_op_result(
      x.shape(), std::move(out), x.dtype(), {px},
      [px](detail::TapeNode& self) {
        for (size_t i = 0; i < self.grad.size(); ++i) {
          const double s = 1.0 / (1.0 + std::exp(-px->val[i]));
          accum(*px, i, self.grad[i] * (s + px->val[i] * s * (1.0 - s)));
        }
      });
}

Tensor clip(const Tensor& x, double lo, double hi) {
  check_defined(x, "clip");
  if (lo > hi) throw ContractError("clip: lo > hi");
  std::vector<double> out(x.size());
  const auto xv = x.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(xv[i], lo, hi);
  auto px = x.node_ptr();
  return make_op_result(x.shape(), std::move(out), x.dtype(), {px},
                        [px, lo, hi](detail::TapeNode& self) {
                          for (size_t i = 0; i < self.grad.size(); ++i) {
                            const double v = px->val[i];
                            if (v >= lo && v <= hi)
                              accum(*px, i, self.grad[i]);
                          }
                        });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  check_defined(a, "minimum");
  check_defined(b, "minimum");
  check_same_shape(a, b, "minimum");
  std::vector<double> out(a.size());
  const auto av = a.values();
  const auto bv = b.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::min(av[i], bv[i]);
  auto pa = a.node_ptr();
  auto pb = b.node_ptr();
  return make_op_result(a.shape(), std::move(out), join_dtype(a, b), {pa, pb},
                        [pa, pb](detail::TapeNode& self) {
                          for (size_t i = 0; i < self.grad.size(); ++i) {
                            if (pa->val[i] <= pb->val[i]) {
                              if (pa->requires_grad)
                                accum(*pa, i, self.grad[i]);
                            } else if (pb->requires_grad) {
                              accum(*pb, i, self.grad[i]);
                            }
                          }
                        });
}

Tensor sum(const Tensor& x) {
  check_defined(x, "sum");
  double s = 0.0;
  for (const double v : x.values()) s += v;
  auto px = x.node_ptr();
  return make_op_result({1}, {s}, x.dtype(), {px},
                        [px](detail::TapeNode& self) {
                          for (size_t i = 0; i < px->val.size(); ++i)
                            accum(*px, i, self.grad[0]);
                        });
}

Tensor mean(const Tensor& x) {
  check_defined(x, "mean");
  double s = 0.0;
  for (const double v : x.values()) s += v;
  const double n = static_cast<double>(x.size());
  auto px = x.node_ptr();
  return make_op_result({1}, {s / n}, x.dtype(), {px},
                        [px, n](detail::TapeNode& self) {
                          for (size_t i = 0; i < px->val.size(); ++i)
                            accum(*px, i, self.grad[0] / n);
                        });
}

Tensor softmax_rows(const Tensor& x, double sc, bool causal) {
  check_defined(x, "softmax_rows");
  check_2d(x, "softmax_rows");
  if (!(sc > 0.0)) throw ContractError("softmax_rows: scale must be > 0");
  const size_t m = x.rows(), n = x.cols();
  if (causal && m != n)
    throw DimensionError("softmax_rows: causal mask needs a square input, "
                         "got " +
                         shape_str(x.shape()));
  const auto xv = x.values();
  for (const double v : xv)
    if (!std::isfinite(v))
      throw NumericError("softmax_rows: non-finite input");
  std::vector<double> out(m * n, 0.0);
  for (size_t r = 0; r < m; ++r) {
    const size_t lim = causal ? r + 1 : n;
    double mx = -1e300;
    for (size_t j = 0; j < lim; ++j) mx = std::max(mx, sc * xv[r * n + j]);
    double denom = 0.0;
    for (size_t j = 0; j < lim; ++j) {
      const double e = std::exp(sc * xv[r * n + j] - mx);
      out[r * n + j] = e;
      denom += e;
    }
    for (size_t j = 0; j < lim; ++j) out[r * n + j] /= denom;
  }
  auto px = x.node_ptr();
  return make_op_result(
      {m, n}, out, x.dtype(), {px},
      [px, out, m, n, sc, causal](detail::TapeNode& self) {
        px->ensure_grad();
        for (size_t r = 0; r < m; ++r) {
          const size_t lim = causal ? r + 1 : n;
          double dot = 0.0;
          for (size_t j = 0; j < lim; ++j)
            dot += self.grad[r * n + j] * out[r * n + j];
          for (size_t j = 0; j < lim; ++j)
            px->grad[r * n + j] +=
                sc * out[r * n + j] * (self.grad[r * n + j] - dot);
        }
      });
}

Tensor log_softmax_rows(const Tensor& x) {
  check_defined(x, "log_softmax_rows");
  check_2d(x, "log_softmax_rows");
  const size_t m = x.rows(), n = x.cols();
  const auto xv = x.values();
  for (const double v : xv)
    if (!std::isfinite(v))
      throw NumericError("log_softmax_rows: non-finite input");
  std::vector<double> out(m * n);
  std::vector<double> soft(m * n);
  for (size_t r = 0; r < m; ++r) {
    double mx = xv[r * n];
    for (size_t j = 1; j < n; ++j) mx = std::max(mx, xv[r * n + j]);
    double denom = 0.0;
    for (size_t j = 0; j < n; ++j) denom += std::exp(xv[r * n + j] - mx);
    const double lse = mx + std::log(denom);
    for (size_t j = 0; j < n; ++j) {
      out[r * n + j] = xv[r * n + j] - lse;
      soft[r * n + j] = std::exp(out[r * n + j]);
    }
  }
  auto px = x.node_ptr();
  return make_op_result(
      {m, n}, std::move(out), x.dtype(), {px},
      [px, soft, m, n](detail::TapeNode& self) {
        px->ensure_grad();
        for (size_t r = 0; r < m; ++r) {
          double gsum = 0.0;
          for (size_t j = 0; j < n; ++j) gsum += self.grad[r * n + j];
          for (size_t j = 0; j < n; ++j)
            px->grad[r * n + j] +=
                self.grad[r * n + j] - soft[r * n + j] * gsum;
        }
      });
}

Tensor rms_norm_rows(const Tensor& x, double eps) {
  check_defined(x, "rms_norm_rows");
  check_2d(x, "rms_norm_rows");
  const size_t m = x.rows(), n = x.cols();
  const auto xv = x.values();
  std::vector<double> out(m * n);
  std::vector<double> inv_r(m);
  for (size_t r = 0; r < m; ++r) {
    double ss = 0.0;
    for (size_t j = 0; j < n; ++j) ss += xv[r * n + j] * xv[r * n + j];
    const double rr = std::sqrt(ss / static_cast<double>(n) + eps);
    inv_r[r] = 1.0 / rr;
    for (size_t j = 0; j < n; ++j) out[r * n + j] = xv[r * n + j] * inv_r[r];
  }
  auto px = x.node_ptr();
  return make_op_result(
      {m, n}, std::move(out), x.dtype(), {px},
      [px, inv_r, m, n](detail::TapeNode& self) {
        px->ensure_grad();
        const double dn = static_cast<double>(n);
        for (size_t r = 0; r < m; ++r) {
          double gx = 0.0;
          for (size_t j = 0; j < n; ++j)
            gx += self.grad[r * n + j] * px->val[r * n + j];
          const double ir = inv_r[r];
          const double c = gx * ir * ir * ir / dn;
          for (size_t j = 0; j < n; ++j)
            px->grad[r * n + j] +=
                self.grad[r * n + j] * ir - c * px->val[r * n + j];
        }
      });
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  check_defined(a, "concat_cols");
  check_defined(b, "concat_cols");
  check_2d(a, "concat_cols");
  check_2d(b, "concat_cols");
  if (a.rows() != b.rows())
    throw DimensionError("concat_cols: row mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  const size_t m = a.rows(), na = a.cols(), nb = b.cols();
  std::vector<double> out(m * (na + nb));
  const auto av = a.values();
  const auto bv = b.values();
  for (size_t i = 0; i < m; ++i) {
    for (size_t j = 0; j < na; ++j) out[i * (na + nb) + j] = av[i * na + j];
    for (size_t j = 0; j < nb; ++j)
      out[i * (na + nb) + na + j] = bv[i * nb + j];
  }
  auto pa = a.node_ptr();
  auto pb = b.node_ptr();
  return make_op_result(
      {m, na + nb}, std::move(out), join_dtype(a, b), {pa, pb},
      [pa, pb, m, na, nb](detail::TapeNode& self) {
        if (pa->requires_grad) {
          pa->ensure_grad();
          for (size_t i = 0; i < m; ++i)
            for (size_t j = 0; j < na; ++j)
              pa->grad[i * na + j] += self.grad[i * (na + nb) + j];
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          for (size_t i = 0; i < m; ++i)
            for (size_t j = 0; j < nb; ++j)
              pb->grad[i * nb + j] += self.grad[i * (na + nb) + na + j];
        }
      });
}

Tensor slice_cols(const Tensor& x, size_t c0, size_t c1) {
  check_defined(x, "slice_cols");
  check_2d(x, "slice_cols");
  const size_t m = x.rows(), n = x.cols();
  if (c0 >= c1 || c1 > n)
    throw DimensionError("slice_cols: range [" + std::to_string(c0) + "," +
                         std::to_string(c1) + ") out of " +
                         shape_str(x.shape()));
  const size_t w = c1 - c0;
  std::vector<double> out(m * w);
  const auto xv = x.values();
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < w; ++j) out[i * w + j] = xv[i * n + c0 + j];
  auto px = x.node_ptr();
  return make_op_result({m, w}, std::move(out), x.dtype(), {px},
                        [px, m, n, c0, w](detail::TapeNode& self) {
                          px->ensure_grad();
                          for (size_t i = 0; i < m; ++i)
                            for (size_t j = 0; j < w; ++j)
                              px->grad[i * n + c0 + j] += self.grad[i * w + j];
                        });
}

Tensor slice_rows(const Tensor& x, size_t r0, size_t r1) {
  check_defined(x, "slice_rows");
  check_2d(x, "slice_rows");
  const size_t m = x.rows(), n = x.cols();
  if (r0 >= r1 || r1 > m)
    throw DimensionError("slice_rows: range [" + std::to_string(r0) + "," +
                         std::to_string(r1) + ") out of " +
                         shape_str(x.shape()));
  const size_t h = r1 - r0;
  std::vector<double> out(h * n);
  const auto xv = x.values();
  std::copy(xv.begin() + r0 * n, xv.begin() + r1 * n, out.begin());
  auto px = x.node_ptr();
  return make_op_result({h, n}, std::move(out), x.dtype(), {px},
                        [px, n, r0, h](detail::TapeNode& self) {
                          px->ensure_grad();
                          for (size_t i = 0; i < h * n; ++i)
                            px->grad[r0 * n + i] += self.grad[i];
                        });
}

Tensor stack_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ContractError("stack_rows: no parts");
  size_t m = 0;
  const size_t n = parts[0].cols();
  DType dt = DType::f64;
  for (const Tensor& p : parts) {
    check_2d(p, "stack_rows");
    if (p.cols() != n)
      throw DimensionError("stack_rows: column mismatch " +
                           shape_str(p.shape()) + " vs " +
                           shape_str(parts[0].shape()));
    if (p.dtype() == DType::f32) dt = DType::f32;
    m += p.rows();
  }
  std::vector<double> out;
  out.reserve(m * n);
  std::vector<detail::TapeNodePtr> parents;
  parents.reserve(parts.size());
  std::vector<size_t> row_of(parts.size());
  size_t row = 0;
  for (size_t i = 0; i < parts.size(); ++i) {
    const auto v = parts[i].values();
    out.insert(out.end(), v.begin(), v.end());
    parents.push_back(parts[i].node_ptr());
    row_of[i] = row;
    row += parts[i].rows();
  }
  return make_op_result(
      {m, n}, std::move(out), dt, std::move(parents),
      [row_of, n](detail::TapeNode& self) {
        for (size_t i = 0; i < self.parents.size(); ++i) {
          auto& p = *self.parents[i];
          if (!p.requires_grad) continue;
          p.ensure_grad();
          const size_t base = row_of[i] * n;
          for (size_t j = 0; j < p.val.size(); ++j)
            p.grad[j] += self.grad[base + j];
        }
      });
}

Tensor embedding_rows(const Tensor& table, std::span<const int> ids) {
  check_defined(table, "embedding_rows");
  check_2d(table, "embedding_rows");
  const size_t v = table.rows(), d = table.cols();
  std::vector<double> out(ids.size() * d);
  const auto tv = table.values();
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<size_t>(ids[i]) >= v)
      throw ContractError("embedding_rows: id " + std::to_string(ids[i]) +
                          " out of vocabulary " + std::to_string(v));
    std::copy(tv.begin() + ids[i] * d, tv.begin() + (ids[i] + 1) * d,
              out.begin() + i * d);
  }
  auto pt = table.node_ptr();
  std::vector<int> idv(ids.begin(), ids.end());
  return make_op_result({ids.size(), d}, std::move(out), table.dtype(), {pt},
                        [pt, idv, d](detail::TapeNode& self) {
                          pt->ensure_grad();
                          for (size_t i = 0; i < idv.size(); ++i)
                            for (size_t j = 0; j < d; ++j)
                              pt->grad[idv[i] * d + j] +=
                                  self.grad[i * d + j];
                        });
}

Tensor gather_cols(const Tensor& x, std::span<const int> idx) {
  check_defined(x, "gather_cols");
  check_2d(x, "gather_cols");
  const size_t m = x.rows(), n = x.cols();
  if (idx.size() != m)
    throw DimensionError("gather_cols: need one index per row, got " +
                         std::to_string(idx.size()) + " for " +
                         shape_str(x.shape()));
  std::vector<double> out(m);
  const auto xv = x.values();
  for (size_t i = 0; i < m; ++i) {
    if (idx[i] < 0 || static_cast<size_t>(idx[i]) >= n)
      throw ContractError("gather_cols: index out of range");
    out[i] = xv[i * n + idx[i]];
  }
  auto px = x.node_ptr();
  std::vector<int> idv(idx.begin(), idx.end());
  return make_op_result({m}, std::move(out), x.dtype(), {px},
                        [px, idv, n](detail::TapeNode& self) {
                          px->ensure_grad();
                          for (size_t i = 0; i < idv.size(); ++i)
                            px->grad[i * n + idv[i]] += self.grad[i];
                        });
}

Tensor rope_rows(const Tensor& x, size_t head_dim, size_t first_pos,
                 double base) {
  check_defined(x, "rope_rows");
  check_2d(x, "rope_rows");
  const size_t m = x.rows(), n = x.cols();
  if (head_dim == 0 || head_dim % 2 != 0)
    throw DimensionError("rope_rows: head_dim must be even and positive, got " +
                         std::to_string(head_dim));
  if (n % head_dim != 0)
    throw DimensionError("rope_rows: columns of " + shape_str(x.shape()) +
                         " not a multiple of head_dim " +
                         std::to_string(head_dim));
  const size_t pairs = head_dim / 2;
  std::vector<double> freqs(pairs);
  for (size_t i = 0; i < pairs; ++i)
    freqs[i] = std::pow(base, -2.0 * static_cast<double>(i) /
                                  static_cast<double>(head_dim));
  const auto xv = x.values();
  std::vector<double> out(m * n);
  for (size_t r = 0; r < m; ++r) {
    const double pos = static_cast<double>(first_pos + r);
    for (size_t h = 0; h < n / head_dim; ++h)
      for (size_t i = 0; i < pairs; ++i) {
        const double a = pos * freqs[i];
        const double c = std::cos(a), s = std::sin(a);
        const size_t k = r * n + h * head_dim + 2 * i;
        out[k] = c * xv[k] - s * xv[k + 1];
        out[k + 1] = s * xv[k] + c * xv[k + 1];
      }
  }
  auto px = x.node_ptr();
  return make_op_result(
      {m, n}, std::move(out), x.dtype(), {px},
      [px, m, n, head_dim, pairs, first_pos, freqs](detail::TapeNode& self) {
        px->ensure_grad();
        for (size_t r = 0; r < m; ++r) {
          const double pos = static_cast<double>(first_pos + r);
          for (size_t h = 0; h < n / head_dim; ++h)
            for (size_t i = 0; i < pairs; ++i) {
              const double a = pos * freqs[i];
              const double c = std::cos(a), s = std::sin(a);
              const size_t k = r * n + h * head_dim + 2 * i;
              // transpose of the rotation
              px->grad[k] += c * self.grad[k] + s * self.grad[k + 1];
              px->grad[k + 1] += -s * self.grad[k] + c * self.grad[k + 1];
            }
        }
      });
}

Tensor rope_apply(const Tensor& x, size_t position, double base) {
  check_defined(x, "rope_apply");
  const size_t n = x.shape().back();
  if (n % 2 != 0)
    throw DimensionError("rope_apply: last extent must be even, got " +
                         shape_str(x.shape()));
  if (x.ndim() == 1) {
    auto px = x.node_ptr();
    const size_t pairs = n / 2;
    std::vector<double> out(n);
    const auto xv = x.values();
    for (size_t i = 0; i < pairs; ++i) {
      const double f = std::pow(base, -2.0 * static_cast<double>(i) /
                                          static_cast<double>(n));
      const double a = static_cast<double>(position) * f;
      const double c = std::cos(a), s = std::sin(a);
      out[2 * i] = c * xv[2 * i] - s * xv[2 * i + 1];
      out[2 * i + 1] = s * xv[2 * i] + c * xv[2 * i + 1];
    }
    return make_op_result(
        x.shape(), std::move(out), x.dtype(), {px},
        [px, pairs, n, position, base](detail::TapeNode& self) {
          px->ensure_grad();
          for (size_t i = 0; i < pairs; ++i) {
            const double f = std::pow(base, -2.0 * static_cast<double>(i) /
                                                static_cast<double>(n));
            const double a = static_cast<double>(position) * f;
            const double c = std::cos(a), s = std::sin(a);
            px->grad[2 * i] +=
                c * self.grad[2 * i] + s * self.grad[2 * i + 1];
            px->grad[2 * i + 1] +=
                -s * self.grad[2 * i] + c * self.grad[2 * i + 1];
          }
        });
  }
  check_2d(x, "rope_apply");
  // every row gets the same position: use rope_rows on each row separately
  const size_t m = x.rows();
  std::vector<Tensor> rows;
  rows.reserve(m);
  for (size_t r = 0; r < m; ++r)
    rows.push_back(rope_rows(slice_rows(x, r, r + 1), n, position, base));
  return stack_rows(rows);
}

}  // namespace toylm
