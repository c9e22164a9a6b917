#include "gml/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "gml/error.hpp"

namespace gml {

using detail::TensorImpl;
using ImplPtr = std::shared_ptr<TensorImpl>;

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

// ---- Tensor ---------------------------------------------------------------

Tensor::Tensor() : Tensor(Shape{}, std::vector<double>{0.0}) {}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : impl_(std::make_shared<TensorImpl>()) {
  for (auto d : shape) {
    if (d == 0) throw ValidationError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw ValidationError("tensor shape " + shape_str(shape) + " does not match " +
                          std::to_string(data.size()) + " values");
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape) {
  auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0));
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, {value}); }

Tensor Tensor::parameter(Shape shape, std::vector<double> data) {
  return Tensor(std::move(shape), std::move(data), true);
}

const Shape& Tensor::shape() const { return impl_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) throw ValidationError("axis out of range for shape " + shape_str(shape()));
  return shape()[axis];
}

std::size_t Tensor::numel() const { return impl_->data.size(); }
std::span<const double> Tensor::data() const { return impl_->data; }

double Tensor::item() const {
  if (numel() != 1) throw ValidationError("item() needs a single value, shape is " + shape_str(shape()));
  return impl_->data[0];
}

double Tensor::at(std::size_t i) const { return impl_->data.at(i); }

double Tensor::at(std::size_t row, std::size_t col) const {
  if (rank() != 2) throw ValidationError("at(row, col) needs rank 2, shape is " + shape_str(shape()));
  return impl_->data.at(row * shape()[1] + col);
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }
bool Tensor::is_leaf() const { return impl_->is_leaf; }

std::vector<double> Tensor::grad() const {
  if (impl_->grad.empty()) return std::vector<double>(numel(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() { impl_->grad.clear(); }

std::span<double> Tensor::mutable_data() {
  if (!impl_->is_leaf) throw std::logic_error("mutable_data() on a non-leaf tensor");
  return impl_->data;
}

Tensor Tensor::detach() const { return Tensor(shape(), impl_->data); }

// ---- Tape -----------------------------------------------------------------

namespace {

std::atomic<std::uint64_t> next_tape_id{1};
thread_local Tape* current_tape = nullptr;

}  // namespace

Tape::Tape() : id_(next_tape_id.fetch_add(1)) {}

void Tape::record(ImplPtr out, std::vector<ImplPtr> parents, BackwardFn fn) {
  if (consumed_) throw std::logic_error("recording on a tape after backward()");
  out->tape_id = id_;
  out->is_leaf = false;
  out->requires_grad = true;
  nodes_.push_back(Node{std::move(out), std::move(parents), std::move(fn)});
}

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ValidationError("backward() needs a scalar loss, shape is " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;  // constant loss: every gradient stays zero
  const auto& root = loss.impl();
  if (root->is_leaf) {
    root->accumulate(0, 1.0);
    return;
  }
  if (root->tape_id != id_) throw ValidationError("backward(): loss was not recorded on this tape");
  if (consumed_) throw std::logic_error("backward() called twice on one tape");
  consumed_ = true;

  root->accumulate(0, 1.0);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->out->grad.empty()) continue;
    it->fn(*it->out);
  }
}

std::vector<std::size_t> Tape::parent_nodes(std::size_t i) const {
  std::unordered_map<const TensorImpl*, std::size_t> index;
  for (std::size_t n = 0; n < nodes_.size(); ++n) index[nodes_[n].out.get()] = n;
  std::vector<std::size_t> result;
  for (const auto& p : nodes_.at(i).parents) {
    auto found = index.find(p.get());
    if (found != index.end()) result.push_back(found->second);
  }
  return result;
}

TapeScope::TapeScope(Tape* tape) : previous_(current_tape) { current_tape = tape; }
TapeScope::~TapeScope() { current_tape = previous_; }

Tape* active_tape() { return current_tape; }

void backward(const Tensor& loss) {
  Tape* tape = active_tape();
  if (tape == nullptr) {
    if (loss.requires_grad() && !loss.is_leaf()) throw ValidationError("backward(): no active tape");
    if (loss.numel() != 1) throw ValidationError("backward() needs a scalar loss");
    if (loss.requires_grad()) loss.impl()->accumulate(0, 1.0);
    return;
  }
  tape->backward(loss);
}

// ---- op helpers -----------------------------------------------------------

namespace {

Tape* tracking_tape(std::initializer_list<const Tensor*> inputs) {
  Tape* tape = active_tape();
  if (tape == nullptr) return nullptr;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return tape;
  }
  return nullptr;
}

// Wraps computed values; records `fn` when any parent is tracked.
Tensor finish(Shape shape, std::vector<double> data, std::initializer_list<const Tensor*> inputs,
              Tape::BackwardFn fn) {
  Tensor out(std::move(shape), std::move(data));
  if (Tape* tape = tracking_tape(inputs)) {
    std::vector<ImplPtr> parents;
    for (const Tensor* t : inputs) parents.push_back(t->impl());
    tape->record(out.impl(), std::move(parents), std::move(fn));
  }
  return out;
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ValidationError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
  }
}

void require_rank(const char* op, const Tensor& a, std::size_t rank) {
  if (a.rank() != rank) {
    throw ValidationError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                          shape_str(a.shape()));
  }
}

}  // namespace

// ---- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  ImplPtr pa = a.impl(), pb = b.impl();
  return finish(a.shape(), std::move(out), {&a, &b}, [pa, pb](const TensorImpl& o) {
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      if (pa->requires_grad) pa->accumulate(i, o.grad[i]);
      if (pb->requires_grad) pb->accumulate(i, o.grad[i]);
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  ImplPtr pa = a.impl(), pb = b.impl();
  return finish(a.shape(), std::move(out), {&a, &b}, [pa, pb](const TensorImpl& o) {
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      if (pa->requires_grad) pa->accumulate(i, o.grad[i]);
      if (pb->requires_grad) pb->accumulate(i, -o.grad[i]);
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  ImplPtr pa = a.impl(), pb = b.impl();
  return finish(a.shape(), std::move(out), {&a, &b}, [pa, pb](const TensorImpl& o) {
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      if (pa->requires_grad) pa->accumulate(i, o.grad[i] * pb->data[i]);
      if (pb->requires_grad) pb->accumulate(i, o.grad[i] * pa->data[i]);
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * factor;
  ImplPtr pa = a.impl();
  return finish(a.shape(), std::move(out), {&a}, [pa, factor](const TensorImpl& o) {
    for (std::size_t i = 0; i < o.grad.size(); ++i) pa->accumulate(i, o.grad[i] * factor);
  });
}

Tensor add_constant(const Tensor& a, double offset) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + offset;
  ImplPtr pa = a.impl();
  return finish(a.shape(), std::move(out), {&a}, [pa](const TensorImpl& o) {
    for (std::size_t i = 0; i < o.grad.size(); ++i) pa->accumulate(i, o.grad[i]);
  });
}

Tensor mul_scalar(const Tensor& a, const Tensor& s) {
  if (s.numel() != 1) {
    throw ValidationError("mul_scalar: shape mismatch " + shape_str(a.shape()) + " vs " +
                          shape_str(s.shape()) + " (expected a single value)");
  }
  const double factor = s.item();
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * factor;
  ImplPtr pa = a.impl(), ps = s.impl();
  return finish(a.shape(), std::move(out), {&a, &s}, [pa, ps, factor](const TensorImpl& o) {
    double gs = 0.0;
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      if (pa->requires_grad) pa->accumulate(i, o.grad[i] * factor);
      gs += o.grad[i] * pa->data[i];
    }
    if (ps->requires_grad) ps->accumulate(0, gs);
  });
}

Tensor add_rowwise(const Tensor& x, const Tensor& v) {
  require_rank("add_rowwise", x, 2);
  if (v.rank() != 1 || v.dim(0) != x.dim(1)) {
    throw ValidationError("add_rowwise: shape mismatch " + shape_str(x.shape()) + " vs " +
                          shape_str(v.shape()));
  }
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = x.data()[r * cols + c] + v.data()[c];
  ImplPtr px = x.impl(), pv = v.impl();
  return finish(x.shape(), std::move(out), {&x, &v}, [px, pv, rows, cols](const TensorImpl& o) {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) {
        const double g = o.grad[r * cols + c];
        if (px->requires_grad) px->accumulate(r * cols + c, g);
        if (pv->requires_grad) pv->accumulate(c, g);
      }
  });
}

Tensor add_colwise(const Tensor& x, const Tensor& v) {
  require_rank("add_colwise", x, 2);
  if (v.rank() != 1 || v.dim(0) != x.dim(0)) {
    throw ValidationError("add_colwise: shape mismatch " + shape_str(x.shape()) + " vs " +
                          shape_str(v.shape()));
  }
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = x.data()[r * cols + c] + v.data()[r];
  ImplPtr px = x.impl(), pv = v.impl();
  return finish(x.shape(), std::move(out), {&x, &v}, [px, pv, rows, cols](const TensorImpl& o) {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) {
        const double g = o.grad[r * cols + c];
        if (px->requires_grad) px->accumulate(r * cols + c, g);
        if (pv->requires_grad) pv->accumulate(r, g);
      }
  });
}

Tensor exp(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.data()[i]);
  ImplPtr pa = a.impl();
  return finish(a.shape(), std::move(out), {&a}, [pa](const TensorImpl& o) {
    for (std::size_t i = 0; i < o.grad.size(); ++i) pa->accumulate(i, o.grad[i] * o.data[i]);
  });
}

Tensor log(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!(a.data()[i] > 0.0)) throw NumericalError("log: non-positive input");
    out[i] = std::log(a.data()[i]);
  }
  ImplPtr pa = a.impl();
  return finish(a.shape(), std::move(out), {&a}, [pa](const TensorImpl& o) {
    for (std::size_t i = 0; i < o.grad.size(); ++i) pa->accumulate(i, o.grad[i] / pa->data[i]);
  });
}

Tensor relu(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(0.0, a.data()[i]);
  ImplPtr pa = a.impl();
  return finish(a.shape(), std::move(out), {&a}, [pa](const TensorImpl& o) {
    for (std::size_t i = 0; i < o.grad.size(); ++i)
      if (pa->data[i] > 0.0) pa->accumulate(i, o.grad[i]);
  });
}

// ---- linear algebra and shape ---------------------------------------------

namespace {

// out[m,n] += a[m,k] * b[k,n] (row-major, i-k-j order)
void gemm_acc(const double* a, const double* b, double* out, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = out + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ValidationError("matmul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  gemm_acc(a.data().data(), b.data().data(), out.data(), m, k, n);
  ImplPtr pa = a.impl(), pb = b.impl();
  return finish({m, n}, std::move(out), {&a, &b}, [pa, pb, m, k, n](const TensorImpl& o) {
    const double* g = o.grad.data();
    if (pa->requires_grad) {
      // dA[i,p] = sum_j g[i,j] * B[p,j]
      if (pa->grad.empty()) pa->grad.assign(m * k, 0.0);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          const double* brow = pb->data.data() + p * n;
          const double* grow = g + i * n;
          for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
          pa->grad[i * k + p] += s;
        }
    }
    if (pb->requires_grad) {
      // dB[p,j] = sum_i A[i,p] * g[i,j]
      if (pb->grad.empty()) pb->grad.assign(k * n, 0.0);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double av = pa->data[i * k + p];
          if (av == 0.0) continue;
          double* brow = pb->grad.data() + p * n;
          const double* grow = g + i * n;
          for (std::size_t j = 0; j < n; ++j) brow[j] += av * grow[j];
        }
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_rank("transpose", a, 2);
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.data()[i * n + j];
  ImplPtr pa = a.impl();
  return finish({n, m}, std::move(out), {&a}, [pa, m, n](const TensorImpl& o) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) pa->accumulate(i * n + j, o.grad[j * m + i]);
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ValidationError("reshape: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  ImplPtr pa = a.impl();
  return finish(std::move(shape), std::move(out), {&a}, [pa](const TensorImpl& o) {
    for (std::size_t i = 0; i < o.grad.size(); ++i) pa->accumulate(i, o.grad[i]);
  });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  ImplPtr pa = a.impl();
  return finish({}, {s}, {&a}, [pa](const TensorImpl& o) {
    for (std::size_t i = 0; i < pa->data.size(); ++i) pa->accumulate(i, o.grad[0]);
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor reduce_max(const Tensor& a) {
  auto it = std::max_element(a.data().begin(), a.data().end());
  const std::size_t arg = static_cast<std::size_t>(it - a.data().begin());
  ImplPtr pa = a.impl();
  return finish({}, {*it}, {&a}, [pa, arg](const TensorImpl& o) { pa->accumulate(arg, o.grad[0]); });
}

Tensor concat(std::span<const Tensor> parts) {
  if (parts.empty()) throw ValidationError("concat: no inputs");
  Shape trailing(parts[0].shape().begin() + (parts[0].rank() ? 1 : 0), parts[0].shape().end());
  if (parts[0].rank() == 0) throw ValidationError("concat: scalars have no axis 0");
  std::size_t rows = 0;
  std::vector<double> out;
  for (const auto& p : parts) {
    Shape t(p.shape().begin() + 1, p.shape().end());
    if (p.rank() == 0 || t != trailing) {
      throw ValidationError("concat: shape mismatch " + shape_str(parts[0].shape()) + " vs " +
                            shape_str(p.shape()));
    }
    rows += p.dim(0);
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  Shape shape{rows};
  shape.insert(shape.end(), trailing.begin(), trailing.end());
  Tensor result(std::move(shape), std::move(out));
  Tape* tape = active_tape();
  bool any = std::any_of(parts.begin(), parts.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (tape && any) {
    std::vector<ImplPtr> parents;
    for (const auto& p : parts) parents.push_back(p.impl());
    auto captured = parents;
    tape->record(result.impl(), std::move(parents), [captured](const TensorImpl& o) {
      std::size_t offset = 0;
      for (const auto& p : captured) {
        if (p->requires_grad)
          for (std::size_t i = 0; i < p->data.size(); ++i) p->accumulate(i, o.grad[offset + i]);
        offset += p->data.size();
      }
    });
  }
  return result;
}

Tensor slice(const Tensor& a, std::size_t begin, std::size_t end) {
  if (a.rank() == 0 || begin >= end || end > a.dim(0)) {
    throw ValidationError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                          ") invalid for shape " + shape_str(a.shape()));
  }
  const std::size_t stride = a.numel() / a.dim(0);
  Shape shape = a.shape();
  shape[0] = end - begin;
  std::vector<double> out(a.data().begin() + begin * stride, a.data().begin() + end * stride);
  ImplPtr pa = a.impl();
  return finish(std::move(shape), std::move(out), {&a}, [pa, begin, stride](const TensorImpl& o) {
    for (std::size_t i = 0; i < o.grad.size(); ++i) pa->accumulate(begin * stride + i, o.grad[i]);
  });
}

Tensor pick(const Tensor& x, std::span<const int> index) {
  require_rank("pick", x, 2);
  if (index.size() != x.dim(0)) {
    throw ValidationError("pick: shape mismatch " + shape_str(x.shape()) + " vs [" +
                          std::to_string(index.size()) + "]");
  }
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  std::vector<double> out(rows);
  std::vector<std::size_t> flat(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    if (index[r] < 0 || static_cast<std::size_t>(index[r]) >= cols) {
      throw ValidationError("pick: index " + std::to_string(index[r]) + " out of range for " +
                            shape_str(x.shape()));
    }
    flat[r] = r * cols + static_cast<std::size_t>(index[r]);
    out[r] = x.data()[flat[r]];
  }
  ImplPtr px = x.impl();
  return finish({rows}, std::move(out), {&x}, [px, flat](const TensorImpl& o) {
    for (std::size_t r = 0; r < flat.size(); ++r) px->accumulate(flat[r], o.grad[r]);
  });
}

// ---- log-sum-exp family ---------------------------------------------------

Tensor log_sum_exp(const Tensor& v) {
  require_rank("log_sum_exp", v, 1);
  auto row = log_sum_exp_rows(reshape(v, {1, v.dim(0)}));
  return reshape(row, {});
}

Tensor log_sum_exp_rows(const Tensor& x) {
  require_rank("log_sum_exp_rows", x, 2);
  const std::size_t n = x.dim(1);
  std::vector<std::size_t> offsets{0, n};
  return reshape(segment_log_sum_exp(x, offsets), {x.dim(0)});
}

Tensor segment_log_sum_exp(const Tensor& x, std::span<const std::size_t> offsets,
                           std::span<const std::uint8_t> excluded) {
  require_rank("segment_log_sum_exp", x, 2);
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (offsets.size() < 2 || offsets.front() != 0 || offsets.back() != cols) {
    throw ValidationError("segment_log_sum_exp: offsets do not cover " + shape_str(x.shape()));
  }
  if (!excluded.empty() && excluded.size() != x.numel()) {
    throw ValidationError("segment_log_sum_exp: mask size does not match " + shape_str(x.shape()));
  }
  const std::size_t segs = offsets.size() - 1;
  std::vector<double> out(rows * segs);
  // softmax weights within each segment, reused by backward
  std::vector<double> weights(x.numel(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data().data() + r * cols;
    for (std::size_t s = 0; s < segs; ++s) {
      const std::size_t lo = offsets[s], hi = offsets[s + 1];
      if (hi < lo) throw ValidationError("segment_log_sum_exp: offsets must be non-decreasing");
      double mx = -std::numeric_limits<double>::infinity();
      bool any = false;
      for (std::size_t c = lo; c < hi; ++c) {
        if (!excluded.empty() && excluded[r * cols + c]) continue;
        mx = std::max(mx, xr[c]);
        any = true;
      }
      if (!any) throw ValidationError("segment_log_sum_exp: empty segment " + std::to_string(s));
      double acc = 0.0;
      for (std::size_t c = lo; c < hi; ++c) {
        if (!excluded.empty() && excluded[r * cols + c]) continue;
        const double e = std::exp(xr[c] - mx);
        weights[r * cols + c] = e;
        acc += e;
      }
      for (std::size_t c = lo; c < hi; ++c) weights[r * cols + c] /= acc;
      out[r * segs + s] = mx + std::log(acc);
    }
  }
  ImplPtr px = x.impl();
  std::vector<std::size_t> offs(offsets.begin(), offsets.end());
  return finish({rows, segs}, std::move(out), {&x},
                [px, weights = std::move(weights), offs, rows, cols, segs](const TensorImpl& o) {
                  if (px->grad.empty()) px->grad.assign(rows * cols, 0.0);
                  for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t s = 0; s < segs; ++s) {
                      const double g = o.grad[r * segs + s];
                      for (std::size_t c = offs[s]; c < offs[s + 1]; ++c)
                        px->grad[r * cols + c] += g * weights[r * cols + c];
                    }
                });
}

Tensor log_softmax_rows(const Tensor& x) { return add_colwise(x, scale(log_sum_exp_rows(x), -1.0)); }

// ---- normalization --------------------------------------------------------

Tensor l2_normalize(const Tensor& v) {
  if (v.rank() != 1 && v.rank() != 2) {
    throw ValidationError("l2_normalize: expected rank 1 or 2, got " + shape_str(v.shape()));
  }
  const std::size_t rows = v.rank() == 1 ? 1 : v.dim(0);
  const std::size_t cols = v.rank() == 1 ? v.dim(0) : v.dim(1);
  std::vector<double> out(v.numel());
  std::vector<double> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* vr = v.data().data() + r * cols;
    double sq = 0.0;
    for (std::size_t c = 0; c < cols; ++c) sq += vr[c] * vr[c];
    const double n = std::sqrt(sq);
    if (!(n >= 1e-12)) throw NumericalError("degenerate feature");
    norms[r] = n;
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = vr[c] / n;
  }
  ImplPtr pv = v.impl();
  return finish(v.shape(), std::move(out), {&v}, [pv, norms, rows, cols](const TensorImpl& o) {
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = o.data.data() + r * cols;
      const double* g = o.grad.data() + r * cols;
      double yg = 0.0;
      for (std::size_t c = 0; c < cols; ++c) yg += y[c] * g[c];
      for (std::size_t c = 0; c < cols; ++c) pv->accumulate(r * cols + c, (g[c] - y[c] * yg) / norms[r]);
    }
  });
}

// ---- convolution ----------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t pad) {
  if (x.rank() != 4 || w.rank() != 4 || b.rank() != 1 || w.dim(1) != x.dim(1) || w.dim(2) != w.dim(3) ||
      b.dim(0) != w.dim(0)) {
    throw ValidationError("conv2d: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(w.shape()) +
                          " / bias " + shape_str(b.shape()));
  }
  const std::size_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t co = w.dim(0), k = w.dim(2);
  if (h + 2 * pad < k || wd + 2 * pad < k) throw ValidationError("conv2d: kernel larger than padded input");
  const std::size_t ho = h + 2 * pad - k + 1, wo = wd + 2 * pad - k + 1;
  const auto* xd = x.data().data();
  const auto* wdta = w.data().data();
  std::vector<double> out(n * co * ho * wo);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t o = 0; o < co; ++o) {
      double* op = out.data() + ((s * co + o) * ho) * wo;
      std::fill(op, op + ho * wo, b.data()[o]);
      for (std::size_t c = 0; c < ci; ++c) {
        const double* xp = xd + ((s * ci + c) * h) * wd;
        const double* wp = wdta + ((o * ci + c) * k) * k;
        for (std::size_t ky = 0; ky < k; ++ky)
          for (std::size_t kx = 0; kx < k; ++kx) {
            const double wv = wp[ky * k + kx];
            for (std::size_t oy = 0; oy < ho; ++oy) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ky) - static_cast<std::ptrdiff_t>(pad);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
              for (std::size_t ox = 0; ox < wo; ++ox) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + kx) - static_cast<std::ptrdiff_t>(pad);
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
                op[oy * wo + ox] += wv * xp[iy * wd + ix];
              }
            }
          }
      }
    }
  ImplPtr px = x.impl(), pw = w.impl(), pb = b.impl();
  return finish({n, co, ho, wo}, std::move(out), {&x, &w, &b},
                [px, pw, pb, n, ci, h, wd, co, k, ho, wo, pad](const TensorImpl& o) {
                  if (px->requires_grad && px->grad.empty()) px->grad.assign(px->data.size(), 0.0);
                  if (pw->requires_grad && pw->grad.empty()) pw->grad.assign(pw->data.size(), 0.0);
                  for (std::size_t s = 0; s < n; ++s)
                    for (std::size_t oc = 0; oc < co; ++oc) {
                      const double* gp = o.grad.data() + ((s * co + oc) * ho) * wo;
                      if (pb->requires_grad) {
                        double acc = 0.0;
                        for (std::size_t i = 0; i < ho * wo; ++i) acc += gp[i];
                        pb->accumulate(oc, acc);
                      }
                      for (std::size_t c = 0; c < ci; ++c) {
                        const std::size_t xoff = ((s * ci + c) * h) * wd;
                        const std::size_t woff = ((oc * ci + c) * k) * k;
                        for (std::size_t ky = 0; ky < k; ++ky)
                          for (std::size_t kx = 0; kx < k; ++kx) {
                            double gw = 0.0;
                            const double wv = pw->data[woff + ky * k + kx];
                            for (std::size_t oy = 0; oy < ho; ++oy) {
                              const std::ptrdiff_t iy =
                                  static_cast<std::ptrdiff_t>(oy + ky) - static_cast<std::ptrdiff_t>(pad);
                              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                              for (std::size_t ox = 0; ox < wo; ++ox) {
                                const std::ptrdiff_t ix =
                                    static_cast<std::ptrdiff_t>(ox + kx) - static_cast<std::ptrdiff_t>(pad);
                                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
                                const std::size_t xi = xoff + static_cast<std::size_t>(iy) * wd +
                                                       static_cast<std::size_t>(ix);
                                const double g = gp[oy * wo + ox];
                                gw += g * px->data[xi];
                                if (px->requires_grad) px->grad[xi] += g * wv;
                              }
                            }
                            if (pw->requires_grad) pw->grad[woff + ky * k + kx] += gw;
                          }
                      }
                    }
                });
}

Tensor max_pool2(const Tensor& x) {
  require_rank("max_pool2", x, 4);
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 || w % 2) throw ValidationError("max_pool2: odd spatial size " + shape_str(x.shape()));
  const std::size_t ho = h / 2, wo = w / 2;
  std::vector<double> out(n * c * ho * wo);
  std::vector<std::size_t> arg(out.size());
  for (std::size_t p = 0; p < n * c; ++p)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        std::size_t best = p * h * w + (2 * oy) * w + 2 * ox;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = p * h * w + (2 * oy + dy) * w + 2 * ox + dx;
            if (x.data()[idx] > x.data()[best]) best = idx;
          }
        const std::size_t oi = p * ho * wo + oy * wo + ox;
        out[oi] = x.data()[best];
        arg[oi] = best;
      }
  ImplPtr px = x.impl();
  return finish({n, c, ho, wo}, std::move(out), {&x}, [px, arg](const TensorImpl& o) {
    for (std::size_t i = 0; i < arg.size(); ++i) px->accumulate(arg[i], o.grad[i]);
  });
}

// ---- gradcheck ------------------------------------------------------------

double gradcheck(const ScalarFn& f, const Tensor& point, double eps) {
  if (!(eps > 0.0 && eps <= 1e-3)) throw ValidationError("gradcheck: eps must lie in (0, 1e-3]");
  std::vector<double> base(point.data().begin(), point.data().end());

  Tensor param = Tensor::parameter(point.shape(), base);
  std::vector<double> analytic;
  {
    Tape tape;
    TapeScope scope(&tape);
    Tensor y = f(param);
    if (y.numel() != 1) throw ValidationError("gradcheck: function must return a scalar");
    if (!std::isfinite(y.item())) throw NumericalError("gradcheck: non-finite function value");
    tape.backward(y);
    analytic = param.grad();
  }

  TapeScope no_tape(nullptr);
  auto eval_at = [&](std::size_t i, double delta) {
    std::vector<double> shifted = base;
    shifted[i] += delta;
    double v = f(Tensor(point.shape(), std::move(shifted))).item();
    if (!std::isfinite(v)) throw NumericalError("gradcheck: non-finite function value");
    return v;
  };
  double worst = 0.0;
  for (std::size_t i = 0; i < base.size(); ++i) {
    if (!std::isfinite(analytic[i])) throw NumericalError("gradcheck: non-finite gradient");
    const double numeric = (eval_at(i, eps) - eval_at(i, -eps)) / (2.0 * eps);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i])));
  }
  return worst;
}

}  // namespace gml
