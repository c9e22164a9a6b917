#pragma once

// Minimal reverse-mode automatic differentiation over dense float64 tensors.
//
// Operations record themselves on the thread's active Tape (see TapeScope)
// whenever one of their operands requires a gradient. Without an active tape
// every op is a plain forward computation, which is how inference runs.
// There is no broadcasting: row/column-wise adds are separate, named ops.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace gml {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until something accumulates into it
  bool requires_grad = false;
  bool is_leaf = true;
  std::uint64_t tape_id = 0;  // tape that produced this value, 0 for leaves

  void accumulate(std::size_t i, double v) {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    grad[i] += v;
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor();  // scalar 0, constant
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape);
  static Tensor scalar(double value);
  static Tensor parameter(Shape shape, std::vector<double> data);

  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;
  std::span<const double> data() const;
  double item() const;
  double at(std::size_t i) const;
  double at(std::size_t row, std::size_t col) const;

  bool requires_grad() const;
  bool is_leaf() const;
  // Accumulated gradient, zeros of the same shape when nothing flowed here.
  std::vector<double> grad() const;
  void zero_grad();

  // In-place access for optimizers and initializers; leaves only.
  std::span<double> mutable_data();

  // Same values, cut from the tape and never requiring a gradient.
  Tensor detach() const;

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

class Tape {
 public:
  using BackwardFn = std::function<void(const detail::TensorImpl& out)>;

  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::shared_ptr<detail::TensorImpl> out,
              std::vector<std::shared_ptr<detail::TensorImpl>> parents, BackwardFn fn);

  // Seeds d(loss)/d(loss) = 1 and walks the recorded nodes once, newest first.
  // Gradients accumulate into every requires_grad tensor reachable from loss.
  void backward(const Tensor& loss);

  std::size_t size() const { return nodes_.size(); }
  std::uint64_t id() const { return id_; }

  // Indices of parents for node i, for topology checks.
  std::vector<std::size_t> parent_nodes(std::size_t i) const;

 private:
  struct Node {
    std::shared_ptr<detail::TensorImpl> out;
    std::vector<std::shared_ptr<detail::TensorImpl>> parents;
    BackwardFn fn;
  };
  std::vector<Node> nodes_;
  std::uint64_t id_;
  bool consumed_ = false;
};

// Makes `tape` the active tape for this thread until destruction. Passing
// nullptr disables recording (inference).
class TapeScope {
 public:
  explicit TapeScope(Tape* tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

// backward() on the active tape.
void backward(const Tensor& loss);

// ---- forward ops ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_constant(const Tensor& a, double offset);
// a * s where s holds a single value.
Tensor mul_scalar(const Tensor& a, const Tensor& s);
// X[B,C] + v[C] added to every row.
Tensor add_rowwise(const Tensor& x, const Tensor& v);
// X[B,C] + v[B] added to every column.
Tensor add_colwise(const Tensor& x, const Tensor& v);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor relu(const Tensor& a);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor reduce_max(const Tensor& a);

// Concatenation and slicing along axis 0.
Tensor concat(std::span<const Tensor> parts);
Tensor slice(const Tensor& a, std::size_t begin, std::size_t end);

// X[B,C] -> [B] with element (i, index[i]).
Tensor pick(const Tensor& x, std::span<const int> index);

// log(sum(exp(v))) over a rank-1 tensor, max-shifted.
Tensor log_sum_exp(const Tensor& v);
// Row-wise log_sum_exp of X[B,N] -> [B].
Tensor log_sum_exp_rows(const Tensor& x);
// Row-wise log_sum_exp of X[B,N] restricted to column segments
// [offsets[s], offsets[s+1]) -> [B,S]. `excluded`, when non-empty, is a B*N
// mask of entries left out of the sum; each (row, segment) must keep at least
// one entry.
Tensor segment_log_sum_exp(const Tensor& x, std::span<const std::size_t> offsets,
                           std::span<const std::uint8_t> excluded = {});
// X - log_sum_exp_rows(X) per row.
Tensor log_softmax_rows(const Tensor& x);

// Unit Euclidean norm: the whole vector for rank 1, each row for rank 2.
// Throws NumericalError("degenerate feature") when a norm is below 1e-12.
Tensor l2_normalize(const Tensor& v);

// Stride-1 2-D convolution. x[N,Ci,H,W], w[Co,Ci,K,K], b[Co], zero padding.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t pad);
// 2x2 max pooling with stride 2; H and W must be even.
Tensor max_pool2(const Tensor& x);

// ---- gradient checking ----------------------------------------------------

using ScalarFn = std::function<Tensor(const Tensor&)>;

// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
double gradcheck(const ScalarFn& f, const Tensor& point, double eps = 1e-5);

}  // namespace gml
