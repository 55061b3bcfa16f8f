#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "sgg/errors.hpp"

namespace sgg {

// Execution mode. Reference: 64-bit, single-threaded, fixed reduction order;
// gradient checks and bit-exact reproducibility are only guaranteed here.
// Fast: values are rounded to 32-bit precision after every op and matmul may
// run multi-threaded with float accumulation.
enum class ExecMode { kReference, kFast };

ExecMode exec_mode();
void set_exec_mode(ExecMode mode);

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  uint64_t id = 0;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

// Dense real tensor; a shared handle into the computation graph. Copies are
// shallow (same node). All learnable values and losses flow through Tensor.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor from_data(Shape shape, std::vector<double> data);
  static Tensor scalar(double value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int dim(int axis) const { return node_->shape[axis]; }
  int64_t size() const { return static_cast<int64_t>(node_->data.size()); }
  // 2-d helpers
  int rows() const;
  int cols() const;

  const std::vector<double>& data() const { return node_->data; }
  // Direct mutation; only valid for leaves before they enter a graph.
  std::vector<double>& raw_data() { return node_->data; }
  double value() const;                 // single-element tensors
  double at(int r, int c) const;        // 2-d element access

  Tensor& set_requires_grad(bool flag);
  bool requires_grad() const { return node_->requires_grad; }
  const std::vector<double>& grad() const;
  void zero_grad();
  uint64_t node_id() const { return node_->id; }
  std::shared_ptr<TensorNode> node() const { return node_; }

 private:
  std::shared_ptr<TensorNode> node_;
};

// Builds a graph node from precomputed data. The backward_fn reads
// node.grad and accumulates into the parents' grad buffers. Parents without
// requires_grad are pruned and backward_fn dropped when no parent needs
// gradients. Exposed so tests and custom kernels can register ops.
Tensor make_op(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
               std::function<void(TensorNode&)> backward_fn);

// ---- core ops (each registers its gradient rule) ----

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);          // same shape
Tensor add_rowvec(const Tensor& a, const Tensor& v);   // [n,d] + [d]
Tensor add_scalar(const Tensor& a, double c);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);          // elementwise
Tensor div(const Tensor& a, const Tensor& b);          // elementwise
Tensor scale(const Tensor& a, double c);
Tensor scale_by(const Tensor& a, const Tensor& s);     // s: single element
Tensor neg(const Tensor& a);

Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);  // non-positive entry -> NumericError
Tensor abs(const Tensor& a);
Tensor minimum(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);

Tensor softmax(const Tensor& a, int axis);      // 2-d; max-subtraction stabilized
Tensor log_softmax(const Tensor& a, int axis);  // 2-d, axis 1

Tensor sum(const Tensor& a);             // scalar
Tensor mean(const Tensor& a);            // scalar
Tensor sum_axis(const Tensor& a, int axis);  // 2-d: axis 1 -> [n,1], axis 0 -> [1,m]

Tensor concat(const std::vector<Tensor>& parts, int axis);        // 2-d
Tensor slice(const Tensor& a, int axis, int start, int len);      // 2-d
Tensor row_gather(const Tensor& a, const std::vector<int>& rows); // 2-d
Tensor col_pick(const Tensor& a, const std::vector<int>& cols);   // [n,1] of a[i, cols[i]]

Tensor l2_normalize(const Tensor& a);  // row-wise; zero rows stay zero with zero grad
Tensor layer_norm(const Tensor& a, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

// Same values, cut out of the graph.
Tensor detach(const Tensor& a);

// Reverse-mode accumulation from a scalar loss. Gradients accumulate into
// existing buffers (callers zero leaf grads between steps).
void backward(const Tensor& loss);

}  // namespace sgg
