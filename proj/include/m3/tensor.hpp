#pragma once

#include "m3/common.hpp"

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>

namespace m3 {

// Reverse-mode autodiff over dense row-major buffers. Forward evaluation is
// eager; every op records the parent handles and a pull-back closure on the
// output node. A graph lives as long as some handle into it does, so holding
// the loss tensor keeps one training step's trace alive and dropping it frees
// everything except the leaf parameters the model owns.
template <class S>
struct TensorNode {
  Shape shape;
  Array<S> value;
  Array<S> grad;  // allocated lazily; always shape-sized once present
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorNode<S>>> parents;
  std::function<void(TensorNode<S>&)> backward_fn;

  Dim size() const { return static_cast<Dim>(value.size()); }

  Array<S>& grad_buffer() {
    if (grad.size() != value.size()) grad = Array<S>::Zero(value.size());
    return grad;
  }
};

template <class S>
class Tensor {
 public:
  Tensor() = default;

  static Tensor leaf(Shape shape, bool requires_grad = false) {
    auto n = std::make_shared<TensorNode<S>>();
    n->value = Array<S>::Zero(shape_size(shape));
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor leaf(Shape shape, Array<S> values, bool requires_grad = false) {
    require(shape_size(shape) == values.size(),
            "tensor: shape " + shape_str(shape) + " does not match " +
                std::to_string(values.size()) + " values");
    auto n = std::make_shared<TensorNode<S>>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor scalar(S v, bool requires_grad = false) {
    Array<S> a(1);
    a[0] = v;
    return leaf({1}, std::move(a), requires_grad);
  }

  bool valid() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  Dim dim(int i) const { return node_->shape.at(static_cast<std::size_t>(i)); }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  Dim size() const { return node_->size(); }
  const char* op() const { return node_->op; }

  bool requires_grad() const { return node_->requires_grad; }
  // Leaf-only toggle; the trainer uses it to freeze parameter subsets.
  void set_requires_grad(bool v) {
    require(node_->parents.empty(), "set_requires_grad: only valid on leaf tensors");
    node_->requires_grad = v;
  }

  Array<S>& value() { return node_->value; }
  const Array<S>& value() const { return node_->value; }
  S item() const {
    require(size() == 1, "item: tensor has size " + std::to_string(size()));
    return node_->value[0];
  }

  // Zeros if backward never reached this tensor.
  Array<S> grad() const {
    if (node_->grad.size() != node_->value.size()) return Array<S>::Zero(node_->value.size());
    return node_->grad;
  }
  void zero_grad() { node_->grad_buffer().setZero(); }

  Eigen::Map<MatrixRM<S>> matrix(Dim rows, Dim cols) {
    require(rows * cols == size(), "matrix view " + std::to_string(rows) + "x" +
                                       std::to_string(cols) + " does not cover shape " +
                                       shape_str(shape()));
    return Eigen::Map<MatrixRM<S>>(node_->value.data(), rows, cols);
  }
  Eigen::Map<const MatrixRM<S>> matrix(Dim rows, Dim cols) const {
    require(rows * cols == size(), "matrix view " + std::to_string(rows) + "x" +
                                       std::to_string(cols) + " does not cover shape " +
                                       shape_str(shape()));
    return Eigen::Map<const MatrixRM<S>>(node_->value.data(), rows, cols);
  }

  TensorNode<S>* node() const { return node_.get(); }
  const std::shared_ptr<TensorNode<S>>& handle() const { return node_; }

  explicit Tensor(std::shared_ptr<TensorNode<S>> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<TensorNode<S>> node_;
};

namespace detail {

// Builds an op node. The forward value must already be computed; `backward`
// receives the output node and pushes gradient into the parents.
template <class S>
Tensor<S> make_op(const char* op, Shape shape, Array<S> value,
                  std::vector<Tensor<S>> parents,
                  std::function<void(TensorNode<S>&)> backward) {
  require(shape_size(shape) == value.size(),
          std::string(op) + ": internal shape/value mismatch " + shape_str(shape));
  if (!value.allFinite())
    fail(std::string(op) + ": produced non-finite values (output shape " + shape_str(shape) + ")");
  auto n = std::make_shared<TensorNode<S>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  for (auto& p : parents) {
    if (p.requires_grad()) n->requires_grad = true;
    n->parents.push_back(p.handle());
  }
  if (n->requires_grad) n->backward_fn = std::move(backward);
  return Tensor<S>(std::move(n));
}

}  // namespace detail

// Reverse pass from a scalar loss. Gradients of every node reachable from
// `loss` are reset and repopulated; leaves not in the trace are untouched.
template <class S>
void backward(const Tensor<S>& loss) {
  require(loss.valid(), "backward: invalid tensor");
  require(loss.size() == 1,
          "backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  require(loss.requires_grad(), "backward: loss does not require grad");

  // Iterative post-order DFS, parents before children in `order`.
  std::vector<TensorNode<S>*> order;
  std::unordered_set<TensorNode<S>*> seen;
  struct Frame {
    TensorNode<S>* n;
    std::size_t next;
  };
  std::vector<Frame> stack{{loss.node(), 0}};
  seen.insert(loss.node());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.n->parents.size()) {
      TensorNode<S>* p = f.n->parents[f.next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }

  for (TensorNode<S>* n : order) n->grad_buffer().setZero();
  loss.node()->grad_buffer()[0] = S(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode<S>* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
}

}  // namespace m3
