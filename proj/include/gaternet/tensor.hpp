#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace gaternet {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

enum class Mode { train, eval };

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until backward touches the node
  bool requires_grad = false;
  std::string op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into inputs' grads.
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }
  std::vector<T>& ensure_grad();
};

// Handle to a node of the reverse-mode graph. Copies share the node, so a
// parameter handle held by a layer and by the optimizer refer to the same
// storage.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape, T fill = T(0), bool requires_grad = false);
  BasicTensor(Shape shape, std::vector<T> data, bool requires_grad = false);
  static BasicTensor scalar(T value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  std::span<T> mutable_data() const { return node_->data; }
  T item() const;

  bool requires_grad() const { return node_->requires_grad; }
  BasicTensor& set_requires_grad(bool flag);
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() const { return node_->grad; }
  void zero_grad() const;

  const std::string& op() const { return node_->op; }
  bool is_leaf() const { return node_->is_leaf(); }

  // Same values, cut from the graph.
  BasicTensor detach() const;

  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> out(numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<U>(node_->data[i]);
    return BasicTensor<U>(shape(), std::move(out), requires_grad());
  }

  const std::shared_ptr<Node<T>>& node() const { return node_; }
  static BasicTensor from_node(std::shared_ptr<Node<T>> node);

 private:
  std::shared_ptr<Node<T>> node_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

// Builds the result of an op. When no input requires grad, the node is a
// constant and the backward rule is dropped.
template <typename T>
BasicTensor<T> make_result(std::string op, Shape shape, std::vector<T> data,
                           const std::vector<BasicTensor<T>>& inputs,
                           std::function<void(Node<T>&)> backward_fn);

// Runs reverse-mode differentiation from a scalar loss. Gradients
// accumulate into whatever is already stored on the leaves.
template <typename T>
void backward(const BasicTensor<T>& loss);

// Nodes reachable from root that require grad, in topological order
// (inputs before consumers).
template <typename T>
std::vector<Node<T>*> topological_order(const BasicTensor<T>& root);

// Leaves reachable from root through requires-grad edges.
template <typename T>
std::vector<const Node<T>*> reachable_leaves(const BasicTensor<T>& root);

// Elementwise arithmetic with numpy-style broadcasting: shapes are aligned
// at their trailing dimensions and each aligned pair must be equal or
// contain a 1. A rank-0 or single-element operand broadcasts everywhere.
Shape broadcast_shape(const Shape& a, const Shape& b);

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> add_scalar(const BasicTensor<T>& a, T value);
template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor);

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& a);
template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& a);

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape);

// Columns [start, start + count) of an N x c matrix.
template <typename T>
BasicTensor<T> slice_columns(const BasicTensor<T>& a, std::size_t start, std::size_t count);

template <typename T>
BasicTensor<T> operator+(const BasicTensor<T>& a, const BasicTensor<T>& b) { return add(a, b); }
template <typename T>
BasicTensor<T> operator-(const BasicTensor<T>& a, const BasicTensor<T>& b) { return sub(a, b); }
template <typename T>
BasicTensor<T> operator*(const BasicTensor<T>& a, const BasicTensor<T>& b) { return mul(a, b); }

namespace kernels {

// C[m x n] (+)= A[m x k] * B[k x n], row-major. Each output element is
// accumulated over k in ascending order regardless of m, so computing a
// subset of rows reproduces the full product bit for bit.
template <typename T>
void gemm(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c,
          bool accumulate);

template <typename T>
void transpose(std::size_t rows, std::size_t cols, const T* in, T* out);

}  // namespace kernels

}  // namespace gaternet
