#include "gaternet/tensor.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>
#include <unordered_set>
#include <utility>

#include "gaternet/errors.hpp"

namespace gaternet {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

template <typename T>
std::vector<T>& Node<T>::ensure_grad() {
  if (grad.empty()) grad.assign(data.size(), T(0));
  return grad;
}

// ---------------------------------------------------------------------------
// BasicTensor

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, T fill, bool requires_grad)
    : node_(std::make_shared<Node<T>>()) {
  node_->data.assign(shape_numel(shape), fill);
  node_->shape = std::move(shape);
  node_->requires_grad = requires_grad;
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> data, bool requires_grad)
    : node_(std::make_shared<Node<T>>()) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  }
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

template <typename T>
BasicTensor<T> BasicTensor<T>::scalar(T value, bool requires_grad) {
  return BasicTensor(Shape{}, std::vector<T>{value}, requires_grad);
}

template <typename T>
T BasicTensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

template <typename T>
BasicTensor<T>& BasicTensor<T>::set_requires_grad(bool flag) {
  node_->requires_grad = flag;
  return *this;
}

template <typename T>
void BasicTensor<T>::zero_grad() const {
  node_->grad.clear();
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const {
  return BasicTensor(shape(), node_->data, false);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::from_node(std::shared_ptr<Node<T>> node) {
  BasicTensor t;
  t.node_ = std::move(node);
  return t;
}

// ---------------------------------------------------------------------------
// Graph

template <typename T>
BasicTensor<T> make_result(std::string op, Shape shape, std::vector<T> data,
                           const std::vector<BasicTensor<T>>& inputs,
                           std::function<void(Node<T>&)> backward_fn) {
  auto node = std::make_shared<Node<T>>();
  if (shape_numel(shape) != data.size()) {
    throw ShapeError(op + ": result length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  }
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = std::move(op);
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const BasicTensor<T>& t) { return t.requires_grad(); });
  if (any) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (const auto& t : inputs) node->inputs.push_back(t.node());
    node->backward_fn = std::move(backward_fn);
  }
  return BasicTensor<T>::from_node(std::move(node));
}

template <typename T>
std::vector<Node<T>*> topological_order(const BasicTensor<T>& root) {
  std::vector<Node<T>*> order;
  if (!root.defined() || !root.requires_grad()) return order;
  std::unordered_set<const Node<T>*> visited;
  // Iterative post-order DFS: (node, next input index).
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

template <typename T>
std::vector<const Node<T>*> reachable_leaves(const BasicTensor<T>& root) {
  std::vector<const Node<T>*> leaves;
  for (const Node<T>* node : topological_order(root)) {
    if (node->is_leaf()) leaves.push_back(node);
  }
  return leaves;
}

template <typename T>
void backward(const BasicTensor<T>& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;
  const auto order = topological_order(loss);
  loss.node()->ensure_grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }
}

// ---------------------------------------------------------------------------
// Elementwise ops

Shape broadcast_shape(const Shape& a, const Shape& b) {
  if (a == b) return a;
  if (shape_numel(b) == 1 && b.size() <= a.size()) return a;
  if (shape_numel(a) == 1 && a.size() <= b.size()) return b;
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("shapes " + shape_str(a) + " and " + shape_str(b) +
                       " are not broadcast-compatible");
    }
    out[i] = std::max(da, db);
  }
  return out;
}

namespace {

// Flat source index for every output element of a broadcast.
std::vector<std::size_t> broadcast_index(const Shape& src, const Shape& out) {
  const std::size_t total = shape_numel(out);
  std::vector<std::size_t> index(total);
  if (shape_numel(src) == 1) return std::vector<std::size_t>(total, 0);
  const std::size_t rank = out.size();
  const std::size_t offset = rank - src.size();
  std::vector<std::size_t> stride(rank, 0);
  std::size_t s = 1;
  for (std::size_t i = src.size(); i-- > 0;) {
    stride[i + offset] = src[i] == 1 ? 0 : s;
    s *= src[i];
  }
  std::vector<std::size_t> counter(rank, 0);
  std::size_t pos = 0;
  for (std::size_t flat = 0; flat < total; ++flat) {
    index[flat] = pos;
    for (std::size_t d = rank; d-- > 0;) {
      ++counter[d];
      pos += stride[d];
      if (counter[d] < out[d]) break;
      pos -= stride[d] * counter[d];
      counter[d] = 0;
    }
  }
  return index;
}

struct BroadcastPlan {
  Shape out;
  bool same = false;
  std::vector<std::size_t> ia, ib;

  BroadcastPlan(const Shape& a, const Shape& b) : out(broadcast_shape(a, b)) {
    same = (a == out && b == out);
    if (!same) {
      ia = broadcast_index(a, out);
      ib = broadcast_index(b, out);
    }
  }
  std::size_t a_at(std::size_t i) const { return same ? i : ia[i]; }
  std::size_t b_at(std::size_t i) const { return same ? i : ib[i]; }
};

enum class Arith { add, sub, mul };

template <typename T>
BasicTensor<T> binary(Arith kind, const BasicTensor<T>& a, const BasicTensor<T>& b) {
  auto plan = std::make_shared<BroadcastPlan>(a.shape(), b.shape());
  const std::size_t n = shape_numel(plan->out);
  std::vector<T> out(n);
  const auto da = a.data();
  const auto db = b.data();
  switch (kind) {
    case Arith::add:
      for (std::size_t i = 0; i < n; ++i) out[i] = da[plan->a_at(i)] + db[plan->b_at(i)];
      break;
    case Arith::sub:
      for (std::size_t i = 0; i < n; ++i) out[i] = da[plan->a_at(i)] - db[plan->b_at(i)];
      break;
    case Arith::mul:
      for (std::size_t i = 0; i < n; ++i) out[i] = da[plan->a_at(i)] * db[plan->b_at(i)];
      break;
  }
  const char* name = kind == Arith::add ? "add" : kind == Arith::sub ? "sub" : "mul";
  return make_result<T>(name, plan->out, std::move(out), {a, b}, [kind, plan](Node<T>& self) {
    Node<T>& na = *self.inputs[0];
    Node<T>& nb = *self.inputs[1];
    const std::size_t n = self.data.size();
    const auto& g = self.grad;
    if (na.requires_grad) {
      auto& ga = na.ensure_grad();
      if (kind == Arith::mul) {
        for (std::size_t i = 0; i < n; ++i) ga[plan->a_at(i)] += g[i] * nb.data[plan->b_at(i)];
      } else {
        for (std::size_t i = 0; i < n; ++i) ga[plan->a_at(i)] += g[i];
      }
    }
    if (nb.requires_grad) {
      auto& gb = nb.ensure_grad();
      switch (kind) {
        case Arith::add:
          for (std::size_t i = 0; i < n; ++i) gb[plan->b_at(i)] += g[i];
          break;
        case Arith::sub:
          for (std::size_t i = 0; i < n; ++i) gb[plan->b_at(i)] -= g[i];
          break;
        case Arith::mul:
          for (std::size_t i = 0; i < n; ++i) gb[plan->b_at(i)] += g[i] * na.data[plan->a_at(i)];
          break;
      }
    }
  });
}

}  // namespace

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary(Arith::add, a, b);
}
template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary(Arith::sub, a, b);
}
template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary(Arith::mul, a, b);
}

template <typename T>
BasicTensor<T> add_scalar(const BasicTensor<T>& a, T value) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v += value;
  return make_result<T>("add_scalar", a.shape(), std::move(out), {a}, [](Node<T>& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  return make_result<T>("scale", a.shape(), std::move(out), {a}, [factor](Node<T>& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

// ---------------------------------------------------------------------------
// Kernels

namespace kernels {

template <typename T>
void gemm(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c,
          bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    if (!accumulate) std::fill(crow, crow + n, T(0));
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
void transpose(std::size_t rows, std::size_t cols, const T* in, T* out) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = in[r * cols + c];
}

template void gemm<float>(std::size_t, std::size_t, std::size_t, const float*, const float*,
                          float*, bool);
template void gemm<double>(std::size_t, std::size_t, std::size_t, const double*, const double*,
                           double*, bool);
template void transpose<float>(std::size_t, std::size_t, const float*, float*);
template void transpose<double>(std::size_t, std::size_t, const double*, double*);

}  // namespace kernels

// ---------------------------------------------------------------------------
// Linear algebra and reductions

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.size(1) != b.size(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const std::size_t m = a.size(0), k = a.size(1), n = b.size(1);
  std::vector<T> out(m * n);
  kernels::gemm(m, k, n, a.data().data(), b.data().data(), out.data(), false);
  return make_result<T>("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](Node<T>& self) {
    Node<T>& na = *self.inputs[0];
    Node<T>& nb = *self.inputs[1];
    if (na.requires_grad) {
      // dA = dC * B^T
      std::vector<T> bt(k * n);
      kernels::transpose(k, n, nb.data.data(), bt.data());
      kernels::gemm(m, n, k, self.grad.data(), bt.data(), na.ensure_grad().data(), true);
    }
    if (nb.requires_grad) {
      // dB = A^T * dC
      std::vector<T> at(m * k);
      kernels::transpose(m, k, na.data.data(), at.data());
      kernels::gemm(k, m, n, at.data(), self.grad.data(), nb.ensure_grad().data(), true);
    }
  });
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& a) {
  double total = 0.0;
  for (T v : a.data()) total += static_cast<double>(v);
  return make_result<T>("sum", {}, {static_cast<T>(total)}, {a}, [](Node<T>& self) {
    auto& g = self.inputs[0]->ensure_grad();
    const T up = self.grad[0];
    for (auto& v : g) v += up;
  });
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& a) {
  if (a.numel() == 0) throw ShapeError("mean of an empty tensor");
  double total = 0.0;
  for (T v : a.data()) total += static_cast<double>(v);
  const double n = static_cast<double>(a.numel());
  return make_result<T>("mean", {}, {static_cast<T>(total / n)}, {a}, [n](Node<T>& self) {
    auto& g = self.inputs[0]->ensure_grad();
    const T up = static_cast<T>(static_cast<double>(self.grad[0]) / n);
    for (auto& v : g) v += up;
  });
}

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<T> out(a.data().begin(), a.data().end());
  return make_result<T>("reshape", std::move(shape), std::move(out), {a}, [](Node<T>& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
BasicTensor<T> slice_columns(const BasicTensor<T>& a, std::size_t start, std::size_t count) {
  if (a.rank() != 2 || start + count > a.size(1)) {
    throw ShapeError("slice_columns: columns [" + std::to_string(start) + ", " +
                     std::to_string(start + count) + ") out of range for " + shape_str(a.shape()));
  }
  const std::size_t rows = a.size(0), cols = a.size(1);
  std::vector<T> out(rows * count);
  const auto src = a.data();
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(src.begin() + r * cols + start, count, out.begin() + r * count);
  return make_result<T>("slice_columns", {rows, count}, std::move(out), {a},
                        [rows, cols, start, count](Node<T>& self) {
                          auto& g = self.inputs[0]->ensure_grad();
                          for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t j = 0; j < count; ++j)
                              g[r * cols + start + j] += self.grad[r * count + j];
                        });
}

// ---------------------------------------------------------------------------
// Instantiations

#define GATERNET_INSTANTIATE(T)                                                           \
  template struct Node<T>;                                                                \
  template class BasicTensor<T>;                                                          \
  template BasicTensor<T> make_result<T>(std::string, Shape, std::vector<T>,              \
                                         const std::vector<BasicTensor<T>>&,              \
                                         std::function<void(Node<T>&)>);                  \
  template void backward<T>(const BasicTensor<T>&);                                       \
  template std::vector<Node<T>*> topological_order<T>(const BasicTensor<T>&);             \
  template std::vector<const Node<T>*> reachable_leaves<T>(const BasicTensor<T>&);        \
  template BasicTensor<T> add<T>(const BasicTensor<T>&, const BasicTensor<T>&);           \
  template BasicTensor<T> sub<T>(const BasicTensor<T>&, const BasicTensor<T>&);           \
  template BasicTensor<T> mul<T>(const BasicTensor<T>&, const BasicTensor<T>&);           \
  template BasicTensor<T> add_scalar<T>(const BasicTensor<T>&, T);                        \
  template BasicTensor<T> scale<T>(const BasicTensor<T>&, T);                             \
  template BasicTensor<T> matmul<T>(const BasicTensor<T>&, const BasicTensor<T>&);        \
  template BasicTensor<T> sum<T>(const BasicTensor<T>&);                                  \
  template BasicTensor<T> mean<T>(const BasicTensor<T>&);                                 \
  template BasicTensor<T> reshape<T>(const BasicTensor<T>&, Shape);                       \
  template BasicTensor<T> slice_columns<T>(const BasicTensor<T>&, std::size_t, std::size_t);

GATERNET_INSTANTIATE(float)
GATERNET_INSTANTIATE(double)

#undef GATERNET_INSTANTIATE

}  // namespace gaternet
