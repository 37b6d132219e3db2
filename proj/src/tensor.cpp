#include "mirrormamba/tensor.hpp"

#include <cmath>
#include <sstream>

namespace mm {

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
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : node_(std::make_shared<Node<T>>()) {
  for (auto d : shape)
    if (d == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  node_->data.assign(shape_numel(shape), fill);
  node_->shape = std::move(shape);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : node_(std::make_shared<Node<T>>()) {
  for (auto d : shape)
    if (d == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  if (shape_numel(shape) != data.size())
    throw DimensionError("shape " + shape_str(shape) + " holds " + std::to_string(shape_numel(shape)) +
                         " values, got " + std::to_string(data.size()));
  node_->shape = std::move(shape);
  node_->data = std::move(data);
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  if (axis >= rank())
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  return node_->shape[axis];
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
  node_->requires_grad = on;
  if (on) node_->ensure_grad();
  return *this;
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  return Tensor(node_->shape, node_->data);
}

template <typename T>
Tape<T>*& Tape<T>::active() {
  thread_local Tape<T>* tape = nullptr;
  return tape;
}

template <typename T>
Tape<T>::~Tape() {
  clear();
}

template <typename T>
void Tape<T>::clear() {
  for (auto& n : nodes_) {
    n->backward = nullptr;
    n->inputs.clear();
  }
  nodes_.clear();
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw ArgumentError("backward() needs a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  Node<T>* root = loss.node().get();
  if (!root->requires_grad) return;

  root->ensure_grad()[0] += T(1);
  if (!root->backward) return;

  // Reverse creation order visits every node after all of its consumers, so
  // each closure runs once with a complete output gradient.
  for (auto& n : nodes_) n->live = false;
  root->live = true;
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    Node<T>& node = *nodes_[i];
    if (!node.live || !node.backward) continue;
    node.ensure_grad();
    for (auto& in : node.inputs) {
      if (!in->requires_grad) continue;
      in->ensure_grad();
      in->live = true;
    }
    node.backward(node);
  }
}

namespace detail {

template <typename T>
void check_finite(std::span<const T> values, const char* op_name) {
  bool ok = true;
  for (T v : values) ok &= std::isfinite(v);
  if (!ok) throw NumericError(std::string("non-finite value produced by ") + op_name);
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, const std::vector<Tensor<T>>& inputs,
                      std::function<void(Node<T>&)> backward, const char* op_name) {
  check_finite<T>(data, op_name);
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  Tape<T>* tape = Tape<T>::active();
  if (tape && backward) {
    bool any = false;
    for (const auto& in : inputs) any |= in.requires_grad();
    if (any) {
      node->requires_grad = true;
      node->inputs.reserve(inputs.size());
      for (const auto& in : inputs) node->inputs.push_back(in.node());
      node->backward = std::move(backward);
      tape->record(node);
    }
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::initializer_list<Tensor<T>> inputs,
                      std::function<void(Node<T>&)> backward, const char* op_name) {
  return make_result<T>(std::move(shape), std::move(data), std::vector<Tensor<T>>(inputs), std::move(backward),
                        op_name);
}

template void check_finite<float>(std::span<const float>, const char*);
template void check_finite<double>(std::span<const double>, const char*);
template Tensor<float> make_result(Shape, std::vector<float>, const std::vector<Tensor<float>>&,
                                   std::function<void(Node<float>&)>, const char*);
template Tensor<double> make_result(Shape, std::vector<double>, const std::vector<Tensor<double>>&,
                                    std::function<void(Node<double>&)>, const char*);
template Tensor<float> make_result(Shape, std::vector<float>, std::initializer_list<Tensor<float>>,
                                   std::function<void(Node<float>&)>, const char*);
template Tensor<double> make_result(Shape, std::vector<double>, std::initializer_list<Tensor<double>>,
                                    std::function<void(Node<double>&)>, const char*);

}  // namespace detail

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace mm
