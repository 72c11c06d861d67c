#include "sslecho/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "sslecho/error.hpp"

namespace sslecho {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

namespace {

void check_shape(const Shape& shape) {
  for (std::size_t d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_string(shape));
  }
}

std::shared_ptr<detail::TensorNode> make_node(Shape shape, std::vector<Scalar> values,
                                              bool requires_grad) {
  auto node = std::make_shared<detail::TensorNode>();
  node->shape = std::move(shape);
  node->data = std::make_shared<std::vector<Scalar>>(std::move(values));
  node->requires_grad = requires_grad;
  return node;
}

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), Scalar(0), requires_grad);
}

Tensor Tensor::full(Shape shape, Scalar value, bool requires_grad) {
  check_shape(shape);
  const std::size_t n = shape_numel(shape);
  return Tensor(make_node(std::move(shape), std::vector<Scalar>(n, value), requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<Scalar> values, bool requires_grad) {
  check_shape(shape);
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("shape " + shape_string(shape) + " needs " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  return Tensor(make_node(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(Scalar value, bool requires_grad) {
  return from(Shape{1}, {value}, requires_grad);
}

Tensor Tensor::make_result(Shape shape, std::vector<Scalar> values) {
  auto node = make_node(std::move(shape), std::move(values), false);
  node->is_leaf = false;
  return Tensor(std::move(node));
}

const Shape& Tensor::shape() const {
  if (!node_) throw StateError("use of undefined tensor");
  return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_string(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::span<const Scalar> Tensor::data() const {
  if (!node_) throw StateError("use of undefined tensor");
  return {node_->data->data(), node_->data->size()};
}

std::span<Scalar> Tensor::mutable_data() {
  if (!node_) throw StateError("use of undefined tensor");
  return {node_->data->data(), node_->data->size()};
}

Scalar Tensor::item() const {
  if (numel() != 1) {
    throw ContractError("item() on non-scalar tensor " + shape_string(shape()));
  }
  return data()[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  if (!node_) throw StateError("use of undefined tensor");
  node_->requires_grad = flag;
}

bool Tensor::is_leaf() const { return node_ && node_->is_leaf; }

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const Scalar> Tensor::grad() const {
  if (!has_grad()) throw StateError("tensor has no gradient");
  return {node_->grad.data(), node_->grad.size()};
}

std::span<Scalar> Tensor::mutable_grad() {
  if (!node_) throw StateError("use of undefined tensor");
  if (node_->grad.empty()) node_->grad.assign(node_->data->size(), Scalar(0));
  return {node_->grad.data(), node_->grad.size()};
}

void Tensor::zero_grad() {
  if (node_ && !node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), Scalar(0));
}

void Tensor::clear_grad() {
  if (node_) {
    node_->grad.clear();
    node_->grad.shrink_to_fit();
  }
}

Tensor Tensor::detach() const {
  auto node = std::make_shared<detail::TensorNode>();
  node->shape = shape();
  node->data = node_->data;
  return Tensor(std::move(node));
}

Tensor Tensor::clone() const {
  std::vector<Scalar> copy(data().begin(), data().end());
  return Tensor(make_node(shape(), std::move(copy), requires_grad()));
}

Tensor Tensor::reshape(Shape new_shape) const {
  check_shape(new_shape);
  if (shape_numel(new_shape) != numel()) {
    throw DimensionError("cannot reshape " + shape_string(shape()) + " to " +
                         shape_string(new_shape));
  }
  std::vector<Scalar> copy(data().begin(), data().end());
  return Tensor(make_node(std::move(new_shape), std::move(copy), false));
}

bool Tensor::has_non_finite() const {
  for (Scalar v : data()) {
    if (!std::isfinite(v)) return true;
  }
  return false;
}

bool Tape::needs_grad(std::initializer_list<const Tensor*> inputs) const {
  if (!recording()) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t != nullptr && t->requires_grad(); });
}

void Tape::record(std::vector<Tensor> inputs, Tensor output, std::function<void()> backward) {
  if (differentiated_) throw StateError("cannot record on a tape that was already differentiated");
  output.node()->requires_grad = true;
  records_.push_back(Record{std::move(inputs), std::move(output), std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
  if (differentiated_) throw StateError("backward called twice on the same tape");
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss, got " +
                        (loss.defined() ? shape_string(loss.shape()) : std::string("undefined")));
  }
  differentiated_ = true;
  if (!loss.requires_grad()) return;

  Tensor seed = loss;
  seed.mutable_grad()[0] += Scalar(1);

  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (it->output.has_grad()) it->backward();
    // Leaves on the tape always end up with a (possibly zero) gradient.
    for (Tensor& input : it->inputs) {
      if (input.requires_grad() && input.is_leaf()) input.mutable_grad();
    }
    if (!it->output.is_leaf()) it->output.clear_grad();
  }
  records_.clear();
}

}  // namespace sslecho
