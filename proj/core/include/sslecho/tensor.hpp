#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace sslecho {

#if defined(SSLECHO_FLOAT32)
using Scalar = float;
#else
using Scalar = double;
#endif

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {

struct TensorNode {
  Shape shape;
  // Shared so that detach() can alias storage without copying parameters.
  std::shared_ptr<std::vector<Scalar>> data;
  std::vector<Scalar> grad;  // empty == absent
  bool requires_grad = false;
  bool is_leaf = true;
};

}  // namespace detail

// Dense row-major n-d array. Tensor is a cheap handle: copies share the same
// node, so a parameter held in a model and the same parameter referenced from
// a tape are one object. Use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Scalar value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<Scalar> values, bool requires_grad = false);
  static Tensor scalar(Scalar value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }

  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const Scalar> data() const;
  // Writable view. Callers must not mutate a tensor that is recorded on a
  // tape which has not been differentiated yet.
  std::span<Scalar> mutable_data();
  Scalar item() const;
  Scalar at(std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const Scalar> grad() const;
  std::span<Scalar> mutable_grad();  // allocates zeros if absent
  void zero_grad();
  void clear_grad();

  // New leaf sharing storage but never receiving gradients.
  Tensor detach() const;
  // Deep copy of data (grad not copied); requires_grad carried over.
  Tensor clone() const;
  Tensor reshape(Shape shape) const;  // copy with a new shape (no tape)

  // True when any element is NaN or infinite.
  bool has_non_finite() const;

  const detail::TensorNode* id() const { return node_.get(); }
  std::shared_ptr<detail::TensorNode> node() const { return node_; }

  // Internal: used by ops to build non-leaf results.
  static Tensor make_result(Shape shape, std::vector<Scalar> values);

 private:
  explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::TensorNode> node_;
};

// Records differentiable operations in execution order. Each tape supports a
// single backward pass; a second call raises StateError. Leaf gradients
// accumulate across tapes, so training code zeroes them between steps.
class Tape {
 public:
  enum class Mode { kRecord, kNoGrad };

  explicit Tape(Mode mode = Mode::kRecord) : mode_(mode) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  static Tape no_grad() { return Tape(Mode::kNoGrad); }

  bool recording() const { return mode_ == Mode::kRecord; }
  std::size_t size() const { return records_.size(); }
  bool differentiated() const { return differentiated_; }

  // Whether an op over `inputs` must be recorded.
  bool needs_grad(std::initializer_list<const Tensor*> inputs) const;

  // `backward` reads the output gradient and accumulates into the inputs'.
  void record(std::vector<Tensor> inputs, Tensor output, std::function<void()> backward);

  // Populates d(loss)/d(leaf) for every requires_grad leaf reached by the tape.
  void backward(const Tensor& loss);

 private:
  struct Record {
    std::vector<Tensor> inputs;
    Tensor output;
    std::function<void()> backward;
  };

  Mode mode_;
  bool differentiated_ = false;
  std::vector<Record> records_;
};

}  // namespace sslecho
