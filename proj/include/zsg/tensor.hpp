#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "error.hpp"

namespace zsg::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

template <class T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty unless requires_grad
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

/// Dense row-major tensor handle. Copies share storage; use clone() for a
/// deep copy.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
      : node_(std::make_shared<TensorNode<T>>()) {
    node_->value.assign(numel(shape), fill);
    node_->shape = std::move(shape);
    set_requires_grad(requires_grad);
  }

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : node_(std::make_shared<TensorNode<T>>()) {
    if (values.size() != numel(shape))
      fail(ErrorClass::InvalidInput, "Tensor: value count " + std::to_string(values.size()) +
                                         " does not match shape " + shape_string(shape));
    node_->value = std::move(values);
    node_->shape = std::move(shape);
    set_requires_grad(requires_grad);
  }

  static Tensor scalar(T v, bool requires_grad = false) { return Tensor(Shape{1}, v, requires_grad); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->value.size(); }

  std::span<T> data() { return node_->value; }
  std::span<const T> data() const { return node_->value; }
  T& operator[](std::size_t i) { return node_->value[i]; }
  const T& operator[](std::size_t i) const { return node_->value[i]; }
  T item() const {
    require(size() == 1, ErrorClass::InvalidInput, "Tensor::item on non-scalar tensor");
    return node_->value[0];
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) {
    node_->requires_grad = on;
    if (on) node_->ensure_grad();
  }
  bool has_grad() const { return node_ && node_->grad.size() == node_->value.size(); }
  std::span<T> grad() { return node_->grad; }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() {
    if (has_grad()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  Tensor clone() const {
    Tensor t(shape(), std::vector<T>(node_->value), false);
    return t;
  }

  TensorNode<T>* node() const { return node_.get(); }
  std::shared_ptr<TensorNode<T>> shared_node() const { return node_; }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

/// Records backward closures in execution order, which is a topological order
/// of the graph. backward() replays them in reverse and then clears the tape.
/// Leaf gradients accumulate across backward calls until zero_grad().
template <class T>
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  std::size_t size() const { return ops_.size(); }

  void record(std::function<void()> backward_fn) {
    if (recording_) ops_.push_back(std::move(backward_fn));
  }

  void clear() { ops_.clear(); }

  void backward(Tensor<T>& loss) {
    require(loss.defined() && loss.size() == 1, ErrorClass::InvalidInput,
            "backward: loss must be a single-element tensor");
    require(loss.requires_grad(), ErrorClass::InvalidInput,
            "backward: loss does not depend on any differentiable input");
    loss.node()->ensure_grad();
    loss.grad()[0] += T(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    ops_.clear();
  }

  // Branch log: piecewise operations append which side of each kink every
  // element took. The gradient checker compares logs between the two probe
  // evaluations to detect probes that straddle a non-differentiable point.
  void enable_branch_log(bool on) {
    branch_logging_ = on;
    branches_.clear();
  }
  bool branch_logging() const { return branch_logging_; }
  void log_branch(bool side) {
    if (branch_logging_) branches_.push_back(side ? 1 : 0);
  }
  const std::vector<unsigned char>& branches() const { return branches_; }

 private:
  bool recording_;
  std::vector<std::function<void()>> ops_;
  bool branch_logging_ = false;
  std::vector<unsigned char> branches_;
};

/// Output tensor for an op: requires grad iff the tape records and any input
/// requires grad.
template <class T>
Tensor<T> make_output(Tape<T>& tape, Shape shape, std::initializer_list<const Tensor<T>*> inputs) {
  bool rg = false;
  if (tape.recording()) {
    for (const auto* in : inputs) rg = rg || (in && in->defined() && in->requires_grad());
  }
  return Tensor<T>(std::move(shape), T(0), rg);
}

template <class T>
bool any_requires_grad(const std::vector<Tensor<T>>& xs) {
  for (const auto& x : xs)
    if (x.requires_grad()) return true;
  return false;
}

}  // namespace zsg::ad
