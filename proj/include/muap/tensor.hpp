// SPDX-License-Identifier: Apache-2.0
//
// Dense float32 tensors and a reverse-mode differentiation tape.
//
// A Tensor is an immutable value: shape plus a shared row-major buffer. When
// it was produced on a Tape it also carries the id of the node that produced
// it. Copies are cheap and share storage. A Tape must outlive every tensor
// recorded on it, and a tape is confined to a single thread.
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "muap/error.hpp"

namespace muap {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

class Tape;

class Tensor {
 public:
  Tensor() : data_(std::make_shared<const std::vector<float>>(1, 0.0f)) {}

  Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)) {
    for (std::size_t d : shape_) {
      if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape_));
    }
    if (shape_numel(shape_) != data.size()) {
      throw ShapeError("shape " + shape_str(shape_) + " does not match " +
                       std::to_string(data.size()) + " values");
    }
    data_ = std::make_shared<const std::vector<float>>(std::move(data));
  }

  static Tensor zeros(const Shape& shape) { return full(shape, 0.0f); }
  static Tensor full(const Shape& shape, float v) {
    return Tensor(shape, std::vector<float>(shape_numel(shape), v));
  }
  static Tensor scalar(float v) { return Tensor({}, {v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t dim() const noexcept { return shape_.size(); }
  std::size_t size(std::size_t axis) const { return shape_.at(axis); }
  std::size_t numel() const noexcept { return data_->size(); }
  std::span<const float> data() const noexcept { return {data_->data(), data_->size()}; }
  const std::vector<float>& vec() const noexcept { return *data_; }
  float operator[](std::size_t i) const { return (*data_)[i]; }

  /// Value of a single-element tensor.
  float item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
    return (*data_)[0];
  }

  bool recorded() const noexcept { return tape_ != nullptr; }
  Tape* tape() const noexcept { return tape_; }
  std::int64_t node() const noexcept { return node_; }

  /// Bitwise equality of shape and values; tape attachment is ignored.
  bool same_values(const Tensor& o) const {
    return shape_ == o.shape_ && *data_ == *o.data_;
  }

 private:
  friend class Tape;
  friend Tensor detach(const Tensor& t);

  Shape shape_;
  std::shared_ptr<const std::vector<float>> data_;
  Tape* tape_ = nullptr;
  std::int64_t node_ = -1;
};

/// Same values, disconnected from any tape.
inline Tensor detach(const Tensor& t) {
  Tensor out = t;
  out.tape_ = nullptr;
  out.node_ = -1;
  return out;
}

/// Output gradient in, one accumulator per op input out. An accumulator is
/// null when that input is not recorded (nothing to propagate to).
using BackwardFn = std::function<void(std::span<const float> grad_out, std::span<float* const> grad_in)>;

class Gradients;

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers `value` as a differentiable input.
  Tensor leaf(const Tensor& value) {
    Tensor out = detach(value);
    attach(out, {}, nullptr);
    return out;
  }

  /// Records the result of an op. Inputs that are not on this tape are
  /// treated as constants.
  Tensor record(Tensor out, std::span<const Tensor* const> inputs, BackwardFn fn) {
    std::vector<std::int64_t> parents;
    parents.reserve(inputs.size());
    for (const Tensor* in : inputs) {
      if (in->tape_ != nullptr && in->tape_ != this) {
        throw TapeError("op mixes tensors from two different tapes");
      }
      parents.push_back(in->tape_ == this ? in->node_ : -1);
    }
    attach(out, std::move(parents), std::move(fn));
    return out;
  }

  std::size_t size() const noexcept { return nodes_.size(); }

  Gradients backward(const Tensor& root) const;

 private:
  friend class Gradients;

  struct Node {
    std::vector<std::int64_t> parents;
    BackwardFn backward;
    std::size_t numel = 0;
    Shape shape;
  };

  void attach(Tensor& t, std::vector<std::int64_t> parents, BackwardFn fn) {
    t.tape_ = this;
    t.node_ = static_cast<std::int64_t>(nodes_.size());
    nodes_.push_back(Node{std::move(parents), std::move(fn), t.numel(), t.shape()});
  }

  std::vector<Node> nodes_;
};

/// Adjoints of every node reached from a backward root.
class Gradients {
 public:
  /// d(root)/d(t), shaped like t. Zero when t did not influence the root.
  Tensor wrt(const Tensor& t) const {
    if (t.tape() != tape_) {
      if (t.tape() == nullptr) return Tensor::zeros(t.shape());
      throw TapeError("gradient requested for a tensor from a different tape");
    }
    return at(t.node());
  }

  Tensor at(std::int64_t node) const {
    const auto& n = tape_->nodes_.at(static_cast<std::size_t>(node));
    const auto id = static_cast<std::size_t>(node);
    if (id >= grads_.size() || grads_[id].empty()) return Tensor::zeros(n.shape);
    return Tensor(n.shape, grads_[id]);
  }

 private:
  friend class Tape;
  Gradients(const Tape* tape, std::vector<std::vector<float>> grads)
      : tape_(tape), grads_(std::move(grads)) {}

  const Tape* tape_;
  std::vector<std::vector<float>> grads_;
};

inline Gradients Tape::backward(const Tensor& root) const {
  if (root.tape() != this) throw TapeError("backward root is not recorded on this tape");
  if (root.numel() != 1) throw TapeError("backward root must be a scalar, got " + shape_str(root.shape()));

  const auto root_id = static_cast<std::size_t>(root.node());
  std::vector<std::vector<float>> grads(root_id + 1);
  grads[root_id] = {1.0f};
  std::vector<float*> slots;
  for (std::size_t id = root_id + 1; id-- > 0;) {
    if (grads[id].empty()) continue;
    const Node& n = nodes_[id];
    if (!n.backward) continue;
    slots.assign(n.parents.size(), nullptr);
    for (std::size_t p = 0; p < n.parents.size(); ++p) {
      const std::int64_t pid = n.parents[p];
      if (pid < 0) continue;
      auto& pg = grads[static_cast<std::size_t>(pid)];
      if (pg.empty()) pg.assign(nodes_[static_cast<std::size_t>(pid)].numel, 0.0f);
      slots[p] = pg.data();
    }
    n.backward(grads[id], slots);
  }
  return Gradients(this, std::move(grads));
}

}  // namespace muap
