#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "affkit/error.hpp"

namespace affkit::numkit {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

/// Identity of a tensor inside a Tape: which tape, and the record index.
struct NodeRef {
  std::uint64_t tape_id = 0;
  std::size_t index = 0;
};

template <class T>
struct Storage {
  std::vector<T> values;
  std::vector<T> grad;  // empty until materialized
};

/// Dense row-major array. Copies are cheap handles sharing storage; values
/// written by an op are never modified afterwards, with the single exception
/// of parameter tensors updated in place by an optimizer via mutable_values().
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : Tensor(Shape{}, std::vector<T>{T{}}) {}

  Tensor(Shape shape, std::vector<T> values)
      : shape_(std::move(shape)), storage_(std::make_shared<Storage<T>>()) {
    if (numel(shape_) != values.size()) {
      throw ValidationError("tensor shape " + to_string(shape_) + " holds " + std::to_string(numel(shape_)) +
                            " values, got " + std::to_string(values.size()));
    }
    storage_->values = std::move(values);
  }

  static Tensor zeros(Shape shape) { return full(std::move(shape), T{0}); }
  static Tensor full(Shape shape, T value) {
    const std::size_t n = numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value));
  }
  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return storage_->values.size(); }
  bool is_scalar() const { return size() == 1; }

  std::span<const T> values() const { return storage_->values; }
  T at(std::size_t i) const { return storage_->values.at(i); }
  T item() const {
    if (size() != 1) throw ValidationError("item() on tensor of shape " + to_string(shape_));
    return storage_->values[0];
  }

  /// In-place write access for optimizers and initializers.
  std::span<T> mutable_values() { return storage_->values; }

  bool has_grad() const { return !storage_->grad.empty(); }
  std::span<const T> grad() const { return storage_->grad; }
  std::span<T> mutable_grad() {
    ensure_grad();
    return storage_->grad;
  }
  void ensure_grad() {
    if (storage_->grad.empty()) storage_->grad.assign(storage_->values.size(), T{0});
  }
  void zero_grad() {
    if (!storage_->grad.empty()) std::fill(storage_->grad.begin(), storage_->grad.end(), T{0});
  }

  const std::optional<NodeRef>& node() const { return node_; }
  bool tracked() const { return node_.has_value(); }

  /// Same storage, no tape identity: a constant as far as autodiff is concerned.
  Tensor detach() const {
    Tensor out = *this;
    out.node_.reset();
    return out;
  }

  Tensor clone() const { return Tensor(shape_, storage_->values); }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(storage_->values.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<U>(storage_->values[i]);
    return Tensor<U>(shape_, std::move(out));
  }

  bool shares_storage(const Tensor& other) const { return storage_ == other.storage_; }

  // Used by Tape.
  Tensor with_node(NodeRef ref) const {
    Tensor out = *this;
    out.node_ = ref;
    return out;
  }
  const std::shared_ptr<Storage<T>>& storage() const { return storage_; }

 private:
  Shape shape_;
  std::shared_ptr<Storage<T>> storage_;
  std::optional<NodeRef> node_;
};

template <class T>
bool all_finite(const Tensor<T>& t) {
  for (T v : t.values()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

template <class T>
bool any_nan(const Tensor<T>& t) {
  for (T v : t.values()) {
    if (std::isnan(v)) return true;
  }
  return false;
}

}  // namespace affkit::numkit
