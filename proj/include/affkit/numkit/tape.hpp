#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <vector>

#include "affkit/numkit/tensor.hpp"

namespace affkit::numkit {

namespace detail {
inline std::uint64_t next_tape_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}
}  // namespace detail

/// Ordered record of differentiable operations.
///
/// Nodes are appended in execution order, so every node's inputs precede it.
/// Leaves are tensors registered with watch(); their gradients land in the
/// tensor's own storage and therefore survive the tape. Intermediate
/// gradients live only for the duration of one backward() call.
///
/// Calling backward() twice without zeroing leaf gradients accumulates: the
/// leaves hold the sum of both passes. A tape is used by a single thread.
template <class T>
class Tape {
 public:
  /// grad_in[k] is empty when input k does not require a gradient.
  using GradSpans = std::vector<std::span<T>>;
  using BackwardFn = std::function<void(std::span<const T> grad_out, GradSpans& grad_in)>;

  Tape() : id_(detail::next_tape_id()) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::uint64_t id() const { return id_; }
  std::size_t size() const { return nodes_.size(); }
  std::size_t leaf_count() const {
    std::size_t n = 0;
    for (const auto& node : nodes_) n += node.leaf_storage ? 1 : 0;
    return n;
  }

  bool owns(const Tensor<T>& t) const { return t.tracked() && t.node()->tape_id == id_ && t.node()->index < nodes_.size(); }

  /// Registers `leaf` as a gradient-receiving leaf. The returned handle shares
  /// storage with `leaf`, so gradients are visible through either.
  Tensor<T> watch(const Tensor<T>& leaf) {
    if (leaf.tracked()) {
      if (owns(leaf)) return leaf;
      throw ValidationError("tensor is already tracked by another tape");
    }
    Node node;
    node.leaf_storage = leaf.storage();
    node.numel = leaf.size();
    nodes_.push_back(std::move(node));
    return leaf.with_node(NodeRef{id_, nodes_.size() - 1});
  }

  /// Records an operation output. When no input is tracked the result is an
  /// untracked constant and `fn` is dropped.
  Tensor<T> record(Shape shape, std::vector<T> values, const std::vector<Tensor<T>>& inputs, BackwardFn fn) {
    Tensor<T> out(std::move(shape), std::move(values));
    Node node;
    bool any_tracked = false;
    node.inputs.reserve(inputs.size());
    for (const auto& in : inputs) {
      if (!in.tracked()) {
        node.inputs.push_back(kNoInput);
        continue;
      }
      if (!owns(in)) throw ValidationError("operation mixes tensors from different tapes");
      node.inputs.push_back(in.node()->index);
      any_tracked = true;
    }
    if (!any_tracked) return out;
    node.backward = std::move(fn);
    node.numel = out.size();
    nodes_.push_back(std::move(node));
    return out.with_node(NodeRef{id_, nodes_.size() - 1});
  }

  /// Propagates d(loss)/d(node) to every leaf. Every leaf ends up with a
  /// materialized gradient buffer, zero where the loss does not depend on it.
  void backward(const Tensor<T>& loss) {
    if (loss.size() != 1) throw ValidationError("backward() needs a scalar loss, got shape " + to_string(loss.shape()));
    if (loss.tracked()) {
      if (!owns(loss)) throw ValidationError("loss was not produced through this tape");
      run_backward(loss.node()->index);
    }
    for (auto& node : nodes_) {
      if (node.leaf_storage && node.leaf_storage->grad.empty()) node.leaf_storage->grad.assign(node.numel, T{0});
    }
  }

 private:
  static constexpr std::size_t kNoInput = std::numeric_limits<std::size_t>::max();

  struct Node {
    std::vector<std::size_t> inputs;
    std::shared_ptr<Storage<T>> leaf_storage;
    BackwardFn backward;
    std::size_t numel = 0;
  };

  void run_backward(std::size_t root) {
    std::vector<std::vector<T>> grads(root + 1);
    grads[root].assign(1, T{1});
    GradSpans grad_in;
    for (std::size_t i = root + 1; i-- > 0;) {
      if (grads[i].empty()) continue;
      Node& node = nodes_[i];
      if (node.leaf_storage) {
        auto& dst = node.leaf_storage->grad;
        if (dst.empty()) dst.assign(node.numel, T{0});
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += grads[i][k];
      } else {
        grad_in.clear();
        for (std::size_t in : node.inputs) {
          if (in == kNoInput) {
            grad_in.emplace_back();
            continue;
          }
          if (grads[in].empty()) grads[in].assign(nodes_[in].numel, T{0});
          grad_in.emplace_back(grads[in]);
        }
        node.backward(grads[i], grad_in);
      }
      std::vector<T>().swap(grads[i]);
    }
  }

  std::uint64_t id_;
  std::vector<Node> nodes_;
};

}  // namespace affkit::numkit
