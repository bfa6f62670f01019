#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace rgrid {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;

namespace detail {

/// Backward rule of one recorded op: receives the gradient w.r.t. the op's
/// output and accumulates into the gradient buffers of its parents. A parent
/// that does not participate in differentiation gets a null buffer.
using BackwardFn = std::function<void(std::span<const double> grad_out,
                                      std::span<std::vector<double>* const> grad_parents)>;

struct Node {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;  // populated on leaves by backward()
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;
  std::uint64_t seq = 0;
  std::string_view op = "leaf";
};

}  // namespace detail

/// Dense row-major double tensor. Copies are shallow: two Tensor handles may
/// refer to the same node. Op outputs are immutable; only leaves expose
/// mutable storage.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  /// Writable view; leaves only.
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  /// New leaf holding a copy of the data, cut off from the tape.
  Tensor detach() const;

  const detail::Node* node() const noexcept { return node_.get(); }
  std::shared_ptr<detail::Node> node_ptr() const noexcept { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Reverse-execution-order view of the ops reachable from a root tensor.
/// Each node appears once.
class Tape {
 public:
  static Tape from_root(const Tensor& root);
  std::size_t size() const noexcept { return nodes_.size(); }
  bool empty() const noexcept { return nodes_.empty(); }
  const std::vector<detail::Node*>& nodes() const noexcept { return nodes_; }

 private:
  std::vector<detail::Node*> nodes_;
};

/// Populates `grad` on every requires_grad leaf reachable from `loss`.
/// Gradients accumulate across calls; callers reset with zero_grad().
void backward(const Tensor& loss);

/// Gradients of a scalar `loss` with respect to the given leaves only. No
/// leaf `grad` buffer is touched, so parameter gradients stay clean.
std::vector<std::vector<double>> gradients(const Tensor& loss, std::span<const Tensor> wrt);

/// While alive on the current thread, ops do not record parents.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_mode_enabled() noexcept;

namespace detail {

/// Creates an op output and, when gradient recording is on and any parent
/// requires grad, attaches it to the tape.
Tensor make_result(Shape shape, std::vector<double> data, std::string_view op,
                   std::vector<Tensor> parents, BackwardFn backward);

}  // namespace detail

}  // namespace rgrid
