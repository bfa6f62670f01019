#include "rgrid/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <unordered_map>

#include "rgrid/error.hpp"

namespace rgrid {

namespace {

std::atomic<std::uint64_t> g_next_seq{1};
thread_local bool t_grad_enabled = true;

std::shared_ptr<detail::Node> new_node(Shape shape, std::vector<double> data, bool requires_grad) {
  for (std::size_t extent : shape) {
    if (extent == 0) throw ConfigError("zero-extent dimension in shape " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw ConfigError("data length " + std::to_string(data.size()) + " does not match shape " +
                      shape_str(shape));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  node->seq = g_next_seq.fetch_add(1, std::memory_order_relaxed);
  return node;
}

const detail::Node& checked(const std::shared_ptr<detail::Node>& node) {
  if (!node) throw UsageError("operation on an undefined tensor");
  return *node;
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t extent : shape) n *= extent;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> data(shape_numel(shape), value);
  return Tensor(new_node(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  return Tensor(new_node(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return checked(node_).shape; }

std::size_t Tensor::size(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) throw UsageError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return checked(node_).data.size(); }

std::span<const double> Tensor::data() const { return checked(node_).data; }

std::span<double> Tensor::mutable_data() {
  checked(node_);
  if (!node_->parents.empty()) throw UsageError("mutable_data() on a non-leaf tensor");
  return node_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

bool Tensor::requires_grad() const { return checked(node_).requires_grad; }

void Tensor::set_requires_grad(bool on) {
  checked(node_);
  if (!node_->parents.empty()) throw UsageError("set_requires_grad() on a non-leaf tensor");
  node_->requires_grad = on;
}

bool Tensor::is_leaf() const { return checked(node_).parents.empty(); }

bool Tensor::has_grad() const { return !checked(node_).grad.empty(); }

std::span<const double> Tensor::grad() const { return checked(node_).grad; }

void Tensor::zero_grad() {
  checked(node_);
  node_->grad.clear();
}

Tensor Tensor::detach() const {
  const auto& n = checked(node_);
  return from_data(n.shape, n.data, false);
}

Tape Tape::from_root(const Tensor& root) {
  Tape tape;
  if (!root.defined()) return tape;
  std::vector<detail::Node*> stack{root.node_ptr().get()};
  std::unordered_map<detail::Node*, bool> seen;
  while (!stack.empty()) {
    detail::Node* n = stack.back();
    stack.pop_back();
    if (!n->requires_grad || seen[n]) continue;
    seen[n] = true;
    tape.nodes_.push_back(n);
    for (const auto& p : n->parents) stack.push_back(p.get());
  }
  std::sort(tape.nodes_.begin(), tape.nodes_.end(),
            [](const detail::Node* a, const detail::Node* b) { return a->seq > b->seq; });
  return tape;
}

namespace {

using GradMap = std::unordered_map<const detail::Node*, std::vector<double>>;

GradMap run_backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw UsageError("backward() needs a scalar loss, got shape " +
                     (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  Tape tape = Tape::from_root(loss);
  if (tape.empty()) throw UsageError("backward() on a loss that does not require grad");

  GradMap grads;
  grads[loss.node()] = std::vector<double>{1.0};
  std::vector<std::vector<double>*> parent_bufs;
  for (detail::Node* n : tape.nodes()) {
    if (n->parents.empty()) continue;
    auto it = grads.find(n);
    if (it == grads.end()) continue;
    parent_bufs.assign(n->parents.size(), nullptr);
    for (std::size_t i = 0; i < n->parents.size(); ++i) {
      detail::Node* p = n->parents[i].get();
      if (!p->requires_grad) continue;
      auto& buf = grads[p];
      if (buf.empty()) buf.assign(p->data.size(), 0.0);
      parent_bufs[i] = &buf;
    }
    // grads may rehash above; re-fetch the output gradient afterwards
    const std::vector<double>& gout = grads.at(n);
    n->backward(gout, parent_bufs);
    // interior gradients are not needed once propagated
    grads.erase(n);
  }
  return grads;
}

}  // namespace

void backward(const Tensor& loss) {
  GradMap grads = run_backward(loss);
  for (auto& [node, g] : grads) {
    auto* n = const_cast<detail::Node*>(node);
    if (!n->parents.empty()) continue;
    if (n->grad.empty()) {
      n->grad = std::move(g);
    } else {
      for (std::size_t i = 0; i < g.size(); ++i) n->grad[i] += g[i];
    }
  }
}

std::vector<std::vector<double>> gradients(const Tensor& loss, std::span<const Tensor> wrt) {
  GradMap grads = run_backward(loss);
  std::vector<std::vector<double>> out;
  out.reserve(wrt.size());
  for (const Tensor& t : wrt) {
    auto it = grads.find(t.node());
    out.push_back(it == grads.end() ? std::vector<double>(t.numel(), 0.0) : std::move(it->second));
  }
  return out;
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

bool grad_mode_enabled() noexcept { return t_grad_enabled; }

namespace detail {

Tensor make_result(Shape shape, std::vector<double> data, std::string_view op,
                   std::vector<Tensor> parents, BackwardFn backward) {
  auto node = new_node(std::move(shape), std::move(data), false);
  node->op = op;
  if (!t_grad_enabled) return Tensor(node);
  bool any = std::any_of(parents.begin(), parents.end(),
                         [](const Tensor& t) { return t.requires_grad(); });
  if (!any) return Tensor(node);
  node->requires_grad = true;
  node->parents.reserve(parents.size());
  for (auto& p : parents) node->parents.push_back(p.node_ptr());
  node->backward = std::move(backward);
  return Tensor(node);
}

}  // namespace detail

}  // namespace rgrid
