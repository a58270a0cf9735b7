#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "hicl/numerics/ndarray.hpp"

namespace hicl {

template <typename T>
class Graph;

// Handle to a node of a Graph. Cheap to copy; only valid while its graph lives.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Graph<T>* graph, std::size_t id) : graph_(graph), id_(id) {}

  bool valid() const { return graph_ != nullptr; }
  Graph<T>& graph() const { return *graph_; }
  std::size_t id() const { return id_; }
  const NdArray<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t axis) const { return shape().at(axis); }

 private:
  Graph<T>* graph_ = nullptr;
  std::size_t id_ = 0;
};

enum class NodeKind { kInput, kParameter, kOp };

// Define-by-run computation graph. Every primitive records a node and
// evaluates it immediately; the recorded tape can then be differentiated in
// reverse (backward) or re-executed on new leaf values (forward).
template <typename T>
class Graph {
 public:
  using Array = NdArray<T>;
  using Kernel = std::function<void(Graph&, std::size_t)>;

  struct Node {
    NodeKind kind = NodeKind::kOp;
    std::string op;
    std::string name;
    std::vector<std::size_t> inputs;
    Array value;
    Array grad;
    bool has_grad = false;
    bool requires_grad = false;
    Kernel forward;
    Kernel backward;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Named leaf that does not receive a gradient.
  Var<T> input(std::string name, Array value);
  // Named leaf whose gradient is returned by backward().
  Var<T> parameter(std::string name, Array value);
  // Anonymous non-differentiable leaf.
  Var<T> constant(Array value);

  // Appends an op node and runs `forward` once. The node requires a gradient
  // iff any input does; `backward` is skipped otherwise.
  Var<T> record(std::string op, std::vector<std::size_t> inputs, Kernel forward,
                Kernel backward);

  void mark_output(const std::string& name, Var<T> v) { outputs_[name] = v.id(); }

  // Rebinds the named leaves and re-executes every op node in recorded order.
  // Returns the values of all marked outputs.
  std::map<std::string, Array> forward(
      const std::map<std::string, Array>& bindings);

  // Reverse sweep from a scalar node. Returns d(output)/d(parameter) for every
  // parameter leaf; parameters the output does not depend on get zeros.
  std::map<std::string, Array> backward(Var<T> output);

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t id) const { return nodes_.at(id); }
  const Array& value(std::size_t id) const { return nodes_[id].value; }
  Array& mutable_value(std::size_t id) { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  // Gradient buffer of a node, zero-initialized on first access.
  Array& grad(std::size_t id);

  // Test hook: replaces the backward rule of an already-recorded node.
  void override_backward(std::size_t id, Kernel backward) {
    nodes_.at(id).backward = std::move(backward);
  }

 private:
  Var<T> add_leaf(NodeKind kind, std::string name, Array value);
  void check_finite(std::size_t id, const Array& a, const char* what) const;

  std::vector<Node> nodes_;
  std::map<std::string, std::size_t> leaves_;
  std::map<std::string, std::size_t> outputs_;
};

template <typename T>
const NdArray<T>& Var<T>::value() const {
  return graph_->value(id_);
}

}  // namespace hicl
