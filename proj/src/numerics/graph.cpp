#include "hicl/numerics/graph.hpp"

#include <cmath>

namespace hicl {

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

template <typename T>
Var<T> Graph<T>::add_leaf(NodeKind kind, std::string name, Array value) {
  if (!name.empty() && leaves_.count(name)) {
    throw Error("graph: duplicate leaf name '" + name + "'");
  }
  const std::size_t id = nodes_.size();
  check_finite(id, value, "leaf");
  Node n;
  n.kind = kind;
  n.op = kind == NodeKind::kParameter ? "parameter" : "input";
  n.name = name;
  n.value = std::move(value);
  n.requires_grad = kind == NodeKind::kParameter;
  nodes_.push_back(std::move(n));
  if (!name.empty()) leaves_[name] = id;
  return Var<T>(this, id);
}

template <typename T>
Var<T> Graph<T>::input(std::string name, Array value) {
  return add_leaf(NodeKind::kInput, std::move(name), std::move(value));
}

template <typename T>
Var<T> Graph<T>::parameter(std::string name, Array value) {
  if (name.empty()) throw Error("graph: parameters must be named");
  return add_leaf(NodeKind::kParameter, std::move(name), std::move(value));
}

template <typename T>
Var<T> Graph<T>::constant(Array value) {
  return add_leaf(NodeKind::kInput, std::string(), std::move(value));
}

template <typename T>
Var<T> Graph<T>::record(std::string op, std::vector<std::size_t> inputs,
                        Kernel forward, Kernel backward) {
  const std::size_t id = nodes_.size();
  bool needs_grad = false;
  for (std::size_t in : inputs) {
    if (in >= id) throw Error("graph: op '" + op + "' references a later node");
    needs_grad = needs_grad || nodes_[in].requires_grad;
  }
  Node n;
  n.op = std::move(op);
  n.inputs = std::move(inputs);
  n.requires_grad = needs_grad;
  n.forward = std::move(forward);
  n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  nodes_[id].forward(*this, id);
  check_finite(id, nodes_[id].value, "value");
  return Var<T>(this, id);
}

template <typename T>
void Graph<T>::check_finite(std::size_t id, const Array& a,
                            const char* what) const {
  if (a.all_finite()) return;
  const std::string op = id < nodes_.size() ? nodes_[id].op : "leaf";
  throw NonFiniteError("non-finite " + std::string(what) + " at node " +
                           std::to_string(id) + " (" + op + ")",
                       id);
}

template <typename T>
NdArray<T>& Graph<T>::grad(std::size_t id) {
  Node& n = nodes_[id];
  if (!n.has_grad) {
    if (n.grad.shape() != n.value.shape()) {
      n.grad = Array(n.value.shape());
    } else {
      n.grad.fill(T(0));
    }
    n.has_grad = true;
  }
  return n.grad;
}

template <typename T>
std::map<std::string, NdArray<T>> Graph<T>::forward(
    const std::map<std::string, Array>& bindings) {
  for (const auto& [name, value] : bindings) {
    auto it = leaves_.find(name);
    if (it == leaves_.end()) throw Error("graph: no leaf named '" + name + "'");
    Node& leaf = nodes_[it->second];
    if (leaf.value.shape() != value.shape()) {
      throw ShapeError("graph: binding for '" + name + "' has shape " +
                       shape_str(value.shape()) + ", expected " +
                       shape_str(leaf.value.shape()));
    }
    check_finite(it->second, value, "leaf");
    leaf.value = value;
  }
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    if (nodes_[id].kind != NodeKind::kOp) continue;
    nodes_[id].forward(*this, id);
    check_finite(id, nodes_[id].value, "value");
  }
  std::map<std::string, Array> out;
  for (const auto& [name, id] : outputs_) out[name] = nodes_[id].value;
  return out;
}

template <typename T>
std::map<std::string, NdArray<T>> Graph<T>::backward(Var<T> output) {
  if (output.value().size() != 1) {
    throw ShapeError("graph: backward needs a scalar output, got shape " +
                     shape_str(output.shape()));
  }
  for (Node& n : nodes_) n.has_grad = false;
  grad(output.id()).fill(T(1));
  for (std::size_t id = output.id() + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.has_grad || !n.requires_grad || n.kind != NodeKind::kOp) continue;
    check_finite(id, n.grad, "gradient");
    n.backward(*this, id);
  }
  std::map<std::string, Array> grads;
  for (const auto& [name, id] : leaves_) {
    Node& n = nodes_[id];
    if (n.kind != NodeKind::kParameter) continue;
    if (n.has_grad) {
      check_finite(id, n.grad, "gradient");
      grads[name] = n.grad;
    } else {
      grads[name] = Array(n.value.shape());
    }
  }
  return grads;
}

template class Graph<float>;
template class Graph<double>;

}  // namespace hicl
