#pragma once

// Differentiable primitives. Every function records one node on the graph of
// its first argument. Binary elementwise ops broadcast numpy-style.

#include <cstddef>
#include <vector>

#include "hicl/numerics/graph.hpp"

namespace hicl::ops {

// [..., k] x [k, n] -> [..., n]
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b);
// [batch, m, k] x [batch, k, n] -> [batch, m, n]; with trans_b, b is [batch, n, k].
template <typename T>
Var<T> bmm(Var<T> a, Var<T> b, bool trans_b = false);

template <typename T>
Var<T> add(Var<T> a, Var<T> b);
template <typename T>
Var<T> sub(Var<T> a, Var<T> b);
template <typename T>
Var<T> mul(Var<T> a, Var<T> b);
template <typename T>
Var<T> div(Var<T> a, Var<T> b);
template <typename T>
Var<T> maximum(Var<T> a, Var<T> b);

template <typename T>
Var<T> scale(Var<T> a, T factor);
template <typename T>
Var<T> add_scalar(Var<T> a, T offset);

template <typename T>
Var<T> exp(Var<T> a);
template <typename T>
Var<T> log(Var<T> a);
template <typename T>
Var<T> sqrt(Var<T> a);
template <typename T>
Var<T> tanh(Var<T> a);
template <typename T>
Var<T> sigmoid(Var<T> a);
template <typename T>
Var<T> silu(Var<T> a);
template <typename T>
Var<T> softplus(Var<T> a);
template <typename T>
Var<T> relu(Var<T> a);
template <typename T>
Var<T> gelu(Var<T> a);  // tanh approximation, see kernels::gelu

template <typename T>
Var<T> sum(Var<T> a, std::size_t axis, bool keepdim = false);
template <typename T>
Var<T> mean(Var<T> a, std::size_t axis, bool keepdim = false);
template <typename T>
Var<T> sum_all(Var<T> a);
template <typename T>
Var<T> mean_all(Var<T> a);

template <typename T>
Var<T> reshape(Var<T> a, Shape shape);
template <typename T>
Var<T> permute(Var<T> a, std::vector<std::size_t> perm);
template <typename T>
Var<T> slice(Var<T> a, std::size_t axis, std::size_t begin, std::size_t end);
template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis);

// Softmax over the last axis. With causal = true the last two axes are a
// square [query, key] block and keys after the query get probability zero.
template <typename T>
Var<T> softmax(Var<T> a, bool causal = false);

// Selective scan; see kernels::ssm_scan_forward for shapes and semantics.
// delta must be strictly positive.
template <typename T>
Var<T> ssm_scan(Var<T> u, Var<T> delta, Var<T> a, Var<T> b, Var<T> c,
                Var<T> d);

}  // namespace hicl::ops
