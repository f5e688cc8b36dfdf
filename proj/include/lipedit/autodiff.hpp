// Copyright 2026 The lipedit Authors
// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode automatic differentiation over dense tensors.
//
// A Var is a handle to a node in a per-forward-pass graph. Operations record
// their parents and a backward closure only when grad mode is enabled and at
// least one input requires a gradient; everything else is a plain value
// computation. The graph lives exactly as long as the Vars that reference it.

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "lipedit/tensor.hpp"

namespace lipedit::ad {

namespace detail {
struct Node;
}

class Var {
public:
    Var() = default;
    explicit Var(Tensor value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    bool requires_grad() const;

    /// Gradient accumulated by the last backward(); zeros if this node was not reached.
    const Tensor& grad() const;
    bool has_grad() const;
    void zero_grad();

    /// Replaces the value of a leaf (optimizer updates). Shape must match.
    void assign(Tensor value);
    /// Freezes or unfreezes a leaf; graphs built afterwards follow the new setting.
    void set_requires_grad(bool requires_grad);

    const std::shared_ptr<detail::Node>& node() const { return node_; }

private:
    explicit Var(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
    std::shared_ptr<detail::Node> node_;

    friend Var make_result(Tensor, std::vector<Var>, std::function<void(detail::Node&)>);
};

inline Var parameter(Tensor value) { return Var(std::move(value), true); }
inline Var constant(Tensor value) { return Var(std::move(value), false); }

/// Disables graph recording within its scope (inference).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

/// Populates gradients for every node reachable from `output`, which must hold one value.
void backward(const Var& output);

// Elementwise arithmetic with trailing-dimension broadcasting.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator*(const Var& a, double s) { return scale(a, s); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }

Var square(const Var& a);
Var silu(const Var& a);
Var gelu(const Var& a);
Var tanh(const Var& a);
Var sigmoid(const Var& a);

/// Batched matrix product: [..,m,k] x [..,k,n]. A rank-2 right operand is shared across the batch.
Var matmul(const Var& a, const Var& b);
/// x·W + bias with x [rows, in], W [in, out], bias [out] (bias may be undefined).
Var linear(const Var& x, const Var& weight, const Var& bias);

Var reshape(const Var& a, Shape shape);
Var transpose(const Var& a);  // rank-2 only

Var sum(const Var& a);
Var mean(const Var& a);

/// Normalizes over the last axis without affine parameters.
Var layer_norm(const Var& a, double eps = 1e-6);
Var softmax(const Var& a);

/// Multi-head scaled dot-product attention.
/// q [S, H*d], k/v [T, H*d]; additive_mask is [S, T] (may be empty). Entries of
/// -inf in the mask give exactly zero weight. Throws on non-finite scores or a
/// fully masked row.
Var attention(const Var& q, const Var& k, const Var& v, int heads, const Tensor& additive_mask = Tensor());

/// Rotates channel pairs (2j, 2j+1) of every head of x [S, H*d] by angles[s, j] (angles [S, d/2]).
Var rope_rotate(const Var& x, const Tensor& angles, int heads);

Var concat_rows(std::span<const Var> parts);
Var slice_rows(const Var& a, int64_t begin, int64_t count);
Var gather_rows(const Var& a, std::span<const int64_t> rows);
Var slice_cols(const Var& a, int64_t begin, int64_t count);

/// Rows r with row_mask[r] != 0 become z[r] + update[r]; all other rows are copied from z.
Var masked_row_add(const Var& z, const Var& update, std::span<const uint8_t> row_mask);

}  // namespace lipedit::ad
