// Copyright 2026 The lipedit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace lipedit {

/// Raised for shape or argument errors across the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& shape);
int64_t shape_numel(const Shape& shape);

/// Dense row-major tensor of 64-bit floats. The shape is fixed at construction;
/// reshaping yields a new tensor.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor scalar(double v) { return Tensor({}, std::vector<double>{v}); }
    static Tensor from(std::initializer_list<double> values);

    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int64_t dim(int axis) const;
    size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    std::span<const double> data() const { return data_; }
    std::span<double> data() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    double operator[](size_t i) const { return data_[i]; }
    double& operator[](size_t i) { return data_[i]; }

    double item() const;

    Tensor reshaped(Shape shape) const;

    /// Rows [begin, begin+count) along axis 0.
    Tensor slice0(int64_t begin, int64_t count) const;
    /// Number of elements in one axis-0 slice.
    int64_t row_size() const;

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    /// Bitwise equality of shape and payload.
    bool bit_equal(const Tensor& other) const;
    bool all_finite() const;

private:
    Shape shape_;
    std::vector<double> data_;
};

Tensor concat0(std::span<const Tensor> parts);

double l1_norm(const Tensor& a);
double l2_norm(const Tensor& a);
double max_abs_diff(const Tensor& a, const Tensor& b);
/// ||a-b||_2 / max(||b||_2, floor)
double rel_l2(const Tensor& a, const Tensor& b, double floor = 1e-12);

}  // namespace lipedit
