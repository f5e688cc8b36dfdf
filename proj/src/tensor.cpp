// Copyright 2026 The lipedit Authors
// SPDX-License-Identifier: Apache-2.0

#include "lipedit/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace lipedit {

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
        if (d < 0) throw Error("negative extent in shape " + shape_str(shape));
        n *= d;
    }
    return n;
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(static_cast<size_t>(shape_numel(shape_)), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<int64_t>(data_.size()) != shape_numel(shape_)) {
        throw Error("tensor payload of " + std::to_string(data_.size()) + " values does not match shape " +
                    shape_str(shape_));
    }
}

Tensor Tensor::from(std::initializer_list<double> values) {
    return Tensor({static_cast<int64_t>(values.size())}, std::vector<double>(values));
}

int64_t Tensor::dim(int axis) const {
    if (axis < 0) axis += rank();
    if (axis < 0 || axis >= rank()) throw Error("axis out of range for shape " + shape_str(shape_));
    return shape_[static_cast<size_t>(axis)];
}

double Tensor::item() const {
    if (data_.size() != 1) throw Error("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
    if (shape_numel(shape) != static_cast<int64_t>(data_.size())) {
        throw Error("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
}

int64_t Tensor::row_size() const {
    if (shape_.empty()) throw Error("row_size() on scalar");
    return shape_[0] == 0 ? shape_numel(Shape(shape_.begin() + 1, shape_.end()))
                          : static_cast<int64_t>(data_.size()) / shape_[0];
}

Tensor Tensor::slice0(int64_t begin, int64_t count) const {
    if (shape_.empty() || begin < 0 || count < 0 || begin + count > shape_[0]) {
        throw Error("slice0(" + std::to_string(begin) + "," + std::to_string(count) + ") out of range for " +
                    shape_str(shape_));
    }
    Shape s = shape_;
    s[0] = count;
    const int64_t rs = row_size();
    std::vector<double> out(data_.begin() + begin * rs, data_.begin() + (begin + count) * rs);
    return Tensor(std::move(s), std::move(out));
}

bool Tensor::bit_equal(const Tensor& other) const {
    if (shape_ != other.shape_) return false;
    return data_.empty() || std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(double)) == 0;
}

bool Tensor::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor concat0(std::span<const Tensor> parts) {
    if (parts.empty()) throw Error("concat0 of zero tensors");
    Shape s = parts[0].shape();
    if (s.empty()) throw Error("concat0 of scalars");
    int64_t rows = 0;
    for (const auto& p : parts) {
        if (p.rank() != static_cast<int>(s.size()) || !std::equal(s.begin() + 1, s.end(), p.shape().begin() + 1)) {
            throw Error("concat0 shape mismatch: " + shape_str(s) + " vs " + shape_str(p.shape()));
        }
        rows += p.shape()[0];
    }
    s[0] = rows;
    std::vector<double> out;
    out.reserve(static_cast<size_t>(shape_numel(s)));
    for (const auto& p : parts) out.insert(out.end(), p.vec().begin(), p.vec().end());
    return Tensor(std::move(s), std::move(out));
}

double l1_norm(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += std::abs(v);
    return s;
}

double l2_norm(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v * v;
    return std::sqrt(s);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw Error("max_abs_diff shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    double m = 0.0;
    for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

double rel_l2(const Tensor& a, const Tensor& b, double floor) {
    if (!a.same_shape(b)) throw Error("rel_l2 shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    double num = 0.0;
    for (size_t i = 0; i < a.size(); ++i) num += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(num) / std::max(l2_norm(b), floor);
}

}  // namespace lipedit
