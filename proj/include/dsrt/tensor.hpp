// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors with shared value storage. A Tensor is a cheap
// handle; ops in ops.hpp produce fresh tensors and record adjoint rules on
// the active Graph (graph.hpp). Values are validated on construction and
// after every public operation: NaN/Inf raises NumericError, never
// propagates silently.
#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "dsrt/errors.hpp"
#include "dsrt/rng.hpp"

namespace dsrt {

using Shape = std::vector<size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

inline size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (size_t e : s) n *= e;
    return n;
}

namespace detail {
inline uint64_t next_tensor_id() {
    static uint64_t counter = 0;  // single-threaded core (see concurrency notes)
    return ++counter;
}
}  // namespace detail

template <typename R>
class Tensor {
    static_assert(std::is_floating_point_v<R>);

    struct Storage {
        Shape shape;
        std::vector<R> data;
        bool requires_grad = false;
        uint64_t id = detail::next_tensor_id();
    };

public:
    using value_type = R;

    Tensor() = default;

    static Tensor zeros(Shape shape) {
        Tensor t;
        t.st_ = std::make_shared<Storage>();
        t.st_->shape = std::move(shape);
        t.st_->data.assign(shape_numel(t.st_->shape), R(0));
        return t;
    }

    static Tensor full(Shape shape, R v) {
        Tensor t = zeros(std::move(shape));
        for (R& x : t.st_->data) x = v;
        t.check_finite("full");
        return t;
    }

    static Tensor scalar(R v) { return full({1}, v); }

    static Tensor from_data(Shape shape, std::vector<R> data) {
        if (shape_numel(shape) != data.size()) {
            throw ShapeError("tensor: data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        }
        Tensor t;
        t.st_ = std::make_shared<Storage>();
        t.st_->shape = std::move(shape);
        t.st_->data = std::move(data);
        t.check_finite("from_data");
        return t;
    }

    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
        Tensor t = zeros(std::move(shape));
        for (R& x : t.st_->data) x = static_cast<R>(stddev * rng.normal());
        return t;
    }

    bool valid() const { return st_ != nullptr; }
    uint64_t id() const { return st_->id; }
    const Shape& shape() const { return st_->shape; }
    size_t rank() const { return st_->shape.size(); }
    size_t numel() const { return st_->data.size(); }

    size_t rows() const { return rank() == 2 ? st_->shape[0] : (rank() == 1 ? 1 : numel()); }
    size_t cols() const { return rank() == 2 ? st_->shape[1] : numel(); }

    R* data() { return st_->data.data(); }
    const R* data() const { return st_->data.data(); }
    std::vector<R>& vec() { return st_->data; }
    const std::vector<R>& vec() const { return st_->data; }

    R& at(size_t i) { return st_->data[i]; }
    R at(size_t i) const { return st_->data[i]; }
    R& at(size_t i, size_t j) { return st_->data[i * cols() + j]; }
    R at(size_t i, size_t j) const { return st_->data[i * cols() + j]; }

    R scalar_value() const {
        if (numel() != 1) {
            throw ShapeError("scalar_value: tensor has shape " + shape_str(shape()));
        }
        return st_->data[0];
    }

    bool requires_grad() const { return st_->requires_grad; }
    Tensor& set_requires_grad(bool v = true) {
        st_->requires_grad = v;
        return *this;
    }

    Tensor clone() const {
        Tensor t;
        t.st_ = std::make_shared<Storage>();
        t.st_->shape = st_->shape;
        t.st_->data = st_->data;
        t.st_->requires_grad = st_->requires_grad;
        return t;
    }

    // Cast to a different scalar type (fresh tensor, no grad linkage).
    template <typename R2>
    Tensor<R2> cast() const {
        std::vector<R2> d(numel());
        for (size_t i = 0; i < numel(); ++i) d[i] = static_cast<R2>(st_->data[i]);
        return Tensor<R2>::from_data(shape(), std::move(d));
    }

    void check_finite(const char* op) const {
        for (const R x : st_->data) {
            if (!std::isfinite(x)) {
                throw NumericError(std::string(op) + ": non-finite value in tensor " +
                                   shape_str(shape()));
            }
        }
    }

    bool same_shape(const Tensor& o) const { return st_->shape == o.st_->shape; }

    bool bit_equal(const Tensor& o) const {
        if (!same_shape(o)) return false;
        return std::memcmp(data(), o.data(), numel() * sizeof(R)) == 0;
    }

private:
    std::shared_ptr<Storage> st_;
};

template <typename R>
double max_abs_diff(const Tensor<R>& a, const Tensor<R>& b) {
    if (!a.same_shape(b)) {
        throw ShapeError("max_abs_diff: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    double m = 0;
    for (size_t i = 0; i < a.numel(); ++i) {
        m = std::max(m, std::abs(static_cast<double>(a.at(i)) - static_cast<double>(b.at(i))));
    }
    return m;
}

}  // namespace dsrt
