#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace peswap {

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

enum class Dtype { f32, f64 };

inline const char* dtype_name(Dtype d) { return d == Dtype::f32 ? "f32" : "f64"; }
inline size_t dtype_width(Dtype d) { return d == Dtype::f32 ? 4 : 8; }

inline std::optional<Dtype> dtype_from_name(std::string_view s) {
    if (s == "f32") return Dtype::f32;
    if (s == "f64") return Dtype::f64;
    return std::nullopt;
}

template <class Real>
constexpr Dtype dtype_of();
template <>
constexpr Dtype dtype_of<float>() { return Dtype::f32; }
template <>
constexpr Dtype dtype_of<double>() { return Dtype::f64; }

// Dense row-major tensor. The buffer is shared on copy; all graph ops treat
// produced tensors as immutable, so sharing is safe. Use clone() before
// mutating a tensor you did not create.
template <class Real>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<Real>>(static_cast<size_t>(numel(shape_)), Real(0))) {}

    Tensor(Shape shape, std::vector<Real> values)
        : shape_(std::move(shape)), data_(std::make_shared<std::vector<Real>>(std::move(values))) {
        if (static_cast<int64_t>(data_->size()) != numel(shape_))
            throw std::invalid_argument("tensor: " + std::to_string(data_->size()) +
                                        " values for shape " + shape_str(shape_));
    }

    static Tensor full(Shape shape, Real v) {
        Tensor t(std::move(shape));
        for (Real& x : *t.data_) x = v;
        return t;
    }

    static Tensor scalar(Real v) { return Tensor(Shape{1}, std::vector<Real>{v}); }

    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int64_t dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
    int64_t size() const { return data_ ? static_cast<int64_t>(data_->size()) : 0; }
    bool empty() const { return !data_ || data_->empty(); }
    constexpr Dtype dtype() const { return dtype_of<Real>(); }

    Real* data() { return data_->data(); }
    const Real* data() const { return data_->data(); }
    std::span<Real> values() { return {data_->data(), data_->size()}; }
    std::span<const Real> values() const { return {data_->data(), data_->size()}; }

    Real& operator[](int64_t i) { return (*data_)[static_cast<size_t>(i)]; }
    Real operator[](int64_t i) const { return (*data_)[static_cast<size_t>(i)]; }

    // Shares the buffer under a new shape.
    Tensor reshaped(Shape s) const {
        if (numel(s) != size())
            throw std::invalid_argument("reshape: " + shape_str(shape_) + " -> " + shape_str(s));
        Tensor t;
        t.shape_ = std::move(s);
        t.data_ = data_;
        return t;
    }

    Tensor clone() const {
        Tensor t;
        t.shape_ = shape_;
        t.data_ = data_ ? std::make_shared<std::vector<Real>>(*data_) : nullptr;
        return t;
    }

    void fill(Real v) {
        for (Real& x : *data_) x = v;
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool shares_buffer(const Tensor& o) const { return data_ && data_ == o.data_; }

    bool all_finite() const {
        if (!data_) return true;
        for (Real x : *data_)
            if (!std::isfinite(static_cast<double>(x))) return false;
        return true;
    }

    bool bitwise_equal(const Tensor& o) const {
        if (shape_ != o.shape_) return false;
        if (!data_ || !o.data_) return data_ == o.data_;
        return *data_ == *o.data_;
    }

private:
    Shape shape_;
    std::shared_ptr<std::vector<Real>> data_;
};

template <class Real>
double max_abs_diff(const Tensor<Real>& a, const Tensor<Real>& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("max_abs_diff: shape mismatch");
    double m = 0;
    for (int64_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    return m;
}

} // namespace peswap
