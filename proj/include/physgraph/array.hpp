#pragma once
// Dense row-major double tensor used throughout the numeric core.

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace physgraph::nn {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

struct Array {
    Shape shape;
    std::vector<double> data;

    Array() = default;
    explicit Array(Shape s) : shape(std::move(s)), data(static_cast<std::size_t>(shape_numel(shape)), 0.0) {}
    Array(Shape s, double fill)
        : shape(std::move(s)), data(static_cast<std::size_t>(shape_numel(shape)), fill) {}
    Array(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<std::int64_t>(data.size()) != shape_numel(shape))
            throw std::invalid_argument("Array: data length does not match shape " + shape_str(shape));
    }

    static Array scalar(double v) { return Array({1}, {v}); }

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    std::int64_t dim(std::size_t i) const { return shape[i]; }
    std::size_t ndim() const { return shape.size(); }

    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }

    bool same_shape(const Array& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

using MatMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

// Views an array as a (rows x cols) row-major matrix; rows = numel / cols.
inline MatMap as_matrix(Array& a, std::int64_t cols) {
    return MatMap(a.data.data(), a.numel() / cols, cols);
}
inline ConstMatMap as_matrix(const Array& a, std::int64_t cols) {
    return ConstMatMap(a.data.data(), a.numel() / cols, cols);
}
inline VecMap as_vector(Array& a) { return VecMap(a.data.data(), a.numel()); }
inline ConstVecMap as_vector(const Array& a) { return ConstVecMap(a.data.data(), a.numel()); }

}  // namespace physgraph::nn
