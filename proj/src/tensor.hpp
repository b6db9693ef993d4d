#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace attrib {

class ShapeError : public std::runtime_error {
public:
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Dense row-major tensor of 64-bit floats. Immutable by convention once
// handed to a kernel; all kernels return fresh tensors.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> shape);
    Tensor(std::vector<std::size_t> shape, std::vector<double> data);

    static Tensor zeros(std::vector<std::size_t> shape);
    static Tensor identity(std::size_t n);

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    std::size_t extent(std::size_t dim) const { return shape_.at(dim); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    // 2-D / 3-D element access, row-major.
    double& at(std::size_t i, std::size_t j);
    double at(std::size_t i, std::size_t j) const;
    double& at(std::size_t h, std::size_t i, std::size_t j);
    double at(std::size_t h, std::size_t i, std::size_t j) const;

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool all_finite() const;
    double sum() const;
    double abs_sum() const;

    std::string shape_str() const;

private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

// Forward kernels. All pure; deterministic ascending-index reduction order.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor softmax_lastdim(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

// Exact-erf standard normal CDF, used by gelu.
double normal_cdf(double x);

std::string shape_to_string(const std::vector<std::size_t>& shape);

}  // namespace attrib
