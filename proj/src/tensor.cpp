#include "tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

namespace attrib {

namespace {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) {
        if (e == 0) throw ShapeError("zero extent in shape " + shape_to_string(shape));
        n *= e;
    }
    return n;
}

}  // namespace

std::string shape_to_string(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

Tensor::Tensor(std::vector<std::size_t> shape)
    : shape_(std::move(shape)), data_(shape_product(shape_), 0.0) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_product(shape_)) {
        throw ShapeError("data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_to_string(shape_));
    }
}

Tensor Tensor::zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }

Tensor Tensor::identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
    return t;
}

double& Tensor::at(std::size_t i, std::size_t j) {
    return data_[i * shape_[1] + j];
}
double Tensor::at(std::size_t i, std::size_t j) const {
    return data_[i * shape_[1] + j];
}
double& Tensor::at(std::size_t h, std::size_t i, std::size_t j) {
    return data_[(h * shape_[1] + i) * shape_[2] + j];
}
double Tensor::at(std::size_t h, std::size_t i, std::size_t j) const {
    return data_[(h * shape_[1] + i) * shape_[2] + j];
}

bool Tensor::all_finite() const {
    for (double v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

double Tensor::sum() const {
    double s = 0.0;
    for (double v : data_) s += v;
    return s;
}

double Tensor::abs_sum() const {
    double s = 0.0;
    for (double v : data_) s += std::abs(v);
    return s;
}

std::string Tensor::shape_str() const { return shape_to_string(shape_); }

Tensor matmul(const Tensor& a, const Tensor& b) {
    // 2-D matmul, plus batched 3-D (shared leading extent).
    if (a.rank() == 2 && b.rank() == 2) {
        if (a.extent(1) != b.extent(0)) {
            throw ShapeError("matmul inner extents differ: " + a.shape_str() + " vs " + b.shape_str());
        }
        const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
        Tensor out({m, n});
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                double acc = 0.0;
                for (std::size_t p = 0; p < k; ++p) acc += a.at(i, p) * b.at(p, j);
                out.at(i, j) = acc;
            }
        return out;
    }
    if (a.rank() == 3 && b.rank() == 3) {
        if (a.extent(0) != b.extent(0) || a.extent(2) != b.extent(1)) {
            throw ShapeError("batched matmul shapes differ: " + a.shape_str() + " vs " + b.shape_str());
        }
        const std::size_t hh = a.extent(0), m = a.extent(1), k = a.extent(2), n = b.extent(2);
        Tensor out({hh, m, n});
        for (std::size_t h = 0; h < hh; ++h)
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    double acc = 0.0;
                    for (std::size_t p = 0; p < k; ++p) acc += a.at(h, i, p) * b.at(h, p, j);
                    out.at(h, i, j) = acc;
                }
        return out;
    }
    throw ShapeError("matmul expects 2-D or 3-D operands, got " + a.shape_str() + " and " + b.shape_str());
}

Tensor add(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) {
        throw ShapeError("add shapes differ: " + a.shape_str() + " vs " + b.shape_str());
    }
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
    return out;
}

Tensor softmax_lastdim(const Tensor& x) {
    if (x.rank() == 0) throw ShapeError("softmax on scalar");
    const std::size_t last = x.shape().back();
    const std::size_t rows = x.size() / last;
    Tensor out(x.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = x.data() + r * last;
        double* o = out.data() + r * last;
        double mx = in[0];
        for (std::size_t j = 1; j < last; ++j) mx = std::max(mx, in[j]);
        double denom = 0.0;
        for (std::size_t j = 0; j < last; ++j) {
            o[j] = std::exp(in[j] - mx);
            denom += o[j];
        }
        for (std::size_t j = 0; j < last; ++j) o[j] /= denom;
    }
    return out;
}

double normal_cdf(double x) { return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))); }

Tensor gelu(const Tensor& x) {
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * normal_cdf(x[i]);
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    const std::size_t last = x.shape().back();
    if (gamma.size() != last || beta.size() != last) {
        throw ShapeError("layer_norm affine params " + gamma.shape_str() + "/" + beta.shape_str() +
                         " do not match last extent of " + x.shape_str());
    }
    const std::size_t rows = x.size() / last;
    Tensor out(x.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = x.data() + r * last;
        double* o = out.data() + r * last;
        double mean = 0.0;
        for (std::size_t j = 0; j < last; ++j) mean += in[j];
        mean /= static_cast<double>(last);
        double var = 0.0;
        for (std::size_t j = 0; j < last; ++j) var += (in[j] - mean) * (in[j] - mean);
        var /= static_cast<double>(last);
        const double inv = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < last; ++j) o[j] = (in[j] - mean) * inv * gamma[j] + beta[j];
    }
    return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
    if (x.rank() != 2 || w.rank() != 2 || x.extent(1) != w.extent(0) || bias.size() != w.extent(1)) {
        throw ShapeError("linear shapes do not conform: x=" + x.shape_str() + " w=" + w.shape_str() +
                         " bias=" + bias.shape_str());
    }
    Tensor out = matmul(x, w);
    for (std::size_t i = 0; i < out.extent(0); ++i)
        for (std::size_t j = 0; j < out.extent(1); ++j) out.at(i, j) += bias[j];
    return out;
}

}  // namespace attrib
