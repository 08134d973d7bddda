#pragma once

#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace yolomed::ag {

// Dense row-major tensor of doubles. All network math runs in float64 so
// gradient checks against central differences are meaningful.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<long> shape)
        : shape_(std::move(shape)), data_(numel_of(shape_), 0.0) {}

    Tensor(std::vector<long> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (static_cast<long>(data_.size()) != numel_of(shape_))
            throw std::invalid_argument("Tensor: data size does not match shape");
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    static Tensor full(std::vector<long> shape, double v) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }

    const std::vector<long>& shape() const { return shape_; }
    long dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
    int ndim() const { return static_cast<int>(shape_.size()); }
    long numel() const { return static_cast<long>(data_.size()); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    double& operator[](long i) { return data_[static_cast<size_t>(i)]; }
    double operator[](long i) const { return data_[static_cast<size_t>(i)]; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    Tensor reshaped(std::vector<long> shape) const {
        if (numel_of(shape) != numel())
            throw std::invalid_argument("Tensor: reshape changes element count");
        return Tensor(std::move(shape), data_);
    }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const;
    double max_abs() const;

    std::string shape_str() const;

    static long numel_of(const std::vector<long>& shape) {
        long n = 1;
        for (long d : shape) {
            if (d < 0) throw std::invalid_argument("Tensor: negative dim");
            n *= d;
        }
        return n;
    }

private:
    std::vector<long> shape_;
    std::vector<double> data_;
};

}  // namespace yolomed::ag
