#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "caal/common.hpp"

namespace caal {

// Dense row-major double tensor. Copies share the buffer; clone() deep-copies.
// All numerics run in double: the oracle tolerances (1e-12 equality checks,
// finite-difference gradient agreement) leave no headroom for float32.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape) {
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = std::make_shared<std::vector<double>>(t.count(), 0.0);
        return t;
    }
    static Tensor full(std::vector<int> shape, double v) {
        Tensor t = zeros(std::move(shape));
        for (auto& x : *t.data_) x = v;
        return t;
    }
    static Tensor from(std::vector<double> vals, std::vector<int> shape) {
        Tensor t;
        t.shape_ = std::move(shape);
        if (static_cast<int64_t>(vals.size()) != t.count())
            throw ShapeError("Tensor::from: value count does not match shape");
        t.data_ = std::make_shared<std::vector<double>>(std::move(vals));
        return t;
    }
    static Tensor scalar(double v) { return from({v}, {1}); }

    bool defined() const { return data_ != nullptr; }
    const std::vector<int>& shape() const { return shape_; }
    int dim() const { return static_cast<int>(shape_.size()); }
    int shape(int i) const { return shape_[static_cast<size_t>(i)]; }
    int64_t size() const { return defined() ? static_cast<int64_t>(data_->size()) : 0; }

    double* data() { return data_->data(); }
    const double* data() const { return data_->data(); }
    double& operator[](int64_t i) { return (*data_)[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return (*data_)[static_cast<size_t>(i)]; }

    double item() const {
        if (size() != 1) throw ShapeError("Tensor::item: size != 1");
        return (*data_)[0];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    Tensor clone() const {
        Tensor t;
        t.shape_ = shape_;
        t.data_ = std::make_shared<std::vector<double>>(*data_);
        return t;
    }

    // shares the buffer; element count must match
    Tensor reshaped(std::vector<int> new_shape) const {
        Tensor t;
        t.shape_ = std::move(new_shape);
        t.data_ = data_;
        if (t.count() != size()) throw ShapeError("Tensor::reshaped: element count mismatch");
        return t;
    }

    bool all_finite() const {
        for (double v : *data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    std::string shape_str() const {
        std::string s = "(";
        for (size_t i = 0; i < shape_.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape_[i]);
        }
        return s + ")";
    }

private:
    int64_t count() const {
        int64_t n = 1;
        for (int d : shape_) n *= d;
        return n;
    }

    std::vector<int> shape_;
    std::shared_ptr<std::vector<double>> data_;
};

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " +
                         b.shape_str());
}

}  // namespace caal
