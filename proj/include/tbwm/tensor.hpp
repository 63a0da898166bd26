#pragma once

// Minimal dense row-major tensor of doubles. Copies are shallow (shared
// storage); clone() deep-copies. Most of the codebase works with 2D shapes;
// image ops carry their own (C, H, W) metadata next to a flattened 2D view.

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <vector>

namespace tbwm {

class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
        store_ = std::make_shared<std::vector<double>>(count(shape_), 0.0);
    }

    Tensor(int rows, int cols) : Tensor(std::vector<int>{rows, cols}) {}

    static Tensor zeros(int rows, int cols) { return Tensor(rows, cols); }

    static Tensor from(std::vector<int> shape, std::vector<double> values) {
        Tensor t;
        t.shape_ = std::move(shape);
        if (static_cast<std::int64_t>(values.size()) != count(t.shape_))
            throw std::invalid_argument("Tensor::from: size mismatch");
        t.store_ = std::make_shared<std::vector<double>>(std::move(values));
        return t;
    }

    static Tensor row(std::vector<double> values) {
        const int n = static_cast<int>(values.size());
        return from({1, n}, std::move(values));
    }

    bool defined() const { return store_ != nullptr; }

    const std::vector<int>& shape() const { return shape_; }

    int dim(int i) const { return shape_.at(i); }

    int rows() const {
        if (shape_.size() != 2) throw std::logic_error("Tensor: not 2D");
        return shape_[0];
    }

    int cols() const {
        if (shape_.size() != 2) throw std::logic_error("Tensor: not 2D");
        return shape_[1];
    }

    std::int64_t size() const { return store_ ? static_cast<std::int64_t>(store_->size()) : 0; }

    double* data() { return store_->data(); }
    const double* data() const { return store_->data(); }

    double& at(int r, int c) { return (*store_)[static_cast<std::size_t>(r) * cols() + c]; }
    double at(int r, int c) const { return (*store_)[static_cast<std::size_t>(r) * cols() + c]; }

    double& operator[](std::int64_t i) { return (*store_)[static_cast<std::size_t>(i)]; }
    double operator[](std::int64_t i) const { return (*store_)[static_cast<std::size_t>(i)]; }

    Tensor clone() const {
        Tensor t;
        t.shape_ = shape_;
        t.store_ = std::make_shared<std::vector<double>>(*store_);
        return t;
    }

    void fill(double v) {
        for (auto& x : *store_) x = v;
    }

    // Reinterprets the flat buffer under a new shape (shares storage).
    Tensor reshaped(std::vector<int> shape) const {
        if (count(shape) != size())
            throw std::invalid_argument("Tensor::reshaped: size mismatch");
        Tensor t;
        t.shape_ = std::move(shape);
        t.store_ = store_;
        return t;
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

private:
    static std::int64_t count(const std::vector<int>& shape) {
        std::int64_t n = 1;
        for (int d : shape) {
            if (d < 0) throw std::invalid_argument("Tensor: negative dim");
            n *= d;
        }
        return n;
    }

    std::vector<int> shape_;
    std::shared_ptr<std::vector<double>> store_;
};

}  // namespace tbwm
