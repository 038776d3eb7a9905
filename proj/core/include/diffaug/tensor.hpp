#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "diffaug/errors.hpp"

namespace diffaug {

using MatrixRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Dense row-major double tensor with value semantics. Shapes are small
// integer vectors; rank 1..4 in practice (N,C,H,W for activations).
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
        data_.assign(static_cast<size_t>(count(shape_)), 0.0);
    }

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<int> shape, double v) {
        Tensor t(std::move(shape));
        t.flat().setConstant(v);
        return t;
    }
    static Tensor scalar(double v) { return full({1}, v); }
    static Tensor from_vector(std::vector<int> shape, std::vector<double> values) {
        require(count(shape) == static_cast<int64_t>(values.size()), ErrorKind::ShapeMismatch,
                "from_vector: data size does not match shape");
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = std::move(values);
        return t;
    }

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
    int64_t size() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    Eigen::Map<Eigen::ArrayXd> flat() { return {data_.data(), static_cast<Eigen::Index>(data_.size())}; }
    Eigen::Map<const Eigen::ArrayXd> flat() const {
        return {data_.data(), static_cast<Eigen::Index>(data_.size())};
    }
    // 2-D row-major matrix view over the flat buffer.
    Eigen::Map<MatrixRM> mat(int rows, int cols) {
        require(static_cast<int64_t>(rows) * cols == size(), ErrorKind::ShapeMismatch, "mat: bad view size");
        return {data_.data(), rows, cols};
    }
    Eigen::Map<const MatrixRM> mat(int rows, int cols) const {
        require(static_cast<int64_t>(rows) * cols == size(), ErrorKind::ShapeMismatch, "mat: bad view size");
        return {data_.data(), rows, cols};
    }

    double at(std::initializer_list<int> idx) const { return data_[offset(idx)]; }
    void set(std::initializer_list<int> idx, double v) { data_[offset(idx)] = v; }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool all_finite() const;
    double max_abs() const;

    Tensor reshaped(std::vector<int> shape) const {
        require(count(shape) == size(), ErrorKind::ShapeMismatch, "reshape: element count mismatch");
        Tensor t = *this;
        t.shape_ = std::move(shape);
        return t;
    }

    std::string shape_str() const;

    static int64_t count(const std::vector<int>& shape) {
        int64_t n = 1;
        for (int d : shape) n *= d;
        return shape.empty() ? 0 : n;
    }

  private:
    size_t offset(std::initializer_list<int> idx) const;

    std::vector<int> shape_;
    std::vector<double> data_;
};

std::string shape_to_string(const std::vector<int>& shape);

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* where) {
    require(a.same_shape(b), ErrorKind::ShapeMismatch,
            std::string(where) + ": " + a.shape_str() + " vs " + b.shape_str());
}

}  // namespace diffaug
