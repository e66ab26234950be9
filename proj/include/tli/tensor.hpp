// Dense row-major tensor. The storage scalar is a template parameter; the
// checkpoint/interchange surface pins it to float, double is instantiated
// where tests need extra headroom (finite differences).
#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <cstring>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "tli/errors.hpp"

namespace tli {

using Index = std::int64_t;
using Shape = std::vector<Index>;

template <typename Scalar>
using MatrixRM =
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

template <typename Scalar>
class Tensor {
  public:
    Tensor() = default;

    explicit Tensor(Shape shape) : shape_(std::move(shape)) {
        for (Index d : shape_) {
            if (d <= 0) throw ShapeError("tensor dimension must be positive, got " + shape_str(shape_));
        }
        data_.assign(static_cast<std::size_t>(count(shape_)), Scalar(0));
    }

    Tensor(Shape shape, std::vector<Scalar> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (count(shape_) != static_cast<Index>(data_.size())) {
            throw ShapeError("data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_str(shape_));
        }
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    static Tensor full(Shape shape, Scalar value) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), value);
        return t;
    }

    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    Index dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
    Index numel() const { return static_cast<Index>(data_.size()); }
    bool empty() const { return data_.empty(); }

    Scalar* data() { return data_.data(); }
    const Scalar* data() const { return data_.data(); }
    std::vector<Scalar>& values() { return data_; }
    const std::vector<Scalar>& values() const { return data_; }

    Scalar& operator[](Index i) { return data_[static_cast<std::size_t>(i)]; }
    Scalar operator[](Index i) const { return data_[static_cast<std::size_t>(i)]; }

    Scalar& at(Index i, Index j) { return data_[static_cast<std::size_t>(i * dim(1) + j)]; }
    Scalar at(Index i, Index j) const { return data_[static_cast<std::size_t>(i * dim(1) + j)]; }

    // Reinterpret the buffer under a new shape with the same element count.
    void set_shape(Shape shape) {
        if (count(shape) != numel()) {
            throw ShapeError("cannot reshape " + shape_str(shape_) + " into " + shape_str(shape));
        }
        shape_ = std::move(shape);
    }

    Tensor reshaped(Shape shape) const {
        Tensor t = *this;
        t.set_shape(std::move(shape));
        return t;
    }

    // 2-D Eigen views. rows*cols must cover the whole buffer.
    Eigen::Map<MatrixRM<Scalar>> matrix(Index rows, Index cols) {
        check_view(rows, cols);
        return Eigen::Map<MatrixRM<Scalar>>(data_.data(), rows, cols);
    }
    Eigen::Map<const MatrixRM<Scalar>> matrix(Index rows, Index cols) const {
        check_view(rows, cols);
        return Eigen::Map<const MatrixRM<Scalar>>(data_.data(), rows, cols);
    }
    Eigen::Map<MatrixRM<Scalar>> matrix() { return matrix(dim(0), numel() / dim(0)); }
    Eigen::Map<const MatrixRM<Scalar>> matrix() const { return matrix(dim(0), numel() / dim(0)); }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    static Index count(const Shape& s) {
        Index n = 1;
        for (Index d : s) n *= d;
        return n;
    }

  private:
    void check_view(Index rows, Index cols) const {
        if (rows * cols != numel()) {
            throw ShapeError("matrix view " + std::to_string(rows) + "x" + std::to_string(cols) +
                             " does not cover tensor " + shape_str(shape_));
        }
    }

    Shape shape_;
    std::vector<Scalar> data_;
};

// Bitwise payload comparison; shapes must match too.
template <typename Scalar>
bool bits_equal(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
    if (a.shape() != b.shape()) return false;
    if (a.numel() == 0) return true;
    return std::memcmp(a.data(), b.data(), sizeof(Scalar) * static_cast<std::size_t>(a.numel())) == 0;
}

template <typename Scalar>
bool all_zero(const Tensor<Scalar>& t) {
    for (Index i = 0; i < t.numel(); ++i) {
        if (t[i] != Scalar(0)) return false;
    }
    return true;
}

template <typename Scalar>
bool all_finite(const Tensor<Scalar>& t) {
    for (Index i = 0; i < t.numel(); ++i) {
        if (!std::isfinite(t[i])) return false;
    }
    return true;
}

template <typename Scalar>
Scalar max_abs(const Tensor<Scalar>& t) {
    Scalar m = 0;
    for (Index i = 0; i < t.numel(); ++i) m = std::max(m, std::abs(t[i]));
    return m;
}

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

}  // namespace tli
