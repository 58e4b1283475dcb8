#pragma once

#include <cstddef>
#include <initializer_list>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "saff/common.hpp"

namespace saff {

inline std::string shape_str(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

// Dense row-major tensor of 64-bit floats, rank 1..4. Axis 0 is the batch
// axis; [B,F] for dense activations, [B,C,H,W] for images and conv maps.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape) : shape_(std::move(shape)) {
        data_.assign(check_shape(shape_), 0.0);
    }

    Tensor(std::vector<std::size_t> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (check_shape(shape_) != data_.size())
            throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                                 " does not match shape " + shape_str(shape_));
    }

    static Tensor full(std::vector<std::size_t> shape, double value) {
        Tensor t(std::move(shape));
        for (auto& v : t.data_) v = value;
        return t;
    }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    std::size_t dim(std::size_t i) const { return shape_[i]; }
    std::size_t batch() const { return shape_.empty() ? 0 : shape_[0]; }

    // Elements per sample (product of the non-batch axes).
    std::size_t sample_size() const {
        std::size_t n = 1;
        for (std::size_t i = 1; i < shape_.size(); ++i) n *= shape_[i];
        return n;
    }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& at(std::size_t b, std::size_t f) { return data_[b * shape_[1] + f]; }
    double at(std::size_t b, std::size_t f) const { return data_[b * shape_[1] + f]; }

    double& at(std::size_t b, std::size_t c, std::size_t h, std::size_t w) {
        return data_[((b * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }
    double at(std::size_t b, std::size_t c, std::size_t h, std::size_t w) const {
        return data_[((b * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    // Same element count, new axes; data is shared by copy (row-major).
    Tensor reshaped(std::vector<std::size_t> shape) const {
        if (check_shape(shape) != data_.size())
            throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
        return Tensor(std::move(shape), data_);
    }

    // Rows [lo, hi) along the batch axis.
    Tensor slice_batch(std::size_t lo, std::size_t hi) const {
        if (lo >= hi || hi > batch()) throw DimensionError("bad batch slice");
        const std::size_t ss = sample_size();
        std::vector<std::size_t> shape = shape_;
        shape[0] = hi - lo;
        std::vector<double> out(data_.begin() + static_cast<std::ptrdiff_t>(lo * ss),
                                data_.begin() + static_cast<std::ptrdiff_t>(hi * ss));
        return Tensor(std::move(shape), std::move(out));
    }

    // Gathers the given batch rows into a new tensor.
    Tensor gather_batch(const std::vector<std::size_t>& rows) const {
        const std::size_t ss = sample_size();
        std::vector<std::size_t> shape = shape_;
        shape[0] = rows.size();
        Tensor out(std::move(shape));
        for (std::size_t r = 0; r < rows.size(); ++r) {
            if (rows[r] >= batch()) throw DimensionError("gather index out of range");
            const double* src = data_.data() + rows[r] * ss;
            double* dst = out.data() + r * ss;
            for (std::size_t i = 0; i < ss; ++i) dst[i] = src[i];
        }
        return out;
    }

private:
    static std::size_t check_shape(const std::vector<std::size_t>& shape) {
        if (shape.empty() || shape.size() > 4)
            throw DimensionError("tensor rank must be 1..4, got " + shape_str(shape));
        std::size_t n = 1;
        for (std::size_t d : shape) {
            if (d < 1) throw DimensionError("tensor dims must be >= 1, got " + shape_str(shape));
            n *= d;
        }
        return n;
    }

    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

}  // namespace saff
