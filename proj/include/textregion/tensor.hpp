#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace textregion {

/// Extent of a 2-D grid (pixels or patches).
struct Grid {
    int rows = 0;
    int cols = 0;

    [[nodiscard]] std::size_t area() const {
        return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols);
    }
    bool operator==(const Grid&) const = default;
};

/// Dense row-major float matrix.
class Matrix {
  public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, float fill = 0.0f)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<float> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) {
            throw std::invalid_argument("Matrix: data size " + std::to_string(data_.size()) +
                                        " does not match " + std::to_string(rows_) + "x" +
                                        std::to_string(cols_));
        }
    }

    [[nodiscard]] std::size_t rows() const { return rows_; }
    [[nodiscard]] std::size_t cols() const { return cols_; }
    [[nodiscard]] bool empty() const { return data_.empty(); }

    float& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    float operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<float> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    [[nodiscard]] std::span<const float> row(std::size_t r) const {
        return {data_.data() + r * cols_, cols_};
    }

    std::vector<float>& data() { return data_; }
    [[nodiscard]] const std::vector<float>& data() const { return data_; }

    bool operator==(const Matrix&) const = default;

  private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<float> data_;
};

// Accumulates in double; used everywhere a float reduction must be stable.
double dot(std::span<const float> a, std::span<const float> b);
double norm(std::span<const float> a);

/// Cosine similarity. Zero-norm inputs yield 0.
double cosine(std::span<const float> a, std::span<const float> b);

float half_to_float(std::uint16_t h);
std::uint16_t float_to_half(float f);

} // namespace textregion
