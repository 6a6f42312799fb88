#include "layermatch/matrix.hpp"

#include "layermatch/errors.hpp"

#include <fmt/format.h>

#include <cmath>

namespace layermatch {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows * cols) {
        throw ShapeError(fmt::format("matrix data length {} does not match {}x{}",
                                     data_.size(), rows, cols));
    }
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t n_rows = rows.size();
    const std::size_t n_cols = n_rows == 0 ? 0 : rows.begin()->size();
    std::vector<double> data;
    data.reserve(n_rows * n_cols);
    for (const auto& r : rows) {
        if (r.size() != n_cols) throw ShapeError("from_rows: ragged row lengths");
        data.insert(data.end(), r.begin(), r.end());
    }
    return Matrix(n_rows, n_cols, std::move(data));
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

bool Matrix::all_finite() const noexcept {
    for (double v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

Matrix& Matrix::add_scaled(const Matrix& other, double scale) {
    require_same_shape(*this, other, "add_scaled");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += scale * other.data_[i];
    return *this;
}

Matrix& Matrix::scale(double factor) {
    for (double& v : data_) v *= factor;
    return *this;
}

void Matrix::fill(double value) {
    for (double& v : data_) v = value;
}

Matrix Matrix::transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
        for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
}

Matrix Matrix::gather_rows(std::span<const std::size_t> indices) const {
    Matrix out(indices.size(), cols_);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= rows_) throw ArgumentError("gather_rows: row index out of range");
        auto src = row(indices[i]);
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError(fmt::format("matmul: {}x{} times {}x{}", a.rows(), a.cols(), b.rows(), b.cols()));
    }
    Matrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += aik * b(k, j);
        }
    }
    return out;
}

Matrix matmul_transposed(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) {
        throw ShapeError(fmt::format("matmul_transposed: {}x{} times ({}x{})^T", a.rows(), a.cols(),
                                     b.rows(), b.cols()));
    }
    Matrix out(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto ar = a.row(i);
        for (std::size_t j = 0; j < b.rows(); ++j) {
            auto br = b.row(j);
            double acc = 0.0;
            for (std::size_t k = 0; k < ar.size(); ++k) acc += ar[k] * br[k];
            out(i, j) = acc;
        }
    }
    return out;
}

Matrix transposed_matmul(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) {
        throw ShapeError(fmt::format("transposed_matmul: ({}x{})^T times {}x{}", a.rows(), a.cols(),
                                     b.rows(), b.cols()));
    }
    Matrix out(a.cols(), b.cols());
    for (std::size_t k = 0; k < a.rows(); ++k) {
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const double aki = a(k, i);
            if (aki == 0.0) continue;
            for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += aki * b(k, j);
        }
    }
    return out;
}

void require_same_shape(const Matrix& a, const Matrix& b, std::string_view what) {
    if (!a.same_shape(b)) {
        throw ShapeError(fmt::format("{}: shape {}x{} vs {}x{}", what, a.rows(), a.cols(), b.rows(), b.cols()));
    }
}

} // namespace layermatch
