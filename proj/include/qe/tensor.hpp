#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

namespace qe {

/// Dense row-major matrix of doubles.
///
/// Construction from explicit data rejects NaN/Inf; element writes after
/// construction are unchecked.
class Tensor2D {
 public:
  Tensor2D() = default;
  Tensor2D(std::size_t rows, std::size_t cols, double fill = 0.0);
  Tensor2D(std::size_t rows, std::size_t cols, std::vector<double> data);
  Tensor2D(std::initializer_list<std::initializer_list<double>> rows);

  static Tensor2D identity(std::size_t n);
  static Tensor2D diagonal(std::span<const double> diag);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }
  std::vector<double> col(std::size_t c) const;

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  bool all_finite() const noexcept;

  friend bool operator==(const Tensor2D& a, const Tensor2D& b) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Tensor2D transpose(const Tensor2D& a);
Tensor2D matmul(const Tensor2D& a, const Tensor2D& b);
/// a * bᵀ without materializing the transpose.
Tensor2D matmul_nt(const Tensor2D& a, const Tensor2D& b);
/// aᵀ * b without materializing the transpose.
Tensor2D matmul_tn(const Tensor2D& a, const Tensor2D& b);
std::vector<double> matvec(const Tensor2D& a, std::span<const double> x);

Tensor2D operator+(const Tensor2D& a, const Tensor2D& b);
Tensor2D operator-(const Tensor2D& a, const Tensor2D& b);
Tensor2D operator*(double s, const Tensor2D& a);

/// a · diag(s)
Tensor2D scale_columns(const Tensor2D& a, std::span<const double> s);
/// diag(s) · a
Tensor2D scale_rows(const Tensor2D& a, std::span<const double> s);

double frobenius_norm(const Tensor2D& a);
double l2_norm(std::span<const double> x);

/// Per-column mean of |a| (mean over rows).
std::vector<double> column_abs_mean(const Tensor2D& a);

void require_same_shape(const Tensor2D& a, const Tensor2D& b, const char* what);

}  // namespace qe
