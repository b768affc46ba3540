#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace clipo {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major float64 tensor. Parameters carry requires_grad and an
// optional gradient buffer of identical shape.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v);
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor zeros_like(const Tensor& other);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t axis) const;
  // Rows/cols of a rank-2 tensor.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * shape_.back() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * shape_.back() + c]; }
  double item() const;

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool on) { requires_grad_ = on; }

  bool has_grad() const { return !grad_.empty(); }
  std::span<double> grad() { return grad_; }
  std::span<const double> grad() const { return grad_; }
  // Allocates a zero gradient if absent, returns it.
  std::span<double> ensure_grad();
  void zero_grad();
  void clear_grad() { grad_.clear(); }

  bool all_finite() const;

 private:
  Shape shape_;
  std::vector<double> data_;
  bool requires_grad_ = false;
  std::vector<double> grad_;
};

// Row-level kernels shared by the taped ops and the cached decoder, so both
// produce bit-identical rows.
namespace kernels {

// out[m x n] = a[m x k] * b[k x n], accumulated in k order per row.
void matmul(std::span<const double> a, std::span<const double> b, std::span<double> out,
            std::size_t m, std::size_t k, std::size_t n);

// Single row times a k x n matrix.
void row_matmul(std::span<const double> row, std::span<const double> b, std::span<double> out,
                std::size_t k, std::size_t n);

// Normalizes one row; writes mean and reciprocal std for the backward pass.
void layer_norm_row(std::span<const double> x, std::span<const double> gain,
                    std::span<const double> bias, double eps, std::span<double> out,
                    double& mean, double& rstd);

double gelu(double x);
double gelu_grad(double x);

// Causal attention output for the query at position t against keys/values
// 0..t (row-major, `width` columns, `heads` heads). probs receives heads*(t+1)
// softmax weights.
void attend_row(std::span<const double> q_row, std::span<const double> keys,
                std::span<const double> vals, std::size_t t, std::size_t width,
                std::size_t heads, std::span<double> out_row, std::span<double> probs);

void log_softmax_row(std::span<const double> x, std::span<double> out);
double logsumexp(std::span<const double> x);

}  // namespace kernels

}  // namespace clipo
