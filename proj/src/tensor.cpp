#include "clipo/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

#include "clipo/error.hpp"

namespace clipo {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0) {}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != data_.size()) {
    throw DimensionError("tensor shape " + shape_str(shape_) + " does not match " +
                         std::to_string(data_.size()) + " values");
  }
}

Tensor Tensor::scalar(double v) { return Tensor({}, {v}); }

Tensor Tensor::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor({n}, std::move(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  std::vector<double> data;
  std::size_t cols = rows.size() ? rows.begin()->size() : 0;
  for (const auto& r : rows) {
    if (r.size() != cols) throw DimensionError("ragged matrix literal");
    data.insert(data.end(), r.begin(), r.end());
  }
  return Tensor({rows.size(), cols}, std::move(data));
}

Tensor Tensor::zeros_like(const Tensor& other) { return Tensor(other.shape()); }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape_));
  }
  return shape_[axis];
}

std::size_t Tensor::rows() const {
  if (rank() != 2) throw DimensionError("expected a matrix, got " + shape_str(shape_));
  return shape_[0];
}

std::size_t Tensor::cols() const {
  if (rank() != 2) throw DimensionError("expected a matrix, got " + shape_str(shape_));
  return shape_[1];
}

double Tensor::item() const {
  if (data_.size() != 1) throw DimensionError("item() on non-scalar " + shape_str(shape_));
  return data_[0];
}

std::span<double> Tensor::ensure_grad() {
  if (grad_.size() != data_.size()) grad_.assign(data_.size(), 0.0);
  return grad_;
}

void Tensor::zero_grad() {
  if (!grad_.empty()) std::fill(grad_.begin(), grad_.end(), 0.0);
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

namespace kernels {

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> out,
            std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    row_matmul(a.subspan(i * k, k), b, out.subspan(i * n, n), k, n);
  }
}

void row_matmul(std::span<const double> row, std::span<const double> b, std::span<double> out,
                std::size_t k, std::size_t n) {
  std::fill(out.begin(), out.end(), 0.0);
  double* o = out.data();
  for (std::size_t p = 0; p < k; ++p) {
    const double av = row[p];
    if (av == 0.0) continue;
    const double* br = b.data() + p * n;
    for (std::size_t j = 0; j < n; ++j) o[j] += av * br[j];
  }
}

void layer_norm_row(std::span<const double> x, std::span<const double> gain,
                    std::span<const double> bias, double eps, std::span<double> out,
                    double& mean, double& rstd) {
  const std::size_t n = x.size();
  double s = 0.0;
  for (double v : x) s += v;
  mean = s / static_cast<double>(n);
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n);
  rstd = 1.0 / std::sqrt(var + eps);
  for (std::size_t j = 0; j < n; ++j) out[j] = (x[j] - mean) * rstd * gain[j] + bias[j];
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
}

double gelu(double x) {
  const double u = kGeluC * (x + 0.044715 * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_grad(double x) {
  const double u = kGeluC * (x + 0.044715 * x * x * x);
  const double th = std::tanh(u);
  const double du = kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
  return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
}

void attend_row(std::span<const double> q_row, std::span<const double> keys,
                std::span<const double> vals, std::size_t t, std::size_t width,
                std::size_t heads, std::span<double> out_row, std::span<double> probs) {
  const std::size_t dh = width / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::fill(out_row.begin(), out_row.end(), 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    double* p = probs.data() + h * (t + 1);
    const double* q = q_row.data() + h * dh;
    double mx = -INFINITY;
    for (std::size_t j = 0; j <= t; ++j) {
      const double* kr = keys.data() + j * width + h * dh;
      double s = 0.0;
      for (std::size_t c = 0; c < dh; ++c) s += q[c] * kr[c];
      p[j] = s * scale;
      mx = std::max(mx, p[j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j <= t; ++j) {
      p[j] = std::exp(p[j] - mx);
      z += p[j];
    }
    for (std::size_t j = 0; j <= t; ++j) p[j] /= z;
    double* o = out_row.data() + h * dh;
    for (std::size_t j = 0; j <= t; ++j) {
      const double* vr = vals.data() + j * width + h * dh;
      for (std::size_t c = 0; c < dh; ++c) o[c] += p[j] * vr[c];
    }
  }
}

double logsumexp(std::span<const double> x) {
  double mx = -INFINITY;
  for (double v : x) mx = std::max(mx, v);
  double z = 0.0;
  for (double v : x) z += std::exp(v - mx);
  return mx + std::log(z);
}

void log_softmax_row(std::span<const double> x, std::span<double> out) {
  const double lse = logsumexp(x);
  for (std::size_t j = 0; j < x.size(); ++j) out[j] = x[j] - lse;
}

}  // namespace kernels

}  // namespace clipo
