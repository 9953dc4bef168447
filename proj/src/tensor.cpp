#include "dynplan/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace dynplan {

namespace {

std::size_t shape_product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

[[noreturn]] void shape_error(OpKind kind, const Tensor& a, const Tensor& b) {
  throw std::invalid_argument(op_name(kind) + ": shape mismatch " + shape_string(a.shape()) +
                              " vs " + shape_string(b.shape()));
}

[[noreturn]] void shape_error(OpKind kind, const Tensor& a, const std::string& why) {
  throw std::invalid_argument(op_name(kind) + ": " + why + " for shape " +
                              shape_string(a.shape()));
}

void require_matrix(OpKind kind, const Tensor& a) {
  if (a.empty()) throw std::invalid_argument(op_name(kind) + ": empty tensor");
  if (a.rank() > 2) shape_error(kind, a, "expected rank <= 2");
}

bool is_scalar(const Tensor& t) { return t.size() == 1; }

bool is_row_of(const Tensor& b, const Tensor& a) {
  return b.rows() == 1 && b.cols() == a.cols() && a.rank() <= 2;
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double stable_log_sigmoid(double x) {
  if (x >= 0.0) return -std::log1p(std::exp(-x));
  return x - std::log1p(std::exp(x));
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

Tensor make(Shape shape, std::vector<double> data) { return Tensor(std::move(shape), std::move(data)); }

std::vector<double> transposed(std::span<const double> a, std::size_t rows, std::size_t cols) {
  std::vector<double> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = a[r * cols + c];
  return out;
}

// Forward evaluation without any recording.
Tensor evaluate(OpKind kind, std::span<const Tensor> in, const OpAttrs& attrs) {
  auto need = [&](std::size_t n) {
    if (in.size() != n)
      throw std::invalid_argument(op_name(kind) + ": expected " + std::to_string(n) + " inputs, got " +
                                  std::to_string(in.size()));
    for (const auto& t : in)
      if (t.empty()) throw std::invalid_argument(op_name(kind) + ": empty input tensor");
  };

  switch (kind) {
    case OpKind::leaf:
      throw std::invalid_argument("leaf: not an evaluable primitive");

    case OpKind::matmul: {
      need(2);
      const Tensor& a = in[0];
      const Tensor& b = in[1];
      require_matrix(kind, a);
      require_matrix(kind, b);
      if (a.cols() != b.rows()) shape_error(kind, a, b);
      std::vector<double> out(a.rows() * b.cols());
      matmul_kernel(a.data(), b.data(), out, a.rows(), a.cols(), b.cols());
      return make({a.rows(), b.cols()}, std::move(out));
    }

    case OpKind::add:
    case OpKind::sub: {
      need(2);
      const Tensor& a = in[0];
      const Tensor& b = in[1];
      const double sign = kind == OpKind::add ? 1.0 : -1.0;
      auto x = a.data();
      auto y = b.data();
      std::vector<double> out(x.begin(), x.end());
      if (a.shape() == b.shape()) {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += sign * y[i];
      } else if (is_scalar(b)) {
        for (auto& v : out) v += sign * y[0];
      } else if (kind == OpKind::add && is_row_of(b, a)) {
        const std::size_t cols = a.cols();
        for (std::size_t r = 0; r < a.rows(); ++r)
          for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += y[c];
      } else {
        shape_error(kind, a, b);
      }
      return make(a.shape(), std::move(out));
    }

    case OpKind::mul: {
      need(2);
      const Tensor& a = in[0];
      const Tensor& b = in[1];
      auto x = a.data();
      auto y = b.data();
      if (a.shape() == b.shape()) {
        std::vector<double> out(x.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
        return make(a.shape(), std::move(out));
      }
      if (is_scalar(a)) {
        std::vector<double> out(y.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[0] * y[i];
        return make(b.shape(), std::move(out));
      }
      if (is_scalar(b)) {
        std::vector<double> out(x.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[0];
        return make(a.shape(), std::move(out));
      }
      shape_error(kind, a, b);
    }

    case OpKind::scale:
    case OpKind::add_scalar:
    case OpKind::sigmoid:
    case OpKind::log_sigmoid:
    case OpKind::log:
    case OpKind::gelu: {
      need(1);
      auto x = in[0].data();
      std::vector<double> out(x.size());
      for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = x[i];
        switch (kind) {
          case OpKind::scale: out[i] = v * attrs.factor; break;
          case OpKind::add_scalar: out[i] = v + attrs.factor; break;
          case OpKind::sigmoid: out[i] = stable_sigmoid(v); break;
          case OpKind::log_sigmoid: out[i] = stable_log_sigmoid(v); break;
          case OpKind::log: out[i] = std::log(v); break;
          default: out[i] = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); break;
        }
      }
      return make(in[0].shape(), std::move(out));
    }

    case OpKind::softmax: {
      need(1);
      require_matrix(kind, in[0]);
      const std::size_t rows = in[0].rows();
      const std::size_t cols = in[0].cols();
      auto x = in[0].data();
      std::vector<double> out(x.size());
      for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data() + r * cols;
        double* yr = out.data() + r * cols;
        const double mx = *std::max_element(xr, xr + cols);
        double total = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
          yr[c] = std::exp(xr[c] - mx);
          total += yr[c];
        }
        for (std::size_t c = 0; c < cols; ++c) yr[c] /= total;
      }
      return make(in[0].shape(), std::move(out));
    }

    case OpKind::layer_norm: {
      need(3);
      const Tensor& x = in[0];
      require_matrix(kind, x);
      const std::size_t rows = x.rows();
      const std::size_t cols = x.cols();
      if (cols < 2) shape_error(kind, x, "normalized axis needs length >= 2");
      if (in[1].size() != cols) shape_error(kind, x, in[1]);
      if (in[2].size() != cols) shape_error(kind, x, in[2]);
      if (!(attrs.eps > 0.0)) throw std::invalid_argument("layer_norm: epsilon must be positive");
      auto xs = x.data();
      auto g = in[1].data();
      auto b = in[2].data();
      std::vector<double> out(xs.size());
      for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = xs.data() + r * cols;
        double m = 0.0;
        for (std::size_t c = 0; c < cols; ++c) m += xr[c];
        m /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t c = 0; c < cols; ++c) var += (xr[c] - m) * (xr[c] - m);
        var /= static_cast<double>(cols);
        const double rstd = 1.0 / std::sqrt(var + attrs.eps);
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = (xr[c] - m) * rstd * g[c] + b[c];
      }
      return make(x.shape(), std::move(out));
    }

    case OpKind::transpose: {
      need(1);
      require_matrix(kind, in[0]);
      return make({in[0].cols(), in[0].rows()}, transposed(in[0].data(), in[0].rows(), in[0].cols()));
    }

    case OpKind::slice_row: {
      need(1);
      require_matrix(kind, in[0]);
      if (attrs.index >= in[0].rows()) shape_error(kind, in[0], "row " + std::to_string(attrs.index) + " out of range");
      return make({1, in[0].cols()}, in[0].row_values(attrs.index));
    }

    case OpKind::slice_cols: {
      need(1);
      require_matrix(kind, in[0]);
      const std::size_t rows = in[0].rows();
      const std::size_t cols = in[0].cols();
      if (attrs.count == 0 || attrs.index + attrs.count > cols)
        shape_error(kind, in[0], "column range out of bounds");
      auto x = in[0].data();
      std::vector<double> out(rows * attrs.count);
      for (std::size_t r = 0; r < rows; ++r)
        std::copy_n(x.data() + r * cols + attrs.index, attrs.count, out.data() + r * attrs.count);
      return make({rows, attrs.count}, std::move(out));
    }

    case OpKind::concat_cols: {
      if (in.empty()) throw std::invalid_argument("concat_cols: no inputs");
      const std::size_t rows = in[0].rows();
      std::size_t total = 0;
      for (const auto& t : in) {
        require_matrix(kind, t);
        if (t.rows() != rows) shape_error(kind, in[0], t);
        total += t.cols();
      }
      std::vector<double> out(rows * total);
      std::size_t offset = 0;
      for (const auto& t : in) {
        auto x = t.data();
        const std::size_t c = t.cols();
        for (std::size_t r = 0; r < rows; ++r) std::copy_n(x.data() + r * c, c, out.data() + r * total + offset);
        offset += c;
      }
      return make({rows, total}, std::move(out));
    }

    case OpKind::gather_rows: {
      need(1);
      require_matrix(kind, in[0]);
      const std::size_t cols = in[0].cols();
      auto x = in[0].data();
      std::vector<double> out(attrs.ids.size() * cols);
      for (std::size_t r = 0; r < attrs.ids.size(); ++r) {
        if (attrs.ids[r] >= in[0].rows())
          shape_error(kind, in[0], "row id " + std::to_string(attrs.ids[r]) + " at position " +
                                       std::to_string(r) + " out of range");
        std::copy_n(x.data() + attrs.ids[r] * cols, cols, out.data() + r * cols);
      }
      return make({attrs.ids.size(), cols}, std::move(out));
    }

    case OpKind::mean:
    case OpKind::sum: {
      need(1);
      auto x = in[0].data();
      double total = 0.0;
      for (double v : x) total += v;
      if (kind == OpKind::mean) total /= static_cast<double>(x.size());
      return Tensor::scalar(total);
    }

    case OpKind::cross_entropy: {
      need(1);
      const Tensor& z = in[0];
      require_matrix(kind, z);
      if (z.rows() != 1) shape_error(kind, z, "expected a single row of logits");
      if (attrs.index >= z.cols())
        shape_error(kind, z, "label " + std::to_string(attrs.index) + " out of range");
      auto x = z.data();
      const double mx = *std::max_element(x.begin(), x.end());
      double total = 0.0;
      for (double v : x) total += std::exp(v - mx);
      return Tensor::scalar(mx + std::log(total) - x[attrs.index]);
    }
  }
  throw std::logic_error("unhandled primitive");
}

using Grad = std::vector<double>;

// Gradients of one recorded node with respect to the inputs flagged in `want`.
std::vector<Grad> differentiate(const TapeNode& node, const Grad& gy, const std::vector<bool>& want) {
  const auto& in = node.saved_inputs;
  std::vector<Grad> gx(in.size());
  auto init = [&](std::size_t i) -> Grad& {
    gx[i].assign(in[i].size(), 0.0);
    return gx[i];
  };

  switch (node.kind) {
    case OpKind::leaf:
      break;

    case OpKind::matmul: {
      const std::size_t m = in[0].rows();
      const std::size_t k = in[0].cols();
      const std::size_t n = in[1].cols();
      if (want[0]) {
        // dA = dC * B^T
        const auto bt = transposed(in[1].data(), k, n);
        Grad& ga = init(0);
        matmul_kernel(gy, bt, ga, m, n, k);
      }
      if (want[1]) {
        // dB = A^T * dC
        Grad& gb = init(1);
        auto a = in[0].data();
        for (std::size_t i = 0; i < m; ++i) {
          const double* gr = gy.data() + i * n;
          for (std::size_t p = 0; p < k; ++p) {
            const double aip = a[i * k + p];
            double* br = gb.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) br[j] += aip * gr[j];
          }
        }
      }
      break;
    }

    case OpKind::add:
    case OpKind::sub: {
      const double sign = node.kind == OpKind::add ? 1.0 : -1.0;
      if (want[0]) gx[0] = gy;
      if (want[1]) {
        Grad& gb = init(1);
        if (in[0].shape() == in[1].shape()) {
          for (std::size_t i = 0; i < gy.size(); ++i) gb[i] = sign * gy[i];
        } else if (is_scalar(in[1])) {
          for (double v : gy) gb[0] += sign * v;
        } else {
          const std::size_t cols = in[0].cols();
          for (std::size_t i = 0; i < gy.size(); ++i) gb[i % cols] += gy[i];
        }
      }
      break;
    }

    case OpKind::mul: {
      auto a = in[0].data();
      auto b = in[1].data();
      const bool same = in[0].shape() == in[1].shape();
      for (std::size_t side = 0; side < 2; ++side) {
        if (!want[side]) continue;
        auto other = side == 0 ? b : a;
        const Tensor& self = in[side];
        Grad& g = init(side);
        if (same) {
          for (std::size_t i = 0; i < gy.size(); ++i) g[i] = gy[i] * other[i];
        } else if (is_scalar(self)) {
          for (std::size_t i = 0; i < gy.size(); ++i) g[0] += gy[i] * other[i];
        } else {
          for (std::size_t i = 0; i < gy.size(); ++i) g[i] = gy[i] * other[0];
        }
      }
      break;
    }

    case OpKind::scale: {
      if (want[0]) {
        Grad& g = init(0);
        for (std::size_t i = 0; i < gy.size(); ++i) g[i] = gy[i] * node.attrs.factor;
      }
      break;
    }

    case OpKind::add_scalar:
      if (want[0]) gx[0] = gy;
      break;

    case OpKind::sigmoid: {
      if (want[0]) {
        auto y = node.output.data();
        Grad& g = init(0);
        for (std::size_t i = 0; i < gy.size(); ++i) g[i] = gy[i] * y[i] * (1.0 - y[i]);
      }
      break;
    }

    case OpKind::log_sigmoid: {
      if (want[0]) {
        auto x = in[0].data();
        Grad& g = init(0);
        for (std::size_t i = 0; i < gy.size(); ++i) g[i] = gy[i] * stable_sigmoid(-x[i]);
      }
      break;
    }

    case OpKind::log: {
      if (want[0]) {
        auto x = in[0].data();
        Grad& g = init(0);
        for (std::size_t i = 0; i < gy.size(); ++i) g[i] = gy[i] / x[i];
      }
      break;
    }

    case OpKind::gelu: {
      if (want[0]) {
        auto x = in[0].data();
        Grad& g = init(0);
        for (std::size_t i = 0; i < gy.size(); ++i) {
          const double v = x[i];
          const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
          const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
          g[i] = gy[i] * (cdf + v * pdf);
        }
      }
      break;
    }

    case OpKind::softmax: {
      if (want[0]) {
        const std::size_t rows = in[0].rows();
        const std::size_t cols = in[0].cols();
        auto y = node.output.data();
        Grad& g = init(0);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* yr = y.data() + r * cols;
          const double* gr = gy.data() + r * cols;
          double dot = 0.0;
          for (std::size_t c = 0; c < cols; ++c) dot += gr[c] * yr[c];
          for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] = yr[c] * (gr[c] - dot);
        }
      }
      break;
    }

    case OpKind::layer_norm: {
      const std::size_t rows = in[0].rows();
      const std::size_t cols = in[0].cols();
      auto x = in[0].data();
      auto gamma = in[1].data();
      if (want[0]) init(0);
      if (want[1]) init(1);
      if (want[2]) init(2);
      std::vector<double> xhat(cols);
      std::vector<double> dxhat(cols);
      const double inv_n = 1.0 / static_cast<double>(cols);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data() + r * cols;
        const double* gr = gy.data() + r * cols;
        double m = 0.0;
        for (std::size_t c = 0; c < cols; ++c) m += xr[c];
        m *= inv_n;
        double var = 0.0;
        for (std::size_t c = 0; c < cols; ++c) var += (xr[c] - m) * (xr[c] - m);
        var *= inv_n;
        const double rstd = 1.0 / std::sqrt(var + node.attrs.eps);
        double mean_d = 0.0;
        double mean_dx = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
          xhat[c] = (xr[c] - m) * rstd;
          dxhat[c] = gr[c] * gamma[c];
          mean_d += dxhat[c];
          mean_dx += dxhat[c] * xhat[c];
        }
        mean_d *= inv_n;
        mean_dx *= inv_n;
        if (want[0])
          for (std::size_t c = 0; c < cols; ++c)
            gx[0][r * cols + c] = rstd * (dxhat[c] - mean_d - xhat[c] * mean_dx);
        if (want[1])
          for (std::size_t c = 0; c < cols; ++c) gx[1][c] += gr[c] * xhat[c];
        if (want[2])
          for (std::size_t c = 0; c < cols; ++c) gx[2][c] += gr[c];
      }
      break;
    }

    case OpKind::transpose:
      if (want[0]) gx[0] = transposed(gy, in[0].cols(), in[0].rows());
      break;

    case OpKind::slice_row: {
      if (want[0]) {
        Grad& g = init(0);
        std::copy(gy.begin(), gy.end(), g.begin() + static_cast<std::ptrdiff_t>(node.attrs.index * in[0].cols()));
      }
      break;
    }

    case OpKind::slice_cols: {
      if (want[0]) {
        Grad& g = init(0);
        const std::size_t cols = in[0].cols();
        const std::size_t count = node.attrs.count;
        for (std::size_t r = 0; r < in[0].rows(); ++r)
          std::copy_n(gy.data() + r * count, count, g.data() + r * cols + node.attrs.index);
      }
      break;
    }

    case OpKind::concat_cols: {
      const std::size_t rows = in[0].rows();
      const std::size_t total = node.output.cols();
      std::size_t offset = 0;
      for (std::size_t i = 0; i < in.size(); ++i) {
        const std::size_t c = in[i].cols();
        if (want[i]) {
          Grad& g = init(i);
          for (std::size_t r = 0; r < rows; ++r) std::copy_n(gy.data() + r * total + offset, c, g.data() + r * c);
        }
        offset += c;
      }
      break;
    }

    case OpKind::gather_rows: {
      if (want[0]) {
        Grad& g = init(0);
        const std::size_t cols = in[0].cols();
        for (std::size_t r = 0; r < node.attrs.ids.size(); ++r) {
          double* dst = g.data() + node.attrs.ids[r] * cols;
          const double* src = gy.data() + r * cols;
          for (std::size_t c = 0; c < cols; ++c) dst[c] += src[c];
        }
      }
      break;
    }

    case OpKind::mean:
    case OpKind::sum: {
      if (want[0]) {
        const double scale =
            node.kind == OpKind::mean ? gy[0] / static_cast<double>(in[0].size()) : gy[0];
        gx[0].assign(in[0].size(), scale);
      }
      break;
    }

    case OpKind::cross_entropy: {
      if (want[0]) {
        auto x = in[0].data();
        Grad& g = init(0);
        const double mx = *std::max_element(x.begin(), x.end());
        double total = 0.0;
        for (std::size_t c = 0; c < x.size(); ++c) {
          g[c] = std::exp(x[c] - mx);
          total += g[c];
        }
        for (std::size_t c = 0; c < x.size(); ++c) g[c] = gy[0] * g[c] / total;
        g[node.attrs.index] -= gy[0];
      }
      break;
    }
  }
  return gx;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)) {
  for (auto d : shape_)
    if (d == 0) throw std::invalid_argument("tensor: zero-sized dimension in " + shape_string(shape_));
  if (shape_product(shape_) != data.size())
    throw std::invalid_argument("tensor: shape " + shape_string(shape_) + " does not match " +
                                std::to_string(data.size()) + " values");
  data_ = std::make_shared<const std::vector<double>>(std::move(data));
}

Tensor Tensor::zeros(Shape shape) { return filled(std::move(shape), 0.0); }

Tensor Tensor::filled(Shape shape, double value) {
  const std::size_t n = shape_product(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({1, 1}, {value}); }

Tensor Tensor::row(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor({1, n}, std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
  return Tensor({rows, cols}, std::move(values));
}

std::span<const double> Tensor::data() const {
  if (!data_) return {};
  return {data_->data(), data_->size()};
}

std::size_t Tensor::size() const { return data_ ? data_->size() : 0; }

std::size_t Tensor::rows() const {
  if (shape_.size() < 2) return 1;
  return shape_[0];
}

std::size_t Tensor::cols() const {
  if (shape_.empty()) return 1;
  return shape_.back();
}

double Tensor::item() const {
  if (size() != 1) throw std::invalid_argument("item: tensor of shape " + shape_string(shape_) + " is not a scalar");
  return (*data_)[0];
}

double Tensor::at(std::size_t r, std::size_t c) const { return (*data_)[r * cols() + c]; }

std::vector<double> Tensor::row_values(std::size_t r) const {
  const std::size_t c = cols();
  auto begin = data_->begin() + static_cast<std::ptrdiff_t>(r * c);
  return {begin, begin + static_cast<std::ptrdiff_t>(c)};
}

Tensor Tensor::detach() const {
  Tensor out = *this;
  out.tape_ = nullptr;
  out.node_ = kNoNode;
  return out;
}

bool Tensor::bitwise_equal(const Tensor& other) const {
  if (shape_ != other.shape_) return false;
  auto a = data();
  auto b = other.data();
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::bit_cast<std::uint64_t>(a[i]) != std::bit_cast<std::uint64_t>(b[i])) return false;
  return true;
}

Tensor make_recorded(Tensor value, Tape* tape, NodeId node) {
  value.tape_ = tape;
  value.node_ = node;
  return value;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

std::string op_name(OpKind kind) {
  switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::add_scalar: return "add_scalar";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::log_sigmoid: return "log_sigmoid";
    case OpKind::log: return "log";
    case OpKind::softmax: return "softmax";
    case OpKind::layer_norm: return "layer_norm";
    case OpKind::gelu: return "gelu";
    case OpKind::transpose: return "transpose";
    case OpKind::slice_row: return "slice_row";
    case OpKind::slice_cols: return "slice_cols";
    case OpKind::concat_cols: return "concat_cols";
    case OpKind::gather_rows: return "gather_rows";
    case OpKind::mean: return "mean";
    case OpKind::sum: return "sum";
    case OpKind::cross_entropy: return "cross_entropy";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Tape

Tensor Tape::leaf(const Tensor& value) {
  if (value.empty()) throw std::invalid_argument("leaf: empty tensor");
  TapeNode node;
  node.kind = OpKind::leaf;
  node.output = value.detach();
  const NodeId id = record(std::move(node));
  return make_recorded(value.detach(), this, id);
}

NodeId Tape::record(TapeNode node) {
  const auto id = static_cast<NodeId>(nodes_.size());
  for (NodeId in : node.inputs)
    if (in >= id) throw std::logic_error("tape: input node recorded after its consumer");
  nodes_.push_back(std::move(node));
  return id;
}

std::vector<Tensor> Tape::replay() const {
  std::vector<Tensor> values(nodes_.size());
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const TapeNode& node = nodes_[i];
    if (node.kind == OpKind::leaf) {
      values[i] = node.output;
      continue;
    }
    std::vector<Tensor> inputs(node.inputs.size());
    for (std::size_t j = 0; j < inputs.size(); ++j)
      inputs[j] = node.inputs[j] == kNoNode ? node.saved_inputs[j]
                                            : values[static_cast<std::size_t>(node.inputs[j])];
    values[i] = evaluate(node.kind, inputs, node.attrs);
  }
  return values;
}

Tensor apply_primitive(OpKind kind, std::span<const Tensor> inputs, const OpAttrs& attrs) {
  Tensor out = evaluate(kind, inputs, attrs);
  Tape* tape = nullptr;
  for (const auto& t : inputs) {
    if (!t.on_tape()) continue;
    if (tape != nullptr && tape != t.tape())
      throw std::invalid_argument(op_name(kind) + ": inputs recorded on different tapes");
    tape = t.tape();
  }
  if (tape == nullptr) return out;

  TapeNode node;
  node.kind = kind;
  node.attrs = attrs;
  node.inputs.reserve(inputs.size());
  node.saved_inputs.reserve(inputs.size());
  for (const auto& t : inputs) {
    node.inputs.push_back(t.node());
    node.saved_inputs.push_back(t.detach());
  }
  node.output = out;
  const NodeId id = tape->record(std::move(node));
  return make_recorded(std::move(out), tape, id);
}

// ---------------------------------------------------------------------------
// Reverse pass

const Tensor& GradientMap::at(NodeId node) const {
  auto it = grads_.find(node);
  if (it == grads_.end()) throw std::out_of_range("gradient map: node " + std::to_string(node) + " is not a leaf");
  return it->second;
}

GradientMap backward(const Tape& tape, const Tensor& loss) {
  if (loss.size() != 1)
    throw std::invalid_argument("backward: loss must be a scalar, got shape " + shape_string(loss.shape()));
  if (loss.on_tape() && loss.tape() != &tape)
    throw std::invalid_argument("backward: loss was recorded on a different tape");

  const auto& nodes = tape.nodes();
  std::vector<Grad> grads(nodes.size());
  if (loss.on_tape()) {
    grads[static_cast<std::size_t>(loss.node())] = {1.0};
    for (auto id = loss.node(); id >= 0; --id) {
      const auto idx = static_cast<std::size_t>(id);
      const TapeNode& node = nodes[idx];
      if (grads[idx].empty() || node.kind == OpKind::leaf) continue;
      std::vector<bool> want(node.inputs.size());
      bool any = false;
      for (std::size_t j = 0; j < want.size(); ++j) {
        want[j] = node.inputs[j] != kNoNode;
        any = any || want[j];
      }
      if (!any) continue;
      auto gx = differentiate(node, grads[idx], want);
      for (std::size_t j = 0; j < gx.size(); ++j) {
        if (!want[j] || gx[j].empty()) continue;
        Grad& dst = grads[static_cast<std::size_t>(node.inputs[j])];
        if (dst.empty()) {
          dst = std::move(gx[j]);
        } else {
          for (std::size_t e = 0; e < dst.size(); ++e) dst[e] += gx[j][e];
        }
      }
      // Intermediate gradients are no longer needed once propagated.
      grads[idx].clear();
      grads[idx].shrink_to_fit();
    }
  }

  GradientMap out;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (nodes[i].kind != OpKind::leaf) continue;
    const Shape& shape = nodes[i].output.shape();
    if (grads[i].empty())
      out.grads_.emplace(static_cast<NodeId>(i), Tensor::zeros(shape));
    else
      out.grads_.emplace(static_cast<NodeId>(i), Tensor(shape, std::move(grads[i])));
  }
  return out;
}

double finite_diff_check(const ScalarFn& f, std::span<const Tensor> params, double step) {
  if (!(step > 0.0)) throw std::invalid_argument("finite_diff_check: step must be positive");

  std::vector<Tensor> base(params.begin(), params.end());
  for (auto& p : base) p = p.detach();

  Tape tape;
  std::vector<Tensor> attached;
  attached.reserve(base.size());
  for (const auto& p : base) attached.push_back(tape.leaf(p));
  const Tensor loss = f(attached);
  const GradientMap grads = backward(tape, loss);

  const double first = f(base).item();
  const double second = f(base).item();
  if (std::bit_cast<std::uint64_t>(first) != std::bit_cast<std::uint64_t>(second) ||
      std::bit_cast<std::uint64_t>(first) != std::bit_cast<std::uint64_t>(loss.item()))
    throw std::runtime_error("finite_diff_check: function is not deterministic");

  double worst = 0.0;
  for (std::size_t k = 0; k < base.size(); ++k) {
    const Tensor& analytic = grads.of(attached[k]);
    std::vector<double> values(base[k].data().begin(), base[k].data().end());
    for (std::size_t e = 0; e < values.size(); ++e) {
      const double orig = values[e];
      values[e] = orig + step;
      base[k] = Tensor(base[k].shape(), values);
      const double plus = f(base).item();
      values[e] = orig - step;
      base[k] = Tensor(base[k].shape(), values);
      const double minus = f(base).item();
      values[e] = orig;
      base[k] = Tensor(base[k].shape(), values);
      const double numeric = (plus - minus) / (2.0 * step);
      const double err = std::abs(analytic.data()[e] - numeric) / std::max(1.0, std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

void matmul_kernel(std::span<const double> a, std::span<const double> b, std::span<double> c,
                   std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c.data() + i * n;
    std::fill_n(ci, n, 0.0);
    const double* ai = a.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      const double* bp = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// ---------------------------------------------------------------------------
// ops

namespace ops {

namespace {
Tensor unary(OpKind kind, const Tensor& a, const OpAttrs& attrs = {}) {
  const Tensor in[] = {a};
  return apply_primitive(kind, in, attrs);
}
Tensor binary(OpKind kind, const Tensor& a, const Tensor& b) {
  const Tensor in[] = {a, b};
  return apply_primitive(kind, in);
}
}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) { return binary(OpKind::matmul, a, b); }
Tensor add(const Tensor& a, const Tensor& b) { return binary(OpKind::add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(OpKind::sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(OpKind::mul, a, b); }

Tensor scale(const Tensor& a, double factor) {
  OpAttrs attrs;
  attrs.factor = factor;
  return unary(OpKind::scale, a, attrs);
}

Tensor add_scalar(const Tensor& a, double value) {
  OpAttrs attrs;
  attrs.factor = value;
  return unary(OpKind::add_scalar, a, attrs);
}

Tensor sigmoid(const Tensor& a) { return unary(OpKind::sigmoid, a); }
Tensor log_sigmoid(const Tensor& a) { return unary(OpKind::log_sigmoid, a); }
Tensor log(const Tensor& a) { return unary(OpKind::log, a); }
Tensor softmax(const Tensor& a) { return unary(OpKind::softmax, a); }
Tensor gelu(const Tensor& a) { return unary(OpKind::gelu, a); }
Tensor transpose(const Tensor& a) { return unary(OpKind::transpose, a); }
Tensor mean(const Tensor& a) { return unary(OpKind::mean, a); }
Tensor sum(const Tensor& a) { return unary(OpKind::sum, a); }

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  OpAttrs attrs;
  attrs.eps = eps;
  const Tensor in[] = {x, gamma, beta};
  return apply_primitive(OpKind::layer_norm, in, attrs);
}

Tensor slice_row(const Tensor& a, std::size_t row) {
  OpAttrs attrs;
  attrs.index = row;
  return unary(OpKind::slice_row, a, attrs);
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count) {
  OpAttrs attrs;
  attrs.index = begin;
  attrs.count = count;
  return unary(OpKind::slice_cols, a, attrs);
}

Tensor concat_cols(std::span<const Tensor> parts) { return apply_primitive(OpKind::concat_cols, parts); }

Tensor gather_rows(const Tensor& table, std::vector<std::size_t> ids) {
  OpAttrs attrs;
  attrs.ids = std::move(ids);
  return unary(OpKind::gather_rows, table, attrs);
}

Tensor cross_entropy(const Tensor& logits, std::size_t label) {
  OpAttrs attrs;
  attrs.index = label;
  return unary(OpKind::cross_entropy, logits, attrs);
}

}  // namespace ops

}  // namespace dynplan
