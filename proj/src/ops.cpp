// SPDX-License-Identifier: Apache-2.0
#include "ddtrack/ops.hpp"

#include <Eigen/Core>
#include <cmath>
#include <string>

#include "ddtrack/error.hpp"

namespace ddtrack::ad {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap as_matrix(std::span<const double> d, std::size_t rows, std::size_t cols) {
  return ConstMap(d.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
MutMap as_matrix(std::vector<double>& d, std::size_t rows, std::size_t cols) {
  return MutMap(d.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

const std::vector<double>& input(const Node& self, std::size_t i) { return self.inputs[i]->data; }

[[noreturn]] void shape_error(const char* op, std::initializer_list<const Tensor*> operands, const std::string& why) {
  std::string msg = std::string(op) + ": " + why + " (shapes";
  for (const Tensor* t : operands) msg += " " + to_string(t->shape());
  throw ShapeError(msg + ")");
}

void require_rank(const char* op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) shape_error(op, {&t}, "expected rank " + std::to_string(rank));
}

void require_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error(op, {&a, &b}, "operand shapes differ");
}

template <typename Fn, typename Dfn>
Tensor unary(const char* op, const Tensor& x, Fn f, Dfn df_from_xy) {
  std::vector<double> out(x.size());
  const auto xs = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xs[i]);
  return Tensor::from_op(
      x.shape(), std::move(out), {x},
      [df_from_xy](const Node& self, std::span<const double> g, std::span<std::vector<double>* const> gin) {
        const auto& xv = input(self, 0);
        auto& gx = *gin[0];
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df_from_xy(xv[i], self.data[i]);
      },
      op);
}

// im2col for 3D: rows are (n, od, oh, ow), columns (c, kz, ky, kx).
struct Conv3dGeom {
  std::size_t n, c, d, h, w, k, pad, od, oh, ow;
  std::size_t out_positions() const { return od * oh * ow; }
  std::size_t patch() const { return c * k * k * k; }
};

void im2col3d(const Conv3dGeom& g, std::span<const double> x, std::vector<double>& cols) {
  cols.assign(g.n * g.out_positions() * g.patch(), 0.0);
  std::size_t row = 0;
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t z = 0; z < g.od; ++z)
      for (std::size_t y = 0; y < g.oh; ++y)
        for (std::size_t xx = 0; xx < g.ow; ++xx, ++row) {
          double* dst = cols.data() + row * g.patch();
          for (std::size_t c = 0; c < g.c; ++c)
            for (std::size_t kz = 0; kz < g.k; ++kz) {
              const auto iz = static_cast<std::ptrdiff_t>(z + kz) - static_cast<std::ptrdiff_t>(g.pad);
              for (std::size_t ky = 0; ky < g.k; ++ky) {
                const auto iy = static_cast<std::ptrdiff_t>(y + ky) - static_cast<std::ptrdiff_t>(g.pad);
                for (std::size_t kx = 0; kx < g.k; ++kx, ++dst) {
                  const auto ix = static_cast<std::ptrdiff_t>(xx + kx) - static_cast<std::ptrdiff_t>(g.pad);
                  if (iz < 0 || iy < 0 || ix < 0 || iz >= static_cast<std::ptrdiff_t>(g.d) ||
                      iy >= static_cast<std::ptrdiff_t>(g.h) || ix >= static_cast<std::ptrdiff_t>(g.w))
                    continue;
                  *dst = x[(((n * g.c + c) * g.d + iz) * g.h + iy) * g.w + ix];
                }
              }
            }
        }
}

void col2im3d(const Conv3dGeom& g, const std::vector<double>& cols, std::vector<double>& gx) {
  std::size_t row = 0;
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t z = 0; z < g.od; ++z)
      for (std::size_t y = 0; y < g.oh; ++y)
        for (std::size_t xx = 0; xx < g.ow; ++xx, ++row) {
          const double* src = cols.data() + row * g.patch();
          for (std::size_t c = 0; c < g.c; ++c)
            for (std::size_t kz = 0; kz < g.k; ++kz) {
              const auto iz = static_cast<std::ptrdiff_t>(z + kz) - static_cast<std::ptrdiff_t>(g.pad);
              for (std::size_t ky = 0; ky < g.k; ++ky) {
                const auto iy = static_cast<std::ptrdiff_t>(y + ky) - static_cast<std::ptrdiff_t>(g.pad);
                for (std::size_t kx = 0; kx < g.k; ++kx, ++src) {
                  const auto ix = static_cast<std::ptrdiff_t>(xx + kx) - static_cast<std::ptrdiff_t>(g.pad);
                  if (iz < 0 || iy < 0 || ix < 0 || iz >= static_cast<std::ptrdiff_t>(g.d) ||
                      iy >= static_cast<std::ptrdiff_t>(g.h) || ix >= static_cast<std::ptrdiff_t>(g.w))
                    continue;
                  gx[(((n * g.c + c) * g.d + iz) * g.h + iy) * g.w + ix] += *src;
                }
              }
            }
        }
}

struct Conv1dGeom {
  std::size_t n, c, l, k, stride, pad, ol;
  std::size_t patch() const { return c * k; }
};

void im2col1d(const Conv1dGeom& g, std::span<const double> x, std::vector<double>& cols) {
  cols.assign(g.n * g.ol * g.patch(), 0.0);
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t o = 0; o < g.ol; ++o) {
      double* dst = cols.data() + (n * g.ol + o) * g.patch();
      for (std::size_t c = 0; c < g.c; ++c)
        for (std::size_t k = 0; k < g.k; ++k, ++dst) {
          const auto i = static_cast<std::ptrdiff_t>(o * g.stride + k) - static_cast<std::ptrdiff_t>(g.pad);
          if (i >= 0 && i < static_cast<std::ptrdiff_t>(g.l)) *dst = x[(n * g.c + c) * g.l + i];
        }
    }
}

void col2im1d(const Conv1dGeom& g, const std::vector<double>& cols, std::vector<double>& gx) {
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t o = 0; o < g.ol; ++o) {
      const double* src = cols.data() + (n * g.ol + o) * g.patch();
      for (std::size_t c = 0; c < g.c; ++c)
        for (std::size_t k = 0; k < g.k; ++k, ++src) {
          const auto i = static_cast<std::ptrdiff_t>(o * g.stride + k) - static_cast<std::ptrdiff_t>(g.pad);
          if (i >= 0 && i < static_cast<std::ptrdiff_t>(g.l)) gx[(n * g.c + c) * g.l + i] += *src;
        }
    }
}

// [N, C, P] <-> [N*P, C] layout changes around the im2col products.
void channels_to_rows(std::span<const double> src, std::size_t n, std::size_t c, std::size_t p,
                      std::vector<double>& dst) {
  dst.resize(n * c * p);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t q = 0; q < p; ++q) dst[(i * p + q) * c + ch] = src[(i * c + ch) * p + q];
}

void rows_to_channels(const std::vector<double>& src, std::size_t n, std::size_t c, std::size_t p,
                      std::vector<double>& dst) {
  dst.resize(n * c * p);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t q = 0; q < p; ++q) dst[(i * c + ch) * p + q] = src[(i * p + q) * c + ch];
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) shape_error("matmul", {&a, &b}, "inner extents differ");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n);
  as_matrix(out, m, n).noalias() = as_matrix(a.data(), m, k) * as_matrix(b.data(), k, n);
  return Tensor::from_op(
      {m, n}, std::move(out), {a, b},
      [m, k, n](const Node& self, std::span<const double> g, std::span<std::vector<double>* const> gin) {
        const auto gm = as_matrix(g, m, n);
        if (gin[0]) as_matrix(*gin[0], m, k).noalias() += gm * as_matrix(input(self, 1), k, n).transpose();
        if (gin[1]) as_matrix(*gin[1], k, n).noalias() += as_matrix(input(self, 0), m, k).transpose() * gm;
      },
      "matmul");
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  const std::size_t c = x.shape().back();
  if (bias.size() != c) shape_error("add_bias", {&x, &bias}, "bias length must equal the last extent");
  std::vector<double> out(x.data().begin(), x.data().end());
  const auto b = bias.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i % c];
  return Tensor::from_op(
      x.shape(), std::move(out), {x, bias},
      [c](const Node&, std::span<const double> g, std::span<std::vector<double>* const> gin) {
        if (gin[0])
          for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
        if (gin[1])
          for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i % c] += g[i];
      },
      "add_bias");
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(0) || bias.size() != weight.dim(1))
    shape_error("linear", {&x, &weight, &bias}, "expected [N,in] x [in,out] + [out]");
  const std::size_t m = x.dim(0), k = x.dim(1), n = weight.dim(1);
  std::vector<double> out(m * n);
  auto om = as_matrix(out, m, n);
  om.noalias() = as_matrix(x.data(), m, k) * as_matrix(weight.data(), k, n);
  om.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.data().data(), static_cast<Eigen::Index>(n));
  return Tensor::from_op(
      {m, n}, std::move(out), {x, weight, bias},
      [m, k, n](const Node& self, std::span<const double> g, std::span<std::vector<double>* const> gin) {
        const auto gm = as_matrix(g, m, n);
        if (gin[0]) as_matrix(*gin[0], m, k).noalias() += gm * as_matrix(input(self, 1), k, n).transpose();
        if (gin[1]) as_matrix(*gin[1], k, n).noalias() += as_matrix(input(self, 0), m, k).transpose() * gm;
        if (gin[2]) as_matrix(*gin[2], 1, n) += gm.colwise().sum();
      },
      "linear");
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same("add", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return Tensor::from_op(
      a.shape(), std::move(out), {a, b},
      [](const Node&, std::span<const double> g, std::span<std::vector<double>* const> gin) {
        for (auto* gi : gin)
          if (gi)
            for (std::size_t i = 0; i < g.size(); ++i) (*gi)[i] += g[i];
      },
      "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same("sub", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return Tensor::from_op(
      a.shape(), std::move(out), {a, b},
      [](const Node&, std::span<const double> g, std::span<std::vector<double>* const> gin) {
        if (gin[0])
          for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
        if (gin[1])
          for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i] -= g[i];
      },
      "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same("mul", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return Tensor::from_op(
      a.shape(), std::move(out), {a, b},
      [](const Node& self, std::span<const double> g, std::span<std::vector<double>* const> gin) {
        const auto& av = input(self, 0);
        const auto& bv = input(self, 1);
        if (gin[0])
          for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * bv[i];
        if (gin[1])
          for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i] += g[i] * av[i];
      },
      "mul");
}

Tensor affine(const Tensor& x, double a, double b) {
  return unary(
      "affine", x, [a, b](double v) { return a * v + b; }, [a](double, double) { return a; });
}

Tensor relu(const Tensor& x) {
  return unary(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor tanh(const Tensor& x) {
  return unary(
      "tanh", x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      "sigmoid", x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); }, [](double, double y) { return y * (1.0 - y); });
}

Tensor conv3d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t padding) {
  require_rank("conv3d", x, 5);
  require_rank("conv3d", weight, 5);
  const std::size_t k = weight.dim(2);
  if (weight.dim(1) != x.dim(1) || weight.dim(3) != k || weight.dim(4) != k || bias.size() != weight.dim(0))
    shape_error("conv3d", {&x, &weight, &bias}, "weight must be [Co,C,k,k,k] with bias [Co]");
  for (std::size_t ax = 2; ax < 5; ++ax)
    if (x.dim(ax) + 2 * padding < k) shape_error("conv3d", {&x, &weight}, "kernel larger than padded input");
  Conv3dGeom geo{x.dim(0), x.dim(1), x.dim(2), x.dim(3), x.dim(4), k, padding,
                 x.dim(2) + 2 * padding - k + 1, x.dim(3) + 2 * padding - k + 1, x.dim(4) + 2 * padding - k + 1};
  const std::size_t co = weight.dim(0), rows = geo.n * geo.out_positions();

  std::vector<double> cols;
  im2col3d(geo, x.data(), cols);
  std::vector<double> prod(rows * co);
  auto pm = as_matrix(prod, rows, co);
  pm.noalias() = as_matrix(cols, rows, geo.patch()) * as_matrix(weight.data(), co, geo.patch()).transpose();
  pm.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.data().data(), static_cast<Eigen::Index>(co));
  std::vector<double> out;
  rows_to_channels(prod, geo.n, co, geo.out_positions(), out);

  return Tensor::from_op(
      {geo.n, co, geo.od, geo.oh, geo.ow}, std::move(out), {x, weight, bias},
      [geo, co, rows](const Node& self, std::span<const double> g, std::span<std::vector<double>* const> gin) {
        std::vector<double> grows;
        channels_to_rows(g, geo.n, co, geo.out_positions(), grows);
        const auto gm = as_matrix(grows, rows, co);
        if (gin[1]) {
          std::vector<double> cols;
          im2col3d(geo, input(self, 0), cols);
          as_matrix(*gin[1], co, geo.patch()).noalias() += gm.transpose() * as_matrix(cols, rows, geo.patch());
        }
        if (gin[2]) as_matrix(*gin[2], 1, co) += gm.colwise().sum();
        if (gin[0]) {
          std::vector<double> dcols(rows * geo.patch());
          as_matrix(dcols, rows, geo.patch()).noalias() = gm * as_matrix(input(self, 1), co, geo.patch());
          col2im3d(geo, dcols, *gin[0]);
        }
      },
      "conv3d");
}

Tensor conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride, std::size_t padding) {
  require_rank("conv1d", x, 3);
  require_rank("conv1d", weight, 3);
  if (stride == 0) shape_error("conv1d", {&x}, "stride must be positive");
  const std::size_t k = weight.dim(2);
  if (weight.dim(1) != x.dim(1) || bias.size() != weight.dim(0))
    shape_error("conv1d", {&x, &weight, &bias}, "weight must be [Co,C,k] with bias [Co]");
  if (x.dim(2) + 2 * padding < k) shape_error("conv1d", {&x, &weight}, "kernel larger than padded input");
  Conv1dGeom geo{x.dim(0), x.dim(1), x.dim(2), k, stride, padding, (x.dim(2) + 2 * padding - k) / stride + 1};
  const std::size_t co = weight.dim(0), rows = geo.n * geo.ol;

  std::vector<double> cols;
  im2col1d(geo, x.data(), cols);
  std::vector<double> prod(rows * co);
  auto pm = as_matrix(prod, rows, co);
  pm.noalias() = as_matrix(cols, rows, geo.patch()) * as_matrix(weight.data(), co, geo.patch()).transpose();
  pm.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.data().data(), static_cast<Eigen::Index>(co));
  std::vector<double> out;
  rows_to_channels(prod, geo.n, co, geo.ol, out);

  return Tensor::from_op(
      {geo.n, co, geo.ol}, std::move(out), {x, weight, bias},
      [geo, co, rows](const Node& self, std::span<const double> g, std::span<std::vector<double>* const> gin) {
        std::vector<double> grows;
        channels_to_rows(g, geo.n, co, geo.ol, grows);
        const auto gm = as_matrix(grows, rows, co);
        if (gin[1]) {
          std::vector<double> cols;
          im2col1d(geo, input(self, 0), cols);
          as_matrix(*gin[1], co, geo.patch()).noalias() += gm.transpose() * as_matrix(cols, rows, geo.patch());
        }
        if (gin[2]) as_matrix(*gin[2], 1, co) += gm.colwise().sum();
        if (gin[0]) {
          std::vector<double> dcols(rows * geo.patch());
          as_matrix(dcols, rows, geo.patch()).noalias() = gm * as_matrix(input(self, 1), co, geo.patch());
          col2im1d(geo, dcols, *gin[0]);
        }
      },
      "conv1d");
}

Tensor conv_transpose1d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride,
                        std::size_t padding, std::size_t output_padding) {
  require_rank("conv_transpose1d", x, 3);
  require_rank("conv_transpose1d", weight, 3);
  if (stride == 0) shape_error("conv_transpose1d", {&x}, "stride must be positive");
  if (weight.dim(0) != x.dim(1) || bias.size() != weight.dim(1))
    shape_error("conv_transpose1d", {&x, &weight, &bias}, "weight must be [C,Co,k] with bias [Co]");
  const std::size_t n = x.dim(0), c = x.dim(1), l = x.dim(2), co = weight.dim(1), k = weight.dim(2);
  const auto full = static_cast<std::ptrdiff_t>((l - 1) * stride + k + output_padding);
  if (full <= static_cast<std::ptrdiff_t>(2 * padding) || output_padding >= stride)
    shape_error("conv_transpose1d", {&x, &weight}, "padding leaves no output");
  const std::size_t ol = static_cast<std::size_t>(full) - 2 * padding;

  // Scatter map: row (n,i), column (co,kk) lands at output position i*stride + kk - padding.
  auto target = [stride, padding, ol](std::size_t i, std::size_t kk) -> std::ptrdiff_t {
    const auto j = static_cast<std::ptrdiff_t>(i * stride + kk) - static_cast<std::ptrdiff_t>(padding);
    return (j >= 0 && j < static_cast<std::ptrdiff_t>(ol)) ? j : -1;
  };

  std::vector<double> xrows;
  channels_to_rows(x.data(), n, c, l, xrows);
  std::vector<double> prod(n * l * co * k);
  as_matrix(prod, n * l, co * k).noalias() = as_matrix(xrows, n * l, c) * as_matrix(weight.data(), c, co * k);
  std::vector<double> out(n * co * ol);
  const auto b = bias.data();
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t o = 0; o < co; ++o)
      for (std::size_t j = 0; j < ol; ++j) out[(s * co + o) * ol + j] = b[o];
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t i = 0; i < l; ++i)
      for (std::size_t o = 0; o < co; ++o)
        for (std::size_t kk = 0; kk < k; ++kk)
          if (const auto j = target(i, kk); j >= 0) out[(s * co + o) * ol + j] += prod[(s * l + i) * co * k + o * k + kk];

  return Tensor::from_op(
      {n, co, ol}, std::move(out), {x, weight, bias},
      [n, c, l, co, k, ol, target](const Node& self, std::span<const double> g,
                                   std::span<std::vector<double>* const> gin) {
        std::vector<double> dprod(n * l * co * k, 0.0);
        for (std::size_t s = 0; s < n; ++s)
          for (std::size_t i = 0; i < l; ++i)
            for (std::size_t o = 0; o < co; ++o)
              for (std::size_t kk = 0; kk < k; ++kk)
                if (const auto j = target(i, kk); j >= 0) dprod[(s * l + i) * co * k + o * k + kk] = g[(s * co + o) * ol + j];
        const auto dm = as_matrix(dprod, n * l, co * k);
        if (gin[1]) {
          std::vector<double> xrows;
          channels_to_rows(input(self, 0), n, c, l, xrows);
          as_matrix(*gin[1], c, co * k).noalias() += as_matrix(xrows, n * l, c).transpose() * dm;
        }
        if (gin[2])
          for (std::size_t s = 0; s < n; ++s)
            for (std::size_t o = 0; o < co; ++o)
              for (std::size_t j = 0; j < ol; ++j) (*gin[2])[o] += g[(s * co + o) * ol + j];
        if (gin[0]) {
          std::vector<double> dx(n * l * c);
          as_matrix(dx, n * l, c).noalias() = dm * as_matrix(input(self, 1), c, co * k).transpose();
          for (std::size_t s = 0; s < n; ++s)
            for (std::size_t ch = 0; ch < c; ++ch)
              for (std::size_t i = 0; i < l; ++i) (*gin[0])[(s * c + ch) * l + i] += dx[(s * l + i) * c + ch];
        }
      },
      "conv_transpose1d");
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no operands");
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) shape_error("concat", {&parts.front()}, "axis out of range");
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != ref.size()) shape_error("concat", {&parts.front(), &p}, "ranks differ");
    for (std::size_t d = 0; d < ref.size(); ++d)
      if (d != axis && p.dim(d) != ref[d]) shape_error("concat", {&parts.front(), &p}, "non-concat extents differ");
    total += p.dim(axis);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= ref[d];
  for (std::size_t d = axis + 1; d < ref.size(); ++d) inner *= ref[d];
  Shape shape = ref;
  shape[axis] = total;
  std::vector<double> out(numel(shape));
  std::vector<std::size_t> extents;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t run = p.dim(axis) * inner;
    const auto src = p.data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(src.begin() + o * run, run, out.begin() + o * total * inner + offset);
    offset += run;
    extents.push_back(p.dim(axis));
  }
  return Tensor::from_op(
      std::move(shape), std::move(out), parts,
      [extents, outer, inner, total](const Node&, std::span<const double> g,
                                     std::span<std::vector<double>* const> gin) {
        std::size_t off = 0;
        for (std::size_t i = 0; i < extents.size(); ++i) {
          const std::size_t run = extents[i] * inner;
          if (gin[i])
            for (std::size_t o = 0; o < outer; ++o)
              for (std::size_t q = 0; q < run; ++q) (*gin[i])[o * run + q] += g[o * total * inner + off + q];
          off += run;
        }
      },
      "concat");
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= x.rank() || begin >= end || end > x.dim(axis))
    shape_error("slice", {&x}, "range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid on axis " +
                                   std::to_string(axis));
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= x.dim(d);
  for (std::size_t d = axis + 1; d < x.rank(); ++d) inner *= x.dim(d);
  const std::size_t full = x.dim(axis) * inner, run = (end - begin) * inner, off = begin * inner;
  Shape shape = x.shape();
  shape[axis] = end - begin;
  std::vector<double> out(outer * run);
  const auto src = x.data();
  for (std::size_t o = 0; o < outer; ++o) std::copy_n(src.begin() + o * full + off, run, out.begin() + o * run);
  return Tensor::from_op(
      std::move(shape), std::move(out), {x},
      [outer, full, run, off](const Node&, std::span<const double> g, std::span<std::vector<double>* const> gin) {
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t q = 0; q < run; ++q) (*gin[0])[o * full + off + q] += g[o * run + q];
      },
      "slice");
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) shape_error("reshape", {&x}, "element count differs from " + to_string(shape));
  std::vector<double> out(x.data().begin(), x.data().end());
  return Tensor::from_op(
      std::move(shape), std::move(out), {x},
      [](const Node&, std::span<const double> g, std::span<std::vector<double>* const> gin) {
        for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
      },
      "reshape");
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return Tensor::from_op(
      {1}, {s}, {x},
      [](const Node&, std::span<const double> g, std::span<std::vector<double>* const> gin) {
        for (auto& v : *gin[0]) v += g[0];
      },
      "sum");
}

Tensor mean(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  const double inv = 1.0 / static_cast<double>(x.size());
  return Tensor::from_op(
      {1}, {s * inv}, {x},
      [inv](const Node&, std::span<const double> g, std::span<std::vector<double>* const> gin) {
        for (auto& v : *gin[0]) v += g[0] * inv;
      },
      "mean");
}

Tensor smooth_l1(const Tensor& a, const Tensor& b, double beta) {
  require_same("smooth_l1", a, b);
  if (!(beta > 0.0)) throw InputError("smooth_l1: transition point must be positive");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double d = a[i] - b[i];
    const double ad = std::abs(d);
    out[i] = ad < beta ? 0.5 * d * d / beta : ad - 0.5 * beta;
  }
  return Tensor::from_op(
      a.shape(), std::move(out), {a, b},
      [beta](const Node& self, std::span<const double> g, std::span<std::vector<double>* const> gin) {
        const auto& av = input(self, 0);
        const auto& bv = input(self, 1);
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double d = av[i] - bv[i];
          const double dd = std::abs(d) < beta ? d / beta : (d > 0 ? 1.0 : -1.0);
          if (gin[0]) (*gin[0])[i] += g[i] * dd;
          if (gin[1]) (*gin[1])[i] -= g[i] * dd;
        }
      },
      "smooth_l1");
}

Tensor film(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  require_rank("film", x, 3);
  const std::size_t n = x.dim(0), c = x.dim(1), l = x.dim(2);
  if (gamma.shape() != Shape{n, c} || beta.shape() != Shape{n, c})
    shape_error("film", {&x, &gamma, &beta}, "gamma and beta must be [N,C]");
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < n * c; ++i)
    for (std::size_t q = 0; q < l; ++q) out[i * l + q] = gamma[i] * x[i * l + q] + beta[i];
  return Tensor::from_op(
      x.shape(), std::move(out), {x, gamma, beta},
      [n, c, l](const Node& self, std::span<const double> g, std::span<std::vector<double>* const> gin) {
        const auto& xv = input(self, 0);
        const auto& gv = input(self, 1);
        for (std::size_t i = 0; i < n * c; ++i)
          for (std::size_t q = 0; q < l; ++q) {
            const double go = g[i * l + q];
            if (gin[0]) (*gin[0])[i * l + q] += go * gv[i];
            if (gin[1]) (*gin[1])[i] += go * xv[i * l + q];
            if (gin[2]) (*gin[2])[i] += go;
          }
      },
      "film");
}

namespace {

// Shared by group_norm and layer_norm: x viewed as [N, C, L] with C split
// into `groups` blocks; per-channel affine.
Tensor grouped_norm(const char* op, const Tensor& x, std::size_t n, std::size_t c, std::size_t l, std::size_t groups,
                    const Tensor& weight, const Tensor& bias, double eps) {
  if (groups == 0 || c % groups != 0) shape_error(op, {&x}, "channel count not divisible by group count");
  if (weight.size() != c || bias.size() != c) shape_error(op, {&x, &weight, &bias}, "affine parameters must be [C]");
  const std::size_t cpg = c / groups, span = cpg * l;
  std::vector<double> out(x.size());
  const auto xv = x.data();
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t gi = 0; gi < groups; ++gi) {
      const std::size_t base = (s * c + gi * cpg) * l;
      double mu = 0.0;
      for (std::size_t q = 0; q < span; ++q) mu += xv[base + q];
      mu /= static_cast<double>(span);
      double var = 0.0;
      for (std::size_t q = 0; q < span; ++q) var += (xv[base + q] - mu) * (xv[base + q] - mu);
      var /= static_cast<double>(span);
      const double inv = 1.0 / std::sqrt(var + eps);
      for (std::size_t q = 0; q < span; ++q) {
        const std::size_t ch = gi * cpg + q / l;
        out[base + q] = (xv[base + q] - mu) * inv * weight[ch] + bias[ch];
      }
    }
  return Tensor::from_op(
      x.shape(), std::move(out), {x, weight, bias},
      [n, c, l, groups, cpg, span, eps](const Node& self, std::span<const double> g,
                                        std::span<std::vector<double>* const> gin) {
        const auto& xv = input(self, 0);
        const auto& w = input(self, 1);
        std::vector<double> xhat(span), dxhat(span);
        for (std::size_t s = 0; s < n; ++s)
          for (std::size_t gi = 0; gi < groups; ++gi) {
            const std::size_t base = (s * c + gi * cpg) * l;
            double mu = 0.0;
            for (std::size_t q = 0; q < span; ++q) mu += xv[base + q];
            mu /= static_cast<double>(span);
            double var = 0.0;
            for (std::size_t q = 0; q < span; ++q) var += (xv[base + q] - mu) * (xv[base + q] - mu);
            var /= static_cast<double>(span);
            const double inv = 1.0 / std::sqrt(var + eps);
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t q = 0; q < span; ++q) {
              const std::size_t ch = gi * cpg + q / l;
              xhat[q] = (xv[base + q] - mu) * inv;
              dxhat[q] = g[base + q] * w[ch];
              mean_d += dxhat[q];
              mean_dx += dxhat[q] * xhat[q];
              if (gin[1]) (*gin[1])[ch] += g[base + q] * xhat[q];
              if (gin[2]) (*gin[2])[ch] += g[base + q];
            }
            mean_d /= static_cast<double>(span);
            mean_dx /= static_cast<double>(span);
            if (gin[0])
              for (std::size_t q = 0; q < span; ++q)
                (*gin[0])[base + q] += inv * (dxhat[q] - mean_d - xhat[q] * mean_dx);
          }
      },
      op);
}

}  // namespace

Tensor group_norm(const Tensor& x, std::size_t groups, const Tensor& weight, const Tensor& bias, double eps) {
  require_rank("group_norm", x, 3);
  return grouped_norm("group_norm", x, x.dim(0), x.dim(1), x.dim(2), groups, weight, bias, eps);
}

Tensor layer_norm(const Tensor& x, const Tensor& weight, const Tensor& bias, double eps) {
  require_rank("layer_norm", x, 2);
  return grouped_norm("layer_norm", x, x.dim(0), x.dim(1), 1, 1, weight, bias, eps);
}

}  // namespace ddtrack::ad
