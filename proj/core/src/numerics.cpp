// Copyright 2026 The iptt Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "iptt/numerics.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <thread>

#if defined(_OPENMP)
#include <omp.h>
#endif

namespace iptt {
namespace {

std::atomic<int> g_workers{0};

int default_workers() {
  if (const char* env = std::getenv("IPTT_WORKERS")) {
    const int v = std::atoi(env);
    if (v > 0) return v;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

void require_same_shape(const RealMatrix& a, const RealMatrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw Error(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " +
                shape_string(b));
  }
}

// c(i, :) = sum_k a(i, k) * b(k, :) for i in [i0, i1). c rows must start at +0.
// Four rows share each load of b; per-element operation order is identical to
// the single-row tail, so results do not depend on the blocking.
void gemm_rows(const double* __restrict a, const double* __restrict b, double* __restrict c,
               std::size_t i0, std::size_t i1, std::size_t inner, std::size_t n) {
  std::size_t i = i0;
  for (; i + 4 <= i1; i += 4) {
    double* __restrict c0 = c + i * n;
    double* __restrict c1 = c0 + n;
    double* __restrict c2 = c1 + n;
    double* __restrict c3 = c2 + n;
    const double* a0 = a + i * inner;
    const double* a1 = a0 + inner;
    const double* a2 = a1 + inner;
    const double* a3 = a2 + inner;
    for (std::size_t k = 0; k < inner; ++k) {
      const double* __restrict br = b + k * n;
      const double x0 = a0[k], x1 = a1[k], x2 = a2[k], x3 = a3[k];
      for (std::size_t j = 0; j < n; ++j) {
        const double bv = br[j];
        c0[j] += x0 * bv;
        c1[j] += x1 * bv;
        c2[j] += x2 * bv;
        c3[j] += x3 * bv;
      }
    }
  }
  for (; i < i1; ++i) {
    double* __restrict ci = c + i * n;
    const double* ai = a + i * inner;
    for (std::size_t k = 0; k < inner; ++k) {
      const double* __restrict br = b + k * n;
      const double x = ai[k];
      for (std::size_t j = 0; j < n; ++j) ci[j] += x * br[j];
    }
  }
}

bool in_same_segment(std::span<const std::int64_t> ids, std::size_t t, std::size_t u) {
  return ids.empty() || ids[t] == ids[u];
}

}  // namespace

RealMatrix::RealMatrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw Error("RealMatrix: data length " + std::to_string(data_.size()) + " != " +
                std::to_string(rows) + "x" + std::to_string(cols));
  }
}

RealMatrix RealMatrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw Error("RealMatrix::from_rows: ragged rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return RealMatrix(r, c, std::move(data));
}

RealMatrix RealMatrix::identity(std::size_t n) {
  RealMatrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

RealMatrix RealMatrix::row_vector(std::span<const double> values) {
  return RealMatrix(1, values.size(), std::vector<double>(values.begin(), values.end()));
}

void RealMatrix::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

std::string shape_string(const RealMatrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

bool bitwise_equal(const RealMatrix& a, const RealMatrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  return a.size() == 0 || std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

double max_abs_diff(const RealMatrix& a, const RealMatrix& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

bool all_finite(const RealMatrix& a) {
  return std::all_of(a.values().begin(), a.values().end(),
                     [](double v) { return std::isfinite(v); });
}

int worker_count() {
  int w = g_workers.load(std::memory_order_relaxed);
  if (w <= 0) {
    w = default_workers();
    g_workers.store(w, std::memory_order_relaxed);
  }
  return w;
}

void set_worker_count(int workers) { g_workers.store(std::max(1, workers)); }

RealMatrix matmul(const RealMatrix& a, const RealMatrix& b) {
  if (a.cols() != b.rows()) {
    throw Error("matmul: dimension mismatch " + shape_string(a) + " * " + shape_string(b));
  }
  RealMatrix c(a.rows(), b.cols());
  const std::size_t m = a.rows(), inner = a.cols(), n = b.cols();
  if (m == 0 || n == 0) return c;
  const std::size_t blocks = (m + 15) / 16;
  const bool parallel = worker_count() > 1 && m * inner * n > (1u << 16);
#if defined(_OPENMP)
#pragma omp parallel for schedule(static) num_threads(worker_count()) if (parallel)
#endif
  for (std::ptrdiff_t blk = 0; blk < static_cast<std::ptrdiff_t>(blocks); ++blk) {
    const std::size_t i0 = static_cast<std::size_t>(blk) * 16;
    gemm_rows(a.data(), b.data(), c.data(), i0, std::min(m, i0 + 16), inner, n);
  }
  (void)parallel;
  return c;
}

RealMatrix transpose(const RealMatrix& a) {
  RealMatrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

RealMatrix matmul_nt(const RealMatrix& a, const RealMatrix& b) {
  if (a.cols() != b.cols()) {
    throw Error("matmul_nt: dimension mismatch " + shape_string(a) + " * " + shape_string(b) +
                "^T");
  }
  return matmul(a, transpose(b));
}

RealMatrix matmul_tn(const RealMatrix& a, const RealMatrix& b) {
  if (a.rows() != b.rows()) {
    throw Error("matmul_tn: dimension mismatch " + shape_string(a) + "^T * " + shape_string(b));
  }
  return matmul(transpose(a), b);
}

RealMatrix add(const RealMatrix& a, const RealMatrix& b) {
  require_same_shape(a, b, "add");
  RealMatrix c(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) c.data()[i] = a.data()[i] + b.data()[i];
  return c;
}

RealMatrix sub(const RealMatrix& a, const RealMatrix& b) {
  require_same_shape(a, b, "sub");
  RealMatrix c(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) c.data()[i] = a.data()[i] - b.data()[i];
  return c;
}

RealMatrix hadamard(const RealMatrix& a, const RealMatrix& b) {
  require_same_shape(a, b, "hadamard");
  RealMatrix c(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) c.data()[i] = a.data()[i] * b.data()[i];
  return c;
}

RealMatrix scale(const RealMatrix& a, double s) {
  RealMatrix c(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) c.data()[i] = a.data()[i] * s;
  return c;
}

void add_inplace(RealMatrix& acc, const RealMatrix& b) {
  require_same_shape(acc, b, "add_inplace");
  for (std::size_t i = 0; i < acc.size(); ++i) acc.data()[i] += b.data()[i];
}

double sum(const RealMatrix& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  return s;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double silu(double x) { return x * sigmoid(x); }

double silu_derivative(double x) {
  const double s = sigmoid(x);
  return s + x * s * (1.0 - s);
}

RealMatrix silu(const RealMatrix& x) {
  RealMatrix y(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) y.data()[i] = silu(x.data()[i]);
  return y;
}

RealMatrix softmax_rows(const RealMatrix& x) {
  RealMatrix y(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto in = x.row(r);
    auto out = y.row(r);
    if (in.empty()) continue;
    const double m = *std::max_element(in.begin(), in.end());
    double s = 0.0;
    for (std::size_t j = 0; j < in.size(); ++j) {
      out[j] = std::exp(in[j] - m);
      s += out[j];
    }
    for (double& v : out) v /= s;
  }
  return y;
}

double frob_norm(const RealMatrix& x) {
  double s = 0.0;
  for (double v : x.values()) s += v * v;
  return std::sqrt(s);
}

RealMatrix rms_norm(const RealMatrix& x, const RealMatrix& gain, double eps) {
  if (gain.rows() != 1 || gain.cols() != x.cols()) {
    throw Error("rms_norm: gain must be 1x" + std::to_string(x.cols()) + ", got " +
                shape_string(gain));
  }
  RealMatrix y(x.rows(), x.cols());
  const double inv_n = 1.0 / static_cast<double>(x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto in = x.row(r);
    double ms = 0.0;
    for (double v : in) ms += v * v;
    const double inv = 1.0 / std::sqrt(ms * inv_n + eps);
    auto out = y.row(r);
    for (std::size_t j = 0; j < in.size(); ++j) out[j] = in[j] * inv * gain.data()[j];
  }
  return y;
}

RealMatrix slice_rows(const RealMatrix& x, std::size_t begin, std::size_t end) {
  if (begin > end || end > x.rows()) {
    throw Error("slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                ") out of " + std::to_string(x.rows()) + " rows");
  }
  RealMatrix y(end - begin, x.cols());
  if (y.size() != 0) {
    std::memcpy(y.data(), x.data() + begin * x.cols(), y.size() * sizeof(double));
  }
  return y;
}

RealMatrix concat_rows(std::span<const RealMatrix> parts) {
  if (parts.empty()) return {};
  const std::size_t cols = parts.front().cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw Error("concat_rows: column mismatch");
    rows += p.rows();
  }
  RealMatrix y(rows, cols);
  double* dst = y.data();
  for (const auto& p : parts) {
    if (p.size() != 0) std::memcpy(dst, p.data(), p.size() * sizeof(double));
    dst += p.size();
  }
  return y;
}

ConvSpec ConvSpec::lookahead(std::size_t width, std::size_t channels) {
  ConvSpec spec;
  for (std::size_t k = 0; k < width; ++k) spec.offsets.push_back(static_cast<int>(k));
  spec.kernel = RealMatrix(width, channels);
  return spec;
}

void ConvSpec::validate(std::size_t channels) const {
  if (kernel.rows() != offsets.size() || kernel.cols() != channels) {
    throw Error("ConvSpec: kernel must be " + std::to_string(offsets.size()) + "x" +
                std::to_string(channels) + ", got " + shape_string(kernel));
  }
  std::vector<int> sorted = offsets;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw Error("ConvSpec: offsets must be distinct");
  }
}

RealMatrix lookahead_conv1d(const RealMatrix& x, const ConvSpec& spec,
                            std::span<const std::int64_t> segment_ids) {
  spec.validate(x.cols());
  if (!segment_ids.empty() && segment_ids.size() != x.rows()) {
    throw Error("lookahead_conv1d: segment id count mismatch");
  }
  const auto n = static_cast<std::ptrdiff_t>(x.rows());
  const std::size_t ch = x.cols();
  RealMatrix y(x.rows(), ch);
  for (std::ptrdiff_t t = 0; t < n; ++t) {
    auto out = y.row(static_cast<std::size_t>(t));
    for (std::size_t k = 0; k < spec.offsets.size(); ++k) {
      const std::ptrdiff_t u = t + spec.offsets[k];
      if (u < 0 || u >= n) continue;
      if (!in_same_segment(segment_ids, static_cast<std::size_t>(t), static_cast<std::size_t>(u)))
        continue;
      const auto src = x.row(static_cast<std::size_t>(u));
      const auto w = spec.kernel.row(k);
      for (std::size_t c = 0; c < ch; ++c) out[c] += w[c] * src[c];
    }
  }
  return y;
}

RealMatrix lookahead_conv1d(const RealMatrix& x, const RealMatrix& kernel,
                            const std::vector<int>& offsets,
                            std::span<const std::int64_t> segment_ids) {
  return lookahead_conv1d(x, ConvSpec{offsets, kernel}, segment_ids);
}

void lookahead_conv1d_backward(const RealMatrix& x, const ConvSpec& spec,
                               std::span<const std::int64_t> segment_ids,
                               const RealMatrix& out_grad, RealMatrix* x_grad,
                               RealMatrix* kernel_grad) {
  const auto n = static_cast<std::ptrdiff_t>(x.rows());
  const std::size_t ch = x.cols();
  if (out_grad.rows() != x.rows() || out_grad.cols() != ch) {
    throw Error("lookahead_conv1d_backward: out_grad shape " + shape_string(out_grad) +
                " does not match input " + shape_string(x));
  }
  if (x_grad != nullptr && x_grad->empty()) *x_grad = RealMatrix(x.rows(), ch);
  if (kernel_grad != nullptr && kernel_grad->empty()) {
    *kernel_grad = RealMatrix(spec.kernel.rows(), spec.kernel.cols());
  }
  for (std::ptrdiff_t t = 0; t < n; ++t) {
    const auto g = out_grad.row(static_cast<std::size_t>(t));
    for (std::size_t k = 0; k < spec.offsets.size(); ++k) {
      const std::ptrdiff_t u = t + spec.offsets[k];
      if (u < 0 || u >= n) continue;
      if (!in_same_segment(segment_ids, static_cast<std::size_t>(t), static_cast<std::size_t>(u)))
        continue;
      const auto w = spec.kernel.row(k);
      if (x_grad != nullptr) {
        auto xg = x_grad->row(static_cast<std::size_t>(u));
        for (std::size_t c = 0; c < ch; ++c) xg[c] += w[c] * g[c];
      }
      if (kernel_grad != nullptr) {
        const auto src = x.row(static_cast<std::size_t>(u));
        auto kg = kernel_grad->row(k);
        for (std::size_t c = 0; c < ch; ++c) kg[c] += g[c] * src[c];
      }
    }
  }
}

}  // namespace iptt
