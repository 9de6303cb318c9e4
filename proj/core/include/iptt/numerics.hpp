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

#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace iptt {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dense row-major matrix of doubles. Row vectors are 1 x n.
class RealMatrix {
 public:
  RealMatrix() = default;
  RealMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  RealMatrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static RealMatrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static RealMatrix identity(std::size_t n);
  static RealMatrix row_vector(std::span<const double> values);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  void fill(double v);

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// True iff shapes match and every entry has the same bit pattern.
bool bitwise_equal(const RealMatrix& a, const RealMatrix& b);
/// max |a - b|; shapes must match.
double max_abs_diff(const RealMatrix& a, const RealMatrix& b);
bool all_finite(const RealMatrix& a);

// Products. Every output element is accumulated left to right over the inner
// dimension starting from +0.0, whatever the worker count.
RealMatrix matmul(const RealMatrix& a, const RealMatrix& b);     // a * b
RealMatrix matmul_nt(const RealMatrix& a, const RealMatrix& b);  // a * b^T
RealMatrix matmul_tn(const RealMatrix& a, const RealMatrix& b);  // a^T * b
RealMatrix transpose(const RealMatrix& a);

RealMatrix add(const RealMatrix& a, const RealMatrix& b);
RealMatrix sub(const RealMatrix& a, const RealMatrix& b);
RealMatrix hadamard(const RealMatrix& a, const RealMatrix& b);
RealMatrix scale(const RealMatrix& a, double s);
void add_inplace(RealMatrix& acc, const RealMatrix& b);
double sum(const RealMatrix& a);

double sigmoid(double x);
double silu(double x);
/// d/dx silu(x)
double silu_derivative(double x);
RealMatrix silu(const RealMatrix& x);

RealMatrix softmax_rows(const RealMatrix& x);
double frob_norm(const RealMatrix& x);

/// y = x / sqrt(mean(x^2) + eps) * gain, row-wise. gain is 1 x cols.
RealMatrix rms_norm(const RealMatrix& x, const RealMatrix& gain, double eps);

RealMatrix slice_rows(const RealMatrix& x, std::size_t begin, std::size_t end);
RealMatrix concat_rows(std::span<const RealMatrix> parts);

/// Depthwise 1D convolution with explicit token offsets and no bias.
///
/// Output row t is sum_k kernel(k, :) * x(t + offsets[k], :). Referenced rows
/// outside [0, rows) are zero. The kernel is offsets.size() x channels.
struct ConvSpec {
  std::vector<int> offsets;
  RealMatrix kernel;

  std::size_t width() const { return offsets.size(); }
  /// Pure look-ahead window {0, ..., width-1} with a zero kernel.
  static ConvSpec lookahead(std::size_t width, std::size_t channels);
  void validate(std::size_t channels) const;
};

/// Applies the convolution independently to each segment. segment_ids holds
/// one nondecreasing id per row (empty means a single segment), and no tap
/// crosses a change of id.
RealMatrix lookahead_conv1d(const RealMatrix& x, const ConvSpec& spec,
                            std::span<const std::int64_t> segment_ids = {});

/// Same convolution with the kernel and offsets passed separately.
RealMatrix lookahead_conv1d(const RealMatrix& x, const RealMatrix& kernel,
                            const std::vector<int>& offsets,
                            std::span<const std::int64_t> segment_ids = {});

/// Gradient of lookahead_conv1d with respect to x and the kernel, added into
/// the given buffers. Empty buffers are first sized and zeroed.
void lookahead_conv1d_backward(const RealMatrix& x, const ConvSpec& spec,
                               std::span<const std::int64_t> segment_ids,
                               const RealMatrix& out_grad, RealMatrix* x_grad,
                               RealMatrix* kernel_grad);

/// Worker count used by row-parallel kernels. Defaults to IPTT_WORKERS or
/// the hardware concurrency. Results never depend on it.
int worker_count();
void set_worker_count(int workers);

std::string shape_string(const RealMatrix& m);

}  // namespace iptt
