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

// Tape-based reverse-mode differentiation over RealMatrix values.
//
// Every taped op computes its forward value with the same eager kernel from
// numerics.hpp, so a taped forward pass is bitwise identical to the eager one.
// Ops live in iptt::ad and share names with the eager functions in iptt, which
// lets templated model code run unchanged on RealMatrix or Var.

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "iptt/numerics.hpp"

namespace iptt::ad {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  bool valid() const { return tape_ != nullptr; }
  const RealMatrix& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  /// Propagates out_grad of the recorded node into its inputs via accumulate().
  using Backward = std::function<void(Tape&, const RealMatrix& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// A leaf whose gradient is tracked.
  Var parameter(RealMatrix value);
  /// A leaf with no gradient.
  Var constant(RealMatrix value);
  /// Records an op. The backward rule is kept only if some input needs a gradient.
  Var record(RealMatrix value, std::initializer_list<Var> inputs, Backward backward);
  Var record(RealMatrix value, std::span<const Var> inputs, Backward backward);

  const RealMatrix& value(Var v) const { return nodes_[v.id()].value; }
  bool requires_grad(Var v) const { return nodes_[v.id()].requires_grad; }

  /// grad(v) += g. No-op when v does not require a gradient.
  void accumulate(Var v, const RealMatrix& g);
  /// Mutable gradient buffer for v, zero-initialized on first use. Lets ops
  /// scatter into part of a gradient without building a full-size temporary.
  RealMatrix& grad_buffer(Var v);

  /// Reverse sweep from a 1x1 loss. Clears previous gradients first, so
  /// repeated calls give identical results.
  void backward(Var loss);

  /// Gradient of the last backward() with respect to v (zeros if none reached it).
  RealMatrix grad(Var v) const;

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    RealMatrix value;
    RealMatrix grad;
    bool requires_grad = false;
    bool has_grad = false;
    Backward backward;
  };

  Var push(Node node);

  std::deque<Node> nodes_;
};

inline const RealMatrix& Var::value() const { return tape_->value(*this); }

// Elementary ops. Shapes follow the eager counterparts.
Var matmul(Var a, Var b);
Var matmul_nt(Var a, Var b);
Var matmul_tn(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var hadamard(Var a, Var b);
Var scale(Var a, double s);
Var sum(Var a);
Var silu(Var x);
Var rms_norm(Var x, Var gain, double eps);
Var slice_rows(Var x, std::size_t begin, std::size_t end);
Var concat_rows(std::span<const Var> parts);
/// Depthwise convolution with a differentiable kernel; offsets are fixed.
Var lookahead_conv1d(Var x, Var kernel, const std::vector<int>& offsets,
                     std::span<const std::int64_t> segment_ids = {});

/// Analytic vs central-difference gradients for one parameter.
struct ParamGradient {
  std::string name;
  RealMatrix analytic;
  RealMatrix numeric;
  double max_relative_error = 0.0;
};

/// Outcome of grad_check. Relative error per coordinate is
/// |a - n| / max(|a|, |n|, eps_abs).
struct GradientReport {
  std::vector<ParamGradient> params;
  double max_relative_error = 0.0;
  double tolerance = 0.0;
  double eps_abs = 0.0;
  bool passed = false;
};

struct NamedMatrix {
  std::string name;
  RealMatrix value;
};

/// Builds the scalar objective on a fresh tape from parameter leaves given in
/// the same order as the params passed to grad_check.
using ScalarObjective = std::function<Var(Tape&, std::span<const Var>)>;

inline constexpr double kGradCheckEpsAbs = 1e-8;

/// Compares backward() against (f(theta + h) - f(theta - h)) / 2h for every
/// coordinate of every parameter.
GradientReport grad_check(const ScalarObjective& f, const std::vector<NamedMatrix>& params,
                          double h, double tolerance, double eps_abs = kGradCheckEpsAbs);

}  // namespace iptt::ad
