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

#include "iptt/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <utility>

namespace iptt::ad {

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(RealMatrix value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  return push(std::move(n));
}

Var Tape::constant(RealMatrix value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::record(RealMatrix value, std::initializer_list<Var> inputs, Backward backward) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                std::move(backward));
}

Var Tape::record(RealMatrix value, std::span<const Var> inputs, Backward backward) {
  Node n;
  n.value = std::move(value);
  for (const Var& in : inputs) {
    if (in.tape_ != this) throw Error("Tape::record: input belongs to another tape");
    n.requires_grad = n.requires_grad || nodes_[in.id()].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

void Tape::accumulate(Var v, const RealMatrix& g) {
  Node& n = nodes_[v.id()];
  if (!n.requires_grad) return;
  if (g.rows() != n.value.rows() || g.cols() != n.value.cols()) {
    throw Error("Tape::accumulate: gradient " + shape_string(g) + " for value " +
                shape_string(n.value));
  }
  if (!n.has_grad) {
    n.grad = g;
    n.has_grad = true;
  } else {
    add_inplace(n.grad, g);
  }
}

RealMatrix& Tape::grad_buffer(Var v) {
  Node& n = nodes_[v.id()];
  if (!n.has_grad) {
    n.grad = RealMatrix(n.value.rows(), n.value.cols());
    n.has_grad = true;
  }
  return n.grad;
}

void Tape::backward(Var loss) {
  if (loss.tape_ != this) throw Error("Tape::backward: loss belongs to another tape");
  const Node& root = nodes_[loss.id()];
  if (root.value.rows() != 1 || root.value.cols() != 1) {
    throw Error("Tape::backward: loss must be 1x1, got " + shape_string(root.value));
  }
  for (Node& n : nodes_) {
    n.grad = RealMatrix();
    n.has_grad = false;
  }
  if (!root.requires_grad) return;
  nodes_[loss.id()].grad = RealMatrix(1, 1, 1.0);
  nodes_[loss.id()].has_grad = true;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.has_grad || !n.backward) continue;
    n.backward(*this, n.grad);
  }
}

RealMatrix Tape::grad(Var v) const {
  const Node& n = nodes_[v.id()];
  if (n.has_grad) return n.grad;
  return RealMatrix(n.value.rows(), n.value.cols());
}

Var matmul(Var a, Var b) {
  Tape& t = a.tape();
  return t.record(iptt::matmul(a.value(), b.value()), {a, b},
                  [a, b](Tape& tp, const RealMatrix& g) {
                    if (tp.requires_grad(a)) tp.accumulate(a, iptt::matmul_nt(g, b.value()));
                    if (tp.requires_grad(b)) tp.accumulate(b, iptt::matmul_tn(a.value(), g));
                  });
}

Var matmul_nt(Var a, Var b) {
  Tape& t = a.tape();
  return t.record(iptt::matmul_nt(a.value(), b.value()), {a, b},
                  [a, b](Tape& tp, const RealMatrix& g) {
                    if (tp.requires_grad(a)) tp.accumulate(a, iptt::matmul(g, b.value()));
                    if (tp.requires_grad(b)) tp.accumulate(b, iptt::matmul_tn(g, a.value()));
                  });
}

Var matmul_tn(Var a, Var b) {
  Tape& t = a.tape();
  return t.record(iptt::matmul_tn(a.value(), b.value()), {a, b},
                  [a, b](Tape& tp, const RealMatrix& g) {
                    if (tp.requires_grad(a)) tp.accumulate(a, iptt::matmul_nt(b.value(), g));
                    if (tp.requires_grad(b)) tp.accumulate(b, iptt::matmul(a.value(), g));
                  });
}

Var add(Var a, Var b) {
  return a.tape().record(iptt::add(a.value(), b.value()), {a, b},
                         [a, b](Tape& tp, const RealMatrix& g) {
                           tp.accumulate(a, g);
                           tp.accumulate(b, g);
                         });
}

Var sub(Var a, Var b) {
  return a.tape().record(iptt::sub(a.value(), b.value()), {a, b},
                         [a, b](Tape& tp, const RealMatrix& g) {
                           tp.accumulate(a, g);
                           if (tp.requires_grad(b)) tp.accumulate(b, iptt::scale(g, -1.0));
                         });
}

Var hadamard(Var a, Var b) {
  return a.tape().record(iptt::hadamard(a.value(), b.value()), {a, b},
                         [a, b](Tape& tp, const RealMatrix& g) {
                           if (tp.requires_grad(a)) tp.accumulate(a, iptt::hadamard(g, b.value()));
                           if (tp.requires_grad(b)) tp.accumulate(b, iptt::hadamard(g, a.value()));
                         });
}

Var scale(Var a, double s) {
  return a.tape().record(iptt::scale(a.value(), s), {a}, [a, s](Tape& tp, const RealMatrix& g) {
    tp.accumulate(a, iptt::scale(g, s));
  });
}

Var sum(Var a) {
  return a.tape().record(RealMatrix(1, 1, iptt::sum(a.value())), {a},
                         [a](Tape& tp, const RealMatrix& g) {
                           tp.accumulate(a, RealMatrix(a.rows(), a.cols(), g(0, 0)));
                         });
}

Var silu(Var x) {
  return x.tape().record(iptt::silu(x.value()), {x}, [x](Tape& tp, const RealMatrix& g) {
    const RealMatrix& xv = x.value();
    RealMatrix dx(xv.rows(), xv.cols());
    for (std::size_t i = 0; i < xv.size(); ++i) {
      dx.data()[i] = g.data()[i] * iptt::silu_derivative(xv.data()[i]);
    }
    tp.accumulate(x, dx);
  });
}

Var rms_norm(Var x, Var gain, double eps) {
  return x.tape().record(
      iptt::rms_norm(x.value(), gain.value(), eps), {x, gain},
      [x, gain, eps](Tape& tp, const RealMatrix& g) {
        const RealMatrix& xv = x.value();
        const RealMatrix& gv = gain.value();
        const std::size_t n = xv.cols();
        const double inv_n = 1.0 / static_cast<double>(n);
        RealMatrix dx(xv.rows(), n);
        RealMatrix dgain(1, n);
        for (std::size_t r = 0; r < xv.rows(); ++r) {
          const auto xr = xv.row(r);
          const auto gr = g.row(r);
          double ms = 0.0;
          for (double v : xr) ms += v * v;
          const double inv = 1.0 / std::sqrt(ms * inv_n + eps);
          // y_j = x_j * inv * w_j; dy/dx_k = w_k inv delta_jk - x_j w_j inv^3 x_k / n
          double dot = 0.0;
          for (std::size_t j = 0; j < n; ++j) dot += gr[j] * gv.data()[j] * xr[j];
          auto dxr = dx.row(r);
          const double coef = dot * inv * inv * inv * inv_n;
          for (std::size_t j = 0; j < n; ++j) {
            dxr[j] = gr[j] * gv.data()[j] * inv - xr[j] * coef;
            dgain.data()[j] += gr[j] * xr[j] * inv;
          }
        }
        if (tp.requires_grad(x)) tp.accumulate(x, dx);
        if (tp.requires_grad(gain)) tp.accumulate(gain, dgain);
      });
}

Var slice_rows(Var x, std::size_t begin, std::size_t end) {
  return x.tape().record(iptt::slice_rows(x.value(), begin, end), {x},
                         [x, begin](Tape& tp, const RealMatrix& g) {
                           RealMatrix& buf = tp.grad_buffer(x);
                           double* dst = buf.data() + begin * buf.cols();
                           for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g.data()[i];
                         });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw Error("ad::concat_rows: no parts");
  std::vector<RealMatrix> values;
  values.reserve(parts.size());
  for (const Var& p : parts) values.push_back(p.value());
  std::vector<Var> inputs(parts.begin(), parts.end());
  return parts.front().tape().record(
      iptt::concat_rows(values), parts, [inputs](Tape& tp, const RealMatrix& g) {
        std::size_t row = 0;
        for (const Var& p : inputs) {
          const std::size_t r = p.rows();
          if (tp.requires_grad(p)) tp.accumulate(p, iptt::slice_rows(g, row, row + r));
          row += r;
        }
      });
}

Var lookahead_conv1d(Var x, Var kernel, const std::vector<int>& offsets,
                     std::span<const std::int64_t> segment_ids) {
  ConvSpec spec{offsets, kernel.value()};
  std::vector<std::int64_t> ids(segment_ids.begin(), segment_ids.end());
  RealMatrix out = iptt::lookahead_conv1d(x.value(), spec, ids);
  return x.tape().record(
      std::move(out), {x, kernel},
      [x, kernel, spec = std::move(spec), ids = std::move(ids)](Tape& tp, const RealMatrix& g) {
        RealMatrix* xg = tp.requires_grad(x) ? &tp.grad_buffer(x) : nullptr;
        RealMatrix* kg = tp.requires_grad(kernel) ? &tp.grad_buffer(kernel) : nullptr;
        iptt::lookahead_conv1d_backward(x.value(), spec, ids, g, xg, kg);
      });
}

GradientReport grad_check(const ScalarObjective& f, const std::vector<NamedMatrix>& params,
                          double h, double tolerance, double eps_abs) {
  if (!(h > 0.0)) throw Error("grad_check: step must be positive");
  GradientReport report;
  report.tolerance = tolerance;
  report.eps_abs = eps_abs;

  std::vector<RealMatrix> analytic;
  {
    Tape tape;
    std::vector<Var> leaves;
    for (const auto& p : params) leaves.push_back(tape.parameter(p.value));
    Var loss = f(tape, leaves);
    tape.backward(loss);
    for (const Var& v : leaves) analytic.push_back(tape.grad(v));
  }

  auto evaluate = [&](const std::vector<RealMatrix>& values) {
    Tape tape;
    std::vector<Var> leaves;
    for (const auto& v : values) leaves.push_back(tape.constant(v));
    const Var out = f(tape, leaves);
    if (out.rows() != 1 || out.cols() != 1) throw Error("grad_check: objective is not scalar");
    return out.value()(0, 0);
  };

  std::vector<RealMatrix> work;
  for (const auto& p : params) work.push_back(p.value);

  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    ParamGradient pg;
    pg.name = params[pi].name;
    pg.analytic = analytic[pi];
    pg.numeric = RealMatrix(params[pi].value.rows(), params[pi].value.cols());
    for (std::size_t i = 0; i < work[pi].size(); ++i) {
      const double orig = work[pi].data()[i];
      work[pi].data()[i] = orig + h;
      const double fp = evaluate(work);
      work[pi].data()[i] = orig - h;
      const double fm = evaluate(work);
      work[pi].data()[i] = orig;
      const double num = (fp - fm) / (2.0 * h);
      pg.numeric.data()[i] = num;
      const double a = pg.analytic.data()[i];
      const double denom = std::max({std::abs(a), std::abs(num), eps_abs});
      pg.max_relative_error = std::max(pg.max_relative_error, std::abs(a - num) / denom);
    }
    report.max_relative_error = std::max(report.max_relative_error, pg.max_relative_error);
    report.params.push_back(std::move(pg));
  }
  report.passed = report.max_relative_error < tolerance;
  return report;
}

}  // namespace iptt::ad
