// Copyright 2026 The mcount Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "mcc/autograd.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "mcc/error.hpp"

namespace mcc {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

thread_local bool g_grad_enabled = true;
thread_local std::uint64_t* g_kink_signature = nullptr;

Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  bool needs = false;
  if (g_grad_enabled)
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (needs) {
    node->requires_grad = true;
    for (auto& in : inputs) node->inputs.push_back(in.defined() ? in.node_ptr() : nullptr);
    node->backward_fn = std::move(backward_fn);
  }
  return Var(std::move(node));
}

bool wants_grad(const std::shared_ptr<Node>& n) { return n && n->requires_grad; }

void require_ndim(const Var& x, int nd, const char* op) {
  if (x.value().ndim() != nd)
    fail_validation(std::string(op) + ": expected " + std::to_string(nd) + "-d input, got " + shape_str(x.shape()));
}

}  // namespace

Tensor& Node::grad_buffer() {
  if (grad.empty() && !value.empty()) grad = Tensor(value.shape(), 0.0);
  return grad;
}

Var Var::constant(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

Var Var::parameter(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return Var(std::move(node));
}

KinkTrace::KinkTrace() : previous_(g_kink_signature) { g_kink_signature = &signature_; }
KinkTrace::~KinkTrace() { g_kink_signature = previous_; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

void backward(std::span<const std::pair<Var, Tensor>> seeds) {
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  // Iterative post-order DFS.
  std::vector<std::pair<Node*, std::size_t>> stack;
  for (const auto& [root, seed] : seeds) {
    if (!root.requires_grad()) continue;
    Node* r = const_cast<Node*>(root.node());
    if (seed.shape() != r->value.shape())
      fail_validation("backward seed shape " + shape_str(seed.shape()) + " != " + shape_str(r->value.shape()));
    if (visited.insert(r).second) stack.emplace_back(r, 0);
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->inputs.size()) {
        Node* child = n->inputs[next++].get();
        if (child && child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
  }
  for (const auto& [root, seed] : seeds) {
    if (!root.requires_grad()) continue;
    Tensor& g = const_cast<Node*>(root.node())->grad_buffer();
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += seed[i];
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
  // Interior gradients are not needed after the sweep; keep leaves only.
  for (Node* n : order)
    if (n->backward_fn) n->grad = Tensor();
}

void backward(const Var& root, const Tensor& seed) {
  std::pair<Var, Tensor> s{root, seed};
  backward(std::span<const std::pair<Var, Tensor>>(&s, 1));
}

double softplus_value(double x, double beta) {
  const double t = beta * x;
  if (t > 0) return x + std::log1p(std::exp(-t)) / beta;
  return std::log1p(std::exp(t)) / beta;
}

double softplus_grad(double x, double beta) {
  const double t = beta * x;
  if (t >= 0) return 1.0 / (1.0 + std::exp(-t));
  const double e = std::exp(t);
  return e / (1.0 + e);
}

namespace ops {

namespace {

struct ConvGeom {
  int n, cin, h, w, cout, kh, kw, ho, wo, groups, cin_g, cout_g;
  int stride, pad, dil;
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
  int k() const { return cin_g * kh * kw; }
  int p() const { return ho * wo; }
};

// col: (cin_g*kh*kw) x (ho*wo) for one sample and group.
void im2col(const double* x, const ConvGeom& g, double* col) {
  const int P = g.p();
  for (int c = 0; c < g.cin_g; ++c) {
    const double* xc = x + static_cast<std::size_t>(c) * g.h * g.w;
    for (int ki = 0; ki < g.kh; ++ki) {
      for (int kj = 0; kj < g.kw; ++kj) {
        double* row = col + static_cast<std::size_t>((c * g.kh + ki) * g.kw + kj) * P;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ki * g.dil;
          double* out = row + oy * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill(out, out + g.wo, 0.0);
            continue;
          }
          const double* xr = xc + static_cast<std::size_t>(iy) * g.w;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride - g.pad + kj * g.dil;
            out[ox] = (ix >= 0 && ix < g.w) ? xr[ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const double* col, const ConvGeom& g, double* dx) {
  const int P = g.p();
  for (int c = 0; c < g.cin_g; ++c) {
    double* dc = dx + static_cast<std::size_t>(c) * g.h * g.w;
    for (int ki = 0; ki < g.kh; ++ki) {
      for (int kj = 0; kj < g.kw; ++kj) {
        const double* row = col + static_cast<std::size_t>((c * g.kh + ki) * g.kw + kj) * P;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ki * g.dil;
          if (iy < 0 || iy >= g.h) continue;
          double* dr = dc + static_cast<std::size_t>(iy) * g.w;
          const double* in = row + oy * g.wo;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride - g.pad + kj * g.dil;
            if (ix >= 0 && ix < g.w) dr[ix] += in[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Var conv2d(const Var& x, const Var& weight, const Var& bias, const Conv2dOptions& opt) {
  require_ndim(x, 4, "conv2d");
  require_ndim(weight, 4, "conv2d weight");
  ConvGeom g{};
  g.n = x.value().dim(0);
  g.cin = x.value().dim(1);
  g.h = x.value().dim(2);
  g.w = x.value().dim(3);
  g.cout = weight.value().dim(0);
  g.kh = weight.value().dim(2);
  g.kw = weight.value().dim(3);
  g.groups = opt.groups;
  g.stride = opt.stride;
  g.pad = opt.padding;
  g.dil = opt.dilation;
  if (g.groups < 1 || g.cin % g.groups || g.cout % g.groups)
    fail_validation("conv2d: channels not divisible by groups");
  g.cin_g = g.cin / g.groups;
  g.cout_g = g.cout / g.groups;
  if (weight.value().dim(1) != g.cin_g)
    fail_validation("conv2d: weight " + shape_str(weight.shape()) + " incompatible with input " + shape_str(x.shape()));
  if (bias.defined() && bias.value().numel() != static_cast<std::size_t>(g.cout))
    fail_validation("conv2d: bias size mismatch");
  g.ho = (g.h + 2 * g.pad - g.dil * (g.kh - 1) - 1) / g.stride + 1;
  g.wo = (g.w + 2 * g.pad - g.dil * (g.kw - 1) - 1) / g.stride + 1;
  if (g.ho <= 0 || g.wo <= 0) fail_validation("conv2d: output would be empty for input " + shape_str(x.shape()));

  const int K = g.k(), P = g.p();
  Tensor out({g.n, g.cout, g.ho, g.wo});
  std::vector<double> col(g.pointwise() ? 0 : static_cast<std::size_t>(K) * P);
  const std::size_t x_stride = static_cast<std::size_t>(g.cin) * g.h * g.w;
  const std::size_t y_stride = static_cast<std::size_t>(g.cout) * P;
  for (int n = 0; n < g.n; ++n) {
    for (int gr = 0; gr < g.groups; ++gr) {
      const double* xg = x.value().data() + n * x_stride + static_cast<std::size_t>(gr) * g.cin_g * g.h * g.w;
      const double* colp = xg;
      if (!g.pointwise()) {
        im2col(xg, g, col.data());
        colp = col.data();
      }
      ConstMapMat wm(weight.value().data() + static_cast<std::size_t>(gr) * g.cout_g * K, g.cout_g, K);
      ConstMapMat cm(colp, K, P);
      MapMat ym(out.data() + n * y_stride + static_cast<std::size_t>(gr) * g.cout_g * P, g.cout_g, P);
      ym.noalias() = wm * cm;
    }
    if (bias.defined())
      for (int c = 0; c < g.cout; ++c) {
        double* yc = out.data() + n * y_stride + static_cast<std::size_t>(c) * P;
        const double b = bias.value()[c];
        for (int i = 0; i < P; ++i) yc[i] += b;
      }
  }

  return make_result(std::move(out), {x, weight, bias}, [g](Node& self) {
    const auto& xin = self.inputs[0];
    const auto& win = self.inputs[1];
    const auto& bin = self.inputs[2];
    const int K = g.k(), P = g.p();
    const std::size_t x_stride = static_cast<std::size_t>(g.cin) * g.h * g.w;
    const std::size_t y_stride = static_cast<std::size_t>(g.cout) * P;
    std::vector<double> col(g.pointwise() ? 0 : static_cast<std::size_t>(K) * P);
    std::vector<double> dcol(static_cast<std::size_t>(K) * P);
    for (int n = 0; n < g.n; ++n) {
      for (int gr = 0; gr < g.groups; ++gr) {
        ConstMapMat dy(self.grad.data() + n * y_stride + static_cast<std::size_t>(gr) * g.cout_g * P, g.cout_g, P);
        if (wants_grad(win)) {
          const double* xg = xin->value.data() + n * x_stride + static_cast<std::size_t>(gr) * g.cin_g * g.h * g.w;
          const double* colp = xg;
          if (!g.pointwise()) {
            im2col(xg, g, col.data());
            colp = col.data();
          }
          ConstMapMat cm(colp, K, P);
          MapMat dw(win->grad_buffer().data() + static_cast<std::size_t>(gr) * g.cout_g * K, g.cout_g, K);
          dw.noalias() += dy * cm.transpose();
        }
        if (wants_grad(xin)) {
          ConstMapMat wm(win->value.data() + static_cast<std::size_t>(gr) * g.cout_g * K, g.cout_g, K);
          double* dxg = xin->grad_buffer().data() + n * x_stride + static_cast<std::size_t>(gr) * g.cin_g * g.h * g.w;
          if (g.pointwise()) {
            MapMat dxm(dxg, K, P);
            dxm.noalias() += wm.transpose() * dy;
          } else {
            MapMat dc(dcol.data(), K, P);
            dc.noalias() = wm.transpose() * dy;
            col2im(dcol.data(), g, dxg);
          }
        }
      }
      if (wants_grad(bin)) {
        Tensor& db = bin->grad_buffer();
        for (int c = 0; c < g.cout; ++c) {
          const double* dyc = self.grad.data() + n * y_stride + static_cast<std::size_t>(c) * P;
          double s = 0.0;
          for (int i = 0; i < P; ++i) s += dyc[i];
          db[c] += s;
        }
      }
    }
  });
}

Var batch_norm(const Var& x, const Var& gamma, const Var& beta, Tensor& running_mean, Tensor& running_var,
               bool training, double momentum, double eps) {
  require_ndim(x, 4, "batch_norm");
  const int N = x.value().dim(0), C = x.value().dim(1), HW = x.value().dim(2) * x.value().dim(3);
  const std::size_t M = static_cast<std::size_t>(N) * HW;
  auto xhat = std::make_shared<Tensor>(x.shape());
  std::vector<double> invstd(C);
  Tensor out(x.shape());
  for (int c = 0; c < C; ++c) {
    double mean, var;
    if (training) {
      double s = 0.0;
      for (int n = 0; n < N; ++n) {
        const double* p = x.value().data() + (static_cast<std::size_t>(n) * C + c) * HW;
        for (int i = 0; i < HW; ++i) s += p[i];
      }
      mean = s / M;
      double ss = 0.0;
      for (int n = 0; n < N; ++n) {
        const double* p = x.value().data() + (static_cast<std::size_t>(n) * C + c) * HW;
        for (int i = 0; i < HW; ++i) ss += (p[i] - mean) * (p[i] - mean);
      }
      var = ss / M;
      running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * mean;
      const double unbiased = M > 1 ? var * M / (M - 1) : var;
      running_var[c] = (1.0 - momentum) * running_var[c] + momentum * unbiased;
    } else {
      mean = running_mean[c];
      var = running_var[c];
    }
    invstd[c] = 1.0 / std::sqrt(var + eps);
    const double gm = gamma.value()[c], bt = beta.value()[c];
    for (int n = 0; n < N; ++n) {
      const std::size_t off = (static_cast<std::size_t>(n) * C + c) * HW;
      for (int i = 0; i < HW; ++i) {
        const double xh = (x.value()[off + i] - mean) * invstd[c];
        (*xhat)[off + i] = xh;
        out[off + i] = gm * xh + bt;
      }
    }
  }
  return make_result(std::move(out), {x, gamma, beta}, [=](Node& self) {
    const auto& xin = self.inputs[0];
    const auto& gin = self.inputs[1];
    const auto& bin = self.inputs[2];
    for (int c = 0; c < C; ++c) {
      double sdy = 0.0, sdyx = 0.0;
      for (int n = 0; n < N; ++n) {
        const std::size_t off = (static_cast<std::size_t>(n) * C + c) * HW;
        for (int i = 0; i < HW; ++i) {
          sdy += self.grad[off + i];
          sdyx += self.grad[off + i] * (*xhat)[off + i];
        }
      }
      if (wants_grad(gin)) gin->grad_buffer()[c] += sdyx;
      if (wants_grad(bin)) bin->grad_buffer()[c] += sdy;
      if (wants_grad(xin)) {
        Tensor& dx = xin->grad_buffer();
        const double gm = gin->value[c];
        for (int n = 0; n < N; ++n) {
          const std::size_t off = (static_cast<std::size_t>(n) * C + c) * HW;
          for (int i = 0; i < HW; ++i) {
            if (training)
              dx[off + i] += gm * invstd[c] / M * (M * self.grad[off + i] - sdy - (*xhat)[off + i] * sdyx);
            else
              dx[off + i] += gm * invstd[c] * self.grad[off + i];
          }
        }
      }
    }
  });
}

Var layer_norm_channels(const Var& x, const Var& gamma, const Var& beta, double eps) {
  require_ndim(x, 4, "layer_norm_channels");
  const int N = x.value().dim(0), C = x.value().dim(1), HW = x.value().dim(2) * x.value().dim(3);
  auto xhat = std::make_shared<Tensor>(x.shape());
  auto invstd = std::make_shared<std::vector<double>>(static_cast<std::size_t>(N) * HW);
  Tensor out(x.shape());
  const double* xv = x.value().data();
  for (int n = 0; n < N; ++n) {
    for (int i = 0; i < HW; ++i) {
      const std::size_t base = static_cast<std::size_t>(n) * C * HW + i;
      double mean = 0.0;
      for (int c = 0; c < C; ++c) mean += xv[base + static_cast<std::size_t>(c) * HW];
      mean /= C;
      double var = 0.0;
      for (int c = 0; c < C; ++c) {
        const double d = xv[base + static_cast<std::size_t>(c) * HW] - mean;
        var += d * d;
      }
      var /= C;
      const double is = 1.0 / std::sqrt(var + eps);
      (*invstd)[static_cast<std::size_t>(n) * HW + i] = is;
      for (int c = 0; c < C; ++c) {
        const std::size_t idx = base + static_cast<std::size_t>(c) * HW;
        const double xh = (xv[idx] - mean) * is;
        (*xhat)[idx] = xh;
        out[idx] = gamma.value()[c] * xh + beta.value()[c];
      }
    }
  }
  return make_result(std::move(out), {x, gamma, beta}, [=](Node& self) {
    const auto& xin = self.inputs[0];
    const auto& gin = self.inputs[1];
    const auto& bin = self.inputs[2];
    for (int n = 0; n < N; ++n) {
      for (int i = 0; i < HW; ++i) {
        const std::size_t base = static_cast<std::size_t>(n) * C * HW + i;
        double s1 = 0.0, s2 = 0.0;
        for (int c = 0; c < C; ++c) {
          const std::size_t idx = base + static_cast<std::size_t>(c) * HW;
          const double dxh = self.grad[idx] * gin->value[c];
          s1 += dxh;
          s2 += dxh * (*xhat)[idx];
          if (wants_grad(gin)) gin->grad_buffer()[c] += self.grad[idx] * (*xhat)[idx];
          if (wants_grad(bin)) bin->grad_buffer()[c] += self.grad[idx];
        }
        if (!wants_grad(xin)) continue;
        Tensor& dx = xin->grad_buffer();
        const double is = (*invstd)[static_cast<std::size_t>(n) * HW + i];
        for (int c = 0; c < C; ++c) {
          const std::size_t idx = base + static_cast<std::size_t>(c) * HW;
          const double dxh = self.grad[idx] * gin->value[c];
          dx[idx] += is / C * (C * dxh - s1 - (*xhat)[idx] * s2);
        }
      }
    }
  });
}

namespace {

template <class F, class DF>
Var elementwise(const Var& x, F f, DF df) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = f(x.value()[i]);
  return make_result(std::move(out), {x}, [df](Node& self) {
    const auto& xin = self.inputs[0];
    Tensor& dx = xin->grad_buffer();
    for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] += self.grad[i] * df(xin->value[i]);
  });
}

}  // namespace

Var relu(const Var& x) {
  if (g_kink_signature) {
    std::uint64_t h = *g_kink_signature;
    for (std::size_t i = 0; i < x.value().numel(); ++i) h = (h ^ (x.value()[i] > 0 ? 0x9e37u : 0x7f4au)) * 1099511628211ull;
    *g_kink_signature = h;
  }
  return elementwise(
      x, [](double v) { return v < 0 ? 0.0 : v; }, [](double v) { return v > 0 ? 1.0 : 0.0; });
}

Var gelu(const Var& x) {
  return elementwise(
      x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * M_SQRT1_2)); },
      [](double v) {
        const double cdf = 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
        const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * M_PI);
        return cdf + v * pdf;
      });
}

Var softplus(const Var& x, double beta) {
  if (!(beta > 0)) fail_validation("softplus: beta must be > 0");
  return elementwise(
      x, [beta](double v) { return softplus_value(v, beta); }, [beta](double v) { return softplus_grad(v, beta); });
}

Var add(const Var& a, const Var& b) {
  if (a.shape() != b.shape()) fail_validation("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] + b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    for (const auto& in : self.inputs) {
      if (!wants_grad(in)) continue;
      Tensor& d = in->grad_buffer();
      for (std::size_t i = 0; i < d.numel(); ++i) d[i] += self.grad[i];
    }
  });
}

Var scale(const Var& x, double factor) {
  return elementwise(
      x, [factor](double v) { return v * factor; }, [factor](double) { return factor; });
}

namespace {

struct Interp {
  std::vector<int> lo, hi;
  std::vector<double> frac;
};

Interp interp_axis(int in, int out) {
  Interp t;
  t.lo.resize(out);
  t.hi.resize(out);
  t.frac.resize(out);
  const double ratio = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    int i0 = static_cast<int>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    t.lo[o] = i0;
    t.hi[o] = std::min(i0 + 1, in - 1);
    t.frac[o] = src - i0;
  }
  return t;
}

}  // namespace

Var resize_bilinear(const Var& x, int out_h, int out_w) {
  require_ndim(x, 4, "resize_bilinear");
  const int N = x.value().dim(0), C = x.value().dim(1), H = x.value().dim(2), W = x.value().dim(3);
  if (H == out_h && W == out_w) return x;
  auto ty = std::make_shared<Interp>(interp_axis(H, out_h));
  auto tx = std::make_shared<Interp>(interp_axis(W, out_w));
  Tensor out({N, C, out_h, out_w});
  for (int p = 0; p < N * C; ++p) {
    const double* src = x.value().data() + static_cast<std::size_t>(p) * H * W;
    double* dst = out.data() + static_cast<std::size_t>(p) * out_h * out_w;
    for (int oy = 0; oy < out_h; ++oy) {
      const double fy = ty->frac[oy];
      const double* r0 = src + static_cast<std::size_t>(ty->lo[oy]) * W;
      const double* r1 = src + static_cast<std::size_t>(ty->hi[oy]) * W;
      for (int ox = 0; ox < out_w; ++ox) {
        const double fx = tx->frac[ox];
        const int x0 = tx->lo[ox], x1 = tx->hi[ox];
        dst[oy * out_w + ox] = (1 - fy) * ((1 - fx) * r0[x0] + fx * r0[x1]) + fy * ((1 - fx) * r1[x0] + fx * r1[x1]);
      }
    }
  }
  return make_result(std::move(out), {x}, [=](Node& self) {
    Tensor& dx = self.inputs[0]->grad_buffer();
    for (int p = 0; p < N * C; ++p) {
      double* dsrc = dx.data() + static_cast<std::size_t>(p) * H * W;
      const double* g = self.grad.data() + static_cast<std::size_t>(p) * out_h * out_w;
      for (int oy = 0; oy < out_h; ++oy) {
        const double fy = ty->frac[oy];
        double* r0 = dsrc + static_cast<std::size_t>(ty->lo[oy]) * W;
        double* r1 = dsrc + static_cast<std::size_t>(ty->hi[oy]) * W;
        for (int ox = 0; ox < out_w; ++ox) {
          const double fx = tx->frac[ox];
          const int x0 = tx->lo[ox], x1 = tx->hi[ox];
          const double v = g[oy * out_w + ox];
          r0[x0] += (1 - fy) * (1 - fx) * v;
          r0[x1] += (1 - fy) * fx * v;
          r1[x0] += fy * (1 - fx) * v;
          r1[x1] += fy * fx * v;
        }
      }
    }
  });
}

Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return make_result(std::move(out), {x}, [](Node& self) {
    Tensor& dx = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] += self.grad[i];
  });
}

Var gather(const Var& x, std::shared_ptr<const std::vector<std::size_t>> index, Shape out_shape) {
  if (shape_numel(out_shape) != index->size()) fail_validation("gather: index size does not match output shape");
  Tensor out(std::move(out_shape));
  for (std::size_t i = 0; i < index->size(); ++i) out[i] = x.value()[(*index)[i]];
  return make_result(std::move(out), {x}, [index](Node& self) {
    Tensor& dx = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < index->size(); ++i) dx[(*index)[i]] += self.grad[i];
  });
}

Var attention(const Var& q, const Var& k, const Var& v, int heads) {
  require_ndim(q, 3, "attention");
  const int N = q.value().dim(0), C = q.value().dim(1), Lq = q.value().dim(2), Lk = k.value().dim(2);
  if (k.shape() != v.shape() || k.value().dim(0) != N || k.value().dim(1) != C)
    fail_validation("attention: incompatible q/k/v shapes");
  if (heads < 1 || C % heads) fail_validation("attention: channels not divisible by heads");
  const int dh = C / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  auto probs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(N) * heads * Lq * Lk);
  Tensor out({N, C, Lq});
  for (int n = 0; n < N; ++n) {
    for (int h = 0; h < heads; ++h) {
      const std::size_t qo = (static_cast<std::size_t>(n) * C + h * dh) * Lq;
      const std::size_t ko = (static_cast<std::size_t>(n) * C + h * dh) * Lk;
      ConstMapMat Q(q.value().data() + qo, dh, Lq);
      ConstMapMat K(k.value().data() + ko, dh, Lk);
      ConstMapMat V(v.value().data() + ko, dh, Lk);
      MapMat P(probs->data() + (static_cast<std::size_t>(n) * heads + h) * Lq * Lk, Lq, Lk);
      P.noalias() = sc * (Q.transpose() * K);
      for (int r = 0; r < Lq; ++r) {
        const double m = P.row(r).maxCoeff();
        P.row(r) = (P.row(r).array() - m).exp();
        P.row(r) /= P.row(r).sum();
      }
      MapMat O(out.data() + qo, dh, Lq);
      O.noalias() = V * P.transpose();
    }
  }
  return make_result(std::move(out), {q, k, v}, [=](Node& self) {
    const auto& qn = self.inputs[0];
    const auto& kn = self.inputs[1];
    const auto& vn = self.inputs[2];
    RowMat dP(Lq, Lk), dS(Lq, Lk);
    for (int n = 0; n < N; ++n) {
      for (int h = 0; h < heads; ++h) {
        const std::size_t qo = (static_cast<std::size_t>(n) * C + h * dh) * Lq;
        const std::size_t ko = (static_cast<std::size_t>(n) * C + h * dh) * Lk;
        ConstMapMat Q(qn->value.data() + qo, dh, Lq);
        ConstMapMat K(kn->value.data() + ko, dh, Lk);
        ConstMapMat V(vn->value.data() + ko, dh, Lk);
        ConstMapMat P(probs->data() + (static_cast<std::size_t>(n) * heads + h) * Lq * Lk, Lq, Lk);
        ConstMapMat dO(self.grad.data() + qo, dh, Lq);
        if (wants_grad(vn)) {
          MapMat dV(vn->grad_buffer().data() + ko, dh, Lk);
          dV.noalias() += dO * P;
        }
        dP.noalias() = dO.transpose() * V;
        for (int r = 0; r < Lq; ++r) {
          const double dot = dP.row(r).dot(P.row(r));
          dS.row(r) = P.row(r).array() * (dP.row(r).array() - dot);
        }
        if (wants_grad(qn)) {
          MapMat dQ(qn->grad_buffer().data() + qo, dh, Lq);
          dQ.noalias() += sc * (K * dS.transpose());
        }
        if (wants_grad(kn)) {
          MapMat dK(kn->grad_buffer().data() + ko, dh, Lk);
          dK.noalias() += sc * (Q * dS);
        }
      }
    }
  });
}

}  // namespace ops
}  // namespace mcc
