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


#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <random>

#include "doctest.h"
#include "mcc/autograd.hpp"
#include "mcc/error.hpp"
#include "mcc/train_eval.hpp"
#include "oracles.hpp"

using namespace mcc;

namespace {

// max relative error of d<f(inputs), R>/d(inputs) against central differences.
double op_gradcheck(std::vector<Var> inputs, const std::function<Var(const std::vector<Var>&)>& f,
                    std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  const Tensor R = oracle::random_tensor(f(inputs).shape(), rng, -1, 1);
  GradcheckProblem p;
  for (std::size_t i = 0; i < inputs.size(); ++i) p.params.emplace_back("in" + std::to_string(i), &inputs[i].mutable_value());
  p.value = [&] {
    NoGradGuard ng;
    const Tensor y = f(inputs).value();
    double s = 0;
    for (std::size_t i = 0; i < y.numel(); ++i) s += y[i] * R[i];
    return s;
  };
  p.analytic = [&] {
    for (auto& v : inputs) v.zero_grad();
    backward(f(inputs), R);
    std::vector<Tensor> g;
    for (auto& v : inputs) g.push_back(v.grad());
    return g;
  };
  return gradcheck_problem(p).max_rel_err;
}

Var param(const Shape& s, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  return Var::parameter(oracle::random_tensor(s, rng, lo, hi));
}

double naive_conv(const Tensor& x, const Tensor& w, const Tensor* b, const ops::Conv2dOptions& o, int n, int co, int oy,
                  int ox) {
  const int cin_g = w.dim(1), cout_g = w.dim(0) / o.groups, g = co / cout_g;
  double s = b ? (*b)[co] : 0.0;
  for (int ci = 0; ci < cin_g; ++ci)
    for (int ky = 0; ky < w.dim(2); ++ky)
      for (int kx = 0; kx < w.dim(3); ++kx) {
        const int iy = oy * o.stride - o.padding + ky * o.dilation, ix = ox * o.stride - o.padding + kx * o.dilation;
        if (iy < 0 || ix < 0 || iy >= x.dim(2) || ix >= x.dim(3)) continue;
        s += x.at(n, g * cin_g + ci, iy, ix) * w.at(co, ci, ky, kx);
      }
  return s;
}

}  // namespace

TEST_SUITE("autograd") {

TEST_CASE("tensor basics") {
  Tensor t({2, 3}, 1.5);
  CHECK(t.numel() == 6);
  CHECK(t.sum() == 9.0);
  CHECK(t.reshaped({3, 2}).shape() == Shape{3, 2});
  CHECK_THROWS(t.reshaped({4, 2}));
  CHECK(shape_str({2, 3}) == "(2,3)");
  Tensor u({1, 2, 2, 2});
  u.at(0, 1, 1, 0) = 7;
  CHECK(u[6] == 7);
}

TEST_CASE("conv2d matches a direct loop") {
  std::mt19937_64 rng(1);
  for (const ops::Conv2dOptions o : {ops::Conv2dOptions{1, 1, 1, 1}, ops::Conv2dOptions{2, 1, 1, 1},
                                     ops::Conv2dOptions{1, 3, 3, 1}, ops::Conv2dOptions{1, 1, 1, 2},
                                     ops::Conv2dOptions{2, 0, 1, 4}}) {
    const int groups = o.groups;
    const Tensor x = oracle::random_tensor({2, 4, 9, 7}, rng, -1, 1);
    const Tensor w = oracle::random_tensor({8, 4 / groups, 3, 3}, rng, -1, 1);
    const Tensor b = oracle::random_tensor({8}, rng, -1, 1);
    const Tensor y = ops::conv2d(Var::constant(x), Var::constant(w), Var::constant(b), o).value();
    double worst = 0;
    for (int n = 0; n < 2; ++n)
      for (int co = 0; co < 8; ++co)
        for (int oy = 0; oy < y.dim(2); ++oy)
          for (int ox = 0; ox < y.dim(3); ++ox)
            worst = std::max(worst, std::abs(y.at(n, co, oy, ox) - naive_conv(x, w, &b, o, n, co, oy, ox)));
    CHECK(worst < 1e-12);
  }
}

TEST_CASE("attention matches a direct softmax") {
  std::mt19937_64 rng(2);
  const Tensor q = oracle::random_tensor({1, 4, 3}, rng, -1, 1), k = oracle::random_tensor({1, 4, 5}, rng, -1, 1),
               v = oracle::random_tensor({1, 4, 5}, rng, -1, 1);
  const Tensor y = ops::attention(Var::constant(q), Var::constant(k), Var::constant(v), 2).value();
  for (int h = 0; h < 2; ++h)
    for (int i = 0; i < 3; ++i) {
      std::vector<double> a(5);
      for (int j = 0; j < 5; ++j) {
        a[j] = 0;
        for (int d = 0; d < 2; ++d) a[j] += q[(h * 2 + d) * 3 + i] * k[(h * 2 + d) * 5 + j];
        a[j] = std::exp(a[j] / std::sqrt(2.0));
      }
      const double z = std::accumulate(a.begin(), a.end(), 0.0);
      for (int d = 0; d < 2; ++d) {
        double expect = 0;
        for (int j = 0; j < 5; ++j) expect += a[j] / z * v[(h * 2 + d) * 5 + j];
        CHECK(y[(h * 2 + d) * 3 + i] == doctest::Approx(expect).epsilon(1e-12));
      }
    }
}

TEST_CASE("bilinear resize preserves constants and interpolates linearly") {
  Tensor c({1, 1, 4, 4}, 2.5);
  const Tensor up_c = ops::resize_bilinear(Var::constant(c), 16, 12).value();
  for (double v : up_c.values()) CHECK(v == doctest::Approx(2.5));
  Tensor ramp({1, 1, 1, 2}, {0.0, 1.0});
  const Tensor up = ops::resize_bilinear(Var::constant(ramp), 1, 4).value();
  CHECK(up.values()[0] == 0.0);
  CHECK(up.values()[1] == doctest::Approx(0.25));
  CHECK(up.values()[2] == doctest::Approx(0.75));
  CHECK(up.values()[3] == 1.0);
}

TEST_CASE("softplus values and stability") {
  CHECK(softplus_value(0.0, 1.0) == doctest::Approx(0.6931471805599453).epsilon(1e-15));
  CHECK(softplus_value(40.0, 1.0) == doctest::Approx(40.0).epsilon(1e-15));
  CHECK(std::isfinite(softplus_value(1000.0, 1.0)));
  CHECK(softplus_value(1000.0, 1.0) == 1000.0);
  CHECK(softplus_value(-50.0, 1.0) > 0.0);
  CHECK(softplus_value(2.0, 3.0) == doctest::Approx(std::log1p(std::exp(6.0)) / 3.0));
  CHECK(softplus_grad(0.0, 2.0) == doctest::Approx(0.5));
  CHECK_THROWS_AS(ops::softplus(Var::constant(Tensor({1}, 0.0)), 0.0), ValidationError);
  std::mt19937_64 rng(3);
  const Tensor y = ops::softplus(Var::constant(oracle::random_tensor({200}, rng, -30, 30))).value();
  for (double v : y.values()) CHECK(v > 0);
}

TEST_CASE("gradients of every op match central differences") {
  std::mt19937_64 rng(4);
  using V = std::vector<Var>;
  SUBCASE("conv2d") {
    for (const ops::Conv2dOptions o : {ops::Conv2dOptions{1, 1, 1, 1}, ops::Conv2dOptions{2, 2, 2, 1},
                                       ops::Conv2dOptions{1, 4, 4, 2}})
      CHECK(op_gradcheck({param({2, 4, 8, 8}, rng), param({6, 4 / o.groups, 3, 3}, rng), param({6}, rng)},
                         [o](const V& v) { return ops::conv2d(v[0], v[1], v[2], o); }) < 1e-6);
  }
  SUBCASE("batch norm, training statistics") {
    Tensor rm({3}, 0.0), rv({3}, 1.0);
    CHECK(op_gradcheck({param({2, 3, 4, 4}, rng), param({3}, rng), param({3}, rng)}, [&](const V& v) {
            return ops::batch_norm(v[0], v[1], v[2], rm, rv, true);
          }) < 1e-6);
  }
  SUBCASE("layer norm over channels") {
    CHECK(op_gradcheck({param({2, 5, 3, 3}, rng), param({5}, rng), param({5}, rng)},
                       [](const V& v) { return ops::layer_norm_channels(v[0], v[1], v[2]); }) < 1e-6);
  }
  SUBCASE("elementwise") {
    Tensor away({50});
    std::uniform_real_distribution<double> u(0.1, 2.0);
    for (std::size_t i = 0; i < 50; ++i) away[i] = (i % 2 ? 1 : -1) * u(rng);
    CHECK(op_gradcheck({Var::parameter(away)}, [](const V& v) { return ops::relu(v[0]); }) < 1e-6);
    CHECK(op_gradcheck({param({50}, rng, -3, 3)}, [](const V& v) { return ops::gelu(v[0]); }) < 1e-6);
    CHECK(op_gradcheck({param({50}, rng, -3, 3)}, [](const V& v) { return ops::softplus(v[0], 2.0); }) < 1e-6);
    CHECK(op_gradcheck({param({4, 5}, rng), param({4, 5}, rng)},
                       [](const V& v) { return ops::scale(ops::add(v[0], v[1]), -1.5); }) < 1e-6);
  }
  SUBCASE("resize, reshape and gather") {
    CHECK(op_gradcheck({param({1, 2, 3, 5}, rng)}, [](const V& v) { return ops::resize_bilinear(v[0], 7, 4); }) < 1e-6);
    CHECK(op_gradcheck({param({2, 6}, rng)}, [](const V& v) { return ops::reshape(v[0], {3, 4}); }) < 1e-6);
    auto idx = std::make_shared<const std::vector<std::size_t>>(std::vector<std::size_t>{0, 3, 3, 5, 1, 0});
    CHECK(op_gradcheck({param({6}, rng)}, [idx](const V& v) { return ops::gather(v[0], idx, {2, 3}); }) < 1e-6);
  }
  SUBCASE("attention") {
    CHECK(op_gradcheck({param({2, 4, 6}, rng), param({2, 4, 3}, rng), param({2, 4, 3}, rng)},
                       [](const V& v) { return ops::attention(v[0], v[1], v[2], 2); }) < 1e-6);
  }
}

TEST_CASE("gradients accumulate across shared uses") {
  Var x = Var::parameter(Tensor({3}, {1.0, -2.0, 0.5}));
  backward(ops::add(x, ops::scale(x, 3.0)), Tensor({3}, 1.0));
  for (double g : x.grad().values()) CHECK(g == 4.0);
}

TEST_CASE("no-grad mode records no graph") {
  Var x = Var::parameter(Tensor({2}, 1.0));
  {
    NoGradGuard ng;
    CHECK_FALSE(grad_enabled());
    CHECK_FALSE(ops::scale(x, 2.0).requires_grad());
  }
  CHECK(grad_enabled());
  CHECK(ops::scale(x, 2.0).requires_grad());
}

TEST_CASE("kink trace tracks the ReLU sign pattern") {
  const Var a = Var::constant(Tensor({2}, {0.5, -0.5}));
  const Var b = Var::constant(Tensor({2}, {0.5, 0.5}));
  std::uint64_t sa, sa2, sb;
  {
    KinkTrace t;
    ops::relu(a);
    sa = t.signature();
  }
  {
    KinkTrace t;
    ops::relu(a);
    sa2 = t.signature();
  }
  {
    KinkTrace t;
    ops::relu(b);
    sb = t.signature();
  }
  CHECK(sa == sa2);
  CHECK(sa != sb);
}

TEST_CASE("shape errors are validation errors") {
  const Var x = Var::constant(Tensor({1, 3, 4, 4}));
  CHECK_THROWS_AS(ops::conv2d(x, Var::constant(Tensor({2, 2, 3, 3})), Var()), ValidationError);
  CHECK_THROWS_AS(ops::add(x, Var::constant(Tensor({1, 3, 4, 5}))), ValidationError);
  CHECK_THROWS_AS(backward(Var::parameter(Tensor({3})), Tensor({2})), ValidationError);
}

TEST_CASE("zero-parameter probe has zero error") {
  GradcheckProblem p;
  p.value = [] { return 3.0; };
  p.analytic = [] { return std::vector<Tensor>{}; };
  const auto r = gradcheck_problem(p);
  CHECK(r.max_rel_err == 0.0);
  CHECK(r.checked == 0);

  Tensor unused({4}, 1.0);
  GradcheckProblem q;
  q.params = {{"w", &unused}};
  q.value = [] { return 3.0; };
  q.analytic = [] { return std::vector<Tensor>{Tensor()}; };
  CHECK(gradcheck_problem(q).max_rel_err == 0.0);
}

}  // TEST_SUITE
