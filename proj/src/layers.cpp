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

#include "mcc/layers.hpp"

#include <cmath>

namespace mcc {

std::vector<NamedParameter> Module::named_parameters() const {
  std::vector<NamedParameter> out;
  collect("", out);
  return out;
}

std::vector<NamedBuffer> Module::named_buffers() {
  std::vector<NamedBuffer> out;
  collect_buffers("", out);
  return out;
}

std::size_t Module::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : named_parameters()) n += p.var.value().numel();
  return n;
}

void Module::set_training(bool training) {
  training_ = training;
  for (auto& [name, child] : children_) child->set_training(training);
}

Var Module::add_parameter(std::string name, Tensor value) {
  params_.emplace_back(std::move(name), Var::parameter(std::move(value)));
  return params_.back().second;
}

void Module::add_buffer(std::string name, Tensor* tensor) { buffers_.emplace_back(std::move(name), tensor); }

void Module::collect(const std::string& prefix, std::vector<NamedParameter>& out) const {
  for (const auto& [name, var] : params_) out.push_back({prefix + name, var});
  for (const auto& [name, child] : children_) child->collect(prefix + name + ".", out);
}

void Module::collect_buffers(const std::string& prefix, std::vector<NamedBuffer>& out) {
  for (auto& [name, t] : buffers_) out.push_back({prefix + name, t});
  for (auto& [name, child] : children_) child->collect_buffers(prefix + name + ".", out);
}

Tensor init_tensor(const Shape& shape, InitScheme scheme, std::mt19937_64& rng) {
  Tensor t(shape, 0.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  switch (scheme) {
    case InitScheme::Zeros:
      break;
    case InitScheme::FanOutNormal: {
      // shape (Cout, Cin/groups, kh, kw)
      const double fan_out = static_cast<double>(shape[0]) * shape[2] * shape[3];
      const double std = std::sqrt(2.0 / fan_out);
      for (auto& v : t.values()) v = std * normal(rng);
      break;
    }
    case InitScheme::TruncNormal02:
      for (auto& v : t.values()) {
        double z;
        do z = normal(rng);
        while (std::abs(z) > 2.0);
        v = 0.02 * z;
      }
      break;
  }
  return t;
}

Conv2d::Conv2d(int in_channels, int out_channels, const Options& opt, std::mt19937_64& rng) : opt_(opt) {
  weight_ = add_parameter("weight", init_tensor({out_channels, in_channels / opt.groups, opt.kernel, opt.kernel},
                                                 opt.init, rng));
  if (opt.bias) bias_ = add_parameter("bias", Tensor({out_channels}, 0.0));
}

Var Conv2d::forward(const Var& x) const {
  return ops::conv2d(x, weight_, bias_, {opt_.stride, opt_.padding, opt_.dilation, opt_.groups});
}

BatchNorm2d::BatchNorm2d(int channels, double momentum, double eps)
    : running_mean_({channels}, 0.0), running_var_({channels}, 1.0), momentum_(momentum), eps_(eps) {
  gamma_ = add_parameter("weight", Tensor({channels}, 1.0));
  beta_ = add_parameter("bias", Tensor({channels}, 0.0));
  add_buffer("running_mean", &running_mean_);
  add_buffer("running_var", &running_var_);
}

Var BatchNorm2d::forward(const Var& x) {
  return ops::batch_norm(x, gamma_, beta_, running_mean_, running_var_, training(), momentum_, eps_);
}

LayerNorm2d::LayerNorm2d(int channels, double eps) : eps_(eps) {
  gamma_ = add_parameter("weight", Tensor({channels}, 1.0));
  beta_ = add_parameter("bias", Tensor({channels}, 0.0));
}

Var LayerNorm2d::forward(const Var& x) const { return ops::layer_norm_channels(x, gamma_, beta_, eps_); }

}  // namespace mcc
