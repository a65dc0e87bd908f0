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

#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "mcc/autograd.hpp"

namespace mcc {

struct NamedParameter {
  std::string name;
  Var var;
};

struct NamedBuffer {
  std::string name;
  Tensor* tensor;
};

/// Owns parameters, buffers and child modules; names are dotted paths.
class Module {
 public:
  Module() = default;
  virtual ~Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;

  std::vector<NamedParameter> named_parameters() const;
  std::vector<NamedBuffer> named_buffers();
  std::size_t parameter_count() const;

  void set_training(bool training);
  bool training() const { return training_; }

 protected:
  Var add_parameter(std::string name, Tensor value);
  void add_buffer(std::string name, Tensor* tensor);
  template <class M>
  M& add_module(std::string name, std::unique_ptr<M> module) {
    M& ref = *module;
    children_.emplace_back(std::move(name), std::move(module));
    return ref;
  }

 private:
  void collect(const std::string& prefix, std::vector<NamedParameter>& out) const;
  void collect_buffers(const std::string& prefix, std::vector<NamedBuffer>& out);

  std::vector<std::pair<std::string, Var>> params_;
  std::vector<std::pair<std::string, Tensor*>> buffers_;
  std::vector<std::pair<std::string, std::unique_ptr<Module>>> children_;
  bool training_ = true;
};

enum class InitScheme {
  FanOutNormal,   // convolutions: N(0, sqrt(2 / fan_out))
  TruncNormal02,  // attention / projection weights: truncated N(0, 0.02)
  Zeros,
};

Tensor init_tensor(const Shape& shape, InitScheme scheme, std::mt19937_64& rng);

class Conv2d : public Module {
 public:
  struct Options {
    int kernel = 1;
    int stride = 1;
    int padding = 0;
    int dilation = 1;
    int groups = 1;
    bool bias = true;
    InitScheme init = InitScheme::FanOutNormal;
  };
  Conv2d(int in_channels, int out_channels, const Options& opt, std::mt19937_64& rng);
  Var forward(const Var& x) const;

  int dilation() const { return opt_.dilation; }
  const Var& weight() const { return weight_; }
  Var& bias() { return bias_; }

 private:
  Options opt_;
  Var weight_;
  Var bias_;
};

class BatchNorm2d : public Module {
 public:
  explicit BatchNorm2d(int channels, double momentum = 0.1, double eps = 1e-5);
  Var forward(const Var& x);

 private:
  Var gamma_;
  Var beta_;
  Tensor running_mean_;
  Tensor running_var_;
  double momentum_, eps_;
};

class LayerNorm2d : public Module {
 public:
  explicit LayerNorm2d(int channels, double eps = 1e-6);
  Var forward(const Var& x) const;

 private:
  Var gamma_;
  Var beta_;
  double eps_;
};

}  // namespace mcc
