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

// Reverse-mode differentiation over Tensor values. Every op
// returns a Var whose node remembers its inputs and a backward closure;
// backward() walks the graph in reverse topological order.

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include "mcc/tensor.hpp"

namespace mcc {

struct Node {
  Tensor value;
  Tensor grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  Tensor& grad_buffer();
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var constant(Tensor value);
  static Var parameter(Tensor value);

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const { return static_cast<bool>(node_); }

  /// Gradient accumulated by the last backward(); empty if none reached this node.
  const Tensor& grad() const { return node_->grad; }
  void zero_grad() { node_->grad = Tensor(); }

  const Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// While alive, ops record no graph (inference).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// While alive, every ReLU folds the sign pattern of its input into a
/// signature. Two evaluations with different signatures lie on different
/// linear pieces of the network.
class KinkTrace {
 public:
  KinkTrace();
  ~KinkTrace();
  KinkTrace(const KinkTrace&) = delete;
  KinkTrace& operator=(const KinkTrace&) = delete;
  std::uint64_t signature() const { return signature_; }

 private:
  std::uint64_t signature_ = 14695981039346656037ull;
  std::uint64_t* previous_;
};

/// Seeds d(out)/d(root) for each pair and propagates to every reachable leaf.
void backward(std::span<const std::pair<Var, Tensor>> seeds);
void backward(const Var& root, const Tensor& seed);

namespace ops {

struct Conv2dOptions {
  int stride = 1;
  int padding = 0;
  int dilation = 1;
  int groups = 1;
};

/// x: (N,Cin,H,W), weight: (Cout,Cin/groups,kh,kw), bias: (Cout) or undefined.
Var conv2d(const Var& x, const Var& weight, const Var& bias, const Conv2dOptions& opt = {});

/// Batch normalization over (N,H,W) per channel. In training mode batch
/// statistics are used and the running estimates are updated in place.
Var batch_norm(const Var& x, const Var& gamma, const Var& beta, Tensor& running_mean, Tensor& running_var,
               bool training, double momentum = 0.1, double eps = 1e-5);

/// LayerNorm across channels at every spatial location of an NCHW tensor.
Var layer_norm_channels(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-6);

Var relu(const Var& x);
Var gelu(const Var& x);
/// (1/beta) log(1 + exp(beta x)), evaluated without overflow.
Var softplus(const Var& x, double beta = 1.0);

Var add(const Var& a, const Var& b);
Var scale(const Var& x, double factor);

/// Bilinear resize of an NCHW tensor (half-pixel centres, edge clamped).
Var resize_bilinear(const Var& x, int out_h, int out_w);

Var reshape(const Var& x, Shape shape);

/// out.flat[i] = x.flat[index[i]]; backward scatters. Used for window
/// partitioning and other pure permutations.
Var gather(const Var& x, std::shared_ptr<const std::vector<std::size_t>> index, Shape out_shape);

/// Multi-head scaled dot-product attention on channel-major token tensors.
/// q: (N,C,Lq), k/v: (N,C,Lk); C split evenly into heads. Returns (N,C,Lq).
Var attention(const Var& q, const Var& k, const Var& v, int heads);

}  // namespace ops

// Scalar helpers shared by the softplus op and the counting head.
double softplus_value(double x, double beta);
double softplus_grad(double x, double beta);

}  // namespace mcc
