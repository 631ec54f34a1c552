#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "vphype/ops.hpp"
#include "vphype/rng.hpp"
#include "vphype/tensor.hpp"

namespace vphype {

struct ParamRef {
  std::string name;
  Tensor tensor;
};

using ParamList = std::vector<ParamRef>;

inline void register_param(ParamList& out, const std::string& name, Tensor& t) {
  t.set_requires_grad(true);
  out.push_back({name, t});
}

// linear layers init normal(0, 0.02), convolutions He-normal, biases zero
inline Tensor init_linear_weight(Shape shape, Rng& rng) { return Tensor::randn(shape, rng, 0.02); }

inline Tensor init_conv_weight(Shape shape, Rng& rng, std::int64_t fan_in) {
  return Tensor::randn(shape, rng, std::sqrt(2.0 / static_cast<double>(fan_in)));
}

struct LinearLayer {
  Tensor weight;  // [Din, Dout]
  Tensor bias;    // [Dout] (may be undefined)

  LinearLayer() = default;
  LinearLayer(std::int64_t din, std::int64_t dout, Rng& rng, bool with_bias = true) {
    weight = init_linear_weight({din, dout}, rng).set_requires_grad(true);
    if (with_bias) bias = Tensor::zeros({dout}).set_requires_grad(true);
  }

  Tensor forward(const Tensor& x) const { return linear(x, weight, bias); }

  void collect(const std::string& prefix, ParamList& out) {
    register_param(out, prefix + ".weight", weight);
    if (bias.defined()) register_param(out, prefix + ".bias", bias);
  }
};

struct LayerNormLayer {
  Tensor gamma, beta;
  double eps = 1e-5;

  LayerNormLayer() = default;
  explicit LayerNormLayer(std::int64_t dim) {
    gamma = Tensor::full({dim}, 1.0).set_requires_grad(true);
    beta = Tensor::zeros({dim}).set_requires_grad(true);
  }

  Tensor forward(const Tensor& x) const { return layernorm(x, gamma, beta, eps); }

  void collect(const std::string& prefix, ParamList& out) {
    register_param(out, prefix + ".gamma", gamma);
    register_param(out, prefix + ".beta", beta);
  }
};

struct BatchNorm2dLayer {
  Tensor gamma, beta;
  BatchNormState state;
  double momentum = 0.1;
  double eps = 1e-5;

  BatchNorm2dLayer() = default;
  explicit BatchNorm2dLayer(std::int64_t channels) : state(channels) {
    gamma = Tensor::full({channels}, 1.0).set_requires_grad(true);
    beta = Tensor::zeros({channels}).set_requires_grad(true);
  }

  Tensor forward(const Tensor& x, bool training) {
    return batchnorm2d(x, gamma, beta, state, training, momentum, eps);
  }

  void collect(const std::string& prefix, ParamList& out) {
    register_param(out, prefix + ".gamma", gamma);
    register_param(out, prefix + ".beta", beta);
  }
};

struct Conv2dLayer {
  Tensor weight;  // [Cout, Cin, k, k]
  Tensor bias;    // [Cout]
  std::int64_t stride = 1;
  std::int64_t padding = 0;

  Conv2dLayer() = default;
  Conv2dLayer(std::int64_t cin, std::int64_t cout, std::int64_t k, std::int64_t stride_,
              std::int64_t padding_, Rng& rng)
      : stride(stride_), padding(padding_) {
    weight = init_conv_weight({cout, cin, k, k}, rng, cin * k * k).set_requires_grad(true);
    bias = Tensor::zeros({cout}).set_requires_grad(true);
  }

  Tensor forward(const Tensor& x) const { return conv2d(x, weight, bias, stride, padding); }

  void collect(const std::string& prefix, ParamList& out) {
    register_param(out, prefix + ".weight", weight);
    register_param(out, prefix + ".bias", bias);
  }
};

struct DepthwiseConv2dLayer {
  Tensor weight;  // [C, k, k]
  Tensor bias;    // [C]
  std::int64_t padding = 0;

  DepthwiseConv2dLayer() = default;
  DepthwiseConv2dLayer(std::int64_t channels, std::int64_t k, std::int64_t padding_, Rng& rng)
      : padding(padding_) {
    weight = init_conv_weight({channels, k, k}, rng, k * k).set_requires_grad(true);
    bias = Tensor::zeros({channels}).set_requires_grad(true);
  }

  Tensor forward(const Tensor& x) const { return depthwise_conv2d(x, weight, bias, padding); }

  void collect(const std::string& prefix, ParamList& out) {
    register_param(out, prefix + ".weight", weight);
    register_param(out, prefix + ".bias", bias);
  }
};

struct Mlp {
  LinearLayer fc1, fc2;

  Mlp() = default;
  Mlp(std::int64_t dim, std::int64_t hidden, Rng& rng) : fc1(dim, hidden, rng), fc2(hidden, dim, rng) {}

  Tensor forward(const Tensor& x) const { return fc2.forward(gelu(fc1.forward(x))); }

  void collect(const std::string& prefix, ParamList& out) {
    fc1.collect(prefix + ".fc1", out);
    fc2.collect(prefix + ".fc2", out);
  }
};

// Zeroes whole residual branches per sample during training (prob p, survivors
// scaled by 1/(1-p)); identity at inference. x is a windowed sequence batch
// [B*n_windows, L, d]; the mask is drawn once per original sample.
inline Tensor drop_path(const Tensor& x, double p, bool training, Rng* rng,
                        std::int64_t n_windows) {
  if (!training || p <= 0.0) return x;
  std::int64_t M = x.dim(0);
  std::int64_t B = M / n_windows;
  std::vector<double> mask(static_cast<std::size_t>(M));
  for (std::int64_t b = 0; b < B; ++b) {
    double keep;
    if (p >= 1.0) {
      keep = 0.0;
    } else {
      keep = (rng->uniform() >= p) ? 1.0 / (1.0 - p) : 0.0;
    }
    for (std::int64_t w = 0; w < n_windows; ++w) mask[b * n_windows + w] = keep;
  }
  Tensor m = Tensor::from_data(std::move(mask), {M, 1, 1});
  return mul(x, m);
}

}  // namespace vphype
