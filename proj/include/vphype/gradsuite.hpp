#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "vphype/gradcheck.hpp"
#include "vphype/model.hpp"
#include "vphype/ops.hpp"

namespace vphype {

struct GradCheckItem {
  std::string name;
  double max_err = 0.0;
  double tol = 1e-6;
  bool pass = false;
};

namespace detail {

inline Shape gradsuite_shape(Rng& rng) {
  int rank = 1 + static_cast<int>(rng.uniform_int(3));
  Shape s(rank);
  for (auto& d : s) d = 1 + static_cast<std::int64_t>(rng.uniform_int(4));
  return s;
}

// scalar projection with a fixed random weighting so every output coordinate
// is exercised
inline double sweep_unary(const std::function<Tensor(const Tensor&)>& op, std::uint64_t seed,
                          bool positive = false, double margin = 0.0, int trials = 20) {
  Rng rng(seed);
  double worst = 0.0;
  for (int trial = 0; trial < trials; ++trial) {
    Tensor x = Tensor::randn(gradsuite_shape(rng), rng);
    if (positive) {
      for (auto& v : x.mutable_data()) v = 0.5 + std::abs(v);
    } else if (margin > 0.0) {
      for (auto& v : x.mutable_data()) {
        if (std::abs(v) < margin) v = v < 0 ? v - margin : v + margin;
      }
    }
    Tensor proj = Tensor::randn(op(x).shape(), rng);
    auto f = [&](const Tensor& t) { return sum_all(mul(op(t), proj)); };
    worst = std::max(worst, grad_check(f, x));
  }
  return worst;
}

}  // namespace detail

// Seeded finite-difference sweep over every primitive with a backward rule,
// plus an end-to-end check of the tiny model with prompts enabled.
inline std::vector<GradCheckItem> run_gradient_suite(double primitive_tol = 1e-6,
                                                     double end_to_end_tol = 1e-5) {
  std::vector<GradCheckItem> items;
  auto record = [&](const std::string& name, double err, double tol) {
    items.push_back({name, err, tol, err < tol});
  };

  record("relu", detail::sweep_unary([](const Tensor& t) { return relu(t); }, 101, false, 1e-3),
         primitive_tol);
  record("silu", detail::sweep_unary([](const Tensor& t) { return silu(t); }, 102), primitive_tol);
  record("gelu", detail::sweep_unary([](const Tensor& t) { return gelu(t); }, 103), primitive_tol);
  record("softplus", detail::sweep_unary([](const Tensor& t) { return softplus(t); }, 104),
         primitive_tol);
  record("sigmoid", detail::sweep_unary([](const Tensor& t) { return sigmoid(t); }, 105),
         primitive_tol);
  record("exp", detail::sweep_unary([](const Tensor& t) { return exp_op(t); }, 106), primitive_tol);
  record("log", detail::sweep_unary([](const Tensor& t) { return log_op(t); }, 107, true),
         primitive_tol);
  record("sqrt", detail::sweep_unary([](const Tensor& t) { return sqrt_op(t); }, 108, true),
         primitive_tol);
  record("softmax",
         detail::sweep_unary([](const Tensor& t) { return softmax(t, 0); }, 109), primitive_tol);

  {
    Rng rng(110);
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
      Shape s = detail::gradsuite_shape(rng);
      Tensor b = Tensor::randn(s, rng);
      for (auto& v : b.mutable_data()) {
        if (std::abs(v) < 0.5) v = v < 0 ? v - 0.5 : v + 0.5;
      }
      Tensor proj = Tensor::randn(s, rng);
      for (auto op : {detail::BinOp::Add, detail::BinOp::Sub, detail::BinOp::Mul, detail::BinOp::Div}) {
        auto f = [&](const Tensor& t) { return sum_all(mul(detail::binary_op(t, b, op), proj)); };
        worst = std::max(worst, grad_check(f, Tensor::randn(s, rng)));
      }
    }
    record("elementwise_binary", worst, primitive_tol);
  }

  {
    Rng rng(111);
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
      std::int64_t M = 1 + rng.uniform_int(4), K = 1 + rng.uniform_int(4), P = 1 + rng.uniform_int(4);
      Tensor a = Tensor::randn({2, M, K}, rng);
      Tensor b = Tensor::randn({K, P}, rng);
      Tensor proj = Tensor::randn({2, M, P}, rng);
      worst = std::max(worst, grad_check([&](const Tensor& t) { return sum_all(mul(matmul(t, b), proj)); }, a));
      worst = std::max(worst, grad_check([&](const Tensor& t) { return sum_all(mul(matmul(a, t), proj)); }, b));
    }
    record("matmul", worst, primitive_tol);
  }

  {
    Rng rng(112);
    double worst = 0.0;
    for (int trial = 0; trial < 6; ++trial) {
      Tensor x = Tensor::randn({1, 2, 5, 5}, rng);
      Tensor w = Tensor::randn({2, 2, 3, 3}, rng);
      Tensor b = Tensor::randn({2}, rng);
      std::int64_t stride = 1 + trial % 2;
      Tensor proj = Tensor::randn(conv2d(x, w, b, stride, 1).shape(), rng);
      auto scal = [&](const Tensor& y) { return sum_all(mul(y, proj)); };
      worst = std::max(worst, grad_check([&](const Tensor& t) { return scal(conv2d(t, w, b, stride, 1)); }, x));
      worst = std::max(worst, grad_check([&](const Tensor& t) { return scal(conv2d(x, t, b, stride, 1)); }, w));
      worst = std::max(worst, grad_check([&](const Tensor& t) { return scal(conv2d(x, w, t, stride, 1)); }, b));
    }
    record("conv2d", worst, primitive_tol);
  }

  {
    Rng rng(113);
    double worst = 0.0;
    for (int trial = 0; trial < 6; ++trial) {
      Tensor x = Tensor::randn({2, 3, 6}, rng);
      Tensor w = Tensor::randn({3, 3}, rng);
      Tensor b = Tensor::randn({3}, rng);
      Tensor proj = Tensor::randn({2, 3, 6}, rng);
      auto scal = [&](const Tensor& y) { return sum_all(mul(y, proj)); };
      worst = std::max(worst, grad_check([&](const Tensor& t) { return scal(depthwise_conv1d(t, w, b)); }, x));
      worst = std::max(worst, grad_check([&](const Tensor& t) { return scal(depthwise_conv1d(x, t, b)); }, w));
      Tensor x2 = Tensor::randn({1, 2, 4, 4}, rng);
      Tensor w2 = Tensor::randn({2, 3, 3}, rng);
      Tensor b2 = Tensor::randn({2}, rng);
      Tensor proj2 = Tensor::randn({1, 2, 4, 4}, rng);
      auto scal2 = [&](const Tensor& y) { return sum_all(mul(y, proj2)); };
      worst = std::max(worst, grad_check([&](const Tensor& t) { return scal2(depthwise_conv2d(t, w2, b2, 1)); }, x2));
      worst = std::max(worst, grad_check([&](const Tensor& t) { return scal2(depthwise_conv2d(x2, t, b2, 1)); }, w2));
    }
    record("depthwise_conv", worst, primitive_tol);
  }

  {
    Rng rng(114);
    double worst = 0.0;
    for (int trial = 0; trial < 10; ++trial) {
      Tensor x = Tensor::randn({3, 5}, rng);
      Tensor gamma = Tensor::randn({5}, rng);
      Tensor beta = Tensor::randn({5}, rng);
      Tensor proj = Tensor::randn({3, 5}, rng);
      auto scal = [&](const Tensor& y) { return sum_all(mul(y, proj)); };
      worst = std::max(worst, grad_check([&](const Tensor& t) { return scal(layernorm(t, gamma, beta)); }, x));
      worst = std::max(worst, grad_check([&](const Tensor& t) { return scal(layernorm(x, t, beta)); }, gamma));
      Tensor x4 = Tensor::randn({2, 2, 2, 2}, rng);
      Tensor g4 = Tensor::randn({2}, rng);
      Tensor b4 = Tensor::randn({2}, rng);
      Tensor proj4 = Tensor::randn({2, 2, 2, 2}, rng);
      auto scal4 = [&](const Tensor& y) { return sum_all(mul(y, proj4)); };
      auto bn = [&](const Tensor& xx) {
        BatchNormState st(2);
        return batchnorm2d(xx, g4, b4, st, true);
      };
      worst = std::max(worst, grad_check([&](const Tensor& t) { return scal4(bn(t)); }, x4));
    }
    record("normalization", worst, primitive_tol);
  }

  {
    Rng rng(115);
    double worst = 0.0;
    for (int trial = 0; trial < 10; ++trial) {
      Tensor x = Tensor::randn({1, 2, 3, 3}, rng);
      for (auto mode : {InterpMode::Nearest, InterpMode::Bilinear}) {
        Tensor proj = Tensor::randn({1, 2, 5, 4}, rng);
        worst = std::max(
            worst,
            grad_check([&](const Tensor& t) { return sum_all(mul(interpolate(t, 5, 4, mode), proj)); }, x));
      }
    }
    record("interpolate", worst, primitive_tol);
  }

  {
    Rng rng(116);
    double worst = 0.0;
    for (int trial = 0; trial < 10; ++trial) {
      std::int64_t M = 2, D = 2, L = 4, N = 2;
      Tensor u = Tensor::randn({M, D, L}, rng);
      Tensor delta = Tensor::randn({M, D, L}, rng);
      for (auto& v : delta.mutable_data()) v = 0.4 + 0.3 * std::abs(v);
      Tensor a = Tensor::randn({D, N}, rng);
      for (auto& v : a.mutable_data()) v = -0.2 - std::abs(v);
      Tensor b = Tensor::randn({M, N, L}, rng);
      Tensor c = Tensor::randn({M, N, L}, rng);
      Tensor skip = Tensor::randn({D}, rng);
      Tensor proj = Tensor::randn({M, D, L}, rng);
      auto scal = [&](const Tensor& y) { return sum_all(mul(y, proj)); };
      worst = std::max(worst, grad_check([&](const Tensor& t) { return scal(selective_scan(t, delta, a, b, c, skip)); }, u));
      worst = std::max(worst, grad_check([&](const Tensor& t) { return scal(selective_scan(u, t, a, b, c, skip)); }, delta));
      worst = std::max(worst, grad_check([&](const Tensor& t) { return scal(selective_scan(u, delta, t, b, c, skip)); }, a));
      worst = std::max(worst, grad_check([&](const Tensor& t) { return scal(selective_scan(u, delta, a, t, c, skip)); }, b));
      worst = std::max(worst, grad_check([&](const Tensor& t) { return scal(selective_scan(u, delta, a, b, t, skip)); }, c));
      worst = std::max(worst, grad_check([&](const Tensor& t) { return scal(selective_scan(u, delta, a, b, c, t)); }, skip));
    }
    record("selective_scan", worst, primitive_tol);
  }

  {
    Rng rng(117);
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
      Tensor logits = Tensor::randn({3, 5}, rng);
      std::vector<std::int64_t> labels{static_cast<std::int64_t>(rng.uniform_int(5)),
                                       static_cast<std::int64_t>(rng.uniform_int(5)),
                                       static_cast<std::int64_t>(rng.uniform_int(5))};
      worst = std::max(worst, grad_check([&](const Tensor& t) { return cross_entropy(t, labels); }, logits));
    }
    record("cross_entropy", worst, primitive_tol);
  }

  {
    Rng rng(118);
    double worst = 0.0;
    for (int trial = 0; trial < 10; ++trial) {
      Tensor x = Tensor::randn({2, 3, 4}, rng);
      Tensor proj = Tensor::randn({4, 6}, rng);
      worst = std::max(worst, grad_check([&](const Tensor& t) { return sum_all(mul(reshape(t, {4, 6}), proj)); }, x));
      Tensor proj2 = Tensor::randn({4, 2, 3}, rng);
      worst = std::max(worst, grad_check([&](const Tensor& t) { return sum_all(mul(permute(t, {2, 0, 1}), proj2)); }, x));
      Tensor proj3 = Tensor::randn({3, 4}, rng);
      worst = std::max(worst, grad_check([&](const Tensor& t) { return sum_all(mul(mean_axis(t, 0), proj3)); }, x));
    }
    record("structural_and_reductions", worst, primitive_tol);
  }

  // end-to-end: tiny model, prompts enabled, loss = sum of logits
  {
    ModelConfig cfg;
    cfg.in_bands = 3;
    cfg.num_classes = 3;
    cfg.base_dim = 8;
    cfg.depths = {1, 1, 1, 1};
    cfg.num_heads = {2, 2, 2, 2};
    cfg.mlp_ratio = 2.0;
    cfg.d_state = 4;
    cfg.drop_path_max = 0.0;
    PromptConfig pcfg;
    pcfg.inject_levels = {1, 2};
    pcfg.s_p = 4;
    VpHypeModel model(cfg, pcfg, make_default_bank(2), 11);
    Rng data_rng(119);
    Tensor img = Tensor::randn({1, 3, 8, 8}, data_rng);
    std::vector<std::int64_t> tasks{1};
    auto loss_fn = [&]() { return sum_all(model.forward(img, tasks, true, nullptr)); };
    std::vector<Tensor> params;
    for (auto& p : model.trainable_parameters()) params.push_back(p.tensor);
    Rng pick(120);
    double err = grad_check_params(loss_fn, params, 3, pick);
    record("end_to_end_tiny_model", err, end_to_end_tol);
  }

  return items;
}

}  // namespace vphype
