#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "vphype/config.hpp"
#include "vphype/layers.hpp"
#include "vphype/ops.hpp"

namespace vphype {

// --- windowing ---------------------------------------------------------------

// Mirror fold (reflect-101) of an arbitrary index into [0, n).
inline std::int64_t mirror_index(std::int64_t i, std::int64_t n) {
  if (n == 1) return 0;
  std::int64_t period = 2 * (n - 1);
  std::int64_t m = i % period;
  if (m < 0) m += period;
  return m < n ? m : period - m;
}

// Reflect-pads [B,C,H,W] on the bottom/right edges to the target size.
inline Tensor reflect_pad_to(const Tensor& x, std::int64_t target_h, std::int64_t target_w) {
  const Shape& s = x.shape();
  std::int64_t B = s[0], C = s[1], H = s[2], W = s[3];
  if (target_h == H && target_w == W) return x;
  if (target_h < H || target_w < W) throw ContractError("reflect_pad_to cannot shrink");
  std::vector<std::int64_t> index_map;
  index_map.reserve(static_cast<std::size_t>(B * C * target_h * target_w));
  for (std::int64_t bc = 0; bc < B * C; ++bc) {
    for (std::int64_t h = 0; h < target_h; ++h) {
      std::int64_t sh = mirror_index(h, H);
      for (std::int64_t w = 0; w < target_w; ++w) {
        index_map.push_back((bc * H + sh) * W + mirror_index(w, W));
      }
    }
  }
  return gather(x, std::move(index_map), {B, C, target_h, target_w});
}

// [B, C, H, W] -> [B*N_w, w*w, C]; windows enumerated row-major, positions
// row-major within each window.
inline Tensor window_partition(const Tensor& x, std::int64_t w) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw DimensionError("window_partition expects [B,C,H,W]");
  std::int64_t B = s[0], C = s[1], H = s[2], W = s[3];
  if (H % w != 0 || W % w != 0) {
    throw ContractError("internal invariant violation: window " + std::to_string(w) +
                        " does not divide feature map " + shape_str(s));
  }
  std::int64_t wh = H / w, ww = W / w;
  std::int64_t n_windows = wh * ww;
  std::vector<std::int64_t> index_map(static_cast<std::size_t>(B * n_windows * w * w * C));
  std::size_t p = 0;
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t wr = 0; wr < wh; ++wr) {
      for (std::int64_t wc = 0; wc < ww; ++wc) {
        for (std::int64_t i = 0; i < w; ++i) {
          for (std::int64_t j = 0; j < w; ++j) {
            std::int64_t h = wr * w + i, ww_ = wc * w + j;
            for (std::int64_t c = 0; c < C; ++c) {
              index_map[p++] = ((b * C + c) * H + h) * W + ww_;
            }
          }
        }
      }
    }
  }
  return gather(x, std::move(index_map), {B * n_windows, w * w, C});
}

// Inverse of window_partition.
inline Tensor window_reverse(const Tensor& seq, std::int64_t w, std::int64_t B, std::int64_t C,
                             std::int64_t H, std::int64_t W) {
  if (H % w != 0 || W % w != 0) {
    throw ContractError("internal invariant violation: window_reverse geometry");
  }
  std::int64_t wh = H / w, ww = W / w;
  std::int64_t n_windows = wh * ww;
  if (seq.shape() != Shape{B * n_windows, w * w, C}) {
    throw DimensionError("window_reverse sequence shape " + shape_str(seq.shape()) +
                         " does not match geometry");
  }
  std::vector<std::int64_t> index_map(static_cast<std::size_t>(B * C * H * W));
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t wr = 0; wr < wh; ++wr) {
      for (std::int64_t wc = 0; wc < ww; ++wc) {
        std::int64_t win = (b * wh + wr) * ww + wc;
        for (std::int64_t i = 0; i < w; ++i) {
          for (std::int64_t j = 0; j < w; ++j) {
            std::int64_t pos = i * w + j;
            std::int64_t h = wr * w + i, ww_ = wc * w + j;
            for (std::int64_t c = 0; c < C; ++c) {
              index_map[((b * C + c) * H + h) * W + ww_] = (win * w * w + pos) * C + c;
            }
          }
        }
      }
    }
  }
  return gather(seq, std::move(index_map), {B, C, H, W});
}

// Hybrid rule: the first floor(depth/2) blocks of a stage mix with the SSM,
// the rest with windowed attention.
enum class MixerKind { Mamba, Attention };

inline MixerKind mixer_kind(std::int64_t level_depth, std::int64_t block_index) {
  if (block_index < 0 || block_index >= level_depth) {
    throw ContractError("block index " + std::to_string(block_index) + " out of range for depth " +
                        std::to_string(level_depth));
  }
  return block_index < level_depth / 2 ? MixerKind::Mamba : MixerKind::Attention;
}

// Largest window size <= preferred that divides both spatial dims.
inline std::int64_t effective_window(std::int64_t preferred, std::int64_t h, std::int64_t w) {
  std::int64_t cap = std::min({preferred, h, w});
  for (std::int64_t cand = cap; cand >= 1; --cand) {
    if (h % cand == 0 && w % cand == 0) return cand;
  }
  return 1;
}

// --- mixers --------------------------------------------------------------------

// Gated SSM mixer: project, split, conv+SiLU per branch, selective scan on the
// first branch, concat with the gate branch, project back.
struct MambaMixer {
  std::int64_t dim = 0, d_inner = 0, d_half = 0, d_state = 0, d_conv = 0, dt_rank = 0;
  Tensor w_in;                  // [dim, d_inner]
  Tensor conv_w_x, conv_b_x;    // [d_half, d_conv], [d_half]
  Tensor conv_w_z, conv_b_z;
  Tensor w_x;                   // [d_half, dt_rank + 2*d_state]
  Tensor w_dt, b_dt;            // [dt_rank, d_half], [d_half]
  Tensor a_log;                 // [d_half, d_state]
  Tensor d_skip;                // [d_half]
  Tensor w_out;                 // [d_inner, dim]

  MambaMixer() = default;
  MambaMixer(std::int64_t dim_, std::int64_t d_state_, std::int64_t d_conv_, double expand,
             Rng& rng)
      : dim(dim_), d_state(d_state_), d_conv(d_conv_) {
    d_inner = static_cast<std::int64_t>(expand * static_cast<double>(dim) + 0.5);
    if (d_inner % 2 != 0) throw ConfigError("mamba inner dim must be even, got " + std::to_string(d_inner));
    d_half = d_inner / 2;
    dt_rank = (dim + 15) / 16;
    w_in = init_linear_weight({dim, d_inner}, rng).set_requires_grad(true);
    conv_w_x = init_conv_weight({d_half, d_conv}, rng, d_conv).set_requires_grad(true);
    conv_b_x = Tensor::zeros({d_half}).set_requires_grad(true);
    conv_w_z = init_conv_weight({d_half, d_conv}, rng, d_conv).set_requires_grad(true);
    conv_b_z = Tensor::zeros({d_half}).set_requires_grad(true);
    w_x = init_linear_weight({d_half, dt_rank + 2 * d_state}, rng).set_requires_grad(true);
    w_dt = init_linear_weight({dt_rank, d_half}, rng).set_requires_grad(true);
    b_dt = Tensor::zeros({d_half}).set_requires_grad(true);
    // A_log rows initialized from log([1..d_state]) so A = -exp(A_log) spans
    // decay rates -1..-d_state
    std::vector<double> al(static_cast<std::size_t>(d_half * d_state));
    for (std::int64_t r = 0; r < d_half; ++r) {
      for (std::int64_t n = 0; n < d_state; ++n) {
        al[r * d_state + n] = std::log(static_cast<double>(n + 1));
      }
    }
    a_log = Tensor::from_data(std::move(al), {d_half, d_state}).set_requires_grad(true);
    d_skip = Tensor::full({d_half}, 1.0).set_requires_grad(true);
    w_out = init_linear_weight({d_inner, dim}, rng).set_requires_grad(true);
  }

  // s: [M, L, dim] -> [M, L, dim]
  Tensor forward(const Tensor& s) const {
    std::int64_t M = s.dim(0), L = s.dim(1);
    Tensor z = matmul(s, w_in);                      // [M, L, d_inner]
    Tensor z1 = slice(z, 2, 0, d_half);
    Tensor z2 = slice(z, 2, d_half, d_half);

    Tensor x = permute(z1, {0, 2, 1});               // [M, d_half, L]
    x = silu(depthwise_conv1d(x, conv_w_x, conv_b_x));
    Tensor g = permute(z2, {0, 2, 1});
    g = silu(depthwise_conv1d(g, conv_w_z, conv_b_z));

    Tensor xt = permute(x, {0, 2, 1});               // [M, L, d_half]
    Tensor dbl = matmul(xt, w_x);                    // [M, L, rank + 2n]
    Tensor dt = slice(dbl, 2, 0, dt_rank);
    Tensor b_seq = slice(dbl, 2, dt_rank, d_state);
    Tensor c_seq = slice(dbl, 2, dt_rank + d_state, d_state);

    Tensor delta = softplus(add(matmul(dt, w_dt), b_dt));  // [M, L, d_half]
    delta = permute(delta, {0, 2, 1});               // [M, d_half, L]
    Tensor b_s = permute(b_seq, {0, 2, 1});          // [M, n, L]
    Tensor c_s = permute(c_seq, {0, 2, 1});
    Tensor a = neg(exp_op(a_log));                   // [d_half, n], strictly negative

    Tensor y = selective_scan(x, delta, a, b_s, c_s, d_skip);  // [M, d_half, L]
    Tensor yt = permute(y, {0, 2, 1});
    Tensor gt = permute(g, {0, 2, 1});
    Tensor cat = concat({yt, gt}, 2);                // [M, L, d_inner]
    (void)M;
    (void)L;
    return matmul(cat, w_out);
  }

  void collect(const std::string& prefix, ParamList& out) {
    register_param(out, prefix + ".w_in", w_in);
    register_param(out, prefix + ".conv_w_x", conv_w_x);
    register_param(out, prefix + ".conv_b_x", conv_b_x);
    register_param(out, prefix + ".conv_w_z", conv_w_z);
    register_param(out, prefix + ".conv_b_z", conv_b_z);
    register_param(out, prefix + ".w_x", w_x);
    register_param(out, prefix + ".w_dt", w_dt);
    register_param(out, prefix + ".b_dt", b_dt);
    register_param(out, prefix + ".a_log", a_log);
    register_param(out, prefix + ".d_skip", d_skip);
    register_param(out, prefix + ".w_out", w_out);
  }
};

// Scaled dot-product attention over window sequences, optional per-head
// layernorm on Q and K, no positional encoding.
struct AttentionMixer {
  std::int64_t dim = 0, heads = 0, head_dim = 0;
  bool qk_norm = true;
  LinearLayer qkv, proj;
  LayerNormLayer q_norm, k_norm;

  AttentionMixer() = default;
  AttentionMixer(std::int64_t dim_, std::int64_t heads_, bool qk_norm_, Rng& rng)
      : dim(dim_), heads(heads_), head_dim(dim_ / heads_), qk_norm(qk_norm_) {
    if (dim % heads != 0) {
      throw ConfigError("attention dim " + std::to_string(dim) + " not divisible by heads " +
                        std::to_string(heads));
    }
    qkv = LinearLayer(dim, 3 * dim, rng);
    proj = LinearLayer(dim, dim, rng);
    if (qk_norm) {
      q_norm = LayerNormLayer(head_dim);
      k_norm = LayerNormLayer(head_dim);
    }
  }

  // s: [M, L, dim] -> [M, L, dim]
  Tensor forward(const Tensor& s) const {
    std::int64_t M = s.dim(0), L = s.dim(1);
    Tensor qkv_out = qkv.forward(s);  // [M, L, 3*dim]
    auto split_heads = [&](const Tensor& t) {
      // [M, L, dim] -> [M, heads, L, head_dim]
      return permute(reshape(t, {M, L, heads, head_dim}), {0, 2, 1, 3});
    };
    Tensor q = split_heads(slice(qkv_out, 2, 0, dim));
    Tensor k = split_heads(slice(qkv_out, 2, dim, dim));
    Tensor v = split_heads(slice(qkv_out, 2, 2 * dim, dim));
    if (qk_norm) {
      q = q_norm.forward(q);
      k = k_norm.forward(k);
    }
    double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
    Tensor scores = mul_scalar(matmul(q, transpose_last2(k)), scale);  // [M, H, L, L]
    Tensor attn = softmax(scores, 3);
    Tensor out = matmul(attn, v);                                      // [M, H, L, hd]
    out = reshape(permute(out, {0, 2, 1, 3}), {M, L, dim});
    return proj.forward(out);
  }

  void collect(const std::string& prefix, ParamList& out) {
    qkv.collect(prefix + ".qkv", out);
    proj.collect(prefix + ".proj", out);
    if (qk_norm) {
      q_norm.collect(prefix + ".q_norm", out);
      k_norm.collect(prefix + ".k_norm", out);
    }
  }
};

// Pre-norm residual block: u += g1*DropPath(mixer(LN(u))); u += g2*DropPath(MLP(LN(u))).
struct HybridBlock {
  MixerKind kind = MixerKind::Attention;
  MambaMixer mamba;
  AttentionMixer attention;
  LayerNormLayer norm1, norm2;
  Mlp mlp;
  Tensor gamma1, gamma2;  // layer scale, [dim]
  double drop_path_p = 0.0;

  HybridBlock() = default;
  HybridBlock(MixerKind kind_, std::int64_t dim, std::int64_t heads, const ModelConfig& cfg,
              double drop_path_prob, Rng& rng)
      : kind(kind_), norm1(dim), norm2(dim), drop_path_p(drop_path_prob) {
    if (kind == MixerKind::Mamba) {
      mamba = MambaMixer(dim, cfg.d_state, cfg.d_conv, cfg.expand, rng);
    } else {
      attention = AttentionMixer(dim, heads, cfg.qk_norm, rng);
    }
    std::int64_t hidden = static_cast<std::int64_t>(cfg.mlp_ratio * static_cast<double>(dim) + 0.5);
    mlp = Mlp(dim, std::max<std::int64_t>(hidden, 1), rng);
    gamma1 = Tensor::full({dim}, cfg.layer_scale_init).set_requires_grad(true);
    gamma2 = Tensor::full({dim}, cfg.layer_scale_init).set_requires_grad(true);
  }

  Tensor forward(const Tensor& u, bool training, Rng* rng, std::int64_t n_windows) const {
    Tensor branch = kind == MixerKind::Mamba ? mamba.forward(norm1.forward(u))
                                             : attention.forward(norm1.forward(u));
    Tensor out = add(u, mul(gamma1, drop_path(branch, drop_path_p, training, rng, n_windows)));
    Tensor branch2 = mlp.forward(norm2.forward(out));
    return add(out, mul(gamma2, drop_path(branch2, drop_path_p, training, rng, n_windows)));
  }

  void collect(const std::string& prefix, ParamList& out) {
    norm1.collect(prefix + ".norm1", out);
    if (kind == MixerKind::Mamba) {
      mamba.collect(prefix + ".mamba", out);
    } else {
      attention.collect(prefix + ".attn", out);
    }
    register_param(out, prefix + ".gamma1", gamma1);
    norm2.collect(prefix + ".norm2", out);
    mlp.collect(prefix + ".mlp", out);
    register_param(out, prefix + ".gamma2", gamma2);
  }
};

// Two strided 3x3 conv + BN + ReLU stages; output is base_dim x H/4 x W/4
// (input reflect-padded up to multiples of 4 first).
struct PatchEmbed {
  Conv2dLayer conv1, conv2;
  BatchNorm2dLayer bn1, bn2;
  std::int64_t in_bands = 0;

  PatchEmbed() = default;
  PatchEmbed(std::int64_t in_bands_, std::int64_t dim, Rng& rng)
      : conv1(in_bands_, dim, 3, 2, 1, rng),
        conv2(dim, dim, 3, 2, 1, rng),
        bn1(dim),
        bn2(dim),
        in_bands(in_bands_) {}

  Tensor forward(const Tensor& image, bool training) {
    const Shape& s = image.shape();
    if (s.size() != 4) throw DimensionError("patch_embed expects [B,C,H,W]");
    if (s[1] != in_bands) {
      throw ConfigError("patch_embed configured for " + std::to_string(in_bands) +
                        " bands, input has " + std::to_string(s[1]));
    }
    if (s[2] < 4 || s[3] < 4) throw DimensionError("patch_embed input must be at least 4x4");
    std::int64_t th = (s[2] + 3) / 4 * 4, tw = (s[3] + 3) / 4 * 4;
    Tensor x = reflect_pad_to(image, th, tw);
    x = relu(bn1.forward(conv1.forward(x), training));
    x = relu(bn2.forward(conv2.forward(x), training));
    return x;
  }

  void collect(const std::string& prefix, ParamList& out) {
    conv1.collect(prefix + ".conv1", out);
    bn1.collect(prefix + ".bn1", out);
    conv2.collect(prefix + ".conv2", out);
    bn2.collect(prefix + ".bn2", out);
  }
};

// Strided 3x3 conv doubling channels, then BN.
struct Downsample {
  Conv2dLayer conv;
  BatchNorm2dLayer bn;

  Downsample() = default;
  Downsample(std::int64_t channels, Rng& rng) : conv(channels, 2 * channels, 3, 2, 1, rng), bn(2 * channels) {}

  Tensor forward(const Tensor& x, bool training) {
    if (x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0) {
      throw ContractError("internal invariant violation: downsample needs even dims, got " +
                          shape_str(x.shape()));
    }
    return bn.forward(conv.forward(x), training);
  }

  void collect(const std::string& prefix, ParamList& out) {
    conv.collect(prefix + ".conv", out);
    bn.collect(prefix + ".bn", out);
  }
};

struct BackboneOutput {
  Tensor features;  // [B, 8d, H/32, W/32] of the padded input
  std::int64_t valid_h = 0, valid_w = 0;  // cells covering the original extent
};

// Called after each stage; may return the features unchanged.
using PromptHook = std::function<Tensor(std::int64_t level, const Tensor& feat)>;

inline Tensor noop_prompt_hook(std::int64_t, const Tensor& feat) { return feat; }

// Hierarchical hybrid backbone. Stage l runs depth_l hybrid blocks over
// non-overlapping windows, applies the prompt hook, then downsamples.
struct Backbone {
  ModelConfig cfg;
  PatchEmbed patch_embed;
  std::vector<std::vector<HybridBlock>> stages;  // [level][block]
  std::vector<Downsample> downsamples;           // between levels

  Backbone() = default;
  Backbone(const ModelConfig& cfg_, Rng& rng) : cfg(cfg_) {
    cfg.validate();
    if (cfg.in_bands < 1) throw ConfigError("backbone requires in_bands >= 1");
    patch_embed = PatchEmbed(cfg.in_bands, cfg.base_dim, rng);
    std::int64_t total_blocks = 0;
    for (auto d : cfg.depths) total_blocks += d;
    std::int64_t block_counter = 0;
    for (std::int64_t l = 0; l < ModelConfig::kLevels; ++l) {
      std::vector<HybridBlock> blocks;
      for (std::int64_t i = 0; i < cfg.depths[l]; ++i) {
        double p = total_blocks > 1 ? cfg.drop_path_max * static_cast<double>(block_counter) /
                                          static_cast<double>(total_blocks - 1)
                                    : 0.0;
        blocks.emplace_back(mixer_kind(cfg.depths[l], i), cfg.level_dim(l), cfg.num_heads[l], cfg,
                            p, rng);
        ++block_counter;
      }
      stages.push_back(std::move(blocks));
      if (l < ModelConfig::kLevels - 1) downsamples.emplace_back(cfg.level_dim(l), rng);
    }
  }

  BackboneOutput forward(const Tensor& image, bool training, Rng* drop_rng,
                         const PromptHook& hook) {
    const Shape& s = image.shape();
    if (s.size() != 4) throw DimensionError("backbone expects [B,C,H,W]");
    std::int64_t orig_h = s[2], orig_w = s[3];
    // pad so every level halves exactly: H, W multiples of 4 * 2^3
    std::int64_t th = (orig_h + 31) / 32 * 32, tw = (orig_w + 31) / 32 * 32;
    Tensor x = reflect_pad_to(image, th, tw);
    x = patch_embed.forward(x, training);

    for (std::int64_t l = 0; l < ModelConfig::kLevels; ++l) {
      std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
      std::int64_t w = effective_window(cfg.window_sizes[l], H, W);
      std::int64_t n_windows = (H / w) * (W / w);
      Tensor seq = window_partition(x, w);
      for (const auto& block : stages[l]) {
        seq = block.forward(seq, training, drop_rng, n_windows);
      }
      x = window_reverse(seq, w, B, C, H, W);
      x = hook(l, x);
      if (l < ModelConfig::kLevels - 1) x = downsamples[l].forward(x, training);
    }
    BackboneOutput out;
    out.features = x;
    out.valid_h = std::min<std::int64_t>((orig_h + 31) / 32, x.dim(2));
    out.valid_w = std::min<std::int64_t>((orig_w + 31) / 32, x.dim(3));
    return out;
  }

  void collect(const std::string& prefix, ParamList& out) {
    patch_embed.collect(prefix + ".patch_embed", out);
    for (std::size_t l = 0; l < stages.size(); ++l) {
      for (std::size_t i = 0; i < stages[l].size(); ++i) {
        stages[l][i].collect(prefix + ".stage" + std::to_string(l) + ".block" + std::to_string(i),
                             out);
      }
      if (l + 1 < stages.size()) {
        downsamples[l].collect(prefix + ".downsample" + std::to_string(l), out);
      }
    }
  }
};

}  // namespace vphype
