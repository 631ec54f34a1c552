#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "vphype/backbone.hpp"
#include "vphype/config.hpp"
#include "vphype/layers.hpp"
#include "vphype/ops.hpp"

namespace vphype {

constexpr std::int64_t kClipDim = 512;

// Precomputed text embeddings plus task names. The embedding matrix is frozen
// data, never a trainable parameter.
struct PromptBank {
  Tensor e_clip;  // [T, 512]
  std::vector<std::string> task_names;

  std::int64_t num_tasks() const { return e_clip.defined() ? e_clip.dim(0) : 0; }
};

// One-hot selection: row t of the bank per sample, bit-exact.
inline Tensor select_text_embedding(const PromptBank& bank, const std::vector<std::int64_t>& task_ids) {
  return gather_rows(bank.e_clip, task_ids);
}

// Soft generalization of the same operation: weights [B, T] against the bank.
inline Tensor select_text_embedding_soft(const PromptBank& bank, const Tensor& weights) {
  if (weights.ndim() != 2 || weights.dim(1) != bank.num_tasks()) {
    throw DimensionError("soft weights must be [B,T] with T = " + std::to_string(bank.num_tasks()));
  }
  return matmul(weights, bank.e_clip);
}

// Deterministic single-task bank for runs without precomputed embeddings.
inline PromptBank make_default_bank(std::int64_t num_tasks = 1, std::uint64_t seed = 7) {
  Rng rng(derive_seed(seed, 0xbadc0de));
  PromptBank bank;
  std::vector<double> data(static_cast<std::size_t>(num_tasks * kClipDim));
  for (std::int64_t t = 0; t < num_tasks; ++t) {
    double norm = 0.0;
    for (std::int64_t j = 0; j < kClipDim; ++j) {
      double v = rng.normal();
      data[t * kClipDim + j] = v;
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (std::int64_t j = 0; j < kClipDim; ++j) data[t * kClipDim + j] /= norm;
  }
  bank.e_clip = Tensor::from_data(std::move(data), {num_tasks, kClipDim});
  for (std::int64_t t = 0; t < num_tasks; ++t) bank.task_names.push_back("task" + std::to_string(t));
  return bank;
}

// Bank directory layout: prompts.meta.json + prompts.f32 (T*512 little-endian
// float32, row-major, no header). Values are widened to f64 on load.
inline PromptBank load_prompt_bank(const std::string& dir) {
  namespace fs = std::filesystem;
  fs::path meta_path = fs::path(dir) / "prompts.meta.json";
  fs::path data_path = fs::path(dir) / "prompts.f32";
  std::ifstream meta_in(meta_path);
  if (!meta_in) throw FormatError("prompt bank: cannot open " + meta_path.string());
  json meta;
  try {
    meta_in >> meta;
  } catch (const json::exception& e) {
    throw FormatError("prompt bank meta: " + std::string(e.what()));
  }
  if (!meta.contains("T") || !meta["T"].is_number_integer()) {
    throw FormatError("prompt bank meta: missing integer field 'T'");
  }
  std::int64_t T = meta["T"].get<std::int64_t>();
  if (T <= 0) throw FormatError("prompt bank meta: T must be >= 1, got " + std::to_string(T));
  std::int64_t dim = meta.value("dim", kClipDim);
  if (dim != kClipDim) {
    throw FormatError("prompt bank meta: dim must be " + std::to_string(kClipDim) + ", got " +
                      std::to_string(dim));
  }
  std::vector<std::string> names;
  if (meta.contains("task_names")) names = meta["task_names"].get<std::vector<std::string>>();
  if (!names.empty() && static_cast<std::int64_t>(names.size()) != T) {
    throw FormatError("prompt bank meta: task_names length " + std::to_string(names.size()) +
                      " does not match T=" + std::to_string(T));
  }
  if (names.empty()) {
    for (std::int64_t t = 0; t < T; ++t) names.push_back("task" + std::to_string(t));
  }

  std::ifstream data_in(data_path, std::ios::binary);
  if (!data_in) throw FormatError("prompt bank: cannot open " + data_path.string());
  data_in.seekg(0, std::ios::end);
  std::int64_t actual = static_cast<std::int64_t>(data_in.tellg());
  std::int64_t expected = T * kClipDim * 4;
  if (actual != expected) {
    throw FormatError("prompt bank payload: expected " + std::to_string(expected) + " bytes, got " +
                      std::to_string(actual));
  }
  data_in.seekg(0);
  std::vector<float> raw(static_cast<std::size_t>(T * kClipDim));
  data_in.read(reinterpret_cast<char*>(raw.data()), expected);
  if (!data_in) throw FormatError("prompt bank payload: short read");

  std::vector<double> wide(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (!std::isfinite(raw[i])) {
      throw FormatError("prompt bank payload: non-finite value at byte offset " +
                        std::to_string(i * 4));
    }
    wide[i] = static_cast<double>(raw[i]);
  }
  PromptBank bank;
  bank.e_clip = Tensor::from_data(std::move(wide), {T, kClipDim});
  bank.task_names = std::move(names);
  return bank;
}

inline void write_prompt_bank(const std::string& dir, const PromptBank& bank) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  json meta;
  meta["T"] = bank.num_tasks();
  meta["dim"] = kClipDim;
  meta["task_names"] = bank.task_names;
  std::ofstream meta_out(fs::path(dir) / "prompts.meta.json");
  meta_out << meta.dump(2) << "\n";

  std::vector<float> raw(bank.e_clip.data().size());
  for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = static_cast<float>(bank.e_clip.data()[i]);
  std::ofstream data_out(fs::path(dir) / "prompts.f32", std::ios::binary);
  data_out.write(reinterpret_cast<const char*>(raw.data()),
                 static_cast<std::streamsize>(raw.size() * 4));
}

// Text Conditional Spatial Prompt: cross-attention between a task-conditioned
// text map (query) and a learnable spatial visual prompt (key/value), refined
// by a gated feed-forward and projected to the backbone feature geometry.
struct TcspModule {
  std::int64_t d_p = 0, s_p = 0, c_f = 0;
  LinearLayer clip_proj;                   // 512 -> d_p (text pathway)
  Tensor visual_prompt;                    // [1, d_p, S_p, S_p]
  Tensor log_tau;                          // [1]; tau = exp(log_tau) > 0
  DepthwiseConv2dLayer p_q, p_k, p_v;      // lightweight projections
  DepthwiseConv2dLayer ffn_gate, ffn_val;  // gated feed-forward
  Conv2dLayer ffn_pw;                      // pointwise mix
  Conv2dLayer proj_out;                    // 3x3, d_p -> C_f

  TcspModule() = default;
  TcspModule(std::int64_t d_p_, std::int64_t s_p_, std::int64_t c_f_, Rng& rng)
      : d_p(d_p_), s_p(s_p_), c_f(c_f_) {
    clip_proj = LinearLayer(kClipDim, d_p, rng);
    // visual prompt scaled conservatively (0.001x) at init
    visual_prompt = Tensor::randn({1, d_p, s_p, s_p}, rng, 1.0);
    for (auto& v : visual_prompt.mutable_data()) v *= 0.001;
    visual_prompt.set_requires_grad(true);
    log_tau = Tensor::zeros({1}).set_requires_grad(true);
    p_q = DepthwiseConv2dLayer(d_p, 3, 1, rng);
    p_k = DepthwiseConv2dLayer(d_p, 3, 1, rng);
    p_v = DepthwiseConv2dLayer(d_p, 3, 1, rng);
    ffn_gate = DepthwiseConv2dLayer(d_p, 3, 1, rng);
    ffn_val = DepthwiseConv2dLayer(d_p, 3, 1, rng);
    ffn_pw = Conv2dLayer(d_p, d_p, 1, 1, 0, rng);
    proj_out = Conv2dLayer(d_p, c_f, 3, 1, 1, rng);
  }

  // e512: [B, 512] task-conditioned text vectors (ignored when text is off).
  Tensor forward(const Tensor& e512, std::int64_t batch, std::int64_t h_f, std::int64_t w_f,
                 bool visual_on, bool text_on) const {
    Tensor e;  // [B, d_p]
    if (text_on) {
      e = clip_proj.forward(e512);
    } else {
      // frozen unit constant: the query carries geometry, no task semantics
      e = Tensor::full({batch, d_p}, 1.0);
    }
    Tensor text_map = interpolate(reshape(e, {batch, d_p, 1, 1}), s_p, s_p, InterpMode::Bilinear);
    Tensor pv = visual_on ? visual_prompt : Tensor::zeros({1, d_p, s_p, s_p});

    Tensor q = p_q.forward(text_map);  // [B, d_p, S, S]
    Tensor k = p_k.forward(pv);        // [1, d_p, S, S]
    Tensor v = p_v.forward(pv);

    std::int64_t tokens = s_p * s_p;
    auto to_seq = [&](const Tensor& t) {
      std::int64_t b = t.dim(0);
      return reshape(permute(t, {0, 2, 3, 1}), {b, tokens, d_p});
    };
    Tensor q_seq = to_seq(q), k_seq = to_seq(k), v_seq = to_seq(v);
    Tensor scores = matmul(q_seq, transpose_last2(k_seq));  // [B, S^2, S^2]
    Tensor denom = mul_scalar(exp_op(log_tau), std::sqrt(static_cast<double>(d_p)));
    Tensor attn = softmax(div(scores, denom), 2);
    Tensor u = matmul(attn, v_seq);  // [B, S^2, d_p]
    Tensor u_sp = permute(reshape(u, {batch, s_p, s_p, d_p}), {0, 3, 1, 2});

    Tensor gated = mul(ffn_val.forward(u_sp), gelu(ffn_gate.forward(u_sp)));
    Tensor refined = ffn_pw.forward(gated);
    return proj_out.forward(interpolate(refined, h_f, w_f, InterpMode::Bilinear));
  }

  // Attention matrix alone, for row-stochasticity checks.
  Tensor attention_matrix(const Tensor& e512, std::int64_t batch, bool visual_on, bool text_on,
                          double tau_override = 0.0) const {
    Tensor e = text_on ? clip_proj.forward(e512) : Tensor::full({batch, d_p}, 1.0);
    Tensor text_map = interpolate(reshape(e, {batch, d_p, 1, 1}), s_p, s_p, InterpMode::Bilinear);
    Tensor pv = visual_on ? visual_prompt : Tensor::zeros({1, d_p, s_p, s_p});
    Tensor q = p_q.forward(text_map);
    Tensor k = p_k.forward(pv);
    std::int64_t tokens = s_p * s_p;
    auto to_seq = [&](const Tensor& t) {
      return reshape(permute(t, {0, 2, 3, 1}), {t.dim(0), tokens, d_p});
    };
    Tensor scores = matmul(to_seq(q), transpose_last2(to_seq(k)));
    double tau = tau_override > 0.0 ? tau_override : std::exp(log_tau.at(0));
    return softmax(mul_scalar(scores, 1.0 / (std::sqrt(static_cast<double>(d_p)) * tau)), 2);
  }

  void collect(const std::string& prefix, ParamList& out) {
    clip_proj.collect(prefix + ".clip_proj", out);
    register_param(out, prefix + ".visual_prompt", visual_prompt);
    register_param(out, prefix + ".log_tau", log_tau);
    p_q.collect(prefix + ".p_q", out);
    p_k.collect(prefix + ".p_k", out);
    p_v.collect(prefix + ".p_v", out);
    ffn_gate.collect(prefix + ".ffn_gate", out);
    ffn_val.collect(prefix + ".ffn_val", out);
    ffn_pw.collect(prefix + ".ffn_pw", out);
    proj_out.collect(prefix + ".proj_out", out);
  }
};

// Channel-concat the prompt with the features, mix with one transformer block
// over the spatial token sequence, project back to C_f with a 1x1 conv.
struct PromptFusion {
  std::int64_t c_f = 0, fused_dim = 0;
  LayerNormLayer norm1, norm2;
  AttentionMixer attn;
  Mlp mlp;
  Conv2dLayer proj_1x1;

  PromptFusion() = default;
  PromptFusion(std::int64_t c_f_, Rng& rng) : c_f(c_f_), fused_dim(2 * c_f_) {
    std::int64_t heads = fused_dim % 4 == 0 ? 4 : 2;
    norm1 = LayerNormLayer(fused_dim);
    norm2 = LayerNormLayer(fused_dim);
    attn = AttentionMixer(fused_dim, heads, /*qk_norm=*/false, rng);
    mlp = Mlp(fused_dim, 2 * fused_dim, rng);  // mlp_ratio 2
    proj_1x1 = Conv2dLayer(fused_dim, c_f_, 1, 1, 0, rng);
  }

  Tensor forward(const Tensor& feat, const Tensor& prompt) const {
    if (feat.shape() != prompt.shape()) {
      throw DimensionError("prompt fusion shape mismatch: " + shape_str(feat.shape()) + " vs " +
                           shape_str(prompt.shape()));
    }
    std::int64_t B = feat.dim(0), H = feat.dim(2), W = feat.dim(3);
    Tensor cat = concat({feat, prompt}, 1);  // [B, 2C, H, W]
    Tensor tokens = reshape(permute(cat, {0, 2, 3, 1}), {B, H * W, fused_dim});
    tokens = add(tokens, attn.forward(norm1.forward(tokens)));
    tokens = add(tokens, mlp.forward(norm2.forward(tokens)));
    Tensor sp = permute(reshape(tokens, {B, H, W, fused_dim}), {0, 3, 1, 2});
    return proj_1x1.forward(sp);
  }

  void collect(const std::string& prefix, ParamList& out) {
    norm1.collect(prefix + ".norm1", out);
    attn.collect(prefix + ".attn", out);
    norm2.collect(prefix + ".norm2", out);
    mlp.collect(prefix + ".mlp", out);
    proj_1x1.collect(prefix + ".proj_1x1", out);
  }
};

// Per-injection-level prompt stack plus the hook the backbone calls between
// stages. Disabled levels pass features through untouched.
struct PromptSystem {
  PromptConfig cfg;
  PromptBank bank;
  std::map<std::int64_t, TcspModule> tcsp;
  std::map<std::int64_t, PromptFusion> fusion;

  PromptSystem() = default;
  PromptSystem(const PromptConfig& cfg_, PromptBank bank_, const ModelConfig& model_cfg, Rng& rng)
      : cfg(cfg_), bank(std::move(bank_)) {
    cfg.validate();
    for (std::int64_t level : cfg.inject_levels) {
      std::int64_t c_f = model_cfg.level_dim(level);
      std::int64_t d_p = cfg.d_p > 0 ? cfg.d_p : c_f;
      tcsp.emplace(level, TcspModule(d_p, cfg.s_p, c_f, rng));
      fusion.emplace(level, PromptFusion(c_f, rng));
    }
  }

  bool active_at(std::int64_t level) const { return cfg.enabled && cfg.inject_levels.count(level) > 0; }

  Tensor apply(std::int64_t level, const Tensor& feat, const std::vector<std::int64_t>& task_ids) const {
    if (!active_at(level)) return feat;
    std::int64_t B = feat.dim(0), H = feat.dim(2), W = feat.dim(3);
    Tensor e512;
    if (cfg.text_enabled) {
      for (std::int64_t t : task_ids) {
        if (t < 0 || t >= bank.num_tasks()) {
          throw TaskIdError("task id " + std::to_string(t) + " out of range [0," +
                            std::to_string(bank.num_tasks()) + ")");
        }
      }
      e512 = select_text_embedding(bank, task_ids);
    }
    const TcspModule& t = tcsp.at(level);
    Tensor prompt = t.forward(e512, B, H, W, cfg.visual_enabled, cfg.text_enabled);
    return fusion.at(level).forward(feat, prompt);
  }

  void collect(const std::string& prefix, ParamList& out) {
    for (auto& [level, module] : tcsp) {
      module.collect(prefix + ".level" + std::to_string(level) + ".tcsp", out);
    }
    for (auto& [level, module] : fusion) {
      module.collect(prefix + ".level" + std::to_string(level) + ".fusion", out);
    }
  }
};

}  // namespace vphype
