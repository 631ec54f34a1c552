#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "vphype/errors.hpp"

namespace vphype {

using json = nlohmann::json;

namespace detail {

inline void reject_unknown_keys(const json& j, const std::set<std::string>& known,
                                const std::string& section) {
  if (!j.is_object()) throw ConfigError(section + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.count(it.key())) {
      throw ConfigError("unknown key '" + it.key() + "' in " + section);
    }
  }
}

template <typename T>
T get_or(const json& j, const std::string& key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("bad value for '" + key + "'");
  }
}

}  // namespace detail

// Architectural hyperparameters. Defaults mirror the MambaVision-T layout;
// tests use much smaller settings.
struct ModelConfig {
  std::int64_t in_bands = 0;     // 0: fill in from the scene at load time
  std::int64_t num_classes = 0;  // 0: fill in from the scene
  std::int64_t base_dim = 80;
  std::vector<std::int64_t> depths{1, 3, 8, 4};
  std::vector<std::int64_t> window_sizes{8, 8, 14, 7};
  std::vector<std::int64_t> num_heads{2, 4, 8, 16};
  double mlp_ratio = 4.0;
  std::int64_t d_state = 16;
  std::int64_t d_conv = 3;
  double expand = 1.0;
  double layer_scale_init = 1.0;
  double drop_path_max = 0.1;
  bool qk_norm = true;

  static constexpr std::int64_t kLevels = 4;

  std::int64_t level_dim(std::int64_t level) const { return base_dim << level; }

  std::int64_t inner_dim(std::int64_t level) const {
    return static_cast<std::int64_t>(expand * static_cast<double>(level_dim(level)) + 0.5);
  }

  void validate() const {
    if (in_bands < 0 || num_classes < 0) throw ConfigError("in_bands/num_classes must be >= 0");
    if (base_dim < 1) throw ConfigError("base_dim must be >= 1");
    if (depths.size() != kLevels || window_sizes.size() != kLevels || num_heads.size() != kLevels) {
      throw ConfigError("depths, window_sizes and num_heads must each have 4 entries");
    }
    for (std::int64_t l = 0; l < kLevels; ++l) {
      if (depths[l] < 1) throw ConfigError("depths[" + std::to_string(l) + "] must be >= 1");
      if (window_sizes[l] < 1) throw ConfigError("window_sizes[" + std::to_string(l) + "] must be >= 1");
      if (num_heads[l] < 1) throw ConfigError("num_heads[" + std::to_string(l) + "] must be >= 1");
      if (level_dim(l) % num_heads[l] != 0) {
        throw ConfigError("level " + std::to_string(l) + " dim " + std::to_string(level_dim(l)) +
                          " not divisible by num_heads " + std::to_string(num_heads[l]));
      }
      if (inner_dim(l) % 2 != 0) {
        throw ConfigError("expand * dim must be even at level " + std::to_string(l) +
                          ", got " + std::to_string(inner_dim(l)));
      }
    }
    if (d_state < 1 || d_conv < 1) throw ConfigError("d_state and d_conv must be >= 1");
    if (mlp_ratio <= 0.0) throw ConfigError("mlp_ratio must be positive");
    if (drop_path_max < 0.0 || drop_path_max >= 1.0) throw ConfigError("drop_path_max must be in [0,1)");
  }

  json to_json() const {
    json j;
    j["in_bands"] = in_bands;
    j["num_classes"] = num_classes;
    j["base_dim"] = base_dim;
    j["depths"] = depths;
    j["window_sizes"] = window_sizes;
    j["num_heads"] = num_heads;
    j["mlp_ratio"] = mlp_ratio;
    j["d_state"] = d_state;
    j["d_conv"] = d_conv;
    j["expand"] = expand;
    j["layer_scale_init"] = layer_scale_init;
    j["drop_path_max"] = drop_path_max;
    j["qk_norm"] = qk_norm;
    return j;
  }

  static ModelConfig from_json(const json& j) {
    detail::reject_unknown_keys(j,
                                {"in_bands", "num_classes", "base_dim", "depths", "window_sizes",
                                 "num_heads", "mlp_ratio", "d_state", "d_conv", "expand",
                                 "layer_scale_init", "drop_path_max", "qk_norm"},
                                "model config");
    ModelConfig c;
    c.in_bands = detail::get_or<std::int64_t>(j, "in_bands", c.in_bands);
    c.num_classes = detail::get_or<std::int64_t>(j, "num_classes", c.num_classes);
    c.base_dim = detail::get_or<std::int64_t>(j, "base_dim", c.base_dim);
    c.depths = detail::get_or<std::vector<std::int64_t>>(j, "depths", c.depths);
    c.window_sizes = detail::get_or<std::vector<std::int64_t>>(j, "window_sizes", c.window_sizes);
    c.num_heads = detail::get_or<std::vector<std::int64_t>>(j, "num_heads", c.num_heads);
    c.mlp_ratio = detail::get_or<double>(j, "mlp_ratio", c.mlp_ratio);
    c.d_state = detail::get_or<std::int64_t>(j, "d_state", c.d_state);
    c.d_conv = detail::get_or<std::int64_t>(j, "d_conv", c.d_conv);
    c.expand = detail::get_or<double>(j, "expand", c.expand);
    c.layer_scale_init = detail::get_or<double>(j, "layer_scale_init", c.layer_scale_init);
    c.drop_path_max = detail::get_or<double>(j, "drop_path_max", c.drop_path_max);
    c.qk_norm = detail::get_or<bool>(j, "qk_norm", c.qk_norm);
    return c;
  }

  bool operator==(const ModelConfig&) const = default;
};

// Prompt wiring: which modalities are live and where prompts are injected.
struct PromptConfig {
  bool enabled = true;
  bool visual_enabled = true;
  bool text_enabled = true;
  std::set<std::int64_t> inject_levels{1, 2};
  std::int64_t d_p = 0;  // 0: match the feature channels at the injection level
  std::int64_t s_p = 16;

  void validate() const {
    for (std::int64_t l : inject_levels) {
      if (l < 0 || l > 3) throw ConfigError("inject_levels entries must be in {0,1,2,3}");
    }
    if (d_p < 0) throw ConfigError("d_p must be >= 0");
    if (s_p < 1) throw ConfigError("s_p must be >= 1");
  }

  json to_json() const {
    json j;
    j["enabled"] = enabled;
    j["visual_enabled"] = visual_enabled;
    j["text_enabled"] = text_enabled;
    j["inject_levels"] = std::vector<std::int64_t>(inject_levels.begin(), inject_levels.end());
    j["d_p"] = d_p;
    j["s_p"] = s_p;
    return j;
  }

  static PromptConfig from_json(const json& j) {
    detail::reject_unknown_keys(
        j, {"enabled", "visual_enabled", "text_enabled", "inject_levels", "d_p", "s_p"},
        "prompt config");
    PromptConfig c;
    c.enabled = detail::get_or<bool>(j, "enabled", c.enabled);
    c.visual_enabled = detail::get_or<bool>(j, "visual_enabled", c.visual_enabled);
    c.text_enabled = detail::get_or<bool>(j, "text_enabled", c.text_enabled);
    if (j.contains("inject_levels")) {
      auto v = j.at("inject_levels").get<std::vector<std::int64_t>>();
      c.inject_levels = std::set<std::int64_t>(v.begin(), v.end());
    }
    c.d_p = detail::get_or<std::int64_t>(j, "d_p", c.d_p);
    c.s_p = detail::get_or<std::int64_t>(j, "s_p", c.s_p);
    return c;
  }

  bool operator==(const PromptConfig&) const = default;
};

struct TrainConfig {
  double lr = 1e-3;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t epochs = 50;
  std::int64_t batch_size = 32;
  std::uint64_t seed = 42;
  std::int64_t warmup_steps = -1;  // -1: 5% of total steps
  double grad_clip_norm = 1.0;
  std::int64_t val_subset = 512;  // per-epoch validation slice cap

  void validate() const {
    // lr 0 is allowed so frozen-parameter runs stay expressible
    if (lr < 0.0) throw ConfigError("lr must be >= 0");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
      throw ConfigError("betas must be in [0,1)");
    }
    if (eps <= 0.0) throw ConfigError("eps must be positive");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
  }

  json to_json() const {
    json j;
    j["lr"] = lr;
    j["weight_decay"] = weight_decay;
    j["beta1"] = beta1;
    j["beta2"] = beta2;
    j["eps"] = eps;
    j["epochs"] = epochs;
    j["batch_size"] = batch_size;
    j["seed"] = seed;
    j["warmup_steps"] = warmup_steps;
    j["grad_clip_norm"] = grad_clip_norm;
    j["val_subset"] = val_subset;
    return j;
  }

  static TrainConfig from_json(const json& j) {
    detail::reject_unknown_keys(j,
                                {"lr", "weight_decay", "beta1", "beta2", "eps", "epochs",
                                 "batch_size", "seed", "warmup_steps", "grad_clip_norm",
                                 "val_subset"},
                                "train config");
    TrainConfig c;
    c.lr = detail::get_or<double>(j, "lr", c.lr);
    c.weight_decay = detail::get_or<double>(j, "weight_decay", c.weight_decay);
    c.beta1 = detail::get_or<double>(j, "beta1", c.beta1);
    c.beta2 = detail::get_or<double>(j, "beta2", c.beta2);
    c.eps = detail::get_or<double>(j, "eps", c.eps);
    c.epochs = detail::get_or<std::int64_t>(j, "epochs", c.epochs);
    c.batch_size = detail::get_or<std::int64_t>(j, "batch_size", c.batch_size);
    c.seed = detail::get_or<std::uint64_t>(j, "seed", c.seed);
    c.warmup_steps = detail::get_or<std::int64_t>(j, "warmup_steps", c.warmup_steps);
    c.grad_clip_norm = detail::get_or<double>(j, "grad_clip_norm", c.grad_clip_norm);
    c.val_subset = detail::get_or<std::int64_t>(j, "val_subset", c.val_subset);
    return c;
  }

  bool operator==(const TrainConfig&) const = default;
};

struct SplitSpec {
  double train_fraction = 0.02;
  std::uint64_t seed = 0;
  std::int64_t per_class_min = 1;

  void validate() const {
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
      throw ConfigError("train_fraction must be in (0,1)");
    }
    if (per_class_min < 1) throw ConfigError("per_class_min must be >= 1");
  }

  json to_json() const {
    json j;
    j["train_fraction"] = train_fraction;
    j["seed"] = seed;
    j["per_class_min"] = per_class_min;
    return j;
  }

  static SplitSpec from_json(const json& j) {
    detail::reject_unknown_keys(j, {"train_fraction", "seed", "per_class_min"}, "split config");
    SplitSpec c;
    c.train_fraction = detail::get_or<double>(j, "train_fraction", c.train_fraction);
    c.seed = detail::get_or<std::uint64_t>(j, "seed", c.seed);
    c.per_class_min = detail::get_or<std::int64_t>(j, "per_class_min", c.per_class_min);
    return c;
  }

  bool operator==(const SplitSpec&) const = default;
};

// Top-level run document as read from the CLI --config file.
struct RunConfig {
  ModelConfig model;
  PromptConfig prompts;
  TrainConfig train;
  SplitSpec split;
  std::string scene_dir;
  std::string prompt_bank;  // empty: built-in single-task bank
  std::int64_t patch_size = 15;
  std::string out_dir;

  void validate() const {
    model.validate();
    prompts.validate();
    train.validate();
    split.validate();
    if (patch_size < 1 || patch_size % 2 == 0) {
      throw ConfigError("patch_size must be odd and >= 1, got " + std::to_string(patch_size));
    }
  }

  json to_json() const {
    json j;
    j["model"] = model.to_json();
    j["prompts"] = prompts.to_json();
    j["train"] = train.to_json();
    j["split"] = split.to_json();
    json d;
    d["scene_dir"] = scene_dir;
    d["prompt_bank"] = prompt_bank;
    d["patch_size"] = patch_size;
    j["data"] = d;
    j["out_dir"] = out_dir;
    return j;
  }

  static RunConfig from_json(const json& j) {
    detail::reject_unknown_keys(j, {"model", "prompts", "train", "split", "data", "out_dir"},
                                "run config");
    RunConfig c;
    if (j.contains("model")) c.model = ModelConfig::from_json(j.at("model"));
    if (j.contains("prompts")) c.prompts = PromptConfig::from_json(j.at("prompts"));
    if (j.contains("train")) c.train = TrainConfig::from_json(j.at("train"));
    if (j.contains("split")) c.split = SplitSpec::from_json(j.at("split"));
    if (j.contains("data")) {
      const json& d = j.at("data");
      detail::reject_unknown_keys(d, {"scene_dir", "prompt_bank", "patch_size"}, "data config");
      c.scene_dir = detail::get_or<std::string>(d, "scene_dir", "");
      c.prompt_bank = detail::get_or<std::string>(d, "prompt_bank", "");
      c.patch_size = detail::get_or<std::int64_t>(d, "patch_size", c.patch_size);
    }
    c.out_dir = detail::get_or<std::string>(j, "out_dir", "");
    return c;
  }
};

// Ablation arms from the prompt-modality study.
enum class Arm { Full, VisualOnly, TextOnly, NoPrompt };

inline std::string arm_name(Arm arm) {
  switch (arm) {
    case Arm::Full: return "full";
    case Arm::VisualOnly: return "visual_only";
    case Arm::TextOnly: return "text_only";
    case Arm::NoPrompt: return "no_prompt";
  }
  return "full";
}

inline Arm arm_from_name(const std::string& s) {
  if (s == "full") return Arm::Full;
  if (s == "visual_only") return Arm::VisualOnly;
  if (s == "text_only") return Arm::TextOnly;
  if (s == "no_prompt") return Arm::NoPrompt;
  throw ConfigError("unknown ablation arm '" + s + "' (want full|visual_only|text_only|no_prompt)");
}

// Applies an arm to the configured prompt wiring.
inline PromptConfig apply_arm(PromptConfig base, Arm arm) {
  switch (arm) {
    case Arm::Full: break;
    case Arm::VisualOnly: base.text_enabled = false; break;
    case Arm::TextOnly: base.visual_enabled = false; break;
    case Arm::NoPrompt: base.enabled = false; break;
  }
  return base;
}

}  // namespace vphype
