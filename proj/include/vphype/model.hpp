#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "vphype/backbone.hpp"
#include "vphype/config.hpp"
#include "vphype/prompts.hpp"

namespace vphype {

// Final BN, spatial mean over the valid cells, linear classifier.
struct ClassifyHead {
  BatchNorm2dLayer bn;
  LinearLayer fc;

  ClassifyHead() = default;
  ClassifyHead(std::int64_t dim, std::int64_t num_classes, Rng& rng)
      : bn(dim), fc(dim, num_classes, rng) {}

  Tensor forward(const BackboneOutput& out, bool training) {
    Tensor x = bn.forward(out.features, training);
    if (out.valid_h < x.dim(2) || out.valid_w < x.dim(3)) {
      x = slice(slice(x, 2, 0, out.valid_h), 3, 0, out.valid_w);
    }
    Tensor pooled = mean_axis(mean_axis(x, 3), 2);  // [B, C]
    return fc.forward(pooled);
  }

  void collect(const std::string& prefix, ParamList& out) {
    bn.collect(prefix + ".bn", out);
    fc.collect(prefix + ".fc", out);
  }
};

// The full classifier: backbone with prompt hooks plus the pooling head.
struct VpHypeModel {
  ModelConfig cfg;
  PromptConfig pcfg;
  Backbone backbone;
  PromptSystem prompts;
  ClassifyHead head;

  VpHypeModel() = default;

  VpHypeModel(const ModelConfig& cfg_, const PromptConfig& pcfg_, PromptBank bank,
              std::uint64_t init_seed)
      : cfg(cfg_), pcfg(pcfg_) {
    cfg.validate();
    pcfg.validate();
    if (cfg.num_classes < 1) throw ConfigError("model requires num_classes >= 1");
    Rng rng(derive_seed(init_seed, 1));
    backbone = Backbone(cfg, rng);
    prompts = PromptSystem(pcfg, std::move(bank), cfg, rng);
    head = ClassifyHead(cfg.level_dim(3), cfg.num_classes, rng);
  }

  // images: [B, C, H, W]; task_ids: one per sample (empty: all task 0).
  Tensor forward(const Tensor& images, const std::vector<std::int64_t>& task_ids, bool training,
                 Rng* drop_rng = nullptr) {
    std::vector<std::int64_t> ids = task_ids;
    if (ids.empty()) ids.assign(static_cast<std::size_t>(images.dim(0)), 0);
    if (static_cast<std::int64_t>(ids.size()) != images.dim(0)) {
      throw TaskIdError("task id count " + std::to_string(ids.size()) + " does not match batch " +
                        std::to_string(images.dim(0)));
    }
    PromptHook hook = [this, &ids](std::int64_t level, const Tensor& feat) {
      return prompts.apply(level, feat, ids);
    };
    BackboneOutput out = backbone.forward(images, training, drop_rng, hook);
    return head.forward(out, training);
  }

  ParamList parameters() {
    ParamList out;
    backbone.collect("backbone", out);
    prompts.collect("prompts", out);
    head.collect("head", out);
    return out;
  }

  // Parameters updated by the optimizer under the current prompt wiring.
  // Disabled modalities contribute no trainable parameters, so they can never
  // receive updates (including weight decay).
  ParamList trainable_parameters() {
    ParamList all = parameters();
    ParamList out;
    for (auto& p : all) {
      bool is_prompt = p.name.rfind("prompts.", 0) == 0;
      if (is_prompt) {
        if (!pcfg.enabled) continue;
        if (!pcfg.visual_enabled && p.name.find(".visual_prompt") != std::string::npos) continue;
        if (!pcfg.text_enabled && p.name.find(".clip_proj") != std::string::npos) continue;
      }
      out.push_back(p);
    }
    return out;
  }

  // Parameter counts per top-level module, deterministic ordering.
  std::map<std::string, std::int64_t> parameter_counts() {
    std::map<std::string, std::int64_t> counts;
    for (auto& p : parameters()) {
      std::string group = p.name.substr(0, p.name.find('.'));
      if (group == "backbone") {
        // split out the backbone submodules for a more useful report
        auto second = p.name.find('.', 9);
        group = p.name.substr(0, second == std::string::npos ? p.name.size() : second);
      }
      counts[group] += p.tensor.numel();
    }
    return counts;
  }

  std::int64_t total_parameters() {
    std::int64_t total = 0;
    for (auto& p : parameters()) total += p.tensor.numel();
    return total;
  }
};

}  // namespace vphype
