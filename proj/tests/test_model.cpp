#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "test_util.hpp"
#include "vphype/gradcheck.hpp"
#include "vphype/model.hpp"

using namespace vphype;
using vptest::bit_identical;

namespace {

ModelConfig tiny_model_config(std::int64_t bands = 4, std::int64_t classes = 3,
                              std::int64_t base_dim = 8) {
  ModelConfig cfg;
  cfg.in_bands = bands;
  cfg.num_classes = classes;
  cfg.base_dim = base_dim;
  cfg.depths = {1, 1, 1, 1};
  cfg.window_sizes = {8, 8, 14, 7};
  cfg.num_heads = {2, 2, 2, 2};
  cfg.mlp_ratio = 2.0;
  cfg.d_state = 4;
  cfg.drop_path_max = 0.0;
  return cfg;
}

PromptConfig tiny_prompt_config() {
  PromptConfig pcfg;
  pcfg.inject_levels = {1, 2};
  pcfg.s_p = 4;
  return pcfg;
}

}  // namespace

TEST(ClassifyHead, ConstantFeatureMapPoolsToChannelValue) {
  Rng rng(1);
  ClassifyHead head(4, 3, rng);
  // bypass BN by fixing unit running stats in eval mode
  head.bn.state.initialized = true;
  std::vector<double> data;
  for (std::int64_t c = 0; c < 4; ++c) {
    for (int i = 0; i < 4; ++i) data.push_back(static_cast<double>(c) + 1.0);
  }
  BackboneOutput out;
  out.features = Tensor::from_data(std::move(data), {1, 4, 2, 2});
  out.valid_h = 2;
  out.valid_w = 2;
  // zero classifier: logits = bias for every sample
  for (auto& v : head.fc.weight.mutable_data()) v = 0.0;
  head.fc.bias.mutable_data() = {0.5, -1.0, 2.0};
  Tensor logits = head.forward(out, false);
  EXPECT_NEAR(logits.at(0), 0.5, 1e-12);
  EXPECT_NEAR(logits.at(1), -1.0, 1e-12);
  EXPECT_NEAR(logits.at(2), 2.0, 1e-12);
}

TEST(ClassifyHead, SingleCellPoolingIsIdentity) {
  Rng rng(2);
  ClassifyHead head(3, 2, rng);
  head.bn.state.initialized = true;  // unit stats
  BackboneOutput out;
  out.features = Tensor::from_data({1.0, 2.0, 3.0}, {1, 3, 1, 1});
  out.valid_h = 1;
  out.valid_w = 1;
  // identity-ish classifier to observe the pooled vector
  auto& w = head.fc.weight.mutable_data();
  std::fill(w.begin(), w.end(), 0.0);
  w[0 * 2 + 0] = 1.0;
  w[2 * 2 + 1] = 1.0;
  Tensor logits = head.forward(out, false);
  double rs = 1.0 / std::sqrt(1.0 + 1e-5);
  EXPECT_NEAR(logits.at(0), 1.0 * rs, 1e-9);
  EXPECT_NEAR(logits.at(1), 3.0 * rs, 1e-9);
}

TEST(Model, NoPromptForwardIsBitIdenticalToBackboneOnly) {
  ModelConfig cfg = tiny_model_config();
  PromptConfig pcfg = tiny_prompt_config();
  VpHypeModel with_prompts(cfg, apply_arm(pcfg, Arm::NoPrompt), make_default_bank(1), 7);

  Rng data_rng(3);
  Tensor img = Tensor::randn({2, 4, 16, 16}, data_rng);
  Tensor logits = with_prompts.forward(img, {}, true, nullptr);

  // backbone-only reference: same seed, same modules, no-op hook
  VpHypeModel reference(cfg, apply_arm(pcfg, Arm::NoPrompt), make_default_bank(1), 7);
  BackboneOutput out = reference.backbone.forward(img, true, nullptr, noop_prompt_hook);
  Tensor ref_logits = reference.head.forward(out, true);
  EXPECT_TRUE(bit_identical(logits, ref_logits));
}

TEST(Model, TrainableParameterSetsShrinkPerArm) {
  ModelConfig cfg = tiny_model_config();
  PromptConfig pcfg = tiny_prompt_config();

  auto count = [&](Arm arm) {
    VpHypeModel m(cfg, apply_arm(pcfg, arm), make_default_bank(1), 7);
    std::int64_t total = 0;
    for (auto& p : m.trainable_parameters()) total += p.tensor.numel();
    return total;
  };
  std::int64_t full = count(Arm::Full);
  std::int64_t visual_only = count(Arm::VisualOnly);
  std::int64_t text_only = count(Arm::TextOnly);
  std::int64_t no_prompt = count(Arm::NoPrompt);
  EXPECT_LT(no_prompt, text_only);
  EXPECT_LT(no_prompt, visual_only);
  EXPECT_LT(visual_only, full);
  EXPECT_LT(text_only, full);

  // disabled modalities are excluded by name
  VpHypeModel m(cfg, apply_arm(pcfg, Arm::TextOnly), make_default_bank(1), 7);
  for (auto& p : m.trainable_parameters()) {
    EXPECT_EQ(p.name.find(".visual_prompt"), std::string::npos);
  }
  VpHypeModel mv(cfg, apply_arm(pcfg, Arm::VisualOnly), make_default_bank(1), 7);
  for (auto& p : mv.trainable_parameters()) {
    EXPECT_EQ(p.name.find(".clip_proj"), std::string::npos);
  }
}

TEST(Model, PromptParametersReceiveGradientsWhenEnabled) {
  ModelConfig cfg = tiny_model_config();
  PromptConfig pcfg = tiny_prompt_config();
  VpHypeModel m(cfg, apply_arm(pcfg, Arm::Full), make_default_bank(1), 7);
  Rng data_rng(4);
  Tensor img = Tensor::randn({2, 4, 8, 8}, data_rng);
  Tensor logits = m.forward(img, {}, true, nullptr);
  Tensor loss = cross_entropy(logits, {0, 2});
  Tape tape(loss);
  tape.backward();

  auto grad_mass = [&](const std::string& needle) {
    double mass = 0.0;
    for (auto& p : m.parameters()) {
      if (p.name.find(needle) != std::string::npos) {
        for (double v : p.tensor.grad()) mass += std::abs(v);
      }
    }
    return mass;
  };
  EXPECT_GT(grad_mass(".visual_prompt"), 0.0);
  EXPECT_GT(grad_mass(".clip_proj.weight"), 0.0);
  EXPECT_GT(grad_mass(".log_tau"), 0.0);
  EXPECT_GT(grad_mass("fusion"), 0.0);
}

TEST(Model, ParameterNamesAreUniqueAndDeterministic) {
  ModelConfig cfg = tiny_model_config();
  PromptConfig pcfg = tiny_prompt_config();
  VpHypeModel a(cfg, pcfg, make_default_bank(1), 7);
  VpHypeModel b(cfg, pcfg, make_default_bank(1), 7);
  auto pa = a.parameters();
  auto pb = b.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  std::set<std::string> names;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].name, pb[i].name);
    EXPECT_TRUE(names.insert(pa[i].name).second) << "duplicate " << pa[i].name;
    EXPECT_EQ(pa[i].tensor.data(), pb[i].tensor.data()) << pa[i].name;
  }
}

TEST(Model, TinyEndToEndGradientCheck) {
  // d=8, depths [1,1,1,1], 8x8 input, prompts enabled; loss = sum of logits
  ModelConfig cfg = tiny_model_config(3, 3, 8);
  PromptConfig pcfg = tiny_prompt_config();
  VpHypeModel m(cfg, pcfg, make_default_bank(2), 11);
  Rng data_rng(5);
  Tensor img = Tensor::randn({1, 3, 8, 8}, data_rng);
  std::vector<std::int64_t> tasks{1};

  auto loss_fn = [&]() { return sum_all(m.forward(img, tasks, true, nullptr)); };
  std::vector<Tensor> params;
  for (auto& p : m.trainable_parameters()) params.push_back(p.tensor);
  Rng pick(17);
  double err = grad_check_params(loss_fn, params, 3, pick);
  EXPECT_LT(err, 1e-5);
}

TEST(Model, ParameterCountReportIsStable) {
  ModelConfig cfg = tiny_model_config();
  PromptConfig pcfg = tiny_prompt_config();
  VpHypeModel a(cfg, pcfg, make_default_bank(1), 7);
  VpHypeModel b(cfg, pcfg, make_default_bank(1), 7);
  EXPECT_EQ(a.parameter_counts(), b.parameter_counts());
  EXPECT_EQ(a.total_parameters(), b.total_parameters());
  EXPECT_GT(a.total_parameters(), 0);
}
