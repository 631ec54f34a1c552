#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "test_util.hpp"
#include "vphype/trainer.hpp"

using namespace vphype;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_cfg(std::int64_t bands, std::int64_t classes) {
  ModelConfig cfg;
  cfg.in_bands = bands;
  cfg.num_classes = classes;
  cfg.base_dim = 8;
  cfg.depths = {1, 1, 1, 1};
  cfg.num_heads = {2, 2, 2, 2};
  cfg.mlp_ratio = 2.0;
  cfg.d_state = 4;
  cfg.drop_path_max = 0.1;
  return cfg;
}

PromptConfig tiny_pcfg() {
  PromptConfig pcfg;
  pcfg.inject_levels = {1};
  pcfg.s_p = 4;
  return pcfg;
}

fs::path temp_file(const std::string& tag) {
  fs::path dir = fs::temp_directory_path() / "vphype_trainer";
  fs::create_directories(dir);
  return dir / tag;
}

}  // namespace

TEST(AdamW, HandComputedFirstStep) {
  TrainConfig cfg;
  cfg.lr = 1e-3;
  cfg.weight_decay = 0.0;
  Tensor theta = Tensor::from_data({0.0}, {1});
  AdamMoments mom;
  adamw_step(theta, {1.0}, mom, 1, cfg.lr, cfg);
  // m_hat = 1, v_hat = 1 -> delta = -lr / (1 + eps)
  EXPECT_NEAR(theta.at(0), -1e-3 / (1.0 + 1e-8), 1e-15);
}

TEST(AdamW, ZeroGradZeroDecayLeavesParamsUnchanged) {
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  Tensor theta = Tensor::from_data({1.5, -2.5}, {2});
  AdamMoments mom;
  for (int t = 1; t <= 5; ++t) adamw_step(theta, {0.0, 0.0}, mom, t, cfg.lr, cfg);
  EXPECT_DOUBLE_EQ(theta.at(0), 1.5);
  EXPECT_DOUBLE_EQ(theta.at(1), -2.5);
}

TEST(AdamW, DecoupledDecayActsAloneOnZeroGrad) {
  TrainConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.5;
  Tensor theta = Tensor::from_data({2.0}, {1});
  AdamMoments mom;
  adamw_step(theta, {0.0}, mom, 1, cfg.lr, cfg);
  EXPECT_NEAR(theta.at(0), 2.0 * (1.0 - 0.1 * 0.5), 1e-15);
}

TEST(AdamW, QuadraticLossDescends) {
  // loss = 0.5 * ||theta||^2, gradient = theta
  TrainConfig cfg;
  cfg.lr = 0.05;
  cfg.weight_decay = 0.0;
  Tensor theta = Tensor::from_data({3.0, -4.0}, {2});
  AdamMoments mom;
  auto loss_of = [&]() { return 0.5 * (theta.at(0) * theta.at(0) + theta.at(1) * theta.at(1)); };
  double before = loss_of();
  adamw_step(theta, theta.data(), mom, 1, cfg.lr, cfg);
  EXPECT_LT(loss_of(), before);
}

TEST(Schedule, WarmupThenCosineToZero) {
  TrainConfig cfg;
  cfg.lr = 1.0;
  cfg.warmup_steps = 10;
  EXPECT_NEAR(lr_at_step(cfg, 0, 100), 0.1, 1e-12);
  EXPECT_NEAR(lr_at_step(cfg, 9, 100), 1.0, 1e-12);
  EXPECT_NEAR(lr_at_step(cfg, 10, 100), 1.0, 1e-12);
  EXPECT_NEAR(lr_at_step(cfg, 99, 100), 1.0 * 0.5 * (1.0 + std::cos(3.14159265358979323846 * 89.0 / 90.0)),
              1e-12);
  // midpoint of the decay span sits at lr/2
  EXPECT_NEAR(lr_at_step(cfg, 55, 100), 0.5, 1e-12);
}

TEST(Train, ZeroLearningRateFreezesParametersBitExactly) {
  HsiScene scene = make_synthetic_scene(3, 6, 16, 16, 4.0, 31);
  SplitSpec sspec;
  sspec.train_fraction = 0.2;
  sspec.seed = 1;
  SceneSplit split = stratified_split(scene, sspec);

  VpHypeModel model(tiny_cfg(6, 3), tiny_pcfg(), make_default_bank(1), 5);
  std::map<std::string, std::vector<double>> before;
  for (auto& p : model.parameters()) before[p.name] = p.tensor.data();

  TrainConfig tcfg;
  tcfg.lr = 0.0;
  tcfg.epochs = 2;
  tcfg.batch_size = 16;
  tcfg.weight_decay = 0.05;  // decay is lr-scaled, so it must also be inert
  tcfg.val_subset = 8;
  train(model, scene, split, tcfg, 9);
  for (auto& p : model.parameters()) {
    EXPECT_EQ(before[p.name], p.tensor.data()) << p.name;
  }
}

TEST(Train, IdenticalSeedsProduceBitIdenticalLossCurves) {
  HsiScene scene = make_synthetic_scene(3, 6, 16, 16, 4.0, 32);
  SplitSpec sspec;
  sspec.train_fraction = 0.2;
  sspec.seed = 2;
  SceneSplit split = stratified_split(scene, sspec);

  TrainConfig tcfg;
  tcfg.lr = 1e-3;
  tcfg.epochs = 2;
  tcfg.batch_size = 16;
  tcfg.val_subset = 16;
  tcfg.seed = 77;

  VpHypeModel m1(tiny_cfg(6, 3), tiny_pcfg(), make_default_bank(1), 5);
  TrainResult r1 = train(m1, scene, split, tcfg, 9);
  VpHypeModel m2(tiny_cfg(6, 3), tiny_pcfg(), make_default_bank(1), 5);
  TrainResult r2 = train(m2, scene, split, tcfg, 9);

  ASSERT_EQ(r1.epochs.size(), r2.epochs.size());
  for (std::size_t i = 0; i < r1.epochs.size(); ++i) {
    EXPECT_EQ(r1.epochs[i].loss, r2.epochs[i].loss);      // bit-exact
    EXPECT_EQ(r1.epochs[i].val_oa, r2.epochs[i].val_oa);  // integer-count ratio
  }
  for (std::size_t i = 0; i < m1.parameters().size(); ++i) {
    EXPECT_EQ(m1.parameters()[i].tensor.data(), m2.parameters()[i].tensor.data());
  }
}

TEST(Train, DisabledModalityParametersReceiveNoUpdates) {
  HsiScene scene = make_synthetic_scene(3, 6, 16, 16, 4.0, 33);
  SplitSpec sspec;
  sspec.train_fraction = 0.2;
  sspec.seed = 3;
  SceneSplit split = stratified_split(scene, sspec);

  VpHypeModel model(tiny_cfg(6, 3), apply_arm(tiny_pcfg(), Arm::TextOnly), make_default_bank(1), 5);
  std::vector<double> pv_before;
  for (auto& p : model.parameters()) {
    if (p.name.find(".visual_prompt") != std::string::npos) pv_before = p.tensor.data();
  }
  TrainConfig tcfg;
  tcfg.lr = 1e-2;
  tcfg.weight_decay = 0.1;
  tcfg.epochs = 1;
  tcfg.batch_size = 16;
  tcfg.val_subset = 0;
  train(model, scene, split, tcfg, 9);
  bool checked = false;
  for (auto& p : model.parameters()) {
    if (p.name.find(".visual_prompt") != std::string::npos) {
      EXPECT_EQ(pv_before, p.tensor.data());  // exactly zero updates
      checked = true;
    }
  }
  EXPECT_TRUE(checked);
}

TEST(Checkpoint, RoundTripPreservesForwardBitExactly) {
  HsiScene scene = make_synthetic_scene(3, 6, 16, 16, 4.0, 34);
  SplitSpec sspec;
  sspec.train_fraction = 0.2;
  sspec.seed = 4;
  SceneSplit split = stratified_split(scene, sspec);

  VpHypeModel model(tiny_cfg(6, 3), tiny_pcfg(), make_default_bank(1), 5);
  TrainConfig tcfg;
  tcfg.lr = 1e-3;
  tcfg.epochs = 1;
  tcfg.batch_size = 16;
  tcfg.val_subset = 0;
  TrainResult r = train(model, scene, split, tcfg, 9);

  auto [batch, labels] = extract_batch(scene, {split.test[0], split.test[1]}, 9, split.stats);
  NoGradGuard ng;
  Tensor logits_before = model.forward(batch, {}, false, nullptr);

  auto path = temp_file("roundtrip.ckpt");
  CheckpointState state = snapshot_model(model, tcfg, sspec, "full", 9, r.steps, r.rng_state,
                                         r.drop_rng_state, r.moments);
  save_checkpoint(path.string(), state);
  CheckpointState loaded = load_checkpoint(path.string());

  VpHypeModel restored(tiny_cfg(6, 3), tiny_pcfg(), make_default_bank(1), 999);
  restore_model(restored, loaded);
  Tensor logits_after = restored.forward(batch, {}, false, nullptr);
  EXPECT_EQ(logits_before.data(), logits_after.data());

  // optimizer state rides along bit-exactly
  ASSERT_EQ(loaded.moments.size(), r.moments.size());
  for (auto& [name, mom] : r.moments) {
    EXPECT_EQ(loaded.moments.at(name).m, mom.m);
    EXPECT_EQ(loaded.moments.at(name).v, mom.v);
  }
  EXPECT_EQ(loaded.rng_state, r.rng_state);
}

TEST(Checkpoint, FlippedByteFailsDigest) {
  VpHypeModel model(tiny_cfg(4, 2), tiny_pcfg(), make_default_bank(1), 6);
  auto path = temp_file("corrupt.ckpt");
  CheckpointState state = snapshot_model(model, TrainConfig{}, SplitSpec{}, "full", 9, 0, "", "", {});
  save_checkpoint(path.string(), state);

  std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
  std::string header;
  std::getline(f, header);
  f.seekp(static_cast<std::streamoff>(header.size()) + 1 + 40);
  char byte;
  f.seekg(static_cast<std::streamoff>(header.size()) + 1 + 40);
  f.read(&byte, 1);
  byte = static_cast<char>(byte ^ 0xff);
  f.seekp(static_cast<std::streamoff>(header.size()) + 1 + 40);
  f.write(&byte, 1);
  f.close();

  try {
    load_checkpoint(path.string());
    FAIL() << "expected CheckpointError";
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("digest"), std::string::npos);
  }
}

TEST(Checkpoint, ConfigMismatchListsDifferingKeys) {
  VpHypeModel model(tiny_cfg(4, 2), tiny_pcfg(), make_default_bank(1), 6);
  auto path = temp_file("mismatch.ckpt");
  CheckpointState state = snapshot_model(model, TrainConfig{}, SplitSpec{}, "full", 9, 0, "", "", {});
  save_checkpoint(path.string(), state);
  CheckpointState loaded = load_checkpoint(path.string());

  ModelConfig other = tiny_cfg(4, 2);
  other.base_dim = 16;
  other.d_state = 8;
  VpHypeModel different(other, tiny_pcfg(), make_default_bank(1), 6);
  try {
    restore_model(different, loaded);
    FAIL() << "expected CheckpointError";
  } catch (const CheckpointError& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("base_dim"), std::string::npos);
    EXPECT_NE(msg.find("d_state"), std::string::npos);
  }
}

TEST(Checkpoint, VersionMismatchRejected) {
  auto path = temp_file("badversion.ckpt");
  std::ofstream out(path, std::ios::binary);
  json header;
  header["version"] = 99;
  out << header.dump() << "\n";
  out.close();
  EXPECT_THROW(load_checkpoint(path.string()), CheckpointError);
}
