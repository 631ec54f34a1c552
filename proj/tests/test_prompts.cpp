#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "test_util.hpp"
#include "vphype/prompts.hpp"

using namespace vphype;
using vptest::bit_identical;
using vptest::max_abs_diff;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  fs::path dir = fs::temp_directory_path() / ("vphype_prompts_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

PromptBank zero_bank(std::int64_t T) {
  PromptBank bank;
  bank.e_clip = Tensor::zeros({T, kClipDim});
  for (std::int64_t t = 0; t < T; ++t) bank.task_names.push_back("z" + std::to_string(t));
  return bank;
}

}  // namespace

TEST(PromptBankIO, DegenerateZeroBankLoadsAndSelects) {
  auto dir = temp_dir("zeros");
  write_prompt_bank(dir.string(), zero_bank(4));
  PromptBank bank = load_prompt_bank(dir.string());
  EXPECT_EQ(bank.num_tasks(), 4);
  Tensor sel = select_text_embedding(bank, {2});
  EXPECT_EQ(sel.shape(), (Shape{1, kClipDim}));
  for (double v : sel.data()) EXPECT_EQ(v, 0.0);

  // TCSP remains well-formed on a zero bank
  Rng rng(1);
  TcspModule tcsp(8, 4, 16, rng);
  Tensor out = tcsp.forward(sel, 1, 6, 6, true, true);
  EXPECT_EQ(out.shape(), (Shape{1, 16, 6, 6}));
  for (double v : out.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(PromptBankIO, TruncatedPayloadNamesByteCounts) {
  auto dir = temp_dir("trunc");
  write_prompt_bank(dir.string(), make_default_bank(3));
  fs::resize_file(dir / "prompts.f32", 3 * kClipDim * 4 - 5);
  try {
    load_prompt_bank(dir.string());
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find(std::to_string(3 * kClipDim * 4)), std::string::npos);
    EXPECT_NE(msg.find(std::to_string(3 * kClipDim * 4 - 5)), std::string::npos);
  }
}

TEST(PromptBankIO, RoundTripReproducesEmbeddingBytes) {
  auto dir_a = temp_dir("rt_a");
  auto dir_b = temp_dir("rt_b");
  write_prompt_bank(dir_a.string(), make_default_bank(5, 99));
  PromptBank loaded = load_prompt_bank(dir_a.string());
  write_prompt_bank(dir_b.string(), loaded);
  std::ifstream fa(dir_a / "prompts.f32", std::ios::binary);
  std::ifstream fb(dir_b / "prompts.f32", std::ios::binary);
  std::vector<char> ba((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
  std::vector<char> bb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
  EXPECT_EQ(ba, bb);
  EXPECT_FALSE(ba.empty());
}

TEST(PromptBankIO, ZeroTasksRejected) {
  auto dir = temp_dir("zerotasks");
  std::ofstream meta(dir / "prompts.meta.json");
  meta << R"({"T":0,"dim":512,"task_names":[]})";
  meta.close();
  std::ofstream(dir / "prompts.f32", std::ios::binary).close();
  EXPECT_THROW(load_prompt_bank(dir.string()), FormatError);
}

TEST(PromptBankIO, NonFiniteValueNamesByteOffset) {
  auto dir = temp_dir("nonfinite");
  write_prompt_bank(dir.string(), make_default_bank(1));
  std::fstream f(dir / "prompts.f32", std::ios::in | std::ios::out | std::ios::binary);
  float bad = std::numeric_limits<float>::infinity();
  f.seekp(7 * 4);
  f.write(reinterpret_cast<const char*>(&bad), 4);
  f.close();
  try {
    load_prompt_bank(dir.string());
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("28"), std::string::npos);  // byte offset 7*4
  }
}

TEST(SelectTextEmbedding, ExactOneHotRows) {
  PromptBank bank = make_default_bank(4, 5);
  for (std::int64_t t = 0; t < 4; ++t) {
    Tensor sel = select_text_embedding(bank, {t});
    for (std::int64_t j = 0; j < kClipDim; ++j) {
      EXPECT_EQ(sel.at(j), bank.e_clip.at(t * kClipDim + j));  // bit-exact
    }
  }
  EXPECT_THROW(select_text_embedding(bank, {4}), TaskIdError);
  EXPECT_THROW(select_text_embedding(bank, {-1}), TaskIdError);
}

TEST(SelectTextEmbedding, BatchStacksRowsInOrder) {
  PromptBank bank = make_default_bank(4, 6);
  Tensor sel = select_text_embedding(bank, {0, 3, 1});
  ASSERT_EQ(sel.shape(), (Shape{3, kClipDim}));
  for (std::int64_t j = 0; j < kClipDim; ++j) {
    EXPECT_EQ(sel.at(0 * kClipDim + j), bank.e_clip.at(0 * kClipDim + j));
    EXPECT_EQ(sel.at(1 * kClipDim + j), bank.e_clip.at(3 * kClipDim + j));
    EXPECT_EQ(sel.at(2 * kClipDim + j), bank.e_clip.at(1 * kClipDim + j));
  }
}

TEST(SelectTextEmbedding, MatchesExplicitOneHotSummation) {
  PromptBank bank = make_default_bank(5, 7);
  std::vector<std::int64_t> ids{2, 4};
  Tensor sel = select_text_embedding(bank, ids);
  // brute force: sum_i w_i * E[i] with one-hot w
  for (std::size_t b = 0; b < ids.size(); ++b) {
    for (std::int64_t j = 0; j < kClipDim; ++j) {
      double acc = 0.0;
      for (std::int64_t i = 0; i < 5; ++i) {
        double w = (i == ids[b]) ? 1.0 : 0.0;
        acc += w * bank.e_clip.at(i * kClipDim + j);
      }
      EXPECT_DOUBLE_EQ(sel.at(b * kClipDim + j), acc);
    }
  }
  // the soft generalization reproduces one-hot selection
  Tensor w = Tensor::zeros({2, 5});
  w.mutable_data()[0 * 5 + 2] = 1.0;
  w.mutable_data()[1 * 5 + 4] = 1.0;
  Tensor soft = select_text_embedding_soft(bank, w);
  EXPECT_LT(max_abs_diff(sel, soft), 1e-15);
}

TEST(Tcsp, ConstantValueGivesConvexCombinationIdentity) {
  Rng rng(2);
  TcspModule tcsp(6, 4, 6, rng);
  // make V identical at every spatial position: constant visual prompt pushed
  // through a center-tap-only value projection
  for (auto& v : tcsp.visual_prompt.mutable_data()) v = 0.3;
  auto& wv = tcsp.p_v.weight.mutable_data();
  std::fill(wv.begin(), wv.end(), 0.0);
  for (std::int64_t c = 0; c < 6; ++c) wv[c * 9 + 4] = 1.0;  // center tap
  for (auto& v : tcsp.p_v.bias.mutable_data()) v = 0.0;

  PromptBank bank = make_default_bank(1, 3);
  Tensor e512 = select_text_embedding(bank, {0});
  // attention output = A * V with row-stochastic A; identical V rows make the
  // output that constant at every position
  Tensor attn = tcsp.attention_matrix(e512, 1, true, true);
  std::int64_t tokens = 16;
  Tensor v_in = Tensor::full({1, tokens, 6}, 0.3);
  Tensor out = matmul(attn, v_in);
  for (double v : out.data()) EXPECT_NEAR(v, 0.3, 1e-12);
}

TEST(Tcsp, OutputMatchesFeatureGeometry) {
  Rng rng(3);
  // S_p deliberately different from the feature geometry
  TcspModule tcsp(12, 16, 24, rng);
  PromptBank bank = make_default_bank(2, 4);
  Tensor e512 = select_text_embedding(bank, {0, 1, 0});
  Tensor out = tcsp.forward(e512, 3, 5, 9, true, true);
  EXPECT_EQ(out.shape(), (Shape{3, 24, 5, 9}));
}

TEST(Tcsp, AttentionRowsSumToOneAcrossTemperatures) {
  Rng rng(4);
  TcspModule tcsp(8, 5, 8, rng);
  PromptBank bank = make_default_bank(2, 8);
  Tensor e512 = select_text_embedding(bank, {0, 1});
  for (double tau : {0.1, 1.0, 10.0}) {
    Tensor attn = tcsp.attention_matrix(e512, 2, true, true, tau);
    std::int64_t tokens = 25;
    for (std::int64_t b = 0; b < 2; ++b) {
      for (std::int64_t r = 0; r < tokens; ++r) {
        double s = 0.0;
        for (std::int64_t c = 0; c < tokens; ++c) s += attn.at((b * tokens + r) * tokens + c);
        EXPECT_NEAR(s, 1.0, 1e-12) << "tau=" << tau;
      }
    }
  }
}

TEST(Tcsp, LargeTemperatureDrivesAttentionTowardUniform) {
  Rng rng(5);
  TcspModule tcsp(8, 5, 8, rng);
  // give the prompt some actual spread so the attention is non-trivial
  for (auto& v : tcsp.visual_prompt.mutable_data()) v *= 1000.0;
  PromptBank bank = make_default_bank(1, 9);
  Tensor e512 = select_text_embedding(bank, {0});
  std::int64_t tokens = 25;
  double uniform = 1.0 / static_cast<double>(tokens);
  std::vector<double> deviations;
  for (double tau : {1.0, 10.0, 100.0}) {
    Tensor attn = tcsp.attention_matrix(e512, 1, true, true, tau);
    double dev = 0.0;
    for (std::int64_t i = 0; i < tokens * tokens; ++i) {
      dev = std::max(dev, std::abs(attn.at(i) - uniform));
    }
    deviations.push_back(dev);
  }
  EXPECT_GT(deviations[0], deviations[1]);
  EXPECT_GT(deviations[1], deviations[2]);
  EXPECT_LT(deviations[2], 0.01);
}

TEST(PromptFusion, OutputShapeEqualsFeatureShape) {
  Rng rng(6);
  PromptFusion fusion(10, rng);
  Tensor feat = Tensor::randn({2, 10, 4, 5}, rng);
  Tensor prompt = Tensor::randn({2, 10, 4, 5}, rng);
  Tensor out = fusion.forward(feat, prompt);
  EXPECT_EQ(out.shape(), feat.shape());
  Tensor bad = Tensor::randn({2, 10, 5, 4}, rng);
  EXPECT_THROW(fusion.forward(feat, bad), DimensionError);
}

TEST(PromptFusion, ConstructedIdentityWiring) {
  Rng rng(7);
  PromptFusion fusion(6, rng);
  // zero both residual branches, then make the 1x1 projection pick the first
  // C_f channels verbatim
  for (auto& v : fusion.attn.proj.weight.mutable_data()) v = 0.0;
  for (auto& v : fusion.attn.proj.bias.mutable_data()) v = 0.0;
  for (auto& v : fusion.mlp.fc2.weight.mutable_data()) v = 0.0;
  for (auto& v : fusion.mlp.fc2.bias.mutable_data()) v = 0.0;
  auto& w = fusion.proj_1x1.weight.mutable_data();
  std::fill(w.begin(), w.end(), 0.0);
  for (std::int64_t c = 0; c < 6; ++c) w[(c * 12 + c) * 1 * 1] = 1.0;
  for (auto& v : fusion.proj_1x1.bias.mutable_data()) v = 0.0;

  Tensor feat = Tensor::randn({1, 6, 3, 3}, rng);
  Tensor prompt = Tensor::randn({1, 6, 3, 3}, rng);
  Tensor out = fusion.forward(feat, prompt);
  EXPECT_TRUE(bit_identical(out, feat));
}

TEST(PromptFusion, GradientFlowsToBothInputs) {
  Rng rng(8);
  PromptFusion fusion(6, rng);
  Tensor feat = Tensor::randn({1, 6, 3, 3}, rng);
  Tensor prompt = Tensor::randn({1, 6, 3, 3}, rng);
  feat.set_requires_grad(true);
  prompt.set_requires_grad(true);
  Tensor loss = sum_all(mul(fusion.forward(feat, prompt), fusion.forward(feat, prompt)));
  Tape tape(loss);
  tape.backward();
  double gf = 0.0, gp = 0.0;
  for (double v : feat.grad()) gf += std::abs(v);
  for (double v : prompt.grad()) gp += std::abs(v);
  EXPECT_GT(gf, 0.0);
  EXPECT_GT(gp, 0.0);
}

TEST(PromptHook, DisabledIsBitExactIdentity) {
  Rng rng(9);
  ModelConfig mcfg;
  mcfg.in_bands = 4;
  mcfg.num_classes = 3;
  mcfg.base_dim = 8;
  mcfg.depths = {1, 1, 1, 1};
  mcfg.num_heads = {2, 2, 2, 2};
  PromptConfig pcfg;
  pcfg.enabled = false;
  PromptSystem sys(pcfg, make_default_bank(1), mcfg, rng);
  Tensor feat = Tensor::randn({2, 16, 4, 4}, rng);
  Tensor out = sys.apply(1, feat, {0, 0});
  EXPECT_TRUE(out.same_node(feat));  // verbatim no-op
}

TEST(PromptHook, LevelsOutsideInjectionSetPassThrough) {
  Rng rng(10);
  ModelConfig mcfg;
  mcfg.in_bands = 4;
  mcfg.num_classes = 3;
  mcfg.base_dim = 8;
  mcfg.depths = {1, 1, 1, 1};
  mcfg.num_heads = {2, 2, 2, 2};
  PromptConfig pcfg;
  pcfg.inject_levels = {1, 2};
  pcfg.s_p = 4;
  PromptSystem sys(pcfg, make_default_bank(1), mcfg, rng);
  Tensor feat0 = Tensor::randn({1, 8, 8, 8}, rng);
  EXPECT_TRUE(sys.apply(0, feat0, {0}).same_node(feat0));
  Tensor feat1 = Tensor::randn({1, 16, 4, 4}, rng);
  EXPECT_FALSE(sys.apply(1, feat1, {0}).same_node(feat1));
}

TEST(PromptHook, FullAndTextOnlyDifferWhenVisualPromptNonzero) {
  Rng rng(11);
  ModelConfig mcfg;
  mcfg.in_bands = 4;
  mcfg.num_classes = 3;
  mcfg.base_dim = 8;
  mcfg.depths = {1, 1, 1, 1};
  mcfg.num_heads = {2, 2, 2, 2};
  PromptConfig pcfg;
  pcfg.inject_levels = {1};
  pcfg.s_p = 4;

  Rng rng_a(42);
  PromptSystem full(apply_arm(pcfg, Arm::Full), make_default_bank(1), mcfg, rng_a);
  Rng rng_b(42);
  PromptSystem text_only(apply_arm(pcfg, Arm::TextOnly), make_default_bank(1), mcfg, rng_b);
  // identical construction seeds: P_v != 0 is the only live difference
  for (auto& v : full.tcsp.at(1).visual_prompt.mutable_data()) v += 0.5;

  Tensor feat = Tensor::randn({1, 16, 4, 4}, rng);
  Tensor out_full = full.apply(1, feat, {0});
  Tensor out_text = text_only.apply(1, feat, {0});
  EXPECT_GT(max_abs_diff(out_full, out_text), 1e-8);
}
