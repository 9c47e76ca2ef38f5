#include <gtest/gtest.h>

#include "criteria.hpp"
#include "fixtures.hpp"

using namespace vitlens;

TEST(Project, IdentityEmbeddingReturnsHiddenState) {
  std::mt19937_64 rng(1);
  const Tensor h = fixtures::random_tensor({3, 4}, rng);
  Tensor eye({4, 4});
  for (std::size_t i = 0; i < 4; ++i) eye.at(i, i) = 1.0f;
  const Tensor zero({4});
  EXPECT_EQ(project(h, eye, &zero).values, h);
  EXPECT_THROW(project(h, Tensor({4, 5}), nullptr), Error);
}

TEST(Project, MatchesDotProducts) {
  std::mt19937_64 rng(2);
  const Tensor h = fixtures::random_tensor({6, 16}, rng);
  const Tensor e = fixtures::random_tensor({5, 16}, rng);
  const Tensor b = fixtures::random_tensor({5}, rng);
  const Tensor p = project(h, e, &b).values;
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t c = 0; c < 5; ++c) {
      double acc = b[c];
      for (std::size_t j = 0; j < 16; ++j) acc += double(h.at(r, j)) * e.at(c, j);
      EXPECT_NEAR(p.at(r, c), acc, 1e-6);
    }
}

TEST(Project, FinalLnLensOnLastClsEqualsModelLogits) {
  const ModelConfig cfg = fixtures::tiny_config();
  Model model = synthesize_random_model(cfg, 3);
  std::mt19937_64 rng(4);
  model.weights.final_ln.gamma = fixtures::random_tensor({16}, rng);
  model.weights.final_ln.beta = fixtures::random_tensor({16}, rng);
  const ForwardTrace tr = forward(model, fixtures::random_image(cfg, 5));
  const ClassLogits p = project(model, tr.blocks.back().residual_out, {.apply_final_ln = true});
  EXPECT_TRUE(p.final_ln_applied);
  for (std::size_t c = 0; c < 5; ++c) EXPECT_NEAR(p.values.at(0, c), tr.logits[c], 1e-5);
}

TEST(Identifiability, HandEvaluatedExamples) {
  const std::vector<float> p{0.1f, 3.0f, 2.0f, -1.0f};
  EXPECT_EQ(identifiability_score(p, 1), 1.0);
  EXPECT_EQ(identifiability_score(p, 3), 0.25);
  EXPECT_EQ(identifiability_score(p, 0), 0.5);
  EXPECT_DOUBLE_EQ(identifiability_score(std::vector<float>{2, 2, 2}, 2), 1.0 / 3.0);
  EXPECT_THROW(identifiability_score(p, 4), Error);
  EXPECT_THROW(identifiability_score(std::vector<float>{1}, 0), Error);
}

TEST(Identifiability, StrictTopIsAlwaysOne) {
  std::mt19937_64 rng(6);
  for (int k = 0; k < 100; ++k) {
    std::vector<float> p(7);
    for (float& v : p) v = float(rng() % 1000) / 10.0f;
    const std::size_t c = rng() % 7;
    p[c] = 200.0f;
    EXPECT_EQ(identifiability_score(p, c), 1.0);
  }
}

TEST(Identifiability, InvariantUnderMonotoneTransformAndOnGrid) {
  std::mt19937_64 rng(7);
  std::normal_distribution<float> dist;
  for (int k = 0; k < 200; ++k) {
    std::vector<float> p(6), q(6);
    for (std::size_t i = 0; i < 6; ++i) {
      p[i] = dist(rng);
      q[i] = std::exp(p[i]) * 3.0f + 1.0f;
    }
    const std::size_t c = rng() % 6;
    const double s = identifiability_score(p, c);
    EXPECT_EQ(s, identifiability_score(q, c));
    const double k_rank = (1.0 - s) * 6.0;
    EXPECT_NEAR(k_rank, std::round(k_rank), 1e-12);
  }
}

TEST(Identifiability, UniformRankMeanConverges) {
  std::mt19937_64 rng(8);
  std::normal_distribution<float> dist;
  double sum = 0;
  const int n = 20000;
  for (int k = 0; k < n; ++k) {
    std::vector<float> p(5);
    for (float& v : p) v = dist(rng);
    sum += identifiability_score(p, rng() % 5);
  }
  EXPECT_NEAR(sum / n, 1.0 - 4.0 / 10.0, 0.01);
}

TEST(Identifiability, OracleCriterion) {
  const auto out = criteria::identifiability_oracle();
  EXPECT_TRUE(out.pass) << out.detail;
}

TEST(Evolution, NullModelCriterion) {
  const auto out = criteria::null_model();
  EXPECT_TRUE(out.pass) << out.detail;
}

TEST(Evolution, MatchesRecomputationFromDumpedLogits) {
  const ModelConfig cfg = fixtures::tiny_config();
  const Model model = synthesize_random_model(cfg, 9);
  const Dataset ds = synthesize_dataset(cfg, 10, 10, true);
  const auto traces = trace_dataset(model, ds);
  const IdentifiabilityReport r = identifiability_evolution(model, traces, ds);
  ASSERT_EQ(r.images.size(), 10u);
  ASSERT_EQ(r.blocks.size(), 2u);
  std::size_t perfect_images = 0;
  for (std::size_t i = 0; i < 10; ++i) {
    bool perfect = false;
    for (std::size_t b = 0; b < 2; ++b) {
      const Tensor logits = project(model, traces[i].blocks[b].residual_out).values;
      for (std::size_t row = 0; row < 5; ++row) {
        std::vector<float> l(logits.row(row).begin(), logits.row(row).end());
        const double s = identifiability_score(l, std::size_t(ds.labels[i]));
        EXPECT_EQ(float(s), r.images[i].scores[b][row]);
        if (b == 1 && row > 0 && s == 1.0) perfect = true;
      }
    }
    perfect_images += perfect;
  }
  EXPECT_EQ(r.images_with_perfect_token, perfect_images);
  EXPECT_EQ(r.blocks[1].image.count, 40u);
  EXPECT_EQ(r.blocks[1].cls.count, 10u);
  EXPECT_EQ(r.blocks[1].class_tokens.count + r.blocks[1].context.count, 40u);
  // identify_dataset streams the same numbers without keeping traces.
  const IdentifiabilityReport s = identify_dataset(model, ds, {}, {}, 2);
  EXPECT_EQ(s.blocks[1].image.sum, r.blocks[1].image.sum);
  EXPECT_EQ(s.images_with_perfect_token, r.images_with_perfect_token);
}

TEST(Evolution, AllIgnoreMaskSkipsClassContextSplit) {
  const ModelConfig cfg = fixtures::tiny_config();
  const Model model = synthesize_random_model(cfg, 11);
  Dataset ds = synthesize_dataset(cfg, 2, 12, true);
  for (auto& v : *ds.patch_class_mask) v = -1;
  const auto traces = trace_dataset(model, ds);
  const IdentifiabilityReport r = identifiability_evolution(model, traces, ds);
  EXPECT_EQ(r.last().class_tokens.count, 0u);
  EXPECT_EQ(r.last().context.count, 0u);
  EXPECT_EQ(r.last().image.count, 8u);
}

TEST(ChangeRate, ZeroLayerAndIdentityLayer) {
  ModelConfig cfg = fixtures::tiny_config();
  cfg.num_classes = 4;
  cfg.hidden_dim = 4;
  cfg.num_heads = 1;
  cfg.mlp_dim = 4;
  const Model model = fixtures::zero_model(cfg);
  Model m = model;
  for (std::size_t j = 0; j < 4; ++j) m.weights.class_embed.at(j, j) = 1.0f;
  ForwardTrace tr;
  tr.has_cls = true;
  tr.patch_ids = {0};
  BlockTrace bt;
  bt.residual_in = Tensor::matrix(2, 4, {1, 0, 0, 0, 2, 0, 0, 0});
  bt.attn_out = Tensor({2, 4});
  bt.residual_mid = bt.residual_in;
  bt.mlp_out = bt.residual_mid;  // output equal to input
  bt.residual_out = add(bt.mlp_out, bt.residual_mid);
  tr.blocks.push_back(bt);
  tr.tokens_in = bt.residual_in;
  const auto rates = class_similarity_change_rate(m, tr, 0);
  EXPECT_EQ(rates[0].attn_image.rate(), 0.0);
  EXPECT_EQ(rates[0].attn_cls.rate(), 0.0);
  EXPECT_EQ(rates[0].mlp_image.rate(), 0.0);  // tie is not an increase
  EXPECT_EQ(rates[0].block_image.rate(), 1.0);
  const auto residual = class_similarity_change_rate(m, tr, 0, ChangeReference::residual);
  EXPECT_EQ(residual[0].attn_image.rate(), 0.0);
  EXPECT_EQ(residual[0].mlp_image.rate(), 1.0);
}

TEST(ChangeRate, CountsEveryToken) {
  const ModelConfig cfg = fixtures::tiny_config();
  const Model model = synthesize_random_model(cfg, 13);
  const ForwardTrace tr = forward(model, fixtures::random_image(cfg, 14));
  const auto rates = class_similarity_change_rate(model, tr, 2);
  ASSERT_EQ(rates.size(), 2u);
  EXPECT_EQ(rates[0].attn_image.total, 4u);
  EXPECT_EQ(rates[0].attn_cls.total, 1u);
  EXPECT_THROW(class_similarity_change_rate(model, tr, 9), Error);
}

TEST(Composition, ZeroUpdatesGiveResidual) {
  ModelConfig cfg = fixtures::tiny_config();
  Model model = fixtures::zero_model(cfg);
  std::mt19937_64 rng(15);
  model.weights.class_embed = fixtures::random_tensor({5, 16}, rng);
  model.weights.patch_proj = fixtures::random_tensor({16, 12}, rng);
  *model.weights.cls_init = fixtures::random_tensor({16}, rng);
  const ForwardTrace tr = forward(model, fixtures::random_image(cfg, 16));
  std::vector<std::vector<CompositionCategory>> cats;
  const auto counts = residual_composition(model, tr, {}, &cats);
  for (const auto& c : counts) {
    EXPECT_EQ(c.residual, 5u);
    EXPECT_EQ(c.total(), 5u);
  }
  for (const auto& block : cats)
    for (auto cat : block) EXPECT_EQ(cat, CompositionCategory::residual);
}

TEST(Composition, DominantMlpValueGivesMlp) {
  // One block, d = |C| = 4, E = identity. The MLP has a single live memory
  // whose value vector points at class 3 with a large norm; attention is off.
  ModelConfig cfg;
  cfg.depth = 1;
  cfg.hidden_dim = 4;
  cfg.num_heads = 1;
  cfg.mlp_dim = 4;
  cfg.patch_size = 2;
  cfg.image_size = 4;
  cfg.num_classes = 4;
  Model model = fixtures::zero_model(cfg);
  for (std::size_t j = 0; j < 4; ++j) model.weights.class_embed.at(j, j) = 1.0f;
  for (std::size_t j = 0; j < 4; ++j) model.weights.patch_proj.at(j, j) = 1.0f;
  model.weights.blocks[0].mlp_b_inp[0] = 2.0f;  // GELU(2) > 0 for every token
  model.weights.blocks[0].mlp_w_out.at(0, 3) = 50.0f;
  // Every token's own residual prefers class 0.
  Tensor image({3, 4, 4});
  for (std::size_t y = 0; y < 4; y += 2)
    for (std::size_t x = 0; x < 4; x += 2) image[y * 4 + x] = 5.0f;
  const ForwardTrace tr = forward(model, image);
  std::vector<std::vector<CompositionCategory>> cats;
  const auto counts = residual_composition(model, tr, {}, &cats);
  EXPECT_EQ(counts[0].mlp, tr.seq_len());
  EXPECT_EQ(counts[0].mlp_matches, tr.seq_len());
  EXPECT_EQ(counts[0].residual_matches, 0u);
}

TEST(Composition, MultiCountedSeparately) {
  ModelConfig cfg = fixtures::tiny_config();
  cfg.depth = 1;
  Model model = fixtures::zero_model(cfg);
  std::mt19937_64 rng(19);
  model.weights.class_embed = fixtures::random_tensor({5, 16}, rng);
  // Zero-mean class rows make E * LN(x) a positive multiple of E * x.
  for (std::size_t c = 0; c < 5; ++c) {
    double mean = 0;
    for (float v : model.weights.class_embed.row(c)) mean += v;
    for (float& v : model.weights.class_embed.row(c)) v -= float(mean / 16);
  }
  model.weights.patch_proj = fixtures::random_tensor({16, 12}, rng);
  *model.weights.cls_init = fixtures::random_tensor({16}, rng);
  // MLP output proportional to its (normalized) input: x and o_mlp agree.
  auto& bw = model.weights.blocks[0];
  for (std::size_t j = 0; j < 16; ++j) {
    bw.mlp_w_inp.at(j, j) = 1.0f;
    bw.mlp_w_inp.at(j, 16 + j) = -1.0f;
    bw.mlp_w_out.at(j, j) = 1.0f;
    bw.mlp_w_out.at(16 + j, j) = -1.0f;
  }
  const ForwardTrace tr = forward(model, fixtures::random_image(cfg, 20));
  const auto counts = residual_composition(model, tr);
  EXPECT_EQ(counts[0].attn_matches, 0u);
  EXPECT_EQ(counts[0].multi, 5u);
  EXPECT_EQ(counts[0].residual_matches, 5u);
  EXPECT_EQ(counts[0].mlp_matches, 5u);
}

TEST(Top1, DegenerateRowHasNoPrediction) {
  EXPECT_FALSE(top1(std::vector<float>{0, 0, 0}).has_value());
  EXPECT_EQ(top1(std::vector<float>{0, 2, 2}), 1u);
}
