#include <gtest/gtest.h>

#include "fixtures.hpp"

using namespace vitlens;

namespace {

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorCode::io;
}

Dataset masked_dataset(const ModelConfig& cfg, std::size_t n, std::int32_t tag) {
  Dataset ds = synthesize_dataset(cfg, n, 3, true);
  for (auto& v : *ds.patch_class_mask) v = tag;
  return ds;
}

}  // namespace

TEST(AttentionAblation, ImageToClsNeedsClsToken) {
  const ModelConfig cfg = fixtures::tiny_config(HeadSource::gap);
  const Model model = synthesize_random_model(cfg, 1);
  const Dataset ds = synthesize_dataset(cfg, 2, 2);
  EXPECT_EQ(code_of([&] { run_attention_ablation(model, ds, AblationMode::image_to_cls); }),
            ErrorCode::inapplicable);
  EXPECT_NO_THROW(run_attention_ablation(model, ds, AblationMode::image_to_image));
}

TEST(AttentionAblation, MatchesManualOverride) {
  const ModelConfig cfg = fixtures::tiny_config();
  const Model model = synthesize_random_model(cfg, 3);
  const Dataset ds = synthesize_dataset(cfg, 4, 4);
  for (bool renorm : {false, true}) {
    const auto report = run_attention_ablation(model, ds, AblationMode::image_to_cls, renorm);
    AttentionOverride ov;
    ov.zero_image_to_cls = true;
    ov.renormalize = renorm;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const ForwardTrace tr = forward(model, ds.image(i), ov);
      const ClassLogits last = project(model, tr.blocks.back().residual_out);
      for (std::size_t r = 0; r < tr.seq_len(); ++r) {
        EXPECT_FLOAT_EQ(report.images[i].scores.back()[r],
                        float(identifiability_score(last.values.row(r), std::size_t(ds.labels[i]))));
      }
    }
  }
}

TEST(AttentionAblation, NoEffectWhenAttentionIsSilent) {
  const ModelConfig cfg = fixtures::tiny_config();
  Model model = synthesize_random_model(cfg, 5);
  for (auto& b : model.weights.blocks) {
    std::fill(b.attn_w_out.storage().begin(), b.attn_w_out.storage().end(), 0.0f);
  }
  const Dataset ds = synthesize_dataset(cfg, 3, 6);
  const auto base = identify_dataset(model, ds);
  const auto ablated = run_attention_ablation(model, ds, AblationMode::image_to_image, true);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    EXPECT_EQ(base.images[i].scores, ablated.images[i].scores);
  }
}

TEST(TokenRemoval, RemovingAbsentContextIsNoOp) {
  const ModelConfig cfg = fixtures::tiny_config();
  const Model model = synthesize_random_model(cfg, 7);
  const Dataset ds = masked_dataset(cfg, 6, std::int32_t(TokenLabel::cls));
  const auto res = run_token_removal(model, ds, RemovalGroup::context_labeled);
  EXPECT_EQ(res.perturbed_rate, res.baseline_rate);
  EXPECT_EQ(res.images_evaluated, 6u);
  EXPECT_EQ(res.images_emptied, 0u);
}

TEST(TokenRemoval, RemovingEveryTokenIsEmptySequence) {
  const ModelConfig cfg = fixtures::tiny_config();
  const Model model = synthesize_random_model(cfg, 8);
  const Dataset ds = masked_dataset(cfg, 3, std::int32_t(TokenLabel::cls));
  EXPECT_EQ(code_of([&] { run_token_removal(model, ds, RemovalGroup::class_labeled); }),
            ErrorCode::empty_sequence);
}

TEST(TokenRemoval, NeedsMask) {
  const ModelConfig cfg = fixtures::tiny_config();
  const Model model = synthesize_random_model(cfg, 9);
  const Dataset ds = synthesize_dataset(cfg, 2, 1);
  EXPECT_EQ(code_of([&] { run_token_removal(model, ds, RemovalGroup::class_labeled); }),
            ErrorCode::invalid_argument);
}

TEST(TokenRemoval, MatchesManualFilter) {
  const ModelConfig cfg = fixtures::tiny_config();
  const Model model = synthesize_random_model(cfg, 10);
  Dataset ds = synthesize_dataset(cfg, 12, 11, true);
  // Guarantee every image keeps at least one class token.
  for (std::size_t i = 0; i < ds.size(); ++i) (*ds.patch_class_mask)[i * 4] = 1;
  const auto res = run_token_removal(model, ds, RemovalGroup::context_labeled, {}, 2);

  std::size_t perfect = 0, total = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    std::vector<std::size_t> kept;
    for (std::size_t p = 0; p < 4; ++p)
      if (ds.mask(i)[p] != 0) kept.push_back(p);
    const ForwardTrace tr = forward(model, ds.image(i), {}, TokenFilter::keep(kept));
    const ClassLogits last = project(model, tr.blocks.back().residual_out);
    for (std::size_t r = 1; r < tr.seq_len(); ++r) {
      if (ds.mask(i)[tr.patch_ids[r - 1]] != 1) continue;
      ++total;
      perfect += identifiability_score(last.values.row(r), std::size_t(ds.labels[i])) == 1.0;
    }
  }
  ASSERT_GT(total, 0u);
  EXPECT_DOUBLE_EQ(res.perturbed_rate, double(perfect) / double(total));
}

TEST(OrderedRemoval, Helpers) {
  EXPECT_EQ(removal_count(0.0, 16), 0u);
  EXPECT_EQ(removal_count(0.1, 16), 1u);
  EXPECT_EQ(removal_count(0.3, 10), 3u);
  EXPECT_EQ(removal_count(0.7, 10), 7u);
  EXPECT_EQ(removal_count(0.5, 5), 2u);

  const std::vector<double> f{0.0, 0.5, 1.0};
  EXPECT_DOUBLE_EQ(normalized_auc(f, std::vector<double>{0.7, 0.7, 0.7}), 0.7);
  EXPECT_DOUBLE_EQ(normalized_auc(f, std::vector<double>{1.0, 0.5, 0.0}), 0.5);
  EXPECT_DOUBLE_EQ(normalized_auc(std::vector<double>{0.2}, std::vector<double>{0.4}), 0.4);

  const std::vector<float> imp{0.5f, 0.1f, 0.5f, 0.9f};
  EXPECT_EQ(removal_order(imp, RemovalDirection::positive), (std::vector<std::size_t>{3, 0, 2, 1}));
  EXPECT_EQ(removal_order(imp, RemovalDirection::negative), (std::vector<std::size_t>{1, 0, 2, 3}));

  EXPECT_EQ(random_importance(3, 4, 5), random_importance(3, 4, 5));
  EXPECT_NE(random_importance(3, 4, 5), random_importance(3, 4, 6));
}

TEST(OrderedRemoval, ZeroFractionIsPlainAccuracy) {
  const ModelConfig cfg = fixtures::tiny_config();
  const Model model = synthesize_random_model(cfg, 12);
  const Dataset ds = synthesize_dataset(cfg, 20, 13);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < ds.size(); ++i)
    correct += forward(model, ds.image(i)).prediction() == std::size_t(ds.labels[i]);
  const auto curve = run_ordered_removal(model, ds, random_importance(20, 4, 1),
                                         RemovalDirection::negative, {0.0});
  EXPECT_DOUBLE_EQ(curve.accuracy[0], double(correct) / 20.0);
  EXPECT_DOUBLE_EQ(curve.auc, curve.accuracy[0]);
}

TEST(OrderedRemoval, RejectsBadArguments) {
  const ModelConfig cfg = fixtures::tiny_config();
  const Model model = synthesize_random_model(cfg, 14);
  const Dataset ds = synthesize_dataset(cfg, 2, 15);
  const auto imp = random_importance(2, 4, 1);
  auto run = [&](std::vector<double> f, const std::vector<std::vector<float>>& i) {
    return code_of([&] { run_ordered_removal(model, ds, i, RemovalDirection::positive, f); });
  };
  EXPECT_EQ(run({0.0, 1.0}, imp), ErrorCode::invalid_argument);
  EXPECT_EQ(run({0.2, 0.1}, imp), ErrorCode::invalid_argument);
  EXPECT_EQ(run({}, imp), ErrorCode::invalid_argument);
  EXPECT_EQ(run({0.1}, random_importance(2, 3, 1)), ErrorCode::invalid_argument);
  EXPECT_EQ(run({0.1}, random_importance(1, 4, 1)), ErrorCode::invalid_argument);
}

TEST(OrderedRemoval, DesignatedTokenCurves) {
  const auto f = fixtures::designated_token_fixture();
  const auto fractions = default_removal_fractions();
  const auto pos = run_ordered_removal(f.model, f.dataset, f.importance,
                                       RemovalDirection::positive, fractions, "designated");
  EXPECT_EQ(pos.accuracy[0], 1.0);
  for (std::size_t k = 1; k < fractions.size(); ++k) EXPECT_DOUBLE_EQ(pos.accuracy[k], 0.25);
  const auto neg = run_ordered_removal(f.model, f.dataset, f.importance,
                                       RemovalDirection::negative, fractions, "designated");
  for (double a : neg.accuracy) EXPECT_EQ(a, 1.0);
  EXPECT_DOUBLE_EQ(neg.auc, 1.0);
  EXPECT_LT(pos.auc, neg.auc);
  EXPECT_EQ(neg.source, "designated");
}

TEST(OrderedRemoval, ThreadCountDoesNotChangeCurve) {
  const ModelConfig cfg = fixtures::tiny_config(HeadSource::gap);
  const Model model = synthesize_random_model(cfg, 16);
  const Dataset ds = synthesize_dataset(cfg, 17, 17);
  const auto imp = random_importance(17, 4, 3);
  const auto a = run_ordered_removal(model, ds, imp, RemovalDirection::positive,
                                     default_removal_fractions(), "random", 1);
  const auto b = run_ordered_removal(model, ds, imp, RemovalDirection::positive,
                                     default_removal_fractions(), "random", 4);
  EXPECT_EQ(a.accuracy, b.accuracy);
  EXPECT_EQ(a.auc, b.auc);
}
