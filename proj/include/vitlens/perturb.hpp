#pragma once

// Perturbation experiments: attention ablations, class/context token
// removal, and ordered token removal with accuracy curves.

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "vitlens/class_lens.hpp"
#include "vitlens/error.hpp"
#include "vitlens/forward.hpp"
#include "vitlens/model.hpp"
#include "vitlens/parallel.hpp"

namespace vitlens {

/// Identifiability over a dataset without keeping full traces. `filter_for(i)`
/// yields the token filter of image i; images for which `skip(i)` holds are
/// left out.
template <typename FilterFn, typename SkipFn>
IdentifiabilityReport identify_dataset(const Model& model, const Dataset& dataset,
                                       const AttentionOverride& override_,
                                       const ProjectionOptions& opt, std::size_t threads,
                                       FilterFn&& filter_for, SkipFn&& skip) {
  const std::size_t n = dataset.size();
  std::vector<ImageIdentifiability> images(n);
  std::vector<std::vector<BlockIdentifiability>> partials(n);
  std::vector<char> used(n, 0);
  parallel_for(n, threads, [&](std::size_t i) {
    if (skip(i)) return;
    const ForwardTrace tr = forward(model, dataset.image(i), override_, filter_for(i),
                                    ForwardOptions{.capture_mlp_coeffs = false});
    std::span<const std::int32_t> mask;
    if (!dataset.mask_is_empty(i)) mask = dataset.mask(i);
    images[i] = score_trace(model, tr, dataset.labels[i], opt, mask, partials[i]);
    used[i] = 1;
  });
  IdentifiabilityReport report;
  report.final_ln_applied = opt.apply_final_ln;
  report.blocks.resize(model.config.depth);
  for (std::size_t i = 0; i < n; ++i) {
    if (!used[i]) continue;
    for (std::size_t b = 0; b < partials[i].size(); ++b) report.blocks[b].merge(partials[i][b]);
    if (images[i].has_perfect_image_token_last_block) ++report.images_with_perfect_token;
    report.images.push_back(std::move(images[i]));
  }
  return report;
}

inline IdentifiabilityReport identify_dataset(const Model& model, const Dataset& dataset,
                                              const AttentionOverride& override_ = {},
                                              const ProjectionOptions& opt = {},
                                              std::size_t threads = 1) {
  return identify_dataset(
      model, dataset, override_, opt, threads, [](std::size_t) { return TokenFilter{}; },
      [](std::size_t) { return false; });
}

// ---------------------------------------------------------------------------
// Attention ablation

enum class AblationMode { image_to_image, image_to_cls };

inline AttentionOverride ablation_override(AblationMode mode, bool renormalize = false) {
  AttentionOverride ov;
  ov.zero_image_to_image = mode == AblationMode::image_to_image;
  ov.zero_image_to_cls = mode == AblationMode::image_to_cls;
  ov.renormalize = renormalize;
  return ov;
}

/// Re-runs the dataset with the ablation applied at every block.
inline IdentifiabilityReport run_attention_ablation(const Model& model, const Dataset& dataset,
                                                    AblationMode mode, bool renormalize = false,
                                                    const ProjectionOptions& opt = {},
                                                    std::size_t threads = 1) {
  if (mode == AblationMode::image_to_cls && !model.config.has_cls()) {
    fail(ErrorCode::inapplicable, "mode inapplicable: image_to_cls ablation needs a [CLS] token");
  }
  return identify_dataset(model, dataset, ablation_override(mode, renormalize), opt, threads);
}

// ---------------------------------------------------------------------------
// Token removal

enum class RemovalGroup { class_labeled, context_labeled };

struct TokenRemovalResult {
  RemovalGroup removed = RemovalGroup::context_labeled;
  double baseline_class_rate = 0.0;
  double baseline_context_rate = 0.0;
  /// Last-block rate of the surviving group, before and after removal.
  double baseline_rate = 0.0;
  double perturbed_rate = 0.0;
  double perturbed_mean_score = 0.0;
  std::size_t images_evaluated = 0;
  /// Images whose every image token belonged to the removed group.
  std::size_t images_emptied = 0;
};

inline TokenRemovalResult run_token_removal(const Model& model, const Dataset& dataset,
                                            RemovalGroup remove,
                                            const ProjectionOptions& opt = {},
                                            std::size_t threads = 1) {
  if (!dataset.patch_class_mask) {
    fail(ErrorCode::invalid_argument, "token removal needs a patch_class_mask");
  }
  if (dataset.num_patches != model.config.num_patches()) {
    fail(ErrorCode::shape_conflict, "mask token count does not match the model");
  }
  const auto removed_tag = static_cast<std::int32_t>(
      remove == RemovalGroup::class_labeled ? TokenLabel::cls : TokenLabel::context);
  auto kept_for = [&](std::size_t i) {
    std::vector<std::size_t> kept;
    const auto mask = dataset.mask(i);
    for (std::size_t p = 0; p < mask.size(); ++p)
      if (mask[p] != removed_tag) kept.push_back(p);
    return kept;
  };
  std::size_t emptied = 0;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    if (!dataset.mask_is_empty(i) && kept_for(i).empty()) ++emptied;
  }

  TokenRemovalResult res;
  res.removed = remove;
  res.images_emptied = emptied;
  auto skip_unlabeled = [&](std::size_t i) { return dataset.mask_is_empty(i); };
  const auto baseline = identify_dataset(
      model, dataset, {}, opt, threads, [](std::size_t) { return TokenFilter{}; },
      skip_unlabeled);
  if (baseline.images.empty()) fail(ErrorCode::invalid_argument, "no image carries a mask");
  if (emptied == baseline.images.size()) {
    fail(ErrorCode::empty_sequence, "empty sequence: removal leaves no image tokens");
  }
  const auto perturbed = identify_dataset(
      model, dataset, {}, opt, threads,
      [&](std::size_t i) { return TokenFilter::keep(kept_for(i)); },
      [&](std::size_t i) { return skip_unlabeled(i) || kept_for(i).empty(); });

  res.baseline_class_rate = baseline.last().class_tokens.rate();
  res.baseline_context_rate = baseline.last().context.rate();
  const bool class_survives = remove == RemovalGroup::context_labeled;
  res.baseline_rate = class_survives ? res.baseline_class_rate : res.baseline_context_rate;
  const ScoreStats& survivors =
      class_survives ? perturbed.last().class_tokens : perturbed.last().context;
  res.perturbed_rate = survivors.rate();
  res.perturbed_mean_score = survivors.mean();
  res.images_evaluated = perturbed.images.size();
  return res;
}

// ---------------------------------------------------------------------------
// Ordered removal

enum class RemovalDirection {
  negative,  // least important first
  positive,  // most important first
};

struct PerturbationCurve {
  std::vector<double> fractions;
  std::vector<double> accuracy;
  double auc = 0.0;
  std::string source;
  RemovalDirection direction = RemovalDirection::negative;
};

inline std::vector<double> default_removal_fractions() {
  return {0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
}

/// Trapezoidal area under accuracy(fraction), divided by the fraction span.
/// A single point yields its accuracy.
inline double normalized_auc(std::span<const double> fractions, std::span<const double> acc) {
  if (fractions.size() == 1) return acc[0];
  double area = 0.0;
  for (std::size_t i = 1; i < fractions.size(); ++i) {
    area += (fractions[i] - fractions[i - 1]) * (acc[i] + acc[i - 1]) / 2.0;
  }
  return area / (fractions.back() - fractions.front());
}

/// Number of tokens removed at fraction q out of n: floor(q * n), with a small
/// guard so decimal fractions such as 0.3 are not floored one short.
inline std::size_t removal_count(double q, std::size_t n) {
  return static_cast<std::size_t>(std::floor(q * double(n) + 1e-9));
}

/// Per-image uniform random importance, reproducible from `seed`.
inline std::vector<std::vector<float>> random_importance(std::size_t images, std::size_t tokens,
                                                         std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::vector<std::vector<float>> out(images, std::vector<float>(tokens));
  for (auto& row : out)
    for (float& v : row) v = u(rng);
  return out;
}

/// Removal order of one image: ascending importance for negative runs,
/// descending for positive; ties keep the lower patch index first.
inline std::vector<std::size_t> removal_order(std::span<const float> importance,
                                              RemovalDirection direction) {
  if (direction == RemovalDirection::positive) return argsort_desc(importance);
  std::vector<float> negated(importance.begin(), importance.end());
  for (float& v : negated) v = -v;
  return argsort_desc(std::span<const float>(negated));
}

inline PerturbationCurve run_ordered_removal(const Model& model, const Dataset& dataset,
                                             const std::vector<std::vector<float>>& importance,
                                             RemovalDirection direction,
                                             std::vector<double> fractions,
                                             std::string source = "relevance",
                                             std::size_t threads = 1) {
  const std::size_t n = model.config.num_patches();
  if (importance.size() != dataset.size()) {
    fail(ErrorCode::invalid_argument, "importance must cover every image");
  }
  for (const auto& row : importance) {
    if (row.size() != n) fail(ErrorCode::invalid_argument, "importance must cover all image tokens");
  }
  if (fractions.empty()) fail(ErrorCode::invalid_argument, "no removal fractions");
  for (std::size_t i = 0; i < fractions.size(); ++i) {
    if (fractions[i] < 0.0 || fractions[i] >= 1.0) {
      fail(ErrorCode::invalid_argument, "removal fractions must lie in [0, 1)");
    }
    if (i && fractions[i] <= fractions[i - 1]) {
      fail(ErrorCode::invalid_argument, "removal fractions must be strictly increasing");
    }
  }

  PerturbationCurve curve;
  curve.fractions = fractions;
  curve.source = std::move(source);
  curve.direction = direction;
  const std::size_t nf = fractions.size();
  std::vector<char> hits(dataset.size() * nf, 0);
  parallel_for(dataset.size(), threads, [&](std::size_t i) {
    const auto order = removal_order(importance[i], direction);
    const Tensor image = dataset.image(i);
    for (std::size_t f = 0; f < nf; ++f) {
      const std::size_t k = removal_count(fractions[f], n);
      std::vector<std::size_t> kept(order.begin() + std::ptrdiff_t(k), order.end());
      const TokenFilter filter = k == 0 ? TokenFilter{} : TokenFilter::keep(std::move(kept));
      const ForwardTrace tr =
          forward(model, image, {}, filter, ForwardOptions{.capture_mlp_coeffs = false});
      hits[i * nf + f] = tr.prediction() == std::size_t(dataset.labels[i]);
    }
  });
  curve.accuracy.assign(nf, 0.0);
  for (std::size_t f = 0; f < nf; ++f) {
    std::size_t correct = 0;
    for (std::size_t i = 0; i < dataset.size(); ++i) correct += hits[i * nf + f];
    curve.accuracy[f] = dataset.size() ? double(correct) / double(dataset.size()) : 0.0;
  }
  curve.auc = normalized_auc(curve.fractions, curve.accuracy);
  return curve;
}

}  // namespace vitlens
