#pragma once

// Projection of hidden states onto the class-embedding space and the
// analytics built on it: identifiability scores and rates, their evolution
// over blocks, class-similarity change rates and residual composition.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "vitlens/error.hpp"
#include "vitlens/forward.hpp"
#include "vitlens/model.hpp"
#include "vitlens/tensor.hpp"

namespace vitlens {

struct ProjectionOptions {
  /// Apply the model's final LN before E (the "final-LN lens").
  bool apply_final_ln = false;
  bool include_bias = true;
};

struct ClassLogits {
  Tensor values;  // tokens x |C|
  bool final_ln_applied = false;
};

/// E * x (+ bias) for every row of `hidden`, optionally normalizing each row
/// with `final_ln` first.
inline ClassLogits project(const Tensor& hidden, const Tensor& class_embed,
                           const Tensor* bias, const LayerNormWeights* final_ln = nullptr,
                           float eps = 1e-6f) {
  if (hidden.rank() != 2 || class_embed.rank() != 2 || hidden.cols() != class_embed.cols()) {
    fail(ErrorCode::dimension, "project: hidden " + shape_string(hidden.shape()) +
                                   " vs E " + shape_string(class_embed.shape()));
  }
  ClassLogits out;
  out.final_ln_applied = final_ln != nullptr;
  out.values = final_ln
                   ? matmul_bt(layer_norm(hidden, final_ln->gamma, final_ln->beta, eps), class_embed)
                   : matmul_bt(hidden, class_embed);
  if (bias) add_row_bias(out.values, *bias);
  return out;
}

inline ClassLogits project(const Model& model, const Tensor& hidden,
                           const ProjectionOptions& opt = {}) {
  const ViTWeights& w = model.weights;
  return project(hidden, w.class_embed, opt.include_bias ? &w.class_bias : nullptr,
                 opt.apply_final_ln ? &w.final_ln : nullptr, model.config.ln_eps);
}

/// 0-based position of `correct` when classes are sorted by descending logit.
template <typename T>
std::size_t class_rank(std::span<const T> logits, std::size_t correct) {
  if (correct >= logits.size()) {
    fail(ErrorCode::invalid_argument, "class index " + std::to_string(correct) +
                                          " out of range for " +
                                          std::to_string(logits.size()) + " classes");
  }
  // Equivalent to locating `correct` in argsort_desc without the full sort:
  // classes ahead of it are strictly larger, or equal with a lower index.
  const T v = logits[correct];
  std::size_t rank = 0;
  for (std::size_t k = 0; k < logits.size(); ++k) {
    if (logits[k] > v || (logits[k] == v && k < correct)) ++rank;
  }
  return rank;
}

/// r = 1 - rank / |C|. Ranges over {1/|C|, ..., 1}.
template <typename T>
double identifiability_score(std::span<const T> logits, std::size_t correct) {
  if (logits.size() < 2) fail(ErrorCode::invalid_argument, "identifiability needs >= 2 classes");
  return 1.0 - double(class_rank(logits, correct)) / double(logits.size());
}

inline double identifiability_score(const std::vector<float>& logits, std::size_t correct) {
  return identifiability_score(std::span<const float>(logits), correct);
}

// ---------------------------------------------------------------------------
// Identifiability over blocks

/// Running sums for one group of tokens.
struct ScoreStats {
  std::size_t count = 0;
  std::size_t perfect = 0;
  double sum = 0.0;
  double sum_sq = 0.0;

  void add(double score) {
    ++count;
    sum += score;
    sum_sq += score * score;
    if (score == 1.0) ++perfect;
  }
  void merge(const ScoreStats& o) {
    count += o.count;
    perfect += o.perfect;
    sum += o.sum;
    sum_sq += o.sum_sq;
  }
  double mean() const { return count ? sum / double(count) : 0.0; }
  double variance() const {
    if (!count) return 0.0;
    const double m = mean();
    return std::max(0.0, sum_sq / double(count) - m * m);
  }
  /// Share of tokens with score exactly 1.
  double rate() const { return count ? double(perfect) / double(count) : 0.0; }
};

struct BlockIdentifiability {
  ScoreStats image;        // all image tokens
  ScoreStats cls;          // [CLS] (empty for GAP models)
  ScoreStats class_tokens; // image tokens labeled class
  ScoreStats context;      // image tokens labeled context

  void merge(const BlockIdentifiability& o) {
    image.merge(o.image);
    cls.merge(o.cls);
    class_tokens.merge(o.class_tokens);
    context.merge(o.context);
  }
};

struct ImageIdentifiability {
  std::int32_t label = 0;
  /// scores[b][row] for block b's output, rows in trace order.
  std::vector<std::vector<float>> scores;
  bool has_perfect_image_token_last_block = false;
};

struct IdentifiabilityReport {
  std::vector<ImageIdentifiability> images;
  std::vector<BlockIdentifiability> blocks;
  std::size_t images_with_perfect_token = 0;
  bool final_ln_applied = false;

  /// Share of images with at least one image token scored 1 in the last block.
  double top1_ci() const {
    return images.empty() ? 0.0 : double(images_with_perfect_token) / double(images.size());
  }
  const BlockIdentifiability& last() const { return blocks.back(); }
};

/// Scores every token of one trace at every block output.
inline ImageIdentifiability score_trace(const Model& model, const ForwardTrace& trace,
                                        std::int32_t label, const ProjectionOptions& opt,
                                        std::span<const std::int32_t> mask,
                                        std::vector<BlockIdentifiability>& blocks) {
  ImageIdentifiability img;
  img.label = label;
  const std::size_t first = trace.first_image_row();
  blocks.resize(trace.blocks.size());
  for (std::size_t b = 0; b < trace.blocks.size(); ++b) {
    const ClassLogits logits = project(model, trace.blocks[b].residual_out, opt);
    std::vector<float> row_scores(logits.values.rows());
    for (std::size_t r = 0; r < logits.values.rows(); ++r) {
      const double s = identifiability_score(logits.values.row(r), std::size_t(label));
      row_scores[r] = static_cast<float>(s);
      if (r < first) {
        blocks[b].cls.add(s);
        continue;
      }
      blocks[b].image.add(s);
      if (!mask.empty()) {
        const auto tag = mask[trace.patch_ids[r - first]];
        if (tag == static_cast<std::int32_t>(TokenLabel::cls)) blocks[b].class_tokens.add(s);
        if (tag == static_cast<std::int32_t>(TokenLabel::context)) blocks[b].context.add(s);
      }
      if (b + 1 == trace.blocks.size() && s == 1.0) img.has_perfect_image_token_last_block = true;
    }
    img.scores.push_back(std::move(row_scores));
  }
  return img;
}

/// Per-block identifiability over a set of traces aligned with `dataset`.
/// Class/context aggregates use the dataset mask, skipping all-ignore images.
inline IdentifiabilityReport identifiability_evolution(const Model& model,
                                                       std::span<const ForwardTrace> traces,
                                                       const Dataset& dataset,
                                                       const ProjectionOptions& opt = {}) {
  if (traces.size() != dataset.size()) {
    fail(ErrorCode::invalid_argument, "traces and dataset are not aligned");
  }
  IdentifiabilityReport report;
  report.final_ln_applied = opt.apply_final_ln;
  report.blocks.resize(model.config.depth);
  for (std::size_t i = 0; i < traces.size(); ++i) {
    std::span<const std::int32_t> mask;
    if (!dataset.mask_is_empty(i)) mask = dataset.mask(i);
    std::vector<BlockIdentifiability> partial;
    report.images.push_back(
        score_trace(model, traces[i], dataset.labels[i], opt, mask, partial));
    for (std::size_t b = 0; b < partial.size(); ++b) report.blocks[b].merge(partial[b]);
    if (report.images.back().has_perfect_image_token_last_block) {
      ++report.images_with_perfect_token;
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Class similarity change

enum class ChangeReference {
  /// Compare the projection of a sub-layer's output with that of its input.
  sublayer_input,
  /// Compare the residual after the sub-layer's update with the one before.
  residual,
};

struct RateCounter {
  std::size_t hits = 0;
  std::size_t total = 0;
  void add(bool hit) {
    total += 1;
    hits += hit ? 1 : 0;
  }
  void merge(const RateCounter& o) {
    hits += o.hits;
    total += o.total;
  }
  double rate() const { return total ? double(hits) / double(total) : 0.0; }
};

struct ChangeRates {
  RateCounter attn_image, attn_cls, mlp_image, mlp_cls;
  /// residual_out against residual_in of the whole block.
  RateCounter block_image, block_cls;

  void merge(const ChangeRates& o) {
    attn_image.merge(o.attn_image);
    attn_cls.merge(o.attn_cls);
    mlp_image.merge(o.mlp_image);
    mlp_cls.merge(o.mlp_cls);
    block_image.merge(o.block_image);
    block_cls.merge(o.block_cls);
  }
};

/// Chance level quoted alongside the change rates.
inline constexpr double kChangeRateChance = 0.5;

/// Per block: share of tokens whose correct-class logit strictly increases.
inline std::vector<ChangeRates> class_similarity_change_rate(
    const Model& model, const ForwardTrace& trace, std::size_t correct,
    ChangeReference reference = ChangeReference::sublayer_input,
    const ProjectionOptions& opt = {}) {
  std::vector<ChangeRates> out(trace.blocks.size());
  const std::size_t first = trace.first_image_row();
  auto count = [&](const Tensor& before, const Tensor& after, RateCounter& cls_counter,
                   RateCounter& image_counter) {
    const Tensor pb = project(model, before, opt).values;
    const Tensor pa = project(model, after, opt).values;
    if (correct >= pb.cols()) fail(ErrorCode::invalid_argument, "class index out of range");
    for (std::size_t r = 0; r < pb.rows(); ++r) {
      const bool up = pa.at(r, correct) > pb.at(r, correct);
      (r < first ? cls_counter : image_counter).add(up);
    }
  };
  for (std::size_t b = 0; b < trace.blocks.size(); ++b) {
    const BlockTrace& bt = trace.blocks[b];
    ChangeRates& cr = out[b];
    if (reference == ChangeReference::sublayer_input) {
      count(bt.residual_in, bt.attn_out, cr.attn_cls, cr.attn_image);
      count(bt.residual_mid, bt.mlp_out, cr.mlp_cls, cr.mlp_image);
    } else {
      count(bt.residual_in, bt.residual_mid, cr.attn_cls, cr.attn_image);
      count(bt.residual_mid, bt.residual_out, cr.mlp_cls, cr.mlp_image);
    }
    count(bt.residual_in, bt.residual_out, cr.block_cls, cr.block_image);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Residual composition

enum class CompositionCategory { attn, mlp, residual, composition, multi };

struct CompositionCounts {
  std::size_t attn = 0, mlp = 0, residual = 0, composition = 0, multi = 0;
  /// Every source matching the residual's top-1, including inside `multi`.
  std::size_t attn_matches = 0, mlp_matches = 0, residual_matches = 0;

  std::size_t total() const { return attn + mlp + residual + composition + multi; }
  void merge(const CompositionCounts& o) {
    attn += o.attn;
    mlp += o.mlp;
    residual += o.residual;
    composition += o.composition;
    multi += o.multi;
    attn_matches += o.attn_matches;
    mlp_matches += o.mlp_matches;
    residual_matches += o.residual_matches;
  }
};

/// Top-1 class of a logit row, or nullopt when every logit is equal (a zero
/// update projected without bias carries no prediction).
inline std::optional<std::size_t> top1(std::span<const float> logits) {
  const auto lo = std::min_element(logits.begin(), logits.end());
  const auto hi = std::max_element(logits.begin(), logits.end());
  if (*lo == *hi) return std::nullopt;
  return argmax(logits);
}

/// Per block, compares the top-1 of x_b against the top-1 of o_attn, o_mlp
/// and x_{b-1}.
inline std::vector<CompositionCounts> residual_composition(
    const Model& model, const ForwardTrace& trace, const ProjectionOptions& opt = {},
    std::vector<std::vector<CompositionCategory>>* categories = nullptr) {
  std::vector<CompositionCounts> out(trace.blocks.size());
  if (categories) categories->assign(trace.blocks.size(), {});
  for (std::size_t b = 0; b < trace.blocks.size(); ++b) {
    const BlockTrace& bt = trace.blocks[b];
    const Tensor res = project(model, bt.residual_out, opt).values;
    const Tensor pa = project(model, bt.attn_out, opt).values;
    const Tensor pm = project(model, bt.mlp_out, opt).values;
    const Tensor pr = project(model, bt.residual_in, opt).values;
    for (std::size_t r = 0; r < res.rows(); ++r) {
      const auto target = top1(res.row(r));
      const bool a = target && top1(pa.row(r)) == target;
      const bool m = target && top1(pm.row(r)) == target;
      const bool x = target && top1(pr.row(r)) == target;
      CompositionCounts& c = out[b];
      c.attn_matches += a;
      c.mlp_matches += m;
      c.residual_matches += x;
      CompositionCategory cat;
      const int matches = int(a) + int(m) + int(x);
      if (matches > 1) {
        cat = CompositionCategory::multi;
        ++c.multi;
      } else if (a) {
        cat = CompositionCategory::attn;
        ++c.attn;
      } else if (m) {
        cat = CompositionCategory::mlp;
        ++c.mlp;
      } else if (x) {
        cat = CompositionCategory::residual;
        ++c.residual;
      } else {
        cat = CompositionCategory::composition;
        ++c.composition;
      }
      if (categories) (*categories)[b].push_back(cat);
    }
  }
  return out;
}

}  // namespace vitlens
