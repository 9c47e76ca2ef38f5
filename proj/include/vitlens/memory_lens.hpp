#pragma once

// Parameter-space projection of the MHSA and MLP output matrices onto the
// class embedding, and key-value memory metrics computed from traces.
//
// Layers are indexed 2b (attention of block b) and 2b + 1 (MLP of block b).
// Class projections here use unit-normalized rows of E and W_out and no
// class bias.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "vitlens/class_lens.hpp"
#include "vitlens/error.hpp"
#include "vitlens/forward.hpp"
#include "vitlens/model.hpp"
#include "vitlens/tensor.hpp"

namespace vitlens {

enum class LayerKind { attn, mlp };

inline const char* layer_kind_name(LayerKind k) { return k == LayerKind::attn ? "attn" : "mlp"; }

/// Rows scaled to unit L2 norm; all-zero rows stay zero.
inline Tensor normalize_rows(const Tensor& m) {
  Tensor out = m;
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const double norm = std::sqrt(dot(m.row(r), m.row(r)));
    if (norm == 0.0) continue;
    for (float& v : out.row(r)) v = static_cast<float>(v / norm);
  }
  return out;
}

struct MemoryView {
  std::size_t block = 0;
  LayerKind kind = LayerKind::mlp;
  /// mlp: W_inp (d x |M|, one key per column); attn: W_V (d x d, head h owns
  /// columns [h*d/f, (h+1)*d/f)).
  Tensor keys;
  /// W_out, one value vector per row (|M| x d).
  Tensor values;
  /// Unit-row E times unit-row W_out transposed: cosine similarity of class c
  /// and value j, |C| x |M|.
  Tensor value_projection;

  std::size_t num_memories() const { return values.rows(); }
  std::size_t layer_index() const { return 2 * block + (kind == LayerKind::mlp ? 1 : 0); }
  std::string name() const {
    return "block." + std::to_string(block) + "." + layer_kind_name(kind);
  }

  /// Class logits of value j, read from column j of the projection.
  std::vector<float> value_logits(std::size_t j) const {
    std::vector<float> col(value_projection.rows());
    for (std::size_t c = 0; c < col.size(); ++c) col[c] = value_projection.at(c, j);
    return col;
  }
};

inline MemoryView make_memory_view(const Model& model, std::size_t block, LayerKind kind) {
  if (block >= model.config.depth) fail(ErrorCode::invalid_argument, "block out of range");
  const BlockWeights& bw = model.weights.blocks[block];
  MemoryView v;
  v.block = block;
  v.kind = kind;
  v.keys = kind == LayerKind::mlp ? bw.mlp_w_inp : bw.w_v;
  v.values = kind == LayerKind::mlp ? bw.mlp_w_out : bw.attn_w_out;
  v.value_projection =
      matmul_bt(normalize_rows(model.weights.class_embed), normalize_rows(v.values));
  return v;
}

/// Views for every layer, ordered by layer index.
inline std::vector<MemoryView> build_memory_views(const Model& model) {
  std::vector<MemoryView> views;
  for (std::size_t b = 0; b < model.config.depth; ++b) {
    views.push_back(make_memory_view(model, b, LayerKind::attn));
    views.push_back(make_memory_view(model, b, LayerKind::mlp));
  }
  return views;
}

/// Per class: the best cosine similarity between the class prototype and any
/// value vector of the layer.
inline std::vector<float> class_value_agreement(const MemoryView& view) {
  const Tensor& p = view.value_projection;
  std::vector<float> out(p.rows());
  for (std::size_t c = 0; c < p.rows(); ++c) {
    const auto row = p.row(c);
    out[c] = *std::max_element(row.begin(), row.end());
  }
  return out;
}

/// Mean class-value agreement per layer of freshly initialized models of the
/// same architecture, averaged over `seeds` seeds.
inline std::vector<double> random_class_value_baseline(const ModelConfig& config,
                                                       std::size_t seeds = 10,
                                                       std::uint64_t first_seed = 1000) {
  std::vector<double> mean(2 * config.depth, 0.0);
  for (std::size_t s = 0; s < seeds; ++s) {
    const Model m = synthesize_random_model(config, first_seed + s);
    for (const MemoryView& v : build_memory_views(m)) {
      const auto agree = class_value_agreement(v);
      double sum = 0.0;
      for (float a : agree) sum += a;
      mean[v.layer_index()] += sum / double(agree.size()) / double(seeds);
    }
  }
  return mean;
}

/// Top-k classes of every value vector, by projection logit.
inline std::vector<std::vector<std::size_t>> value_vector_top_classes(const MemoryView& view,
                                                                      std::size_t k) {
  const std::size_t classes = view.value_projection.rows();
  if (k == 0 || k > classes) fail(ErrorCode::invalid_argument, "k must be in [1, |C|]");
  std::vector<std::vector<std::size_t>> out(view.num_memories());
  for (std::size_t j = 0; j < out.size(); ++j) {
    const auto logits = view.value_logits(j);
    out[j] = top_k(std::span<const float>(logits), k);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Inference-time metrics

enum class Quantifier { any, all };
enum class KeyRanking { signed_desc, absolute };

struct MemoryMetricOptions {
  std::size_t k_keys = 5;
  std::size_t k_logits = 5;
  Quantifier quantifier = Quantifier::any;
  KeyRanking ranking = KeyRanking::signed_desc;
};

/// Memory coefficients of a layer for one trace: T x |M|.
inline const Tensor& layer_coefficients(const ForwardTrace& trace, const MemoryView& view) {
  if (view.block >= trace.blocks.size()) fail(ErrorCode::invalid_argument, "block out of range");
  const BlockTrace& bt = trace.blocks[view.block];
  const Tensor& c = view.kind == LayerKind::mlp ? bt.mlp_coeffs : bt.attn_coeffs;
  if (c.empty()) {
    fail(ErrorCode::missing_capture,
         "trace lacks " + std::string(layer_kind_name(view.kind)) + " coefficients for block " +
             std::to_string(view.block));
  }
  return c;
}

/// Indices of the k most activated memories in one coefficient row.
inline std::vector<std::size_t> most_activated(std::span<const float> coeffs, std::size_t k,
                                               KeyRanking ranking) {
  if (ranking == KeyRanking::signed_desc) return top_k(coeffs, k);
  std::vector<float> mag(coeffs.size());
  for (std::size_t i = 0; i < mag.size(); ++i) mag[i] = std::abs(coeffs[i]);
  return top_k(std::span<const float>(mag), k);
}

/// Precomputed per-memory class sets used by the agreement metrics.
struct ValueClassIndex {
  std::vector<std::vector<std::size_t>> top;  // top-k_logits classes per memory
  std::vector<std::size_t> top1;

  ValueClassIndex(const MemoryView& view, std::size_t k_logits) {
    top = value_vector_top_classes(view, std::min(k_logits, view.value_projection.rows()));
    top1.reserve(top.size());
    for (const auto& t : top) top1.push_back(t.front());
  }

  bool contains(std::size_t memory, std::size_t cls) const {
    const auto& t = top[memory];
    return std::find(t.begin(), t.end(), cls) != t.end();
  }
};

struct LayerRate {
  std::size_t layer = 0;
  RateCounter image;
  RateCounter cls;
  /// Share of agreeing image tokens per image, aligned with the traces.
  std::vector<double> per_image;
};

/// Key-value agreement: share of tokens whose k_keys most activated memories
/// carry the correct class among their value vectors' top k_logits classes.
inline std::vector<LayerRate> key_value_agreement_rate(std::span<const ForwardTrace> traces,
                                                       std::span<const MemoryView> views,
                                                       std::span<const std::int32_t> labels,
                                                       const MemoryMetricOptions& opt = {}) {
  if (traces.size() != labels.size()) fail(ErrorCode::invalid_argument, "labels not aligned");
  std::vector<LayerRate> out;
  for (const MemoryView& view : views) {
    const ValueClassIndex index(view, opt.k_logits);
    LayerRate lr;
    lr.layer = view.layer_index();
    for (std::size_t i = 0; i < traces.size(); ++i) {
      const ForwardTrace& tr = traces[i];
      const Tensor& coeffs = layer_coefficients(tr, view);
      const std::size_t correct = static_cast<std::size_t>(labels[i]);
      RateCounter img;
      for (std::size_t r = 0; r < coeffs.rows(); ++r) {
        const auto keys = most_activated(coeffs.row(r), opt.k_keys, opt.ranking);
        bool agree = opt.quantifier == Quantifier::all;
        for (std::size_t j : keys) {
          const bool hit = index.contains(j, correct);
          if (opt.quantifier == Quantifier::any && hit) agree = true;
          if (opt.quantifier == Quantifier::all && !hit) agree = false;
        }
        if (r < tr.first_image_row()) {
          lr.cls.add(agree);
        } else {
          img.add(agree);
        }
      }
      lr.image.merge(img);
      lr.per_image.push_back(img.rate());
    }
    out.push_back(std::move(lr));
  }
  return out;
}

struct CompositionalityResult {
  std::size_t layer = 0;
  RateCounter match;  // all tokens
  double compositionality() const { return 1.0 - match.rate(); }
};

/// Share of tokens whose layer-output top-1 class equals the top-1 class of at
/// least one of the k most activated value vectors.
inline std::vector<CompositionalityResult> memory_compositionality(
    const Model& model, std::span<const ForwardTrace> traces, std::span<const MemoryView> views,
    std::size_t k = 5, KeyRanking ranking = KeyRanking::signed_desc) {
  const Tensor unit_e = normalize_rows(model.weights.class_embed);
  std::vector<CompositionalityResult> out;
  for (const MemoryView& view : views) {
    const ValueClassIndex index(view, 1);
    CompositionalityResult res;
    res.layer = view.layer_index();
    for (const ForwardTrace& tr : traces) {
      const Tensor& coeffs = layer_coefficients(tr, view);
      const BlockTrace& bt = tr.blocks[view.block];
      const Tensor& layer_out = view.kind == LayerKind::mlp ? bt.mlp_out : bt.attn_out;
      const Tensor pred = matmul_bt(layer_out, unit_e);
      for (std::size_t r = 0; r < coeffs.rows(); ++r) {
        const std::size_t top = argmax(pred.row(r));
        bool matched = false;
        for (std::size_t j : most_activated(coeffs.row(r), k, ranking)) {
          if (index.top1[j] == top) matched = true;
        }
        res.match.add(matched);
      }
    }
    out.push_back(res);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Correct vs misclassified samples

struct AgreementSplit {
  std::size_t layer = 0;
  std::size_t n_correct = 0, n_incorrect = 0;
  double mean_correct = 0.0, mean_incorrect = 0.0;
  double difference = 0.0;  // correct - incorrect
  double p_value = 1.0;     // two-sided permutation test
  /// False when either split is empty; difference and p_value are then unset.
  bool defined = false;
};

/// Per-layer agreement split by whether the model classified the image
/// correctly, with a two-sided permutation test on the mean difference.
inline std::vector<AgreementSplit> agreement_vs_accuracy(std::span<const LayerRate> rates,
                                                         const std::vector<bool>& correct,
                                                         std::size_t shuffles = 10000,
                                                         std::uint64_t seed = 0) {
  std::vector<AgreementSplit> out;
  for (const LayerRate& lr : rates) {
    if (lr.per_image.size() != correct.size()) {
      fail(ErrorCode::invalid_argument, "per-image rates not aligned with predictions");
    }
    AgreementSplit s;
    s.layer = lr.layer;
    const std::size_t n = correct.size();
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      total += lr.per_image[i];
      if (correct[i]) {
        ++s.n_correct;
        s.mean_correct += lr.per_image[i];
      } else {
        ++s.n_incorrect;
        s.mean_incorrect += lr.per_image[i];
      }
    }
    if (s.n_correct == 0 || s.n_incorrect == 0) {
      out.push_back(s);
      continue;
    }
    s.defined = true;
    s.mean_correct /= double(s.n_correct);
    s.mean_incorrect /= double(s.n_incorrect);
    s.difference = s.mean_correct - s.mean_incorrect;

    auto diff_of = [&](double group_sum) {
      const double a = group_sum / double(s.n_correct);
      const double b = (total - group_sum) / double(s.n_incorrect);
      return a - b;
    };
    // Tolerance absorbs rounding when permuted sums equal the observed one.
    const double observed = std::abs(s.difference) - 1e-12;
    std::mt19937_64 rng(seed + lr.layer);
    std::vector<std::size_t> idx(n);
    std::size_t extreme = 0;
    for (std::size_t t = 0; t < shuffles; ++t) {
      std::iota(idx.begin(), idx.end(), std::size_t{0});
      std::shuffle(idx.begin(), idx.end(), rng);
      double group = 0.0;
      for (std::size_t i = 0; i < s.n_correct; ++i) group += lr.per_image[idx[i]];
      if (std::abs(diff_of(group)) >= observed) ++extreme;
    }
    s.p_value = double(extreme + 1) / double(shuffles + 1);
    out.push_back(s);
  }
  return out;
}

}  // namespace vitlens
