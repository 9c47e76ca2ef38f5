#pragma once

// Traced pre-LN ViT forward pass.
//
// Per block b, for every token:
//   o_attn    = MHSA(LN1(x_{b-1}))
//   x'_b      = o_attn + x_{b-1}
//   o_mlp     = MLP(LN2(x'_b))
//   x_b       = o_mlp + x'_b
// followed by a final LN and the class head E * h + bias, where h is the
// [CLS] state or the mean of the image-token states (GAP).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "vitlens/container.hpp"
#include "vitlens/error.hpp"
#include "vitlens/model.hpp"
#include "vitlens/parallel.hpp"
#include "vitlens/tensor.hpp"

namespace vitlens {

/// Post-softmax edits to the attention weights.
struct AttentionOverride {
  /// Zero A[i][j] for image tokens i != j.
  bool zero_image_to_image = false;
  /// Zero the weight every image token puts on [CLS].
  bool zero_image_to_cls = false;
  /// Zero the weights [CLS] puts on image tokens.
  bool zero_cls_to_image = false;
  /// Elementwise multiplier, heads x seq x seq.
  std::optional<Tensor> custom_mask;
  /// Rescale edited rows to sum to one (rows that became all-zero stay zero).
  bool renormalize = false;
  /// Blocks the override applies to; nullopt means every block.
  std::optional<std::set<std::size_t>> blocks;

  bool active() const {
    return zero_image_to_image || zero_image_to_cls || zero_cls_to_image ||
           custom_mask.has_value();
  }
  bool applies_to(std::size_t block) const {
    return active() && (!blocks || blocks->contains(block));
  }
};

/// Image tokens kept in the sequence, as patch indices in [0, n). Removal
/// happens after the position embeddings are added; [CLS] is always kept.
struct TokenFilter {
  std::optional<std::vector<std::size_t>> kept;

  static TokenFilter keep(std::vector<std::size_t> patches) {
    return TokenFilter{std::move(patches)};
  }
};

struct ForwardOptions {
  bool capture_mlp_coeffs = true;
};

struct BlockTrace {
  Tensor residual_in;    // x_{b-1}, T x d
  Tensor attn_weights;   // heads x T x T, as used (after any override)
  Tensor attn_coeffs;    // hconcat[A^h V^h], T x d
  Tensor attn_out;       // o_attn, T x d
  Tensor residual_mid;   // x'_b
  Tensor mlp_coeffs;     // GELU(LN2(x') W_inp + b), T x |M| (may be empty)
  Tensor mlp_out;        // o_mlp
  Tensor residual_out;   // x_b
};

struct ForwardTrace {
  bool has_cls = true;
  /// Patch index of each image-token row, in sequence order.
  std::vector<std::size_t> patch_ids;
  Tensor tokens_in;  // T x d
  std::vector<BlockTrace> blocks;
  Tensor final_states;  // final LN applied, T x d
  Tensor head_input;    // d
  Tensor logits;        // |C|

  std::size_t seq_len() const { return tokens_in.rows(); }
  std::size_t first_image_row() const { return has_cls ? 1 : 0; }
  std::size_t num_image_tokens() const { return patch_ids.size(); }
  std::size_t prediction() const { return argmax(logits.data()); }
};

/// Splits a 3 x H x W image into n row-major patches, each flattened in
/// (channel, row, column) order.
inline Tensor patchify(const ModelConfig& config, const Tensor& image) {
  const std::size_t s = config.image_size, p = config.patch_size, g = config.grid();
  if (image.shape() != Shape{3, s, s}) {
    fail(ErrorCode::shape_conflict, "image shape " + shape_string(image.shape()) +
                                        " does not match config [3x" + std::to_string(s) +
                                        "x" + std::to_string(s) + "]");
  }
  Tensor patches({g * g, config.patch_dim()});
  for (std::size_t gy = 0; gy < g; ++gy) {
    for (std::size_t gx = 0; gx < g; ++gx) {
      auto out = patches.row(gy * g + gx);
      std::size_t k = 0;
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < p; ++y)
          for (std::size_t x = 0; x < p; ++x)
            out[k++] = image[(c * s + gy * p + y) * s + gx * p + x];
    }
  }
  return patches;
}

/// Token embeddings plus position embeddings, then the token filter.
inline Tensor embed_tokens(const Model& model, const Tensor& image,
                           const TokenFilter& filter, std::vector<std::size_t>& patch_ids) {
  const ModelConfig& cfg = model.config;
  const ViTWeights& w = model.weights;
  const Tensor patches = patchify(cfg, image);
  Tensor proj = matmul_bt(patches, w.patch_proj);
  add_row_bias(proj, w.patch_bias);

  const std::size_t n = cfg.num_patches(), d = cfg.hidden_dim;
  const std::size_t offset = cfg.has_cls() ? 1 : 0;
  if (filter.kept) {
    patch_ids = *filter.kept;
    std::sort(patch_ids.begin(), patch_ids.end());
    if (std::adjacent_find(patch_ids.begin(), patch_ids.end()) != patch_ids.end()) {
      fail(ErrorCode::invalid_argument, "token filter indices must be unique");
    }
    if (!patch_ids.empty() && patch_ids.back() >= n) {
      fail(ErrorCode::invalid_argument, "token filter index out of range");
    }
  } else {
    patch_ids.resize(n);
    for (std::size_t i = 0; i < n; ++i) patch_ids[i] = i;
  }
  if (patch_ids.empty()) fail(ErrorCode::empty_sequence, "empty sequence: no image tokens kept");

  Tensor tokens({offset + patch_ids.size(), d});
  if (cfg.has_cls()) {
    for (std::size_t j = 0; j < d; ++j) {
      tokens.at(0, j) = (*w.cls_init)[j] + w.pos_embed.at(0, j);
    }
  }
  for (std::size_t r = 0; r < patch_ids.size(); ++r) {
    const std::size_t p = patch_ids[r];
    for (std::size_t j = 0; j < d; ++j) {
      tokens.at(offset + r, j) = proj.at(p, j) + w.pos_embed.at(offset + p, j);
    }
  }
  return tokens;
}

/// Scaled dot-product attention weights of every head for the normalized
/// input `x` (T x d): heads x T x T, rows summing to one.
inline Tensor attention_weights(const BlockWeights& bw, const Tensor& x, std::size_t heads) {
  Tensor q = matmul(x, bw.w_q);
  add_row_bias(q, bw.b_q);
  Tensor k = matmul(x, bw.w_k);
  add_row_bias(k, bw.b_k);
  const std::size_t t = x.rows(), d = x.cols(), hd = d / heads;
  const double scale = 1.0 / std::sqrt(double(hd));
  Tensor scores({heads, t, t});
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < t; ++i) {
      for (std::size_t j = 0; j < t; ++j) {
        double acc = 0.0;
        for (std::size_t c = h * hd; c < (h + 1) * hd; ++c) acc += double(q.at(i, c)) * k.at(j, c);
        scores[(h * t + i) * t + j] = static_cast<float>(acc * scale);
      }
    }
  }
  return softmax(scores, 2);
}

struct KeyValueOutput {
  Tensor coeffs;  // memory coefficients, T x |M|
  Tensor out;     // coeffs * W_out + b_out
};

/// MHSA read as a key-value memory: coefficients hconcat[A^h (X W_V^h + b_V^h)]
/// (|M| = d columns) multiplied with the value vectors, the rows of W_out.
/// `x` is the normalized block input, `attn` is heads x T x T.
inline KeyValueOutput mhsa_kv_form(const BlockWeights& bw, const Tensor& x, const Tensor& attn) {
  const std::size_t t = x.rows(), d = x.cols();
  if (attn.rank() != 3 || attn.dim(1) != t || attn.dim(2) != t || d % attn.dim(0) != 0) {
    fail(ErrorCode::dimension, "attention " + shape_string(attn.shape()) +
                                   " inconsistent with input " + shape_string(x.shape()));
  }
  const std::size_t heads = attn.dim(0), hd = d / heads;
  Tensor v = matmul(x, bw.w_v);
  add_row_bias(v, bw.b_v);
  Tensor coeffs({t, d});
  std::vector<double> acc(hd);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < t; ++i) {
      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::size_t j = 0; j < t; ++j) {
        const double a = attn[(h * t + i) * t + j];
        if (a == 0.0) continue;
        for (std::size_t c = 0; c < hd; ++c) acc[c] += a * v.at(j, h * hd + c);
      }
      for (std::size_t c = 0; c < hd; ++c) coeffs.at(i, h * hd + c) = static_cast<float>(acc[c]);
    }
  }
  Tensor out = matmul(coeffs, bw.attn_w_out);
  add_row_bias(out, bw.attn_b_out);
  return {std::move(coeffs), std::move(out)};
}

/// MLP read as a key-value memory: coefficients GELU(X W_inp + b_inp), values
/// the rows of W_out.
inline KeyValueOutput mlp_kv_form(const BlockWeights& bw, const Tensor& x) {
  Tensor pre = matmul(x, bw.mlp_w_inp);
  add_row_bias(pre, bw.mlp_b_inp);
  Tensor coeffs = gelu(pre);
  Tensor out = matmul(coeffs, bw.mlp_w_out);
  add_row_bias(out, bw.mlp_b_out);
  return {std::move(coeffs), std::move(out)};
}

namespace detail {

inline void apply_override(const AttentionOverride& ov, bool has_cls, Tensor& attn) {
  const std::size_t heads = attn.dim(0), t = attn.dim(1);
  const std::size_t first = has_cls ? 1 : 0;
  if (ov.custom_mask && ov.custom_mask->shape() != attn.shape()) {
    fail(ErrorCode::dimension, "custom attention mask " +
                                   shape_string(ov.custom_mask->shape()) +
                                   " does not match attention " + shape_string(attn.shape()));
  }
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < t; ++i) {
      float* row = &attn.storage()[(h * t + i) * t];
      if (i >= first) {
        if (ov.zero_image_to_image) {
          for (std::size_t j = first; j < t; ++j)
            if (j != i) row[j] = 0.0f;
        }
        if (ov.zero_image_to_cls && has_cls) row[0] = 0.0f;
      } else if (ov.zero_cls_to_image) {
        for (std::size_t j = 1; j < t; ++j) row[j] = 0.0f;
      }
      if (ov.custom_mask) {
        const float* m = &ov.custom_mask->storage()[(h * t + i) * t];
        for (std::size_t j = 0; j < t; ++j) row[j] *= m[j];
      }
      if (ov.renormalize) {
        double sum = 0.0;
        for (std::size_t j = 0; j < t; ++j) sum += row[j];
        if (sum > 0.0)
          for (std::size_t j = 0; j < t; ++j) row[j] = static_cast<float>(row[j] / sum);
      }
    }
  }
}

}  // namespace detail

inline ForwardTrace forward(const Model& model, const Tensor& image,
                            const AttentionOverride& override_ = {},
                            const TokenFilter& filter = {},
                            const ForwardOptions& options = {}) {
  const ModelConfig& cfg = model.config;
  const ViTWeights& w = model.weights;
  if ((override_.zero_image_to_cls || override_.zero_cls_to_image) && !cfg.has_cls()) {
    fail(ErrorCode::inapplicable, "mode inapplicable: [CLS] override on a GAP model");
  }
  if (override_.blocks) {
    for (std::size_t b : *override_.blocks) {
      if (b >= cfg.depth) fail(ErrorCode::invalid_argument, "override block out of range");
    }
  }

  ForwardTrace trace;
  trace.has_cls = cfg.has_cls();
  trace.tokens_in = embed_tokens(model, image, filter, trace.patch_ids);
  trace.blocks.reserve(cfg.depth);

  Tensor x = trace.tokens_in;
  for (std::size_t b = 0; b < cfg.depth; ++b) {
    const BlockWeights& bw = w.blocks[b];
    BlockTrace bt;
    bt.residual_in = x;
    const Tensor h1 = layer_norm(x, bw.ln1.gamma, bw.ln1.beta, cfg.ln_eps);
    bt.attn_weights = attention_weights(bw, h1, cfg.num_heads);
    if (override_.applies_to(b)) detail::apply_override(override_, trace.has_cls, bt.attn_weights);
    auto attn = mhsa_kv_form(bw, h1, bt.attn_weights);
    bt.attn_coeffs = std::move(attn.coeffs);
    bt.attn_out = std::move(attn.out);
    bt.residual_mid = add(bt.attn_out, x);

    const Tensor h2 = layer_norm(bt.residual_mid, bw.ln2.gamma, bw.ln2.beta, cfg.ln_eps);
    auto mlp = mlp_kv_form(bw, h2);
    if (options.capture_mlp_coeffs) bt.mlp_coeffs = std::move(mlp.coeffs);
    bt.mlp_out = std::move(mlp.out);
    bt.residual_out = add(bt.mlp_out, bt.residual_mid);
    x = bt.residual_out;
    trace.blocks.push_back(std::move(bt));
  }

  trace.final_states = layer_norm(x, w.final_ln.gamma, w.final_ln.beta, cfg.ln_eps);
  const std::size_t d = cfg.hidden_dim;
  trace.head_input = Tensor({d});
  if (cfg.has_cls()) {
    std::copy_n(trace.final_states.row(0).begin(), d, trace.head_input.storage().begin());
  } else {
    std::vector<double> mean(d, 0.0);
    for (std::size_t r = 0; r < trace.seq_len(); ++r)
      for (std::size_t j = 0; j < d; ++j) mean[j] += trace.final_states.at(r, j);
    for (std::size_t j = 0; j < d; ++j) {
      trace.head_input[j] = static_cast<float>(mean[j] / double(trace.seq_len()));
    }
  }
  Tensor logits = matmul_bt(trace.head_input.reshaped({1, d}), w.class_embed);
  add_row_bias(logits, w.class_bias);
  trace.logits = logits.reshaped({cfg.num_classes});
  return trace;
}

/// Serializes a trace; tensor names are "trace.<capture>" and
/// "trace.block.<b>.<capture>".
inline TensorContainer trace_to_container(const ForwardTrace& trace) {
  TensorContainer c;
  c.metadata["trace.has_cls"] = trace.has_cls ? "1" : "0";
  c.add_f32("trace.tokens_in", trace.tokens_in);
  std::vector<std::int32_t> ids(trace.patch_ids.begin(), trace.patch_ids.end());
  c.add_i32("trace.patch_ids", {ids.size()}, ids);
  for (std::size_t b = 0; b < trace.blocks.size(); ++b) {
    const BlockTrace& bt = trace.blocks[b];
    const std::string p = "trace.block." + std::to_string(b) + ".";
    c.add_f32(p + "residual_in", bt.residual_in);
    c.add_f32(p + "attn_weights", bt.attn_weights);
    c.add_f32(p + "attn_coeffs", bt.attn_coeffs);
    c.add_f32(p + "attn_out", bt.attn_out);
    c.add_f32(p + "residual_mid", bt.residual_mid);
    if (!bt.mlp_coeffs.empty()) c.add_f32(p + "mlp_coeffs", bt.mlp_coeffs);
    c.add_f32(p + "mlp_out", bt.mlp_out);
    c.add_f32(p + "residual_out", bt.residual_out);
  }
  c.add_f32("trace.final_states", trace.final_states);
  c.add_f32("trace.head_input", trace.head_input);
  c.add_f32("trace.logits", trace.logits);
  return c;
}

/// Reference activations recorded by an external implementation: "images"
/// (k x 3 x H x W), "logits" (k x |C|) and optionally "hidden.block.<b>"
/// (k x T x d, block outputs).
struct ParityReport {
  std::vector<double> logit_error;   // per image, max abs difference
  std::vector<double> hidden_error;  // per image, over recorded blocks (0 if none)
  std::vector<std::size_t> hidden_blocks;
  double tolerance = 0.0;
  bool pass = false;
};

inline ParityReport check_reference(const Model& model, const TensorContainer& reference,
                                    double tolerance = 1e-3, std::size_t threads = 1) {
  const Tensor images = reference.get_f32("images");
  const Tensor logits = reference.get_f32("logits");
  const ModelConfig& cfg = model.config;
  if (images.rank() != 4 || logits.rank() != 2 || logits.rows() != images.dim(0) ||
      logits.cols() != cfg.num_classes) {
    fail(ErrorCode::shape_conflict, "reference images/logits do not match the model");
  }
  const std::size_t k = images.dim(0);
  ParityReport rep;
  rep.tolerance = tolerance;
  std::vector<Tensor> hidden;
  for (std::size_t b = 0; b < cfg.depth; ++b) {
    const std::string name = "hidden.block." + std::to_string(b);
    if (!reference.contains(name)) continue;
    Tensor h = reference.get_f32(name);
    if (h.shape() != Shape{k, cfg.seq_len(), cfg.hidden_dim}) {
      fail(ErrorCode::shape_conflict, name + " has shape " + shape_string(h.shape()));
    }
    rep.hidden_blocks.push_back(b);
    hidden.push_back(std::move(h));
  }
  rep.logit_error.assign(k, 0.0);
  rep.hidden_error.assign(k, 0.0);
  parallel_for(k, threads, [&](std::size_t i) {
    const auto px = images.row(i);
    const Tensor image({images.dim(1), images.dim(2), images.dim(3)},
                       std::vector<float>(px.begin(), px.end()));
    const ForwardTrace tr = forward(model, image, {}, {}, ForwardOptions{.capture_mlp_coeffs = false});
    for (std::size_t c = 0; c < cfg.num_classes; ++c) {
      rep.logit_error[i] =
          std::max(rep.logit_error[i], std::abs(double(tr.logits[c]) - logits.at(i, c)));
    }
    for (std::size_t h = 0; h < hidden.size(); ++h) {
      const auto want = hidden[h].row(i);
      const auto got = tr.blocks[rep.hidden_blocks[h]].residual_out.data();
      for (std::size_t e = 0; e < got.size(); ++e) {
        rep.hidden_error[i] = std::max(rep.hidden_error[i], std::abs(double(got[e]) - want[e]));
      }
    }
  });
  rep.pass = true;
  for (std::size_t i = 0; i < k; ++i) {
    if (rep.logit_error[i] > tolerance || rep.hidden_error[i] > tolerance) rep.pass = false;
  }
  return rep;
}

/// Reference container produced by this implementation, for round-trip tests.
inline TensorContainer record_reference(const Model& model, const Tensor& images,
                                        std::span<const std::size_t> hidden_blocks = {}) {
  const std::size_t k = images.dim(0);
  const ModelConfig& cfg = model.config;
  Tensor logits({k, cfg.num_classes});
  std::vector<Tensor> hidden;
  for (std::size_t i = 0; i < hidden_blocks.size(); ++i) {
    hidden.emplace_back(Shape{k, cfg.seq_len(), cfg.hidden_dim});
  }
  for (std::size_t i = 0; i < k; ++i) {
    const auto px = images.row(i);
    const ForwardTrace tr =
        forward(model, Tensor({images.dim(1), images.dim(2), images.dim(3)},
                              std::vector<float>(px.begin(), px.end())));
    std::copy(tr.logits.data().begin(), tr.logits.data().end(), logits.row(i).begin());
    for (std::size_t h = 0; h < hidden_blocks.size(); ++h) {
      const auto src = tr.blocks.at(hidden_blocks[h]).residual_out.data();
      std::copy(src.begin(), src.end(), hidden[h].row(i).begin());
    }
  }
  TensorContainer c;
  c.add_f32("images", images);
  c.add_f32("logits", logits);
  for (std::size_t h = 0; h < hidden_blocks.size(); ++h) {
    c.add_f32("hidden.block." + std::to_string(hidden_blocks[h]), hidden[h]);
  }
  return c;
}

/// Forward pass over every dataset image on `threads` workers; trace i
/// belongs to image i.
inline std::vector<ForwardTrace> trace_dataset(const Model& model, const Dataset& dataset,
                                               const AttentionOverride& override_ = {},
                                               const ForwardOptions& options = {},
                                               std::size_t threads = 1) {
  std::vector<ForwardTrace> traces(dataset.size());
  parallel_for(dataset.size(), threads, [&](std::size_t i) {
    traces[i] = forward(model, dataset.image(i), override_, {}, options);
  });
  return traces;
}

}  // namespace vitlens
