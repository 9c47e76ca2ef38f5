#pragma once

// Block- and head-wise token relevance: the negated gradient of the [CLS]
// cross-entropy loss at block b with respect to the attention weights that
// [CLS] assigns to each image token in block b's MHSA.
//
// The attention weights are treated as free variables at their forward
// values. Only the [CLS] row matters, so the backward pass runs through a
// single token: attention aggregation -> W_out -> residual -> LN2 -> MLP ->
// residual -> (final LN) -> E -> cross-entropy. Everything is evaluated in
// double from the f32 trace.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "vitlens/error.hpp"
#include "vitlens/forward.hpp"
#include "vitlens/model.hpp"
#include "vitlens/tensor.hpp"

namespace vitlens {

namespace detail {

using Vec = std::vector<double>;

struct LnCache {
  Vec xhat;
  double inv_std = 0.0;
};

inline Vec ln_forward(std::span<const double> x, const LayerNormWeights& ln, float eps,
                      LnCache& cache) {
  const std::size_t d = x.size();
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= double(d);
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= double(d);
  cache.inv_std = 1.0 / std::sqrt(var + double(eps));
  cache.xhat.resize(d);
  Vec y(d);
  for (std::size_t i = 0; i < d; ++i) {
    cache.xhat[i] = (x[i] - mean) * cache.inv_std;
    y[i] = cache.xhat[i] * ln.gamma[i] + ln.beta[i];
  }
  return y;
}

inline Vec ln_backward(const Vec& grad_out, const LayerNormWeights& ln, const LnCache& cache) {
  const std::size_t d = grad_out.size();
  Vec g(d);
  double mean_g = 0.0, mean_gx = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    g[i] = grad_out[i] * ln.gamma[i];
    mean_g += g[i];
    mean_gx += g[i] * cache.xhat[i];
  }
  mean_g /= double(d);
  mean_gx /= double(d);
  Vec dx(d);
  for (std::size_t i = 0; i < d; ++i) {
    dx[i] = cache.inv_std * (g[i] - mean_g - cache.xhat[i] * mean_gx);
  }
  return dx;
}

/// y = x * W + b for a row vector x and W stored in x out.
inline Vec row_times(std::span<const double> x, const Tensor& w, const Tensor& b) {
  const std::size_t out = w.cols();
  Vec y(out);
  for (std::size_t j = 0; j < out; ++j) y[j] = b[j];
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double xi = x[i];
    const float* wr = &w.storage()[i * out];
    for (std::size_t j = 0; j < out; ++j) y[j] += xi * wr[j];
  }
  return y;
}

/// g * W^T: gradient with respect to the input of row_times.
inline Vec times_transpose(std::span<const double> g, const Tensor& w) {
  const std::size_t in = w.rows(), out = w.cols();
  Vec dx(in, 0.0);
  for (std::size_t i = 0; i < in; ++i) {
    const float* wr = &w.storage()[i * out];
    double acc = 0.0;
    for (std::size_t j = 0; j < out; ++j) acc += g[j] * wr[j];
    dx[i] = acc;
  }
  return dx;
}

/// log-softmax cross-entropy of class c, plus d loss / d logits.
inline double cross_entropy(const Vec& logits, std::size_t c, Vec* grad) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double v : logits) sum += std::exp(v - mx);
  const double lse = mx + std::log(sum);
  if (grad) {
    grad->resize(logits.size());
    for (std::size_t k = 0; k < logits.size(); ++k) (*grad)[k] = std::exp(logits[k] - lse);
    (*grad)[c] -= 1.0;
  }
  return lse - logits[c];
}

inline Vec class_logits(const Model& model, const Vec& x) {
  const Tensor& e = model.weights.class_embed;
  Vec logits(e.rows());
  for (std::size_t k = 0; k < e.rows(); ++k) {
    double acc = model.weights.class_bias[k];
    const auto row = e.row(k);
    for (std::size_t j = 0; j < x.size(); ++j) acc += row[j] * x[j];
    logits[k] = acc;
  }
  return logits;
}

inline void require_cls(const Model& model) {
  if (!model.config.has_cls()) fail(ErrorCode::inapplicable, "requires CLS token");
}

}  // namespace detail

/// -log softmax(E * x_cls^b + bias)[c], with x_cls^b optionally passed
/// through the final LN first.
inline double cls_block_loss(const Model& model, const ForwardTrace& trace, std::size_t c,
                             std::size_t b, bool apply_final_ln = false) {
  detail::require_cls(model);
  if (b >= trace.blocks.size()) fail(ErrorCode::invalid_argument, "block out of range");
  if (c >= model.config.num_classes) fail(ErrorCode::invalid_argument, "class out of range");
  const auto row = trace.blocks[b].residual_out.row(0);
  detail::Vec x(row.begin(), row.end());
  if (apply_final_ln) {
    detail::LnCache cache;
    x = detail::ln_forward(x, model.weights.final_ln, model.config.ln_eps, cache);
  }
  return detail::cross_entropy(detail::class_logits(model, x), c, nullptr);
}

/// Relevance of block b: heads x image tokens, entry (h, j) = -d loss / d A^h[cls][j].
inline Tensor relevancy_map(const Model& model, const ForwardTrace& trace, std::size_t c,
                            std::size_t b, bool apply_final_ln = false) {
  using detail::Vec;
  detail::require_cls(model);
  const ModelConfig& cfg = model.config;
  if (b >= trace.blocks.size()) fail(ErrorCode::invalid_argument, "block out of range");
  if (c >= cfg.num_classes) fail(ErrorCode::invalid_argument, "class out of range");
  const BlockWeights& bw = model.weights.blocks[b];
  const BlockTrace& bt = trace.blocks[b];
  const std::size_t t = trace.seq_len(), d = cfg.hidden_dim, heads = cfg.num_heads,
                    hd = cfg.head_dim();

  // Values of every token, and the CLS-row aggregation.
  std::vector<Vec> values(t);
  for (std::size_t j = 0; j < t; ++j) {
    const auto xr = bt.residual_in.row(j);
    Vec x(xr.begin(), xr.end());
    detail::LnCache cache;
    const Vec u = detail::ln_forward(x, bw.ln1, cfg.ln_eps, cache);
    values[j] = detail::row_times(u, bw.w_v, bw.b_v);
  }
  Vec z(d, 0.0);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t j = 0; j < t; ++j) {
      const double a = bt.attn_weights[(h * t + 0) * t + j];
      for (std::size_t k = h * hd; k < (h + 1) * hd; ++k) z[k] += a * values[j][k];
    }

  // Forward through the rest of the block for the CLS token.
  const Vec attn_out = detail::row_times(z, bw.attn_w_out, bw.attn_b_out);
  const auto x0 = bt.residual_in.row(0);
  Vec mid(d);
  for (std::size_t k = 0; k < d; ++k) mid[k] = x0[k] + attn_out[k];
  detail::LnCache ln2;
  const Vec u2 = detail::ln_forward(mid, bw.ln2, cfg.ln_eps, ln2);
  const Vec pre = detail::row_times(u2, bw.mlp_w_inp, bw.mlp_b_inp);
  Vec act(pre.size());
  for (std::size_t k = 0; k < pre.size(); ++k) act[k] = gelu(pre[k]);
  const Vec mlp_out = detail::row_times(act, bw.mlp_w_out, bw.mlp_b_out);
  Vec out(d);
  for (std::size_t k = 0; k < d; ++k) out[k] = mid[k] + mlp_out[k];
  detail::LnCache lnf;
  const Vec y = apply_final_ln ? detail::ln_forward(out, model.weights.final_ln, cfg.ln_eps, lnf)
                               : out;

  // Backward.
  Vec dlogits;
  detail::cross_entropy(detail::class_logits(model, y), c, &dlogits);
  Vec dy(d, 0.0);
  for (std::size_t k = 0; k < dlogits.size(); ++k) {
    const auto row = model.weights.class_embed.row(k);
    for (std::size_t j = 0; j < d; ++j) dy[j] += dlogits[k] * row[j];
  }
  const Vec dout = apply_final_ln ? detail::ln_backward(dy, model.weights.final_ln, lnf) : dy;
  const Vec dact = detail::times_transpose(dout, bw.mlp_w_out);
  Vec dpre(dact.size());
  for (std::size_t k = 0; k < dact.size(); ++k) dpre[k] = dact[k] * gelu_derivative(pre[k]);
  const Vec du2 = detail::times_transpose(dpre, bw.mlp_w_inp);
  const Vec dmid_ln = detail::ln_backward(du2, bw.ln2, ln2);
  Vec dmid(d);
  for (std::size_t k = 0; k < d; ++k) dmid[k] = dout[k] + dmid_ln[k];
  const Vec dz = detail::times_transpose(dmid, bw.attn_w_out);

  const std::size_t first = trace.first_image_row();
  Tensor rel({heads, trace.num_image_tokens()});
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t j = first; j < t; ++j) {
      double g = 0.0;
      for (std::size_t k = h * hd; k < (h + 1) * hd; ++k) g += dz[k] * values[j][k];
      rel.at(h, j - first) = static_cast<float>(-g);
    }
  }
  return rel;
}

struct RelevancyMap {
  std::size_t target_class = 0;
  std::size_t grid = 0;  // map is grid x grid image tokens
  std::vector<Tensor> blocks;  // heads x n per block
  Tensor global;               // n
};

/// Sum over blocks and heads.
inline Tensor global_relevancy(std::span<const Tensor> maps) {
  if (maps.empty()) fail(ErrorCode::invalid_argument, "no relevance maps");
  const std::size_t n = maps.front().cols();
  std::vector<double> acc(n, 0.0);
  for (const Tensor& m : maps) {
    if (m.rank() != 2 || m.cols() != n) fail(ErrorCode::dimension, "relevance maps disagree");
    for (std::size_t h = 0; h < m.rows(); ++h)
      for (std::size_t j = 0; j < n; ++j) acc[j] += m.at(h, j);
  }
  Tensor g({n});
  for (std::size_t j = 0; j < n; ++j) g[j] = static_cast<float>(acc[j]);
  return g;
}

/// Per-block maps and their global sum for class c. `trace` must be an
/// unfiltered forward pass.
inline RelevancyMap compute_relevancy(const Model& model, const ForwardTrace& trace,
                                      std::size_t c, bool apply_final_ln = false) {
  if (trace.num_image_tokens() != model.config.num_patches()) {
    fail(ErrorCode::invalid_argument, "relevance needs a trace with every image token");
  }
  RelevancyMap map;
  map.target_class = c;
  map.grid = model.config.grid();
  for (std::size_t b = 0; b < trace.blocks.size(); ++b) {
    map.blocks.push_back(relevancy_map(model, trace, c, b, apply_final_ln));
  }
  map.global = global_relevancy(map.blocks);
  return map;
}

// ---------------------------------------------------------------------------
// Heatmaps

/// Min-max normalization to [0, 1]; a constant map becomes 0.5 everywhere.
inline std::vector<double> minmax_normalize(std::span<const float> v) {
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  std::vector<double> out(v.size(), 0.5);
  if (*hi > *lo) {
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = (double(v[i]) - *lo) / (double(*hi) - *lo);
  }
  return out;
}

struct GrayImage {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> pixels;
};

inline std::uint8_t to_byte(double unit) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(unit, 0.0, 1.0) * 255.0));
}

/// Writes a rows x cols map as a binary PGM, each cell `scale` x `scale` pixels.
inline void write_pgm(const std::filesystem::path& path, std::span<const float> map,
                      std::size_t rows, std::size_t cols, std::size_t scale = 1) {
  if (map.size() != rows * cols || scale == 0) {
    fail(ErrorCode::dimension, "heatmap grid does not match map size");
  }
  const auto norm = minmax_normalize(map);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::io, "cannot write " + path.string());
  out << "P5\n" << cols * scale << ' ' << rows * scale << "\n255\n";
  for (std::size_t y = 0; y < rows * scale; ++y) {
    for (std::size_t x = 0; x < cols * scale; ++x) {
      out.put(static_cast<char>(to_byte(norm[(y / scale) * cols + x / scale])));
    }
  }
  if (!out) fail(ErrorCode::io, "write failed: " + path.string());
}

inline GrayImage read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::io, "cannot open " + path.string());
  std::string magic;
  std::size_t maxval = 0;
  GrayImage img;
  in >> magic >> img.width >> img.height >> maxval;
  if (magic != "P5" || maxval != 255) fail(ErrorCode::io, "unsupported PGM: " + path.string());
  in.get();
  img.pixels.resize(img.width * img.height);
  in.read(reinterpret_cast<char*>(img.pixels.data()), std::streamsize(img.pixels.size()));
  if (!in) fail(ErrorCode::io, "truncated PGM: " + path.string());
  return img;
}

/// Writes a binary PPM: the image (min-max scaled per channel) blended at 50%
/// with the map upsampled nearest-neighbor, colored blue (low) to red (high).
inline void write_overlay_ppm(const std::filesystem::path& path, const Tensor& image,
                              std::span<const float> map, std::size_t grid) {
  if (image.rank() != 3 || image.dim(0) != 3 || map.size() != grid * grid) {
    fail(ErrorCode::dimension, "overlay: image or map shape mismatch");
  }
  const std::size_t h = image.dim(1), w = image.dim(2);
  const auto heat = minmax_normalize(map);
  std::vector<double> lo(3), hi(3);
  for (std::size_t c = 0; c < 3; ++c) {
    const auto plane = image.data().subspan(c * h * w, h * w);
    const auto [a, b] = std::minmax_element(plane.begin(), plane.end());
    lo[c] = *a;
    hi[c] = *b;
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::io, "cannot write " + path.string());
  out << "P6\n" << w << ' ' << h << "\n255\n";
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double v = heat[(y * grid / h) * grid + x * grid / w];
      const double color[3] = {v, 0.0, 1.0 - v};
      for (std::size_t c = 0; c < 3; ++c) {
        const double span = hi[c] - lo[c];
        const double pix = span > 0 ? (image[(c * h + y) * w + x] - lo[c]) / span : 0.5;
        out.put(static_cast<char>(to_byte(0.5 * pix + 0.5 * color[c])));
      }
    }
  }
  if (!out) fail(ErrorCode::io, "write failed: " + path.string());
}

}  // namespace vitlens
