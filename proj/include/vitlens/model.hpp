#pragma once

// ViT architecture description, parameter set, datasets, and their mapping
// onto VTNS1 containers. Tensor names follow docs/format.md.
//
// Projection matrices are stored input-major (d_in x d_out) and applied as
// X * W, except for the patch projection (d x 3p^2) and the class embedding
// E (|C| x d), which are applied as W * x.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <zlib.h>

#include "vitlens/container.hpp"
#include "vitlens/error.hpp"
#include "vitlens/tensor.hpp"

namespace vitlens {

enum class HeadSource { cls, gap };

struct ModelConfig {
  std::size_t depth = 0;
  std::size_t hidden_dim = 0;
  std::size_t num_heads = 0;
  std::size_t mlp_dim = 0;
  std::size_t patch_size = 0;
  std::size_t image_size = 0;
  std::size_t num_classes = 0;
  HeadSource head_source = HeadSource::cls;
  float ln_eps = 1e-6f;

  bool has_cls() const { return head_source == HeadSource::cls; }
  std::size_t grid() const { return image_size / patch_size; }
  /// Number of image tokens n.
  std::size_t num_patches() const { return grid() * grid(); }
  /// Sequence length including [CLS] when present.
  std::size_t seq_len() const { return num_patches() + (has_cls() ? 1 : 0); }
  std::size_t head_dim() const { return hidden_dim / num_heads; }
  std::size_t patch_dim() const { return 3 * patch_size * patch_size; }

  void validate() const {
    auto bad = [](const std::string& m) { fail(ErrorCode::invalid_config, m); };
    if (depth < 1) bad("depth must be >= 1");
    if (hidden_dim < 1 || num_heads < 1 || mlp_dim < 1) bad("dimensions must be >= 1");
    if (hidden_dim % num_heads != 0) bad("hidden_dim not divisible by num_heads");
    if (patch_size < 1 || image_size % patch_size != 0) {
      bad("image_size not divisible by patch_size");
    }
    if (num_classes < 2) bad("num_classes must be >= 2");
    if (!(ln_eps > 0.0f)) bad("ln_eps must be positive");
  }

  bool operator==(const ModelConfig&) const = default;
};

struct LayerNormWeights {
  Tensor gamma, beta;
};

struct BlockWeights {
  LayerNormWeights ln1;
  Tensor w_q, w_k, w_v;  // d x d
  Tensor b_q, b_k, b_v;  // d
  Tensor attn_w_out;     // d x d, rows are the attention value vectors
  Tensor attn_b_out;     // d
  LayerNormWeights ln2;
  Tensor mlp_w_inp;  // d x |M|, columns are keys
  Tensor mlp_b_inp;  // |M|
  Tensor mlp_w_out;  // |M| x d, rows are values
  Tensor mlp_b_out;  // d
};

struct ViTWeights {
  Tensor patch_proj;  // d x 3p^2
  Tensor patch_bias;  // d
  std::optional<Tensor> cls_init;  // d
  Tensor pos_embed;   // seq_len x d
  std::vector<BlockWeights> blocks;
  LayerNormWeights final_ln;
  Tensor class_embed;  // E, |C| x d
  Tensor class_bias;   // |C|
};

struct Model {
  ModelConfig config;
  ViTWeights weights;
};

// ---------------------------------------------------------------------------
// Container mapping

inline std::string block_tensor(std::size_t b, const char* leaf) {
  return "block." + std::to_string(b) + "." + leaf;
}

/// Every tensor name and shape implied by a config, in canonical order.
inline std::vector<std::pair<std::string, Shape>> expected_tensors(const ModelConfig& c) {
  const std::size_t d = c.hidden_dim, m = c.mlp_dim;
  std::vector<std::pair<std::string, Shape>> out = {
      {"patch_embed.weight", {d, c.patch_dim()}},
      {"patch_embed.bias", {d}},
  };
  if (c.has_cls()) out.push_back({"cls_token", {d}});
  out.push_back({"pos_embed", {c.seq_len(), d}});
  for (std::size_t b = 0; b < c.depth; ++b) {
    out.push_back({block_tensor(b, "ln1.gamma"), {d}});
    out.push_back({block_tensor(b, "ln1.beta"), {d}});
    for (const char* w : {"attn.w_q", "attn.w_k", "attn.w_v"}) {
      out.push_back({block_tensor(b, w), {d, d}});
    }
    for (const char* w : {"attn.b_q", "attn.b_k", "attn.b_v"}) {
      out.push_back({block_tensor(b, w), {d}});
    }
    out.push_back({block_tensor(b, "attn.w_out"), {d, d}});
    out.push_back({block_tensor(b, "attn.b_out"), {d}});
    out.push_back({block_tensor(b, "ln2.gamma"), {d}});
    out.push_back({block_tensor(b, "ln2.beta"), {d}});
    out.push_back({block_tensor(b, "mlp.w_inp"), {d, m}});
    out.push_back({block_tensor(b, "mlp.b_inp"), {m}});
    out.push_back({block_tensor(b, "mlp.w_out"), {m, d}});
    out.push_back({block_tensor(b, "mlp.b_out"), {d}});
  }
  out.push_back({"final_ln.gamma", {d}});
  out.push_back({"final_ln.beta", {d}});
  out.push_back({"head.weight", {c.num_classes, d}});
  out.push_back({"head.bias", {c.num_classes}});
  return out;
}

namespace detail {

template <typename Fn>
void for_each_weight(const ModelConfig& c, ViTWeights& w, Fn&& fn) {
  fn("patch_embed.weight", w.patch_proj);
  fn("patch_embed.bias", w.patch_bias);
  if (c.has_cls()) {
    if (!w.cls_init) w.cls_init.emplace();
    fn("cls_token", *w.cls_init);
  }
  fn("pos_embed", w.pos_embed);
  w.blocks.resize(c.depth);
  for (std::size_t b = 0; b < c.depth; ++b) {
    BlockWeights& bw = w.blocks[b];
    fn(block_tensor(b, "ln1.gamma"), bw.ln1.gamma);
    fn(block_tensor(b, "ln1.beta"), bw.ln1.beta);
    fn(block_tensor(b, "attn.w_q"), bw.w_q);
    fn(block_tensor(b, "attn.w_k"), bw.w_k);
    fn(block_tensor(b, "attn.w_v"), bw.w_v);
    fn(block_tensor(b, "attn.b_q"), bw.b_q);
    fn(block_tensor(b, "attn.b_k"), bw.b_k);
    fn(block_tensor(b, "attn.b_v"), bw.b_v);
    fn(block_tensor(b, "attn.w_out"), bw.attn_w_out);
    fn(block_tensor(b, "attn.b_out"), bw.attn_b_out);
    fn(block_tensor(b, "ln2.gamma"), bw.ln2.gamma);
    fn(block_tensor(b, "ln2.beta"), bw.ln2.beta);
    fn(block_tensor(b, "mlp.w_inp"), bw.mlp_w_inp);
    fn(block_tensor(b, "mlp.b_inp"), bw.mlp_b_inp);
    fn(block_tensor(b, "mlp.w_out"), bw.mlp_w_out);
    fn(block_tensor(b, "mlp.b_out"), bw.mlp_b_out);
  }
  fn("final_ln.gamma", w.final_ln.gamma);
  fn("final_ln.beta", w.final_ln.beta);
  fn("head.weight", w.class_embed);
  fn("head.bias", w.class_bias);
}

inline std::size_t parse_size(const TensorContainer& c, const std::string& key) {
  const auto v = c.meta(key);
  if (!v) fail(ErrorCode::invalid_config, "missing metadata: " + key);
  try {
    std::size_t pos = 0;
    const long long n = std::stoll(*v, &pos);
    if (pos != v->size() || n < 0) throw std::invalid_argument(key);
    return static_cast<std::size_t>(n);
  } catch (const std::exception&) {
    fail(ErrorCode::invalid_config, "bad metadata value for " + key + ": " + *v);
  }
}

}  // namespace detail

/// CRC-32 (zlib polynomial) of a tensor's raw bytes, as 8 lowercase hex digits.
inline std::string tensor_checksum(const TensorEntry& e) {
  const uLong crc = crc32(0L, e.bytes.data(), static_cast<uInt>(e.bytes.size()));
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08lx", static_cast<unsigned long>(crc));
  return buf;
}

inline void write_config(const ModelConfig& c, TensorContainer& out) {
  out.metadata["config.depth"] = std::to_string(c.depth);
  out.metadata["config.hidden_dim"] = std::to_string(c.hidden_dim);
  out.metadata["config.num_heads"] = std::to_string(c.num_heads);
  out.metadata["config.mlp_dim"] = std::to_string(c.mlp_dim);
  out.metadata["config.patch_size"] = std::to_string(c.patch_size);
  out.metadata["config.image_size"] = std::to_string(c.image_size);
  out.metadata["config.num_classes"] = std::to_string(c.num_classes);
  out.metadata["config.head_source"] = c.has_cls() ? "cls" : "gap";
  char eps[32];
  std::snprintf(eps, sizeof eps, "%.9g", double(c.ln_eps));
  out.metadata["config.ln_eps"] = eps;
  out.metadata["config.gelu"] = "erf";
}

inline ModelConfig read_config(const TensorContainer& c) {
  ModelConfig cfg;
  cfg.depth = detail::parse_size(c, "config.depth");
  cfg.hidden_dim = detail::parse_size(c, "config.hidden_dim");
  cfg.num_heads = detail::parse_size(c, "config.num_heads");
  cfg.mlp_dim = detail::parse_size(c, "config.mlp_dim");
  cfg.patch_size = detail::parse_size(c, "config.patch_size");
  cfg.image_size = detail::parse_size(c, "config.image_size");
  cfg.num_classes = detail::parse_size(c, "config.num_classes");
  const std::string head = c.meta("config.head_source").value_or("cls");
  if (head == "cls") {
    cfg.head_source = HeadSource::cls;
  } else if (head == "gap") {
    cfg.head_source = HeadSource::gap;
  } else {
    fail(ErrorCode::invalid_config, "unknown head_source: " + head);
  }
  if (auto eps = c.meta("config.ln_eps")) {
    try {
      cfg.ln_eps = std::stof(*eps);
    } catch (const std::exception&) {
      fail(ErrorCode::invalid_config, "bad ln_eps: " + *eps);
    }
  }
  if (auto g = c.meta("config.gelu"); g && *g != "erf") {
    fail(ErrorCode::invalid_config, "unsupported gelu variant: " + *g);
  }
  cfg.validate();
  return cfg;
}

/// Serializes a model; records a checksum.<name> entry per tensor.
inline TensorContainer model_to_container(const Model& model) {
  model.config.validate();
  TensorContainer out;
  write_config(model.config, out);
  ViTWeights w = model.weights;
  detail::for_each_weight(model.config, w, [&](const std::string& name, Tensor& t) {
    out.add_f32(name, t);
  });
  for (const TensorEntry& e : out.entries()) {
    out.metadata["checksum." + e.name] = tensor_checksum(e);
  }
  return out;
}

/// Builds a model from a container. All missing tensors are reported together;
/// shapes are checked against the config and recorded checksums verified.
inline Model load_model(const TensorContainer& c) {
  Model m;
  m.config = read_config(c);
  std::string missing;
  for (const auto& [name, shape] : expected_tensors(m.config)) {
    const TensorEntry* e = c.find(name);
    if (!e) {
      missing += (missing.empty() ? "" : ", ") + name;
      continue;
    }
    if (e->shape != shape) {
      fail(ErrorCode::shape_conflict, "shape conflict: " + name + " is " +
                                          shape_string(e->shape) + ", config implies " +
                                          shape_string(shape));
    }
    if (auto sum = c.meta("checksum." + name); sum && *sum != tensor_checksum(*e)) {
      fail(ErrorCode::checksum_mismatch, "checksum mismatch: " + name);
    }
  }
  if (!missing.empty()) fail(ErrorCode::missing_tensor, "missing tensors: " + missing);
  detail::for_each_weight(m.config, m.weights, [&](const std::string& name, Tensor& t) {
    t = c.get_f32(name);
  });
  return m;
}

/// Random model with fan-in scaled Gaussian weights, unit LN gains and zero
/// LN shifts. Deterministic given the seed.
inline Model synthesize_random_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  Model m{config, {}};
  detail::for_each_weight(config, m.weights, [&](const std::string& name, Tensor& t) {
    Shape shape;
    for (const auto& [n, s] : expected_tensors(config))
      if (n == name) shape = s;
    t = Tensor(shape);
    const bool gamma = name.ends_with(".gamma");
    const bool beta = name.ends_with(".beta");
    if (gamma) {
      for (float& v : t.storage()) v = 1.0f;
      return;
    }
    if (beta) return;
    double stddev = 0.02;
    if (shape.size() == 2) {
      // W * x layout for patch/head, X * W for the rest.
      const bool out_major = name == "patch_embed.weight" || name == "head.weight";
      const std::size_t fan_in = out_major ? shape[1] : shape[0];
      stddev = 1.0 / std::sqrt(double(fan_in));
    } else if (name == "cls_token" || name.ends_with("bias") || name.find(".b_") != std::string::npos) {
      stddev = 0.1;
    }
    std::normal_distribution<double> dist(0.0, stddev);
    for (float& v : t.storage()) v = static_cast<float>(dist(rng));
  });
  return m;
}

// ---------------------------------------------------------------------------
// Datasets

enum class TokenLabel : std::int32_t { ignore = -1, context = 0, cls = 1 };

struct Dataset {
  Tensor images;                   // N x 3 x H x W, preprocessed
  std::vector<std::int32_t> labels;  // N
  std::optional<std::vector<std::int32_t>> patch_class_mask;  // N x n, row-major
  std::size_t num_patches = 0;
  std::vector<std::string> class_names;

  std::size_t size() const { return labels.size(); }

  Tensor image(std::size_t i) const {
    const auto row = images.row(i);
    return Tensor({images.dim(1), images.dim(2), images.dim(3)},
                  std::vector<float>(row.begin(), row.end()));
  }

  std::span<const std::int32_t> mask(std::size_t i) const {
    return std::span<const std::int32_t>(*patch_class_mask)
        .subspan(i * num_patches, num_patches);
  }

  /// Every mask entry is `ignore`; class/context analyses skip such images.
  bool mask_is_empty(std::size_t i) const {
    if (!patch_class_mask) return true;
    for (auto v : mask(i))
      if (v != static_cast<std::int32_t>(TokenLabel::ignore)) return false;
    return true;
  }
};

/// Reads "images", "labels" and the optional "patch_class_mask". The token
/// count is taken from the mask when present and checked against `num_patches`
/// when given (nonzero).
inline Dataset load_dataset(const TensorContainer& c, std::size_t num_patches = 0) {
  Dataset ds;
  ds.images = c.get_f32("images");
  if (ds.images.rank() != 4 || ds.images.dim(1) != 3) {
    fail(ErrorCode::shape_conflict,
         "images must be N x 3 x H x W, got " + shape_string(ds.images.shape()));
  }
  ds.labels = c.get_i32("labels");
  if (ds.labels.size() != ds.images.dim(0)) {
    fail(ErrorCode::shape_conflict, "labels count does not match images");
  }
  if (const TensorEntry* e = c.find("patch_class_mask")) {
    if (e->shape.size() != 2 || e->shape[0] != ds.size()) {
      fail(ErrorCode::shape_conflict, "patch_class_mask must be N x n");
    }
    if (num_patches != 0 && e->shape[1] != num_patches) {
      fail(ErrorCode::shape_conflict, "patch_class_mask token count " +
                                          std::to_string(e->shape[1]) + " != n = " +
                                          std::to_string(num_patches));
    }
    ds.num_patches = e->shape[1];
    ds.patch_class_mask = c.get_i32("patch_class_mask");
    for (auto v : *ds.patch_class_mask) {
      if (v < -1 || v > 1) fail(ErrorCode::invalid_argument, "mask values must be -1, 0 or 1");
    }
  } else {
    ds.num_patches = num_patches;
  }
  if (auto names = c.meta("class_names")) {
    try {
      ds.class_names = nlohmann::json::parse(*names).get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception&) {
      fail(ErrorCode::manifest_parse, "class_names metadata is not a JSON string array");
    }
  }
  return ds;
}

inline TensorContainer dataset_to_container(const Dataset& ds) {
  TensorContainer c;
  c.add_f32("images", ds.images);
  c.add_i32("labels", {ds.size()}, ds.labels);
  if (ds.patch_class_mask) {
    c.add_i32("patch_class_mask", {ds.size(), ds.num_patches}, *ds.patch_class_mask);
  }
  if (!ds.class_names.empty()) c.metadata["class_names"] = nlohmann::json(ds.class_names).dump();
  return c;
}

/// Gaussian-noise images with class-balanced labels (image i has label
/// i mod |C|) and an optional random class/context mask.
inline Dataset synthesize_dataset(const ModelConfig& config, std::size_t count,
                                  std::uint64_t seed, bool with_mask = false) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> pixel(0.0, 1.0);
  Dataset ds;
  ds.images = Tensor({count, 3, config.image_size, config.image_size});
  for (float& v : ds.images.storage()) v = static_cast<float>(pixel(rng));
  ds.labels.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    ds.labels[i] = static_cast<std::int32_t>(i % config.num_classes);
  }
  ds.num_patches = config.num_patches();
  if (with_mask) {
    std::uniform_int_distribution<int> bit(0, 1);
    std::vector<std::int32_t> mask(count * ds.num_patches);
    for (auto& v : mask) v = bit(rng);
    ds.patch_class_mask = std::move(mask);
  }
  return ds;
}

}  // namespace vitlens
