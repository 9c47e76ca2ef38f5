#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "oracle/naive_vit.hpp"
#include "vitlens/vitlens.hpp"

namespace fixtures {

using vitlens::Tensor;

/// depth 2, d 16, 2 heads, n = 4 image tokens, |C| = 5.
inline vitlens::ModelConfig tiny_config(vitlens::HeadSource head = vitlens::HeadSource::cls) {
  vitlens::ModelConfig c;
  c.depth = 2;
  c.hidden_dim = 16;
  c.num_heads = 2;
  c.mlp_dim = 32;
  c.patch_size = 2;
  c.image_size = 4;
  c.num_classes = 5;
  c.head_source = head;
  c.ln_eps = 1e-6f;
  return c;
}

inline Tensor random_tensor(vitlens::Shape shape, std::mt19937_64& rng, double stddev = 1.0) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor t(std::move(shape));
  for (float& v : t.storage()) v = static_cast<float>(dist(rng));
  return t;
}

inline Tensor random_image(const vitlens::ModelConfig& c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return random_tensor({3, c.image_size, c.image_size}, rng);
}

inline oracle::Mat to_mat(const Tensor& t) {
  oracle::Mat m(t.rows(), oracle::Vec(t.cols()));
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m[i][j] = t.at(i, j);
  return m;
}

inline double max_abs_diff(const Tensor& t, const oracle::Mat& m) {
  double worst = 0;
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j)
      worst = std::max(worst, std::abs(double(t.at(i, j)) - m[i][j]));
  return worst;
}

/// Model with every block weight zero, so blocks pass tokens through
/// unchanged. Used to hand-build fixtures.
inline vitlens::Model zero_model(const vitlens::ModelConfig& c) {
  vitlens::Model m = vitlens::synthesize_random_model(c, 0);
  auto zero = [](Tensor& t) { std::fill(t.storage().begin(), t.storage().end(), 0.0f); };
  zero(m.weights.patch_proj);
  zero(m.weights.patch_bias);
  if (m.weights.cls_init) zero(*m.weights.cls_init);
  zero(m.weights.pos_embed);
  for (auto& b : m.weights.blocks) {
    for (Tensor* t : {&b.w_q, &b.w_k, &b.w_v, &b.b_q, &b.b_k, &b.b_v, &b.attn_w_out,
                      &b.attn_b_out, &b.mlp_w_inp, &b.mlp_b_inp, &b.mlp_w_out, &b.mlp_b_out,
                      &b.ln1.beta, &b.ln2.beta}) {
      zero(*t);
    }
  }
  zero(m.weights.final_ln.beta);
  zero(m.weights.class_embed);
  zero(m.weights.class_bias);
  return m;
}

/// GAP model over 16 image tokens whose prediction is carried by a single
/// designated patch: every image is zero except that patch, whose first
/// channel-0 pixels one-hot encode the label. E is the identity over d = |C| = 4.
struct DesignatedTokenFixture {
  static constexpr std::size_t kDesignated = 5;
  vitlens::Model model;
  vitlens::Dataset dataset;
  std::vector<std::vector<float>> importance;
};

inline DesignatedTokenFixture designated_token_fixture(std::size_t images = 40) {
  vitlens::ModelConfig c;
  c.depth = 1;
  c.hidden_dim = 4;
  c.num_heads = 1;
  c.mlp_dim = 4;
  c.patch_size = 2;
  c.image_size = 8;
  c.num_classes = 4;
  c.head_source = vitlens::HeadSource::gap;
  DesignatedTokenFixture f;
  f.model = zero_model(c);
  // channel 0, pixels (0,0) (0,1) (1,0) (1,1) of each patch feed dims 0..3.
  for (std::size_t j = 0; j < 4; ++j) f.model.weights.patch_proj.at(j, j) = 1.0f;
  for (std::size_t j = 0; j < 4; ++j) f.model.weights.class_embed.at(j, j) = 1.0f;

  f.dataset.images = Tensor({images, 3, c.image_size, c.image_size});
  f.dataset.num_patches = c.num_patches();
  const std::size_t g = c.grid();
  const std::size_t py = DesignatedTokenFixture::kDesignated / g;
  const std::size_t px = DesignatedTokenFixture::kDesignated % g;
  for (std::size_t i = 0; i < images; ++i) {
    const auto label = static_cast<std::int32_t>(i % c.num_classes);
    f.dataset.labels.push_back(label);
    const std::size_t y = py * 2 + std::size_t(label) / 2, x = px * 2 + std::size_t(label) % 2;
    f.dataset.images[((i * 3 + 0) * c.image_size + y) * c.image_size + x] = 1.0f;
    std::vector<float> imp(c.num_patches(), 0.0f);
    imp[DesignatedTokenFixture::kDesignated] = 1.0f;
    f.importance.push_back(imp);
  }
  return f;
}

}  // namespace fixtures
