#pragma once

// Few-shot linear probes on hidden states: multinomial logistic regression
// trained by full-batch gradient descent on standardized features.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "vitlens/class_lens.hpp"
#include "vitlens/container.hpp"
#include "vitlens/error.hpp"
#include "vitlens/forward.hpp"
#include "vitlens/perturb.hpp"
#include "vitlens/relevance.hpp"
#include "vitlens/tensor.hpp"

namespace vitlens {

struct ProbeRecipe {
  std::size_t epochs = 500;
  double learning_rate = 0.1;  // cosine-decayed to zero over the epochs
};

struct LinearProbe {
  std::size_t layer = 0;     // block whose output is probed
  std::size_t position = 0;  // sequence row
  Tensor weight;             // |C| x d
  Tensor bias;               // |C|
  Tensor feature_mean;       // d
  Tensor feature_inv_std;    // d
  std::size_t shots = 0;
  std::size_t epochs = 0;
  double learning_rate = 0.0;
  std::uint64_t seed = 0;
  double train_accuracy = 0.0;

  std::size_t num_classes() const { return weight.rows(); }
};

inline std::vector<double> probe_logits(const LinearProbe& probe, std::span<const float> x) {
  const std::size_t d = probe.weight.cols();
  if (x.size() != d) fail(ErrorCode::dimension, "probe input width mismatch");
  std::vector<double> z(d);
  for (std::size_t j = 0; j < d; ++j) {
    z[j] = (double(x[j]) - probe.feature_mean[j]) * probe.feature_inv_std[j];
  }
  std::vector<double> logits(probe.num_classes());
  for (std::size_t c = 0; c < logits.size(); ++c) {
    double acc = probe.bias[c];
    const auto w = probe.weight.row(c);
    for (std::size_t j = 0; j < d; ++j) acc += w[j] * z[j];
    logits[c] = acc;
  }
  return logits;
}

inline std::size_t probe_predict(const LinearProbe& probe, std::span<const float> x) {
  const auto logits = probe_logits(probe, x);
  return argmax(std::span<const double>(logits));
}

/// Identifiability score of the probe's logits.
inline double probe_identifiability(const LinearProbe& probe, std::span<const float> x,
                                    std::size_t correct) {
  const auto logits = probe_logits(probe, x);
  return identifiability_score(std::span<const double>(logits), correct);
}

inline double probe_accuracy(const LinearProbe& probe, const Tensor& features,
                             std::span<const std::int32_t> labels) {
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    hits += probe_predict(probe, features.row(i)) == std::size_t(labels[i]);
  }
  return labels.empty() ? 0.0 : double(hits) / double(labels.size());
}

/// Trains on exactly the given rows.
inline LinearProbe fit_probe(const Tensor& features, std::span<const std::int32_t> labels,
                             std::size_t num_classes, const ProbeRecipe& recipe = {}) {
  if (features.rank() != 2 || features.rows() != labels.size()) {
    fail(ErrorCode::dimension, "probe features and labels are not aligned");
  }
  const std::size_t n = features.rows(), d = features.cols();
  LinearProbe p;
  p.epochs = recipe.epochs;
  p.learning_rate = recipe.learning_rate;
  p.feature_mean = Tensor({d});
  p.feature_inv_std = Tensor({d}, 1.0f);
  for (std::size_t j = 0; j < d; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += features.at(i, j);
    mean /= double(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += std::pow(features.at(i, j) - mean, 2);
    var /= double(n);
    p.feature_mean[j] = static_cast<float>(mean);
    if (var > 1e-12) p.feature_inv_std[j] = static_cast<float>(1.0 / std::sqrt(var));
  }
  std::vector<double> z(n * d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j)
      z[i * d + j] = (double(features.at(i, j)) - p.feature_mean[j]) * p.feature_inv_std[j];

  std::vector<double> w(num_classes * d, 0.0), b(num_classes, 0.0);
  std::vector<double> gw(w.size()), gb(b.size()), prob(num_classes);
  constexpr double pi = 3.14159265358979323846;
  for (std::size_t epoch = 0; epoch < recipe.epochs; ++epoch) {
    std::fill(gw.begin(), gw.end(), 0.0);
    std::fill(gb.begin(), gb.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const double* zi = &z[i * d];
      double mx = -INFINITY;
      for (std::size_t c = 0; c < num_classes; ++c) {
        double acc = b[c];
        for (std::size_t j = 0; j < d; ++j) acc += w[c * d + j] * zi[j];
        prob[c] = acc;
        mx = std::max(mx, acc);
      }
      double sum = 0.0;
      for (double& v : prob) sum += (v = std::exp(v - mx));
      for (std::size_t c = 0; c < num_classes; ++c) {
        const double g = prob[c] / sum - (std::size_t(labels[i]) == c ? 1.0 : 0.0);
        gb[c] += g;
        for (std::size_t j = 0; j < d; ++j) gw[c * d + j] += g * zi[j];
      }
    }
    const double lr =
        recipe.learning_rate * 0.5 * (1.0 + std::cos(pi * double(epoch) / double(recipe.epochs)));
    for (std::size_t k = 0; k < w.size(); ++k) w[k] -= lr * gw[k] / double(n);
    for (std::size_t c = 0; c < num_classes; ++c) b[c] -= lr * gb[c] / double(n);
  }
  p.weight = Tensor({num_classes, d});
  p.bias = Tensor({num_classes});
  for (std::size_t k = 0; k < w.size(); ++k) p.weight[k] = static_cast<float>(w[k]);
  for (std::size_t c = 0; c < num_classes; ++c) p.bias[c] = static_cast<float>(b[c]);
  p.train_accuracy = probe_accuracy(p, features, labels);
  return p;
}

/// Row indices of `shots` examples per class, drawn uniformly and
/// reproducibly from `seed`, in ascending order.
inline std::vector<std::size_t> sample_shots(std::span<const std::int32_t> labels,
                                             std::size_t num_classes, std::size_t shots,
                                             std::uint64_t seed) {
  std::vector<std::vector<std::size_t>> by_class(num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || std::size_t(labels[i]) >= num_classes) {
      fail(ErrorCode::invalid_argument, "label out of range");
    }
    by_class[std::size_t(labels[i])].push_back(i);
  }
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> rows;
  for (std::size_t c = 0; c < num_classes; ++c) {
    auto& pool = by_class[c];
    if (pool.size() < shots) {
      fail(ErrorCode::insufficient_shots, "class " + std::to_string(c) + " has " +
                                              std::to_string(pool.size()) + " examples, needs " +
                                              std::to_string(shots));
    }
    std::shuffle(pool.begin(), pool.end(), rng);
    rows.insert(rows.end(), pool.begin(), pool.begin() + std::ptrdiff_t(shots));
  }
  std::sort(rows.begin(), rows.end());
  return rows;
}

/// Fits a probe on the rows chosen by sample_shots. `chosen` receives them.
inline LinearProbe train_probe(const Tensor& features, std::span<const std::int32_t> labels,
                               std::size_t num_classes, std::size_t shots, std::uint64_t seed,
                               const ProbeRecipe& recipe = {},
                               std::vector<std::size_t>* chosen = nullptr) {
  std::vector<std::size_t> rows = sample_shots(labels, num_classes, shots, seed);
  const Tensor x = gather_rows(features, rows);
  std::vector<std::int32_t> y;
  for (std::size_t r : rows) y.push_back(labels[r]);
  LinearProbe p = fit_probe(x, y, num_classes, recipe);
  p.shots = shots;
  p.seed = seed;
  if (chosen) *chosen = std::move(rows);
  return p;
}

// ---------------------------------------------------------------------------
// Probes over token positions

/// Block `layer` output states (T x d) of every dataset image, unfiltered.
inline std::vector<Tensor> collect_layer_states(const Model& model, const Dataset& dataset,
                                                std::size_t layer, std::size_t threads = 1) {
  if (layer >= model.config.depth) fail(ErrorCode::invalid_argument, "layer out of range");
  std::vector<Tensor> states(dataset.size());
  parallel_for(dataset.size(), threads, [&](std::size_t i) {
    ForwardTrace tr = forward(model, dataset.image(i), {}, {},
                              ForwardOptions{.capture_mlp_coeffs = false});
    states[i] = std::move(tr.blocks[layer].residual_out);
  });
  return states;
}

inline std::vector<Tensor> layer_states(std::span<const ForwardTrace> traces, std::size_t layer) {
  std::vector<Tensor> states;
  for (const auto& tr : traces) {
    if (layer >= tr.blocks.size()) fail(ErrorCode::invalid_argument, "layer out of range");
    states.push_back(tr.blocks[layer].residual_out);
  }
  return states;
}

/// Rows of one sequence position across images.
inline Tensor position_features(std::span<const Tensor> states, std::size_t position) {
  if (states.empty()) fail(ErrorCode::invalid_argument, "no hidden states");
  const std::size_t d = states.front().cols();
  Tensor x({states.size(), d});
  for (std::size_t i = 0; i < states.size(); ++i) {
    const auto row = states[i].row(position);
    std::copy(row.begin(), row.end(), x.row(i).begin());
  }
  return x;
}

/// One probe per sequence position (including [CLS]) on block `layer` states.
inline std::vector<LinearProbe> train_position_probes(std::span<const Tensor> states,
                                                      std::span<const std::int32_t> labels,
                                                      std::size_t num_classes, std::size_t layer,
                                                      std::size_t shots, std::uint64_t seed,
                                                      const ProbeRecipe& recipe = {},
                                                      std::size_t threads = 1) {
  if (states.empty()) fail(ErrorCode::invalid_argument, "no hidden states");
  const std::size_t t = states.front().rows();
  for (const auto& st : states) {
    if (st.rows() != t) fail(ErrorCode::invalid_argument, "probe states must be unfiltered");
  }
  std::vector<LinearProbe> probes(t);
  parallel_for(t, threads, [&](std::size_t pos) {
    LinearProbe p = train_probe(position_features(states, pos), labels, num_classes, shots, seed,
                                recipe);
    p.layer = layer;
    p.position = pos;
    probes[pos] = std::move(p);
  });
  return probes;
}

/// Image-token importance of one image: the probe identifiability score of
/// each image token for `label`. `states` are the probed block's outputs.
inline std::vector<float> probe_importance(std::span<const LinearProbe> probes,
                                           const Tensor& states, bool has_cls,
                                           std::size_t label) {
  const std::size_t first = has_cls ? 1 : 0;
  if (probes.size() != states.rows()) {
    fail(ErrorCode::invalid_argument, "need one probe per sequence position");
  }
  std::vector<float> out(states.rows() - first);
  for (std::size_t r = first; r < states.rows(); ++r) {
    out[r - first] = static_cast<float>(probe_identifiability(probes[r], states.row(r), label));
  }
  return out;
}

/// Global relevancy of each image for its own label.
inline std::vector<std::vector<float>> relevance_importance(const Model& model,
                                                            const Dataset& dataset,
                                                            bool apply_final_ln = false,
                                                            std::size_t threads = 1) {
  std::vector<std::vector<float>> out(dataset.size());
  parallel_for(dataset.size(), threads, [&](std::size_t i) {
    const ForwardTrace tr = forward(model, dataset.image(i), {}, {},
                                    ForwardOptions{.capture_mlp_coeffs = false});
    const RelevancyMap map =
        compute_relevancy(model, tr, std::size_t(dataset.labels[i]), apply_final_ln);
    out[i].assign(map.global.data().begin(), map.global.data().end());
  });
  return out;
}

struct ProbeComparison {
  PerturbationCurve relevance_negative, relevance_positive;
  PerturbationCurve probe_negative, probe_positive;
  /// probe AUC - relevance AUC, per direction.
  double negative_delta = 0.0, positive_delta = 0.0;
};

inline ProbeComparison probe_perturbation_comparison(
    const Model& model, const Dataset& dataset,
    const std::vector<std::vector<float>>& probe_scores,
    const std::vector<std::vector<float>>& relevance_scores,
    std::vector<double> fractions = default_removal_fractions(), std::size_t threads = 1) {
  ProbeComparison cmp;
  cmp.relevance_negative = run_ordered_removal(model, dataset, relevance_scores,
                                               RemovalDirection::negative, fractions, "relevance",
                                               threads);
  cmp.relevance_positive = run_ordered_removal(model, dataset, relevance_scores,
                                               RemovalDirection::positive, fractions, "relevance",
                                               threads);
  cmp.probe_negative = run_ordered_removal(model, dataset, probe_scores,
                                           RemovalDirection::negative, fractions, "probe", threads);
  cmp.probe_positive = run_ordered_removal(model, dataset, probe_scores,
                                           RemovalDirection::positive, fractions, "probe", threads);
  cmp.negative_delta = cmp.probe_negative.auc - cmp.relevance_negative.auc;
  cmp.positive_delta = cmp.probe_positive.auc - cmp.relevance_positive.auc;
  return cmp;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline TensorContainer probes_to_container(std::span<const LinearProbe> probes) {
  TensorContainer c;
  c.metadata["probe.count"] = std::to_string(probes.size());
  for (std::size_t k = 0; k < probes.size(); ++k) {
    const LinearProbe& p = probes[k];
    const std::string pre = "probe." + std::to_string(k) + ".";
    c.add_f32(pre + "weight", p.weight);
    c.add_f32(pre + "bias", p.bias);
    c.add_f32(pre + "feature_mean", p.feature_mean);
    c.add_f32(pre + "feature_inv_std", p.feature_inv_std);
    c.metadata[pre + "layer"] = std::to_string(p.layer);
    c.metadata[pre + "position"] = std::to_string(p.position);
    c.metadata[pre + "shots"] = std::to_string(p.shots);
    c.metadata[pre + "epochs"] = std::to_string(p.epochs);
    c.metadata[pre + "learning_rate"] = nlohmann::json(p.learning_rate).dump();
    c.metadata[pre + "seed"] = std::to_string(p.seed);
    c.metadata[pre + "train_accuracy"] = nlohmann::json(p.train_accuracy).dump();
  }
  return c;
}

inline std::vector<LinearProbe> load_probes(const TensorContainer& c) {
  const std::size_t count = detail::parse_size(c, "probe.count");
  std::vector<LinearProbe> probes(count);
  for (std::size_t k = 0; k < count; ++k) {
    LinearProbe& p = probes[k];
    const std::string pre = "probe." + std::to_string(k) + ".";
    p.weight = c.get_f32(pre + "weight");
    p.bias = c.get_f32(pre + "bias");
    p.feature_mean = c.get_f32(pre + "feature_mean");
    p.feature_inv_std = c.get_f32(pre + "feature_inv_std");
    p.layer = detail::parse_size(c, pre + "layer");
    p.position = detail::parse_size(c, pre + "position");
    p.shots = detail::parse_size(c, pre + "shots");
    p.epochs = detail::parse_size(c, pre + "epochs");
    p.seed = detail::parse_size(c, pre + "seed");
    p.learning_rate = std::stod(c.meta(pre + "learning_rate").value_or("0"));
    p.train_accuracy = std::stod(c.meta(pre + "train_accuracy").value_or("0"));
    if (p.weight.rank() != 2 || p.bias.size() != p.weight.rows() ||
        p.feature_mean.size() != p.weight.cols() || p.feature_inv_std.size() != p.weight.cols()) {
      fail(ErrorCode::shape_conflict, "probe tensors inconsistent: " + pre);
    }
  }
  return probes;
}

}  // namespace vitlens
