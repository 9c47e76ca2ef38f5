#pragma once

// JSON and CSV renderings of the analysis results. Column schemas are listed
// in docs/cli.md.

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vitlens/class_lens.hpp"
#include "vitlens/error.hpp"
#include "vitlens/memory_lens.hpp"
#include "vitlens/perturb.hpp"
#include "vitlens/relevance.hpp"

namespace vitlens {

using nlohmann::json;

inline json to_json(const ScoreStats& s) {
  return {{"count", s.count},
          {"mean", s.mean()},
          {"variance", s.variance()},
          {"rate", s.rate()}};
}

inline json to_json(const IdentifiabilityReport& r) {
  json blocks = json::array();
  for (std::size_t b = 0; b < r.blocks.size(); ++b) {
    const auto& bl = r.blocks[b];
    blocks.push_back({{"block", b},
                      {"image", to_json(bl.image)},
                      {"cls", to_json(bl.cls)},
                      {"class_tokens", to_json(bl.class_tokens)},
                      {"context_tokens", to_json(bl.context)}});
  }
  return {{"images", r.images.size()},
          {"final_ln_applied", r.final_ln_applied},
          {"top1_ci", r.top1_ci()},
          {"blocks", blocks}};
}

/// One row per block: block,group,count,mean,variance,rate
inline std::string to_csv(const IdentifiabilityReport& r) {
  std::ostringstream os;
  os << "block,group,count,mean,variance,rate\n";
  for (std::size_t b = 0; b < r.blocks.size(); ++b) {
    const auto& bl = r.blocks[b];
    const std::pair<const char*, const ScoreStats*> groups[] = {
        {"image", &bl.image}, {"cls", &bl.cls}, {"class", &bl.class_tokens},
        {"context", &bl.context}};
    for (const auto& [name, s] : groups) {
      os << b << ',' << name << ',' << s->count << ',' << s->mean() << ',' << s->variance() << ','
         << s->rate() << '\n';
    }
  }
  return os.str();
}

inline json to_json(const RateCounter& c) {
  return {{"hits", c.hits}, {"total", c.total}, {"rate", c.rate()}};
}

inline json to_json(const std::vector<ChangeRates>& rates) {
  json blocks = json::array();
  for (std::size_t b = 0; b < rates.size(); ++b) {
    const auto& r = rates[b];
    blocks.push_back({{"block", b},
                      {"attn_image", to_json(r.attn_image)},
                      {"attn_cls", to_json(r.attn_cls)},
                      {"mlp_image", to_json(r.mlp_image)},
                      {"mlp_cls", to_json(r.mlp_cls)},
                      {"block_image", to_json(r.block_image)},
                      {"block_cls", to_json(r.block_cls)}});
  }
  return {{"chance", kChangeRateChance}, {"blocks", blocks}};
}

inline json to_json(const std::vector<CompositionCounts>& counts) {
  json blocks = json::array();
  for (std::size_t b = 0; b < counts.size(); ++b) {
    const auto& c = counts[b];
    blocks.push_back({{"block", b},
                      {"attn", c.attn},
                      {"mlp", c.mlp},
                      {"residual", c.residual},
                      {"composition", c.composition},
                      {"multi", c.multi},
                      {"attn_matches", c.attn_matches},
                      {"mlp_matches", c.mlp_matches},
                      {"residual_matches", c.residual_matches},
                      {"total", c.total()}});
  }
  return blocks;
}

inline std::string layer_name(std::size_t layer) {
  return "block." + std::to_string(layer / 2) + (layer % 2 ? ".mlp" : ".attn");
}

inline json to_json(const PerturbationCurve& c) {
  return {{"source", c.source},
          {"direction", c.direction == RemovalDirection::negative ? "negative" : "positive"},
          {"fractions", c.fractions},
          {"accuracy", c.accuracy},
          {"auc", c.auc}};
}

/// fraction,accuracy
inline std::string to_csv(const PerturbationCurve& c) {
  std::ostringstream os;
  os << "fraction,accuracy\n";
  for (std::size_t i = 0; i < c.fractions.size(); ++i) {
    os << c.fractions[i] << ',' << c.accuracy[i] << '\n';
  }
  return os.str();
}

inline json to_json(const TokenRemovalResult& r) {
  return {{"removed", r.removed == RemovalGroup::class_labeled ? "class" : "context"},
          {"baseline_class_rate", r.baseline_class_rate},
          {"baseline_context_rate", r.baseline_context_rate},
          {"baseline_rate", r.baseline_rate},
          {"perturbed_rate", r.perturbed_rate},
          {"perturbed_mean_score", r.perturbed_mean_score},
          {"images_evaluated", r.images_evaluated},
          {"images_emptied", r.images_emptied}};
}

inline json tensor_to_json(const Tensor& t) {
  return {{"shape", t.shape()}, {"data", t.storage()}};
}

inline json to_json(const RelevancyMap& m) {
  json blocks = json::array();
  for (const Tensor& b : m.blocks) blocks.push_back(tensor_to_json(b));
  return {{"target_class", m.target_class},
          {"grid", m.grid},
          {"blocks", blocks},
          {"global", m.global.storage()}};
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::io, "cannot write " + path.string());
  out << text;
  if (!out) fail(ErrorCode::io, "write failed: " + path.string());
}

inline void write_json(const std::filesystem::path& path, const json& j) {
  write_text(path, j.dump(2) + "\n");
}

}  // namespace vitlens
