// vitlens: command-line front end for the analyses in include/vitlens.
//
// Exit codes: 0 success, 1 analysis error, 2 usage error. Failures print one
// JSON line on stderr: {"error": <code>, "message": <text>}.

#include <zlib.h>

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "vitlens/vitlens.hpp"

namespace fs = std::filesystem;
using namespace vitlens;
using nlohmann::json;

namespace {

constexpr int kExitAnalysis = 1;
constexpr int kExitUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Every file a run writes, for the checksums recorded in run.json.
class Artifacts {
 public:
  explicit Artifacts(fs::path dir) : dir_(std::move(dir)) {}

  const fs::path& dir() const { return dir_; }

  fs::path path(const std::string& name) {
    names_.push_back(name);
    return dir_ / name;
  }

  void text(const std::string& name, const std::string& body) { write_text(path(name), body); }
  void json_file(const std::string& name, const json& j) { write_json(path(name), j); }
  void container(const std::string& name, const TensorContainer& c) {
    write_container(c, path(name));
  }

  json checksums() const {
    json out = json::object();
    for (const auto& n : names_) out[n] = file_crc(dir_ / n);
    return out;
  }

 private:
  static std::string file_crc(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const uLong crc = crc32(0L, reinterpret_cast<const Bytef*>(buf.data()), uInt(buf.size()));
    char hex[9];
    std::snprintf(hex, sizeof hex, "%08lx", static_cast<unsigned long>(crc));
    return hex;
  }

  fs::path dir_;
  std::vector<std::string> names_;
};

struct Common {
  std::string model_path;
  std::string data_path;
  std::string out_dir = ".";
  std::size_t threads = 0;
  bool final_ln = false;
};

void add_common(CLI::App* sub, Common& c, bool needs_data = true) {
  sub->add_option("--model", c.model_path, "Model container (VTNS1)")
      ->required()
      ->check(CLI::ExistingFile);
  auto* data = sub->add_option("--data", c.data_path, "Dataset container (VTNS1)")
                   ->check(CLI::ExistingFile);
  if (needs_data) data->required();
  sub->add_option("--out", c.out_dir, "Output directory (created if missing)");
  sub->add_option("--threads", c.threads,
                  "Worker threads; 0 uses CLASS_LENS_THREADS, else all cores");
  sub->add_flag("--final-ln", c.final_ln, "Apply the final LayerNorm before projecting");
}

Model open_model(const Common& c) { return load_model(read_container(c.model_path)); }

Dataset open_dataset(const Common& c, const Model& m) {
  Dataset ds = load_dataset(read_container(c.data_path), m.config.num_patches());
  if (ds.size() == 0) fail(ErrorCode::invalid_argument, "dataset is empty");
  const std::size_t s = m.config.image_size;
  if (ds.images.dim(2) != s || ds.images.dim(3) != s) {
    fail(ErrorCode::shape_conflict, "dataset images are " + std::to_string(ds.images.dim(2)) +
                                        "x" + std::to_string(ds.images.dim(3)) +
                                        ", model expects " + std::to_string(s));
  }
  return ds;
}

std::size_t check_index(std::size_t i, std::size_t n, const char* what) {
  if (i >= n) {
    throw UsageError(std::string(what) + " " + std::to_string(i) + " out of range [0, " +
                     std::to_string(n) + ")");
  }
  return i;
}

// ---------------------------------------------------------------------------
// forward

struct ForwardArgs {
  Common common;
  std::string reference;
  double tolerance = 1e-3;
  std::vector<std::size_t> dump;
};

json run_forward(const ForwardArgs& a, Artifacts& out) {
  const Model model = open_model(a.common);
  const std::size_t threads = resolve_threads(a.common.threads);
  json summary = {{"config",
                   {{"depth", model.config.depth},
                    {"hidden_dim", model.config.hidden_dim},
                    {"num_heads", model.config.num_heads},
                    {"mlp_dim", model.config.mlp_dim},
                    {"patch_size", model.config.patch_size},
                    {"image_size", model.config.image_size},
                    {"num_classes", model.config.num_classes},
                    {"head_source", model.config.has_cls() ? "cls" : "gap"}}}};
  bool parity_failed = false;
  if (!a.reference.empty()) {
    const ParityReport rep = check_reference(model, read_container(a.reference), a.tolerance, threads);
    summary["parity"] = {{"tolerance", rep.tolerance},
                         {"logit_error", rep.logit_error},
                         {"hidden_error", rep.hidden_error},
                         {"hidden_blocks", rep.hidden_blocks},
                         {"pass", rep.pass}};
    parity_failed = !rep.pass;
  }
  if (!a.common.data_path.empty()) {
    const Dataset ds = open_dataset(a.common, model);
    std::vector<std::size_t> pred(ds.size());
    std::vector<std::vector<float>> logits(ds.size());
    parallel_for(ds.size(), threads, [&](std::size_t i) {
      const ForwardTrace tr = forward(model, ds.image(i), {}, {}, {.capture_mlp_coeffs = false});
      pred[i] = tr.prediction();
      logits[i] = tr.logits.storage();
    });
    std::ostringstream csv;
    csv << "image,label,prediction,correct\n";
    std::size_t correct = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const bool ok = pred[i] == std::size_t(ds.labels[i]);
      correct += ok;
      csv << i << ',' << ds.labels[i] << ',' << pred[i] << ',' << int(ok) << '\n';
    }
    out.text("predictions.csv", csv.str());
    summary["images"] = ds.size();
    summary["accuracy"] = double(correct) / double(ds.size());
    for (std::size_t i : a.dump) {
      check_index(i, ds.size(), "image");
      out.container("trace_" + std::to_string(i) + ".vtns",
                    trace_to_container(forward(model, ds.image(i))));
    }
  } else if (!a.dump.empty()) {
    throw UsageError("--dump-trace needs --data");
  }
  out.json_file("forward.json", summary);
  summary["parity_failed"] = parity_failed;
  return summary;
}

// ---------------------------------------------------------------------------
// identify

struct IdentifyArgs {
  Common common;
  std::string change_reference = "sublayer_input";
  bool no_bias = false;
};

json run_identify(const IdentifyArgs& a, Artifacts& out) {
  const Model model = open_model(a.common);
  const Dataset ds = open_dataset(a.common, model);
  const std::size_t threads = resolve_threads(a.common.threads);
  const ProjectionOptions opt{.apply_final_ln = a.common.final_ln, .include_bias = !a.no_bias};
  const ChangeReference ref = a.change_reference == "residual" ? ChangeReference::residual
                                                               : ChangeReference::sublayer_input;
  struct PerImage {
    ImageIdentifiability scores;
    std::vector<BlockIdentifiability> blocks;
    std::vector<ChangeRates> change;
    std::vector<CompositionCounts> composition;
    std::size_t prediction = 0;
  };
  std::vector<PerImage> res(ds.size());
  parallel_for(ds.size(), threads, [&](std::size_t i) {
    const ForwardTrace tr = forward(model, ds.image(i), {}, {}, {.capture_mlp_coeffs = false});
    std::span<const std::int32_t> mask;
    if (!ds.mask_is_empty(i)) mask = ds.mask(i);
    PerImage& r = res[i];
    r.scores = score_trace(model, tr, ds.labels[i], opt, mask, r.blocks);
    r.change = class_similarity_change_rate(model, tr, std::size_t(ds.labels[i]), ref, opt);
    r.composition = residual_composition(model, tr, opt);
    r.prediction = tr.prediction();
  });

  IdentifiabilityReport report;
  report.final_ln_applied = opt.apply_final_ln;
  report.blocks.resize(model.config.depth);
  std::vector<ChangeRates> change(model.config.depth);
  std::vector<CompositionCounts> composition(model.config.depth);
  std::ostringstream per_image;
  per_image << "image,label,prediction,perfect_image_token_last_block,last_block_image_mean\n";
  for (std::size_t i = 0; i < ds.size(); ++i) {
    PerImage& r = res[i];
    for (std::size_t b = 0; b < model.config.depth; ++b) {
      report.blocks[b].merge(r.blocks[b]);
      change[b].merge(r.change[b]);
      composition[b].merge(r.composition[b]);
    }
    const auto& last = r.blocks.back().image;
    per_image << i << ',' << ds.labels[i] << ',' << r.prediction << ','
              << int(r.scores.has_perfect_image_token_last_block) << ',' << last.mean() << '\n';
    if (r.scores.has_perfect_image_token_last_block) ++report.images_with_perfect_token;
    report.images.push_back(std::move(r.scores));
  }
  json j = to_json(report);
  out.json_file("identifiability.json", j);
  out.text("identifiability.csv", to_csv(report));
  out.text("per_image.csv", per_image.str());
  json cr = to_json(change);
  cr["reference"] = a.change_reference;
  out.json_file("change_rates.json", cr);
  out.json_file("composition.json", to_json(composition));
  return j;
}

// ---------------------------------------------------------------------------
// memories

struct MemoriesArgs {
  Common common;
  std::size_t k_keys = 5;
  std::size_t k_logits = 5;
  std::size_t k_composition = 5;
  std::string quantifier = "any";
  std::string ranking = "signed";
  std::size_t baseline_seeds = 10;
  std::uint64_t baseline_seed = 1000;
  std::size_t shuffles = 10000;
  std::uint64_t seed = 0;
};

json run_memories(const MemoriesArgs& a, Artifacts& out) {
  const Model model = open_model(a.common);
  const std::size_t threads = resolve_threads(a.common.threads);
  const auto views = build_memory_views(model);
  const auto baseline =
      random_class_value_baseline(model.config, a.baseline_seeds, a.baseline_seed);
  json layers = json::array();
  std::ostringstream csv;
  csv << "layer,name,class_value_agreement,random_baseline";
  std::vector<std::vector<float>> agreement;
  for (const MemoryView& v : views) agreement.push_back(class_value_agreement(v));

  std::vector<LayerRate> kv;
  std::vector<CompositionalityResult> comp;
  std::vector<AgreementSplit> split;
  const bool with_data = !a.common.data_path.empty();
  if (with_data) {
    const Dataset ds = open_dataset(a.common, model);
    const MemoryMetricOptions opt{
        .k_keys = a.k_keys,
        .k_logits = a.k_logits,
        .quantifier = a.quantifier == "all" ? Quantifier::all : Quantifier::any,
        .ranking = a.ranking == "absolute" ? KeyRanking::absolute : KeyRanking::signed_desc};
    if (a.k_logits == 0 || a.k_logits > model.config.num_classes) {
      throw UsageError("--k-logits must be in [1, |C|]");
    }
    struct PerImage {
      std::vector<LayerRate> kv;
      std::vector<CompositionalityResult> comp;
      bool correct = false;
    };
    std::vector<PerImage> res(ds.size());
    parallel_for(ds.size(), threads, [&](std::size_t i) {
      const ForwardTrace tr = forward(model, ds.image(i));
      const std::span<const ForwardTrace> one(&tr, 1);
      res[i].kv = key_value_agreement_rate(one, views, std::span(&ds.labels[i], 1), opt);
      res[i].comp = memory_compositionality(model, one, views, a.k_composition, opt.ranking);
      res[i].correct = tr.prediction() == std::size_t(ds.labels[i]);
    });
    kv.resize(views.size());
    comp.resize(views.size());
    std::vector<bool> correct;
    for (std::size_t l = 0; l < views.size(); ++l) {
      kv[l].layer = comp[l].layer = views[l].layer_index();
    }
    for (const PerImage& r : res) {
      for (std::size_t l = 0; l < views.size(); ++l) {
        kv[l].image.merge(r.kv[l].image);
        kv[l].cls.merge(r.kv[l].cls);
        kv[l].per_image.push_back(r.kv[l].per_image.front());
        comp[l].match.merge(r.comp[l].match);
      }
      correct.push_back(r.correct);
    }
    split = agreement_vs_accuracy(kv, correct, a.shuffles, a.seed);
    csv << ",kv_image_rate,kv_cls_rate,compositionality,kv_correct_mean,kv_incorrect_mean,"
           "kv_difference,kv_p_value";
  }
  csv << '\n';
  for (std::size_t l = 0; l < views.size(); ++l) {
    double mean = 0;
    for (float v : agreement[l]) mean += v;
    mean /= double(agreement[l].size());
    json layer = {{"layer", views[l].layer_index()},
                  {"name", views[l].name()},
                  {"memories", views[l].num_memories()},
                  {"class_value_agreement", {{"mean", mean}, {"per_class", agreement[l]}}},
                  {"random_baseline", baseline[l]}};
    csv << views[l].layer_index() << ',' << views[l].name() << ',' << mean << ',' << baseline[l];
    if (with_data) {
      const AgreementSplit& s = split[l];
      layer["key_value_agreement"] = {{"image", to_json(kv[l].image)}, {"cls", to_json(kv[l].cls)}};
      layer["compositionality"] = comp[l].compositionality();
      layer["correct_vs_incorrect"] = {{"defined", s.defined},
                                       {"n_correct", s.n_correct},
                                       {"n_incorrect", s.n_incorrect},
                                       {"mean_correct", s.mean_correct},
                                       {"mean_incorrect", s.mean_incorrect},
                                       {"difference", s.difference},
                                       {"p_value", s.p_value}};
      csv << ',' << kv[l].image.rate() << ',' << kv[l].cls.rate() << ','
          << comp[l].compositionality() << ',' << s.mean_correct << ',' << s.mean_incorrect << ','
          << (s.defined ? std::to_string(s.difference) : "") << ','
          << (s.defined ? std::to_string(s.p_value) : "");
    }
    csv << '\n';
    layers.push_back(layer);
  }
  json j = {{"k_keys", a.k_keys},
            {"k_logits", a.k_logits},
            {"k_composition", a.k_composition},
            {"quantifier", a.quantifier},
            {"ranking", a.ranking},
            {"baseline_seeds", a.baseline_seeds},
            {"layers", layers}};
  out.json_file("memories.json", j);
  out.text("memories.csv", csv.str());
  return j;
}

// ---------------------------------------------------------------------------
// perturb

struct PerturbArgs {
  Common common;
  std::string kind = "ordered";
  std::string ablate = "image_to_image";
  bool renormalize = false;
  std::string remove = "both";
  std::string importance = "relevance";
  std::string probes;
  std::string direction = "both";
  std::vector<double> fractions = default_removal_fractions();
  std::uint64_t seed = 0;
};

std::vector<std::vector<float>> probe_scores(const Model& model, const Dataset& ds,
                                             const std::vector<LinearProbe>& probes,
                                             std::size_t threads) {
  if (probes.empty()) fail(ErrorCode::invalid_argument, "probe checkpoint is empty");
  const std::size_t layer = probes.front().layer;
  if (layer >= model.config.depth || probes.size() != model.config.seq_len()) {
    fail(ErrorCode::shape_conflict, "probe checkpoint does not match the model");
  }
  std::vector<std::vector<float>> out(ds.size());
  parallel_for(ds.size(), threads, [&](std::size_t i) {
    const ForwardTrace tr = forward(model, ds.image(i), {}, {}, {.capture_mlp_coeffs = false});
    out[i] = probe_importance(probes, tr.blocks[layer].residual_out, tr.has_cls,
                              std::size_t(ds.labels[i]));
  });
  return out;
}

json run_perturb(const PerturbArgs& a, Artifacts& out) {
  const Model model = open_model(a.common);
  const Dataset ds = open_dataset(a.common, model);
  const std::size_t threads = resolve_threads(a.common.threads);
  const ProjectionOptions opt{.apply_final_ln = a.common.final_ln};
  json j = {{"kind", a.kind}};
  if (a.kind == "ablation") {
    const AblationMode mode =
        a.ablate == "image_to_cls" ? AblationMode::image_to_cls : AblationMode::image_to_image;
    const auto ablated = run_attention_ablation(model, ds, mode, a.renormalize, opt, threads);
    const auto base = identify_dataset(model, ds, {}, opt, threads);
    j["mode"] = a.ablate;
    j["renormalize"] = a.renormalize;
    j["baseline"] = to_json(base);
    j["ablated"] = to_json(ablated);
    out.text("ablation.csv", to_csv(ablated));
  } else if (a.kind == "removal") {
    json runs = json::array();
    for (RemovalGroup g : {RemovalGroup::class_labeled, RemovalGroup::context_labeled}) {
      if (a.remove == "class" && g != RemovalGroup::class_labeled) continue;
      if (a.remove == "context" && g != RemovalGroup::context_labeled) continue;
      runs.push_back(to_json(run_token_removal(model, ds, g, opt, threads)));
    }
    j["runs"] = runs;
  } else {
    std::vector<std::vector<float>> imp;
    std::string source = a.importance;
    if (a.importance == "relevance") {
      imp = relevance_importance(model, ds, a.common.final_ln, threads);
    } else if (a.importance == "random") {
      imp = random_importance(ds.size(), model.config.num_patches(), a.seed);
      source = "random(" + std::to_string(a.seed) + ")";
    } else {
      if (a.probes.empty()) throw UsageError("--importance probe needs --probes");
      imp = probe_scores(model, ds, load_probes(read_container(a.probes)), threads);
    }
    json curves = json::array();
    for (RemovalDirection dir : {RemovalDirection::negative, RemovalDirection::positive}) {
      const char* name = dir == RemovalDirection::negative ? "negative" : "positive";
      if (a.direction != "both" && a.direction != name) continue;
      const PerturbationCurve c =
          run_ordered_removal(model, ds, imp, dir, a.fractions, source, threads);
      out.text("curve_" + a.importance + "_" + name + ".csv", to_csv(c));
      curves.push_back(to_json(c));
    }
    j["curves"] = curves;
  }
  out.json_file("perturb_" + a.kind + ".json", j);
  return j;
}

// ---------------------------------------------------------------------------
// explain

struct ExplainArgs {
  Common common;
  std::size_t image = 0;
  std::optional<std::size_t> target;
  std::optional<std::size_t> block;
  std::optional<std::size_t> head;
  bool global = false;
  std::size_t scale = 16;
};

json run_explain(const ExplainArgs& a, Artifacts& out) {
  const Model model = open_model(a.common);
  const Dataset ds = open_dataset(a.common, model);
  const ModelConfig& cfg = model.config;
  if (!cfg.has_cls()) fail(ErrorCode::inapplicable, "mode inapplicable: explain requires CLS token");
  check_index(a.image, ds.size(), "image");
  const std::size_t c = a.target ? *a.target : std::size_t(ds.labels[a.image]);
  check_index(c, cfg.num_classes, "class");
  if (a.block) check_index(*a.block, cfg.depth, "block");
  if (a.head) check_index(*a.head, cfg.num_heads, "head");
  if (a.head && !a.block) throw UsageError("--head needs --block");

  const Tensor image = ds.image(a.image);
  const ForwardTrace tr = forward(model, image, {}, {}, {.capture_mlp_coeffs = false});
  const RelevancyMap map = compute_relevancy(model, tr, c, a.common.final_ln);
  const std::size_t g = cfg.grid();
  const std::string stem = "explain_" + std::to_string(a.image) + "_c" + std::to_string(c);
  json j = {{"image", a.image},
            {"label", ds.labels[a.image]},
            {"prediction", tr.prediction()},
            {"final_ln", a.common.final_ln},
            {"map", to_json(map)}};
  json files = json::array();
  auto emit = [&](const std::string& suffix, std::span<const float> values) {
    const std::string name = stem + suffix + ".pgm";
    write_pgm(out.path(name), values, g, g, a.scale);
    files.push_back(name);
  };
  if (a.block) {
    const Tensor& m = map.blocks[*a.block];
    const std::string tag = "_b" + std::to_string(*a.block);
    if (a.head) {
      emit(tag + "_h" + std::to_string(*a.head), m.row(*a.head));
    } else {
      std::vector<float> sum(m.cols(), 0.0f);
      for (std::size_t h = 0; h < m.rows(); ++h)
        for (std::size_t k = 0; k < m.cols(); ++k) sum[k] += m.at(h, k);
      emit(tag, sum);
    }
  }
  if (a.global || !a.block) {
    emit("_global", map.global.data());
    const std::string overlay = stem + "_global_overlay.ppm";
    write_overlay_ppm(out.path(overlay), image, map.global.data(), g);
    files.push_back(overlay);
  }
  j["files"] = files;
  out.json_file(stem + ".json", j);
  return j;
}

// ---------------------------------------------------------------------------
// probe

struct ProbeArgs {
  Common common;
  std::string action;
  std::optional<std::size_t> layer;
  std::size_t shots = 10;
  std::uint64_t seed = 0;
  std::size_t epochs = 500;
  double learning_rate = 0.1;
  std::string probes;
  bool exclude_train = false;
  std::vector<double> fractions = default_removal_fractions();
};

Dataset subset(const Dataset& ds, std::span<const std::size_t> rows) {
  Dataset out;
  out.num_patches = ds.num_patches;
  out.class_names = ds.class_names;
  out.images = Tensor({rows.size(), ds.images.dim(1), ds.images.dim(2), ds.images.dim(3)});
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const auto src = ds.images.row(rows[k]);
    std::copy(src.begin(), src.end(), out.images.row(k).begin());
    out.labels.push_back(ds.labels[rows[k]]);
  }
  return out;
}

json run_probe(const ProbeArgs& a, Artifacts& out) {
  const Model model = open_model(a.common);
  const Dataset ds = open_dataset(a.common, model);
  const std::size_t threads = resolve_threads(a.common.threads);
  const ModelConfig& cfg = model.config;
  if (a.action == "train") {
    const std::size_t layer = a.layer ? *a.layer : cfg.depth - 1;
    check_index(layer, cfg.depth, "layer");
    // Only the sampled images are traced.
    const auto rows = sample_shots(ds.labels, cfg.num_classes, a.shots, a.seed);
    const Dataset train = subset(ds, rows);
    const auto states = collect_layer_states(model, train, layer, threads);
    const auto probes = train_position_probes(states, train.labels, cfg.num_classes, layer,
                                              a.shots, a.seed,
                                              {.epochs = a.epochs, .learning_rate = a.learning_rate},
                                              threads);
    out.container("probes.vtns", probes_to_container(probes));
    std::vector<double> acc;
    for (const auto& p : probes) acc.push_back(p.train_accuracy);
    json j = {{"layer", layer},       {"shots", a.shots}, {"seed", a.seed},
              {"epochs", a.epochs},   {"learning_rate", a.learning_rate},
              {"train_rows", rows},   {"train_accuracy", acc}};
    out.json_file("probe_train.json", j);
    return j;
  }
  if (a.probes.empty()) throw UsageError("--probes is required for " + a.action);
  const auto probes = load_probes(read_container(a.probes));
  if (a.action == "eval") {
    if (probes.size() != cfg.seq_len()) {
      fail(ErrorCode::shape_conflict, "probe checkpoint does not match the model");
    }
    const std::size_t layer = probes.front().layer;
    std::vector<char> skip(ds.size(), 0);
    if (a.exclude_train) {
      for (std::size_t r :
           sample_shots(ds.labels, cfg.num_classes, probes.front().shots, probes.front().seed)) {
        skip[r] = 1;
      }
    }
    std::vector<std::vector<char>> hit(ds.size());
    parallel_for(ds.size(), threads, [&](std::size_t i) {
      if (skip[i]) return;
      const ForwardTrace tr = forward(model, ds.image(i), {}, {}, {.capture_mlp_coeffs = false});
      const Tensor& st = tr.blocks[layer].residual_out;
      for (std::size_t p = 0; p < probes.size(); ++p) {
        hit[i].push_back(probe_predict(probes[p], st.row(p)) == std::size_t(ds.labels[i]));
      }
    });
    std::vector<double> acc(probes.size(), 0.0);
    std::size_t n = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      if (skip[i]) continue;
      ++n;
      for (std::size_t p = 0; p < probes.size(); ++p) acc[p] += hit[i][p];
    }
    std::ostringstream csv;
    csv << "position,accuracy\n";
    for (std::size_t p = 0; p < acc.size(); ++p) {
      acc[p] = n ? acc[p] / double(n) : 0.0;
      csv << p << ',' << acc[p] << '\n';
    }
    json j = {{"layer", layer}, {"images", n}, {"exclude_train", a.exclude_train}, {"accuracy", acc}};
    out.json_file("probe_eval.json", j);
    out.text("probe_eval.csv", csv.str());
    return j;
  }
  // compare
  const auto pscores = probe_scores(model, ds, probes, threads);
  const auto rscores = relevance_importance(model, ds, a.common.final_ln, threads);
  const ProbeComparison cmp = probe_perturbation_comparison(model, ds, pscores, rscores,
                                                            a.fractions, threads);
  const std::pair<const char*, const PerturbationCurve*> curves[] = {
      {"relevance_negative", &cmp.relevance_negative},
      {"relevance_positive", &cmp.relevance_positive},
      {"probe_negative", &cmp.probe_negative},
      {"probe_positive", &cmp.probe_positive}};
  json j = {{"negative_delta", cmp.negative_delta}, {"positive_delta", cmp.positive_delta}};
  for (const auto& [name, c] : curves) {
    j[name] = to_json(*c);
    out.text(std::string("compare_") + name + ".csv", to_csv(*c));
  }
  out.json_file("probe_compare.json", j);
  return j;
}

// ---------------------------------------------------------------------------
// report

json run_report(const std::vector<std::string>& inputs, Artifacts& out) {
  json docs = json::object();
  for (const auto& in : inputs) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(in)) {
      if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      std::ifstream is(f);
      try {
        docs[(fs::path(in).filename().empty() ? fs::path(in).parent_path().filename()
                                               : fs::path(in).filename())
                 .string() +
             "/" + f.filename().string()] = json::parse(is);
      } catch (const json::exception& e) {
        fail(ErrorCode::manifest_parse, f.string() + ": " + e.what());
      }
    }
  }
  json j = {{"sources", inputs}, {"documents", docs}};
  out.json_file("summary.json", j);
  return j;
}

// ---------------------------------------------------------------------------
// synth

struct SynthArgs {
  std::string out_dir = ".";
  std::uint64_t seed = 0;
  std::size_t images = 20;
  std::size_t depth = 2, hidden = 16, heads = 2, mlp = 32, patch = 2, size = 8, classes = 5;
  bool gap = false;
};

json run_synth(const SynthArgs& a, Artifacts& out) {
  ModelConfig cfg;
  cfg.depth = a.depth;
  cfg.hidden_dim = a.hidden;
  cfg.num_heads = a.heads;
  cfg.mlp_dim = a.mlp;
  cfg.patch_size = a.patch;
  cfg.image_size = a.size;
  cfg.num_classes = a.classes;
  cfg.head_source = a.gap ? HeadSource::gap : HeadSource::cls;
  cfg.validate();
  const Model model = synthesize_random_model(cfg, a.seed);
  const Dataset ds = synthesize_dataset(cfg, a.images, a.seed + 1, true);
  out.container("model.vtns", model_to_container(model));
  out.container("data.vtns", dataset_to_container(ds));
  const std::size_t k = std::min<std::size_t>(3, ds.size());
  const std::vector<std::size_t> rows{0, 1, 2};
  const std::vector<std::size_t> hidden{cfg.depth - 1};
  out.container("reference.vtns",
                record_reference(model, subset(ds, std::span(rows).first(k)).images, hidden));
  return {{"images", a.images}, {"seed", a.seed}};
}

// ---------------------------------------------------------------------------

std::string option_key(const CLI::Option* o) {
  std::string name = o->get_name(false, true);
  while (!name.empty() && name.front() == '-') name.erase(name.begin());
  return name;
}

/// Parsed values of every option of `sub` (defaults included).
json describe_options(const CLI::App* sub) {
  json cfg = json::object();
  for (const CLI::Option* o : sub->get_options()) {
    if (o->get_name() == "--help" || o->get_name() == "--help-all") continue;
    const std::string key = option_key(o);
    if (o->get_expected_max() == 0) {
      cfg[key] = o->count() > 0;
    } else if (o->count() == 0) {
      cfg[key] = o->get_default_str();
    } else if (o->get_expected_max() <= 1 && o->results().size() == 1) {
      cfg[key] = o->results().front();
    } else {
      cfg[key] = o->results();
    }
  }
  return cfg;
}

[[noreturn]] void report_error(const char* code, const std::string& message, int exit_code) {
  std::cerr << json{{"error", code}, {"message", message}}.dump() << std::endl;
  std::exit(exit_code);
}

int run(std::vector<std::string> args) {
  CLI::App app{"vitlens: inspect ViT predictions through class projections", "vitlens"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  ForwardArgs fwd;
  auto* sub_fwd = app.add_subcommand("forward", "Run the model; optional reference parity check");
  add_common(sub_fwd, fwd.common, false);
  sub_fwd->add_option("--reference", fwd.reference, "Reference activations container")
      ->check(CLI::ExistingFile);
  sub_fwd->add_option("--tolerance", fwd.tolerance, "Parity tolerance per element")
      ->check(CLI::PositiveNumber);
  sub_fwd->add_option("--dump-trace", fwd.dump, "Image indices whose full trace is written");

  IdentifyArgs idf;
  auto* sub_idf = app.add_subcommand("identify", "Class identifiability over blocks");
  add_common(sub_idf, idf.common);
  sub_idf->add_option("--change-reference", idf.change_reference, "Change-rate baseline")
      ->check(CLI::IsMember({"sublayer_input", "residual"}));
  sub_idf->add_flag("--no-bias", idf.no_bias, "Project without the head bias");

  MemoriesArgs mem;
  auto* sub_mem = app.add_subcommand("memories", "Key-value memory analysis");
  add_common(sub_mem, mem.common, false);
  sub_mem->add_option("--k-keys", mem.k_keys, "Most activated memories per token")
      ->check(CLI::PositiveNumber);
  sub_mem->add_option("--k-logits", mem.k_logits, "Top classes per value vector")
      ->check(CLI::PositiveNumber);
  sub_mem->add_option("--k-composition", mem.k_composition, "Memories for compositionality")
      ->check(CLI::PositiveNumber);
  sub_mem->add_option("--quantifier", mem.quantifier, "Agreement over the k keys")
      ->check(CLI::IsMember({"any", "all"}));
  sub_mem->add_option("--ranking", mem.ranking, "Key ranking")
      ->check(CLI::IsMember({"signed", "absolute"}));
  sub_mem->add_option("--baseline-seeds", mem.baseline_seeds, "Random models for the baseline")
      ->check(CLI::PositiveNumber);
  sub_mem->add_option("--baseline-seed", mem.baseline_seed, "First random-model seed");
  sub_mem->add_option("--shuffles", mem.shuffles, "Permutation test shuffles")
      ->check(CLI::PositiveNumber);
  sub_mem->add_option("--seed", mem.seed, "Permutation test seed");

  PerturbArgs per;
  auto* sub_per = app.add_subcommand("perturb", "Attention ablation, token removal, removal curves");
  add_common(sub_per, per.common);
  sub_per->add_option("--kind", per.kind, "Experiment")
      ->check(CLI::IsMember({"ordered", "ablation", "removal"}));
  sub_per->add_option("--ablate", per.ablate, "Ablated attention")
      ->check(CLI::IsMember({"image_to_image", "image_to_cls"}));
  sub_per->add_flag("--renormalize", per.renormalize, "Renormalize ablated attention rows");
  sub_per->add_option("--remove", per.remove, "Removed token group")
      ->check(CLI::IsMember({"class", "context", "both"}));
  sub_per->add_option("--importance", per.importance, "Token importance source")
      ->check(CLI::IsMember({"relevance", "random", "probe"}));
  sub_per->add_option("--probes", per.probes, "Probe checkpoint for --importance probe")
      ->check(CLI::ExistingFile);
  sub_per->add_option("--direction", per.direction, "Removal order")
      ->check(CLI::IsMember({"negative", "positive", "both"}));
  sub_per->add_option("--fractions", per.fractions, "Removal fractions in [0, 1)")
      ->delimiter(',');
  sub_per->add_option("--seed", per.seed, "Seed of random importance");

  ExplainArgs exp;
  auto* sub_exp = app.add_subcommand("explain", "Gradient relevance maps for one image");
  add_common(sub_exp, exp.common);
  sub_exp->add_option("--image", exp.image, "Dataset image index")->required();
  sub_exp->add_option("--class", exp.target, "Target class (default: the label)");
  sub_exp->add_option("--block", exp.block, "Write the map of one block");
  sub_exp->add_option("--head", exp.head, "Restrict --block to one head");
  sub_exp->add_flag("--global", exp.global, "Write the map summed over blocks and heads");
  sub_exp->add_option("--scale", exp.scale, "Heatmap pixels per token")->check(CLI::PositiveNumber);

  ProbeArgs prb;
  auto* sub_prb = app.add_subcommand("probe", "Linear probes on hidden states");
  sub_prb->add_option("action", prb.action, "train | eval | compare")
      ->required()
      ->check(CLI::IsMember({"train", "eval", "compare"}));
  add_common(sub_prb, prb.common);
  sub_prb->add_option("--layer", prb.layer, "Probed block (default: last)");
  sub_prb->add_option("--shots", prb.shots, "Training examples per class")
      ->check(CLI::PositiveNumber);
  sub_prb->add_option("--seed", prb.seed, "Sampling seed");
  sub_prb->add_option("--epochs", prb.epochs, "Gradient descent epochs")->check(CLI::PositiveNumber);
  sub_prb->add_option("--lr", prb.learning_rate, "Initial learning rate")
      ->check(CLI::PositiveNumber);
  sub_prb->add_option("--probes", prb.probes, "Probe checkpoint (eval, compare)")
      ->check(CLI::ExistingFile);
  sub_prb->add_flag("--exclude-train", prb.exclude_train, "Skip the rows sampled for training");
  sub_prb->add_option("--fractions", prb.fractions, "Removal fractions (compare)")->delimiter(',');

  std::vector<std::string> report_inputs;
  std::string report_out = ".";
  auto* sub_rep = app.add_subcommand("report", "Merge JSON outputs of earlier runs");
  sub_rep->add_option("--in", report_inputs, "Output directories of earlier runs")
      ->required()
      ->check(CLI::ExistingDirectory);
  sub_rep->add_option("--out", report_out, "Output directory");

  SynthArgs syn;
  auto* sub_syn = app.add_subcommand("synth", "Write a random model, dataset and reference");
  sub_syn->add_option("--out", syn.out_dir, "Output directory");
  sub_syn->add_option("--seed", syn.seed, "Seed");
  sub_syn->add_option("--images", syn.images, "Dataset size")->check(CLI::PositiveNumber);
  sub_syn->add_option("--depth", syn.depth, "Blocks");
  sub_syn->add_option("--hidden", syn.hidden, "Hidden width d");
  sub_syn->add_option("--heads", syn.heads, "Attention heads");
  sub_syn->add_option("--mlp", syn.mlp, "MLP width");
  sub_syn->add_option("--patch", syn.patch, "Patch size");
  sub_syn->add_option("--size", syn.size, "Image size");
  sub_syn->add_option("--classes", syn.classes, "Classes");
  sub_syn->add_flag("--gap", syn.gap, "Mean-pooled head instead of [CLS]");

  std::string replay_path, replay_out;
  auto* sub_rpl = app.add_subcommand("replay", "Re-run the command recorded in a run.json");
  sub_rpl->add_option("run", replay_path, "run.json")->required()->check(CLI::ExistingFile);
  sub_rpl->add_option("--out", replay_out, "Write outputs here instead of the recorded directory");

  if (args.empty()) {
    std::cout << app.help();
    return kExitUsage;
  }
  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    std::cout << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    report_error("usage", e.what(), kExitUsage);
  }

  if (sub_rpl->parsed()) {
    std::ifstream is(replay_path);
    json recorded;
    try {
      recorded = json::parse(is);
    } catch (const json::exception& e) {
      report_error("usage", std::string("run.json: ") + e.what(), kExitUsage);
    }
    auto argv = recorded.at("argv").get<std::vector<std::string>>();
    if (!replay_out.empty()) {
      bool replaced = false;
      for (std::size_t i = 0; i + 1 < argv.size(); ++i) {
        if (argv[i] == "--out") {
          argv[i + 1] = replay_out;
          replaced = true;
        }
      }
      if (!replaced) {
        argv.push_back("--out");
        argv.push_back(replay_out);
      }
    }
    return run(argv);
  }

  CLI::App* sub = app.get_subcommands().front();
  const std::map<const CLI::App*, const Common*> commons{
      {sub_fwd, &fwd.common}, {sub_idf, &idf.common}, {sub_mem, &mem.common},
      {sub_per, &per.common}, {sub_exp, &exp.common}, {sub_prb, &prb.common}};
  std::string out_dir = sub == sub_rep ? report_out : syn.out_dir;
  std::size_t threads = 0;
  if (const auto it = commons.find(sub); it != commons.end()) {
    out_dir = it->second->out_dir;
    threads = it->second->threads;
  }

  try {
    fs::create_directories(out_dir);
    Artifacts out(out_dir);
    bool parity_failed = false;
    if (sub == sub_fwd) {
      parity_failed = run_forward(fwd, out)["parity_failed"].get<bool>();
    } else if (sub == sub_idf) {
      run_identify(idf, out);
    } else if (sub == sub_mem) {
      run_memories(mem, out);
    } else if (sub == sub_per) {
      for (double f : per.fractions) {
        if (f < 0.0 || f >= 1.0) throw UsageError("--fractions must lie in [0, 1)");
      }
      run_perturb(per, out);
    } else if (sub == sub_exp) {
      run_explain(exp, out);
    } else if (sub == sub_prb) {
      run_probe(prb, out);
    } else if (sub == sub_rep) {
      run_report(report_inputs, out);
    } else {
      run_synth(syn, out);
    }
    json run_record = {{"argv", args},
                       {"subcommand", sub->get_name()},
                       {"config", describe_options(sub)},
                       {"threads", resolve_threads(threads)},
                       {"artifacts", out.checksums()}};
    write_json(fs::path(out_dir) / "run.json", run_record);
    if (parity_failed) fail(ErrorCode::invalid_argument, "reference parity exceeds tolerance");
  } catch (const UsageError& e) {
    report_error("usage", e.what(), kExitUsage);
  } catch (const Error& e) {
    report_error(std::string(to_string(e.code())).c_str(), e.what(), kExitAnalysis);
  } catch (const fs::filesystem_error& e) {
    report_error("io", e.what(), kExitAnalysis);
  } catch (const std::exception& e) {
    report_error("internal", e.what(), kExitAnalysis);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args);
}
