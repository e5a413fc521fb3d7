#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mcr_stitch/aggregation.hpp"
#include "mcr_stitch/embedding_store.hpp"
#include "mcr_stitch/error.hpp"
#include "mcr_stitch/evaluation.hpp"
#include "mcr_stitch/projector.hpp"
#include "mcr_stitch/synth.hpp"
#include "mcr_stitch/training.hpp"

namespace mcr {

// Which modality-centric quadruple families to generate.
struct CentricitySet {
  bool overlap = true;
  bool leaf = true;
  bool base = true;

  static CentricitySet parse(const std::string& spec) {
    CentricitySet c{false, false, false};
    std::stringstream ss(spec);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (item == "overlap") c.overlap = true;
      else if (item == "leaf") c.leaf = true;
      else if (item == "base") c.base = true;
      else if (item == "all") c = CentricitySet{};
      else if (!item.empty()) throw ConfigError("unknown centricity '" + item + "'");
    }
    if (!c.overlap && !c.leaf && !c.base) throw ConfigError("no centricity selected");
    return c;
  }

  std::string to_string() const {
    std::string s;
    for (auto [on, name] : {std::pair{overlap, "overlap"}, {leaf, "leaf"}, {base, "base"}}) {
      if (on) s += (s.empty() ? "" : ",") + std::string(name);
    }
    return s;
  }
};

// The four embedding sets one extension consumes.
struct ExtensionData {
  EmbeddingMatrix leaf_overlap;
  EmbeddingMatrix leaf_nonoverlap;
  EmbeddingMatrix base_overlap;
  EmbeddingMatrix base_nonoverlap;
};

struct ExtensionRoles {
  std::string base_space;
  std::string leaf_space;
  std::string overlap;          // modality name shared by both spaces
  std::string leaf_nonoverlap;  // leaf-only modality
  std::string base_nonoverlap;  // base-only modality
};

// Both spaces must have exactly two modalities, exactly one of which is shared.
inline ExtensionRoles resolve_roles(const std::map<std::string, std::vector<std::string>>& spaces,
                                    const std::string& base, const std::string& leaf) {
  auto find = [&](const std::string& id) -> const std::vector<std::string>& {
    auto it = spaces.find(id);
    if (it == spaces.end()) throw ConfigError("unknown space '" + id + "'");
    if (it->second.size() != 2) throw ConfigError("space '" + id + "' must have exactly two modalities");
    return it->second;
  };
  const auto& bm = find(base);
  const auto& lm = find(leaf);
  std::vector<std::string> shared;
  for (const auto& m : lm)
    if (std::find(bm.begin(), bm.end(), m) != bm.end()) shared.push_back(m);
  if (shared.size() != 1) {
    throw ConfigError("spaces '" + base + "' and '" + leaf + "' must share exactly one modality");
  }
  ExtensionRoles r{base, leaf, shared[0], "", ""};
  r.leaf_nonoverlap = lm[0] == r.overlap ? lm[1] : lm[0];
  r.base_nonoverlap = bm[0] == r.overlap ? bm[1] : bm[0];
  return r;
}

inline std::map<std::string, std::vector<std::string>> space_layout(const SynthWorld& w) {
  std::map<std::string, std::vector<std::string>> out;
  for (const auto& s : w.config.spaces) out[s.id] = s.modalities;
  return out;
}

inline ExtensionData extension_data(const SynthWorld& w, const ExtensionRoles& r, std::size_t begin, std::size_t end) {
  return ExtensionData{w.at(r.leaf_space, r.overlap).slice_rows(begin, end),
                       w.at(r.leaf_space, r.leaf_nonoverlap).slice_rows(begin, end),
                       w.at(r.base_space, r.overlap).slice_rows(begin, end),
                       w.at(r.base_space, r.base_nonoverlap).slice_rows(begin, end)};
}

struct AggregationCounts {
  std::size_t overlap = 0;
  std::size_t leaf = 0;
  std::size_t base = 0;
};

// Generates the selected centric families, shuffles them together and adds noise.
inline QuadrupleList aggregate_pseudo_pairs(const ExtensionData& d, const AggregationConfig& cfg,
                                            const CentricitySet& which, AggregationCounts* counts = nullptr) {
  cfg.validate();
  std::vector<QuadrupleList> lists;
  AggregationCounts c;
  if (which.overlap) {
    lists.push_back(generate_overlap_centric(d.leaf_overlap, d.base_overlap, d.leaf_nonoverlap, d.base_nonoverlap, cfg));
    c.overlap = lists.back().size();
  }
  if (which.leaf) {
    lists.push_back(generate_nonoverlap_centric(d.leaf_nonoverlap, d.leaf_overlap, d.base_overlap, d.base_nonoverlap,
                                                cfg, QuerySide::leaf));
    c.leaf = lists.back().size();
  }
  if (which.base) {
    lists.push_back(generate_nonoverlap_centric(d.base_nonoverlap, d.base_overlap, d.leaf_overlap, d.leaf_nonoverlap,
                                                cfg, QuerySide::base));
    c.base = lists.back().size();
  }
  if (counts) *counts = c;
  QuadrupleList set = build_training_set(lists, cfg.seed);
  return add_gaussian_noise(std::move(set), cfg.noise_variance, cfg.seed, cfg.renormalize_after_noise);
}

// ---------------------------------------------------------------------------
// Experiment config file (JSON). Relative paths resolve against the config's directory.

struct EvalPair {
  std::string query;    // "space.modality"
  std::string gallery;  // "space.modality"
  std::string ground_truth = "identity";  // "identity" or a path to one index per line
  std::optional<std::pair<std::size_t, std::size_t>> rows;
};

struct ClassifyTask {
  std::string samples;           // "space.modality"
  std::filesystem::path templates;        // stacked EMB1 of all template embeddings
  std::filesystem::path template_classes; // one class index per template row
  std::filesystem::path labels;           // one class index per sample row
  std::optional<std::pair<std::size_t, std::size_t>> rows;
};

struct ExperimentConfig {
  AggregationConfig aggregation;
  TrainConfig train;
  CentricitySet centricities;
  std::size_t fl_depth = 1;
  std::size_t fm_stages = 2;
  bool final_activation = false;
  std::string base_space;
  std::vector<std::string> leaves;
  std::map<std::string, std::map<std::string, std::filesystem::path>> embeddings;
  std::optional<std::pair<std::size_t, std::size_t>> train_rows;
  std::vector<EvalPair> eval_pairs;
  std::vector<ClassifyTask> classify;
  std::filesystem::path out_dir;

  std::map<std::string, std::vector<std::string>> layout() const {
    std::map<std::string, std::vector<std::string>> out;
    for (const auto& [space, mods] : embeddings)
      for (const auto& [m, path] : mods) out[space].push_back(m);
    return out;
  }

  std::filesystem::path path_of(const std::string& space, const std::string& modality) const {
    auto s = embeddings.find(space);
    if (s == embeddings.end() || !s->second.count(modality)) {
      throw ConfigError("no embeddings configured for " + space + "." + modality);
    }
    return s->second.at(modality);
  }

  std::filesystem::path cache_path(const std::string& leaf) const { return out_dir / (leaf + ".pqd"); }
  std::filesystem::path checkpoint_path(const std::string& leaf) const { return out_dir / (leaf + ".exp1"); }
  std::filesystem::path loss_log_path(const std::string& leaf) const { return out_dir / (leaf + ".loss.csv"); }
};

namespace detail {

inline std::string join_list(const nlohmann::json& j) {
  if (j.is_string()) return j.get<std::string>();
  std::string s;
  for (const auto& item : j) s += (s.empty() ? "" : ",") + item.get<std::string>();
  return s;
}

inline std::optional<std::pair<std::size_t, std::size_t>> parse_rows(const nlohmann::json& j, const char* key) {
  if (!j.contains(key)) return std::nullopt;
  const auto& r = j.at(key);
  if (!r.is_array() || r.size() != 2) throw ConfigError(std::string(key) + " must be [begin, end]");
  return std::pair{r[0].get<std::size_t>(), r[1].get<std::size_t>()};
}

}  // namespace detail

inline std::pair<std::string, std::string> split_key(const std::string& key) {
  const auto dot = key.find('.');
  if (dot == std::string::npos || dot == 0 || dot + 1 == key.size()) {
    throw ConfigError("expected 'space.modality', got '" + key + "'");
  }
  return {key.substr(0, dot), key.substr(dot + 1)};
}

inline ExperimentConfig parse_experiment_config(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  static const std::vector<std::string> known = {
      "tau1",     "tau2",     "lambda",     "noise_variance", "batch_size", "epochs",     "lr0",
      "weight_decay", "seed", "centricities", "loss_mask",   "fl_depth",   "fm_stages",  "embeddings",
      "eval_pairs", "out_dir", "base_space", "leaves",        "train_rows", "classify",   "final_activation"};
  for (const auto& [key, value] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) throw ConfigError("unknown config key '" + key + "'");
  }
  auto resolve = [&](const std::string& p) {
    const std::filesystem::path path(p);
    return path.is_absolute() ? path : base_dir / path;
  };

  ExperimentConfig c;
  try {
    c.aggregation.tau1 = j.value("tau1", c.aggregation.tau1);
    c.aggregation.noise_variance = j.value("noise_variance", c.aggregation.noise_variance);
    c.train.tau2 = j.value("tau2", c.train.tau2);
    c.train.lambda = j.value("lambda", c.train.lambda);
    c.train.batch_size = j.value("batch_size", c.train.batch_size);
    c.train.epochs = j.value("epochs", c.train.epochs);
    c.train.lr0 = j.value("lr0", c.train.lr0);
    c.train.weight_decay = j.value("weight_decay", c.train.weight_decay);
    const std::uint64_t seed = j.value("seed", std::uint64_t{0});
    c.aggregation.seed = seed;
    c.train.seed = seed;
    if (j.contains("centricities")) c.centricities = CentricitySet::parse(detail::join_list(j.at("centricities")));
    if (j.contains("loss_mask")) c.train.loss_mask = LossMask::parse(detail::join_list(j.at("loss_mask")));
    c.fl_depth = j.value("fl_depth", c.fl_depth);
    c.fm_stages = j.value("fm_stages", c.fm_stages);
    c.final_activation = j.value("final_activation", c.final_activation);

    if (!j.contains("embeddings")) throw ConfigError("config needs 'embeddings'");
    for (const auto& [space, mods] : j.at("embeddings").items()) {
      for (const auto& [modality, path] : mods.items()) c.embeddings[space][modality] = resolve(path.get<std::string>());
    }
    if (!j.contains("base_space")) throw ConfigError("config needs 'base_space'");
    c.base_space = j.at("base_space").get<std::string>();
    if (j.contains("leaves")) {
      c.leaves = j.at("leaves").get<std::vector<std::string>>();
    } else {
      for (const auto& [space, mods] : c.embeddings)
        if (space != c.base_space) c.leaves.push_back(space);
    }
    c.train_rows = detail::parse_rows(j, "train_rows");
    if (j.contains("eval_pairs")) {
      for (const auto& e : j.at("eval_pairs")) {
        EvalPair p{e.at("query").get<std::string>(), e.at("gallery").get<std::string>(),
                   e.value("ground_truth", std::string("identity")), detail::parse_rows(e, "rows")};
        if (p.ground_truth != "identity") p.ground_truth = resolve(p.ground_truth).string();
        c.eval_pairs.push_back(std::move(p));
      }
    }
    if (j.contains("classify")) {
      for (const auto& e : j.at("classify")) {
        c.classify.push_back(ClassifyTask{e.at("samples").get<std::string>(), resolve(e.at("templates").get<std::string>()),
                                          resolve(e.at("template_classes").get<std::string>()),
                                          resolve(e.at("labels").get<std::string>()), detail::parse_rows(e, "rows")});
      }
    }
    c.out_dir = resolve(j.value("out_dir", std::string("out")));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }

  c.aggregation.validate();
  c.train.validate();
  for (const auto& [space, mods] : c.embeddings) {
    for (const auto& [modality, path] : mods) {
      if (!std::filesystem::exists(path)) throw ConfigError("missing embedding file " + path.string());
    }
  }
  if (!c.embeddings.count(c.base_space)) throw ConfigError("base_space '" + c.base_space + "' has no embeddings");
  for (const auto& leaf : c.leaves) resolve_roles(c.layout(), c.base_space, leaf);
  return c;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed config " + path.string() + ": " + e.what());
  }
  return parse_experiment_config(j, path.parent_path());
}

// Config for a synthetic world written by write_world into the same directory.
inline nlohmann::json synth_experiment_json(const SynthWorld& world, std::size_t holdout) {
  nlohmann::json j;
  j["tau1"] = 0.01;
  j["tau2"] = 0.05;
  j["lambda"] = 0.1;
  j["noise_variance"] = 0.004;
  j["batch_size"] = 256;
  j["epochs"] = 30;
  j["lr0"] = 1e-3;
  j["weight_decay"] = 0.01;
  j["seed"] = world.config.seed;
  j["centricities"] = "overlap,leaf,base";
  j["loss_mask"] = "avc,atc,tvc,ttc";
  j["fl_depth"] = 1;
  j["fm_stages"] = 2;
  const std::string base = world.config.spaces.front().id;
  j["base_space"] = base;
  std::vector<std::string> leaves;
  for (const auto& s : world.config.spaces) {
    for (const auto& m : s.modalities) j["embeddings"][s.id][m] = s.id + "." + m + ".emb";
    if (s.id != base) leaves.push_back(s.id);
  }
  j["leaves"] = leaves;
  const std::size_t n = world.config.n_items;
  const std::size_t split = n > holdout ? n - holdout : n;
  j["train_rows"] = {0, split};
  nlohmann::json pairs = nlohmann::json::array();
  auto add = [&](const std::string& q, const std::string& g) {
    pairs.push_back({{"query", q}, {"gallery", g}, {"ground_truth", "identity"}, {"rows", {split, n}}});
  };
  const auto layout = space_layout(world);
  const auto& base_mods = layout.at(base);
  add(base + "." + base_mods[0], base + "." + base_mods[1]);
  std::vector<std::string> uniques;
  for (const auto& leaf : leaves) {
    const auto r = resolve_roles(layout, base, leaf);
    add(leaf + "." + r.leaf_nonoverlap, base + "." + r.base_nonoverlap);
    add(leaf + "." + r.leaf_nonoverlap, base + "." + r.overlap);
    uniques.push_back(leaf + "." + r.leaf_nonoverlap);
  }
  for (std::size_t a = 0; a < uniques.size(); ++a)
    for (std::size_t b = a + 1; b < uniques.size(); ++b) add(uniques[a], uniques[b]);
  j["eval_pairs"] = pairs;
  j["out_dir"] = "run";
  return j;
}

}  // namespace mcr
