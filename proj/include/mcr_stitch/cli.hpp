#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mcr_stitch/experiment.hpp"

// Entry point of the mcr-stitch command line tool. Exit codes: 0 success,
// 1 runtime or validation failure, 2 usage error.
namespace mcr::cli {

inline constexpr int kOk = 0;
inline constexpr int kFailure = 1;
inline constexpr int kUsage = 2;

struct Overrides {
  std::optional<std::string> leaf;
  std::optional<std::string> centric;
  std::optional<std::string> loss_mask;
  std::optional<std::size_t> fl_depth;
  std::optional<std::size_t> fm_stages;
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> batch_size;
  std::optional<std::uint64_t> seed;
  std::size_t checkpoint_every = 0;
  std::vector<std::string> checkpoints;  // "space=path"
  std::optional<std::string> results;
};

inline void apply(ExperimentConfig& c, const Overrides& o) {
  if (o.centric) c.centricities = CentricitySet::parse(*o.centric);
  if (o.loss_mask) c.train.loss_mask = LossMask::parse(*o.loss_mask);
  if (o.fl_depth) c.fl_depth = *o.fl_depth;
  if (o.fm_stages) c.fm_stages = *o.fm_stages;
  if (o.epochs) c.train.epochs = *o.epochs;
  if (o.batch_size) c.train.batch_size = *o.batch_size;
  if (o.seed) {
    c.train.seed = *o.seed;
    c.aggregation.seed = *o.seed;
  }
  c.train.validate();
}

inline std::vector<std::string> selected_leaves(const ExperimentConfig& c, const Overrides& o) {
  if (!o.leaf) return c.leaves;
  if (std::find(c.leaves.begin(), c.leaves.end(), *o.leaf) == c.leaves.end()) {
    throw ConfigError("'" + *o.leaf + "' is not a configured leaf space");
  }
  return {*o.leaf};
}

inline EmbeddingMatrix load_set(const ExperimentConfig& c, const std::string& space, const std::string& modality,
                                const std::optional<std::pair<std::size_t, std::size_t>>& rows) {
  auto [m, manifest] = load_embeddings(c.path_of(space, modality));
  if (!m.normalized()) m = l2_normalize(m);
  return rows ? m.slice_rows(rows->first, rows->second) : m;
}

inline ExtensionData load_extension_data(const ExperimentConfig& c, const ExtensionRoles& r) {
  return ExtensionData{load_set(c, r.leaf_space, r.overlap, c.train_rows),
                       load_set(c, r.leaf_space, r.leaf_nonoverlap, c.train_rows),
                       load_set(c, r.base_space, r.overlap, c.train_rows),
                       load_set(c, r.base_space, r.base_nonoverlap, c.train_rows)};
}

inline ProjectorArch expected_arch(const ExperimentConfig& c, const ExtensionRoles& r) {
  auto arch = ProjectorArch::for_dims(load_set(c, r.leaf_space, r.overlap, std::nullopt).dim(),
                                      load_set(c, r.base_space, r.overlap, std::nullopt).dim());
  arch.fl_depth = c.fl_depth;
  arch.fm_stages = c.fm_stages;
  arch.final_activation = c.final_activation;
  return arch;
}

inline int cmd_aggregate(const ExperimentConfig& c, const Overrides& o, std::ostream& out) {
  std::filesystem::create_directories(c.out_dir);
  for (const auto& leaf : selected_leaves(c, o)) {
    const auto roles = resolve_roles(c.layout(), c.base_space, leaf);
    AggregationCounts counts;
    const auto quads = aggregate_pseudo_pairs(load_extension_data(c, roles), c.aggregation, c.centricities, &counts);
    save_quadruples(quads, c.cache_path(leaf));
    out << "leaf " << leaf << " (overlap " << roles.overlap << ")\n"
        << "  overlap-centric: " << counts.overlap << "\n"
        << "  leaf-centric:    " << counts.leaf << "\n"
        << "  base-centric:    " << counts.base << "\n"
        << "  total:           " << quads.size() << " -> " << c.cache_path(leaf).string() << "\n";
  }
  return kOk;
}

inline int cmd_train(const ExperimentConfig& c, const Overrides& o, std::ostream& out) {
  std::filesystem::create_directories(c.out_dir);
  for (const auto& leaf : selected_leaves(c, o)) {
    const auto roles = resolve_roles(c.layout(), c.base_space, leaf);
    if (!std::filesystem::exists(c.cache_path(leaf))) {
      throw Error("missing pseudo-pair cache " + c.cache_path(leaf).string() + " (run aggregate first)");
    }
    const auto quads = to_matrices(load_quadruples(c.cache_path(leaf)));
    const auto arch = expected_arch(c, roles);
    EpochCallback save_every;
    if (o.checkpoint_every > 0) {
      save_every = [&](std::size_t epoch, const ProjectorParams& pp) {
        if ((epoch + 1) % o.checkpoint_every == 0) {
          save_checkpoint(pp, c.out_dir / (leaf + ".epoch" + std::to_string(epoch + 1) + ".exp1"));
        }
      };
    }
    const auto result = train_extension(quads, init_projector(arch, c.train.seed), c.train, save_every);
    save_checkpoint(result.params, c.checkpoint_path(leaf));
    save_loss_history(result.history, c.loss_log_path(leaf));
    const auto& last = result.history.back();
    out << "leaf " << leaf << ": " << result.history.size() << " steps, loss mask " << c.train.loss_mask.to_string()
        << ", f_m linear layers " << arch.fm_linear_count() << ", final total loss " << last.total << "\n"
        << "  checkpoint " << c.checkpoint_path(leaf).string() << "\n"
        << "  loss log   " << c.loss_log_path(leaf).string() << "\n";
  }
  return kOk;
}

inline std::vector<std::size_t> read_indices(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("missing file: " + path.string());
  std::vector<std::size_t> v;
  long long x = 0;
  while (is >> x) {
    if (x < 0) throw FormatError("negative index in " + path.string());
    v.push_back(static_cast<std::size_t>(x));
  }
  return v;
}

using ProjectorSet = std::map<std::string, ProjectorParams>;

inline EmbeddingMatrix resolve_set(const ExperimentConfig& c, const std::string& key, const ProjectorSet& projectors,
                                   const std::optional<std::pair<std::size_t, std::size_t>>& rows) {
  const auto [space, modality] = split_key(key);
  EmbeddingMatrix m = load_set(c, space, modality, rows);
  if (space == c.base_space) return m;
  auto it = projectors.find(space);
  if (it == projectors.end()) throw Error("no checkpoint for leaf space '" + space + "'");
  return project_and_normalize(it->second, m);
}

struct PairReports {
  RetrievalReport forward;
  std::optional<RetrievalReport> reverse;
};

inline PairReports evaluate_pair(const ExperimentConfig& c, const EvalPair& p, const ProjectorSet& projectors) {
  const auto q = resolve_set(c, p.query, projectors, p.rows);
  const auto g = resolve_set(c, p.gallery, projectors, p.rows);
  const auto gt = p.ground_truth == "identity" ? identity_ground_truth(q.rows()) : read_indices(p.ground_truth);
  PairReports r{retrieval_eval(q, g, gt), std::nullopt};
  if (auto inv = invert_ground_truth(gt, g.rows())) {
    r.reverse = retrieval_eval(g, q, *inv);
    r.reverse->direction = "gallery->query";
  }
  return r;
}

inline int cmd_eval(const ExperimentConfig& c, const Overrides& o, std::ostream& out, std::ostream& err) {
  std::map<std::string, std::filesystem::path> ckpt_paths;
  for (const auto& leaf : c.leaves) ckpt_paths[leaf] = c.checkpoint_path(leaf);
  for (const auto& spec : o.checkpoints) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos) {
      if (c.leaves.size() != 1) throw ConfigError("--checkpoint needs SPACE=PATH when several leaves are configured");
      ckpt_paths[c.leaves.front()] = spec;
    } else {
      ckpt_paths[spec.substr(0, eq)] = spec.substr(eq + 1);
    }
  }

  ProjectorSet projectors;
  for (const auto& [leaf, path] : ckpt_paths) {
    if (!std::filesystem::exists(path)) continue;
    const auto expected = expected_arch(c, resolve_roles(c.layout(), c.base_space, leaf));
    std::ifstream is(path, std::ios::binary);
    ProjectorArch found;
    try {
      found = read_checkpoint_descriptor(is);
    } catch (const FormatError& e) {
      err << "malformed checkpoint " << path.string() << ": " << e.what() << "\n";
      const auto d = describe(expected);
      err << "expected descriptor:\n";
      for (const auto& [k, v] : d) err << "  " << k << " = " << v << "\n";
      return kFailure;
    }
    if (const auto diff = descriptor_diff(expected, found); !diff.empty()) {
      err << "checkpoint " << path.string() << " does not match the configured projector:\n" << diff;
      return kFailure;
    }
    try {
      projectors[leaf] = load_checkpoint(path);
    } catch (const FormatError& e) {
      err << "malformed checkpoint " << path.string() << ": " << e.what() << "\n";
      return kFailure;
    }
  }

  std::ostringstream lines;
  bool preserved = true;
  for (const auto& p : c.eval_pairs) {
    const std::string dataset = p.query + "|" + p.gallery;
    const auto r = evaluate_pair(c, p, projectors);
    write_report_lines(lines, r.forward, dataset, "q2g");
    if (r.reverse) {
      write_report_lines(lines, *r.reverse, dataset, "g2q");
      write_report_lines(lines, mean_report(r.forward, *r.reverse), dataset, "mean");
    }
    const bool base_pair = split_key(p.query).first == c.base_space && split_key(p.gallery).first == c.base_space;
    if (base_pair) {
      const auto untouched = evaluate_pair(c, p, ProjectorSet{});
      const auto check = base_preservation_check(untouched.forward, r.forward);
      lines << "base_preserved," << (check.identical ? "1.0000" : "0.0000") << ',' << dataset << ",check\n";
      if (!check.identical) {
        preserved = false;
        err << "base preservation failed for " << dataset << ":";
        for (const auto& d : check.differences) err << " " << d;
        err << "\n";
      }
    }
  }

  for (const auto& t : c.classify) {
    const auto samples = resolve_set(c, t.samples, projectors, t.rows);
    auto [templates, manifest] = load_embeddings(t.templates);
    if (!templates.normalized()) templates = l2_normalize(templates);
    const auto template_classes = read_indices(t.template_classes);
    if (template_classes.size() != templates.rows()) throw ShapeError("one class index per template row required");
    const std::size_t n_classes = *std::max_element(template_classes.begin(), template_classes.end()) + 1;
    std::vector<std::vector<float>> per_class(n_classes);
    for (std::size_t i = 0; i < templates.rows(); ++i) {
      const auto row = templates.row(i);
      per_class[template_classes[i]].insert(per_class[template_classes[i]].end(), row.begin(), row.end());
    }
    std::vector<EmbeddingMatrix> classes;
    for (std::size_t k = 0; k < n_classes; ++k) {
      if (per_class[k].empty()) throw Error("class " + std::to_string(k) + " has no templates");
      const std::size_t rows = per_class[k].size() / templates.dim();
      classes.emplace_back(rows, templates.dim(), std::move(per_class[k]), true);
    }
    auto labels = read_indices(t.labels);
    if (t.rows) {
      labels = std::vector<std::size_t>(labels.begin() + static_cast<std::ptrdiff_t>(t.rows->first),
                                        labels.begin() + static_cast<std::ptrdiff_t>(t.rows->second));
    }
    write_report_lines(lines, zero_shot_classify(samples, classes, labels), t.samples);
  }

  out << lines.str();
  const auto results = o.results ? std::filesystem::path(*o.results) : c.out_dir / "results.csv";
  std::filesystem::create_directories(results.parent_path().empty() ? "." : results.parent_path());
  std::ofstream rs(results, std::ios::trunc);
  if (!rs) throw Error("cannot open for writing: " + results.string());
  rs << "metric,value,dataset,direction\n" << lines.str();
  return preserved ? kOk : kFailure;
}

struct SynthOptions {
  std::string preset = "four-modality";
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<std::string> config;
  std::optional<std::size_t> items, latent, embed, holdout;
  std::optional<double> gap, noise;
};

inline int cmd_synth(const SynthOptions& s, std::ostream& out) {
  SynthWorldConfig cfg;
  if (s.config) {
    std::ifstream is(*s.config);
    if (!is) throw ConfigError("cannot open synth config " + *s.config);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(is);
      cfg.latent_dim = j.value("latent_dim", cfg.latent_dim);
      cfg.embed_dim = j.value("embed_dim", cfg.embed_dim);
      cfg.n_items = j.value("n_items", cfg.n_items);
      cfg.modality_gap_magnitude = j.value("modality_gap_magnitude", cfg.modality_gap_magnitude);
      cfg.observation_noise_sigma = j.value("observation_noise_sigma", cfg.observation_noise_sigma);
      cfg.seed = j.value("seed", cfg.seed);
      if (j.contains("spaces")) {
        cfg.spaces.clear();
        for (const auto& sp : j.at("spaces")) {
          cfg.spaces.push_back({sp.at("id").get<std::string>(), sp.at("modalities").get<std::vector<std::string>>()});
        }
      }
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("malformed synth config: ") + e.what());
    }
  } else if (s.preset == "two-space") {
    cfg.spaces = {{"base", {"x", "y"}}, {"leaf", {"x", "z"}}};
  } else if (s.preset != "four-modality") {
    throw ConfigError("unknown preset '" + s.preset + "'");
  }
  if (s.seed) cfg.seed = *s.seed;
  if (s.items) cfg.n_items = *s.items;
  if (s.latent) cfg.latent_dim = *s.latent;
  if (s.embed) cfg.embed_dim = *s.embed;
  if (s.gap) cfg.modality_gap_magnitude = *s.gap;
  if (s.noise) cfg.observation_noise_sigma = *s.noise;

  const auto world = generate_world(cfg);
  const std::filesystem::path dir(s.out);
  const auto files = write_world(world, dir);
  const std::size_t holdout = s.holdout.value_or(std::min<std::size_t>(500, cfg.n_items / 4));
  if (holdout == 0 || holdout >= cfg.n_items) throw ConfigError("holdout must be in [1, n_items)");
  std::ofstream cs(dir / "experiment.json", std::ios::trunc);
  cs << synth_experiment_json(world, holdout).dump(2) << "\n";
  for (const auto& f : files) out << f.string() << "\n";
  out << (dir / "experiment.json").string() << "\n";
  return kOk;
}

// Runs the tool with `args` (excluding the program name).
inline int run(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"mcr-stitch: extend a contrastive embedding space onto a frozen base space", "mcr-stitch"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "mcr-stitch 0.1.0");

  SynthOptions synth;
  auto* s = app.add_subcommand("synth", "generate a synthetic multi-space world with ground truth");
  s->add_option("--preset", synth.preset, "four-modality or two-space")->capture_default_str();
  s->add_option("--seed", synth.seed, "world seed");
  s->add_option("--out", synth.out, "output directory")->required();
  s->add_option("--config", synth.config, "JSON world description");
  s->add_option("--items", synth.items, "items per modality");
  s->add_option("--latent", synth.latent, "latent dimension");
  s->add_option("--embed", synth.embed, "embedding dimension");
  s->add_option("--gap", synth.gap, "modality gap magnitude");
  s->add_option("--noise", synth.noise, "observation noise sigma");
  s->add_option("--holdout", synth.holdout, "held-out items for evaluation pairs");

  std::string config_path;
  Overrides o;
  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "experiment config (JSON)")->required();
    cmd->add_option("--leaf", o.leaf, "restrict to one leaf space");
    cmd->add_option("--seed", o.seed, "override the config seed");
  };
  auto add_arch = [&](CLI::App* cmd) {
    cmd->add_option("--fl-depth", o.fl_depth, "linear layers in f_l (1 = single linear map)");
    cmd->add_option("--fm-stages", o.fm_stages, "two-layer MLP stages in f_m");
  };
  auto* agg = app.add_subcommand("aggregate", "build and cache pseudo quadruples");
  add_common(agg);
  agg->add_option("--centric", o.centric, "comma list of overlap,leaf,base");

  auto* train = app.add_subcommand("train", "train a projector from a cached quadruple set");
  add_common(train);
  add_arch(train);
  train->add_option("--loss-mask", o.loss_mask, "comma list of avc,atc,tvc,ttc");
  train->add_option("--epochs", o.epochs, "override epochs");
  train->add_option("--batch-size", o.batch_size, "override batch size");
  train->add_option("--checkpoint-every", o.checkpoint_every, "also save a checkpoint every N epochs");

  auto* eval = app.add_subcommand("eval", "retrieval, classification and base preservation reports");
  add_common(eval);
  add_arch(eval);
  eval->add_option("--checkpoint", o.checkpoints, "SPACE=PATH (repeatable)");
  eval->add_option("--results", o.results, "results file (default <out_dir>/results.csv)");

  auto* run_all = app.add_subcommand("run", "aggregate, train and eval in one go");
  add_common(run_all);
  add_arch(run_all);
  run_all->add_option("--centric", o.centric, "comma list of overlap,leaf,base");
  run_all->add_option("--loss-mask", o.loss_mask, "comma list of avc,atc,tvc,ttc");
  run_all->add_option("--epochs", o.epochs, "override epochs");
  run_all->add_option("--batch-size", o.batch_size, "override batch size");

  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kUsage;
  }

  try {
    if (s->parsed()) return cmd_synth(synth, out);
    ExperimentConfig c = load_experiment_config(config_path);
    apply(c, o);
    if (agg->parsed()) return cmd_aggregate(c, o, out);
    if (train->parsed()) return cmd_train(c, o, out);
    if (eval->parsed()) return cmd_eval(c, o, out, err);
    if (run_all->parsed()) {
      cmd_aggregate(c, o, out);
      cmd_train(c, o, out);
      return cmd_eval(c, o, out, err);
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kUsage;
}

}  // namespace mcr::cli
