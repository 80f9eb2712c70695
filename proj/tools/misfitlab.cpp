// misfitlab: one entrypoint for every pipeline stage.
//
//   generate-universe -> gen-misfits -> train-flip -> extract-features
//     -> train-victor -> evaluate
//
// Each artifact-producing stage writes a manifest.json next to its outputs and
// verifies its predecessors' manifests before reading their files.

#include <CLI11.hpp>

#include <chrono>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <optional>

#include "misfitlab/core/io.hpp"
#include "misfitlab/errors.hpp"
#include "misfitlab/eval.hpp"
#include "misfitlab/flops.hpp"
#include "misfitlab/pipeline.hpp"
#include "misfitlab/serve.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace misfitlab;

namespace {

struct Common {
  std::optional<std::uint64_t> seed;
  std::string config;
  std::string out;
  bool force = false;
};

void add_common(CLI::App* cmd, Common& c, bool needs_out = true) {
  cmd->add_option("--seed", c.seed, "Root seed for every stage (overrides the config file)");
  cmd->add_option("--config", c.config, "JSON config file; flags win over it")->check(CLI::ExistingFile);
  auto* out = cmd->add_option("--out", c.out, "Output directory");
  if (needs_out) out->required();
  cmd->add_flag("--force", c.force, "Rerun even if the output is up to date");
}

PipelineConfig load_config(const Common& c) {
  PipelineConfig cfg = c.config.empty() ? PipelineConfig{} : load_pipeline_config(c.config);
  if (c.seed) cfg.set_seed(*c.seed);
  return cfg;
}

std::string abs_string(const fs::path& p) { return fs::weakly_canonical(fs::absolute(p)).string(); }

RunManifest planned(std::string command, json config, std::uint64_t seed) {
  RunManifest m;
  m.command = std::move(command);
  m.config = std::move(config);
  m.seed = seed;
  return m;
}

// Records `dir/name` of a verified upstream run as an input.
void add_input(RunManifest& m, const fs::path& dir, const std::string& name) {
  m.inputs[abs_string(dir / name)] = core::hash_file(dir / name);
}

// Runs `body` unless `out` already holds the same recipe, then hashes the
// files it reports and writes the manifest.
template <typename F>
void run_stage(const fs::path& out, RunManifest planned, bool force, F&& body) {
  planned.version = kVersion;
  if (!force && up_to_date(out, planned)) {
    std::cerr << planned.command << ": " << out.string() << " is up to date (use --force to rerun)\n";
    return;
  }
  fs::create_directories(out);
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<std::string> outputs = body();
  planned.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  for (const auto& name : outputs) planned.outputs[name] = core::hash_file(out / name);
  write_manifest(out, planned);
  std::cerr << planned.command << ": wrote " << out.string() << " in " << planned.wall_time_s << " s\n";
}

void write_jsonl(const fs::path& path, const std::vector<json>& rows) {
  std::string text;
  for (const auto& r : rows) text += r.dump() + "\n";
  core::write_text_file(path, text);
}

Catalog corpus_catalog(const fs::path& dir) {
  verified_manifest(dir, "generate-universe");
  return load_corpus(dir / "corpus.json").catalog;
}

// -- generate-universe -------------------------------------------------------

void generate_universe_cmd(const Common& c) {
  const auto cfg = load_config(c);
  auto m = planned("generate-universe", {{"universe", to_json(cfg.universe)}, {"corpus", to_json(cfg.corpus)}}, cfg.universe.seed);
  run_stage(c.out, m, c.force, [&] {
    const auto u = generate_universe(cfg.universe);
    Corpus corpus{u.catalog, generate_outfits(u.catalog, cfg.corpus)};
    check_corpus(corpus);
    save_corpus(fs::path(c.out) / "corpus.json", corpus);
    std::cout << "garments " << corpus.catalog.size() << ", outfits " << corpus.outfits.size() << "\n";
    return std::vector<std::string>{"corpus.json"};
  });
}

// -- gen-misfits -------------------------------------------------------------

void gen_misfits_cmd(const Common& c, const std::string& corpus_dir, std::optional<int> m_flag) {
  auto cfg = load_config(c);
  if (m_flag) cfg.misfit.m = *m_flag;
  verified_manifest(corpus_dir, "generate-universe");
  const fs::path out = fs::path(c.out) / ("misfits_m" + std::to_string(cfg.misfit.m));
  auto m = planned("gen-misfits", {{"misfit", to_json(cfg.misfit)}, {"upstream", {{"corpus", abs_string(corpus_dir)}}}}, cfg.misfit.seed);
  add_input(m, corpus_dir, "corpus.json");
  run_stage(out, m, c.force, [&] {
    const auto corpus = load_corpus(fs::path(corpus_dir) / "corpus.json");
    const auto ds = build_misfit_dataset(corpus.outfits, corpus.catalog, cfg.misfit);
    for (const auto& w : ds.warnings) std::cerr << "warning: " << w << "\n";
    save_outfits(out / "dataset.json", ds.samples);
    write_replacements(out / "replacements.jsonl", ds.records);
    core::write_text_file(out / "report.json", ds.report.to_json().dump(2) + "\n");
    const auto shares = ds.report.shares();
    std::cout << "samples " << ds.report.total() << ": compatible " << 100 * shares.compatible << "%, misfits " << 100 * shares.misfits
              << "%, incompatible " << 100 * shares.incompatible << "%\n";
    return std::vector<std::string>{"dataset.json", "replacements.jsonl", "report.json"};
  });
}

// -- train-flip --------------------------------------------------------------

void train_flip_cmd(const Common& c, const std::string& corpus_dir) {
  const auto cfg = load_config(c);
  verified_manifest(corpus_dir, "generate-universe");
  auto m = planned("train-flip", {{"flip", to_json(cfg.flip)}}, cfg.flip.seed);
  add_input(m, corpus_dir, "corpus.json");
  run_stage(c.out, m, c.force, [&] {
    const auto catalog = load_corpus(fs::path(corpus_dir) / "corpus.json").catalog;
    auto res = train_flip(catalog, cfg.flip);
    std::vector<json> rows;
    for (const auto& e : res.curve) {
      rows.push_back(e.to_json());
      std::cerr << e.to_json().dump() << "\n";
    }
    save_flip(fs::path(c.out) / "flip.bin", res.model, res.curve);
    write_jsonl(fs::path(c.out) / "curve.jsonl", rows);
    return std::vector<std::string>{"flip.bin", "curve.jsonl"};
  });
}

// -- extract-features --------------------------------------------------------

void extract_features_cmd(const Common& c, const std::string& corpus_dir, const std::string& flip_dir,
                          const std::string& provenance_name) {
  const auto cfg = load_config(c);
  const auto provenance = parse_provenance(provenance_name);
  verified_manifest(corpus_dir, "generate-universe");
  auto m = planned("extract-features", {{"provenance", provenance_name}, {"e", cfg.victor.e}, {"flip", to_json(cfg.flip)}}, cfg.flip.seed);
  add_input(m, corpus_dir, "corpus.json");
  if (provenance == Provenance::flip) {
    if (flip_dir.empty()) throw ConfigError("--flip is required for flip provenance");
    verified_manifest(flip_dir, "train-flip");
    add_input(m, flip_dir, "flip.bin");
  }
  run_stage(c.out, m, c.force, [&] {
    const auto catalog = load_corpus(fs::path(corpus_dir) / "corpus.json").catalog;
    std::optional<FlipModel> model;
    if (provenance == Provenance::flip) model = load_flip(fs::path(flip_dir) / "flip.bin");
    if (provenance == Provenance::imagenet_stub) {
      auto fc = cfg.flip;
      if (fc.vocabulary_size == 0) fc.vocabulary_size = catalog.vocabulary_size();
      model = make_stub_model(fc);
    }
    const auto res = extract_features(catalog, provenance, model ? &*model : nullptr, cfg.victor.e);
    save_feature_cache(fs::path(c.out) / "features.bin", res.cache);
    std::vector<json> rows;
    for (const auto& o : res.omissions) rows.push_back({{"garment_id", o.garment_id}, {"reason", o.reason}});
    write_jsonl(fs::path(c.out) / "omissions.jsonl", rows);
    std::cout << "features " << res.cache.entries.size() << ", omitted " << res.omissions.size() << "\n";
    return std::vector<std::string>{"features.bin", "omissions.jsonl"};
  });
}

// -- train-victor ------------------------------------------------------------

struct VictorInputs {
  fs::path data_dir, features_dir, corpus_dir;
  int m = 0;
  std::vector<OutfitSample> samples;
  FeatureCache cache;
};

VictorInputs load_victor_inputs(const fs::path& data_dir, const fs::path& features_dir) {
  VictorInputs in;
  in.data_dir = data_dir;
  in.features_dir = features_dir;
  const auto dm = verified_manifest(data_dir, "gen-misfits");
  verified_manifest(features_dir, "extract-features");
  in.corpus_dir = dm.config.at("upstream").at("corpus").get<std::string>();
  in.m = dm.config.at("misfit").at("m").get<int>();
  const auto catalog = corpus_catalog(in.corpus_dir);
  in.samples = load_outfits(data_dir / "dataset.json", catalog);
  in.cache = load_feature_cache(features_dir / "features.bin");
  return in;
}

struct VictorFlags {
  std::optional<std::string> mode;
  std::optional<double> alpha;
  std::optional<int> epochs, batch;
  bool multimodal = false;
};

VictorConfig victor_config(const PipelineConfig& cfg, const VictorFlags& f) {
  auto v = cfg.victor;
  if (f.mode) v.task_mode = parse_task_mode(*f.mode);
  if (f.alpha) v.alpha = *f.alpha;
  if (f.epochs) v.epochs = *f.epochs;
  if (f.batch) v.batch = *f.batch;
  if (f.multimodal) v.multimodal = true;
  validate(v);
  return v;
}

fs::path train_victor_run(const Common& c, const VictorConfig& vc, const VictorInputs& in, const fs::path& parent) {
  const fs::path out = parent / vc.label(in.m);
  auto m = planned("train-victor", {{"victor", to_json(vc)},
                           {"upstream", {{"data", abs_string(in.data_dir)}, {"features", abs_string(in.features_dir)}}}}, vc.seed);
  add_input(m, in.data_dir, "dataset.json");
  add_input(m, in.features_dir, "features.bin");
  run_stage(out, m, c.force, [&] {
    const auto sets = split_samples(in.samples);
    std::vector<json> rows;
    auto res = train_victor(sets.train, sets.valid, in.cache, vc, [&](const EpochMetrics& e) {
      rows.push_back(e.to_json());
      std::cerr << vc.label(in.m) << " " << e.to_json().dump() << "\n";
    });
    write_jsonl(out / "metrics.jsonl", rows);
    save_victor(out / "model.bin", res.model,
                {{"features", abs_string(in.features_dir / "features.bin")},
                 {"features_hash", in.cache.content_hash},
                 {"data", abs_string(in.data_dir)},
                 {"m", in.m},
                 {"selected_epoch", res.checkpoints[res.selected].epoch}});
    core::write_text_file(out / "selection.json",
                          json{{"selected_epoch", res.checkpoints[res.selected].epoch}, {"criteria", {"mae", "binary_accuracy", "exact_match"}}}
                                  .dump(2) + "\n");
    return std::vector<std::string>{"model.bin", "metrics.jsonl", "selection.json"};
  });
  return out;
}

void train_victor_cmd(const Common& c, const std::string& data, const std::string& features, const VictorFlags& f) {
  const auto cfg = load_config(c);
  const auto vc = victor_config(cfg, f);
  const auto in = load_victor_inputs(data, features);
  const auto out = train_victor_run(c, vc, in, c.out);
  std::cout << out.string() << "\n";
}

// -- evaluate ----------------------------------------------------------------

json report_row(const std::string& label, const MetricReport& r) {
  json j = r.to_json();
  j["model"] = label;
  return j;
}

std::string fmt(const std::optional<double>& v, int precision) {
  if (!v) return "-";
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(precision);
  os << *v;
  return os.str();
}

std::string ablation_table(const std::vector<std::pair<std::string, MetricReport>>& rows, std::size_t best) {
  std::ostringstream os;
  os << std::left << std::setw(24) << "Model" << std::right << std::setw(8) << "MAE" << std::setw(10) << "Acc %" << std::setw(10)
     << "EM %" << std::setw(8) << "AUC" << "\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& [label, r] = rows[i];
    os << std::left << std::setw(24) << (label + (i == best ? " *" : "")) << std::right << std::setw(8) << fmt(r.mae, 3)
       << std::setw(10) << fmt(r.binary_accuracy, 2) << std::setw(10) << fmt(r.exact_match, 2) << std::setw(8) << fmt(r.auc, 3)
       << "\n";
  }
  os << "* TOPSIS choice among the MTL rows (MAE, accuracy, exact match)\n";
  return os.str();
}

void evaluate_cmd(const Common& c, const std::string& model_dir, std::string data, std::string features, const std::string& split_name,
                  bool ablation, const VictorFlags& f) {
  const auto cfg = load_config(c);
  const auto split = parse_split(split_name);
  const fs::path out = c.out;
  auto m = planned("evaluate", {{"split", split_name}, {"ablation", ablation}}, cfg.victor.seed);

  if (!ablation) {
    if (model_dir.empty()) throw ConfigError("evaluate needs --model (or --ablation with --data and --features)");
    verified_manifest(model_dir, "train-victor");
    const auto extra = read_victor_extra(fs::path(model_dir) / "model.bin");
    if (data.empty()) data = extra.at("data").get<std::string>();
    if (features.empty()) features = fs::path(extra.at("features").get<std::string>()).parent_path().string();
    add_input(m, model_dir, "model.bin");
    const auto in = load_victor_inputs(data, features);
    add_input(m, in.data_dir, "dataset.json");
    add_input(m, in.features_dir, "features.bin");
    run_stage(out, m, c.force, [&] {
      const auto model = load_victor(fs::path(model_dir) / "model.bin");
      std::vector<OutfitSample> samples;
      for (const auto& s : in.samples)
        if (s.split == split) samples.push_back(s);
      const auto report = evaluate_victor(model, samples, in.cache);
      json doc = {{"model", model.config.label(in.m)}, {"model_version", model_hash(model)}, {"split", split_name},
                  {"metrics", report.to_json()}};
      core::write_text_file(out / "metrics.json", doc.dump(2) + "\n");
      std::cout << doc.dump(2) << "\n";
      return std::vector<std::string>{"metrics.json"};
    });
    return;
  }

  if (data.empty() || features.empty()) throw ConfigError("--ablation needs --data and --features");
  const auto in = load_victor_inputs(data, features);
  add_input(m, in.data_dir, "dataset.json");
  add_input(m, in.features_dir, "features.bin");
  auto base = victor_config(cfg, f);
  m.config["victor"] = to_json(base);
  run_stage(out, m, c.force, [&] {
    std::vector<VictorConfig> runs;
    for (auto mode : {TaskMode::OCr, TaskMode::MID}) {
      auto v = base;
      v.task_mode = mode;
      runs.push_back(v);
    }
    for (double alpha : {0.2, 0.5, 1.0, 2.0}) {
      auto v = base;
      v.task_mode = TaskMode::MTL;
      v.alpha = alpha;
      runs.push_back(v);
    }
    std::vector<std::pair<std::string, MetricReport>> rows;
    std::vector<std::size_t> mtl_rows;
    for (const auto& v : runs) {
      const auto dir = train_victor_run(c, v, in, out / "runs");
      const auto model = load_victor(dir / "model.bin");
      std::vector<OutfitSample> samples;
      for (const auto& s : in.samples)
        if (s.split == split) samples.push_back(s);
      if (v.task_mode == TaskMode::MTL) mtl_rows.push_back(rows.size());
      rows.emplace_back(v.label(in.m), evaluate_victor(model, samples, in.cache));
    }
    Eigen::MatrixXd matrix(static_cast<Eigen::Index>(mtl_rows.size()), 3);
    for (std::size_t k = 0; k < mtl_rows.size(); ++k) {
      const auto& r = rows[mtl_rows[k]].second;
      matrix.row(static_cast<Eigen::Index>(k)) << *r.mae, *r.binary_accuracy, *r.exact_match;
    }
    const std::vector<Criterion> criteria{{"mae", false, 1.0}, {"binary_accuracy", true, 1.0}, {"exact_match", true, 1.0}};
    const auto best = mtl_rows[topsis_select(matrix, criteria)];
    json doc = {{"split", split_name}, {"m", in.m}, {"rows", json::array()}, {"topsis_best", rows[best].first}};
    for (const auto& [label, r] : rows) doc["rows"].push_back(report_row(label, r));
    const auto table = ablation_table(rows, best);
    core::write_text_file(out / "ablation.json", doc.dump(2) + "\n");
    core::write_text_file(out / "ablation.txt", table);
    std::cout << table;
    return std::vector<std::string>{"ablation.json", "ablation.txt"};
  });
}

// -- flops-report ------------------------------------------------------------

void flops_cmd(const Common& c, int items, int tokens) {
  const auto cfg = load_config(c);
  auto flip = cfg.flip;
  if (flip.vocabulary_size == 0) flip.vocabulary_size = 64;
  auto m = planned("flops-report", {{"flip", to_json(flip)}, {"victor", to_json(cfg.victor)}, {"items", items}, {"tokens", tokens}}, 0);
  run_stage(c.out, m, c.force, [&] {
    const auto reference = reference_flops_table();
    const auto desk = desk_flops_row(flip, cfg.victor, items, tokens);
    const auto doc = flops_report_json(reference, desk, count_flops(cfg.victor, items), count_flip_flops(flip, tokens));
    auto rows = reference;
    rows.push_back(desk);
    core::write_text_file(fs::path(c.out) / "flops.json", doc.dump(2) + "\n");
    std::cout << format_flops_table(rows);
    std::cout << "mean recomputed reduction over the published rows: " << mean_recomputed_reduction(reference) << "%\n";
    return std::vector<std::string>{"flops.json"};
  });
}

// -- serve -------------------------------------------------------------------

Service* g_service = nullptr;

void serve_cmd(ServeSettings flags, bool port_given) {
  const auto settings = resolve_settings(std::move(flags), port_given);
  auto ctx = std::make_shared<const ServeContext>(load_context(settings));
  Service service(ctx, settings.cors_origin);
  g_service = &service;
  std::signal(SIGINT, [](int) {
    if (g_service) g_service->stop();
  });
  std::signal(SIGTERM, [](int) {
    if (g_service) g_service->stop();
  });
  std::cerr << "serving model " << ctx->model_version << " on http://" << settings.host << ":" << settings.port << "\n";
  if (!service.listen(settings.host, settings.port)) {
    g_service = nullptr;
    throw std::runtime_error("cannot listen on " + settings.host + ":" + std::to_string(settings.port));
  }
  g_service = nullptr;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"misfitlab: outfit compatibility and mismatching-item detection at desk scale"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  Common common;
  std::string corpus_dir, flip_dir, data_dir, features_dir, model_dir, provenance = "flip", split = "test";
  std::optional<int> m_flag;
  VictorFlags vflags;
  bool ablation = false;
  int items = 5, tokens = 4;

  auto* gu = app.add_subcommand("generate-universe", "Synthetic garment universe and compatible/incompatible outfits");
  add_common(gu, common);

  auto* gm = app.add_subcommand("gen-misfits", "Partially mismatching outfits into <out>/misfits_m<m>");
  add_common(gm, common);
  gm->add_option("--corpus", corpus_dir, "generate-universe output directory")->required();
  gm->add_option("--m", m_flag, "MISFITs per eligible outfit")->check(CLI::PositiveNumber);

  auto* tf = app.add_subcommand("train-flip", "Contrastive image-text encoders");
  add_common(tf, common);
  tf->add_option("--corpus", corpus_dir, "generate-universe output directory")->required();

  auto* ef = app.add_subcommand("extract-features", "Cache per-garment features");
  add_common(ef, common);
  ef->add_option("--corpus", corpus_dir, "generate-universe output directory")->required();
  ef->add_option("--flip", flip_dir, "train-flip output directory");
  ef->add_option("--provenance", provenance, "flip | imagenet_stub | raw")->check(CLI::IsMember({"flip", "imagenet_stub", "raw"}));

  auto add_victor_flags = [&](CLI::App* cmd) {
    cmd->add_option("--data", data_dir, "gen-misfits output directory (…/misfits_m<m>)");
    cmd->add_option("--features", features_dir, "extract-features output directory");
    cmd->add_option("--mode", vflags.mode, "OCb | OCr | MID | MTL");
    cmd->add_option("--alpha", vflags.alpha, "MID loss weight in MTL mode");
    cmd->add_option("--epochs", vflags.epochs, "Training epochs");
    cmd->add_option("--batch", vflags.batch, "Batch size");
    cmd->add_flag("--multimodal", vflags.multimodal, "Concatenate text features");
  };
  auto* tv = app.add_subcommand("train-victor", "Train VICTOR into <out>/VICTOR[mode;alpha;m]");
  add_common(tv, common);
  add_victor_flags(tv);

  auto* ev = app.add_subcommand("evaluate", "Metrics on a split; --ablation trains OCr, MID and the MTL alpha grid");
  add_common(ev, common);
  add_victor_flags(ev);
  ev->add_option("--model", model_dir, "train-victor run directory");
  ev->add_option("--split", split, "train | valid | test")->check(CLI::IsMember({"train", "valid", "test"}));
  ev->add_flag("--ablation", ablation, "Run the task-mode and alpha ablation");

  auto* fr = app.add_subcommand("flops-report", "Analytic FLOPs table");
  add_common(fr, common);
  fr->add_option("--items", items, "Garments per outfit for the desk row")->check(CLI::Range(2, 19));
  fr->add_option("--tokens", tokens, "Tokens per description")->check(CLI::PositiveNumber);

  ServeSettings serve_flags;
  std::string serve_model, serve_catalog, serve_features;
  auto* sv = app.add_subcommand("serve", "HTTP inference service");
  sv->add_option("--model", serve_model, "VICTOR model.bin (or MISFITLAB_MODEL)");
  sv->add_option("--catalog", serve_catalog, "corpus.json with the catalog (or MISFITLAB_CATALOG)");
  sv->add_option("--features", serve_features, "features.bin (default: the one recorded in the model)");
  sv->add_option("--host", serve_flags.host, "Bind address");
  auto* port_opt = sv->add_option("--port", serve_flags.port, "Port (or MISFITLAB_PORT)");
  sv->add_option("--cors-origin", serve_flags.cors_origin, "Access-Control-Allow-Origin value");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gu) generate_universe_cmd(common);
    if (*gm) gen_misfits_cmd(common, corpus_dir, m_flag);
    if (*tf) train_flip_cmd(common, corpus_dir);
    if (*ef) extract_features_cmd(common, corpus_dir, flip_dir, provenance);
    if (*tv) {
      if (data_dir.empty() || features_dir.empty()) throw ConfigError("train-victor needs --data and --features");
      train_victor_cmd(common, data_dir, features_dir, vflags);
    }
    if (*ev) evaluate_cmd(common, model_dir, data_dir, features_dir, split, ablation, vflags);
    if (*fr) flops_cmd(common, items, tokens);
    if (*sv) {
      serve_flags.model = serve_model;
      serve_flags.catalog = serve_catalog;
      serve_flags.features = serve_features;
      serve_cmd(serve_flags, port_opt->count() > 0);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
  return 0;
}
