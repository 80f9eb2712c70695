#include "misfitlab/pipeline.hpp"

#include "misfitlab/core/io.hpp"
#include "misfitlab/errors.hpp"

namespace misfitlab {

using nlohmann::json;

namespace {

void check_keys(const json& given, const json& known, const std::string& section) {
  if (!given.is_object()) throw ConfigError("config section '" + section + "' must be an object");
  for (const auto& [k, v] : given.items())
    if (!known.contains(k)) throw ConfigError("unknown key '" + k + "' in config section '" + section + "'");
}

template <typename T>
void take(const json& j, const char* key, T& field, const std::string& section) {
  if (!j.contains(key)) return;
  try {
    field = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config " + section + "." + key + " has the wrong type");
  }
}

}  // namespace

json to_json(const UniverseConfig& c) {
  return {{"categories", c.categories},
          {"archetypes", c.archetypes},
          {"style_dim", c.style_dim},
          {"items_per_category_per_archetype", c.items_per_category_per_archetype},
          {"noise_sigma", c.noise_sigma},
          {"image_size", c.image_size},
          {"train_fraction", c.train_fraction},
          {"valid_fraction", c.valid_fraction},
          {"seed", c.seed}};
}

json to_json(const CorpusConfig& c) {
  return {{"train_outfits", c.train_outfits}, {"valid_outfits", c.valid_outfits}, {"test_outfits", c.test_outfits},
          {"n_min", c.n_range.min},           {"n_max", c.n_range.max},             {"disjoint", c.disjoint},
          {"seed", c.seed}};
}

json to_json(const MisfitConfig& c) {
  return {{"m", c.m}, {"seed", c.seed}, {"include_fully_incompatible", c.include_fully_incompatible}, {"disjoint", c.disjoint}};
}

void PipelineConfig::set_seed(std::uint64_t seed) {
  universe.seed = corpus.seed = misfit.seed = flip.seed = victor.seed = seed;
}

json to_json(const PipelineConfig& c) {
  return {{"universe", to_json(c.universe)},
          {"corpus", to_json(c.corpus)},
          {"misfit", to_json(c.misfit)},
          {"flip", to_json(c.flip)},
          {"victor", to_json(c.victor)}};
}

PipelineConfig pipeline_config_from_json(const json& j) {
  PipelineConfig c;
  const auto defaults = to_json(c);
  check_keys(j, defaults, "<root>");
  if (j.contains("universe")) {
    const auto& s = j["universe"];
    check_keys(s, defaults["universe"], "universe");
    take(s, "categories", c.universe.categories, "universe");
    take(s, "archetypes", c.universe.archetypes, "universe");
    take(s, "style_dim", c.universe.style_dim, "universe");
    take(s, "items_per_category_per_archetype", c.universe.items_per_category_per_archetype, "universe");
    take(s, "noise_sigma", c.universe.noise_sigma, "universe");
    take(s, "image_size", c.universe.image_size, "universe");
    take(s, "train_fraction", c.universe.train_fraction, "universe");
    take(s, "valid_fraction", c.universe.valid_fraction, "universe");
    take(s, "seed", c.universe.seed, "universe");
  }
  if (j.contains("corpus")) {
    const auto& s = j["corpus"];
    check_keys(s, defaults["corpus"], "corpus");
    take(s, "train_outfits", c.corpus.train_outfits, "corpus");
    take(s, "valid_outfits", c.corpus.valid_outfits, "corpus");
    take(s, "test_outfits", c.corpus.test_outfits, "corpus");
    take(s, "n_min", c.corpus.n_range.min, "corpus");
    take(s, "n_max", c.corpus.n_range.max, "corpus");
    take(s, "disjoint", c.corpus.disjoint, "corpus");
    take(s, "seed", c.corpus.seed, "corpus");
  }
  if (j.contains("misfit")) {
    const auto& s = j["misfit"];
    check_keys(s, defaults["misfit"], "misfit");
    take(s, "m", c.misfit.m, "misfit");
    take(s, "seed", c.misfit.seed, "misfit");
    take(s, "include_fully_incompatible", c.misfit.include_fully_incompatible, "misfit");
    take(s, "disjoint", c.misfit.disjoint, "misfit");
  }
  if (j.contains("flip")) {
    check_keys(j["flip"], defaults["flip"], "flip");
    c.flip = flip_config_from_json(j["flip"]);
  }
  if (j.contains("victor")) {
    check_keys(j["victor"], defaults["victor"], "victor");
    c.victor = victor_config_from_json(j["victor"]);
  }
  return c;
}

PipelineConfig load_pipeline_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
  auto j = json::parse(core::read_text_file(path), nullptr, false);
  if (j.is_discarded()) throw ConfigError("config file is not valid JSON: " + path.string());
  return pipeline_config_from_json(j);
}

SplitSets split_samples(std::span<const OutfitSample> samples) {
  SplitSets s;
  for (const auto& o : samples) {
    switch (o.split) {
      case Split::train: s.train.push_back(o); break;
      case Split::valid: s.valid.push_back(o); break;
      case Split::test: s.test.push_back(o); break;
    }
  }
  return s;
}

json RunManifest::to_json() const {
  return {{"command", command}, {"config", config},          {"seed", seed},   {"inputs", inputs},
          {"outputs", outputs}, {"wall_time_s", wall_time_s}, {"version", version}};
}

RunManifest RunManifest::from_json(const json& j) {
  RunManifest m;
  try {
    m.command = j.at("command").get<std::string>();
    m.config = j.value("config", json::object());
    m.seed = j.value("seed", std::uint64_t{0});
    m.inputs = j.value("inputs", std::map<std::string, std::string>{});
    m.outputs = j.value("outputs", std::map<std::string, std::string>{});
    m.wall_time_s = j.value("wall_time_s", 0.0);
    m.version = j.value("version", "");
  } catch (const json::exception& e) {
    throw ParseError(kManifestName, e.what());
  }
  return m;
}

bool RunManifest::same_recipe(const RunManifest& o) const {
  return command == o.command && config == o.config && seed == o.seed && inputs == o.inputs;
}

void write_manifest(const std::filesystem::path& dir, const RunManifest& m) {
  core::write_text_file(dir / kManifestName, m.to_json().dump(2) + "\n");
}

RunManifest verified_manifest(const std::filesystem::path& dir, const std::string& producer) {
  const auto path = dir / kManifestName;
  if (!std::filesystem::exists(path))
    throw DataError("no manifest in " + dir.string() + "; run `misfitlab " + producer + "` first");
  auto j = json::parse(core::read_text_file(path), nullptr, false);
  if (j.is_discarded()) throw ParseError(path.string(), "manifest is not valid JSON");
  auto m = RunManifest::from_json(j);
  if (m.command != producer)
    throw DataError(dir.string() + " was produced by `misfitlab " + m.command + "`, expected `misfitlab " + producer + "`");
  for (const auto& [name, hash] : m.outputs) {
    const auto file = dir / name;
    if (!std::filesystem::exists(file))
      throw DataError("artifact " + file.string() + " is missing; rerun `misfitlab " + producer + "`");
    if (core::hash_file(file) != hash)
      throw DataError("artifact " + file.string() + " changed after `misfitlab " + producer + "` wrote it; rerun it");
  }
  return m;
}

bool up_to_date(const std::filesystem::path& dir, const RunManifest& planned) {
  try {
    return verified_manifest(dir, planned.command).same_recipe(planned);
  } catch (const DataError&) {
    return false;
  }
}

}  // namespace misfitlab
