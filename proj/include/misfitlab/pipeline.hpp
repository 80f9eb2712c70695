#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "misfitlab/catalog.hpp"
#include "misfitlab/flip.hpp"
#include "misfitlab/misfit.hpp"
#include "misfitlab/victor.hpp"

namespace misfitlab {

nlohmann::json to_json(const UniverseConfig& c);
nlohmann::json to_json(const CorpusConfig& c);
nlohmann::json to_json(const MisfitConfig& c);

/// One config file drives every stage; sections may be omitted.
struct PipelineConfig {
  UniverseConfig universe;
  CorpusConfig corpus;
  MisfitConfig misfit;
  FlipConfig flip;
  VictorConfig victor;

  /// Same root seed for every stage.
  void set_seed(std::uint64_t seed);
};

nlohmann::json to_json(const PipelineConfig& c);
/// Unknown sections or keys are ConfigErrors, so typos do not silently fall
/// back to defaults.
PipelineConfig pipeline_config_from_json(const nlohmann::json& j);
PipelineConfig load_pipeline_config(const std::filesystem::path& path);

struct SplitSets {
  std::vector<OutfitSample> train, valid, test;
};
SplitSets split_samples(std::span<const OutfitSample> samples);

// ---------------------------------------------------------------------------
// Run manifests

struct RunManifest {
  std::string command;
  nlohmann::json config = nlohmann::json::object();
  std::uint64_t seed = 0;
  std::map<std::string, std::string> inputs;   // path -> content hash
  std::map<std::string, std::string> outputs;  // file name in the run dir -> content hash
  double wall_time_s = 0;
  std::string version;

  nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);
  /// Same command, config, seed and inputs.
  bool same_recipe(const RunManifest& o) const;
};

inline constexpr const char* kManifestName = "manifest.json";

void write_manifest(const std::filesystem::path& dir, const RunManifest& m);

/// Reads `<dir>/manifest.json` and re-hashes every recorded output. A missing
/// manifest, a different producing command or a changed file is a DataError
/// that names the command to rerun.
RunManifest verified_manifest(const std::filesystem::path& dir, const std::string& producer);

/// True when `dir` holds a manifest with the same recipe whose outputs are intact.
bool up_to_date(const std::filesystem::path& dir, const RunManifest& planned);

}  // namespace misfitlab
