#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "misfitlab/catalog.hpp"

namespace misfitlab {

struct MisfitConfig {
  int m = 2;  // MISFITs per eligible outfit
  std::uint64_t seed = 0;
  bool include_fully_incompatible = true;
  // Replacements come from the source garment's own split.
  bool disjoint = false;
};

struct ReplacementRecord {
  std::string source_outfit_id;
  std::string misfit_id;
  std::vector<std::size_t> positions;       // sorted P
  std::vector<std::string> replaced_with;   // aligned with positions
  std::vector<std::size_t> skipped;         // drawn positions with no legal replacement
  std::size_t n = 0;

  std::size_t r() const { return positions.size(); }
  bool operator==(const ReplacementRecord&) const = default;
};

/// Legal number of replaced garments for an outfit of size n: [1, n-2] for
/// n > 3, exactly 1 for n == 3, none for n <= 2.
std::optional<std::pair<std::size_t, std::size_t>> replacement_range(std::size_t n);

/// Target score of an outfit with r of n garments replaced: (n - r) / n.
double misfit_score(std::size_t n, std::size_t r);

struct MisfitBatch {
  std::vector<OutfitSample> misfits;
  std::vector<ReplacementRecord> records;
  std::vector<std::string> warnings;
};

/// Turns each fully compatible outfit with n > 2 into `m` partially
/// mismatching ones. Throws ContractError for inputs with t_ocr != 1.
MisfitBatch generate_misfits(std::span<const OutfitSample> compatible, const Catalog& catalog, const MisfitConfig& config);

struct Composition {
  double compatible = 0;
  double misfits = 0;
  double incompatible = 0;
};

/// Dataset shares for `compatible` matched outfits (and as many incompatible
/// ones) of which `eligible` have n > 2.
Composition expected_composition(std::size_t compatible, std::size_t eligible, int m);

struct DistributionReport {
  int m = 0;
  std::size_t compatible = 0;
  std::size_t misfits = 0;
  std::size_t incompatible = 0;
  std::size_t ineligible = 0;
  std::map<Split, std::size_t> per_split;
  std::map<double, std::size_t> t_ocr_histogram;
  std::string note;

  std::size_t total() const { return compatible + misfits + incompatible; }
  Composition shares() const;
  nlohmann::json to_json() const;
};

struct MisfitDataset {
  std::vector<OutfitSample> samples;
  std::vector<ReplacementRecord> records;
  std::vector<std::string> warnings;
  DistributionReport report;
};

/// Combines the original compatible and incompatible outfits with generated
/// MISFITs. Requires matched compatible/incompatible counts when fully
/// incompatible outfits are included.
MisfitDataset build_misfit_dataset(std::span<const OutfitSample> outfits, const Catalog& catalog, const MisfitConfig& config);

nlohmann::json to_json(const ReplacementRecord& r);
ReplacementRecord record_from_json(const nlohmann::json& j);
void write_replacements(const std::filesystem::path& path, std::span<const ReplacementRecord> records);
std::vector<ReplacementRecord> read_replacements(const std::filesystem::path& path);

}  // namespace misfitlab
