#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

namespace misfitlab {

enum class Split { train, valid, test };

std::string_view to_string(Split s);
Split parse_split(std::string_view s);
inline constexpr Split kAllSplits[] = {Split::train, Split::valid, Split::test};

/// Channel-major RGB grid, values in [0,1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> pixels;  // 3 * height * width

  float at(int c, int y, int x) const { return pixels[static_cast<std::size_t>((c * height + y) * width + x)]; }
  bool operator==(const Image&) const = default;
};

struct Garment {
  std::string id;
  int category_id = 0;
  std::string category_name;
  std::optional<Image> image;
  std::vector<int> text_tokens;
  std::optional<std::vector<double>> cached_visual;
  std::optional<std::vector<double>> cached_text;
  // Synthetic ground truth; absent for adapted real corpora.
  std::optional<int> archetype;
  // Garment-level partition used for disjoint corpora and encoder training.
  std::optional<Split> split;

  bool operator==(const Garment&) const = default;
};

/// Whether `candidate` may stand in for `original` as a hard negative. With
/// archetype ground truth on both, a same-archetype garment would still be
/// compatible, so it is excluded; otherwise any garment qualifies.
inline bool clashes_with(const Garment& candidate, const Garment& original) {
  return !(candidate.archetype && original.archetype && *candidate.archetype == *original.archetype);
}

inline constexpr std::size_t kMinOutfitSize = 2;
inline constexpr std::size_t kMaxOutfitSize = 19;

struct OutfitSample {
  std::string outfit_id;
  std::vector<std::string> garment_ids;
  double t_ocr = 1.0;
  std::vector<std::uint8_t> t_mid;
  Split split = Split::train;

  std::size_t size() const { return garment_ids.size(); }
  bool fully_compatible() const { return t_ocr == 1.0; }
  bool fully_incompatible() const { return t_ocr == 0.0; }
  bool operator==(const OutfitSample&) const = default;
};

/// Throws ContractError unless n ∈ [2,19], t_mid is binary with length n,
/// t_ocr ∈ [0,1] and the two targets agree at the endpoints.
void validate_outfit(const OutfitSample& o);

class Catalog {
 public:
  Catalog() = default;
  explicit Catalog(std::vector<Garment> garments);

  void add(Garment g);
  const Garment* find(std::string_view id) const;
  /// Throws LookupError for unknown ids.
  const Garment& at(std::string_view id) const;
  std::span<const Garment> garments() const { return garments_; }
  std::size_t size() const { return garments_.size(); }
  bool empty() const { return garments_.empty(); }
  /// One past the largest category id present.
  int category_count() const { return static_cast<int>(by_category_.size()); }
  /// Indices into garments() of the given category.
  std::span<const std::size_t> in_category(int category_id) const;
  /// Largest token id plus one.
  int vocabulary_size() const;

  bool operator==(const Catalog& o) const { return garments_ == o.garments_; }

 private:
  std::vector<Garment> garments_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<std::vector<std::size_t>> by_category_;
};

// ---------------------------------------------------------------------------
// Synthetic garment universe

struct UniverseConfig {
  int categories = 8;
  int archetypes = 5;
  int style_dim = 16;
  int items_per_category_per_archetype = 40;
  double noise_sigma = 0.1;
  int image_size = 32;
  double train_fraction = 0.7;
  double valid_fraction = 0.15;
  std::uint64_t seed = 0;
};

struct Vocabulary {
  std::vector<std::string> words;
  int id(std::string_view word) const;
};

struct Universe {
  UniverseConfig config;
  Catalog catalog;
  Vocabulary vocabulary;
  Eigen::MatrixXd centroids;  // archetypes x style_dim
  Eigen::MatrixXd latents;    // garments x style_dim, catalog order
};

/// Builds C·K·items garments. Throws ConfigError when the sampled centroids
/// are not pairwise farther apart than 4·noise_sigma.
Universe generate_universe(const UniverseConfig& config);

Vocabulary universe_vocabulary(const UniverseConfig& config);
std::string category_word(int category_id);
std::string archetype_word(int archetype);

/// Deterministic colour-block render of a latent style vector for a category.
Image render_garment(int category_id, int categories, std::span<const double> latent, int size);

struct SizeRange {
  std::size_t min = 3;
  std::size_t max = 8;
};

/// Fully compatible outfits: one archetype, n distinct categories, one garment
/// of that archetype per category. When `pool` is set only garments whose
/// garment-level split matches are used. Outfits are labelled `label` and
/// numbered from `first_index`.
std::vector<OutfitSample> sample_compatible_outfits(const Catalog& catalog, std::size_t count, SizeRange n_range,
                                                    std::mt19937_64& rng, std::optional<Split> pool = std::nullopt,
                                                    Split label = Split::train, std::size_t first_index = 0);

/// One fully incompatible outfit per input: every garment swapped for a
/// different garment of the same category.
std::vector<OutfitSample> sample_incompatible_outfits(std::span<const OutfitSample> compatible, const Catalog& catalog,
                                                      std::mt19937_64& rng, bool disjoint = false);

// Sized so that 20 epochs at batch 128 give VICTOR enough optimiser steps.
struct CorpusConfig {
  std::size_t train_outfits = 2100;
  std::size_t valid_outfits = 300;
  std::size_t test_outfits = 600;
  SizeRange n_range{3, 8};
  // Garments are partitioned across splits (no garment in two splits).
  bool disjoint = false;
  std::uint64_t seed = 0;
};

struct Corpus {
  Catalog catalog;
  std::vector<OutfitSample> outfits;
  bool operator==(const Corpus&) const = default;
};

/// Compatible outfits per split plus an equal number of fully incompatible ones.
std::vector<OutfitSample> generate_outfits(const Catalog& catalog, const CorpusConfig& config);

/// Throws ReferentialError for unresolved garment ids and ContractError for
/// duplicate outfit ids or inconsistent targets.
void check_corpus(const Corpus& corpus);

/// Canonical corpus JSON; images go to sidecar grids under `<dir>/images/`.
void save_corpus(const std::filesystem::path& path, const Corpus& corpus);
Corpus load_corpus(const std::filesystem::path& path);

/// Outfits only, resolved against an existing catalog on load.
void save_outfits(const std::filesystem::path& path, std::span<const OutfitSample> outfits);
std::vector<OutfitSample> load_outfits(const std::filesystem::path& path, const Catalog& catalog);

void write_image_grid(const std::filesystem::path& path, const Image& image);
Image read_image_grid(const std::filesystem::path& path);

}  // namespace misfitlab
