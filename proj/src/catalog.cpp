#include "misfitlab/catalog.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <unordered_set>

#include <json.hpp>

#include "misfitlab/core/io.hpp"
#include "misfitlab/errors.hpp"

namespace misfitlab {

using nlohmann::json;

std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::valid: return "valid";
    case Split::test: return "test";
  }
  return "train";
}

Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "valid") return Split::valid;
  if (s == "test") return Split::test;
  throw ContractError("unknown split '" + std::string(s) + "'");
}

void validate_outfit(const OutfitSample& o) {
  const auto n = o.size();
  if (n < kMinOutfitSize || n > kMaxOutfitSize)
    throw ContractError("outfit " + o.outfit_id + ": size " + std::to_string(n) + " outside [2, 19]");
  if (o.t_mid.size() != n) throw ContractError("outfit " + o.outfit_id + ": t_mid length differs from garment count");
  if (!(o.t_ocr >= 0.0 && o.t_ocr <= 1.0)) throw ContractError("outfit " + o.outfit_id + ": t_ocr outside [0, 1]");
  std::size_t ones = 0;
  for (auto v : o.t_mid) {
    if (v > 1) throw ContractError("outfit " + o.outfit_id + ": t_mid must be binary");
    ones += v;
  }
  const bool all_zero = ones == 0, all_one = ones == n;
  if ((o.t_ocr == 1.0) != all_zero) throw ContractError("outfit " + o.outfit_id + ": t_ocr == 1 must match an all-zero t_mid");
  if ((o.t_ocr == 0.0) != all_one) throw ContractError("outfit " + o.outfit_id + ": t_ocr == 0 must match an all-one t_mid");
}

// ---------------------------------------------------------------------------
// Catalog

Catalog::Catalog(std::vector<Garment> garments) {
  for (auto& g : garments) add(std::move(g));
}

void Catalog::add(Garment g) {
  if (g.category_id < 0) throw ContractError("garment " + g.id + ": negative category id");
  if (index_.contains(g.id)) throw ContractError("duplicate garment id '" + g.id + "'");
  const auto idx = garments_.size();
  index_.emplace(g.id, idx);
  if (static_cast<std::size_t>(g.category_id) >= by_category_.size()) by_category_.resize(static_cast<std::size_t>(g.category_id) + 1);
  by_category_[static_cast<std::size_t>(g.category_id)].push_back(idx);
  garments_.push_back(std::move(g));
}

const Garment* Catalog::find(std::string_view id) const {
  auto it = index_.find(std::string(id));
  return it == index_.end() ? nullptr : &garments_[it->second];
}

const Garment& Catalog::at(std::string_view id) const {
  const auto* g = find(id);
  if (g == nullptr) throw LookupError("unknown garment id '" + std::string(id) + "'");
  return *g;
}

std::span<const std::size_t> Catalog::in_category(int category_id) const {
  if (category_id < 0 || static_cast<std::size_t>(category_id) >= by_category_.size()) return {};
  return by_category_[static_cast<std::size_t>(category_id)];
}

int Catalog::vocabulary_size() const {
  int mx = -1;
  for (const auto& g : garments_)
    for (int t : g.text_tokens) mx = std::max(mx, t);
  return mx + 1;
}

// ---------------------------------------------------------------------------
// Synthetic universe

namespace {

constexpr const char* kCategoryWords[] = {"top", "bottom", "shoes", "outerwear", "bag", "hat", "jewelry", "scarf"};
constexpr const char* kArchetypeWords[] = {"classic", "boho", "sporty", "grunge", "minimal", "preppy", "romantic", "edgy"};
constexpr int kAttributeLevels = 4;
constexpr int kColourLevels = 8;
constexpr int kBlocksPerSide = 4;
constexpr int kBorder = 2;

double squash(double v) { return 1.0 / (1.0 + std::exp(-1.5 * v)); }

int quantize(double v, int levels) { return std::min(levels - 1, static_cast<int>(squash(v) * levels)); }

// Stride through the latent dimensions that is coprime with k, so each
// category lays the style dimensions out in its own block order.
int block_stride(int k) {
  for (int s = 5;; s += 2)
    if (std::gcd(s, k) == 1) return s;
}

}  // namespace

std::string category_word(int category_id) {
  if (category_id >= 0 && category_id < static_cast<int>(std::size(kCategoryWords))) return kCategoryWords[category_id];
  return "category-" + std::to_string(category_id);
}

std::string archetype_word(int archetype) {
  if (archetype >= 0 && archetype < static_cast<int>(std::size(kArchetypeWords))) return kArchetypeWords[archetype];
  return "style-" + std::to_string(archetype);
}

int Vocabulary::id(std::string_view word) const {
  auto it = std::find(words.begin(), words.end(), word);
  if (it == words.end()) throw LookupError("word '" + std::string(word) + "' not in vocabulary");
  return static_cast<int>(it - words.begin());
}

Vocabulary universe_vocabulary(const UniverseConfig& config) {
  Vocabulary v;
  for (int c = 0; c < config.categories; ++c) v.words.push_back(category_word(c));
  for (int a = 0; a < config.archetypes; ++a) v.words.push_back(archetype_word(a));
  for (int q = 0; q < kAttributeLevels; ++q) v.words.push_back("tone-" + std::to_string(q));
  for (int q = 0; q < kAttributeLevels; ++q) v.words.push_back("texture-" + std::to_string(q));
  return v;
}

Image render_garment(int category_id, int categories, std::span<const double> latent, int size) {
  if (size < 8 || size % kBlocksPerSide != 0) throw ConfigError("image size must be a multiple of 4 and at least 8");
  const int k = static_cast<int>(latent.size());
  if (k < 3) throw ConfigError("style_dim must be at least 3 to render");
  Image img{size, size, std::vector<float>(static_cast<std::size_t>(3 * size * size), 1.0f)};
  const int block = size / kBlocksPerSide;
  const int stride = block_stride(k);
  for (int by = 0; by < kBlocksPerSide; ++by)
    for (int bx = 0; bx < kBlocksPerSide; ++bx) {
      const int j = by * kBlocksPerSide + bx;
      const int dim = (j * stride + category_id * 3) % k;
      float rgb[3];
      for (int c = 0; c < 3; ++c)
        rgb[c] = static_cast<float>(quantize(latent[static_cast<std::size_t>((dim + c) % k)], kColourLevels)) /
                 static_cast<float>(kColourLevels - 1);
      for (int c = 0; c < 3; ++c)
        for (int y = by * block; y < (by + 1) * block; ++y)
          for (int x = bx * block; x < (bx + 1) * block; ++x)
            img.pixels[static_cast<std::size_t>((c * size + y) * size + x)] = rgb[c];
    }
  const float tag = categories > 1 ? static_cast<float>(category_id) / static_cast<float>(categories - 1) : 0.0f;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        if (y < kBorder || x < kBorder || y >= size - kBorder || x >= size - kBorder)
          img.pixels[static_cast<std::size_t>((c * size + y) * size + x)] = tag;
  return img;
}

Universe generate_universe(const UniverseConfig& config) {
  if (config.categories < 1 || config.archetypes < 1 || config.style_dim < 3 || config.items_per_category_per_archetype < 1)
    throw ConfigError("universe: categories, archetypes and items must be positive; style_dim >= 3");
  if (!(config.noise_sigma >= 0.0)) throw ConfigError("universe: noise_sigma must be non-negative");
  if (config.train_fraction <= 0.0 || config.valid_fraction < 0.0 || config.train_fraction + config.valid_fraction > 1.0)
    throw ConfigError("universe: split fractions must be within [0, 1]");

  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> unit(0.0, 1.0);
  const int k = config.style_dim;
  Universe u;
  u.config = config;
  u.vocabulary = universe_vocabulary(config);
  u.centroids.resize(config.archetypes, k);
  for (Eigen::Index i = 0; i < u.centroids.size(); ++i) u.centroids.data()[i] = unit(rng);

  const double margin = 4.0 * config.noise_sigma;
  for (int a = 0; a < config.archetypes; ++a)
    for (int b = a + 1; b < config.archetypes; ++b) {
      const double dist = (u.centroids.row(a) - u.centroids.row(b)).norm();
      if (!(dist > margin))
        throw ConfigError("universe: archetype centroids " + std::to_string(a) + " and " + std::to_string(b) +
                          " are " + std::to_string(dist) + " apart, need > 4*noise_sigma = " + std::to_string(margin));
    }

  const int items = config.items_per_category_per_archetype;
  const std::size_t total = static_cast<std::size_t>(config.categories) * config.archetypes * items;
  u.latents.resize(static_cast<Eigen::Index>(total), k);
  std::normal_distribution<double> noise(0.0, config.noise_sigma);
  const int cat_base = 0, arch_base = config.categories, tone_base = arch_base + config.archetypes,
            texture_base = tone_base + kAttributeLevels;

  std::vector<int> order(static_cast<std::size_t>(items));
  const auto n_train = static_cast<int>(std::lround(config.train_fraction * items));
  const auto n_valid = static_cast<int>(std::lround(config.valid_fraction * items));

  std::size_t row = 0;
  for (int c = 0; c < config.categories; ++c)
    for (int a = 0; a < config.archetypes; ++a) {
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), rng);
      std::vector<Split> split_of(static_cast<std::size_t>(items));
      for (int i = 0; i < items; ++i) {
        const int r = order[static_cast<std::size_t>(i)];
        split_of[static_cast<std::size_t>(r)] = i < n_train ? Split::train : (i < n_train + n_valid ? Split::valid : Split::test);
      }
      for (int i = 0; i < items; ++i, ++row) {
        std::vector<double> z(static_cast<std::size_t>(k));
        for (int d = 0; d < k; ++d) {
          z[static_cast<std::size_t>(d)] = u.centroids(a, d) + noise(rng);
          u.latents(static_cast<Eigen::Index>(row), d) = z[static_cast<std::size_t>(d)];
        }
        char id[16];
        std::snprintf(id, sizeof(id), "g%05zu", row);
        Garment g;
        g.id = id;
        g.category_id = c;
        g.category_name = category_word(c);
        g.image = render_garment(c, config.categories, z, config.image_size);
        g.text_tokens = {cat_base + c, arch_base + a, tone_base + quantize(z[0], kAttributeLevels),
                         texture_base + quantize(z[1], kAttributeLevels)};
        g.archetype = a;
        g.split = split_of[static_cast<std::size_t>(i)];
        u.catalog.add(std::move(g));
      }
    }
  return u;
}

// ---------------------------------------------------------------------------
// Outfit sampling

namespace {

std::string outfit_id(std::size_t index) {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "o%06zu", index);
  return buf;
}

void check_range(SizeRange r) {
  if (r.min < kMinOutfitSize || r.max > kMaxOutfitSize || r.min > r.max)
    throw ConfigError("n_range must satisfy 2 <= min <= max <= 19");
}

bool in_pool(const Garment& g, std::optional<Split> pool) { return !pool || (g.split && *g.split == *pool); }

}  // namespace

std::vector<OutfitSample> sample_compatible_outfits(const Catalog& catalog, std::size_t count, SizeRange n_range,
                                                    std::mt19937_64& rng, std::optional<Split> pool, Split label,
                                                    std::size_t first_index) {
  check_range(n_range);
  const int categories = catalog.category_count();
  if (static_cast<int>(n_range.max) > categories)
    throw ConfigError("n_range max " + std::to_string(n_range.max) + " exceeds the " + std::to_string(categories) +
                      " available categories");
  int archetypes = 0;
  for (const auto& g : catalog.garments()) {
    if (!g.archetype) throw ConfigError("catalog has no archetype ground truth for garment " + g.id);
    archetypes = std::max(archetypes, *g.archetype + 1);
  }
  // (category, archetype) -> garment indices
  std::vector<std::vector<std::size_t>> cell(static_cast<std::size_t>(categories * archetypes));
  const auto garments = catalog.garments();
  for (std::size_t i = 0; i < garments.size(); ++i)
    if (in_pool(garments[i], pool))
      cell[static_cast<std::size_t>(garments[i].category_id * archetypes + *garments[i].archetype)].push_back(i);

  std::uniform_int_distribution<int> pick_arch(0, archetypes - 1);
  std::uniform_int_distribution<std::size_t> pick_n(n_range.min, n_range.max);
  std::vector<OutfitSample> out;
  out.reserve(count);
  std::vector<int> cats;
  for (std::size_t o = 0; o < count; ++o) {
    const int a = pick_arch(rng);
    cats.clear();
    for (int c = 0; c < categories; ++c)
      if (!cell[static_cast<std::size_t>(c * archetypes + a)].empty()) cats.push_back(c);
    const std::size_t n = pick_n(rng);
    if (cats.size() < n) throw ConfigError("archetype " + std::to_string(a) + " has too few populated categories");
    for (std::size_t i = 0; i < n; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, cats.size() - 1);
      std::swap(cats[i], cats[pick(rng)]);
    }
    OutfitSample s;
    s.outfit_id = outfit_id(first_index + o);
    s.split = label;
    s.t_ocr = 1.0;
    s.t_mid.assign(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& bucket = cell[static_cast<std::size_t>(cats[i] * archetypes + a)];
      std::uniform_int_distribution<std::size_t> pick(0, bucket.size() - 1);
      s.garment_ids.push_back(garments[bucket[pick(rng)]].id);
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<OutfitSample> sample_incompatible_outfits(std::span<const OutfitSample> compatible, const Catalog& catalog,
                                                      std::mt19937_64& rng, bool disjoint) {
  std::vector<OutfitSample> out;
  out.reserve(compatible.size());
  std::vector<std::size_t> candidates;
  const auto garments = catalog.garments();
  for (const auto& src : compatible) {
    OutfitSample s;
    s.outfit_id = src.outfit_id + "-x";
    s.split = src.split;
    s.t_ocr = 0.0;
    s.t_mid.assign(src.size(), 1);
    for (const auto& id : src.garment_ids) {
      const auto& original = catalog.at(id);
      const std::optional<Split> pool = disjoint ? original.split : std::nullopt;
      candidates.clear();
      for (auto idx : catalog.in_category(original.category_id))
        if (garments[idx].id != id && in_pool(garments[idx], pool) && clashes_with(garments[idx], original))
          candidates.push_back(idx);
      if (candidates.empty()) throw DataError("category " + std::to_string(original.category_id) + " has no alternative to " + id);
      std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
      s.garment_ids.push_back(garments[candidates[pick(rng)]].id);
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<OutfitSample> generate_outfits(const Catalog& catalog, const CorpusConfig& config) {
  std::mt19937_64 rng(config.seed);
  std::vector<OutfitSample> all;
  std::size_t next = 0;
  const std::pair<Split, std::size_t> plan[] = {
      {Split::train, config.train_outfits}, {Split::valid, config.valid_outfits}, {Split::test, config.test_outfits}};
  for (auto [split, count] : plan) {
    if (count == 0) continue;
    const std::optional<Split> pool = config.disjoint ? std::optional<Split>(split) : std::nullopt;
    auto compat = sample_compatible_outfits(catalog, count, config.n_range, rng, pool, split, next);
    next += count;
    auto incompat = sample_incompatible_outfits(compat, catalog, rng, config.disjoint);
    all.insert(all.end(), compat.begin(), compat.end());
    all.insert(all.end(), incompat.begin(), incompat.end());
  }
  return all;
}

void check_corpus(const Corpus& corpus) {
  std::unordered_set<std::string> seen;
  for (const auto& o : corpus.outfits) {
    if (!seen.insert(o.outfit_id).second) throw ContractError("outfit id '" + o.outfit_id + "' appears more than once");
    validate_outfit(o);
    for (const auto& id : o.garment_ids)
      if (corpus.catalog.find(id) == nullptr) throw ReferentialError(id);
  }
}

// ---------------------------------------------------------------------------
// Persistence

void write_image_grid(const std::filesystem::path& path, const Image& image) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  core::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(image.height));
  core::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(image.width));
  for (float v : image.pixels) core::write_le<float>(out, v);
}

Image read_image_grid(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image grid " + path.string());
  Image img;
  img.height = static_cast<int>(core::read_le<std::uint32_t>(in, path.string()));
  img.width = static_cast<int>(core::read_le<std::uint32_t>(in, path.string()));
  if (img.height <= 0 || img.width <= 0 || img.height > 4096 || img.width > 4096)
    throw ParseError(path.string(), "implausible grid extents");
  img.pixels.resize(static_cast<std::size_t>(3 * img.height * img.width));
  for (auto& v : img.pixels) v = core::read_le<float>(in, path.string());
  return img;
}

namespace {

const json& require(const json& j, const char* key, const std::string& ptr) {
  if (!j.is_object()) throw ParseError(ptr, "expected an object");
  auto it = j.find(key);
  if (it == j.end()) throw ParseError(ptr + "/" + key, "missing required field");
  return *it;
}

template <typename T>
T get_as(const json& j, const std::string& ptr) {
  try {
    return j.get<T>();
  } catch (const json::exception& e) {
    throw ParseError(ptr, e.what());
  }
}


json outfits_json(std::span<const OutfitSample> outfits) {
  json arr = json::array();
  for (const auto& o : outfits) {
    std::vector<int> mid(o.t_mid.begin(), o.t_mid.end());
    arr.push_back({{"outfit_id", o.outfit_id},
                   {"garment_ids", o.garment_ids},
                   {"t_ocr", o.t_ocr},
                   {"t_mid", mid},
                   {"split", std::string(to_string(o.split))}});
  }
  return arr;
}

std::vector<OutfitSample> outfits_from_json(const json& arr) {
  if (!arr.is_array()) throw ParseError("/outfits", "expected an array");
  std::vector<OutfitSample> out;
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const std::string ptr = "/outfits/" + std::to_string(i);
    const auto& e = arr[i];
    OutfitSample o;
    o.outfit_id = get_as<std::string>(require(e, "outfit_id", ptr), ptr + "/outfit_id");
    o.garment_ids = get_as<std::vector<std::string>>(require(e, "garment_ids", ptr), ptr + "/garment_ids");
    o.t_ocr = get_as<double>(require(e, "t_ocr", ptr), ptr + "/t_ocr");
    for (int v : get_as<std::vector<int>>(require(e, "t_mid", ptr), ptr + "/t_mid")) {
      if (v != 0 && v != 1) throw ParseError(ptr + "/t_mid", "entries must be 0 or 1");
      o.t_mid.push_back(static_cast<std::uint8_t>(v));
    }
    try {
      o.split = parse_split(get_as<std::string>(require(e, "split", ptr), ptr + "/split"));
      validate_outfit(o);
    } catch (const ContractError& err) {
      throw ParseError(ptr, err.what());
    }
    out.push_back(std::move(o));
  }
  return out;
}

}  // namespace

void save_corpus(const std::filesystem::path& path, const Corpus& corpus) {
  const auto dir = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
  json doc;
  doc["garments"] = json::array();
  for (const auto& g : corpus.catalog.garments()) {
    json e = {{"id", g.id}, {"category_id", g.category_id}, {"category_name", g.category_name}, {"text_tokens", g.text_tokens}};
    if (g.image) {
      const std::string rel = "images/" + g.id + ".grid";
      write_image_grid(dir / rel, *g.image);
      e["image_path"] = rel;
    }
    if (g.archetype) e["archetype"] = *g.archetype;
    if (g.split) e["split"] = std::string(to_string(*g.split));
    doc["garments"].push_back(std::move(e));
  }
  doc["outfits"] = outfits_json(corpus.outfits);
  core::write_text_file(path, doc.dump(1));
}

Corpus load_corpus(const std::filesystem::path& path) {
  const std::string text = core::read_text_file(path);
  const auto dir = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
  Corpus corpus;
  if (text.find_first_not_of(" \t\r\n") == std::string::npos) return corpus;

  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError("", e.what());
  }
  if (!doc.is_object()) throw ParseError("", "corpus root must be an object");

  if (doc.contains("garments")) {
    const auto& arr = doc["garments"];
    if (!arr.is_array()) throw ParseError("/garments", "expected an array");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      const std::string ptr = "/garments/" + std::to_string(i);
      const auto& e = arr[i];
      Garment g;
      g.id = get_as<std::string>(require(e, "id", ptr), ptr + "/id");
      g.category_id = get_as<int>(require(e, "category_id", ptr), ptr + "/category_id");
      if (g.category_id < 0) throw ParseError(ptr + "/category_id", "must be non-negative");
      g.category_name = get_as<std::string>(require(e, "category_name", ptr), ptr + "/category_name");
      g.text_tokens = get_as<std::vector<int>>(require(e, "text_tokens", ptr), ptr + "/text_tokens");
      for (int t : g.text_tokens)
        if (t < 0) throw ParseError(ptr + "/text_tokens", "token ids must be non-negative");
      if (e.contains("image_path")) g.image = read_image_grid(dir / get_as<std::string>(e["image_path"], ptr + "/image_path"));
      if (e.contains("archetype")) g.archetype = get_as<int>(e["archetype"], ptr + "/archetype");
      if (e.contains("split")) {
        try {
          g.split = parse_split(get_as<std::string>(e["split"], ptr + "/split"));
        } catch (const ContractError& err) {
          throw ParseError(ptr + "/split", err.what());
        }
      }
      if (corpus.catalog.find(g.id) != nullptr) throw ParseError(ptr + "/id", "duplicate garment id '" + g.id + "'");
      corpus.catalog.add(std::move(g));
    }
  }

  if (doc.contains("outfits")) corpus.outfits = outfits_from_json(doc["outfits"]);
  try {
    check_corpus(corpus);
  } catch (const ContractError& err) {
    throw ParseError("/outfits", err.what());
  }
  return corpus;
}

void save_outfits(const std::filesystem::path& path, std::span<const OutfitSample> outfits) {
  core::write_text_file(path, json{{"outfits", outfits_json(outfits)}}.dump(1));
}

std::vector<OutfitSample> load_outfits(const std::filesystem::path& path, const Catalog& catalog) {
  json doc;
  try {
    doc = json::parse(core::read_text_file(path));
  } catch (const json::exception& e) {
    throw ParseError(path.string(), e.what());
  }
  if (!doc.is_object() || !doc.contains("outfits")) throw ParseError(path.string(), "expected {\"outfits\": [...]}");
  Corpus c{catalog, outfits_from_json(doc["outfits"])};
  try {
    check_corpus(c);
  } catch (const ContractError& err) {
    throw ParseError(path.string() + "#/outfits", err.what());
  }
  return std::move(c.outfits);
}

}  // namespace misfitlab
