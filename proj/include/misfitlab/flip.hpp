#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "misfitlab/catalog.hpp"
#include "misfitlab/core/graph.hpp"

namespace misfitlab {

// Contrastive image/text pre-training of two small garment encoders whose
// outputs are cached as VICTOR input features.

struct FlipConfig {
  int embed_dim = 64;  // e: encoder output, cached feature width
  int proj_dim = 64;   // p: shared projection space
  int conv1_channels = 8;
  int conv2_channels = 16;
  int kernel = 3;
  int image_size = 32;
  int vocabulary_size = 0;
  int epochs = 20;
  int batch = 32;
  double learning_rate = 1e-4;
  double lr_factor = 0.1;
  int lr_step_epochs = 10;
  double logit_scale_init = std::log(1.0 / 0.07);
  double logit_scale_max = std::log(100.0);
  std::uint64_t seed = 0;
};

nlohmann::json to_json(const FlipConfig& c);
FlipConfig flip_config_from_json(const nlohmann::json& j);
void validate(const FlipConfig& c);

struct FlipModel {
  FlipConfig config;
  // visual encoder
  core::Parameter<double> conv1_w, conv1_b, conv2_w, conv2_b, visual_w, visual_b;
  // text encoder
  core::Parameter<double> token_embedding, text_w, text_b;
  // projections into the shared space
  core::Parameter<double> proj_visual_w, proj_visual_b, proj_text_w, proj_text_b;
  core::Parameter<double> logit_scale;  // 1x1

  std::vector<core::Parameter<double>*> parameters();
  std::vector<const core::Parameter<double>*> parameters() const;
};

FlipModel init_flip(const FlipConfig& config);

using Var = core::Var<double>;

/// Batch of garments as encoder inputs. Garments lacking an image or tokens
/// raise ConfigError.
struct FlipBatch {
  core::Matrix<double> images;  // B x 3·H·W
  std::vector<std::vector<int>> tokens;
  std::size_t size() const { return tokens.size(); }
};

FlipBatch make_flip_batch(std::span<const Garment* const> garments, int image_size);

/// E_V and E_T: B x e. With `train` false the parameters enter the tape as
/// constants.
Var encode_images(core::Graph<double>& g, FlipModel& model, const core::Matrix<double>& images, bool train);
Var encode_texts(core::Graph<double>& g, FlipModel& model, const std::vector<std::vector<int>>& tokens, bool train);

struct FlipForward {
  Var f_visual;  // B x p, rows unit length
  Var f_text;
  Var logits;    // exp(logit_scale) · F_V · F_Tᵀ
  Var loss;
};

/// ½(row-wise CE + column-wise CE) with the diagonal as targets. B < 2
/// throws ContractError.
FlipForward flip_contrastive_loss(core::Graph<double>& g, FlipModel& model, const FlipBatch& batch, bool train = true);

/// Same loss from already projected rows; used by the alignment tests.
Var contrastive_loss_from_projections(Var f_visual, Var f_text, Var logit_scale);

struct FlipEpoch {
  int epoch = 0;  // 0 is the untrained model
  double lr = 0;
  double train_loss = 0;
  double valid_loss = 0;
  double valid_top1 = 0;  // in-batch image→text retrieval
  nlohmann::json to_json() const;
};

struct FlipTrainResult {
  FlipModel model;
  std::vector<FlipEpoch> curve;
  std::size_t train_garments = 0;
  std::size_t valid_garments = 0;
};

struct FlipEvaluation {
  double loss = 0;
  double top1 = 0;
  std::size_t batches = 0;
};

/// Mean loss and top-1 retrieval over consecutive batches of `batch` (the
/// final short batch is kept if it has at least two garments).
FlipEvaluation evaluate_flip(FlipModel& model, std::span<const Garment* const> garments, int batch);

/// Trains on garments of the train split, validates on the valid split.
FlipTrainResult train_flip(const Catalog& catalog, FlipConfig config);

void save_flip(const std::filesystem::path& path, const FlipModel& model, const std::vector<FlipEpoch>& curve = {});
FlipModel load_flip(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Feature cache

enum class Provenance { flip, imagenet_stub, raw };
std::string to_string(Provenance p);
Provenance parse_provenance(const std::string& s);

struct CachedFeatures {
  std::vector<double> visual;
  std::vector<double> text;
  bool operator==(const CachedFeatures&) const = default;
};

struct FeatureCache {
  int e = 0;
  Provenance provenance = Provenance::flip;
  std::string content_hash;
  std::map<std::string, CachedFeatures> entries;

  const CachedFeatures* find(const std::string& garment_id) const;
  /// Throws DataError listing every uncached id.
  void require(std::span<const std::string> garment_ids) const;
  bool operator==(const FeatureCache&) const = default;
};

// File: u64 LE header length, JSON header {e, provenance, content_hash,
// count}, then per garment: u32 id length, id bytes, e visual f64, e text f64.
void save_feature_cache(const std::filesystem::path& path, const FeatureCache& cache);
FeatureCache load_feature_cache(const std::filesystem::path& path);
/// Reads only the JSON header.
nlohmann::json read_feature_cache_header(const std::filesystem::path& path);

struct Omission {
  std::string garment_id;
  std::string reason;
};

struct ExtractionResult {
  FeatureCache cache;
  std::vector<Omission> omissions;
  std::size_t encoder_evaluations = 0;  // garments pushed through an encoder
  bool reused = false;                  // served from an up-to-date cache file
};

/// Hash over provenance, encoder weights and every garment's inputs.
std::string feature_content_hash(const Catalog& catalog, Provenance provenance, const FlipModel* model, int e);

/// Builds features for every garment with the required modalities. `model`
/// is required for flip and imagenet-stub provenance. When `cache_path`
/// holds a cache with the same content hash it is loaded instead.
ExtractionResult extract_features(const Catalog& catalog, Provenance provenance, const FlipModel* model, int e,
                                  const std::optional<std::filesystem::path>& cache_path = std::nullopt);

/// Raw pixel/token features: per-channel 4x4 average-pooled image and the
/// normalised token histogram, each zero-padded to e.
CachedFeatures raw_features(const Garment& g, int vocabulary_size, int e);

/// Randomly initialised, never trained encoders standing in for an
/// off-the-shelf backbone.
FlipModel make_stub_model(FlipConfig config);

}  // namespace misfitlab
