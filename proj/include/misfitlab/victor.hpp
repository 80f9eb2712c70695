#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "misfitlab/catalog.hpp"
#include "misfitlab/core/graph.hpp"
#include "misfitlab/core/ops.hpp"
#include "misfitlab/eval.hpp"
#include "misfitlab/flip.hpp"

namespace misfitlab {

enum class TaskMode { OCb, OCr, MID, MTL };
std::string to_string(TaskMode m);
TaskMode parse_task_mode(const std::string& s);

struct VictorConfig {
  int layers = 8;
  int d = 64;
  int heads = 16;
  int ffn_dim = 128;
  double dropout = 0.2;
  int max_items = 19;
  int e = 64;
  bool multimodal = false;
  TaskMode task_mode = TaskMode::MTL;
  double alpha = 0.2;
  int batch = 128;
  int epochs = 20;
  double learning_rate = 1e-4;
  double lr_factor = 0.1;
  int lr_step_epochs = 10;
  std::uint64_t seed = 0;

  int input_dim() const { return multimodal ? 2 * e : e; }
  /// Run label, e.g. VICTOR[MTL;0.2;2] for m = 2.
  std::string label(int m) const;
};

/// Throws ConfigError on any violated constraint (d % h, alpha > 0 for MTL,
/// e >= 2, positive sizes, dropout in [0,1)).
void validate(const VictorConfig& c);
nlohmann::json to_json(const VictorConfig& c);
VictorConfig victor_config_from_json(const nlohmann::json& j);

struct VictorLayer {
  core::Parameter<double> ln1_g, ln1_b, qkv_w, qkv_b, out_w, out_b;
  core::Parameter<double> ln2_g, ln2_b, ff1_w, ff1_b, ff2_w, ff2_b;
};

struct VictorModel {
  VictorConfig config;
  // Per-dimension standardisation of cached features, fitted on the training
  // garments; not trained.
  core::Parameter<double> input_mean, input_inv_std;
  core::Parameter<double> input_w, input_b;
  core::Parameter<double> reg_token;  // 1 x d
  std::vector<VictorLayer> layers;
  // OC_r head: W1·GELU(W0·LN(d_REG)), W0 of width e/2.
  core::Parameter<double> ocr_ln_g, ocr_ln_b, ocr_w0, ocr_b0, ocr_w1, ocr_b1;
  // MID head shared across positions: W·GELU(LN(d_g)).
  core::Parameter<double> mid_ln_g, mid_ln_b, mid_w, mid_b;

  /// Trainable parameters.
  std::vector<core::Parameter<double>*> parameters();
  std::vector<const core::Parameter<double>*> parameters() const;
  /// Everything that is serialised: parameters plus the standardisation.
  std::vector<core::Parameter<double>*> state();
  std::vector<const core::Parameter<double>*> state() const;
};

/// Fits input_mean / input_inv_std on the distinct garments of `outfits`.
void fit_input_standardisation(VictorModel& model, std::span<const OutfitSample* const> outfits, const FeatureCache& cache);

VictorModel init_victor(const VictorConfig& config);

/// Padded batch. Row b, slot s of `features` is row b·max_items + s.
struct BatchedOutfits {
  int max_items = 19;
  core::Matrix<double> features;       // (B·max_items) x input_dim, zero where padded
  std::vector<std::uint8_t> pad_mask;  // B·max_items, 1 = real garment
  std::vector<double> t_ocr;           // B
  std::vector<double> t_mid;           // B·max_items, 0 where padded

  std::size_t size() const { return t_ocr.size(); }
  std::size_t items_in(std::size_t b) const;
};

/// Looks garments up in the cache; multimodal concatenates [visual | text].
/// Throws LookupError naming every uncached garment and ContractError for
/// outfits outside [2, max_items].
BatchedOutfits make_batch(std::span<const OutfitSample* const> outfits, const FeatureCache& cache, const VictorConfig& config);

struct VictorForward {
  core::Var<double> y_ocr;          // B x 1
  core::Var<double> y_mid_packed;   // (Σ n_b) x 1, outfit-major, slot order
  core::Matrix<double> y_mid;       // B x max_items; padded slots hold 0.5 and must be ignored
  std::vector<std::size_t> offsets; // start of outfit b in y_mid_packed
};

/// Eval mode when `rng` is null. A row with fewer than two real garments is a
/// ContractError.
VictorForward victor_forward(core::Graph<double>& g, VictorModel& model, const BatchedOutfits& batch, bool train,
                             std::mt19937_64* rng = nullptr);

/// MTL: MSE(y_ocr, t_ocr) + alpha·BCE(y_mid, t_mid) over real items;
/// OCr: MSE only; MID: BCE only; OCb: BCE of y_ocr against binary labels.
core::Var<double> victor_loss(const VictorForward& f, const BatchedOutfits& batch, TaskMode mode, double alpha);

struct EpochMetrics {
  int epoch = 0;
  double lr = 0;
  double train_loss = 0;
  double valid_loss = 0;
  MetricReport valid;
  nlohmann::json to_json() const;
};

struct VictorTrainResult {
  VictorModel model;  // TOPSIS-selected checkpoint
  std::vector<CheckpointRecord> checkpoints;
  std::vector<EpochMetrics> history;
  std::size_t selected = 0;  // index into checkpoints
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

/// Adam with step decay; after every epoch records validation metrics for the
/// task mode, then restores the TOPSIS-chosen epoch. OCb trains on outfits
/// with binary t_ocr only.
VictorTrainResult train_victor(std::span<const OutfitSample> train, std::span<const OutfitSample> valid,
                               const FeatureCache& cache, const VictorConfig& config, const EpochCallback& on_epoch = {});

/// Metrics the task mode produces: OCr/OCb report MAE (and AUC), MID reports
/// accuracy and exact match (and AUC from 1 - mean y_mid), MTL reports all.
MetricReport mode_metrics(const MetricReport& full, TaskMode mode);
MetricOptions metric_options(TaskMode mode, double threshold = 0.5);

/// Eval-mode predictions in chunks of config.batch.
std::vector<OutfitPrediction> predict(const VictorModel& model, std::span<const OutfitSample> outfits, const FeatureCache& cache);
MetricReport evaluate_victor(const VictorModel& model, std::span<const OutfitSample> outfits, const FeatureCache& cache,
                             double threshold = 0.5);

/// Single forward pass over garment ids. Unknown id → LookupError; n outside
/// [2, max_items] → ContractError.
OutfitPrediction predict_outfit(std::span<const std::string> garment_ids, const VictorModel& model, const FeatureCache& cache);

/// Scores several garment lists in one batched forward pass.
std::vector<OutfitPrediction> predict_outfits(const std::vector<std::vector<std::string>>& outfits, const VictorModel& model,
                                              const FeatureCache& cache);

void save_victor(const std::filesystem::path& path, const VictorModel& model, const nlohmann::json& extra = {});
VictorModel load_victor(const std::filesystem::path& path);
/// The `extra` block passed to save_victor, or an empty object.
nlohmann::json read_victor_extra(const std::filesystem::path& path);
std::string model_hash(const VictorModel& model);

}  // namespace misfitlab
