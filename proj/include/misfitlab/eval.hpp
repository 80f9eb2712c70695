#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "misfitlab/catalog.hpp"
#include "misfitlab/core/graph.hpp"

namespace misfitlab {

struct OutfitPrediction {
  double y_ocr = 0.5;
  std::vector<double> y_mid;  // length n
};

/// Outfit-level score used to rank outfits for OC_b AUC.
enum class AucScore {
  ocr,          // y_ocr
  mid_complement  // 1 - mean(y_mid), for models without a trained OC_r head
};

struct MetricReport {
  std::optional<double> mae;
  std::optional<double> binary_accuracy;  // percent
  std::optional<double> exact_match;      // percent
  std::optional<double> auc;
  std::string auc_note;  // why auc is undefined, when it is
  std::size_t outfits = 0;
  std::size_t items = 0;
  std::size_t auc_outfits = 0;

  nlohmann::json to_json() const;
};

struct MetricOptions {
  double threshold = 0.5;
  AucScore auc_score = AucScore::ocr;
};

/// All four metrics over non-padded items. Throws ContractError when the
/// prediction and target lists are not aligned.
MetricReport compute_metrics(std::span<const OutfitPrediction> predictions, std::span<const OutfitSample> targets,
                             const MetricOptions& options = {});

struct AucResult {
  std::optional<double> value;
  std::string note;
};

/// Mann-Whitney AUC from average ranks: P(score of a positive > score of a
/// negative), ties counted one half. Undefined when a class is absent.
AucResult roc_auc(std::span<const double> scores, std::span<const int> labels);

// ---------------------------------------------------------------------------
// TOPSIS

struct Criterion {
  std::string name;
  bool benefit = true;  // false: smaller is better
  double weight = 1.0;
};

/// Closeness to the ideal point for each row (alternative) of `matrix`
/// after vector normalisation of each column. Throws ContractError for an
/// empty matrix, a column count that does not match `criteria`, or an
/// all-zero column.
Eigen::VectorXd topsis_scores(const Eigen::MatrixXd& matrix, std::span<const Criterion> criteria);

/// Index of the highest closeness; ties go to the earliest row.
std::size_t topsis_select(const Eigen::MatrixXd& matrix, std::span<const Criterion> criteria);

struct CheckpointRecord {
  int epoch = 0;
  double lr = 0;
  double train_loss = 0;
  MetricReport valid;
  std::vector<core::Matrix<double>> weights;  // parameter snapshot in model order
};

/// Checkpoint choice over (MAE cost, accuracy benefit, exact match benefit),
/// equal weights. Criteria missing from any record, or zero in every record,
/// are left out. Returns the index into `records`.
std::size_t select_checkpoint(std::span<const CheckpointRecord> records);

}  // namespace misfitlab
